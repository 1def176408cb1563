//! Static type-level embedding matrices and their on-disk formats.
//!
//! Text format: a `V d` line, then `word v1 ... vd` per row.
//! Binary format: magic `LXTM`, `u32` version, `u64` JSON length, JSON header
//! (provenance, shape, vocabulary), then row-major `f32` LE data.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const MATRIX_MAGIC: &[u8; 4] = b"LXTM";
pub const MATRIX_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    /// Canonical extraction config id, if the matrix was distilled here.
    pub config: Option<String>,
    pub model_id: String,
    /// Words whose AOC vector fell back to the isolated encoding.
    #[serde(default)]
    pub backed_off: Vec<String>,
}

/// `V x d` matrix of `f32` rows in vocabulary order.
#[derive(Clone, Debug, PartialEq)]
pub struct TypeEmbeddingMatrix {
    vocab: Arc<Vocabulary>,
    dim: usize,
    data: Vec<f32>,
    pub provenance: Provenance,
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    rows: usize,
    dim: usize,
    provenance: Provenance,
    vocabulary: Vocabulary,
}

impl TypeEmbeddingMatrix {
    pub fn new(vocab: Arc<Vocabulary>, dim: usize, data: Vec<f32>, provenance: Provenance) -> Result<Self> {
        if data.len() != vocab.len() * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {} rows of dim {dim}",
                data.len(),
                vocab.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("row {:?}", vocab.word(i / dim.max(1)))));
        }
        Ok(TypeEmbeddingMatrix {
            vocab,
            dim,
            data,
            provenance,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn shared_vocab(&self) -> Arc<Vocabulary> {
        Arc::clone(&self.vocab)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.vocab.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_of(&self, word: &str) -> Option<&[f32]> {
        self.vocab.get(word).map(|i| self.row(i))
    }

    /// Row-major copy in `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e| Error::io(path, e);
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        writeln!(out, "{} {}", self.rows(), self.dim).map_err(io_err)?;
        for (i, word) in self.vocab.iter().enumerate() {
            write!(out, "{word}").map_err(io_err)?;
            for v in self.row(i) {
                write!(out, " {v}").map_err(io_err)?;
            }
            writeln!(out).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn read_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty matrix file".into()))?
            .map_err(|e| Error::io(path, e))?;
        let mut dims = first.split_whitespace();
        let (rows, dim) = match (dims.next(), dims.next(), dims.next()) {
            (Some(r), Some(d), None) => (
                r.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad row count {r:?}")))?,
                d.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad dimension {d:?}")))?,
            ),
            _ => return Err(Error::Format(format!("bad shape line {first:?}"))),
        };
        let mut words = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * dim);
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let word = fields.next().expect("non-empty line");
            let before = data.len();
            for f in fields {
                data.push(
                    f.parse::<f32>()
                        .map_err(|_| Error::Format(format!("bad value {f:?} for {word:?}")))?,
                );
            }
            if data.len() - before != dim {
                return Err(Error::DimensionMismatch {
                    word: word.to_string(),
                    expected: dim,
                    actual: data.len() - before,
                });
            }
            words.push(word.to_string());
        }
        if words.len() != rows {
            return Err(Error::Format(format!("header says {rows} rows, found {}", words.len())));
        }
        let vocab = Arc::new(Vocabulary::from_words(&words)?);
        Self::new(vocab, dim, data, Provenance::default())
    }

    pub fn write_binary(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |e| Error::io(path, e);
        let header = BinaryHeader {
            rows: self.rows(),
            dim: self.dim,
            provenance: self.provenance.clone(),
            vocabulary: (*self.vocab).clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
        out.write_all(MATRIX_MAGIC).map_err(io_err)?;
        out.write_all(&MATRIX_VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
        out.write_all(&json).map_err(io_err)?;
        for v in &self.data {
            out.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
        out.flush().map_err(io_err)
    }

    pub fn read_binary(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < 16 || &bytes[0..4] != MATRIX_MAGIC {
            return Err(Error::Format("not a binary matrix file".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != MATRIX_VERSION {
            return Err(Error::Format(format!("unsupported matrix version {version}")));
        }
        let json_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = 16usize
            .checked_add(json_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Corruption("matrix header exceeds file".into()))?;
        let header: BinaryHeader =
            serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Format(e.to_string()))?;
        if header.rows != header.vocabulary.len() {
            return Err(Error::Format("row count does not match vocabulary".into()));
        }
        let expected = header.rows * header.dim * 4;
        if bytes.len() - body != expected {
            return Err(Error::Corruption(format!(
                "expected {expected} data bytes, found {}",
                bytes.len() - body
            )));
        }
        let data = bytes[body..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(Arc::new(header.vocabulary), header.dim, data, header.provenance)
    }

    /// Reads either format, detected by the magic bytes.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut magic = [0u8; 4];
        let n = File::open(path)
            .and_then(|mut f| f.read(&mut magic))
            .map_err(|e| Error::io(path, e))?;
        if n == 4 && &magic == MATRIX_MAGIC {
            Self::read_binary(path)
        } else {
            Self::read_text(path)
        }
    }
}
