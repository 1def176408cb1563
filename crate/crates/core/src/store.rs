//! Binary store of layer-wise contextual token embeddings.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! 0..4    magic "LXTS"
//! 4..8    format_version: u32
//! 8..16   header_json_length: u64
//! ..      UTF-8 JSON header
//! ..      payload: records grouped by word
//! ```
//!
//! Each record is a `u32` token count, one flag byte per token
//! (0 = content, 1 = CLS, 2 = SEP) and then `num_layers * token_count * dim`
//! `f32` values, layer-major. Index offsets in the header are byte offsets
//! from the start of the payload.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufWriter, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use memmap2::Mmap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::vocab::Vocabulary;

pub const STORE_MAGIC: &[u8; 4] = b"LXTS";
pub const STORE_VERSION: u32 = 1;
/// Bytes before the JSON header: magic, version and JSON length.
pub const PREAMBLE_LEN: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SourceKind {
    Mono,
    Multi,
}

impl SourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SourceKind::Mono => "mono",
            SourceKind::Multi => "multi",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TokenFlag {
    Content = 0,
    Cls = 1,
    Sep = 2,
}

impl TryFrom<u8> for TokenFlag {
    type Error = u8;

    fn try_from(b: u8) -> std::result::Result<Self, u8> {
        match b {
            0 => Ok(TokenFlag::Content),
            1 => Ok(TokenFlag::Cls),
            2 => Ok(TokenFlag::Sep),
            other => Err(other),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub word: String,
    pub offset: u64,
    pub count: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoreHeader {
    pub model_id: String,
    pub source_kind: SourceKind,
    pub num_layers: usize,
    pub dim: usize,
    #[serde(default)]
    pub export_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_size: Option<usize>,
    #[serde(default)]
    pub index: Vec<IndexEntry>,
    /// Free-form extractor annotations (tokenizer normalization, whether
    /// isolated inputs carried delimiters, ...).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl StoreHeader {
    pub fn new(model_id: impl Into<String>, source_kind: SourceKind, num_layers: usize, dim: usize) -> Self {
        StoreHeader {
            model_id: model_id.into(),
            source_kind,
            num_layers,
            dim,
            export_seed: None,
            vocab_size: None,
            index: Vec::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn with_export_seed(mut self, seed: u64) -> Self {
        self.export_seed = Some(seed);
        self
    }
}

/// One occurrence of a word: its token flags and all hidden states.
#[derive(Clone, Debug, PartialEq)]
pub struct OccurrenceRecord {
    pub word: String,
    pub flags: Vec<TokenFlag>,
    pub num_layers: usize,
    pub dim: usize,
    /// `[num_layers][token_count][dim]`, flattened.
    pub vectors: Vec<f32>,
}

impl OccurrenceRecord {
    pub fn token_count(&self) -> usize {
        self.flags.len()
    }

    pub fn subword_count(&self) -> usize {
        self.flags.iter().filter(|f| **f == TokenFlag::Content).count()
    }

    pub fn vector(&self, layer: usize, token: usize) -> &[f32] {
        let start = (layer * self.token_count() + token) * self.dim;
        &self.vectors[start..start + self.dim]
    }

    /// Size of this record in the store payload.
    pub fn encoded_len(&self) -> usize {
        4 + self.token_count() + self.vectors.len() * 4
    }

    fn validate(&self, num_layers: usize, dim: usize) -> Result<()> {
        let expected = num_layers * self.token_count() * dim;
        if self.num_layers != num_layers || self.dim != dim || self.vectors.len() != expected {
            return Err(Error::DimensionMismatch {
                word: self.word.clone(),
                expected,
                actual: self.vectors.len(),
            });
        }
        let invalid = |reason: &str| Error::InvalidRecord {
            word: self.word.clone(),
            reason: reason.to_string(),
        };
        if self.subword_count() == 0 {
            return Err(invalid("no content tokens"));
        }
        if self.flags.iter().filter(|f| **f == TokenFlag::Cls).count() > 1 {
            return Err(invalid("more than one CLS token"));
        }
        if self.flags.iter().filter(|f| **f == TokenFlag::Sep).count() > 1 {
            return Err(invalid("more than one SEP token"));
        }
        if self.vectors.iter().any(|v| !v.is_finite()) {
            return Err(invalid("non-finite value"));
        }
        Ok(())
    }
}

/// Streams records into a store file. Records must arrive grouped by word.
pub struct StoreWriter {
    path: PathBuf,
    header: StoreHeader,
    payload: BufWriter<tempfile::NamedTempFile>,
    offset: u64,
    seen: HashSet<String>,
    current: Option<String>,
}

impl StoreWriter {
    /// Any index already present in `header` is discarded and rebuilt.
    pub fn create(path: impl AsRef<Path>, mut header: StoreHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        if header.num_layers == 0 || header.dim == 0 {
            return Err(Error::Format("num_layers and dim must be at least 1".into()));
        }
        header.index.clear();
        let dir = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        let tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(StoreWriter {
            path,
            header,
            payload: BufWriter::new(tmp),
            offset: 0,
            seen: HashSet::new(),
            current: None,
        })
    }

    pub fn push(&mut self, record: &OccurrenceRecord) -> Result<()> {
        record.validate(self.header.num_layers, self.header.dim)?;
        let word = record.word.to_lowercase();
        if self.current.as_deref() != Some(word.as_str()) {
            if !self.seen.insert(word.clone()) {
                return Err(Error::DuplicateWord(word));
            }
            self.header.index.push(IndexEntry {
                word: word.clone(),
                offset: self.offset,
                count: 0,
            });
            self.current = Some(word);
        }
        let entry = self.header.index.last_mut().expect("group started above");
        entry.count += 1;

        let mut buf = Vec::with_capacity(record.encoded_len());
        buf.extend_from_slice(&(record.token_count() as u32).to_le_bytes());
        buf.extend(record.flags.iter().map(|f| *f as u8));
        for v in &record.vectors {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        self.payload.write_all(&buf).map_err(|e| Error::io(&self.path, e))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    /// Writes header and payload to the destination and returns the header.
    pub fn finish(mut self) -> Result<StoreHeader> {
        self.header.vocab_size = Some(self.header.index.len());
        let json = serde_json::to_vec(&self.header).map_err(|e| Error::Format(format!("header serialization: {e}")))?;
        let io_err = |e: io::Error| Error::io(&self.path, e);
        let mut tmp = self.payload.into_inner().map_err(|e| io_err(e.into_error()))?;
        tmp.as_file_mut().seek(SeekFrom::Start(0)).map_err(io_err)?;

        let file = File::create(&self.path).map_err(io_err)?;
        let mut out = BufWriter::new(file);
        out.write_all(STORE_MAGIC).map_err(io_err)?;
        out.write_all(&STORE_VERSION.to_le_bytes()).map_err(io_err)?;
        out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io_err)?;
        out.write_all(&json).map_err(io_err)?;
        io::copy(tmp.as_file_mut(), &mut out).map_err(io_err)?;
        out.flush().map_err(io_err)?;
        Ok(self.header)
    }
}

/// Writes a complete store from grouped records.
pub fn write_store<'a, I>(path: impl AsRef<Path>, header: StoreHeader, records: I) -> Result<StoreHeader>
where
    I: IntoIterator<Item = &'a OccurrenceRecord>,
{
    let mut writer = StoreWriter::create(path, header)?;
    for r in records {
        writer.push(r)?;
    }
    writer.finish()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Limit {
    First(usize),
    All,
}

/// Read-only, memory-mapped token store. Safe to share across threads.
pub struct TokenStore {
    path: PathBuf,
    header: StoreHeader,
    mmap: Mmap,
    payload_start: usize,
    lookup: HashMap<String, usize>,
}

impl std::fmt::Debug for TokenStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TokenStore")
            .field("path", &self.path)
            .field("model_id", &self.header.model_id)
            .field("words", &self.header.index.len())
            .finish()
    }
}

impl TokenStore {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        // SAFETY: stores are immutable once written; the map is read-only.
        let mmap = unsafe { Mmap::map(&file) }.map_err(|e| Error::io(&path, e))?;

        if mmap.len() < PREAMBLE_LEN {
            return Err(Error::Format(format!("file of {} bytes is too short", mmap.len())));
        }
        if &mmap[0..4] != STORE_MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &mmap[0..4])));
        }
        let version = u32::from_le_bytes(mmap[4..8].try_into().unwrap());
        if version != STORE_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let json_len = u64::from_le_bytes(mmap[8..16].try_into().unwrap()) as usize;
        let payload_start = PREAMBLE_LEN
            .checked_add(json_len)
            .filter(|&end| end <= mmap.len())
            .ok_or_else(|| Error::Corruption(format!("header length {json_len} exceeds file")))?;
        let header: StoreHeader = serde_json::from_slice(&mmap[PREAMBLE_LEN..payload_start])
            .map_err(|e| Error::Format(format!("header JSON: {e}")))?;

        if header.num_layers == 0 || header.dim == 0 {
            return Err(Error::Format("num_layers and dim must be at least 1".into()));
        }
        if let Some(n) = header.vocab_size {
            if n != header.index.len() {
                return Err(Error::Format(format!(
                    "vocab_size {n} does not match index of {} words",
                    header.index.len()
                )));
            }
        }

        let mut store = TokenStore {
            path,
            lookup: HashMap::with_capacity(header.index.len()),
            header,
            mmap,
            payload_start,
        };
        store.check_index()?;
        Ok(store)
    }

    /// Verifies that every group of records tiles the payload exactly.
    fn check_index(&mut self) -> Result<()> {
        let payload_len = (self.mmap.len() - self.payload_start) as u64;
        let entries = &self.header.index;
        for (i, e) in entries.iter().enumerate() {
            if e.count == 0 {
                return Err(Error::Format(format!("word {:?} has zero occurrences", e.word)));
            }
            let next = entries.get(i + 1).map_or(payload_len, |n| n.offset);
            if next <= e.offset {
                return Err(Error::Format(format!(
                    "index offsets not strictly increasing at {:?}",
                    e.word
                )));
            }
            if e.offset >= payload_len {
                return Err(Error::Corruption(format!(
                    "offset of {:?} lies beyond the payload",
                    e.word
                )));
            }
            let mut pos = e.offset as usize;
            for _ in 0..e.count {
                let (_, len) = self.record_bounds(pos)?;
                pos += len;
            }
            if pos as u64 != next {
                return Err(Error::Corruption(format!(
                    "records of {:?} end at {pos}, expected {next}",
                    e.word
                )));
            }
            let key = e.word.to_lowercase();
            if self.lookup.insert(key, i).is_some() {
                return Err(Error::DuplicateWord(e.word.clone()));
            }
        }
        if entries.is_empty() && payload_len != 0 {
            return Err(Error::Corruption("payload without index".into()));
        }
        Ok(())
    }

    /// Token count and encoded length of the record at payload offset `pos`.
    fn record_bounds(&self, pos: usize) -> Result<(usize, usize)> {
        let payload = &self.mmap[self.payload_start..];
        let truncated = || Error::Corruption(format!("record at payload offset {pos} is truncated"));
        let head = payload.get(pos..pos + 4).ok_or_else(truncated)?;
        let tokens = u32::from_le_bytes(head.try_into().unwrap()) as usize;
        let len = 4 + tokens + self.header.num_layers * tokens * self.header.dim * 4;
        if pos + len > payload.len() {
            return Err(truncated());
        }
        Ok((tokens, len))
    }

    fn decode_record(&self, word: &str, pos: usize) -> Result<(OccurrenceRecord, usize)> {
        let (tokens, len) = self.record_bounds(pos)?;
        let bytes = &self.mmap[self.payload_start + pos..self.payload_start + pos + len];
        let flags = bytes[4..4 + tokens]
            .iter()
            .map(|&b| {
                TokenFlag::try_from(b).map_err(|b| Error::Corruption(format!("unknown token flag {b} in {word:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let vectors = bytes[4 + tokens..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let record = OccurrenceRecord {
            word: word.to_string(),
            flags,
            num_layers: self.header.num_layers,
            dim: self.header.dim,
            vectors,
        };
        record.validate(self.header.num_layers, self.header.dim)?;
        Ok((record, len))
    }

    pub fn header(&self) -> &StoreHeader {
        &self.header
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn num_layers(&self) -> usize {
        self.header.num_layers
    }

    pub fn dim(&self) -> usize {
        self.header.dim
    }

    pub fn len(&self) -> usize {
        self.header.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.header.index.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entry(word).is_some()
    }

    fn entry(&self, word: &str) -> Option<&IndexEntry> {
        let i = match self.lookup.get(word) {
            Some(&i) => i,
            None => *self.lookup.get(&word.to_lowercase())?,
        };
        Some(&self.header.index[i])
    }

    pub fn occurrence_count(&self, word: &str) -> usize {
        self.entry(word).map_or(0, |e| e.count as usize)
    }

    /// Words in stored order.
    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::from_words(self.header.index.iter().map(|e| e.word.as_str())).expect("index words are unique")
    }

    /// Returns the first `min(M, available)` records of `word` in stored order.
    pub fn read_occurrences(&self, word: &str, limit: Limit) -> Result<Vec<OccurrenceRecord>> {
        let entry = self.entry(word).ok_or_else(|| Error::NotFound(word.to_string()))?;
        let n = match limit {
            Limit::First(m) => m.min(entry.count as usize),
            Limit::All => entry.count as usize,
        };
        let mut out = Vec::with_capacity(n);
        let mut pos = entry.offset as usize;
        for _ in 0..n {
            let (record, len) = self.decode_record(&entry.word, pos)?;
            out.push(record);
            pos += len;
        }
        Ok(out)
    }

    /// SHA-256 of the whole file, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(&self.mmap[..]))
    }
}
