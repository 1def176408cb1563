//! Numerical kernels shared by the evaluators. Everything computes in `f64`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn dot<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> f64 {
    u.iter().zip(v).map(|(&a, &b)| a.into() * b.into()).sum()
}

pub fn norm<T: Copy + Into<f64>>(u: &[T]) -> f64 {
    u.iter().map(|&a| a.into() * a.into()).sum::<f64>().sqrt()
}

pub fn cosine<T: Copy + Into<f64>>(u: &[T], v: &[T]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine of {} vs {} dims",
            u.len(),
            v.len()
        )));
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share rank mean((i+1)..=(j+1))
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} scores", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::UndefinedCorrelation("fewer than two observations".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} vs {} scores", x.len(), y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("correlation input".into()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Orthogonal `d x d` map applied to row vectors as `x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct OrthogonalMap {
    w: DMatrix<f64>,
}

impl OrthogonalMap {
    pub fn identity(dim: usize) -> Self {
        OrthogonalMap {
            w: DMatrix::identity(dim, dim),
        }
    }

    /// Wraps `w` after checking `WᵀW = I` within `tol` (Frobenius).
    pub fn from_matrix(w: DMatrix<f64>, tol: f64) -> Result<Self> {
        if !w.is_square() {
            return Err(Error::ShapeMismatch(format!("{}x{} map", w.nrows(), w.ncols())));
        }
        let map = OrthogonalMap { w };
        let err = map.orthogonality_error();
        if err.is_nan() || err > tol {
            return Err(Error::InvalidArgument(format!("map is not orthogonal (error {err:e})")));
        }
        Ok(map)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }

    /// `‖WᵀW − I‖_F`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim();
        (self.w.tr_mul(&self.w) - DMatrix::<f64>::identity(d, d)).norm()
    }

    pub fn apply(&self, row: &[f64]) -> Vec<f64> {
        let d = self.dim();
        let mut out = vec![0.0; d];
        for (i, &x) in row.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (j, o) in out.iter_mut().enumerate() {
                *o += x * self.w[(i, j)];
            }
        }
        out
    }
}

/// Orthogonal minimizer of `‖XW − Y‖_F`: `W = U Vᵀ` with `XᵀY = U Σ Vᵀ`.
pub fn procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<OrthogonalMap> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch(format!(
            "procrustes on {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::ShapeMismatch("procrustes needs at least one row".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("procrustes input".into()));
    }
    let m = x.tr_mul(y);
    let svd = m.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::NonFinite("SVD did not produce singular vectors".into()));
    };
    Ok(OrthogonalMap { w: u * v_t })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Centering {
    /// Subtract each feature's mean over examples.
    #[default]
    Columns,
    /// Subtract each example's mean over features.
    Rows,
}

/// Preprocessing applied before linear CKA. The default ℓ2-normalizes rows
/// and then centers columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CkaPreprocessing {
    pub row_l2_normalize: bool,
    pub centering: Centering,
}

impl Default for CkaPreprocessing {
    fn default() -> Self {
        CkaPreprocessing {
            row_l2_normalize: true,
            centering: Centering::Columns,
        }
    }
}

impl CkaPreprocessing {
    pub fn describe(&self) -> String {
        let center = match self.centering {
            Centering::Columns => "column_mean_center",
            Centering::Rows => "row_mean_center",
        };
        if self.row_l2_normalize {
            format!("row_l2_normalize,{center}")
        } else {
            center.to_string()
        }
    }
}

/// `s x d` example matrix with a record of preprocessing already applied.
#[derive(Clone, Debug)]
pub struct SampleMatrix {
    data: DMatrix<f64>,
    pub row_l2_normalized: bool,
    pub column_mean_centered: bool,
}

impl SampleMatrix {
    pub fn new(data: DMatrix<f64>) -> Self {
        SampleMatrix {
            data,
            row_l2_normalized: false,
            column_mean_centered: false,
        }
    }

    /// Builds from row-major values.
    pub fn from_rows(s: usize, d: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != s * d {
            return Err(Error::ShapeMismatch(format!("{} values for {s}x{d}", rows.len())));
        }
        Ok(Self::new(DMatrix::from_row_slice(s, d, rows)))
    }

    pub fn samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn prepare(&self, prep: &CkaPreprocessing) -> Result<PreparedSamples> {
        if self.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("CKA input".into()));
        }
        let mut x = self.data.clone();
        if prep.row_l2_normalize && !self.row_l2_normalized {
            l2_normalize_rows(&mut x);
        }
        match prep.centering {
            Centering::Columns if !self.column_mean_centered => center_columns(&mut x),
            Centering::Columns => {}
            Centering::Rows => center_rows(&mut x),
        }
        PreparedSamples::new(x)
    }
}

/// Rows with zero norm are left as they are.
pub fn l2_normalize_rows(x: &mut DMatrix<f64>) {
    for mut row in x.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
}

pub fn center_columns(x: &mut DMatrix<f64>) {
    let s = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / s;
        col.add_scalar_mut(-mean);
    }
}

fn center_rows(x: &mut DMatrix<f64>) {
    let d = x.ncols() as f64;
    for mut row in x.row_iter_mut() {
        let mean = row.sum() / d;
        row.add_scalar_mut(-mean);
    }
}

/// Preprocessed examples with `‖XᵀX‖_F` cached. When `s ≤ d` the `s x s`
/// Gram matrix is kept as well, and cross terms use `⟨XXᵀ, YYᵀ⟩`.
#[derive(Clone, Debug)]
pub struct PreparedSamples {
    x: DMatrix<f64>,
    gram: Option<DMatrix<f64>>,
    self_norm: f64,
}

impl PreparedSamples {
    fn new(x: DMatrix<f64>) -> Result<Self> {
        let (gram, self_norm) = if x.nrows() <= x.ncols() {
            let k = &x * x.transpose();
            let n = k.norm();
            (Some(k), n)
        } else {
            (None, x.tr_mul(&x).norm())
        };
        if self_norm == 0.0 {
            return Err(Error::UndefinedCka("matrix is all zeros after preprocessing".into()));
        }
        Ok(PreparedSamples { x, gram, self_norm })
    }

    pub fn samples(&self) -> usize {
        self.x.nrows()
    }
}

pub fn cka_prepared(a: &PreparedSamples, b: &PreparedSamples) -> Result<f64> {
    if a.samples() != b.samples() {
        return Err(Error::ShapeMismatch(format!(
            "CKA on {} vs {} examples",
            a.samples(),
            b.samples()
        )));
    }
    let cross = match (&a.gram, &b.gram) {
        (Some(k), Some(l)) => k.dot(l),
        _ => b.x.tr_mul(&a.x).norm_squared(),
    };
    Ok((cross / (a.self_norm * b.self_norm)).clamp(0.0, 1.0))
}

/// Linear CKA, `‖YᵀX‖²_F / (‖XᵀX‖_F ‖YᵀY‖_F)`, after default preprocessing.
pub fn linear_cka(x: &SampleMatrix, y: &SampleMatrix) -> Result<f64> {
    linear_cka_with(x, y, &CkaPreprocessing::default())
}

pub fn linear_cka_with(x: &SampleMatrix, y: &SampleMatrix, prep: &CkaPreprocessing) -> Result<f64> {
    if x.samples() != y.samples() {
        return Err(Error::ShapeMismatch(format!(
            "CKA on {} vs {} examples",
            x.samples(),
            y.samples()
        )));
    }
    if x.samples() < 2 {
        return Err(Error::UndefinedCka("fewer than two examples".into()));
    }
    cka_prepared(&x.prepare(prep)?, &y.prepare(prep)?)
}
