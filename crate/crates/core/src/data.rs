//! Dataset loading, preprocessing, synthetic generators, and splits.
//!
//! Matrix files come in two dialects:
//! * CSV — comma-separated numeric cells, optional single header line
//!   (detected by a non-numeric cell in the first line), no quoting.
//! * `DMF1` raw binary — magic `DMF1`, then `N` and `D` as little-endian
//!   u64, then `N * D` little-endian f64 in row-major order, then a CRC-32
//!   (IEEE) of everything between the magic and the checksum.
//!
//! Preprocessing mirrors the two recipes used for image-like and vector
//! data: per-row DC removal, or per-dimension centering with one global
//! scale equal to the mean per-dimension standard deviation.

use std::borrow::Cow;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::deep::{self, DmfaNode};
use crate::model::{FactorAnalyser, MfaModel};
use crate::rng::substream;
use crate::{Error, Result};

const RAW_MAGIC: [u8; 4] = *b"DMF1";

/// Which transform produced a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessKind {
    None,
    /// Per-row mean removed; not invertible per sample.
    DcRemoved,
    /// Per-dimension mean removed, one global scale applied.
    Standardized,
}

impl fmt::Display for PreprocessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PreprocessKind::None => write!(f, "none"),
            PreprocessKind::DcRemoved => write!(f, "dc_removed"),
            PreprocessKind::Standardized => write!(f, "standardized"),
        }
    }
}

/// Everything needed to re-apply a preprocessing transform to raw data.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocessRecord {
    pub kind: PreprocessKind,
    /// Per-dimension shift (standardized data only; empty otherwise).
    pub shift: DVector<f64>,
    /// Global scale divisor; 1 unless standardized.
    pub scale: f64,
}

impl PreprocessRecord {
    pub fn none() -> Self {
        Self {
            kind: PreprocessKind::None,
            shift: DVector::zeros(0),
            scale: 1.0,
        }
    }
}

/// An `N x D` row-major matrix of finite reals plus its preprocessing record.
#[derive(Debug, Clone)]
pub struct Dataset {
    rows: DMatrix<f64>,
    preprocessing: PreprocessRecord,
}

impl Dataset {
    pub fn new(rows: DMatrix<f64>, preprocessing: PreprocessRecord) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::InvalidConfig("dataset needs at least one row and column".into()));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("dataset".into()));
        }
        Ok(Self {
            rows,
            preprocessing,
        })
    }

    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        Self::new(rows, PreprocessRecord::none())
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn num_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row_vec(&self, i: usize) -> DVector<f64> {
        self.rows.row(i).transpose()
    }

    pub fn preprocessing(&self) -> &PreprocessRecord {
        &self.preprocessing
    }
}

/// Load a matrix file, sniffing the format from the magic bytes.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    if bytes.starts_with(&RAW_MAGIC) {
        decode_raw(&bytes)
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|_| Error::Parse {
            row: 1,
            col: 1,
            reason: "file is neither DMF1 binary nor UTF-8 text".into(),
        })?;
        parse_csv(text)
    }
}

/// Matrix file dialects.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    RawF64,
}

pub fn save_matrix(data: &Dataset, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Csv => {
            let mut out = String::new();
            for i in 0..data.num_rows() {
                for j in 0..data.dim() {
                    if j > 0 {
                        out.push(',');
                    }
                    out.push_str(&format!("{}", data.rows[(i, j)]));
                }
                out.push('\n');
            }
            out.into_bytes()
        }
        MatrixFormat::RawF64 => encode_raw(&data.rows),
    };
    std::fs::write(path, bytes)?;
    Ok(())
}

fn parse_csv(text: &str) -> Result<Dataset> {
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.trim().is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::InvalidConfig("no data rows in CSV file".into()));
    }
    // A non-numeric cell in the first line marks it as a header.
    let header = lines[0]
        .split(',')
        .any(|cell| cell.trim().parse::<f64>().is_err());
    let data_lines = &lines[usize::from(header)..];
    if data_lines.is_empty() {
        return Err(Error::InvalidConfig("no data rows after header".into()));
    }
    let width = data_lines[0].split(',').count();
    let mut values = Vec::with_capacity(data_lines.len() * width);
    for (i, line) in data_lines.iter().enumerate() {
        let row_no = i + 1 + usize::from(header);
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != width {
            return Err(Error::Parse {
                row: row_no,
                col: cells.len().min(width) + 1,
                reason: format!("expected {width} cells, got {}", cells.len()),
            });
        }
        for (j, cell) in cells.iter().enumerate() {
            let value: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                row: row_no,
                col: j + 1,
                reason: format!("not a number: {:?}", cell.trim()),
            })?;
            if !value.is_finite() {
                return Err(Error::Parse {
                    row: row_no,
                    col: j + 1,
                    reason: format!("non-finite value {value}"),
                });
            }
            values.push(value);
        }
    }
    Dataset::from_matrix(DMatrix::from_row_slice(data_lines.len(), width, &values))
}

fn encode_raw(rows: &DMatrix<f64>) -> Vec<u8> {
    let n = rows.nrows();
    let d = rows.ncols();
    let mut payload = Vec::with_capacity(16 + 8 * n * d);
    payload.extend_from_slice(&(n as u64).to_le_bytes());
    payload.extend_from_slice(&(d as u64).to_le_bytes());
    for i in 0..n {
        for j in 0..d {
            payload.extend_from_slice(&rows[(i, j)].to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);
    let mut out = Vec::with_capacity(4 + payload.len() + 4);
    out.extend_from_slice(&RAW_MAGIC);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn decode_raw(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < 4 || bytes[..4] != RAW_MAGIC {
        return Err(Error::BadMagic { expected: RAW_MAGIC });
    }
    if bytes.len() < 4 + 16 + 4 {
        return Err(Error::Truncated("raw matrix header".into()));
    }
    let payload = &bytes[4..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let n = u64::from_le_bytes(payload[0..8].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(payload[8..16].try_into().unwrap()) as usize;
    let expected = n
        .checked_mul(d)
        .and_then(|c| c.checked_mul(8))
        .ok_or_else(|| Error::Truncated("matrix shape overflows".into()))?;
    if payload.len() - 16 != expected {
        return Err(Error::Truncated(format!(
            "expected {expected} payload bytes for a {n}x{d} matrix, got {}",
            payload.len() - 16
        )));
    }
    let mut rows = DMatrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let at = 16 + 8 * (i * d + j);
            rows[(i, j)] = f64::from_le_bytes(payload[at..at + 8].try_into().unwrap());
        }
    }
    Dataset::from_matrix(rows)
}

/// Remove each row's own mean (per-image DC component). Not invertible per
/// sample; the record only marks that the transform happened.
pub fn preprocess_dc_remove(data: &Dataset) -> Result<Dataset> {
    if data.dim() < 2 {
        return Err(Error::InvalidConfig("DC removal needs at least 2 dimensions".into()));
    }
    let mut rows = data.rows.clone();
    for mut row in rows.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(-mean);
    }
    Dataset::new(
        rows,
        PreprocessRecord {
            kind: PreprocessKind::DcRemoved,
            shift: DVector::zeros(0),
            scale: 1.0,
        },
    )
}

/// Subtract the per-dimension mean, then divide everything by one global
/// scalar — the mean of the per-dimension standard deviations — so the
/// average standard deviation becomes one.
pub fn preprocess_standardize(data: &Dataset) -> Result<Dataset> {
    if data.num_rows() < 2 {
        return Err(Error::InvalidConfig("standardization needs at least 2 rows".into()));
    }
    let n = data.num_rows() as f64;
    let shift = data.rows.row_mean().transpose();
    let mut scale = 0.0;
    for j in 0..data.dim() {
        let col = data.rows.column(j);
        let var = col.iter().map(|v| (v - shift[j]).powi(2)).sum::<f64>() / n;
        scale += var.sqrt();
    }
    scale /= data.dim() as f64;
    if scale <= 0.0 {
        return Err(Error::InvalidConfig(
            "all-constant data has zero global scale".into(),
        ));
    }
    let rows = DMatrix::from_fn(data.num_rows(), data.dim(), |i, j| {
        (data.rows[(i, j)] - shift[j]) / scale
    });
    Dataset::new(
        rows,
        PreprocessRecord {
            kind: PreprocessKind::Standardized,
            shift,
            scale,
        },
    )
}

/// Apply a stored preprocessing record to raw data.
pub fn apply_record(data: &Dataset, record: &PreprocessRecord) -> Result<Dataset> {
    if data.preprocessing.kind != PreprocessKind::None {
        return Err(Error::PreprocessingMismatch {
            model: record.kind.to_string(),
            data: data.preprocessing.kind.to_string(),
        });
    }
    match record.kind {
        PreprocessKind::None => Ok(data.clone()),
        PreprocessKind::DcRemoved => preprocess_dc_remove(data),
        PreprocessKind::Standardized => {
            if record.shift.len() != data.dim() {
                return Err(Error::DimensionMismatch {
                    context: "preprocessing shift",
                    expected: data.dim(),
                    got: record.shift.len(),
                });
            }
            let rows = DMatrix::from_fn(data.num_rows(), data.dim(), |i, j| {
                (data.rows[(i, j)] - record.shift[j]) / record.scale
            });
            Dataset::new(rows, record.clone())
        }
    }
}

/// Make `data` comparable with a model trained under `record`: pass matching
/// kinds through, auto-apply the stored transform to raw data, and reject
/// everything else.
pub fn reconcile<'a>(record: &PreprocessRecord, data: &'a Dataset) -> Result<Cow<'a, Dataset>> {
    if data.preprocessing.kind == record.kind {
        Ok(Cow::Borrowed(data))
    } else if data.preprocessing.kind == PreprocessKind::None {
        Ok(Cow::Owned(apply_record(data, record)?))
    } else {
        Err(Error::PreprocessingMismatch {
            model: record.kind.to_string(),
            data: data.preprocessing.kind.to_string(),
        })
    }
}

/// 2-D points on the quadratic arc `(x, x^2)`, `x` uniform on [-2, 2], with
/// Gaussian noise of standard deviation `noise` on the second coordinate. A
/// single factor analyser fit to this data has a visibly curved aggregated
/// posterior.
pub fn synth_curved(n: usize, seed: u64, noise: f64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let mut rng = substream(seed, "curved");
    let mut rows = DMatrix::zeros(n, 2);
    for i in 0..n {
        let x: f64 = rng.random_range(-2.0..2.0);
        rows[(i, 0)] = x;
        rows[(i, 1)] = x * x + noise * rng.sample::<f64, _>(StandardNormal);
    }
    Dataset::from_matrix(rows)
}

/// Shape of a synthetic ground-truth DMFA generator.
#[derive(Debug, Clone)]
pub struct HierRecipe {
    pub dim: usize,
    pub components: usize,
    pub factors: usize,
    pub child_components: usize,
    pub child_factors: usize,
    /// Tree depth: 1 generates a plain MFA, 2 a stacked model.
    pub depth: usize,
    /// Distance scale of the parent means in data space.
    pub mean_separation: f64,
    /// Distance scale of the child means in factor space; this is what makes
    /// the per-component factor distribution non-Gaussian.
    pub child_separation: f64,
    /// Observation noise variance.
    pub noise: f64,
}

impl HierRecipe {
    pub fn new(
        dim: usize,
        components: usize,
        factors: usize,
        child_components: usize,
        child_factors: usize,
    ) -> Self {
        Self {
            dim,
            components,
            factors,
            child_components,
            child_factors,
            depth: 2,
            mean_separation: 6.0,
            child_separation: 3.0,
            noise: 0.05,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.dim == 0
            || self.components == 0
            || self.factors == 0
            || self.factors > self.dim
            || self.child_factors == 0
            || self.child_factors > self.factors
            || self.child_components == 0
            || self.depth == 0
            || self.depth > 3
        {
            return Err(Error::InvalidConfig("inconsistent generator recipe".into()));
        }
        if !(self.noise > 0.0) {
            return Err(Error::InvalidConfig("generator noise must be positive".into()));
        }
        Ok(())
    }
}

/// Build the ground-truth tree for a recipe; deterministic in `seed`.
pub fn ground_truth_node(recipe: &HierRecipe, seed: u64) -> Result<DmfaNode> {
    recipe.validate()?;
    let mut rng = substream(seed, "hier-model");
    build_truth_level(recipe, recipe.depth, recipe.dim, recipe.factors, &mut rng)
}

fn build_truth_level(
    recipe: &HierRecipe,
    depth: usize,
    dim: usize,
    factors: usize,
    rng: &mut impl Rng,
) -> Result<DmfaNode> {
    let top = depth == recipe.depth;
    let count = if top { recipe.components } else { recipe.child_components };
    let separation = if top {
        recipe.mean_separation
    } else {
        recipe.child_separation
    };
    let noise_scale = if top { recipe.noise } else { 0.1 };
    let col_scale = 1.0 / (dim as f64).sqrt();

    let mut comps = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    for _ in 0..count {
        let mut direction = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = direction.norm();
        if norm > 0.0 {
            direction /= norm;
        }
        let loading =
            DMatrix::from_fn(dim, factors, |_, _| col_scale * rng.sample::<f64, _>(StandardNormal));
        let noise = DVector::from_fn(dim, |_, _| noise_scale * rng.random_range(0.5..1.5));
        comps.push(FactorAnalyser::new(loading, separation * direction, noise)?);
        weights.push(1.0 + rng.random_range(0.0..0.5));
    }
    let layer = MfaModel::with_normalized_weights(comps, &weights)?;
    if depth <= 1 {
        return Ok(DmfaNode::leaf(layer));
    }
    let children = (0..count)
        .map(|_| {
            build_truth_level(recipe, depth - 1, factors, recipe.child_factors, rng).map(Some)
        })
        .collect::<Result<Vec<_>>>()?;
    DmfaNode::new(layer, children)
}

/// Ancestral draws from a recipe's ground-truth model, returned with the
/// generator itself for oracle comparisons.
pub fn synth_hier(recipe: &HierRecipe, n: usize, seed: u64) -> Result<(Dataset, DmfaNode)> {
    let node = ground_truth_node(recipe, seed)?;
    let data = deep::sample(&node, n, seed)?;
    Ok((data, node))
}

/// Seeded permutation followed by a contiguous split; fraction floors apply
/// to every part but the last, which takes the remainder.
pub fn split(data: &Dataset, fractions: &[f64], seed: u64) -> Result<Vec<Dataset>> {
    if fractions.is_empty() {
        return Err(Error::InvalidConfig("need at least one fraction".into()));
    }
    if fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::InvalidConfig("fractions must be positive".into()));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("fractions sum to {total}, expected 1")));
    }
    let n = data.num_rows();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = substream(seed, "split");
    order.shuffle(&mut rng);

    let mut sizes: Vec<usize> = fractions
        .iter()
        .take(fractions.len() - 1)
        .map(|f| (f * n as f64).floor() as usize)
        .collect();
    let used: usize = sizes.iter().sum();
    if used > n {
        return Err(Error::InvalidConfig("split sizes exceed dataset".into()));
    }
    sizes.push(n - used);
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidConfig("a split part would be empty".into()));
    }

    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &size in &sizes {
        let mut rows = DMatrix::zeros(size, data.dim());
        for (local, &src) in order[at..at + size].iter().enumerate() {
            rows.row_mut(local).copy_from(&data.rows.row(src));
        }
        at += size;
        out.push(Dataset::new(rows, data.preprocessing.clone())?);
    }
    Ok(out)
}
