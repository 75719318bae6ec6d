//! Versioned binary model container.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "DMFM" | version u32 | payload_len u64 | payload | crc32(payload) u32
//! ```
//!
//! Payload, version 1:
//!
//! ```text
//! model_kind  u8                      0 = shallow MFA, 1 = DMFA tree
//! preprocess  kind u8 (0/1/2), shift_len u64, shift f64*, scale f64
//! meta        present u8; if 1:
//!             components u64, factors u64, max_iters u64, rel_tol f64,
//!             seed u64, min_effective_count f64, variance_floor f64,
//!             iterations u64, termination u8, reseeds u64, final_ll f64
//! model       MFA: components u64, dim u64, factors u64,
//!                  log_weights f64*, then per component loading f64*
//!                  (column-major), mean f64*, noise f64*
//!             tree: MFA block, then per component child flag u8 (+ tree)
//! ```
//!
//! Parameters are stored at full bit precision, so save/load round-trips are
//! exact.

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::data::{PreprocessKind, PreprocessRecord};
use crate::deep::{collapse, DmfaNode};
use crate::em::{EmConfig, Termination, TrainingTrace};
use crate::model::{FactorAnalyser, MfaModel};
use crate::{Error, Result};

const MAGIC: [u8; 4] = *b"DMFM";
const VERSION: u32 = 1;

/// A shallow MFA or a DMFA tree, as stored on disk.
#[derive(Debug, Clone)]
pub enum StoredModel {
    Mfa(MfaModel),
    Dmfa(DmfaNode),
}

impl StoredModel {
    pub fn data_dim(&self) -> usize {
        match self {
            StoredModel::Mfa(m) => m.data_dim(),
            StoredModel::Dmfa(n) => n.data_dim(),
        }
    }

    /// Shallow view for evaluation and sampling: trees collapse exactly.
    pub fn to_shallow(&self) -> Result<MfaModel> {
        match self {
            StoredModel::Mfa(m) => Ok(m.clone()),
            StoredModel::Dmfa(n) => collapse(n),
        }
    }

    /// Tree view; a shallow model becomes a leaf.
    pub fn to_node(&self) -> DmfaNode {
        match self {
            StoredModel::Mfa(m) => DmfaNode::leaf(m.clone()),
            StoredModel::Dmfa(n) => n.clone(),
        }
    }

    /// Parameters of the stored representation (deep counts for trees).
    pub fn count_parameters(&self) -> usize {
        match self {
            StoredModel::Mfa(m) => m.count_parameters(),
            StoredModel::Dmfa(n) => crate::deep::count_parameters_deep(n),
        }
    }
}

/// Training provenance stored alongside a model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMeta {
    pub config: EmConfig,
    pub iterations: u64,
    pub termination: Termination,
    pub reseeds: u64,
    pub final_log_likelihood: f64,
}

impl TrainingMeta {
    pub fn from_trace(config: &EmConfig, trace: &TrainingTrace) -> Self {
        Self {
            config: config.clone(),
            iterations: trace.iterations() as u64,
            termination: trace.termination,
            reseeds: trace.reseeds as u64,
            final_log_likelihood: trace.final_log_likelihood(),
        }
    }
}

/// Everything a model file carries.
#[derive(Debug, Clone)]
pub struct ModelFile {
    pub model: StoredModel,
    pub preprocessing: PreprocessRecord,
    pub metadata: Option<TrainingMeta>,
}

pub fn save_model(file: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::new();
    match &file.model {
        StoredModel::Mfa(_) => payload.push(0u8),
        StoredModel::Dmfa(_) => payload.push(1u8),
    }
    encode_preprocess(&mut payload, &file.preprocessing);
    match &file.metadata {
        None => payload.push(0u8),
        Some(meta) => {
            payload.push(1u8);
            encode_meta(&mut payload, meta);
        }
    }
    match &file.model {
        StoredModel::Mfa(m) => encode_mfa(&mut payload, m),
        StoredModel::Dmfa(n) => encode_node(&mut payload, n),
    }

    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC });
    }
    if bytes.len() < 16 {
        return Err(Error::Truncated("model file header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            supported: VERSION,
        });
    }
    let payload_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let need = 16usize
        .checked_add(payload_len)
        .and_then(|n| n.checked_add(4))
        .ok_or_else(|| Error::Truncated("payload length overflows".into()))?;
    if bytes.len() < need {
        return Err(Error::Truncated(format!(
            "expected {need} bytes, file has {}",
            bytes.len()
        )));
    }
    let payload = &bytes[16..16 + payload_len];
    let stored = u32::from_le_bytes(bytes[16 + payload_len..need].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }

    let mut cur = Cursor { data: payload, at: 0 };
    let kind = cur.u8()?;
    let preprocessing = decode_preprocess(&mut cur)?;
    let metadata = match cur.u8()? {
        0 => None,
        1 => Some(decode_meta(&mut cur)?),
        other => {
            return Err(Error::Truncated(format!("bad metadata flag {other}")));
        }
    };
    let model = match kind {
        0 => StoredModel::Mfa(decode_mfa(&mut cur)?),
        1 => StoredModel::Dmfa(decode_node(&mut cur)?),
        other => return Err(Error::Truncated(format!("bad model kind {other}"))),
    };
    if cur.at != payload.len() {
        return Err(Error::Truncated(format!(
            "{} trailing payload bytes",
            payload.len() - cur.at
        )));
    }
    Ok(ModelFile {
        model,
        preprocessing,
        metadata,
    })
}

struct Cursor<'a> {
    data: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.data.len() {
            return Err(Error::Truncated(format!(
                "needed {n} bytes at offset {}, payload has {}",
                self.at,
                self.data.len()
            )));
        }
        let out = &self.data[self.at..self.at + n];
        self.at += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn encode_preprocess(out: &mut Vec<u8>, rec: &PreprocessRecord) {
    out.push(match rec.kind {
        PreprocessKind::None => 0,
        PreprocessKind::DcRemoved => 1,
        PreprocessKind::Standardized => 2,
    });
    put_u64(out, rec.shift.len() as u64);
    for v in rec.shift.iter() {
        put_f64(out, *v);
    }
    put_f64(out, rec.scale);
}

fn decode_preprocess(cur: &mut Cursor) -> Result<PreprocessRecord> {
    let kind = match cur.u8()? {
        0 => PreprocessKind::None,
        1 => PreprocessKind::DcRemoved,
        2 => PreprocessKind::Standardized,
        other => return Err(Error::Truncated(format!("bad preprocessing kind {other}"))),
    };
    let len = cur.u64()? as usize;
    let shift = DVector::from_vec(cur.f64s(len)?);
    let scale = cur.f64()?;
    Ok(PreprocessRecord { kind, shift, scale })
}

fn encode_meta(out: &mut Vec<u8>, meta: &TrainingMeta) {
    put_u64(out, meta.config.components as u64);
    put_u64(out, meta.config.factors as u64);
    put_u64(out, meta.config.max_iters as u64);
    put_f64(out, meta.config.rel_tol);
    put_u64(out, meta.config.seed);
    put_f64(out, meta.config.min_effective_count);
    put_f64(out, meta.config.variance_floor);
    put_u64(out, meta.iterations);
    out.push(match meta.termination {
        Termination::Converged => 0,
        Termination::MaxIters => 1,
        Termination::DegenerateRestartLimit => 2,
    });
    put_u64(out, meta.reseeds);
    put_f64(out, meta.final_log_likelihood);
}

fn decode_meta(cur: &mut Cursor) -> Result<TrainingMeta> {
    let mut config = EmConfig::new(1, 1);
    config.components = cur.u64()? as usize;
    config.factors = cur.u64()? as usize;
    config.max_iters = cur.u64()? as usize;
    config.rel_tol = cur.f64()?;
    config.seed = cur.u64()?;
    config.min_effective_count = cur.f64()?;
    config.variance_floor = cur.f64()?;
    let iterations = cur.u64()?;
    let termination = match cur.u8()? {
        0 => Termination::Converged,
        1 => Termination::MaxIters,
        2 => Termination::DegenerateRestartLimit,
        other => return Err(Error::Truncated(format!("bad termination tag {other}"))),
    };
    let reseeds = cur.u64()?;
    let final_log_likelihood = cur.f64()?;
    Ok(TrainingMeta {
        config,
        iterations,
        termination,
        reseeds,
        final_log_likelihood,
    })
}

fn encode_mfa(out: &mut Vec<u8>, m: &MfaModel) {
    put_u64(out, m.num_components() as u64);
    put_u64(out, m.data_dim() as u64);
    put_u64(out, m.factor_dim() as u64);
    for lw in m.log_weights().iter() {
        put_f64(out, *lw);
    }
    for c in 0..m.num_components() {
        let fa = m.component(c);
        for v in fa.loading().iter() {
            put_f64(out, *v);
        }
        for v in fa.mean().iter() {
            put_f64(out, *v);
        }
        for v in fa.noise_diag().iter() {
            put_f64(out, *v);
        }
    }
}

fn decode_mfa(cur: &mut Cursor) -> Result<MfaModel> {
    let c = cur.u64()? as usize;
    let dim = cur.u64()? as usize;
    let d = cur.u64()? as usize;
    if c == 0 || dim == 0 {
        return Err(Error::Truncated("empty mixture in model file".into()));
    }
    let log_weights = DVector::from_vec(cur.f64s(c)?);
    let mut comps = Vec::with_capacity(c);
    for _ in 0..c {
        let loading = DMatrix::from_vec(dim, d, cur.f64s(dim * d)?);
        let mean = DVector::from_vec(cur.f64s(dim)?);
        let noise = DVector::from_vec(cur.f64s(dim)?);
        comps.push(FactorAnalyser::new(loading, mean, noise)?);
    }
    MfaModel::new(comps, log_weights)
}

fn encode_node(out: &mut Vec<u8>, node: &DmfaNode) {
    encode_mfa(out, node.layer());
    for child in node.children() {
        match child {
            None => out.push(0u8),
            Some(ch) => {
                out.push(1u8);
                encode_node(out, ch);
            }
        }
    }
}

fn decode_node(cur: &mut Cursor) -> Result<DmfaNode> {
    let layer = decode_mfa(cur)?;
    let mut children = Vec::with_capacity(layer.num_components());
    for _ in 0..layer.num_components() {
        children.push(match cur.u8()? {
            0 => None,
            1 => Some(decode_node(cur)?),
            other => return Err(Error::Truncated(format!("bad child flag {other}"))),
        });
    }
    DmfaNode::new(layer, children)
}
