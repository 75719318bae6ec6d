//! Deep MFAs: greedy layer-wise stacking, exact collapse to a shallow MFA,
//! ancestral sampling, and fast hard inference.
//!
//! A [`DmfaNode`] is an MFA whose components may each own a child MFA over
//! their factor space, replacing that component's standard-normal factor
//! prior. Stacking trains children on factor vectors extracted through the
//! frozen parent (hard component assignment plus a posterior draw per row).
//! Collapse multiplies loadings down the tree: the flat component for parent
//! `c` and child component `s` has mean `W_c mu_s + mu_c` and covariance
//! `Psi_c + W_c (Psi_s + W_s W_s^T) W_c^T`, represented exactly as a widened
//! loading `[W_c W_s | W_c Psi_s^{1/2}]` over the parent's diagonal noise.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::Dataset;
use crate::em::{fit_mfa, init_mfa, EmConfig};
use crate::math::fnv1a64;
use crate::model::{FactorAnalyser, FactorPosterior, MfaModel, VARIANCE_FLOOR};
use crate::rng::substream;
use crate::{Error, Result};

/// Default cap on tree depth; a third layer is where returns stop.
pub const DEFAULT_MAX_DEPTH: usize = 3;

/// An MFA whose components optionally own child MFAs over their factor space.
#[derive(Debug, Clone)]
pub struct DmfaNode {
    layer: MfaModel,
    children: Vec<Option<DmfaNode>>,
}

impl DmfaNode {
    /// A single-layer node; every factor prior stays standard normal.
    pub fn leaf(layer: MfaModel) -> Self {
        let c = layer.num_components();
        Self {
            layer,
            children: vec![None; c],
        }
    }

    pub fn new(layer: MfaModel, children: Vec<Option<DmfaNode>>) -> Result<Self> {
        if children.len() != layer.num_components() {
            return Err(Error::DimensionMismatch {
                context: "children list",
                expected: layer.num_components(),
                got: children.len(),
            });
        }
        for child in children.iter().flatten() {
            if child.layer.data_dim() != layer.factor_dim() {
                return Err(Error::InvalidModel(format!(
                    "child models a {}-dimensional space but the parent has {} factors",
                    child.layer.data_dim(),
                    layer.factor_dim()
                )));
            }
        }
        Ok(Self { layer, children })
    }

    pub fn layer(&self) -> &MfaModel {
        &self.layer
    }

    pub fn children(&self) -> &[Option<DmfaNode>] {
        &self.children
    }

    pub fn child(&self, c: usize) -> Option<&DmfaNode> {
        self.children[c].as_ref()
    }

    pub fn data_dim(&self) -> usize {
        self.layer.data_dim()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.iter().all(Option::is_none)
    }

    pub fn depth(&self) -> usize {
        1 + self
            .children
            .iter()
            .flatten()
            .map(DmfaNode::depth)
            .max()
            .unwrap_or(0)
    }

    /// Number of components in the fully collapsed shallow form.
    pub fn flat_len(&self) -> usize {
        self.children
            .iter()
            .map(|ch| ch.as_ref().map_or(1, DmfaNode::flat_len))
            .sum()
    }

    fn flat_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.children.len());
        let mut acc = 0;
        for ch in &self.children {
            offsets.push(acc);
            acc += ch.as_ref().map_or(1, DmfaNode::flat_len);
        }
        offsets
    }

    /// Flat component index of a root-to-leaf component path, in collapse
    /// enumeration order.
    pub fn flat_index_of_path(&self, path: &[usize]) -> usize {
        let offsets = self.flat_offsets();
        let c = path[0];
        match (self.child(c), path.len()) {
            (Some(ch), n) if n > 1 => offsets[c] + ch.flat_index_of_path(&path[1..]),
            _ => offsets[c],
        }
    }
}

/// Sum of free parameters over every MFA in the tree.
pub fn count_parameters_deep(node: &DmfaNode) -> usize {
    node.layer.count_parameters()
        + node
            .children
            .iter()
            .flatten()
            .map(count_parameters_deep)
            .sum::<usize>()
}

/// Largest-remainder apportionment of `total` child components: every
/// component gets `k_min`, the remaining slots go proportionally to the
/// mixing weights, ties broken by lower component index.
pub fn allocate_components(weights: &[f64], total: usize, k_min: usize) -> Result<Vec<usize>> {
    let c = weights.len();
    if c == 0 || k_min == 0 {
        return Err(Error::InvalidConfig(
            "allocation needs at least one component and k_min >= 1".into(),
        ));
    }
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(Error::InvalidConfig("weights must be finite and nonnegative".into()));
    }
    if total < c * k_min {
        return Err(Error::InvalidConfig(format!(
            "total {total} cannot give {c} components at least {k_min} each"
        )));
    }
    let sum: f64 = weights.iter().sum();
    let extras = total - c * k_min;
    let quotas: Vec<f64> = weights.iter().map(|w| extras as f64 * w / sum).collect();
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(extras - assigned) {
        alloc[i] += 1;
    }
    Ok(alloc.into_iter().map(|a| a + k_min).collect())
}

/// How factor vectors are read off the posterior during extraction and
/// sampled descent.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractionMode {
    /// Draw from the per-row factor posterior.
    Sample,
    /// Use the posterior mean.
    PosteriorMean,
}

/// Hard-assign every row to its most responsible component and emit one
/// factor vector per row; returns one matrix per component (possibly empty).
pub fn extract_layer_dataset(
    model: &MfaModel,
    data: &Dataset,
    seed: u64,
    mode: ExtractionMode,
) -> Result<Vec<DMatrix<f64>>> {
    let mut rng = substream(seed, "extract");
    route_rows(model, data.rows(), mode, false, &mut rng)
}

fn argmax_component(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

fn route_rows(
    model: &MfaModel,
    rows: &DMatrix<f64>,
    mode: ExtractionMode,
    prior_weighted: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DMatrix<f64>>> {
    let n = rows.nrows();
    if rows.ncols() != model.data_dim() {
        return Err(Error::DimensionMismatch {
            context: "extraction data",
            expected: model.data_dim(),
            got: rows.ncols(),
        });
    }
    let d = model.factor_dim();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); model.num_components()];
    let mut x = DVector::zeros(model.data_dim());
    for i in 0..n {
        for j in 0..model.data_dim() {
            x[j] = rows[(i, j)];
        }
        let mut evals = 0;
        let mut scores = model.log_joints_counted(&x, &mut evals)?;
        if prior_weighted {
            scores += model.log_weights();
        }
        let chosen = argmax_component(scores.as_slice());
        let (_, mean) = model
            .cache(chosen)
            .log_density_and_posterior_mean(model.component(chosen), &x);
        let z = match mode {
            ExtractionMode::PosteriorMean => mean,
            ExtractionMode::Sample => {
                let g = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
                mean + model.cache(chosen).posterior_factor() * g
            }
        };
        buckets[chosen].extend(z.iter());
    }
    Ok(buckets
        .into_iter()
        .map(|flat| DMatrix::from_row_slice(flat.len() / d, d, &flat))
        .collect())
}

/// Child-count policy for stacking.
#[derive(Debug, Clone, PartialEq)]
pub enum Allocation {
    /// The same number of child components everywhere.
    PerComponent(usize),
    /// `K_c` proportional to the mixing weights by largest remainder.
    Proportional { total: usize, k_min: usize },
    /// Explicit per-component counts.
    Explicit(Vec<usize>),
}

/// Stacking controls; EM knobs apply to every child fit.
#[derive(Debug, Clone)]
pub struct StackOptions {
    pub second_factors: usize,
    pub allocation: Allocation,
    pub mode: ExtractionMode,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub variance_floor: f64,
    pub max_depth: usize,
    /// Score the hard assignment by `p(c) p(c|x)` (the literal Eq-22 reading)
    /// instead of `p(c|x)`.
    pub prior_weighted_argmax: bool,
    /// When false, children are initialized but not trained; used to build
    /// the freshly-initialized deep model that control experiments collapse.
    pub child_em: bool,
}

impl StackOptions {
    pub fn new(second_factors: usize, allocation: Allocation, seed: u64) -> Self {
        Self {
            second_factors,
            allocation,
            mode: ExtractionMode::Sample,
            seed,
            max_iters: 200,
            rel_tol: 1e-4,
            variance_floor: VARIANCE_FLOOR,
            max_depth: DEFAULT_MAX_DEPTH,
            prior_weighted_argmax: false,
            child_em: true,
        }
    }
}

/// Why a component did not receive a child during stacking.
#[derive(Debug, Clone, PartialEq)]
pub enum SkipReason {
    TooFewRows { have: usize, need: usize },
    AtDepthCap,
}

/// Per-invocation stacking summary; paths are slash-separated component
/// indices from the root.
#[derive(Debug, Clone, Default)]
pub struct StackReport {
    pub trained: usize,
    pub skipped: Vec<(String, SkipReason)>,
    pub failed: Vec<(String, String)>,
}

/// Add one layer below every current attachment point of the tree.
///
/// Rows are routed down by hard inference with per-level factor extraction;
/// the existing layers are left untouched (frozen). Components whose routed
/// data has fewer than `(d2 + 2) K_c` rows keep their standard-normal prior.
/// Child fit errors are recorded per component without aborting siblings.
pub fn stack_layer(
    node: DmfaNode,
    data: &Dataset,
    opts: &StackOptions,
) -> Result<(DmfaNode, StackReport)> {
    if node.data_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "stacking data",
            expected: node.data_dim(),
            got: data.dim(),
        });
    }
    if node.depth() >= opts.max_depth && node.is_leaf() {
        return Err(Error::InvalidConfig(format!(
            "stacking would exceed max depth {}",
            opts.max_depth
        )));
    }
    let mut rng = substream(opts.seed, "extract");
    let mut report = StackReport::default();
    let stacked = stack_rows(node, data.rows(), 1, opts, &mut rng, &mut report, "")?;
    if report.trained == 0 && report.failed.is_empty() && !report.skipped.is_empty() {
        return Err(Error::InvalidConfig(
            "no component could be stacked (all skipped)".into(),
        ));
    }
    Ok((stacked, report))
}

fn stack_rows(
    node: DmfaNode,
    rows: &DMatrix<f64>,
    level: usize,
    opts: &StackOptions,
    rng: &mut ChaCha8Rng,
    report: &mut StackReport,
    path: &str,
) -> Result<DmfaNode> {
    let DmfaNode { layer, mut children } = node;
    let buckets = route_rows(&layer, rows, opts.mode, opts.prior_weighted_argmax, rng)?;
    let alloc = match &opts.allocation {
        Allocation::PerComponent(k) => vec![*k; layer.num_components()],
        Allocation::Proportional { total, k_min } => {
            let weights: Vec<f64> = (0..layer.num_components()).map(|c| layer.weight(c)).collect();
            allocate_components(&weights, *total, *k_min)?
        }
        Allocation::Explicit(v) => {
            if v.len() != layer.num_components() {
                return Err(Error::DimensionMismatch {
                    context: "explicit allocation",
                    expected: layer.num_components(),
                    got: v.len(),
                });
            }
            v.clone()
        }
    };

    for c in 0..layer.num_components() {
        let sub_path = if path.is_empty() {
            format!("{c}")
        } else {
            format!("{path}/{c}")
        };
        match children[c].take() {
            Some(existing) => {
                children[c] = Some(stack_rows(
                    existing,
                    &buckets[c],
                    level + 1,
                    opts,
                    rng,
                    report,
                    &sub_path,
                )?);
            }
            None => {
                if level + 1 > opts.max_depth {
                    report.skipped.push((sub_path, SkipReason::AtDepthCap));
                    continue;
                }
                let k = alloc[c];
                if k == 0 {
                    report.failed.push((sub_path, "allocation gave zero components".into()));
                    continue;
                }
                let need = (opts.second_factors + 2) * k;
                if buckets[c].nrows() < need {
                    report.skipped.push((
                        sub_path,
                        SkipReason::TooFewRows {
                            have: buckets[c].nrows(),
                            need,
                        },
                    ));
                    continue;
                }
                let mut cfg = EmConfig::new(k, opts.second_factors);
                cfg.max_iters = opts.max_iters;
                cfg.rel_tol = opts.rel_tol;
                cfg.variance_floor = opts.variance_floor;
                cfg.seed = opts.seed ^ fnv1a64(&sub_path);
                let child_data = match Dataset::from_matrix(buckets[c].clone()) {
                    Ok(d) => d,
                    Err(e) => {
                        report.failed.push((sub_path, e.to_string()));
                        continue;
                    }
                };
                let fitted = if opts.child_em {
                    fit_mfa(&child_data, &cfg).map(|(m, _)| m)
                } else {
                    init_mfa(&child_data, &cfg)
                };
                match fitted {
                    Ok(m) => {
                        children[c] = Some(DmfaNode::leaf(m));
                        report.trained += 1;
                    }
                    Err(e) => report.failed.push((sub_path, e.to_string())),
                }
            }
        }
    }
    DmfaNode::new(layer, children)
}

/// Exact Gram factor of `wide * wide^T` with at most `cap` columns; used when
/// the widened collapsed loading would exceed the data dimension.
fn gram_factor_capped(wide: DMatrix<f64>, cap: usize) -> DMatrix<f64> {
    if wide.ncols() <= cap {
        return wide;
    }
    let gram = &wide * wide.transpose();
    let eig = SymmetricEigen::new(gram);
    let dim = eig.eigenvalues.len();
    let mut factor = DMatrix::zeros(dim, cap.min(dim));
    // Rank is at most the data dimension, so cap columns reproduce the Gram
    // matrix exactly (up to floating point).
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    for (col, &i) in order.iter().take(factor.ncols()).enumerate() {
        let scale = eig.eigenvalues[i].max(0.0).sqrt();
        factor
            .column_mut(col)
            .copy_from(&(eig.eigenvectors.column(i) * scale));
    }
    factor
}

/// Exact reduction of the tree to an equivalent shallow MFA.
///
/// Bottom-up: each flat component combines the parent component `c` with one
/// collapsed child component `s`, with mean `W_c mu_s + mu_c`, loading
/// `[W_c W_s | W_c Psi_s^{1/2}]`, noise `Psi_c`, and weight `pi_c pi_s`.
/// Components without a child copy through unchanged; loadings are padded
/// with zero columns to a common factor dimension.
pub fn collapse(node: &DmfaNode) -> Result<MfaModel> {
    let layer = &node.layer;
    let dim = layer.data_dim();
    let mut parts: Vec<(DMatrix<f64>, DVector<f64>, DVector<f64>, f64)> = Vec::new();

    for c in 0..layer.num_components() {
        let fa = layer.component(c);
        let pc = layer.weight(c);
        match node.child(c) {
            None => parts.push((
                fa.loading().clone(),
                fa.mean().clone(),
                fa.noise_diag().clone(),
                pc,
            )),
            Some(child) => {
                let flat_child = collapse(child)?;
                for s in 0..flat_child.num_components() {
                    let sub = flat_child.component(s);
                    let mean = fa.loading() * sub.mean() + fa.mean();
                    let through = fa.loading() * sub.loading();
                    let noise_cols = DMatrix::from_fn(dim, fa.factor_dim(), |i, j| {
                        fa.loading()[(i, j)] * sub.noise_diag()[j].sqrt()
                    });
                    let mut wide = DMatrix::zeros(dim, through.ncols() + noise_cols.ncols());
                    wide.columns_mut(0, through.ncols()).copy_from(&through);
                    wide.columns_mut(through.ncols(), noise_cols.ncols())
                        .copy_from(&noise_cols);
                    parts.push((
                        gram_factor_capped(wide, dim),
                        mean,
                        fa.noise_diag().clone(),
                        pc * flat_child.weight(s),
                    ));
                }
            }
        }
    }

    let width = parts.iter().map(|(w, _, _, _)| w.ncols()).max().unwrap_or(0);
    let mut comps = Vec::with_capacity(parts.len());
    let mut weights = Vec::with_capacity(parts.len());
    for (loading, mean, noise, weight) in parts {
        let mut padded = DMatrix::zeros(dim, width);
        padded.columns_mut(0, loading.ncols()).copy_from(&loading);
        comps.push(FactorAnalyser::new(padded, mean, noise)?);
        weights.push(weight);
    }
    MfaModel::with_normalized_weights(comps, &weights)
}

/// Bijection between flat component indices of the collapsed model and
/// `(component, child component)` pairs, in collapse enumeration order.
#[derive(Debug, Clone)]
pub struct FlatIndexMap {
    pairs: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    log_weights: Vec<f64>,
}

impl FlatIndexMap {
    pub fn for_node(node: &DmfaNode) -> Self {
        let layer = &node.layer;
        let mut pairs = Vec::new();
        let mut offsets = Vec::with_capacity(layer.num_components());
        let mut log_weights = Vec::new();
        for c in 0..layer.num_components() {
            offsets.push(pairs.len());
            match node.child(c) {
                None => {
                    pairs.push((c, 0));
                    log_weights.push(layer.log_weights()[c]);
                }
                Some(child) => {
                    let child_logs = Self::for_node(child).log_weights;
                    for (k, lw) in child_logs.iter().enumerate() {
                        pairs.push((c, k));
                        log_weights.push(layer.log_weights()[c] + lw);
                    }
                }
            }
        }
        Self {
            pairs,
            offsets,
            log_weights,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Flat index of `(c, k)`; `None` when out of range.
    pub fn flat_index(&self, c: usize, k: usize) -> Option<usize> {
        if c >= self.offsets.len() {
            return None;
        }
        let s = self.offsets[c] + k;
        (self.pairs.get(s) == Some(&(c, k))).then_some(s)
    }

    pub fn pair(&self, s: usize) -> Option<(usize, usize)> {
        self.pairs.get(s).copied()
    }

    /// `log pi_s = log p(c(s)) + log p(k(s) | c(s))`, recursively flattened.
    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
}

struct FlatOffsets {
    offsets: Vec<usize>,
    children: Vec<Option<FlatOffsets>>,
}

impl FlatOffsets {
    fn build(node: &DmfaNode) -> Self {
        Self {
            offsets: node.flat_offsets(),
            children: node
                .children
                .iter()
                .map(|ch| ch.as_ref().map(FlatOffsets::build))
                .collect(),
        }
    }
}

fn categorical(log_weights: &DVector<f64>, rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lw) in log_weights.iter().enumerate() {
        acc += lw.exp();
        if u < acc {
            return i;
        }
    }
    log_weights.len() - 1
}

/// Ancestral sampling: draw the component path top-down by the per-level
/// mixing weights, the top-level factors from `N(0, I)`, then transform down
/// through each level's loading, mean, and diagonal noise.
pub fn sample(node: &DmfaNode, n: usize, seed: u64) -> Result<Dataset> {
    let (rows, _) = sample_with_flat_components(node, n, seed)?;
    Dataset::from_matrix(rows)
}

/// As [`sample`], also reporting each draw's flat component index in collapse
/// enumeration order.
pub fn sample_with_flat_components(
    node: &DmfaNode,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    let mut rng = substream(seed, "sample");
    let offsets = FlatOffsets::build(node);
    let mut rows = DMatrix::zeros(n, node.data_dim());
    let mut flats = Vec::with_capacity(n);
    for i in 0..n {
        let (x, s) = draw_one(node, &offsets, &mut rng);
        rows.row_mut(i).copy_from(&x.transpose());
        flats.push(s);
    }
    Ok((rows, flats))
}

fn draw_one(node: &DmfaNode, offsets: &FlatOffsets, rng: &mut ChaCha8Rng) -> (DVector<f64>, usize) {
    let c = categorical(node.layer.log_weights(), rng);
    let fa = node.layer.component(c);
    let (z, child_flat) = match (node.child(c), &offsets.children[c]) {
        (Some(child), Some(child_offsets)) => draw_one(child, child_offsets, rng),
        _ => (
            DVector::from_fn(fa.factor_dim(), |_, _| rng.sample::<f64, _>(StandardNormal)),
            0,
        ),
    };
    let noise = DVector::from_fn(fa.data_dim(), |i, _| {
        fa.noise_diag()[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
    });
    (
        fa.loading() * z + fa.mean() + noise,
        offsets.offsets[c] + child_flat,
    )
}

/// Hard-inference knobs.
#[derive(Debug, Clone, Copy, Default)]
pub struct InferenceOptions {
    /// Score the component argmax by `p(c) p(c|x)` (the literal Eq-22
    /// reading) instead of `p(c|x)`.
    pub prior_weighted_argmax: bool,
    /// Descend on a posterior draw instead of the posterior mean.
    pub sample_descent: bool,
}

/// Chosen component and factor posterior at one level of the tree.
#[derive(Debug, Clone)]
pub struct LevelChoice {
    pub component: usize,
    pub posterior: FactorPosterior,
}

/// Root-to-leaf result of hard inference.
#[derive(Debug, Clone)]
pub struct InferencePath {
    pub levels: Vec<LevelChoice>,
}

impl InferencePath {
    pub fn components(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.component).collect()
    }

    /// Flat component index of the chosen path under `node`'s collapse order.
    pub fn flat_component(&self, node: &DmfaNode) -> usize {
        node.flat_index_of_path(&self.components())
    }
}

/// Greedy `O(C + K)` inference: pick the most responsible component at each
/// level and treat its posterior mean as data for the level below.
pub fn hard_inference(node: &DmfaNode, x: &DVector<f64>) -> Result<InferencePath> {
    hard_inference_counted(node, x, InferenceOptions::default(), None).map(|(p, _)| p)
}

/// As [`hard_inference`] with explicit options; also returns the number of
/// component density evaluations performed (`C + K_c + ...` down the chosen
/// path, never the `C x K` of flat enumeration).
pub fn hard_inference_counted(
    node: &DmfaNode,
    x: &DVector<f64>,
    opts: InferenceOptions,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<(InferencePath, u64)> {
    let mut evals = 0u64;
    let mut levels = Vec::new();
    let mut current = node;
    let mut input = x.clone();
    loop {
        let mut scores = current.layer.log_joints_counted(&input, &mut evals)?;
        if opts.prior_weighted_argmax {
            scores += current.layer.log_weights();
        }
        let chosen = argmax_component(scores.as_slice());
        let posterior = current.layer.factor_posterior(chosen, &input)?;
        let next_input = if opts.sample_descent {
            let rng = rng.as_deref_mut().ok_or_else(|| {
                Error::InvalidConfig("sample_descent inference needs an RNG".into())
            })?;
            let g = DVector::from_fn(posterior.mean().len(), |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            });
            posterior.mean() + current.layer.cache(chosen).posterior_factor() * g
        } else {
            posterior.mean().clone()
        };
        levels.push(LevelChoice {
            component: chosen,
            posterior,
        });
        match current.child(chosen) {
            Some(child) => {
                current = child;
                input = next_input;
            }
            None => break,
        }
    }
    Ok((InferencePath { levels }, evals))
}
