//! Maximum-likelihood MFA training by expectation-maximization.
//!
//! The E-step accumulates responsibility-weighted sufficient statistics over
//! the augmented factor vector `z~ = [z; 1]`, so the M-step solves for the
//! loading matrix and mean jointly in one linear system per component.
//! Statistics are accumulated serially within fixed-size row chunks and the
//! chunk partials are merged in chunk order, which makes results bitwise
//! independent of the number of worker threads.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::math::{logsumexp, softmax_in_place};
use crate::model::{FactorAnalyser, MfaModel, VARIANCE_FLOOR};
use crate::rng::substream;
use crate::{Error, Result};

/// Rows per accumulation chunk; part of the fixed reduction order.
const CHUNK_ROWS: usize = 512;

/// Reseeds allowed per component before training gives up.
const MAX_RESEEDS_PER_COMPONENT: usize = 3;

/// EM hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub components: usize,
    pub factors: usize,
    pub max_iters: usize,
    /// Relative log-likelihood change below which training stops
    /// (default 1e-4, i.e. 0.01%).
    pub rel_tol: f64,
    pub seed: u64,
    /// Components whose responsibility mass drops below this are reseeded.
    pub min_effective_count: f64,
    pub variance_floor: f64,
}

impl EmConfig {
    pub fn new(components: usize, factors: usize) -> Self {
        Self {
            components,
            factors,
            max_iters: 200,
            rel_tol: 1e-4,
            seed: 0,
            min_effective_count: factors as f64 + 2.0,
            variance_floor: VARIANCE_FLOOR,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_rel_tol(mut self, rel_tol: f64) -> Self {
        self.rel_tol = rel_tol;
        self
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if self.components == 0 || self.factors == 0 || self.max_iters == 0 {
            return Err(Error::InvalidConfig(
                "components, factors, and max_iters must be >= 1".into(),
            ));
        }
        if !(self.rel_tol > 0.0) {
            return Err(Error::InvalidConfig("rel_tol must be > 0".into()));
        }
        if self.variance_floor < VARIANCE_FLOOR {
            return Err(Error::InvalidConfig(format!(
                "variance_floor must be >= {VARIANCE_FLOOR}"
            )));
        }
        if self.factors > data.dim() {
            return Err(Error::InvalidConfig(format!(
                "factors {} exceed data dimension {}",
                self.factors,
                data.dim()
            )));
        }
        if data.num_rows() < self.components {
            return Err(Error::InvalidConfig(format!(
                "need at least {} rows to seed {} components, got {}",
                self.components,
                self.components,
                data.num_rows()
            )));
        }
        Ok(())
    }
}

/// Responsibility-weighted moments for one component, over the augmented
/// factor vector `z~ = [z; 1]`.
#[derive(Debug, Clone)]
pub struct ComponentStats {
    /// `N_c = sum_n r_nc`.
    pub mass: f64,
    /// `sum_n r_nc x_n [m; 1]^T`, a `D x (d+1)` matrix.
    pub cross_xz: DMatrix<f64>,
    /// `sum_n r_nc E[z~ z~^T]`, a `(d+1) x (d+1)` matrix.
    pub moment_zz: DMatrix<f64>,
    /// `sum_n r_nc x_n .* x_n`.
    pub sq_x_diag: DVector<f64>,
}

impl ComponentStats {
    /// `sum_n r_nc x_n` — the last column of the cross moment.
    pub fn weighted_input_sum(&self) -> DVector<f64> {
        self.cross_xz.column(self.cross_xz.ncols() - 1).into()
    }
}

/// E-step output: per-component moments plus dataset bookkeeping.
#[derive(Debug, Clone)]
pub struct SufficientStats {
    comps: Vec<ComponentStats>,
    n_rows: usize,
    data_dim: usize,
    factor_dim: usize,
}

impl SufficientStats {
    pub fn num_components(&self) -> usize {
        self.comps.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn component(&self, c: usize) -> &ComponentStats {
        &self.comps[c]
    }

    pub fn total_mass(&self) -> f64 {
        self.comps.iter().map(|s| s.mass).sum()
    }
}

/// Why a fit stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Converged,
    MaxIters,
    DegenerateRestartLimit,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Termination::Converged => write!(f, "converged"),
            Termination::MaxIters => write!(f, "max_iters"),
            Termination::DegenerateRestartLimit => write!(f, "degenerate_restart_limit"),
        }
    }
}

/// Per-iteration record of a fit.
#[derive(Debug, Clone)]
pub struct TrainingTrace {
    /// Average training log-likelihood (nats per example) of the model at the
    /// start of each recorded iteration.
    pub log_likelihoods: Vec<f64>,
    pub termination: Termination,
    /// Number of degenerate-component reseeds performed.
    pub reseeds: usize,
}

impl TrainingTrace {
    pub fn iterations(&self) -> usize {
        self.log_likelihoods.len()
    }

    pub fn final_log_likelihood(&self) -> f64 {
        self.log_likelihoods.last().copied().unwrap_or(f64::NAN)
    }
}

/// Distance-weighted (k-means++ style) seeding of component means, small
/// random loadings, data-variance noise, uniform mixing weights.
pub fn init_mfa(data: &Dataset, cfg: &EmConfig) -> Result<MfaModel> {
    cfg.validate(data)?;
    let rows = data.rows();
    let n = rows.nrows();
    let dim = rows.ncols();
    let mut rng = substream(cfg.seed, "init");

    let mut chosen: Vec<usize> = Vec::with_capacity(cfg.components);
    chosen.push(rng.random_range(0..n));
    let mut min_sq = vec![0.0f64; n];
    for i in 0..n {
        min_sq[i] = row_sq_dist(rows, i, chosen[0]);
    }
    while chosen.len() < cfg.components {
        let total: f64 = min_sq.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            WeightedIndex::new(min_sq.iter().copied())
                .map(|w| w.sample(&mut rng))
                .unwrap_or(0)
        } else {
            // All remaining distances are zero; take the first unchosen row.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for i in 0..n {
            min_sq[i] = min_sq[i].min(row_sq_dist(rows, i, next));
        }
    }

    let mut variance = DVector::zeros(dim);
    let mut mean = DVector::zeros(dim);
    for i in 0..n {
        mean += rows.row(i).transpose();
    }
    mean /= n as f64;
    for i in 0..n {
        let d = rows.row(i).transpose() - &mean;
        variance += d.component_mul(&d);
    }
    variance /= n as f64;
    let floor = cfg.variance_floor.max(VARIANCE_FLOOR);
    let noise = variance.map(|v| v.max(floor));

    let mut comps = Vec::with_capacity(cfg.components);
    for &idx in &chosen {
        let loading =
            DMatrix::from_fn(dim, cfg.factors, |_, _| 0.01 * rng.sample::<f64, _>(StandardNormal));
        comps.push(FactorAnalyser::new(
            loading,
            rows.row(idx).transpose(),
            noise.clone(),
        )?);
    }
    MfaModel::with_normalized_weights(comps, &vec![1.0; cfg.components])
}

fn row_sq_dist(rows: &DMatrix<f64>, a: usize, b: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..rows.ncols() {
        let d = rows[(a, j)] - rows[(b, j)];
        acc += d * d;
    }
    acc
}

struct ComponentAccum {
    mass: f64,
    cross_xz: DMatrix<f64>,
    mean_outer: DMatrix<f64>,
    mean_sum: DVector<f64>,
    sq_x_diag: DVector<f64>,
}

struct Accum {
    comps: Vec<ComponentAccum>,
    ll_sum: f64,
}

impl Accum {
    fn zero(c: usize, dim: usize, d: usize) -> Self {
        Self {
            comps: (0..c)
                .map(|_| ComponentAccum {
                    mass: 0.0,
                    cross_xz: DMatrix::zeros(dim, d + 1),
                    mean_outer: DMatrix::zeros(d, d),
                    mean_sum: DVector::zeros(d),
                    sq_x_diag: DVector::zeros(dim),
                })
                .collect(),
            ll_sum: 0.0,
        }
    }

    fn merge(mut self, other: Accum) -> Accum {
        self.ll_sum += other.ll_sum;
        for (a, b) in self.comps.iter_mut().zip(other.comps) {
            a.mass += b.mass;
            a.cross_xz += b.cross_xz;
            a.mean_outer += b.mean_outer;
            a.mean_sum += b.mean_sum;
            a.sq_x_diag += b.sq_x_diag;
        }
        self
    }
}

/// One E-step: sufficient statistics plus the exact average log-likelihood
/// (nats per example) of `model` on `data`.
pub fn e_step(model: &MfaModel, data: &Dataset) -> Result<(SufficientStats, f64)> {
    if model.data_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "e-step data",
            expected: model.data_dim(),
            got: data.dim(),
        });
    }
    let rows = data.rows();
    let n = rows.nrows();
    let c = model.num_components();
    let dim = model.data_dim();
    let d = model.factor_dim();

    let chunk_indices: Vec<usize> = (0..n).step_by(CHUNK_ROWS).collect();
    let partials: Vec<Accum> = chunk_indices
        .par_iter()
        .map(|&start| {
            let end = (start + CHUNK_ROWS).min(n);
            let mut acc = Accum::zero(c, dim, d);
            let mut x = DVector::zeros(dim);
            let mut joints = vec![0.0f64; c];
            let mut means: Vec<DVector<f64>> = vec![DVector::zeros(d); c];
            for i in start..end {
                for j in 0..dim {
                    x[j] = rows[(i, j)];
                }
                for k in 0..c {
                    let (ld, m) = model
                        .cache(k)
                        .log_density_and_posterior_mean(model.component(k), &x);
                    joints[k] = model.log_weights()[k] + ld;
                    means[k] = m;
                }
                let lse = logsumexp(&joints);
                acc.ll_sum += lse;
                softmax_in_place(&mut joints);
                for k in 0..c {
                    let r = joints[k];
                    let comp = &mut acc.comps[k];
                    comp.mass += r;
                    comp.mean_sum.axpy(r, &means[k], 1.0);
                    comp.mean_outer.ger(r, &means[k], &means[k], 1.0);
                    comp.cross_xz.columns_mut(0, d).ger(r, &x, &means[k], 1.0);
                    comp.cross_xz.column_mut(d).axpy(r, &x, 1.0);
                    for j in 0..dim {
                        comp.sq_x_diag[j] += r * x[j] * x[j];
                    }
                }
            }
            acc
        })
        .collect();

    let acc = partials
        .into_iter()
        .reduce(Accum::merge)
        .unwrap_or_else(|| Accum::zero(c, dim, d));

    let mut comps = Vec::with_capacity(c);
    for (k, ca) in acc.comps.into_iter().enumerate() {
        let mut moment = DMatrix::zeros(d + 1, d + 1);
        moment
            .view_mut((0, 0), (d, d))
            .copy_from(&(&ca.mean_outer + ca.mass * model.cache(k).posterior_cov()));
        moment.view_mut((0, d), (d, 1)).copy_from(&ca.mean_sum);
        moment
            .view_mut((d, 0), (1, d))
            .copy_from(&ca.mean_sum.transpose());
        moment[(d, d)] = ca.mass;
        let stats = ComponentStats {
            mass: ca.mass,
            cross_xz: ca.cross_xz,
            moment_zz: moment,
            sq_x_diag: ca.sq_x_diag,
        };
        let finite = stats.mass.is_finite()
            && stats.cross_xz.iter().all(|v| v.is_finite())
            && stats.moment_zz.iter().all(|v| v.is_finite())
            && stats.sq_x_diag.iter().all(|v| v.is_finite());
        if !finite {
            return Err(Error::EmFailure {
                component: k,
                reason: "non-finite sufficient statistics".into(),
            });
        }
        comps.push(stats);
    }

    Ok((
        SufficientStats {
            comps,
            n_rows: n,
            data_dim: dim,
            factor_dim: d,
        },
        acc.ll_sum / n as f64,
    ))
}

/// M-step output; `ridged` lists components whose augmented moment matrix
/// needed ridge regularization before the solve.
#[derive(Debug, Clone)]
pub struct MStep {
    pub model: MfaModel,
    pub ridged: Vec<usize>,
}

/// Closed-form parameter update from sufficient statistics:
/// `[W mu] = (sum r x z~^T)(sum r z~ z~^T)^-1`, noise from the residual
/// diagonal (floored), weights from the responsibility masses.
pub fn m_step(stats: &SufficientStats, cfg: &EmConfig) -> Result<MStep> {
    let d = stats.factor_dim;
    let dim = stats.data_dim;
    let floor = cfg.variance_floor.max(VARIANCE_FLOOR);
    let mut comps = Vec::with_capacity(stats.num_components());
    let mut masses = Vec::with_capacity(stats.num_components());
    let mut ridged = Vec::new();

    for (k, cs) in stats.comps.iter().enumerate() {
        if !(cs.mass > 0.0) {
            return Err(Error::EmFailure {
                component: k,
                reason: format!("responsibility mass {} is not positive", cs.mass),
            });
        }
        let chol = match Cholesky::new(cs.moment_zz.clone()) {
            Some(c) => c,
            None => {
                ridged.push(k);
                let mut m = cs.moment_zz.clone();
                for i in 0..=d {
                    m[(i, i)] += 1e-8;
                }
                Cholesky::new(m).ok_or_else(|| Error::EmFailure {
                    component: k,
                    reason: "augmented moment matrix singular even after ridge".into(),
                })?
            }
        };
        // X = cross * M^-1, solved as M X^T = cross^T.
        let solved = chol.solve(&cs.cross_xz.transpose()).transpose();
        let loading: DMatrix<f64> = solved.columns(0, d).into();
        let mean: DVector<f64> = solved.column(d).into();
        let mut noise = DVector::zeros(dim);
        for i in 0..dim {
            let mut explained = 0.0;
            for j in 0..=d {
                explained += solved[(i, j)] * cs.cross_xz[(i, j)];
            }
            noise[i] = ((cs.sq_x_diag[i] - explained) / cs.mass).max(floor);
        }
        comps.push(FactorAnalyser::new(loading, mean, noise)?);
        masses.push(cs.mass);
    }

    Ok(MStep {
        model: MfaModel::with_normalized_weights(comps, &masses)?,
        ridged,
    })
}

/// Full EM fit: init, alternate E/M until the relative log-likelihood change
/// drops below `rel_tol` or `max_iters` is reached. Components whose mass
/// falls below `min_effective_count` are reseeded (at most three times each)
/// by perturbing the mean of the heaviest component.
pub fn fit_mfa(data: &Dataset, cfg: &EmConfig) -> Result<(MfaModel, TrainingTrace)> {
    let mut model = init_mfa(data, cfg)?;
    let mut reseed_rng = substream(cfg.seed, "reseed");
    let mut reseed_counts = vec![0usize; cfg.components];
    let mut total_reseeds = 0usize;
    let mut trace = Vec::new();
    let mut prev_ll: Option<f64> = None;
    let mut best: Option<(f64, MfaModel)> = None;

    for _ in 0..cfg.max_iters {
        let (stats, ll) = e_step(&model, data)?;

        let degenerate: Vec<usize> = (0..cfg.components)
            .filter(|&k| stats.component(k).mass < cfg.min_effective_count)
            .collect();
        if !degenerate.is_empty() {
            for &k in &degenerate {
                reseed_counts[k] += 1;
                if reseed_counts[k] > MAX_RESEEDS_PER_COMPONENT {
                    let (_, best_model) = best.unwrap_or((ll, model));
                    return Ok((
                        best_model,
                        TrainingTrace {
                            log_likelihoods: trace,
                            termination: Termination::DegenerateRestartLimit,
                            reseeds: total_reseeds,
                        },
                    ));
                }
            }
            total_reseeds += degenerate.len();
            model = reseed_components(&model, &stats, &degenerate, &mut reseed_rng)?;
            continue;
        }

        trace.push(ll);
        if best.as_ref().is_none_or(|(b, _)| ll > *b) {
            best = Some((ll, model.clone()));
        }
        if let Some(prev) = prev_ll {
            if (ll - prev).abs() / prev.abs().max(f64::MIN_POSITIVE) < cfg.rel_tol {
                return Ok((
                    model,
                    TrainingTrace {
                        log_likelihoods: trace,
                        termination: Termination::Converged,
                        reseeds: total_reseeds,
                    },
                ));
            }
        }
        prev_ll = Some(ll);
        model = m_step(&stats, cfg)?.model;
    }

    Ok((
        model,
        TrainingTrace {
            log_likelihoods: trace,
            termination: Termination::MaxIters,
            reseeds: total_reseeds,
        },
    ))
}

/// Replace each listed component with a jittered copy of the heaviest one:
/// mean shifted by 0.1 x a random direction scaled by the donor's noise std,
/// loading and noise copied, weight split evenly with the donor.
fn reseed_components(
    model: &MfaModel,
    stats: &SufficientStats,
    degenerate: &[usize],
    rng: &mut impl Rng,
) -> Result<MfaModel> {
    let donor = (0..model.num_components())
        .max_by(|&a, &b| {
            stats
                .component(a)
                .mass
                .partial_cmp(&stats.component(b).mass)
                .unwrap()
        })
        .expect("non-empty mixture");
    let donor_fa = model.component(donor);
    let mut comps: Vec<FactorAnalyser> = model.components().to_vec();
    let mut weights: Vec<f64> = (0..model.num_components()).map(|k| model.weight(k)).collect();

    for &k in degenerate {
        let direction = DVector::from_fn(model.data_dim(), |i, _| {
            0.1 * donor_fa.noise_diag()[i].sqrt() * rng.sample::<f64, _>(StandardNormal)
        });
        comps[k] = FactorAnalyser::new(
            donor_fa.loading().clone(),
            donor_fa.mean() + direction,
            donor_fa.noise_diag().clone(),
        )?;
        let pool = weights[donor] + weights[k];
        weights[donor] = pool / 2.0;
        weights[k] = pool / 2.0;
    }
    MfaModel::with_normalized_weights(comps, &weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    use crate::data::Dataset;
    use crate::rng::substream;

    fn dataset_from(rows: DMatrix<f64>) -> Dataset {
        Dataset::from_matrix(rows).unwrap()
    }

    fn gaussian_blob(n: usize, center: &[f64], spread: f64, rng: &mut impl Rng) -> Vec<f64> {
        let dim = center.len();
        let mut out = Vec::with_capacity(n * dim);
        for _ in 0..n {
            for item in center.iter().take(dim) {
                out.push(item + spread * rng.sample::<f64, _>(StandardNormal));
            }
        }
        out
    }

    /// Draw rows from a known single-component FA.
    fn sample_fa(fa: &FactorAnalyser, n: usize, rng: &mut impl Rng) -> DMatrix<f64> {
        let dim = fa.data_dim();
        let d = fa.factor_dim();
        let mut rows = DMatrix::zeros(n, dim);
        for i in 0..n {
            let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let x = fa.loading() * z
                + fa.mean()
                + DVector::from_fn(dim, |j, _| {
                    fa.noise_diag()[j].sqrt() * rng.sample::<f64, _>(StandardNormal)
                });
            rows.row_mut(i).copy_from(&x.transpose());
        }
        rows
    }

    #[test]
    fn init_single_component_uses_a_data_row() {
        let data = dataset_from(DMatrix::from_row_slice(4, 2, &[
            1.0, 2.0, //
            3.0, 4.0, //
            5.0, 6.0, //
            7.0, 8.0,
        ]));
        let cfg = EmConfig::new(1, 1).with_seed(3);
        let model = init_mfa(&data, &cfg).unwrap();
        assert_eq!(model.log_weights()[0], 0.0);
        let mean = model.component(0).mean();
        let is_row = (0..4).any(|i| {
            (0..2).all(|j| (data.rows()[(i, j)] - mean[j]).abs() < 1e-15)
        });
        assert!(is_row);
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let mut rng = substream(0, "em-tests");
        let rows = DMatrix::from_fn(30, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows);
        let cfg = EmConfig::new(4, 2).with_seed(99);
        let a = init_mfa(&data, &cfg).unwrap();
        let b = init_mfa(&data, &cfg).unwrap();
        for k in 0..4 {
            assert_eq!(a.component(k).loading(), b.component(k).loading());
            assert_eq!(a.component(k).mean(), b.component(k).mean());
            assert_eq!(a.component(k).noise_diag(), b.component(k).noise_diag());
        }
        let c = init_mfa(&data, &cfg.clone().with_seed(100)).unwrap();
        assert_ne!(a.component(0).loading(), c.component(0).loading());
    }

    #[test]
    fn init_with_c_equal_n_picks_distinct_rows() {
        let rows = DMatrix::from_row_slice(5, 1, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let data = dataset_from(rows);
        let cfg = EmConfig::new(5, 1).with_seed(7);
        let model = init_mfa(&data, &cfg).unwrap();
        let mut means: Vec<f64> = (0..5).map(|k| model.component(k).mean()[0]).collect();
        means.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(means, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn init_rejects_more_components_than_rows() {
        let data = dataset_from(DMatrix::from_row_slice(2, 1, &[0.0, 1.0]));
        assert!(matches!(
            init_mfa(&data, &EmConfig::new(3, 1)),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn e_step_prior_posterior_for_zero_loading() {
        let mut rng = substream(1, "em-tests");
        let rows = DMatrix::from_fn(40, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows);
        let fa = FactorAnalyser::new(
            DMatrix::zeros(3, 2),
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let model = MfaModel::with_normalized_weights(vec![fa], &[1.0]).unwrap();
        let (stats, _) = e_step(&model, &data).unwrap();
        let cs = stats.component(0);
        assert_abs_diff_eq!(cs.mass, 40.0, epsilon = 1e-9);
        // E[z] = 0 for every row, so the z-block of the cross moment vanishes
        // and the zz moment reduces to N * I.
        assert!(cs.cross_xz.columns(0, 2).iter().all(|v| v.abs() < 1e-12));
        assert_abs_diff_eq!(
            cs.moment_zz.view((0, 0), (2, 2)).clone_owned(),
            40.0 * DMatrix::identity(2, 2),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(cs.weighted_input_sum(), data.rows().row_sum().transpose(), epsilon = 1e-9);
    }

    #[test]
    fn e_step_symmetry_on_mirrored_data() {
        let mut rng = substream(2, "em-tests");
        let half = DMatrix::from_fn(25, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut rows = DMatrix::zeros(50, 2);
        for i in 0..25 {
            let shifted = half.row(i).map(|v| v + 4.0);
            rows.row_mut(i).copy_from(&shifted);
            rows.row_mut(25 + i).copy_from(&(-shifted));
        }
        let data = dataset_from(rows);
        let loading = DMatrix::from_element(2, 1, 0.3);
        let noise = DVector::from_element(2, 1.0);
        let a = FactorAnalyser::new(loading.clone(), DVector::from_element(2, 4.0), noise.clone())
            .unwrap();
        let b = FactorAnalyser::new(loading, DVector::from_element(2, -4.0), noise).unwrap();
        let model = MfaModel::with_normalized_weights(vec![a, b], &[0.5, 0.5]).unwrap();
        let (stats, _) = e_step(&model, &data).unwrap();
        assert!((stats.component(0).mass - stats.component(1).mass).abs() < 1e-9 * 50.0);
        assert_abs_diff_eq!(stats.total_mass(), 50.0, epsilon = 1e-8);
    }

    #[test]
    fn e_step_matches_row_by_row_oracle() {
        let mut rng = substream(3, "em-tests");
        let rows = DMatrix::from_fn(50, 4, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows.clone());
        let comps: Vec<_> = (0..3)
            .map(|_| crate::model::tests::random_component(4, 2, &mut rng))
            .collect();
        let model = MfaModel::with_normalized_weights(comps, &[0.3, 0.3, 0.4]).unwrap();
        let (stats, avg_ll) = e_step(&model, &data).unwrap();

        // Oracle: per-row responsibilities and posteriors computed through
        // plain dense linear algebra, accumulated in row order.
        let mut masses = [0.0f64; 3];
        let mut ll = 0.0;
        let mut cross = vec![DMatrix::<f64>::zeros(4, 3); 3];
        for i in 0..50 {
            let x = rows.row(i).transpose();
            let joints: Vec<f64> = (0..3)
                .map(|k| {
                    model.log_weights()[k] + model.component_log_density(k, &x).unwrap()
                })
                .collect();
            let lse = logsumexp(&joints);
            ll += lse;
            for k in 0..3 {
                let r = (joints[k] - lse).exp();
                let fa = model.component(k);
                let v = DMatrix::identity(2, 2)
                    + fa.loading().transpose()
                        * DMatrix::from_diagonal(&fa.noise_diag().map(|p| 1.0 / p))
                        * fa.loading();
                let m = v.clone().try_inverse().unwrap()
                    * fa.loading().transpose()
                    * DMatrix::from_diagonal(&fa.noise_diag().map(|p| 1.0 / p))
                    * (&x - fa.mean());
                masses[k] += r;
                for row in 0..4 {
                    for col in 0..2 {
                        cross[k][(row, col)] += r * x[row] * m[col];
                    }
                    cross[k][(row, 2)] += r * x[row];
                }
            }
        }
        assert_abs_diff_eq!(avg_ll, ll / 50.0, epsilon = 1e-10);
        for k in 0..3 {
            let rel = (stats.component(k).mass - masses[k]).abs() / masses[k];
            assert!(rel < 1e-9);
            assert_abs_diff_eq!(stats.component(k).cross_xz, cross[k], epsilon = 1e-8);
        }
    }

    #[test]
    fn m_step_centered_single_component_recovers_mean_and_simplex() {
        let mut rng = substream(4, "em-tests");
        let rows = DMatrix::from_fn(200, 3, |_, j| {
            j as f64 + rng.sample::<f64, _>(StandardNormal)
        });
        let data = dataset_from(rows.clone());
        let fa = FactorAnalyser::new(
            DMatrix::zeros(3, 1),
            DVector::zeros(3),
            DVector::from_element(3, 1.0),
        )
        .unwrap();
        let model = MfaModel::with_normalized_weights(vec![fa], &[1.0]).unwrap();
        let (stats, _) = e_step(&model, &data).unwrap();
        let cfg = EmConfig::new(1, 1);
        let out = m_step(&stats, &cfg).unwrap();
        assert!(out.ridged.is_empty());
        let mean = out.model.component(0).mean();
        let data_mean = rows.row_mean().transpose();
        assert_abs_diff_eq!(mean, &data_mean, epsilon = 1e-9);
        assert_eq!(out.model.log_weights()[0], 0.0);
        assert!(out
            .model
            .component(0)
            .noise_diag()
            .iter()
            .all(|&p| p >= cfg.variance_floor));
    }

    #[test]
    fn m_step_recovers_loading_column_space() {
        let mut rng = substream(5, "em-tests");
        let loading = DMatrix::from_row_slice(4, 2, &[
            1.0, 0.0, //
            0.8, 0.5, //
            -0.3, 1.2, //
            0.0, -0.7,
        ]);
        let truth = FactorAnalyser::new(
            loading.clone(),
            DVector::from_vec(vec![0.5, -1.0, 2.0, 0.0]),
            DVector::from_element(4, 0.05),
        )
        .unwrap();
        let rows = sample_fa(&truth, 100_000, &mut rng);
        let data = dataset_from(rows);
        // Start EM from the truth; a single E/M round uses exact posteriors.
        let model = MfaModel::with_normalized_weights(vec![truth], &[1.0]).unwrap();
        let (stats, _) = e_step(&model, &data).unwrap();
        let refit = m_step(&stats, &EmConfig::new(1, 2)).unwrap().model;

        let qr_true = loading.qr();
        let qr_est = refit.component(0).loading().clone().qr();
        let overlap = qr_true.q().transpose() * qr_est.q();
        let sigma_min = overlap
            .svd(false, false)
            .singular_values
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b));
        let max_angle = sigma_min.min(1.0).acos();
        assert!(max_angle < 0.1, "principal angle {max_angle}");
    }

    #[test]
    fn em_step_is_near_fixed_point_of_its_own_large_sample() {
        let mut rng = substream(6, "em-tests");
        let loading = DMatrix::from_row_slice(4, 2, &[
            1.0, 0.2, //
            -0.4, 0.9, //
            0.7, -0.6, //
            0.1, 1.1,
        ]);
        let truth = FactorAnalyser::new(
            loading,
            DVector::from_vec(vec![1.0, 0.0, -2.0, 0.5]),
            DVector::from_element(4, 0.01),
        )
        .unwrap();
        let rows = sample_fa(&truth, 100_000, &mut rng);
        let data = dataset_from(rows);
        let model = MfaModel::with_normalized_weights(vec![truth.clone()], &[1.0]).unwrap();
        let (stats, _) = e_step(&model, &data).unwrap();
        let refit = m_step(&stats, &EmConfig::new(1, 2)).unwrap().model;

        let w_rel = (refit.component(0).loading() - truth.loading()).norm() / truth.loading().norm();
        let mu_rel = (refit.component(0).mean() - truth.mean()).norm() / truth.mean().norm();
        let psi_rel = (refit.component(0).noise_diag() - truth.noise_diag()).norm()
            / truth.noise_diag().norm();
        assert!(w_rel < 1e-3, "loading moved by {w_rel}");
        assert!(mu_rel < 1e-3, "mean moved by {mu_rel}");
        assert!(psi_rel < 1e-3, "noise moved by {psi_rel}");
    }

    #[test]
    fn fit_single_gaussian_is_monotone_and_converges() {
        let mut rng = substream(7, "em-tests");
        let rows = DMatrix::from_fn(500, 2, |_, _| 1.5 * rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows);
        let cfg = EmConfig::new(1, 1).with_seed(1).with_max_iters(100);
        let (_, trace) = fit_mfa(&data, &cfg).unwrap();
        assert_eq!(trace.reseeds, 0);
        assert!(trace.iterations() <= 100);
        for w in trace.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-8 * w[0].abs());
        }
    }

    #[test]
    fn fit_two_clusters_improves_log_likelihood() {
        let mut rng = substream(8, "em-tests");
        let mut flat = gaussian_blob(1000, &[-3.0, 0.0], 0.5, &mut rng);
        flat.extend(gaussian_blob(1000, &[3.0, 1.0], 0.5, &mut rng));
        let data = dataset_from(DMatrix::from_row_slice(2000, 2, &flat));
        let cfg = EmConfig::new(2, 1).with_seed(5).with_max_iters(60);
        let (_, trace) = fit_mfa(&data, &cfg).unwrap();
        assert!(trace.final_log_likelihood() > trace.log_likelihoods[0]);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let mut rng = substream(9, "em-tests");
        let rows = DMatrix::from_fn(300, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows);
        let cfg = EmConfig::new(3, 1).with_seed(11).with_max_iters(25);
        let (m1, t1) = fit_mfa(&data, &cfg).unwrap();
        let (m2, t2) = fit_mfa(&data, &cfg).unwrap();
        assert_eq!(t1.log_likelihoods, t2.log_likelihoods);
        for k in 0..3 {
            assert_eq!(m1.component(k).loading(), m2.component(k).loading());
            assert_eq!(m1.component(k).mean(), m2.component(k).mean());
        }
    }

    #[test]
    fn impossible_effective_count_hits_reseed_limit() {
        let mut rng = substream(10, "em-tests");
        let rows = DMatrix::from_fn(60, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let data = dataset_from(rows);
        let mut cfg = EmConfig::new(3, 1).with_seed(2).with_max_iters(50);
        // No 3-way split can give every component more than N/2 mass.
        cfg.min_effective_count = 30.0;
        let (model, trace) = fit_mfa(&data, &cfg).unwrap();
        assert_eq!(trace.termination, Termination::DegenerateRestartLimit);
        assert!(trace.reseeds > 0);
        assert_eq!(model.num_components(), 3);
    }
}
