//! Read-only MFA math: component and mixture log densities, responsibilities,
//! and factor posteriors.
//!
//! Every component covariance has the low-rank-plus-diagonal form
//! `Gamma = W W^T + Psi` with diagonal `Psi`. Densities are evaluated through
//! the Woodbury identity and the matrix determinant lemma using the cached
//! `d x d` matrix `V = I + W^T Psi^-1 W`, so cost per point is `O(D d + d^2)`
//! and the `D x D` covariance is never formed. All probability arithmetic is
//! carried in natural logs.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::math::{logsumexp, softmax_in_place};
use crate::{Error, Result};

/// Noise variances are clamped to this floor after every update; preprocessed
/// data is expected at unit average scale, where 1e-6 keeps `Gamma` invertible
/// even on rank-deficient (DC-removed) inputs.
pub const VARIANCE_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// One mixture component: `x = W z + mean + noise`, `z ~ N(0, I)`,
/// `noise ~ N(0, diag(noise_diag))`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorAnalyser {
    loading: DMatrix<f64>,
    mean: DVector<f64>,
    noise_diag: DVector<f64>,
}

impl FactorAnalyser {
    /// Validates finiteness, `factor_dim <= data_dim`, and the variance floor.
    pub fn new(loading: DMatrix<f64>, mean: DVector<f64>, noise_diag: DVector<f64>) -> Result<Self> {
        let dim = loading.nrows();
        if mean.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "factor analyser mean",
                expected: dim,
                got: mean.len(),
            });
        }
        if noise_diag.len() != dim {
            return Err(Error::DimensionMismatch {
                context: "factor analyser noise diagonal",
                expected: dim,
                got: noise_diag.len(),
            });
        }
        if loading.ncols() > dim {
            return Err(Error::InvalidModel(format!(
                "factor dimension {} exceeds data dimension {}",
                loading.ncols(),
                dim
            )));
        }
        if loading.iter().any(|v| !v.is_finite()) || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("factor analyser parameters".into()));
        }
        if noise_diag.iter().any(|&v| !v.is_finite() || v < VARIANCE_FLOOR) {
            return Err(Error::InvalidModel(format!(
                "noise variances must be finite and >= {VARIANCE_FLOOR}"
            )));
        }
        Ok(Self {
            loading,
            mean,
            noise_diag,
        })
    }

    pub fn data_dim(&self) -> usize {
        self.loading.nrows()
    }

    pub fn factor_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn loading(&self) -> &DMatrix<f64> {
        &self.loading
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn noise_diag(&self) -> &DVector<f64> {
        &self.noise_diag
    }

    /// `log N(x; mean, W W^T + Psi)` via the Woodbury path.
    ///
    /// Convenience wrapper that decomposes on the fly; batch callers go
    /// through [`MfaModel`], which caches the decomposition per component.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        check_input(self.data_dim(), x)?;
        let cache = GammaFactors::new(self)?;
        Ok(cache.log_density(self, x))
    }

    /// Gaussian posterior over the factors given `x`.
    pub fn factor_posterior(&self, x: &DVector<f64>) -> Result<FactorPosterior> {
        check_input(self.data_dim(), x)?;
        let cache = GammaFactors::new(self)?;
        Ok(cache.factor_posterior(self, x))
    }
}

fn check_input(dim: usize, x: &DVector<f64>) -> Result<()> {
    if x.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "input vector",
            expected: dim,
            got: x.len(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input vector".into()));
    }
    Ok(())
}

/// Cached decomposition of `Gamma = W W^T + Psi` for one component:
/// `V = I + W^T Psi^-1 W`, its Cholesky factor, and
/// `log det Gamma = sum(log psi_i) + log det V` (matrix determinant lemma).
#[derive(Debug, Clone)]
pub struct GammaFactors {
    v: DMatrix<f64>,
    v_chol: Cholesky<f64, Dyn>,
    log_det_gamma: f64,
    inv_noise: DVector<f64>,
    posterior_cov: DMatrix<f64>,
    posterior_factor: DMatrix<f64>,
}

impl GammaFactors {
    pub fn new(fa: &FactorAnalyser) -> Result<Self> {
        let d = fa.factor_dim();
        let inv_noise = fa.noise_diag.map(|v| 1.0 / v);
        // W^T Psi^-1 W without forming Psi^-1 as a matrix.
        let mut scaled = fa.loading.clone();
        for (mut row, inv) in scaled.row_iter_mut().zip(inv_noise.iter()) {
            row *= *inv;
        }
        let mut v = fa.loading.transpose() * scaled;
        for i in 0..d {
            v[(i, i)] += 1.0;
        }
        let v_chol = Cholesky::new(v.clone()).ok_or_else(|| {
            Error::InvalidModel("V = I + W^T Psi^-1 W is not positive definite".into())
        })?;
        let log_det_v: f64 = v_chol.l().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
        let log_det_gamma = fa.noise_diag.iter().map(|p| p.ln()).sum::<f64>() + log_det_v;
        let posterior_cov = v_chol.inverse();
        let posterior_factor = Cholesky::new(posterior_cov.clone())
            .ok_or_else(|| Error::InvalidModel("posterior covariance lost definiteness".into()))?
            .l();
        Ok(Self {
            v,
            v_chol,
            log_det_gamma,
            inv_noise,
            posterior_cov,
            posterior_factor,
        })
    }

    pub fn v(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn log_det_gamma(&self) -> f64 {
        self.log_det_gamma
    }

    /// Posterior covariance `V^-1`; independent of the evaluation point.
    pub fn posterior_cov(&self) -> &DMatrix<f64> {
        &self.posterior_cov
    }

    /// Lower Cholesky factor of `V^-1`, used for posterior draws.
    pub fn posterior_factor(&self) -> &DMatrix<f64> {
        &self.posterior_factor
    }

    /// Log density and posterior mean share all intermediate terms:
    /// with `u = x - mean`, `b = W^T Psi^-1 u`, the posterior mean is
    /// `m = V^-1 b` and the Mahalanobis form is `u^T Psi^-1 u - b^T m`.
    pub fn log_density_and_posterior_mean(
        &self,
        fa: &FactorAnalyser,
        x: &DVector<f64>,
    ) -> (f64, DVector<f64>) {
        let u = x - &fa.mean;
        let t = u.component_mul(&self.inv_noise);
        let q_diag = u.dot(&t);
        let b = fa.loading.tr_mul(&t);
        let m = self.v_chol.solve(&b);
        let quad = q_diag - b.dot(&m);
        let log_density =
            -0.5 * (fa.data_dim() as f64 * LN_2PI + self.log_det_gamma + quad);
        (log_density, m)
    }

    pub fn log_density(&self, fa: &FactorAnalyser, x: &DVector<f64>) -> f64 {
        self.log_density_and_posterior_mean(fa, x).0
    }

    pub fn factor_posterior(&self, fa: &FactorAnalyser, x: &DVector<f64>) -> FactorPosterior {
        let (_, mean) = self.log_density_and_posterior_mean(fa, x);
        FactorPosterior {
            mean,
            covariance: self.posterior_cov.clone(),
        }
    }
}

/// Gaussian posterior over a component's factors given one input.
#[derive(Debug, Clone)]
pub struct FactorPosterior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
}

impl FactorPosterior {
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }
}

/// Posterior over components for one input; `degenerate` flags the fallback
/// to a uniform vector when every component assigned zero density.
#[derive(Debug, Clone)]
pub struct Responsibilities {
    pub probs: DVector<f64>,
    pub degenerate: bool,
}

impl Responsibilities {
    /// Index of the most responsible component, ties to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Weighted list of factor analysers over a shared data space.
///
/// Mixing weights are stored as normalized logs; per-component decompositions
/// are cached at construction, after which the model is immutable and every
/// operation is a pure function.
#[derive(Debug, Clone)]
pub struct MfaModel {
    components: Vec<FactorAnalyser>,
    log_weights: DVector<f64>,
    caches: Vec<GammaFactors>,
}

impl MfaModel {
    pub fn new(components: Vec<FactorAnalyser>, log_weights: DVector<f64>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("mixture needs at least one component".into()));
        }
        if log_weights.len() != components.len() {
            return Err(Error::DimensionMismatch {
                context: "mixing weights",
                expected: components.len(),
                got: log_weights.len(),
            });
        }
        let dim = components[0].data_dim();
        let factors = components[0].factor_dim();
        for fa in &components[1..] {
            if fa.data_dim() != dim {
                return Err(Error::InvalidModel("components disagree on data dimension".into()));
            }
            if fa.factor_dim() != factors {
                return Err(Error::InvalidModel(
                    "components disagree on factor dimension".into(),
                ));
            }
        }
        let total: f64 = log_weights.iter().map(|lw| lw.exp()).sum();
        if !total.is_finite() || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidModel(format!(
                "mixing weights sum to {total}, expected 1"
            )));
        }
        let caches = components
            .iter()
            .map(GammaFactors::new)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            components,
            log_weights,
            caches,
        })
    }

    /// Builds a model from unnormalized positive weights, normalizing in log
    /// space so the simplex invariant holds exactly.
    pub fn with_normalized_weights(
        components: Vec<FactorAnalyser>,
        weights: &[f64],
    ) -> Result<Self> {
        if weights.iter().any(|&w| !w.is_finite() || w <= 0.0) {
            return Err(Error::InvalidModel("weights must be finite and positive".into()));
        }
        let logs: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let lse = logsumexp(&logs);
        let log_weights = DVector::from_iterator(logs.len(), logs.iter().map(|l| l - lse));
        Self::new(components, log_weights)
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn data_dim(&self) -> usize {
        self.components[0].data_dim()
    }

    pub fn factor_dim(&self) -> usize {
        self.components[0].factor_dim()
    }

    pub fn components(&self) -> &[FactorAnalyser] {
        &self.components
    }

    pub fn component(&self, c: usize) -> &FactorAnalyser {
        &self.components[c]
    }

    pub fn log_weights(&self) -> &DVector<f64> {
        &self.log_weights
    }

    pub fn weight(&self, c: usize) -> f64 {
        self.log_weights[c].exp()
    }

    pub fn cache(&self, c: usize) -> &GammaFactors {
        &self.caches[c]
    }

    /// `log N(x; mean_c, Gamma_c)` for one component.
    pub fn component_log_density(&self, c: usize, x: &DVector<f64>) -> Result<f64> {
        check_input(self.data_dim(), x)?;
        Ok(self.caches[c].log_density(&self.components[c], x))
    }

    /// `log pi_c + log p(x | c)` for every component, incrementing `evals`
    /// once per component density computed.
    pub fn log_joints_counted(&self, x: &DVector<f64>, evals: &mut u64) -> Result<DVector<f64>> {
        check_input(self.data_dim(), x)?;
        Ok(self.log_joints_unchecked(x, evals))
    }

    pub(crate) fn log_joints_unchecked(&self, x: &DVector<f64>, evals: &mut u64) -> DVector<f64> {
        DVector::from_iterator(
            self.num_components(),
            self.components
                .iter()
                .zip(&self.caches)
                .zip(self.log_weights.iter())
                .map(|((fa, cache), lw)| {
                    *evals += 1;
                    lw + cache.log_density(fa, x)
                }),
        )
    }

    /// `log p(x) = log sum_c pi_c N(x; mean_c, Gamma_c)` via log-sum-exp.
    pub fn mixture_log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let mut evals = 0;
        let joints = self.log_joints_counted(x, &mut evals)?;
        Ok(logsumexp(joints.as_slice()))
    }

    /// Posterior `p(c | x)`, normalized in log space.
    pub fn responsibilities(&self, x: &DVector<f64>) -> Result<Responsibilities> {
        let mut evals = 0;
        let mut joints = self.log_joints_counted(x, &mut evals)?;
        let ok = softmax_in_place(joints.as_mut_slice());
        Ok(Responsibilities {
            probs: joints,
            degenerate: !ok,
        })
    }

    /// Posterior over the factors of component `c` given `x`.
    pub fn factor_posterior(&self, c: usize, x: &DVector<f64>) -> Result<FactorPosterior> {
        check_input(self.data_dim(), x)?;
        Ok(self.caches[c].factor_posterior(&self.components[c], x))
    }

    /// Free-parameter count: `C (D d + 2 D) + (C - 1)` — loadings, means,
    /// noise diagonals, and the mixing simplex.
    pub fn count_parameters(&self) -> usize {
        let c = self.num_components();
        let d = self.data_dim();
        let k = self.factor_dim();
        c * (d * k + 2 * d) + (c - 1)
    }
}
