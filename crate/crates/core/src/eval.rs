//! Exact held-out scoring, deep-vs-shallow comparison experiments, and the
//! dense brute-force oracles the test suite checks the fast paths against.
//!
//! Log-likelihoods are always reported in nats per example on the
//! preprocessed scale; reports carry the preprocessing kind so numbers are
//! comparable across runs.

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{Dataset, PreprocessKind};
use crate::deep::{collapse, stack_layer, Allocation, DmfaNode, ExtractionMode, StackOptions};
use crate::em::{e_step, fit_mfa, m_step, EmConfig};
use crate::math::{fnv1a64, logsumexp};
use crate::model::MfaModel;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Held-out scoring summary.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Average log-likelihood, nats per example.
    pub avg_log_likelihood: f64,
    /// Sample standard deviation of per-row log-likelihoods over sqrt(N).
    pub std_error: f64,
    pub n_rows: usize,
    pub param_count: usize,
    pub preprocessing: PreprocessKind,
    pub wall_clock: Duration,
}

/// Per-row mixture log densities; parallel over rows with a fixed reduction
/// order, so results do not depend on thread count.
pub fn per_row_log_likelihoods(model: &MfaModel, data: &Dataset) -> Result<Vec<f64>> {
    if model.data_dim() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "evaluation data",
            expected: model.data_dim(),
            got: data.dim(),
        });
    }
    let rows = data.rows();
    (0..data.num_rows())
        .into_par_iter()
        .map(|i| model.mixture_log_density(&rows.row(i).transpose()))
        .collect()
}

fn report_from_rows(lls: &[f64], param_count: usize, kind: PreprocessKind, start: Instant) -> EvalReport {
    let n = lls.len();
    let mean = lls.iter().sum::<f64>() / n as f64;
    let std_error = if n > 1 {
        (lls.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
            / (n as f64).sqrt()
    } else {
        0.0
    };
    EvalReport {
        avg_log_likelihood: mean,
        std_error,
        n_rows: n,
        param_count,
        preprocessing: kind,
        wall_clock: start.elapsed(),
    }
}

/// Exact average log-likelihood of a shallow MFA on a dataset.
pub fn evaluate(model: &MfaModel, data: &Dataset) -> Result<EvalReport> {
    let start = Instant::now();
    let lls = per_row_log_likelihoods(model, data)?;
    Ok(report_from_rows(
        &lls,
        model.count_parameters(),
        data.preprocessing().kind,
        start,
    ))
}

/// Exact evaluation of a DMFA: collapse first, then score the shallow form
/// through the same code path.
pub fn evaluate_node(node: &DmfaNode, data: &Dataset) -> Result<EvalReport> {
    evaluate(&collapse(node)?, data)
}

/// Dense multivariate-normal log density with `Gamma = W W^T + diag(psi)`
/// formed explicitly — the brute-force cross-check for the Woodbury path.
/// Oracle scale only (`D <= 64`).
pub fn dense_oracle_log_density(
    loading: &DMatrix<f64>,
    mean: &DVector<f64>,
    noise_diag: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    let dim = loading.nrows();
    if dim > 64 {
        return Err(Error::InvalidConfig(format!(
            "dense oracle is limited to D <= 64, got {dim}"
        )));
    }
    if mean.len() != dim || noise_diag.len() != dim || x.len() != dim {
        return Err(Error::DimensionMismatch {
            context: "dense oracle",
            expected: dim,
            got: x.len(),
        });
    }
    let gamma = loading * loading.transpose() + DMatrix::from_diagonal(noise_diag);
    dense_gaussian_log_density(mean, &gamma, x)
}

fn dense_gaussian_log_density(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    x: &DVector<f64>,
) -> Result<f64> {
    let chol = cov
        .clone()
        .cholesky()
        .ok_or_else(|| Error::InvalidModel("singular covariance in dense oracle".into()))?;
    let log_det: f64 = chol.l().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
    let u = x - mean;
    let quad = u.dot(&chol.solve(&u));
    Ok(-0.5 * (mean.len() as f64 * LN_2PI + log_det + quad))
}

/// Flat enumeration of a tree's components as dense
/// `(weight, mean, covariance)` triples, built by direct recursion over the
/// generative equations — independent of `collapse`.
pub fn dense_flatten(node: &DmfaNode) -> Vec<(f64, DVector<f64>, DMatrix<f64>)> {
    let layer = node.layer();
    let mut out = Vec::new();
    for c in 0..layer.num_components() {
        let fa = layer.component(c);
        let pc = layer.weight(c);
        let psi = DMatrix::from_diagonal(fa.noise_diag());
        match node.child(c) {
            None => out.push((
                pc,
                fa.mean().clone(),
                fa.loading() * fa.loading().transpose() + &psi,
            )),
            Some(child) => {
                for (w, m, cov) in dense_flatten(child) {
                    out.push((
                        pc * w,
                        fa.loading() * m + fa.mean(),
                        fa.loading() * cov * fa.loading().transpose() + &psi,
                    ));
                }
            }
        }
    }
    out
}

/// Mixture log density of a tree evaluated through [`dense_flatten`];
/// oracle scale only (`D <= 64`).
pub fn dense_node_log_density(node: &DmfaNode, x: &DVector<f64>) -> Result<f64> {
    if node.data_dim() > 64 {
        return Err(Error::InvalidConfig("dense oracle is limited to D <= 64".into()));
    }
    let terms = dense_flatten(node)
        .into_iter()
        .map(|(w, m, cov)| Ok(w.ln() + dense_gaussian_log_density(&m, &cov, x)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(logsumexp(&terms))
}

/// Experiment arms, named as in the comparison tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arm {
    Mfa1,
    Mfa2,
    Mfa3,
    Shallow1,
    Shallow2,
}

impl std::fmt::Display for Arm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Arm::Mfa1 => write!(f, "MFA-1"),
            Arm::Mfa2 => write!(f, "MFA-2"),
            Arm::Mfa3 => write!(f, "MFA-3"),
            Arm::Shallow1 => write!(f, "Shallow1"),
            Arm::Shallow2 => write!(f, "Shallow2"),
        }
    }
}

/// One trained-and-scored arm.
#[derive(Debug, Clone)]
pub struct ArmReport {
    pub arm: Arm,
    pub test: EvalReport,
    pub validation_ll: f64,
    /// Per-row test log-likelihoods, kept for paired differences.
    pub test_row_lls: Vec<f64>,
    pub train_trace: Vec<f64>,
    pub validation_trace: Vec<f64>,
}

/// Mean and standard error of a per-row paired difference.
#[derive(Debug, Clone, Copy)]
pub struct PairedDiff {
    pub mean: f64,
    pub std_error: f64,
}

/// Difference of per-row log-likelihoods between two arms; never computed
/// from rounded averages.
pub fn paired_diff(a: &[f64], b: &[f64]) -> Result<PairedDiff> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::DimensionMismatch {
            context: "paired difference",
            expected: a.len(),
            got: b.len(),
        });
    }
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std_error = if diffs.len() > 1 {
        (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>()
            / (diffs.len() as f64 - 1.0))
            .sqrt()
            / (diffs.len() as f64).sqrt()
    } else {
        0.0
    };
    Ok(PairedDiff { mean, std_error })
}

/// Outcome of one arm: a report, or the error that killed it.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub arm: Arm,
    pub result: std::result::Result<ArmReport, String>,
}

/// All arms plus the paired layer gains.
#[derive(Debug, Clone)]
pub struct ComparisonReport {
    pub arms: Vec<ArmOutcome>,
    /// `LL(MFA-2) - LL(MFA-1)` on paired test rows.
    pub diff2: Option<PairedDiff>,
    /// `LL(MFA-3) - LL(MFA-2)` on paired test rows.
    pub diff3: Option<PairedDiff>,
}

impl ComparisonReport {
    pub fn arm(&self, arm: Arm) -> Option<&ArmReport> {
        self.arms
            .iter()
            .find(|o| o.arm == arm)
            .and_then(|o| o.result.as_ref().ok())
    }
}

/// Deep-vs-shallow protocol configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub components: usize,
    pub factors: usize,
    pub child_components: usize,
    pub child_factors: usize,
    /// `(components, factors)` of a third layer; `None` skips the MFA-3 arm.
    pub third_layer: Option<(usize, usize)>,
    pub seed: u64,
    pub max_iters: usize,
    pub rel_tol: f64,
    /// Random restarts for the Shallow2 arm (best validation kept).
    pub shallow2_restarts: usize,
    /// Iterations without validation improvement before Shallow1 stops.
    pub early_stop_patience: usize,
    pub extraction: ExtractionMode,
}

impl ExperimentConfig {
    pub fn new(components: usize, factors: usize, child_components: usize, child_factors: usize) -> Self {
        Self {
            components,
            factors,
            child_components,
            child_factors,
            third_layer: None,
            seed: 0,
            max_iters: 100,
            rel_tol: 1e-4,
            shallow2_restarts: 5,
            early_stop_patience: 3,
            extraction: ExtractionMode::Sample,
        }
    }
}

/// EM on a given starting model with early stopping on validation
/// log-likelihood: stop after `patience` iterations without improvement and
/// return the best-validation snapshot plus both traces.
pub fn fit_with_early_stopping(
    init: MfaModel,
    train: &Dataset,
    valid: &Dataset,
    cfg: &EmConfig,
    patience: usize,
) -> Result<(MfaModel, Vec<f64>, Vec<f64>)> {
    let mut model = init;
    let mut train_trace = Vec::new();
    let mut valid_trace = Vec::new();
    let mut best: Option<(f64, MfaModel)> = None;
    let mut since_best = 0usize;

    for _ in 0..cfg.max_iters {
        let (stats, train_ll) = e_step(&model, train)?;
        let valid_ll = per_row_log_likelihoods(&model, valid)?
            .iter()
            .sum::<f64>()
            / valid.num_rows() as f64;
        train_trace.push(train_ll);
        valid_trace.push(valid_ll);
        if best.as_ref().is_none_or(|(b, _)| valid_ll > *b) {
            best = Some((valid_ll, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= patience {
                break;
            }
        }
        model = m_step(&stats, cfg)?.model;
    }
    let (_, best_model) = best.expect("at least one iteration ran");
    Ok((best_model, train_trace, valid_trace))
}

/// The deep-vs-shallow comparison protocol.
///
/// Trains MFA-1, stacks MFA-2 (and optionally MFA-3); builds Shallow1 by
/// collapsing the freshly *initialized* second layer and continuing EM with
/// early stopping on validation; builds Shallow2 from random initialization
/// with the collapsed component count and restarts. Every arm is scored on
/// the test split; a failed arm is marked and the rest proceed.
pub fn run_overfit_experiment(
    train: &Dataset,
    valid: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<ComparisonReport> {
    let mut arms = Vec::new();

    let em1 = EmConfig {
        max_iters: cfg.max_iters,
        rel_tol: cfg.rel_tol,
        ..EmConfig::new(cfg.components, cfg.factors).with_seed(cfg.seed ^ fnv1a64("mfa1"))
    };
    let mfa1 = fit_mfa(train, &em1);

    let mfa1_arm = match &mfa1 {
        Ok((model, trace)) => {
            match score_arm(Arm::Mfa1, model, valid, test, trace.log_likelihoods.clone(), vec![]) {
                Ok(report) => {
                    arms.push(ArmOutcome {
                        arm: Arm::Mfa1,
                        result: Ok(report.clone()),
                    });
                    Some(report)
                }
                Err(e) => {
                    arms.push(ArmOutcome {
                        arm: Arm::Mfa1,
                        result: Err(e.to_string()),
                    });
                    None
                }
            }
        }
        Err(e) => {
            arms.push(ArmOutcome {
                arm: Arm::Mfa1,
                result: Err(e.to_string()),
            });
            None
        }
    };

    let stack_opts = StackOptions {
        mode: cfg.extraction,
        max_iters: cfg.max_iters,
        rel_tol: cfg.rel_tol,
        ..StackOptions::new(
            cfg.child_factors,
            Allocation::PerComponent(cfg.child_components),
            cfg.seed ^ fnv1a64("stack2"),
        )
    };

    let node2 = match &mfa1 {
        Ok((model, _)) => stack_layer(DmfaNode::leaf(model.clone()), train, &stack_opts)
            .map(|(node, _)| node)
            .map_err(|e| e.to_string()),
        Err(e) => Err(format!("MFA-1 unavailable: {e}")),
    };

    let mfa2_arm = match &node2 {
        Ok(node) => match collapse(node)
            .map_err(|e| e.to_string())
            .and_then(|shallow| {
                score_arm(Arm::Mfa2, &shallow, valid, test, vec![], vec![])
                    .map_err(|e| e.to_string())
            }) {
            Ok(report) => {
                arms.push(ArmOutcome {
                    arm: Arm::Mfa2,
                    result: Ok(report.clone()),
                });
                Some(report)
            }
            Err(e) => {
                arms.push(ArmOutcome {
                    arm: Arm::Mfa2,
                    result: Err(e),
                });
                None
            }
        },
        Err(e) => {
            arms.push(ArmOutcome {
                arm: Arm::Mfa2,
                result: Err(e.clone()),
            });
            None
        }
    };

    let mfa3_arm = cfg.third_layer.and_then(|(k3, d3)| {
        let opts3 = StackOptions {
            mode: cfg.extraction,
            max_iters: cfg.max_iters,
            rel_tol: cfg.rel_tol,
            ..StackOptions::new(d3, Allocation::PerComponent(k3), cfg.seed ^ fnv1a64("stack3"))
        };
        let outcome = match &node2 {
            Ok(node) => stack_layer(node.clone(), train, &opts3)
                .map_err(|e| e.to_string())
                .and_then(|(node3, _)| collapse(&node3).map_err(|e| e.to_string()))
                .and_then(|shallow| {
                    score_arm(Arm::Mfa3, &shallow, valid, test, vec![], vec![])
                        .map_err(|e| e.to_string())
                }),
            Err(e) => Err(format!("MFA-2 unavailable: {e}")),
        };
        match outcome {
            Ok(report) => {
                arms.push(ArmOutcome {
                    arm: Arm::Mfa3,
                    result: Ok(report.clone()),
                });
                Some(report)
            }
            Err(e) => {
                arms.push(ArmOutcome {
                    arm: Arm::Mfa3,
                    result: Err(e),
                });
                None
            }
        }
    });

    // Shallow1: the same extraction seed routes the same rows, but children
    // are only initialized; the collapsed model then trains as one shallow
    // MFA with early stopping on validation.
    let shallow1_outcome: std::result::Result<ArmReport, String> = match &mfa1 {
        Ok((model, _)) => {
            let init_opts = StackOptions {
                child_em: false,
                ..stack_opts.clone()
            };
            stack_layer(DmfaNode::leaf(model.clone()), train, &init_opts)
                .map_err(|e| e.to_string())
                .and_then(|(node, _)| collapse(&node).map_err(|e| e.to_string()))
                .and_then(|collapsed| {
                    let em = EmConfig {
                        max_iters: cfg.max_iters,
                        rel_tol: cfg.rel_tol,
                        ..EmConfig::new(collapsed.num_components(), collapsed.factor_dim())
                    };
                    fit_with_early_stopping(collapsed, train, valid, &em, cfg.early_stop_patience)
                        .map_err(|e| e.to_string())
                })
                .and_then(|(model, train_trace, valid_trace)| {
                    score_arm(Arm::Shallow1, &model, valid, test, train_trace, valid_trace)
                        .map_err(|e| e.to_string())
                })
        }
        Err(e) => Err(format!("MFA-1 unavailable: {e}")),
    };
    arms.push(ArmOutcome {
        arm: Arm::Shallow1,
        result: shallow1_outcome,
    });

    // Shallow2: same flat component count, first-layer factor dimension,
    // random initializations, best validation of R restarts kept.
    let flat_components = match &node2 {
        Ok(node) => node.flat_len(),
        Err(_) => cfg.components * cfg.child_components,
    };
    let shallow2_outcome = (|| -> std::result::Result<ArmReport, String> {
        let mut best: Option<(f64, MfaModel, Vec<f64>)> = None;
        for r in 0..cfg.shallow2_restarts.max(1) {
            let em = EmConfig {
                max_iters: cfg.max_iters,
                rel_tol: cfg.rel_tol,
                ..EmConfig::new(flat_components, cfg.factors)
                    .with_seed(cfg.seed ^ fnv1a64(&format!("shallow2-{r}")))
            };
            let (model, trace) = fit_mfa(train, &em).map_err(|e| e.to_string())?;
            let valid_ll = per_row_log_likelihoods(&model, valid)
                .map_err(|e| e.to_string())?
                .iter()
                .sum::<f64>()
                / valid.num_rows() as f64;
            if best.as_ref().is_none_or(|(b, _, _)| valid_ll > *b) {
                best = Some((valid_ll, model, trace.log_likelihoods));
            }
        }
        let (_, model, train_trace) = best.expect("at least one restart");
        score_arm(Arm::Shallow2, &model, valid, test, train_trace, vec![])
            .map_err(|e| e.to_string())
    })();
    arms.push(ArmOutcome {
        arm: Arm::Shallow2,
        result: shallow2_outcome,
    });

    let diff2 = match (&mfa2_arm, &mfa1_arm) {
        (Some(a2), Some(a1)) => Some(paired_diff(&a2.test_row_lls, &a1.test_row_lls)?),
        _ => None,
    };
    let diff3 = match (&mfa3_arm, &mfa2_arm) {
        (Some(a3), Some(a2)) => Some(paired_diff(&a3.test_row_lls, &a2.test_row_lls)?),
        _ => None,
    };

    Ok(ComparisonReport { arms, diff2, diff3 })
}

fn score_arm(
    arm: Arm,
    model: &MfaModel,
    valid: &Dataset,
    test: &Dataset,
    train_trace: Vec<f64>,
    validation_trace: Vec<f64>,
) -> Result<ArmReport> {
    let start = Instant::now();
    let test_row_lls = per_row_log_likelihoods(model, test)?;
    let test_report = report_from_rows(
        &test_row_lls,
        model.count_parameters(),
        test.preprocessing().kind,
        start,
    );
    let validation_ll = per_row_log_likelihoods(model, valid)?.iter().sum::<f64>()
        / valid.num_rows() as f64;
    Ok(ArmReport {
        arm,
        test: test_report,
        validation_ll,
        test_row_lls,
        train_trace,
        validation_trace,
    })
}

/// One row of the layer-gain-versus-component-count sweep.
#[derive(Debug, Clone)]
pub struct GainRow {
    pub components: usize,
    pub mfa1_test_ll: f64,
    pub mfa2_test_ll: f64,
    pub diff2: PairedDiff,
    pub deep_params: usize,
    pub collapsed_params: usize,
}

/// Layer gain as the number of first-layer components varies.
pub fn run_gain_vs_c(
    train: &Dataset,
    test: &Dataset,
    cfg: &ExperimentConfig,
    component_counts: &[usize],
) -> Result<Vec<GainRow>> {
    let mut out = Vec::with_capacity(component_counts.len());
    for &c in component_counts {
        let em1 = EmConfig {
            max_iters: cfg.max_iters,
            rel_tol: cfg.rel_tol,
            ..EmConfig::new(c, cfg.factors).with_seed(cfg.seed ^ fnv1a64(&format!("gain-mfa1-{c}")))
        };
        let (mfa1, _) = fit_mfa(train, &em1)?;
        let opts = StackOptions {
            mode: cfg.extraction,
            max_iters: cfg.max_iters,
            rel_tol: cfg.rel_tol,
            ..StackOptions::new(
                cfg.child_factors,
                Allocation::PerComponent(cfg.child_components),
                cfg.seed ^ fnv1a64(&format!("gain-stack-{c}")),
            )
        };
        let (node2, _) = stack_layer(DmfaNode::leaf(mfa1.clone()), train, &opts)?;
        let collapsed = collapse(&node2)?;
        let lls1 = per_row_log_likelihoods(&mfa1, test)?;
        let lls2 = per_row_log_likelihoods(&collapsed, test)?;
        out.push(GainRow {
            components: c,
            mfa1_test_ll: lls1.iter().sum::<f64>() / lls1.len() as f64,
            mfa2_test_ll: lls2.iter().sum::<f64>() / lls2.len() as f64,
            diff2: paired_diff(&lls2, &lls1)?,
            deep_params: crate::deep::count_parameters_deep(&node2),
            collapsed_params: collapsed.count_parameters(),
        });
    }
    Ok(out)
}

/// Write a training trace as CSV (`iteration,train_ll[,valid_ll]`).
pub fn emit_trace_csv(
    train: &[f64],
    valid: Option<&[f64]>,
    path: impl AsRef<Path>,
) -> Result<()> {
    if let Some(v) = valid {
        if v.len() != train.len() {
            return Err(Error::DimensionMismatch {
                context: "trace columns",
                expected: train.len(),
                got: v.len(),
            });
        }
    }
    let mut out = String::new();
    match valid {
        Some(_) => out.push_str("iteration,train_ll,valid_ll\n"),
        None => out.push_str("iteration,train_ll\n"),
    }
    for (i, t) in train.iter().enumerate() {
        match valid {
            Some(v) => out.push_str(&format!("{},{},{}\n", i + 1, t, v[i])),
            None => out.push_str(&format!("{},{}\n", i + 1, t)),
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the per-arm comparison summary as CSV; failed arms keep their row
/// with a `failed` status and empty numeric cells.
pub fn emit_comparison_csv(report: &ComparisonReport, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from("arm,status,test_ll,test_se,n,params,validation_ll\n");
    for outcome in &report.arms {
        match &outcome.result {
            Ok(r) => out.push_str(&format!(
                "{},ok,{},{},{},{},{}\n",
                outcome.arm,
                r.test.avg_log_likelihood,
                r.test.std_error,
                r.test.n_rows,
                r.test.param_count,
                r.validation_ll
            )),
            Err(_) => out.push_str(&format!("{},failed,,,,,\n", outcome.arm)),
        }
    }
    if let Some(d) = report.diff2 {
        out.push_str(&format!("Diff-2,ok,{},{},,,\n", d.mean, d.std_error));
    }
    if let Some(d) = report.diff3 {
        out.push_str(&format!("Diff-3,ok,{},{},,,\n", d.mean, d.std_error));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Write the gain-versus-components sweep as CSV, one row per count.
pub fn emit_gain_csv(rows: &[GainRow], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::from(
        "components,mfa1_test_ll,mfa2_test_ll,diff2,diff2_se,deep_params,collapsed_params\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.components,
            r.mfa1_test_ll,
            r.mfa2_test_ll,
            r.diff2.mean,
            r.diff2.std_error,
            r.deep_params,
            r.collapsed_params
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
