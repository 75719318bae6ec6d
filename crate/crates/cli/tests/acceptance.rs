//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! with its elapsed time. Run with `--test-threads=1 --nocapture` to see the
//! lines and keep the per-criterion runtime budgets meaningful.

use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use dmfa_core::data::{synth_curved, synth_hier, HierRecipe};
use dmfa_core::deep::{
    collapse, count_parameters_deep, hard_inference_counted, sample, sample_with_flat_components,
    stack_layer, Allocation, DmfaNode, InferenceOptions, StackOptions,
};
use dmfa_core::em::{fit_mfa, EmConfig};
use dmfa_core::eval::{
    dense_node_log_density, dense_oracle_log_density, paired_diff, per_row_log_likelihoods,
    run_overfit_experiment, Arm, ExperimentConfig,
};
use dmfa_core::model::{FactorAnalyser, MfaModel};

fn verdict(number: u32, name: &str, ok: bool, start: Instant, budget_s: f64) {
    let elapsed = start.elapsed().as_secs_f64();
    let within = elapsed < budget_s;
    println!(
        "criterion {number} ({name}): {} in {elapsed:.1} s (budget {budget_s} s)",
        if ok && within { "PASS" } else { "FAIL" }
    );
    assert!(ok, "criterion {number} ({name}) failed");
    assert!(
        within,
        "criterion {number} ({name}) exceeded its runtime budget: {elapsed:.1} s"
    );
}

fn random_fa(dim: usize, factors: usize, rng: &mut ChaCha8Rng) -> FactorAnalyser {
    let loading = DMatrix::from_fn(dim, factors, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mean = DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
    let noise = DVector::from_fn(dim, |_, _| rng.random_range(0.1..2.0));
    FactorAnalyser::new(loading, mean, noise).unwrap()
}

fn random_mfa(dim: usize, factors: usize, components: usize, rng: &mut ChaCha8Rng) -> MfaModel {
    let comps = (0..components).map(|_| random_fa(dim, factors, rng)).collect();
    let weights: Vec<f64> = (0..components).map(|_| 1.0 + rng.random_range(0.0..0.5)).collect();
    MfaModel::with_normalized_weights(comps, &weights).unwrap()
}

fn random_tree(
    dims: &[usize],
    comps: &[usize],
    rng: &mut ChaCha8Rng,
) -> DmfaNode {
    let layer = random_mfa(dims[0], dims[1], comps[0], rng);
    if dims.len() == 2 {
        return DmfaNode::leaf(layer);
    }
    let children = (0..comps[0])
        .map(|_| Some(random_tree(&dims[1..], &comps[1..], rng)))
        .collect();
    DmfaNode::new(layer, children).unwrap()
}

#[test]
fn criterion_1_oracle_equivalence() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let dim = rng.random_range(1..=20);
        let d = rng.random_range(1..=dim);
        let fa = random_fa(dim, d, &mut rng);
        let x = fa.mean()
            + DVector::from_fn(dim, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
        let fast = fa.log_density(&x).unwrap();
        let dense =
            dense_oracle_log_density(fa.loading(), fa.mean(), fa.noise_diag(), &x).unwrap();
        worst = worst.max((fast - dense).abs());
    }
    println!("  worst |woodbury - dense| over 1000 components: {worst:.3e}");
    verdict(1, "oracle equivalence", worst < 1e-8, start, 10.0);
}

#[test]
fn criterion_2_em_monotonicity() {
    let start = Instant::now();
    let mut ok = true;
    for seed in 0..10u64 {
        let data = synth_curved(2000, seed, 0.1).unwrap();
        let cfg = EmConfig::new(5, 1).with_seed(seed);
        let (_, trace) = fit_mfa(&data, &cfg).unwrap();
        if trace.reseeds != 0 {
            println!("  seed {seed}: reseeds fired ({})", trace.reseeds);
            ok = false;
        }
        for w in trace.log_likelihoods.windows(2) {
            if w[1] < w[0] - 1e-8 * w[0].abs() {
                println!("  seed {seed}: decrease {} -> {}", w[0], w[1]);
                ok = false;
            }
        }
    }
    verdict(2, "EM monotonicity", ok, start, 30.0);
}

#[test]
fn criterion_3_collapse_exactness_and_sampling() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst: f64 = 0.0;

    for i in 0..100 {
        let depth3 = i % 2 == 1;
        let dim = rng.random_range(4..=10);
        let d1 = rng.random_range(2..=dim.min(5));
        let d2 = rng.random_range(1..=d1);
        let c = rng.random_range(1..=4);
        let k = rng.random_range(1..=3);
        let node = if depth3 {
            let d3 = rng.random_range(1..=d2);
            let k3 = rng.random_range(1..=3);
            random_tree(&[dim, d1, d2, d3], &[c, k, k3], &mut rng)
        } else {
            random_tree(&[dim, d1, d2], &[c, k], &mut rng)
        };
        let collapsed = collapse(&node).unwrap();
        for _ in 0..20 {
            let x = DVector::from_fn(dim, |_, _| 3.0 * rng.sample::<f64, _>(StandardNormal));
            let fast = collapsed.mixture_log_density(&x).unwrap();
            let dense = dense_node_log_density(&node, &x).unwrap();
            worst = worst.max((fast - dense).abs());
        }
    }
    println!("  worst |collapsed - dense flat| over 100 trees: {worst:.3e}");
    let exact_ok = worst < 1e-8;

    // Ancestral-sample component covariances against the collapsed Gammas.
    let mut cov_ok = true;
    for depth3 in [false, true] {
        let node = if depth3 {
            random_tree(&[6, 3, 2, 1], &[2, 2, 2], &mut rng)
        } else {
            random_tree(&[8, 3, 2], &[2, 2], &mut rng)
        };
        let collapsed = collapse(&node).unwrap();
        let n = 200_000;
        let (rows, flats) = sample_with_flat_components(&node, n, 777).unwrap();
        let dim = node.data_dim();
        for s in 0..collapsed.num_components() {
            let members: Vec<usize> = (0..n).filter(|&i| flats[i] == s).collect();
            let mut mean = DVector::zeros(dim);
            for &i in &members {
                mean += rows.row(i).transpose();
            }
            mean /= members.len() as f64;
            let mut cov = DMatrix::zeros(dim, dim);
            for &i in &members {
                let d = rows.row(i).transpose() - &mean;
                cov.ger(1.0, &d, &d, 1.0);
            }
            cov /= members.len() as f64 - 1.0;
            let fa = collapsed.component(s);
            let gamma =
                fa.loading() * fa.loading().transpose() + DMatrix::from_diagonal(fa.noise_diag());
            let rel = (&cov - &gamma).norm() / gamma.norm();
            if rel >= 0.02 {
                println!(
                    "  depth{} flat component {s}: covariance off by {rel:.4} ({} draws)",
                    if depth3 { 3 } else { 2 },
                    members.len()
                );
                cov_ok = false;
            }
        }
    }
    verdict(3, "collapse exactness", exact_ok && cov_ok, start, 120.0);
}

#[test]
fn criterion_4_diff2_sign_on_hierarchical_truth() {
    let start = Instant::now();
    let mut wins = 0;
    for seed in 0..10u64 {
        let recipe = HierRecipe::new(16, 3, 6, 3, 2);
        let (train, node) = synth_hier(&recipe, 5000, 1000 + seed).unwrap();
        let test = sample(&node, 2000, 2000 + seed).unwrap();

        let cfg = EmConfig::new(3, 6).with_seed(seed).with_max_iters(60);
        let (mfa1, _) = fit_mfa(&train, &cfg).unwrap();
        let opts = StackOptions {
            max_iters: 60,
            ..StackOptions::new(2, Allocation::PerComponent(3), 3000 + seed)
        };
        let (node2, _) = stack_layer(DmfaNode::leaf(mfa1.clone()), &train, &opts).unwrap();
        let collapsed = collapse(&node2).unwrap();

        let lls1 = per_row_log_likelihoods(&mfa1, &test).unwrap();
        let lls2 = per_row_log_likelihoods(&collapsed, &test).unwrap();
        let diff = paired_diff(&lls2, &lls1).unwrap();
        let win = diff.mean > 2.0 * diff.std_error;
        println!(
            "  seed {seed}: Diff-2 = {:.4} +- {:.4} ({})",
            diff.mean,
            diff.std_error,
            if win { "win" } else { "miss" }
        );
        if win {
            wins += 1;
        }
    }
    verdict(4, "Diff-2 sign", wins >= 8, start, 180.0);
}

#[test]
fn criterion_5_overfitting_demonstration() {
    let start = Instant::now();
    let mut capacity_wins = 0;
    let mut decline_count = 0;
    for seed in 0..10u64 {
        let recipe = HierRecipe {
            mean_separation: 2.5,
            child_separation: 2.5,
            noise: 0.1,
            ..HierRecipe::new(64, 3, 32, 3, 4)
        };
        let (train, node) = synth_hier(&recipe, 1500, 4000 + seed).unwrap();
        let valid = sample(&node, 800, 5000 + seed).unwrap();
        let test = sample(&node, 800, 6000 + seed).unwrap();

        let cfg = ExperimentConfig {
            seed: 7000 + seed,
            max_iters: 30,
            shallow2_restarts: 5,
            ..ExperimentConfig::new(3, 32, 3, 4)
        };
        let report = run_overfit_experiment(&train, &valid, &test, &cfg).unwrap();
        let mfa2 = report.arm(Arm::Mfa2).expect("MFA-2 arm");
        let shallow2 = report.arm(Arm::Shallow2).expect("Shallow2 arm");
        let shallow1 = report.arm(Arm::Shallow1).expect("Shallow1 arm");

        let win = mfa2.validation_ll > shallow2.validation_ll;
        if win {
            capacity_wins += 1;
        }
        let v = &shallow1.validation_trace;
        let peak = v
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let declines = peak + 1 < v.len() && v[v.len() - 1] < v[peak];
        if declines {
            decline_count += 1;
        }
        println!(
            "  seed {seed}: MFA-2 valid {:.2} vs Shallow2 {:.2} ({}); Shallow1 peak@{peak}/{} declines={declines}",
            mfa2.validation_ll,
            shallow2.validation_ll,
            if win { "win" } else { "miss" },
            v.len()
        );
    }
    println!("  capacity wins {capacity_wins}/10, validation declines {decline_count}/10");
    verdict(
        5,
        "overfitting demonstration",
        capacity_wins >= 8 && decline_count >= 6,
        start,
        300.0,
    );
}

#[test]
fn criterion_6_null_gain_control() {
    let start = Instant::now();
    // Truth is a single-layer MFA: its sampled factor posteriors are exactly
    // standard normal, so the second layer has nothing to add.
    let recipe = HierRecipe {
        depth: 1,
        ..HierRecipe::new(8, 2, 3, 2, 1)
    };
    let (train, node) = synth_hier(&recipe, 10_000, 42).unwrap();
    let test = sample(&node, 10_000, 43).unwrap();

    let cfg = EmConfig::new(2, 3).with_seed(11).with_max_iters(100);
    let (mfa1, _) = fit_mfa(&train, &cfg).unwrap();
    let opts = StackOptions {
        max_iters: 100,
        ..StackOptions::new(1, Allocation::PerComponent(2), 13)
    };
    let (node2, _) = stack_layer(DmfaNode::leaf(mfa1.clone()), &train, &opts).unwrap();
    let collapsed = collapse(&node2).unwrap();

    let lls1 = per_row_log_likelihoods(&mfa1, &test).unwrap();
    let lls2 = per_row_log_likelihoods(&collapsed, &test).unwrap();
    let diff = paired_diff(&lls2, &lls1).unwrap();
    println!(
        "  null-gain Diff-2 = {:.5} +- {:.5} ({:.2} standard errors)",
        diff.mean,
        diff.std_error,
        diff.mean.abs() / diff.std_error
    );
    verdict(
        6,
        "null-gain control",
        diff.mean.abs() < 2.0 * diff.std_error,
        start,
        120.0,
    );
}

#[test]
fn criterion_7_parameter_economy() {
    let start = Instant::now();
    // The face-modeling configuration: D=576, C=20, d1=288, K=5, d2=50.
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let make_layer = |dim: usize, d: usize, c: usize, rng: &mut ChaCha8Rng| {
        let comps: Vec<FactorAnalyser> = (0..c)
            .map(|_| {
                FactorAnalyser::new(
                    DMatrix::zeros(dim, d),
                    DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal)),
                    DVector::from_element(dim, 1.0),
                )
                .unwrap()
            })
            .collect();
        MfaModel::with_normalized_weights(comps, &vec![1.0; c]).unwrap()
    };
    let children = (0..20)
        .map(|_| Some(DmfaNode::leaf(make_layer(288, 50, 5, &mut rng))))
        .collect();
    let node = DmfaNode::new(make_layer(576, 288, 20, &mut rng), children).unwrap();

    let deep = count_parameters_deep(&node);
    let collapsed = collapse(&node).unwrap().count_parameters();
    let expected_deep = 20 * (576 * 288 + 2 * 576) + 19 + 20 * (5 * (288 * 50 + 2 * 288) + 4);
    let expected_collapsed = 100 * (576 * 338 + 2 * 576) + 99;
    println!(
        "  deep {deep} vs collapsed {collapsed} (ratio {:.4})",
        deep as f64 / collapsed as f64
    );
    let ok = deep == expected_deep && collapsed == expected_collapsed && 4 * deep < collapsed;
    verdict(7, "parameter economy", ok, start, 1.0);
}

#[test]
fn criterion_8_inference_cost() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let mut ok = true;
    for _ in 0..20 {
        let c = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        let node = random_tree(&[6, 3, 2], &[c, k], &mut rng);
        let collapsed = collapse(&node).unwrap();
        for _ in 0..10 {
            let x = DVector::from_fn(6, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
            let (path, evals) =
                hard_inference_counted(&node, &x, InferenceOptions::default(), None).unwrap();
            let k_chosen = node
                .child(path.levels[0].component)
                .unwrap()
                .layer()
                .num_components() as u64;
            if evals != c as u64 + k_chosen {
                println!("  expected {} evals, counted {evals}", c as u64 + k_chosen);
                ok = false;
            }
            // Exact flat enumeration costs C * K density evaluations.
            let mut flat_evals = 0u64;
            collapsed.log_joints_counted(&x, &mut flat_evals).unwrap();
            if flat_evals != (c * k) as u64 {
                println!("  flat enumeration counted {flat_evals}, expected {}", c * k);
                ok = false;
            }
        }
    }
    verdict(8, "inference cost", ok, start, 10.0);
}

#[test]
fn criterion_9_cli_determinism() {
    let start = Instant::now();
    let bin = env!("CARGO_BIN_EXE_dmfa");
    let dir = tempfile::tempdir().unwrap();
    let run = |args: &[String]| {
        let out = Command::new(bin)
            .args(args)
            .current_dir(dir.path())
            .output()
            .expect("spawn dmfa");
        assert!(
            out.status.success(),
            "dmfa {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8_lossy(&out.stdout).into_owned()
    };
    let s = |v: &[&str]| -> Vec<String> {
        let mut out: Vec<String> = v.iter().map(|s| s.to_string()).collect();
        out.push("--deterministic".into());
        out
    };

    let mut ok = true;
    let mut pass = |name: &str, args_sets: &[Vec<String>], outputs: &[&str]| {
        let mut first: Vec<(String, Vec<u8>)> = Vec::new();
        for round in 0..2 {
            for args in args_sets {
                run(args);
            }
            let snapshot: Vec<(String, Vec<u8>)> = outputs
                .iter()
                .map(|f| {
                    (
                        f.to_string(),
                        std::fs::read(dir.path().join(f)).unwrap_or_default(),
                    )
                })
                .collect();
            if round == 0 {
                first = snapshot;
            } else if first != snapshot {
                for ((f, a), (_, b)) in first.iter().zip(&snapshot) {
                    if a != b {
                        println!("  {name}: {f} differs between reruns");
                    }
                }
                ok = false;
            }
        }
    };

    pass(
        "synth curved",
        &[s(&["synth", "curved", "--n", "300", "--seed", "5", "--out", "c.csv"])],
        &["c.csv"],
    );
    pass(
        "synth hier",
        &[s(&[
            "synth", "hier", "--n", "400", "--dim", "6", "--components", "2", "--factors", "2",
            "--child-components", "2", "--child-factors", "1", "--seed", "5", "--out", "h.csv",
            "--truth-out", "truth.dmfm",
        ])],
        &["h.csv", "truth.dmfm"],
    );
    pass(
        "train",
        &[s(&[
            "train", "--data", "c.csv", "--components", "3", "--factors", "1", "--seed", "7",
            "--max-iters", "40", "--out", "m1.dmfm", "--trace", "trace.csv",
        ])],
        &["m1.dmfm", "trace.csv"],
    );
    pass(
        "stack",
        &[s(&[
            "stack", "--model", "m1.dmfm", "--data", "c.csv", "--k-per", "2", "--d2", "1",
            "--seed", "9", "--out", "m2.dmfm",
        ])],
        &["m2.dmfm"],
    );
    pass(
        "collapse",
        &[s(&["collapse", "--model", "m2.dmfm", "--out", "m2c.dmfm"])],
        &["m2c.dmfm"],
    );
    pass(
        "eval",
        &[s(&[
            "eval", "--model", "m2.dmfm", "--data", "c.csv", "--csv", "eval.csv",
        ])],
        &["eval.csv"],
    );
    pass(
        "sample",
        &[s(&[
            "sample", "--model", "m2.dmfm", "--n", "200", "--seed", "3", "--out", "s.csv",
        ])],
        &["s.csv"],
    );
    pass(
        "experiment overfit",
        &[s(&[
            "experiment", "overfit", "--dim", "6", "--n-train", "400", "--n-valid", "200",
            "--n-test", "200", "--components", "2", "--factors", "2", "--child-components", "2",
            "--child-factors", "1", "--max-iters", "10", "--restarts", "2", "--seed", "4",
            "--out-dir", "exp",
        ])],
        &[
            "exp/summary.csv",
            "exp/mfa1_trace.csv",
            "exp/shallow1_trace.csv",
        ],
    );
    pass(
        "experiment gain-vs-c",
        &[s(&[
            "experiment", "gain-vs-c", "--dim", "6", "--n-train", "400", "--n-valid", "200",
            "--n-test", "200", "--components", "2", "--factors", "2", "--child-components", "2",
            "--child-factors", "1", "--max-iters", "10", "--component-counts", "2,3", "--seed",
            "4", "--out-dir", "gain",
        ])],
        &["gain/gain_vs_c.csv"],
    );

    // Parallel mode must produce the same bytes as deterministic mode.
    let mut parallel_train: Vec<String> = vec![
        "train".into(), "--data".into(), "c.csv".into(), "--components".into(), "3".into(),
        "--factors".into(), "1".into(), "--seed".into(), "7".into(), "--max-iters".into(),
        "40".into(), "--out".into(), "m1p.dmfm".into(),
    ];
    parallel_train.push("--threads".into());
    parallel_train.push("4".into());
    run(&parallel_train);
    let a = std::fs::read(dir.path().join("m1.dmfm")).unwrap();
    let b = std::fs::read(dir.path().join("m1p.dmfm")).unwrap();
    if a != b {
        println!("  parallel train bytes differ from deterministic run");
        ok = false;
    }

    verdict(9, "CLI determinism", ok, start, 60.0);
}
