//! `dmfa` — train, stack, collapse, evaluate, and sample mixture-of-factor-
//! analyser density models, plus packaged deep-vs-shallow experiments.
//!
//! Every subcommand is a thin composition of library operations; no numerical
//! logic lives here. All randomness flows from `--seed` through named
//! sub-streams, so reruns with the same configuration produce byte-identical
//! model and CSV outputs.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error, 3 partial
//! experiment failure (some arms failed, summary written).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use dmfa_core::data::{
    self, load_matrix, preprocess_dc_remove, preprocess_standardize, save_matrix, synth_curved,
    synth_hier, Dataset, HierRecipe, MatrixFormat,
};
use dmfa_core::deep::{
    sample, Allocation, DmfaNode, ExtractionMode, StackOptions,
};
use dmfa_core::em::{fit_mfa, EmConfig, Termination};
use dmfa_core::eval::{
    emit_comparison_csv, emit_gain_csv, emit_trace_csv, evaluate, run_gain_vs_c,
    run_overfit_experiment, Arm, ExperimentConfig,
};
use dmfa_core::math::fnv1a64;
use dmfa_core::model_file::{load_model, save_model, ModelFile, StoredModel, TrainingMeta};

#[derive(Parser)]
#[command(name = "dmfa", version, about = "Deep mixtures of factor analysers")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Run single-threaded; results are bitwise identical either way.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic datasets.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Train a shallow MFA by EM.
    Train(TrainArgs),
    /// Add a layer to a trained model by greedy stacking.
    Stack(StackArgs),
    /// Collapse a deep model to its exact shallow form.
    Collapse(CollapseArgs),
    /// Exact held-out log-likelihood of a model on a dataset.
    Eval(EvalArgs),
    /// Ancestral samples from a model.
    Sample(SampleArgs),
    /// Packaged desk-scale experiment protocols.
    #[command(subcommand)]
    Experiment(ExperimentCommand),
}

#[derive(Clone, Copy, ValueEnum)]
enum FileFormat {
    Csv,
    Raw,
}

impl From<FileFormat> for MatrixFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::Csv => MatrixFormat::Csv,
            FileFormat::Raw => MatrixFormat::RawF64,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PreprocessArg {
    None,
    Dc,
    Standardize,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Sample,
    Mean,
}

impl From<ModeArg> for ExtractionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Sample => ExtractionMode::Sample,
            ModeArg::Mean => ExtractionMode::PosteriorMean,
        }
    }
}

#[derive(Subcommand)]
enum SynthCommand {
    /// 2-D points on a noisy quadratic arc.
    Curved {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = FileFormat::Csv)]
        format: FileFormat,
    },
    /// Draws from a random two-layer ground-truth model.
    Hier(SynthHierArgs),
}

#[derive(Args)]
struct SynthHierArgs {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 6)]
    factors: usize,
    #[arg(long, default_value_t = 3)]
    child_components: usize,
    #[arg(long, default_value_t = 2)]
    child_factors: usize,
    /// Generator depth (1 = plain MFA truth).
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 6.0)]
    mean_separation: f64,
    #[arg(long, default_value_t = 3.0)]
    child_separation: f64,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FileFormat::Csv)]
    format: FileFormat,
    /// Also save the ground-truth model here.
    #[arg(long)]
    truth_out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    components: usize,
    #[arg(long)]
    factors: usize,
    /// Relative log-likelihood change that counts as converged.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Write the per-iteration training log-likelihood CSV here.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = PreprocessArg::None)]
    preprocess: PreprocessArg,
}

#[derive(Args)]
struct StackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Same child count for every component.
    #[arg(long, conflicts_with_all = ["k_total", "k_list"])]
    k_per: Option<usize>,
    /// Proportional allocation: total child components across the layer.
    #[arg(long, requires = "proportional")]
    k_total: Option<usize>,
    /// Proportional allocation with k-total and k-min.
    #[arg(long)]
    proportional: bool,
    #[arg(long, default_value_t = 2)]
    k_min: usize,
    /// Explicit comma-separated per-component child counts.
    #[arg(long, conflicts_with = "k_total")]
    k_list: Option<String>,
    /// Child factor dimension.
    #[arg(long)]
    d2: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Sample)]
    mode: ModeArg,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 200)]
    max_iters: usize,
    #[arg(long, default_value_t = 3)]
    max_depth: usize,
    /// Pick the descent component by p(c)p(c|x) instead of p(c|x).
    #[arg(long)]
    prior_weighted_argmax: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CollapseArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FileFormat::Csv)]
    format: FileFormat,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Deep-vs-shallow comparison on synthetic two-layer data.
    Overfit(OverfitArgs),
    /// Layer gain as the number of first-layer components varies.
    GainVsC(GainArgs),
}

#[derive(Args, Clone)]
struct SuiteArgs {
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 2000)]
    n_valid: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    #[arg(long, default_value_t = 3)]
    components: usize,
    #[arg(long, default_value_t = 6)]
    factors: usize,
    #[arg(long, default_value_t = 3)]
    child_components: usize,
    #[arg(long, default_value_t = 2)]
    child_factors: usize,
    #[arg(long, default_value_t = 6.0)]
    mean_separation: f64,
    #[arg(long, default_value_t = 3.0)]
    child_separation: f64,
    #[arg(long, default_value_t = 0.05)]
    truth_noise: f64,
    #[arg(long, default_value_t = 60)]
    max_iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct OverfitArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Shallow2 random restarts (best validation kept).
    #[arg(long, default_value_t = 5)]
    restarts: usize,
    /// Add an MFA-3 arm: comma-separated "components,factors".
    #[arg(long)]
    third: Option<String>,
}

#[derive(Args)]
struct GainArgs {
    #[command(flatten)]
    suite: SuiteArgs,
    /// Comma-separated first-layer component counts to sweep.
    #[arg(long, default_value = "2,3,5")]
    component_counts: String,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<dmfa_core::Error> for CliError {
    fn from(e: dmfa_core::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();

    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .is_err()
        {
            eprintln!("warning: thread pool already initialized");
        }
    }

    let outcome = match cli.command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Stack(args) => cmd_stack(args),
        Command::Collapse(args) => cmd_collapse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Sample(args) => cmd_sample(args),
        Command::Experiment(args) => cmd_experiment(args),
    };
    match outcome {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn cmd_synth(cmd: SynthCommand) -> Result<ExitCode, CliError> {
    match cmd {
        SynthCommand::Curved {
            n,
            noise,
            seed,
            out,
            format,
        } => {
            let data = synth_curved(n, seed, noise)?;
            save_matrix(&data, &out, format.into())?;
            println!("wrote {} rows to {}", data.num_rows(), out.display());
        }
        SynthCommand::Hier(args) => {
            let recipe = HierRecipe {
                depth: args.depth,
                mean_separation: args.mean_separation,
                child_separation: args.child_separation,
                noise: args.noise,
                ..HierRecipe::new(
                    args.dim,
                    args.components,
                    args.factors,
                    args.child_components,
                    args.child_factors,
                )
            };
            let (data, node) = synth_hier(&recipe, args.n, args.seed)?;
            save_matrix(&data, &args.out, args.format.into())?;
            println!("wrote {} rows to {}", data.num_rows(), args.out.display());
            if let Some(truth_path) = args.truth_out {
                let file = ModelFile {
                    model: StoredModel::Dmfa(node),
                    preprocessing: data.preprocessing().clone(),
                    metadata: None,
                };
                save_model(&file, &truth_path)?;
                println!("wrote ground truth to {}", truth_path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn apply_preprocess(data: Dataset, choice: PreprocessArg) -> Result<Dataset, CliError> {
    Ok(match choice {
        PreprocessArg::None => data,
        PreprocessArg::Dc => preprocess_dc_remove(&data)?,
        PreprocessArg::Standardize => preprocess_standardize(&data)?,
    })
}

fn cmd_train(args: TrainArgs) -> Result<ExitCode, CliError> {
    let raw = load_matrix(&args.data)?;
    if args.factors > raw.dim() {
        return Err(CliError::Usage(format!(
            "--factors {} exceeds the data dimension {}",
            args.factors,
            raw.dim()
        )));
    }
    if args.components > raw.num_rows() {
        return Err(CliError::Usage(format!(
            "--components {} exceeds the number of rows {}",
            args.components,
            raw.num_rows()
        )));
    }
    let data = apply_preprocess(raw, args.preprocess)?;
    let cfg = EmConfig {
        max_iters: args.max_iters,
        rel_tol: args.tol,
        ..EmConfig::new(args.components, args.factors).with_seed(args.seed)
    };
    let (model, trace) = fit_mfa(&data, &cfg)?;
    if trace.termination == Termination::DegenerateRestartLimit {
        eprintln!("warning: training stopped at the degenerate-component reseed limit");
    }
    let file = ModelFile {
        model: StoredModel::Mfa(model),
        preprocessing: data.preprocessing().clone(),
        metadata: Some(TrainingMeta::from_trace(&cfg, &trace)),
    };
    save_model(&file, &args.out)?;
    if let Some(trace_path) = &args.trace {
        emit_trace_csv(&trace.log_likelihoods, None, trace_path)?;
    }
    println!(
        "trained {} components in {} iterations ({}), final train ll {}",
        args.components,
        trace.iterations(),
        trace.termination,
        trace.final_log_likelihood()
    );
    Ok(ExitCode::SUCCESS)
}

fn min_attach_factor_dim(node: &DmfaNode) -> usize {
    let mut dims = Vec::new();
    fn walk(node: &DmfaNode, dims: &mut Vec<usize>) {
        if node.children().iter().any(Option::is_none) {
            dims.push(node.layer().factor_dim());
        }
        for child in node.children().iter().flatten() {
            walk(child, dims);
        }
    }
    walk(node, &mut dims);
    dims.into_iter().min().unwrap_or(0)
}

fn cmd_stack(args: StackArgs) -> Result<ExitCode, CliError> {
    let file = load_model(&args.model)?;
    let node = file.model.to_node();

    let allocation = if let Some(k) = args.k_per {
        Allocation::PerComponent(k)
    } else if args.proportional {
        let total = args.k_total.ok_or_else(|| {
            CliError::Usage("--proportional needs --k-total".into())
        })?;
        Allocation::Proportional {
            total,
            k_min: args.k_min,
        }
    } else if let Some(list) = &args.k_list {
        let counts = list
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("bad --k-list {list:?}")))?;
        Allocation::Explicit(counts)
    } else {
        return Err(CliError::Usage(
            "choose an allocation: --k-per, --proportional --k-total, or --k-list".into(),
        ));
    };

    let attach_dim = min_attach_factor_dim(&node);
    if args.d2 > attach_dim {
        return Err(CliError::Usage(format!(
            "--d2 {} exceeds the factor dimension {} of the layer being stacked",
            args.d2, attach_dim
        )));
    }

    let raw = load_matrix(&args.data)?;
    let data = data::reconcile(&file.preprocessing, &raw)?.into_owned();

    let opts = StackOptions {
        mode: args.mode.into(),
        max_iters: args.max_iters,
        rel_tol: args.tol,
        max_depth: args.max_depth,
        prior_weighted_argmax: args.prior_weighted_argmax,
        ..StackOptions::new(args.d2, allocation, args.seed)
    };
    let (stacked, report) = dmfa_core::deep::stack_layer(node, &data, &opts)?;

    println!(
        "stacked: {} children trained, {} skipped, {} failed; depth {}",
        report.trained,
        report.skipped.len(),
        report.failed.len(),
        stacked.depth()
    );
    for (path, reason) in &report.skipped {
        eprintln!("skipped component {path}: {reason:?}");
    }
    for (path, err) in &report.failed {
        eprintln!("failed component {path}: {err}");
    }
    let any_trained = report.trained > 0;
    let out_file = ModelFile {
        model: StoredModel::Dmfa(stacked),
        preprocessing: file.preprocessing.clone(),
        metadata: file.metadata.clone(),
    };
    save_model(&out_file, &args.out)?;
    if any_trained {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(CliError::Runtime("no child could be trained".into()))
    }
}

fn cmd_collapse(args: CollapseArgs) -> Result<ExitCode, CliError> {
    let file = load_model(&args.model)?;
    let shallow = file.model.to_shallow()?;
    println!(
        "collapsed to {} components, {} factors, {} parameters",
        shallow.num_components(),
        shallow.factor_dim(),
        shallow.count_parameters()
    );
    let out_file = ModelFile {
        model: StoredModel::Mfa(shallow),
        preprocessing: file.preprocessing.clone(),
        metadata: file.metadata.clone(),
    };
    save_model(&out_file, &args.out)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(args: EvalArgs) -> Result<ExitCode, CliError> {
    let file = load_model(&args.model)?;
    let raw = load_matrix(&args.data)?;
    let data = data::reconcile(&file.preprocessing, &raw)?;
    let shallow = file.model.to_shallow()?;
    let report = evaluate(&shallow, &data)?;
    // The stored representation's own parameter count (deep for trees).
    let stored_params = file.model.count_parameters();
    println!(
        "avg_ll={} se={} n={} params={} stored_params={} preprocessing={}",
        report.avg_log_likelihood,
        report.std_error,
        report.n_rows,
        report.param_count,
        stored_params,
        report.preprocessing
    );
    if let Some(csv) = &args.csv {
        let text = format!(
            "avg_ll,se,n,params,stored_params,preprocessing\n{},{},{},{},{},{}\n",
            report.avg_log_likelihood,
            report.std_error,
            report.n_rows,
            report.param_count,
            stored_params,
            report.preprocessing
        );
        std::fs::write(csv, text).map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_sample(args: SampleArgs) -> Result<ExitCode, CliError> {
    let file = load_model(&args.model)?;
    let node = file.model.to_node();
    let data = sample(&node, args.n, args.seed)?;
    save_matrix(&data, &args.out, args.format.into())?;
    println!(
        "wrote {} samples on the {} scale to {}",
        args.n,
        file.preprocessing.kind,
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn suite_data(suite: &SuiteArgs) -> Result<(Dataset, Dataset, Dataset), CliError> {
    let recipe = HierRecipe {
        mean_separation: suite.mean_separation,
        child_separation: suite.child_separation,
        noise: suite.truth_noise,
        ..HierRecipe::new(
            suite.dim,
            suite.components,
            suite.factors,
            suite.child_components,
            suite.child_factors,
        )
    };
    let (train, node) = synth_hier(&recipe, suite.n_train, suite.seed)?;
    let valid = sample(&node, suite.n_valid, suite.seed ^ fnv1a64("suite-valid"))?;
    let test = sample(&node, suite.n_test, suite.seed ^ fnv1a64("suite-test"))?;
    Ok((train, valid, test))
}

fn cmd_experiment(cmd: ExperimentCommand) -> Result<ExitCode, CliError> {
    match cmd {
        ExperimentCommand::Overfit(args) => {
            let suite = &args.suite;
            std::fs::create_dir_all(&suite.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            let (train, valid, test) = suite_data(suite)?;
            let third = match &args.third {
                None => None,
                Some(spec) => {
                    let parts: Vec<usize> = spec
                        .split(',')
                        .map(|s| s.trim().parse::<usize>())
                        .collect::<Result<Vec<_>, _>>()
                        .map_err(|_| CliError::Usage(format!("bad --third {spec:?}")))?;
                    if parts.len() != 2 {
                        return Err(CliError::Usage(
                            "--third wants \"components,factors\"".into(),
                        ));
                    }
                    Some((parts[0], parts[1]))
                }
            };
            let cfg = ExperimentConfig {
                seed: suite.seed,
                max_iters: suite.max_iters,
                shallow2_restarts: args.restarts,
                third_layer: third,
                ..ExperimentConfig::new(
                    suite.components,
                    suite.factors,
                    suite.child_components,
                    suite.child_factors,
                )
            };
            let report = run_overfit_experiment(&train, &valid, &test, &cfg)?;

            emit_comparison_csv(&report, suite.out_dir.join("summary.csv"))?;
            if let Some(mfa1) = report.arm(Arm::Mfa1) {
                emit_trace_csv(
                    &mfa1.train_trace,
                    None,
                    suite.out_dir.join("mfa1_trace.csv"),
                )?;
            }
            if let Some(s1) = report.arm(Arm::Shallow1) {
                emit_trace_csv(
                    &s1.train_trace,
                    Some(&s1.validation_trace),
                    suite.out_dir.join("shallow1_trace.csv"),
                )?;
            }

            let mut failed = 0;
            for outcome in &report.arms {
                match &outcome.result {
                    Ok(r) => println!(
                        "{}: test_ll={} se={} params={} valid_ll={}",
                        outcome.arm,
                        r.test.avg_log_likelihood,
                        r.test.std_error,
                        r.test.param_count,
                        r.validation_ll
                    ),
                    Err(e) => {
                        failed += 1;
                        println!("{}: FAILED ({e})", outcome.arm);
                    }
                }
            }
            if let Some(d) = report.diff2 {
                println!("Diff-2: {} +- {}", d.mean, d.std_error);
            }
            if let Some(d) = report.diff3 {
                println!("Diff-3: {} +- {}", d.mean, d.std_error);
            }
            if failed == 0 {
                Ok(ExitCode::SUCCESS)
            } else if failed < report.arms.len() {
                Ok(ExitCode::from(3))
            } else {
                Err(CliError::Runtime("every experiment arm failed".into()))
            }
        }
        ExperimentCommand::GainVsC(args) => {
            let suite = &args.suite;
            std::fs::create_dir_all(&suite.out_dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            let counts: Vec<usize> = args
                .component_counts
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|_| {
                    CliError::Usage(format!("bad --component-counts {:?}", args.component_counts))
                })?;
            if counts.is_empty() {
                return Err(CliError::Usage("--component-counts is empty".into()));
            }
            let (train, _, test) = suite_data(suite)?;
            let cfg = ExperimentConfig {
                seed: suite.seed,
                max_iters: suite.max_iters,
                ..ExperimentConfig::new(
                    suite.components,
                    suite.factors,
                    suite.child_components,
                    suite.child_factors,
                )
            };
            let rows = run_gain_vs_c(&train, &test, &cfg, &counts)?;
            emit_gain_csv(&rows, suite.out_dir.join("gain_vs_c.csv"))?;
            for r in &rows {
                println!(
                    "C={}: mfa1={} mfa2={} diff2={} +- {}",
                    r.components, r.mfa1_test_ll, r.mfa2_test_ll, r.diff2.mean, r.diff2.std_error
                );
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

// Referenced from integration tests to locate fixture data.
#[allow(dead_code)]
fn workspace_relative(p: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join(p)
}
