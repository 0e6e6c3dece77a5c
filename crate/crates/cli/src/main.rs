mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use probekit::controls::{
    Arm, ControlAssignments, ControlOptions, Granularity, TargetSource, VectorDistribution,
};
use probekit::criteria::{perfect_models, theory_errors, TheoryError, TheoryErrorReport};
use probekit::datamodel::{load_dataset, save_dataset, validate_dataset, LabeledEmbeddingDataset, Split};
use probekit::probe::{evaluate, save_checkpoint, train, ProbeConfig};
use probekit::sweep::{
    correlate_criteria, emit_results, read_results_csv, run_sweep, spearman, write_plotdata,
    Correlation, ResultRow,
};
use probekit::synth::{
    generate, true_mutual_information, EmbeddingScheme, SyntheticGroundTruth, SyntheticSpec,
    TypeDistribution, TRUTH_FILE,
};
use serde_json::json;

use config::{DataSource, LogBase, RunConfigFile};

#[derive(Parser)]
#[command(name = "probekit", version, about = "Train and compare diagnostic probes with control tasks and control functions")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic PRB1 dataset with its ground truth
    GenSynthetic(GenArgs),
    /// Train one probe on one arm and save its checkpoint
    Train(TrainArgs),
    /// Run a hyperparameter sweep over all three arms
    Sweep(SweepArgs),
    /// Recompute rank correlations from a results.csv
    Correlate(CorrelateArgs),
    /// Check the error-term identities against synthetic ground truth
    VerifyTheory(VerifyArgs),
    /// Validate a PRB1 dataset and summarize it
    Inspect(InspectArgs),
    /// Write plot series from a results.csv
    ExportPlots(ExportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbeddingArg {
    OrthogonalLike,
    RandomGaussian,
}

#[derive(Args)]
struct GenArgs {
    /// Number of latent word types
    #[arg(long)]
    types: usize,
    /// Number of labels
    #[arg(long)]
    labels: usize,
    /// Embedding dimension
    #[arg(long)]
    dim: usize,
    /// Probability mass moved off each type's dominant label
    #[arg(long, default_value_t = 0.2)]
    noise: f64,
    #[arg(long, default_value_t = 4000)]
    train_tokens: usize,
    #[arg(long, default_value_t = 1000)]
    dev_tokens: usize,
    #[arg(long, default_value_t = 1000)]
    test_tokens: usize,
    #[arg(long, value_enum, default_value = "orthogonal-like")]
    embedding: EmbeddingArg,
    /// Zipf exponent for type frequencies (uniform when absent)
    #[arg(long)]
    zipf: Option<f64>,
    /// Std. dev. of Gaussian noise added to every vector
    #[arg(long, default_value_t = 0.0)]
    vector_noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value = "synthetic")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Probe,
    ControlTask,
    ControlFunction,
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Type,
    Token,
}

impl From<GranularityArg> for Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Type => Granularity::Type,
            GranularityArg::Token => Granularity::Token,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DistributionArg {
    StandardNormal,
    Uniform,
}

#[derive(Args)]
struct TrainArgs {
    /// PRB1 dataset directory or manifest
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "probe")]
    arm: ArmArg,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 40)]
    hidden_width: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    wd: f64,
    /// Gradient step cap (uncapped when absent)
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    #[arg(long, default_value_t = 400)]
    max_epochs: usize,
    #[arg(long, default_value_t = 73)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    task_seed: u64,
    #[arg(long, default_value_t = 2)]
    function_seed: u64,
    #[arg(long, value_enum, default_value = "type")]
    task_granularity: GranularityArg,
    #[arg(long, value_enum, default_value = "type")]
    function_granularity: GranularityArg,
    #[arg(long, value_enum, default_value = "standard-normal")]
    distribution: DistributionArg,
    /// Checkpoint directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat JSON run config
    #[arg(long, required_unless_present = "print_default_config")]
    config: Option<PathBuf>,
    /// Print the desk configuration as JSON and exit
    #[arg(long)]
    print_default_config: bool,
    /// Override a config key, e.g. --set max_epochs=5 (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides output_dir)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Report information in bits instead of nats
    #[arg(long)]
    bits: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Concurrent runs; falls back to the config, then PROBEKIT_WORKERS
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Replace every probe by its arm's true conditional
    #[arg(long)]
    perfect: bool,
}

#[derive(Args)]
struct CorrelateArgs {
    #[arg(long)]
    results: PathBuf,
    /// Also write the table to this file
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenSynthetic(a) => gen_synthetic(a),
        Command::Train(a) => train_cmd(a),
        Command::Sweep(a) => sweep_cmd(a),
        Command::Correlate(a) => correlate_cmd(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::Inspect(a) => inspect(a),
        Command::ExportPlots(a) => export_plots(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({ "error": e.to_string(), "causes": chain }));
            ExitCode::FAILURE
        }
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(v)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn gen_synthetic(a: GenArgs) -> Result<ExitCode> {
    let spec = SyntheticSpec {
        type_count: a.types,
        label_count: a.labels,
        embedding_dim: a.dim,
        label_noise: a.noise,
        train_tokens: a.train_tokens,
        dev_tokens: a.dev_tokens,
        test_tokens: a.test_tokens,
        embedding_scheme: match a.embedding {
            EmbeddingArg::OrthogonalLike => EmbeddingScheme::OrthogonalLike,
            EmbeddingArg::RandomGaussian => EmbeddingScheme::RandomGaussian,
        },
        type_distribution: a
            .zipf
            .map_or(TypeDistribution::Uniform, |exponent| TypeDistribution::Zipf { exponent }),
        vector_noise: a.vector_noise,
        seed: a.seed,
    };
    let (ds, truth) = generate(&spec)?;
    let manifest = save_dataset(&ds, &a.out)?;
    truth.save(&a.out)?;
    print_json(&json!({
        "manifest": manifest,
        "truth": a.out.join(TRUTH_FILE),
        "records": ds.records.len(),
        "true_mutual_information_nats": true_mutual_information(&truth),
    }));
    Ok(ExitCode::SUCCESS)
}

fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    }
}

fn train_cmd(a: TrainArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data)?;
    let options = ControlOptions {
        task_seed: a.task_seed,
        function_seed: a.function_seed,
        task_granularity: a.task_granularity.into(),
        function_granularity: a.function_granularity.into(),
        distribution: match a.distribution {
            DistributionArg::StandardNormal => VectorDistribution::StandardNormal,
            DistributionArg::Uniform => VectorDistribution::Uniform,
        },
    };
    let assignments = ControlAssignments::draw(&ds, &options)?;
    let arm = match a.arm {
        ArmArg::Probe => Arm::Probe,
        ArmArg::ControlTask => Arm::ControlTask,
        ArmArg::ControlFunction => Arm::ControlFunction,
    };
    let config = ProbeConfig {
        hidden_layers: a.hidden_layers,
        hidden_width: a.hidden_width,
        learning_rate: a.lr,
        weight_decay: a.wd,
        max_gradient_steps: a.max_steps,
        batch_size: a.batch_size,
        max_epochs: a.max_epochs,
        seed: a.seed,
    };
    let targets = TargetSource::for_arm(arm, &assignments);
    let probe = train(&config, &ds, &targets)?;
    save_checkpoint(&probe, &a.out)?;
    match arm {
        Arm::ControlTask => assignments.task.write_tsv(&a.out.join("control_task.tsv"))?,
        Arm::ControlFunction => assignments.function.write(
            &a.out.join("control_function.tsv"),
            &a.out.join("control_function.f32"),
        )?,
        Arm::Probe => {}
    }
    let test = evaluate(&probe, &ds, &targets, Split::Test)?;
    let dev = evaluate(&probe, &ds, &targets, Split::Dev)?;
    print_json(&json!({
        "arm": arm.as_str(),
        "checkpoint": a.out,
        "steps_taken": probe.steps_taken,
        "best_dev_loss": probe.best_dev_loss,
        "dev": dev,
        "test": test,
    }));
    Ok(ExitCode::SUCCESS)
}

struct Loaded {
    config: RunConfigFile,
    ds: LabeledEmbeddingDataset,
    truth: Option<SyntheticGroundTruth>,
    out: PathBuf,
    bits: bool,
}

fn load_run(args: &ConfigArgs) -> Result<Loaded> {
    let path = args.config.as_deref().expect("clap requires --config");
    let config = RunConfigFile::load(path, &args.overrides)?;
    let (ds, truth) = match config.source() {
        DataSource::Synthetic(spec) => {
            let (ds, truth) = generate(&spec)?;
            (ds, Some(truth))
        }
        DataSource::Path(p) => {
            if !p.exists() {
                bail!("dataset not found: {}", p.display());
            }
            let ds = load_dataset(&p).with_context(|| format!("loading dataset {}", p.display()))?;
            let dir = dataset_dir(&p);
            let truth = if dir.join(TRUTH_FILE).exists() {
                Some(SyntheticGroundTruth::load(&dir)?)
            } else {
                None
            };
            (ds, truth)
        }
    };
    let out = args.out.clone().unwrap_or_else(|| config.output_dir());
    let bits = args.bits || config.log_base == Some(LogBase::Bits);
    Ok(Loaded {
        config,
        ds,
        truth,
        out,
        bits,
    })
}

fn resolve_workers(flag: Option<usize>, config: Option<usize>) -> Result<usize> {
    if let Some(w) = flag.or(config) {
        return Ok(w);
    }
    match std::env::var("PROBEKIT_WORKERS") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| anyhow!("PROBEKIT_WORKERS must be a positive integer, got {v:?}")),
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn print_default_config() -> Result<ExitCode> {
    println!("{}", serde_json::to_string_pretty(&RunConfigFile::desk())?);
    Ok(ExitCode::SUCCESS)
}

fn sweep_cmd(a: SweepArgs) -> Result<ExitCode> {
    if a.config.print_default_config {
        return print_default_config();
    }
    let run = load_run(&a.config)?;
    let workers = resolve_workers(a.workers, run.config.workers)?;
    let report = validate_dataset(&run.ds);
    if !report.ok {
        bail!("dataset failed validation: {:?}", report.errors().collect::<Vec<_>>());
    }
    let assignments = ControlAssignments::draw(&run.ds, &run.config.controls())?;
    let grid = run.config.grid();
    let results = run_sweep(&grid, &run.ds, &assignments, workers)?;
    let (table, err) = match correlate_criteria(&results) {
        Ok(t) => (Some(t), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let written = emit_results(&results, table.as_ref(), err.as_deref(), &run.out)?;
    write_json(&run.out.join("config.resolved.json"), &run.config)?;
    print_json(&json!({
        "output_dir": run.out,
        "configs": results.points.len(),
        "successful_configs": results.records.len(),
        "failed_configs": results.failed_configs(),
        "correlations": table,
        "correlation_error": err,
        "files": written.len() + 1,
    }));
    Ok(ExitCode::SUCCESS)
}

fn correlation_of(rows: &[ResultRow], x: fn(&ResultRow) -> f64, y: fn(&ResultRow) -> f64) -> Result<Correlation> {
    let xs: Vec<f64> = rows.iter().map(x).collect();
    let ys: Vec<f64> = rows.iter().map(y).collect();
    let (rho, p) = spearman(&xs, &ys)?;
    Ok(Correlation { rho, p })
}

fn correlate_cmd(a: CorrelateArgs) -> Result<ExitCode> {
    let rows = read_results_csv(&a.results)?;
    let table = json!({
        "n": rows.len(),
        "t_acc_f_ent": correlation_of(&rows, |r| r.t_acc, |r| r.f_ent)?,
        "t_acc_t_ent": correlation_of(&rows, |r| r.t_acc, |r| r.t_ent)?,
        "f_acc_f_ent": correlation_of(&rows, |r| r.f_acc, |r| r.f_ent)?,
    });
    if let Some(out) = &a.out {
        write_json(out, &table)?;
    }
    print_json(&table);
    Ok(ExitCode::SUCCESS)
}

fn verify_theory(a: VerifyArgs) -> Result<ExitCode> {
    if a.config.print_default_config {
        return print_default_config();
    }
    let run = load_run(&a.config)?;
    let assignments = ControlAssignments::draw(&run.ds, &run.config.controls())?;
    let Some(truth) = run.truth.as_ref() else {
        return Err(TheoryError::GroundTruthUnavailable.into());
    };

    let grid = run.config.grid();
    let mut reports: Vec<(String, TheoryErrorReport)> = Vec::new();
    if a.perfect {
        let [p, t, f] = perfect_models(truth, &run.ds, &assignments)?;
        reports.push((
            "perfect".into(),
            theory_errors(Some(truth), &run.ds, &assignments, &p, &t, &f)?,
        ));
    } else {
        grid.validate()?;
        for point in grid.points() {
            let config = grid.probe_config(&point, grid.seeds[0]);
            let p = train(&config, &run.ds, &TargetSource::Gold)?;
            let t = train(&config, &run.ds, &TargetSource::ControlTask(&assignments.task))?;
            let f = train(&config, &run.ds, &TargetSource::ControlFunction(&assignments.function))?;
            let r = theory_errors(Some(truth), &run.ds, &assignments, &p, &t, &f)?;
            reports.push((point.config_id, r));
        }
    }

    let unit = if run.bits { "bits" } else { "nats" };
    let scale = if run.bits { 1.0 / std::f64::consts::LN_2 } else { 1.0 };
    let max = |f: fn(&TheoryErrorReport) -> f64| {
        reports.iter().map(|(_, r)| f(r).abs()).fold(0.0f64, f64::max) * scale
    };
    let summary = json!({
        "unit": unit,
        "configs": reports.len(),
        "max_decomposition_residual": max(|r| r.decomposition_residual),
        "max_gain_identity_residual": max(|r| r.gain_identity_residual),
        "max_delta_p_residual": max(|r| r.delta_p_residual),
        "max_delta_h_residual": max(|r| r.delta_h_residual),
        "max_eq3_residual": max(|r| r.eq3_residual),
        "eq3_flagged": reports.iter().filter(|(_, r)| r.eq3_flagged).map(|(id, _)| id.as_str()).collect::<Vec<_>>(),
    });
    let doc = json!({
        "unit": unit,
        "reports": reports
            .iter()
            .map(|(id, r)| json!({ "config_id": id, "report": r.scaled(scale) }))
            .collect::<Vec<_>>(),
        "summary": summary,
    });
    fs::create_dir_all(&run.out).with_context(|| format!("creating {}", run.out.display()))?;
    write_json(&run.out.join("theory_report.json"), &doc)?;
    print_json(&summary);
    Ok(ExitCode::SUCCESS)
}

fn inspect(a: InspectArgs) -> Result<ExitCode> {
    let ds = load_dataset(&a.data)?;
    let report = validate_dataset(&ds);
    let dir = dataset_dir(&a.data);
    let true_mi = if dir.join(TRUTH_FILE).exists() {
        Some(true_mutual_information(&SyntheticGroundTruth::load(&dir)?))
    } else {
        None
    };
    print_json(&json!({
        "embedding_dim": ds.embedding_dim,
        "labels": ds.label_names,
        "type_count": ds.type_count,
        "content_hash": ds.content_hash(),
        "true_mutual_information_nats": true_mi,
        "validation": report,
    }));
    Ok(if report.ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn export_plots(a: ExportArgs) -> Result<ExitCode> {
    let rows = read_results_csv(&a.results)?;
    if rows.is_empty() {
        bail!("{} has no data rows", a.results.display());
    }
    let written = write_plotdata(&rows, &a.out)?;
    print_json(&json!({ "series": written }));
    Ok(ExitCode::SUCCESS)
}
