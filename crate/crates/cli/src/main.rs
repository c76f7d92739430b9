use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use chaos_replica::dataset::{generate, Dataset, MuGrid};
use chaos_replica::dynamics::{MapFamily, System};
use chaos_replica::evaluation::{self, EvalOptions, LyapunovReport, Selection};
use chaos_replica::model::{ModelCheckpoint, TrainingMeta};
use chaos_replica::presets::ExperimentPreset;
use chaos_replica::training::{self, Optimizer, TrainConfig};
use chaos_replica::Error;

#[derive(Parser, Debug)]
#[command(
    name = "chaos-replica",
    version,
    about = "Train one-step predictors of logistic maps and score their long-term behaviour"
)]
struct Cli {
    /// Worker threads (defaults to CHAOS_REPLICA_THREADS, then all cores).
    #[arg(long, global = true, env = "CHAOS_REPLICA_THREADS")]
    threads: Option<usize>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate training and testing samples for every μ of a system.
    GenData(GenData),
    /// Train a preset model.
    Train(Train),
    /// Score a checkpoint (`oracle:1d` / `oracle:2d` name the exact maps).
    Evaluate(Evaluate),
    /// Train and score a preset over a range of hidden sizes or depths.
    Sweep(Sweep),
}

#[derive(Args, Debug, Serialize)]
struct GenData {
    #[arg(long, value_parser = parse_system)]
    #[serde(serialize_with = "ser_system")]
    system: System,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Training candidates per μ.
    #[arg(long, default_value_t = 3000)]
    n_train: usize,
    /// Testing samples per μ.
    #[arg(long, default_value_t = 500)]
    n_test: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug, Clone, Serialize)]
struct TrainOpts {
    /// Training samples drawn per μ for this run.
    #[arg(long, default_value_t = 2000)]
    per_mu: usize,
    #[arg(long, default_value_t = 400)]
    epochs: usize,
    #[arg(long, default_value_t = 500)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Epochs without test improvement before stopping; 0 disables.
    #[arg(long, default_value_t = 50)]
    patience: usize,
    #[arg(long, default_value_t = 4)]
    shards: usize,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            optimizer: match self.optimizer {
                OptimizerArg::Adam => Optimizer::Adam,
                OptimizerArg::Sgd => Optimizer::Sgd,
            },
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
            patience: (self.patience > 0).then_some(self.patience),
            shards: self.shards,
            ..TrainConfig::default()
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct Train {
    #[arg(long)]
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum What {
    Bifurcation,
    Lyapunov,
    Rollout,
    All,
}

#[derive(Args, Debug, Serialize)]
struct Evaluate {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum, default_value_t = What::All)]
    what: What,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial states per μ for images and relative-error curves.
    #[arg(long, default_value_t = evaluation::DEFAULT_INITS)]
    inits: usize,
    /// Rollouts averaged per μ for Lyapunov exponents.
    #[arg(long, default_value_t = evaluation::DEFAULT_LE_RUNS)]
    runs: usize,
    #[arg(long, default_value_t = evaluation::DEFAULT_ROLLOUT_STEPS)]
    steps: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Axis {
    Dh,
    Nl,
}

#[derive(Args, Debug, Serialize)]
struct Sweep {
    #[arg(long)]
    preset: String,
    #[arg(long, value_enum)]
    axis: Axis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<usize>,
    /// Number of independent runs per point, seeded 0..n.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    opts: TrainOpts,
}

fn parse_system(s: &str) -> Result<System, String> {
    s.parse::<System>().map_err(|e| e.to_string())
}

fn ser_system<S: serde::Serializer>(s: &System, ser: S) -> Result<S::Ok, S::Error> {
    ser.serialize_str(s.tag())
}

/// A failure with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: if e.is_numeric() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn write_manifest(dir: &Path, command: &str, config: &impl Serialize, seed: u64) -> CliResult {
    let manifest = serde_json::json!({
        "command": command,
        "config": config,
        "seed": seed,
        "git_describe": git_describe(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| usage(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn load_pair(data: &Path) -> CliResult<(Dataset, Dataset)> {
    let load = |name: &str| {
        let p = data.join(name);
        if !p.exists() {
            return Err(usage(format!("missing data file {}", p.display())));
        }
        Ok(Dataset::load(&p)?)
    };
    Ok((load("train.jsonl")?, load("test.jsonl")?))
}

fn resolve_preset(name: &str) -> CliResult<ExperimentPreset> {
    ExperimentPreset::named(name).map_err(|e| usage(e.to_string()))
}

fn check_system(preset: &ExperimentPreset, data: &Dataset) -> CliResult {
    if data.family.kind != preset.system || data.window != preset.window {
        return Err(usage(format!(
            "preset `{}` expects {} data with M = {}, got {} with M = {}",
            preset.name,
            preset.system.tag(),
            preset.window,
            data.family.kind.tag(),
            data.window
        )));
    }
    Ok(())
}

fn gen_data(cmd: &GenData) -> CliResult {
    std::fs::create_dir_all(&cmd.out)?;
    let family = MapFamily::for_system(cmd.system);
    let window = chaos_replica::model::default_window(cmd.system);
    let (train, test) = generate(
        &family,
        &MuGrid::preset(cmd.system),
        cmd.n_train,
        cmd.n_test,
        window,
        cmd.seed,
    )?;
    train.save(&cmd.out.join("train.jsonl"))?;
    test.save(&cmd.out.join("test.jsonl"))?;
    log::info!(
        "wrote {} training and {} testing samples",
        train.len(),
        test.len()
    );
    write_manifest(&cmd.out, "gen-data", cmd, cmd.seed)
}

fn train_preset(
    preset: &ExperimentPreset,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    opts: &TrainOpts,
) -> CliResult<(ModelCheckpoint, training::TrainLog)> {
    check_system(preset, train)?;
    let subset = train.subsample(opts.per_mu, seed)?;
    let model = preset.build(seed)?;
    let out = training::train_with(&model, &subset, test, &opts.config(seed), |r| {
        log::info!(
            "epoch {:4}  L_train {:.6}  L_test {:.6}",
            r.epoch,
            r.train_l,
            r.test_l
        );
    })?;
    let best = out.log.records.iter().find(|r| r.epoch == out.best_epoch);
    let meta = TrainingMeta {
        seed: Some(seed),
        epochs: out.log.records.len(),
        best_epoch: Some(out.best_epoch),
        final_train_l: best.map(|r| r.train_l),
        final_test_l: Some(training::dataset_loss(&out.best, &test.samples)?),
        preset: Some(preset.name.clone()),
    };
    Ok((ModelCheckpoint::new(out.best, meta), out.log))
}

fn train(cmd: &Train) -> CliResult {
    let preset = resolve_preset(&cmd.preset)?;
    let (train, test) = load_pair(&cmd.data)?;
    std::fs::create_dir_all(&cmd.out)?;
    let (ckpt, log) = train_preset(&preset, cmd.seed, &train, &test, &cmd.opts)?;
    ckpt.save(&cmd.out.join("checkpoint.json"))?;
    log.save_csv(&cmd.out.join("train_log.csv"))?;
    println!("test L = {}", ckpt.meta.final_test_l.unwrap_or(f64::NAN));
    write_manifest(&cmd.out, "train", cmd, cmd.seed)
}

fn evaluate(cmd: &Evaluate) -> CliResult {
    let ckpt_str = cmd.ckpt.to_string_lossy();
    if !ckpt_str.starts_with("oracle:") && !cmd.ckpt.exists() {
        return Err(usage(format!(
            "checkpoint {} not found",
            cmd.ckpt.display()
        )));
    }
    let ckpt = ModelCheckpoint::load(&cmd.ckpt)?;
    std::fs::create_dir_all(&cmd.out)?;
    let model = &ckpt.model;
    let grid = MuGrid::preset(model.family().kind);
    let what: Selection = format!("{:?}", cmd.what).to_lowercase().parse()?;
    let mut opts = EvalOptions {
        seed: cmd.seed,
        rollout_steps: cmd.steps,
        rollout_inits: cmd.inits,
        ..EvalOptions::default()
    };
    opts.bifurcation.seed = cmd.seed;
    opts.bifurcation.n_inits = cmd.inits;
    opts.lyapunov.seed = cmd.seed;
    opts.lyapunov.runs = cmd.runs;
    let eval = evaluation::evaluate(model, &grid, what, &opts)?;
    if let (Some(img), Some(truth)) = (&eval.model_image, &eval.truth_image) {
        img.save_pgm(&cmd.out.join("bifurcation.pgm"))?;
        truth.save_pgm(&cmd.out.join("bifurcation_truth.pgm"))?;
        match eval.report.psnr {
            Some(p) => println!("PSNR = {p:.2} dB"),
            None => println!("PSNR = inf (identical images)"),
        }
    }
    if let Some(ly) = &eval.report.lyapunov {
        let mut f = std::fs::File::create(cmd.out.join("lyapunov.csv"))?;
        eval.report.write_lyapunov_csv(&mut f)?;
        println!(
            "L_LE = {:.6}, sign agreement = {:.1}%",
            ly.l_le,
            100.0 * ly.sign_accuracy
        );
    }
    if what.rollout {
        let mut f = std::fs::File::create(cmd.out.join("rollout.csv"))?;
        eval.report.write_rollout_csv(&mut f)?;
    }
    write_json(&cmd.out.join("report.json"), &eval.report)?;
    write_manifest(&cmd.out, "evaluate", cmd, cmd.seed)
}

fn sweep(cmd: &Sweep) -> CliResult {
    let base = resolve_preset(&cmd.preset)?;
    let (train, test) = load_pair(&cmd.data)?;
    std::fs::create_dir_all(&cmd.out)?;
    let grid = MuGrid::preset(base.system);
    let seeds: Vec<u64> = (0..cmd.seeds).collect();
    for &v in &cmd.values {
        match cmd.axis {
            Axis::Dh => base.clone().with_hidden(v),
            Axis::Nl => base.clone().with_layers(v),
        }
        .map_err(|e| usage(e.to_string()))?;
    }
    let mut failure = None;
    let rows = training::sweep(&cmd.values, &seeds, |v, seed| {
        let preset = match cmd.axis {
            Axis::Dh => base.clone().with_hidden(v)?,
            Axis::Nl => base.clone().with_layers(v)?,
        };
        let (ckpt, _) = match train_preset(&preset, seed, &train, &test, &cmd.opts) {
            Ok(r) => r,
            Err(f) => {
                let msg = f.message.clone();
                failure = Some(f);
                return Err(Error::Training(msg));
            }
        };
        let points = evaluation::model_lyapunov(
            &ckpt.model,
            &grid,
            &evaluation::LyapunovOptions {
                seed,
                ..Default::default()
            },
        )?;
        let report = LyapunovReport::from_points(points)?;
        log::info!(
            "{:?}={v} seed {seed}: L {:.6} L_LE {:.4}",
            cmd.axis,
            ckpt.meta.final_test_l.unwrap_or(f64::NAN),
            report.l_le
        );
        Ok((ckpt.meta.final_test_l.unwrap_or(f64::NAN), report.l_le))
    });
    let rows = match (rows, failure) {
        (Ok(r), _) => r,
        (Err(_), Some(f)) => return Err(f),
        (Err(e), None) => return Err(e.into()),
    };
    let axis = match cmd.axis {
        Axis::Dh => "d_h",
        Axis::Nl => "N_L",
    };
    let mut f = std::fs::File::create(cmd.out.join("sweep.csv"))?;
    training::write_sweep_csv(&rows, axis, &mut f)?;
    write_manifest(&cmd.out, "sweep", cmd, 0)
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| usage(e.to_string()))?;
    }
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::Train(c) => train(c),
        Command::Evaluate(c) => evaluate(c),
        Command::Sweep(c) => sweep(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
