//! `gradleak`: capture victim gradients, run reconstruction attacks, score
//! results and drive experiment grids.
//!
//! Exit codes: 0 success, 1 configuration or input error, 2 runtime abort.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gradleak::attack::{run_attack, AttackConfig, DummyInit, ReconstructionResult, RunStatus};
use gradleak::data::{builtin_patterns, load_image_dir, Dataset, PatternKind};
use gradleak::distance::{DistanceConfig, QScheduleName, SigmaMode};
use gradleak::experiment::{run_experiment, ExperimentError, Overrides};
use gradleak::metrics::{match_batch, unbatch, ItemMetrics};
use gradleak::model::{init_weights, ModelSpec, WeightInit};
use gradleak::optim::OptimizerKind;
use gradleak::parallel::ExecMode;
use gradleak::pnm;
use gradleak::text::{random_ids, TextVictim, Vocabulary};
use gradleak::victim::{capture, load_model, save_model, train, TrainOptions};

#[derive(Parser)]
#[command(name = "gradleak", version, about = "Gradient inversion toolkit")]
struct Cli {
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output path (file or directory, depending on the command).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for experiment grids (falls back to GRADLEAK_THREADS, then 1).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Model weights.
    #[command(subcommand)]
    Model(ModelCmd),
    /// The honest participant.
    #[command(subcommand)]
    Victim(VictimCmd),
    /// Image reconstruction.
    #[command(subcommand)]
    Attack(AttackCmd),
    /// Token reconstruction.
    #[command(subcommand)]
    Text(TextCmd),
    /// Reconstruction quality.
    #[command(subcommand)]
    Metrics(MetricsCmd),
    /// Config-driven grids.
    #[command(subcommand)]
    Experiment(ExperimentCmd),
}

#[derive(Subcommand)]
enum ModelCmd {
    /// Initialise weights for a model spec (JSON) and write a weights container.
    Init {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, value_enum, default_value_t = InitArg::XavierNormal)]
        init: InitArg,
    },
}

#[derive(Subcommand)]
enum VictimCmd {
    /// Compute the averaged gradient of a batch and write a snapshot.
    Capture {
        /// Weights container written by `model init`.
        #[arg(long)]
        model: PathBuf,
        /// Image directory, or `builtin:<size>` for synthetic patterns.
        #[arg(long)]
        data: String,
        /// Comma-separated item indices forming the batch.
        #[arg(long, default_value = "0")]
        indices: String,
        /// SGD epochs over the data before capture.
        #[arg(long, default_value_t = 0)]
        epochs: usize,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
    },
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long, value_enum, default_value_t = DistanceArg::Sapag)]
    distance: DistanceArg,
    #[arg(long, value_enum, default_value_t = SigmaArg::PerLayer)]
    sigma_mode: SigmaArg,
    #[arg(long, value_enum, default_value_t = QArg::Harmonic)]
    q_schedule: QArg,
    #[arg(long, default_value_t = 0.5)]
    gamma: f64,
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adamw)]
    optimizer: OptimizerArg,
    /// Learning rate; the optimizer's default when omitted.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
    #[arg(long, value_enum, default_value_t = DummyArg::Normal)]
    dummy_init: DummyArg,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
}

impl AttackArgs {
    fn config(&self, seed: u64) -> AttackConfig {
        let mut distance = match self.distance {
            DistanceArg::Sapag => DistanceConfig::sapag(),
            DistanceArg::Dlg => DistanceConfig::euclidean(),
        };
        distance.sigma_mode = match self.sigma_mode {
            SigmaArg::PerLayer => SigmaMode::PerLayer,
            SigmaArg::Global => SigmaMode::Global,
        };
        distance.q_schedule = match self.q_schedule {
            QArg::Constant => QScheduleName::Constant,
            QArg::Harmonic => QScheduleName::Harmonic,
            QArg::Geometric => QScheduleName::Geometric,
        };
        distance.gamma = self.gamma;
        let mut optimizer = match self.optimizer {
            OptimizerArg::Adam => OptimizerKind::adam(1e-3),
            OptimizerArg::Adamw => OptimizerKind::adamw(1e-3),
            OptimizerArg::LbfgsLite => OptimizerKind::lbfgs_lite(),
        };
        if let Some(v) = self.lr {
            match &mut optimizer {
                OptimizerKind::Adam { lr, .. } | OptimizerKind::Adamw { lr, .. } | OptimizerKind::LbfgsLite { lr, .. } => *lr = v,
            }
        }
        let mut cfg = AttackConfig::new(distance, optimizer, seed);
        cfg.max_iters = self.max_iters;
        cfg.log_every = self.log_every;
        cfg.dummy_init = match self.dummy_init {
            DummyArg::Normal => DummyInit::Normal,
            DummyArg::Constant => DummyInit::Constant { value: 0.5 },
        };
        cfg
    }
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Reconstruct the batch behind a snapshot.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        snapshot: PathBuf,
        #[command(flatten)]
        attack: AttackArgs,
    },
}

#[derive(Subcommand)]
enum TextCmd {
    /// Embed a token sequence, capture the gradient of a linear head on it,
    /// reconstruct the embeddings and decode them.
    Attack {
        /// One token per line; a synthetic vocabulary is used when omitted.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        vocab_size: usize,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Space-separated tokens; random tokens when omitted.
        #[arg(long)]
        tokens: Option<String>,
        #[arg(long, default_value_t = 8)]
        seq_len: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Use the one-block transformer instead of the plain embedding head.
        #[arg(long)]
        encoder: bool,
        #[command(flatten)]
        attack: AttackArgs,
    },
}

#[derive(Subcommand)]
enum MetricsCmd {
    /// Compare a reconstruction with the truth (PGM/PPM).
    Eval {
        #[arg(long)]
        recon: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
}

#[derive(Subcommand)]
enum ExperimentCmd {
    /// Run every cell of a config grid.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Uniform,
    XavierNormal,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistanceArg {
    Sapag,
    Dlg,
}

#[derive(Clone, Copy, ValueEnum)]
enum SigmaArg {
    PerLayer,
    Global,
}

#[derive(Clone, Copy, ValueEnum)]
enum QArg {
    Constant,
    Harmonic,
    Geometric,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Adam,
    Adamw,
    LbfgsLite,
}

#[derive(Clone, Copy, ValueEnum)]
enum DummyArg {
    Normal,
    Constant,
}

enum Failure {
    Config(String),
    Runtime(String),
}

type Outcome = Result<(), Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure::Config(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn out_path(cli_out: &Option<PathBuf>, default: &str) -> PathBuf {
    cli_out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn load_data(spec: &str, num_classes: usize, seed: u64) -> Result<Dataset, Failure> {
    match spec.strip_prefix("builtin:") {
        Some(size) => {
            let size = size.parse().map_err(|_| config_err(format!("bad builtin size {size:?}")))?;
            builtin_patterns(&PatternKind::ALL, size, 4, seed).map_err(config_err)
        }
        None => load_image_dir(spec, num_classes).map_err(config_err),
    }
}

fn parse_indices(s: &str) -> Result<Vec<usize>, Failure> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| config_err(format!("bad index {p:?}"))))
        .collect()
}

fn write_json(path: &Path, v: &serde_json::Value) -> Outcome {
    fs::write(path, serde_json::to_string_pretty(v).map_err(runtime_err)? + "\n").map_err(runtime_err)
}

fn write_trace(path: &Path, r: &ReconstructionResult) -> Outcome {
    let mut s = String::from("iter,distance\n");
    for p in &r.loss_trace {
        s.push_str(&format!("{},{}\n", p.iter, p.distance));
    }
    fs::write(path, s).map_err(runtime_err)
}

fn check_status(r: &ReconstructionResult) -> Outcome {
    match &r.status {
        RunStatus::Aborted { iter, reason } => Err(Failure::Runtime(format!("attack aborted at iteration {iter}: {reason}"))),
        _ => Ok(()),
    }
}

fn model_init(cli: &Cli, spec: &Path, init: InitArg) -> Outcome {
    let text = fs::read_to_string(spec).map_err(config_err)?;
    let spec: ModelSpec = serde_json::from_str(&text).map_err(config_err)?;
    let seed = cli.seed.unwrap_or(0);
    let init = match init {
        InitArg::Uniform => WeightInit::uniform(seed),
        InitArg::XavierNormal => WeightInit::xavier_normal(seed),
    };
    let weights = init_weights(&spec, &init).map_err(config_err)?;
    let out = out_path(&cli.out, "weights.bin");
    save_model(&out, &spec, &weights).map_err(runtime_err)?;
    println!("wrote {} ({} tensors, checksum {:016x})", out.display(), weights.len(), weights.checksum());
    Ok(())
}

fn victim_capture(cli: &Cli, model: &Path, data: &str, indices: &str, epochs: usize, lr: f64) -> Outcome {
    let (spec, mut weights) = load_model(model).map_err(config_err)?;
    let seed = cli.seed.unwrap_or(0);
    let data = load_data(data, spec.num_classes, seed)?;
    let idx = parse_indices(indices)?;
    if let Some(&bad) = idx.iter().find(|&&i| i >= data.len()) {
        return Err(config_err(format!("index {bad} out of range ({} items)", data.len())));
    }
    if epochs > 0 {
        let opts = TrainOptions {
            epochs,
            lr,
            ..TrainOptions::default()
        };
        weights = train(&spec, &weights, &data, &opts).map_err(runtime_err)?.0;
    }
    let (x, y) = data.batch(&idx);
    let mut snap = capture(&spec, &weights, &x, &y).map_err(config_err)?;
    snap.meta.epochs = epochs;
    snap.meta.seed = seed;
    let out = out_path(&cli.out, "snapshot.bin");
    snap.save(&out).map_err(runtime_err)?;
    // the attacker needs the exact weights the gradient was taken on
    let weights_out = out.with_extension("weights.bin");
    save_model(&weights_out, &spec, &weights).map_err(runtime_err)?;
    let truth = if idx.len() == 1 {
        x.index_outer(0)
    } else {
        pnm::tile_horizontal(&unbatch(&x))
    };
    let truth_out = out.with_extension(format!("truth.{}", pnm::extension_for(&truth)));
    pnm::save_image(&truth_out, &truth).map_err(runtime_err)?;
    println!(
        "wrote {} (batch {}), {} and {}",
        out.display(),
        idx.len(),
        weights_out.display(),
        truth_out.display()
    );
    Ok(())
}

fn attack_run(cli: &Cli, model: &Path, snapshot: &Path, args: &AttackArgs) -> Outcome {
    let (spec, weights) = load_model(model).map_err(config_err)?;
    let snap = gradleak::victim::GradientSnapshot::load(snapshot).map_err(config_err)?;
    let cfg = args.config(cli.seed.unwrap_or(0));
    let r = run_attack(&spec, &weights, &snap, &cfg).map_err(config_err)?;
    let dir = out_path(&cli.out, "attack_out");
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    let items = unbatch(&r.x_recon);
    let img = if items.len() == 1 {
        items[0].clone()
    } else {
        pnm::tile_horizontal(&items)
    };
    pnm::save_image(dir.join(format!("recon.{}", pnm::extension_for(&img))), &img).map_err(runtime_err)?;
    write_trace(&dir.join("trace.csv"), &r)?;
    write_json(
        &dir.join("result.json"),
        &serde_json::json!({
            "attack": cfg,
            "status": r.status,
            "iters_run": r.iters_run,
            "best_iter": r.best_iter,
            "best_distance": r.best_distance,
            "predicted_label": r.predicted_label,
            "wall_seconds": r.wall_seconds,
        }),
    )?;
    println!(
        "best distance {:.6e} after {} iterations ({:.1}s); labels {:?}",
        r.best_distance, r.iters_run, r.wall_seconds, r.predicted_label
    );
    check_status(&r)
}

#[allow(clippy::too_many_arguments)]
fn text_attack(
    cli: &Cli,
    vocab: &Option<PathBuf>,
    vocab_size: usize,
    dim: usize,
    tokens: &Option<String>,
    seq_len: usize,
    classes: usize,
    encoder: bool,
    args: &AttackArgs,
) -> Outcome {
    let seed = cli.seed.unwrap_or(0);
    let vocab = match vocab {
        Some(p) => Vocabulary::load(p, dim, seed),
        None => Vocabulary::synthetic(vocab_size, dim, seed),
    }
    .map_err(config_err)?;
    let ids: Vec<usize> = match tokens {
        Some(t) => t
            .split_whitespace()
            .map(|w| vocab.index_of(w).ok_or_else(|| config_err(format!("token {w:?} not in vocabulary"))))
            .collect::<Result<_, _>>()?,
        None => random_ids(vocab.len(), seq_len, seed),
    };
    let victim = TextVictim::build(&vocab, &ids, classes, encoder, seed).map_err(config_err)?;
    let n = ids.len();
    let cfg = args.config(seed);
    let (text, r) = victim.attack(&vocab, &cfg).map_err(config_err)?;
    let dir = out_path(&cli.out, "text_out");
    fs::create_dir_all(&dir).map_err(runtime_err)?;
    fs::write(dir.join("text.json"), text.to_json(&vocab) + "\n").map_err(runtime_err)?;
    let truth: Vec<&str> = ids.iter().map(|&i| vocab.tokens()[i].as_str()).collect();
    let plain = format!("truth:     {}\nrecovered: {}\n", truth.join(" "), text.render());
    fs::write(dir.join("text.txt"), &plain).map_err(runtime_err)?;
    write_trace(&dir.join("trace.csv"), &r)?;
    print!("{plain}");
    println!("{}/{} tokens recovered", text.matches(), n);
    check_status(&r)
}

fn metrics_eval(cli: &Cli, recon: &Path, truth: &Path) -> Outcome {
    let r = pnm::load_image(recon).map_err(config_err)?;
    let t = pnm::load_image(truth).map_err(config_err)?;
    let m = ItemMetrics::compute(&r, &t).map_err(config_err)?;
    let report = match_batch(&[r], &[t]).map_err(config_err)?;
    let json = report.to_json();
    println!("mse {:.6e}  psnr {:.2} dB  ssim {:.4}", m.mse, m.psnr, m.ssim);
    if let Some(out) = &cli.out {
        fs::write(out, json + "\n").map_err(runtime_err)?;
    }
    Ok(())
}

fn threads(cli: &Cli) -> Result<usize, Failure> {
    match cli.threads {
        Some(t) => Ok(t),
        None => match std::env::var("GRADLEAK_THREADS") {
            Ok(v) => v
                .trim()
                .parse()
                .map_err(|_| config_err(format!("GRADLEAK_THREADS={v:?} is not a thread count"))),
            Err(_) => Ok(1),
        },
    }
}

fn experiment_run(cli: &Cli, config: &Path) -> Outcome {
    let mode = ExecMode::from_threads(threads(cli)?);
    let overrides = Overrides {
        seed: cli.seed,
        output_dir: cli.out.clone(),
    };
    let outcome = run_experiment(config, &overrides, mode).map_err(|e| match e {
        ExperimentError::Config { .. } => config_err(e),
        ExperimentError::Io(_) => runtime_err(e),
    })?;
    let failed: Vec<_> = outcome.records.iter().filter(|r| r.failed()).collect();
    println!(
        "{} runs, {} failed; summary in {}",
        outcome.records.len(),
        failed.len(),
        outcome.output_dir.join("summary.csv").display()
    );
    if failed.is_empty() {
        Ok(())
    } else {
        let lines: Vec<String> = failed
            .iter()
            .map(|r| format!("  {}: {} {}", r.run_id, r.status, r.error.as_deref().unwrap_or("")))
            .collect();
        Err(Failure::Runtime(format!("failed runs:\n{}", lines.join("\n"))))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Model(ModelCmd::Init { spec, init }) => model_init(&cli, spec, *init),
        Command::Victim(VictimCmd::Capture {
            model,
            data,
            indices,
            epochs,
            lr,
        }) => victim_capture(&cli, model, data, indices, *epochs, *lr),
        Command::Attack(AttackCmd::Run {
            model,
            snapshot,
            attack,
        }) => attack_run(&cli, model, snapshot, attack),
        Command::Text(TextCmd::Attack {
            vocab,
            vocab_size,
            dim,
            tokens,
            seq_len,
            classes,
            encoder,
            attack,
        }) => text_attack(&cli, vocab, *vocab_size, *dim, tokens, *seq_len, *classes, *encoder, attack),
        Command::Metrics(MetricsCmd::Eval { recon, truth }) => metrics_eval(&cli, recon, truth),
        Command::Experiment(ExperimentCmd::Run { config }) => experiment_run(&cli, config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
