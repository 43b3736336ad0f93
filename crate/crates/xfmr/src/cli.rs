//! Argument parsing and command dispatch.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crossformer::diagnostics::{amplitude_csv, amplitude_trace, attention_csv};
use crossformer::params::normal_tensor;
use crossformer::{Error, Model, ModelConfig};

use crate::checks::{run_suite, Suite};
use crate::report::build_report;
use crate::train::{threads_from_env, train_toy, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "xfmr", version, about = "Cross-scale vision transformer toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print stage shapes, group sizes, parameter and FLOP counts.
    Build(Common),
    /// Run a verification suite: grads, dpb, layout, softmax or all.
    Check {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Train the toy classifier and write loss.csv and model.xfmr.
    TrainToy(Common),
    /// Write amplitude.csv and per-block attention map CSVs.
    Trace(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Input side length, overriding the config.
    #[arg(long)]
    input_size: Option<usize>,
    /// Parameters to load instead of a fresh initialisation.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Config(e.to_string())
    }
}

fn load_config(c: &Common, default: impl FnOnce() -> ModelConfig) -> Result<ModelConfig, Failure> {
    let mut cfg = match (&c.variant, &c.config) {
        (Some(_), Some(_)) => return Err(Failure::Config("give either --variant or --config, not both".into())),
        (Some(v), None) => ModelConfig::variant(v)?,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
            ModelConfig::parse(&text)?
        }
        (None, None) => default(),
    };
    if let Some(s) = c.input_size {
        cfg.input_size = s;
        cfg.validate()?;
    }
    Ok(cfg)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn cmd_build(c: &Common, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(c, || ModelConfig::tiny())?;
    let r = build_report(&cfg)?;
    let _ = write!(out, "{}", r.text);
    match r.within_tolerance {
        Some(false) => Err(Failure::Check("counts outside tolerance".into())),
        _ => Ok(()),
    }
}

fn cmd_check(suite: &str, out: &mut dyn Write) -> Result<(), Failure> {
    let s = Suite::parse(suite).ok_or_else(|| Failure::Config(format!("unknown suite {suite:?}")))?;
    let results = run_suite(s)?;
    for r in &results {
        let _ = writeln!(out, "{}", r.line());
    }
    let failed = results.iter().filter(|r| !r.pass).count();
    let _ = writeln!(out, "{} checks, {failed} failed", results.len());
    if failed > 0 { Err(Failure::Check(format!("{failed} checks failed"))) } else { Ok(()) }
}

fn cmd_train(c: &Common, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(c, ModelConfig::tiny)?;
    let d = TrainConfig::default();
    let run = TrainConfig {
        seed: c.seed,
        steps: c.steps.unwrap_or(d.steps),
        batch: c.batch.unwrap_or(d.batch),
        lr: c.lr.unwrap_or(d.lr),
        threads: threads_from_env(),
    };
    if run.batch == 0 {
        return Err(Failure::Config("batch must be positive".into()));
    }
    let (model, report) = train_toy(&cfg, &run)?;
    write_file(&c.out.join("loss.csv"), report.loss_csv().as_bytes())?;
    if report.diverged {
        let _ = writeln!(out, "loss diverged at step {}", report.losses.len() - 1);
        return Err(Failure::Check("training diverged".into()));
    }
    write_file(&c.out.join("model.xfmr"), &model.checkpoint())?;
    let last = report.losses.last().copied().unwrap_or(f64::NAN);
    let _ = writeln!(out, "steps {} final loss {last:.6} held-out accuracy {:.4}", run.steps, report.accuracy);
    Ok(())
}

fn cmd_trace(c: &Common, out: &mut dyn Write) -> Result<(), Failure> {
    let cfg = load_config(c, || ModelConfig::variant("crossformer++-s").expect("known variant"))?;
    let mut model = Model::new(cfg.clone(), c.seed)?;
    if let Some(p) = &c.checkpoint {
        let bytes = std::fs::read(p).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?;
        model.load_checkpoint(&bytes)?;
    }
    let batch = c.batch.unwrap_or(8);
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let images = normal_tensor(&mut rng, &[batch, cfg.in_chans, cfg.input_size, cfg.input_size], 1.0);
    let records = amplitude_trace(&model, &images)?;
    write_file(&c.out.join("amplitude.csv"), amplitude_csv(&records).as_bytes())?;
    let mut maps = 0;
    for r in &records {
        if let Some(m) = &r.attention {
            let name = format!("attention/stage{}_block{}.csv", r.stage + 1, r.block + 1);
            write_file(&c.out.join(name), attention_csv(m)?.as_bytes())?;
            maps += 1;
        }
    }
    let _ = writeln!(out, "{} rows in amplitude.csv, {maps} attention maps", records.len());
    Ok(())
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = if e.use_stderr() { write!(err, "{e}") } else { write!(out, "{e}") };
            return code;
        }
    };
    let result = match &cli.command {
        Command::Build(c) => cmd_build(c, out),
        Command::Check { suite } => cmd_check(suite, out),
        Command::TrainToy(c) => cmd_train(c, out),
        Command::Trace(c) => cmd_trace(c, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Check(m)) => {
            let _ = writeln!(err, "xfmr: {m}");
            EXIT_FAILED
        }
        Err(Failure::Config(m)) => {
            let _ = writeln!(err, "xfmr: {m}");
            EXIT_CONFIG
        }
    }
}
