use std::path::PathBuf;
use std::process::ExitCode;

use adversa_core::config::{Preset, RunConfig};
use adversa_core::pipeline::{self, InferRequest, RunDir};
use adversa_core::scenario::TextKind;
use adversa_core::Error;
use clap::{Args, Parser, Subcommand, ValueEnum};

mod plot;

#[derive(Parser, Debug)]
#[command(name = "adversa", version, about = "Accident video generation pipeline")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration (TOML). Defaults to `<out>/config.toml` when present, else the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Preset used when no config file is found.
    #[arg(long, global = true, default_value = "desk")]
    preset: String,
    /// Run directory.
    #[arg(long, global = true, env = "ADVERSA_DATA_DIR", default_value = "adversa-run")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the training and held-out scenario corpora.
    GenData {
        /// Total scenario count; one eighth (at least two) is held out.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train the text-video alignment model.
    TrainClip,
    /// Train the masked latent video diffusion model.
    TrainOavd {
        /// Condition on a freshly initialized text encoder instead of a trained one.
        #[arg(long)]
        untrained_text_encoder: bool,
    },
    /// Re-generate one held-out clip under a text prompt.
    Infer {
        /// Held-out scenario index.
        #[arg(long, default_value_t = 0)]
        scenario: usize,
        #[arg(long, value_enum, default_value_t = Text::Reason)]
        text: Text,
        /// DDIM steps; defaults to the config.
        #[arg(long)]
        steps: Option<usize>,
        /// Noise strength in (0, 1]; defaults to the config.
        #[arg(long)]
        strength: Option<f64>,
        /// Generation seed; defaults to the master seed.
        #[arg(long)]
        gen_seed: Option<u64>,
    },
    /// Score generation on held-out scenarios and write metrics.csv.
    Eval,
    /// Render training curves and evaluation plots.
    Plot,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Text {
    Reason,
    Prevention,
    Category,
    CategoryNeg,
}

impl From<Text> for TextKind {
    fn from(t: Text) -> Self {
        match t {
            Text::Reason => TextKind::Reason,
            Text::Prevention => TextKind::Prevention,
            Text::Category => TextKind::Category,
            Text::CategoryNeg => TextKind::CategoryNeg,
        }
    }
}

fn load_config(common: &Common, run: &RunDir) -> adversa_core::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None if run.config().exists() => RunConfig::load(&run.config())?,
        None => RunConfig::preset(common.preset.parse::<Preset>()?),
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Splits `count` scenarios into training and held-out sets.
fn apply_count(cfg: &mut RunConfig, count: usize) -> adversa_core::Result<()> {
    if count < 4 {
        return Err(Error::Config(format!("--count {count} below the minimum of 4")));
    }
    let heldout = (count / 8).max(2);
    cfg.data.train_count = count - heldout;
    cfg.data.heldout_count = heldout;
    cfg.eval.scenarios = cfg.eval.scenarios.min(heldout);
    cfg.validate()
}

fn run(cli: Cli) -> adversa_core::Result<()> {
    let run = RunDir::new(&cli.common.out);
    let mut cfg = load_config(&cli.common, &run)?;
    match cli.command {
        Command::GenData { count } => {
            if let Some(n) = count {
                apply_count(&mut cfg, n)?;
            }
            let m = pipeline::gen_data(&cfg, &run)?;
            println!(
                "{} training + {} held-out scenarios in {} (config {})",
                m.train.len(),
                m.heldout.len(),
                run.data().display(),
                m.config_hash
            );
        }
        Command::TrainClip => {
            let r = pipeline::train_clip(&cfg, &run)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::TrainOavd { untrained_text_encoder } => {
            let r = pipeline::train_oavd_stage(&cfg, &run, untrained_text_encoder)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Infer {
            scenario,
            text,
            steps,
            strength,
            gen_seed,
        } => {
            let req = InferRequest {
                scenario,
                text: text.into(),
                steps: steps.unwrap_or(cfg.inference.steps),
                strength: strength.unwrap_or(cfg.inference.strength),
                seed: gen_seed.unwrap_or(cfg.seed),
            };
            let r = pipeline::infer(&cfg, &run, &req)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Eval => {
            let r = pipeline::evaluate(&cfg, &run)?;
            println!("{}", serde_json::to_string_pretty(&r.metrics)?);
        }
        Command::Plot => {
            for p in plot::plot_all(&run)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Compatibility(_) => 2,
        Error::Invariant(_) | Error::DegenerateSegment(_) | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
