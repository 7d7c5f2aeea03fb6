use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use blendnet::config::RunConfig;
use blendnet::run::commands::{cmd_ablate, cmd_eval, cmd_gen, cmd_train, cmd_visualize, default_checkpoint};
use blendnet::selftest::run_selftest;
use blendnet::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "blendnet", version, about = "Attention-blended video object detection on synthetic occluded clips")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file; defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the generator and training seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Checkpoint to load (eval, visualize) or warm start from (train).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset.
    Gen(Common),
    /// Train a detector on the dataset.
    Train(Common),
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// `train` or `test`; overrides the config.
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate a sweep over the configured ablation axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated axes; overrides the config.
        #[arg(long, value_delimiter = ',')]
        axes: Option<Vec<String>>,
    },
    /// Write temporal attention maps and the annotated centre frame.
    Visualize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        clip: String,
        #[arg(long)]
        frame: usize,
    },
    /// Run the oracle and gradient checks.
    Selftest {
        /// Number of random oracle cases.
        #[arg(long, default_value_t = 100)]
        cases: usize,
    },
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var("BLENDNET_THREADS") else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Usage(format!("BLENDNET_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot size worker pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    configure_threads()?;
    match cli.command {
        Command::Gen(c) => {
            let cfg = load_config(&c)?;
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.dataset.clone());
            cmd_gen(&cfg, &out, c.force)?;
        }
        Command::Train(c) => {
            let mut cfg = load_config(&c)?;
            if c.checkpoint.is_some() {
                cfg.train.warm_start = c.checkpoint.clone();
            }
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.clone());
            let outcome = cmd_train(&cfg, &out, c.force)?;
            if let Some(last) = outcome.epochs.last() {
                println!("trained {} epochs, final loss {:.5}", last.epoch, last.mean_loss);
            }
        }
        Command::Eval { common: c, split } => {
            let mut cfg = load_config(&c)?;
            if let Some(s) = split {
                if s != "train" && s != "test" {
                    return Err(Error::Usage(format!("--split must be train or test, got {s:?}")));
                }
                cfg.eval.split = s;
            }
            let ckpt = c.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.join(format!("eval_{}", cfg.eval.split)));
            let outcome = cmd_eval(&cfg, &ckpt, &out, c.force)?;
            println!("mAP {:.4}", outcome.map.map);
        }
        Command::Ablate { common: c, axes } => {
            let mut cfg = load_config(&c)?;
            if let Some(a) = axes {
                cfg.ablate.axes = a.into_iter().filter(|s| !s.is_empty()).collect();
            }
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.join("ablate"));
            print!("{}", cmd_ablate(&cfg, &out, c.force)?.render_text());
        }
        Command::Visualize { common: c, clip, frame } => {
            let cfg = load_config(&c)?;
            let ckpt = c.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&cfg));
            let out = c.out.clone().unwrap_or_else(|| cfg.paths.out.join("visualize"));
            let v = cmd_visualize(&cfg, &ckpt, &clip, frame, &out, c.force)?;
            for f in v.attention_files.iter().chain([&v.frame_file]) {
                println!("{}", f.display());
            }
            if !v.flat_offsets.is_empty() {
                println!("flat attention at offsets {:?}", v.flat_offsets);
            }
        }
        Command::Selftest { cases } => {
            let report = run_selftest(cases)?;
            print!("{}", report.render());
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_SELFTEST));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e @ (Error::Usage(_) | Error::Parse { .. })) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}
