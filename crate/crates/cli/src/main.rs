use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use pgan::config::RunConfig;
use pgan::io;
use pgan::pipeline::{ablate, detect, evaluate, prepare_data, pretrain, train_gan};
use pgan::trainer::{write_log, LogRow, ModelState};
use pgan::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "pgan",
    version,
    about = "Small-object detection with feature super-resolution"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (defaults to the config's output_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for scene generation, proposals and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Config override, e.g. `--set train.learning_rate=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic train and test datasets.
    GenData,
    /// Train the backbone and perception branch on large objects.
    Pretrain,
    /// Alternate generator and adversarial updates.
    TrainGan {
        /// Start from this checkpoint (pretrained or intermediate) instead of
        /// `<out>/pretrain.ckpt`, pretraining first when neither exists.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Detect on the test split and write metric reports.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Score plain conv5 features, bypassing the generator.
        #[arg(long)]
        no_generator: bool,
    },
    /// Write small/residual/super-resolved/large feature panels.
    VizFeatures {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Number of sampled proposal pairs.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Pixel magnification of each feature cell.
        #[arg(long, default_value_t = 16)]
        scale: usize,
    },
    /// Baseline plus one alternation-trained variant per input level.
    Ablate,
}

fn load_config(common: &Common) -> Result<(RunConfig, PathBuf)> {
    let path = common
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    if !path.is_file() {
        return Err(Error::Config(format!(
            "config file {} does not exist",
            path.display()
        )));
    }
    let mut cfg = RunConfig::load(path, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
        cfg.validate()?;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no output directory: pass --out or set output_dir".into()))?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok((cfg, out))
}

fn write_log_file(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_log(&mut buf, rows).map_err(|e| Error::io(path, e))?;
    io::write_file(path, buf)
}

fn save_resolved_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    io::write_file(&out.join("config.json"), serde_json::to_vec_pretty(cfg)?)
}

fn load_state(path: &Path) -> Result<ModelState> {
    info!("loading {}", path.display());
    ModelState::load(path)
}

fn run(cli: Cli) -> Result<()> {
    let (cfg, out) = load_config(&cli.common)?;
    save_resolved_config(&out, &cfg)?;
    match cli.command {
        Command::GenData => {
            let data = prepare_data(&cfg)?;
            io::write_dataset(&out.join("train"), &data.train)?;
            io::write_dataset(&out.join("test"), &data.test)?;
            info!(
                "wrote {} train and {} test images",
                data.train.len(),
                data.test.len()
            );
        }
        Command::Pretrain => {
            let data = prepare_data(&cfg)?;
            let (state, log) = pretrain(&cfg, &data.train)?;
            state.save(&out.join("pretrain.ckpt"))?;
            write_log_file(&out.join("pretrain_log.csv"), &log)?;
        }
        Command::TrainGan { resume } => {
            let data = prepare_data(&cfg)?;
            let default_ckpt = out.join("pretrain.ckpt");
            let mut state = match resume {
                Some(p) => load_state(&p)?,
                None if default_ckpt.is_file() => load_state(&default_ckpt)?,
                None => {
                    info!("no pretrained checkpoint; running phase 1");
                    let (state, log) = pretrain(&cfg, &data.train)?;
                    state.save(&default_ckpt)?;
                    write_log_file(&out.join("pretrain_log.csv"), &log)?;
                    state
                }
            };
            let every = cfg.train.checkpoint_every;
            let log = train_gan(&cfg, &mut state, &data.train, |s| {
                let r = s.counters.rounds_done;
                if every > 0 && r % every == 0 && r < cfg.train.alternation_rounds {
                    s.save(&out.join(format!("round_{r}.ckpt")))?;
                }
                Ok(())
            })?;
            state.save(&out.join("model.ckpt"))?;
            write_log_file(&out.join("train_log.csv"), &log)?;
        }
        Command::Eval {
            checkpoint,
            no_generator,
        } => {
            let state = load_state(&checkpoint.unwrap_or_else(|| out.join("model.ckpt")))?;
            let data = prepare_data(&cfg)?;
            let dets = detect(&state, &data.test, !no_generator, &cfg.eval)?;
            let report = evaluate(&dets, &data.test, &cfg.eval)?;
            io::write_file(
                &out.join("detections.json"),
                serde_json::to_vec_pretty(&dets)?,
            )?;
            io::write_report(&out, &report)?;
            print!("{}", io::metrics_csv(&report));
            println!("{}", io::lamr_line(&report));
        }
        Command::VizFeatures {
            checkpoint,
            count,
            scale,
        } => {
            if count == 0 || scale == 0 {
                return Err(Error::Config("--count and --scale must be positive".into()));
            }
            let state = load_state(&checkpoint.unwrap_or_else(|| out.join("model.ckpt")))?;
            let data = prepare_data(&cfg)?;
            let grids = pgan::viz::feature_grids(&state, &data.test, count, cfg.train.seed, scale)?;
            for (i, ppm) in grids.iter().enumerate() {
                io::write_file(&out.join("viz").join(format!("proposal_{i}.ppm")), ppm)?;
            }
        }
        Command::Ablate => {
            let rows = ablate(&cfg)?;
            let csv = io::ablation_csv(&rows);
            io::write_file(&out.join("ablation.csv"), &csv)?;
            print!("{csv}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                eprintln!("usage: pgan --config <path> [--out <dir>] [--seed <n>] [--set key=value]... <command>");
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
