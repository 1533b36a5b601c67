//! `depthfuse` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use depthfuse::pipeline::diagnostics::{
    attention_csv, block_gradient_cases, gradient_csv, op_gradient_cases, pipeline_gradient_case, spatial_bench,
    spatial_csv, time_attention,
};
use depthfuse::pipeline::io::save_sample;
use depthfuse::pipeline::train::{
    ablation_csv, complete_files, evaluate, load_dataset, load_model, prepare_all, run_sweep, sweep_variants,
    synthetic_split, Sweep,
};
use depthfuse::pipeline::{Checkpoint, Profile, TrainConfig, Trainer};
use depthfuse::Error;

#[derive(Parser, Debug)]
#[command(version, about = "Depth completion for transparent and specular objects")]
struct Cli {
    /// TOML run configuration; merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    profile: Option<ProfileArg>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Neighbor strategy: none, knn, ball or adaptive.
    #[arg(long, global = true)]
    aca: Option<String>,
    /// GCMF scales: baseline, none, all, or a list such as 1/4,1/2.
    #[arg(long, global = true)]
    gcmf: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic train and eval splits to disk.
    GenData {
        /// Defaults to the configured data directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on `<data>/train`, checkpointing every epoch.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Masked metrics of a checkpoint on `<data>/eval` as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Evaluate the checkpoint under every row of a sweep (gcmf or aca).
        #[arg(long)]
        sweep: Option<String>,
    },
    /// Predict depth and confidence for one RGB-D frame.
    Complete {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        #[arg(long)]
        camera: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every op and block.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Also check the whole model (slow).
        #[arg(long)]
        pipeline: bool,
    },
    /// Spatial index and attention throughput as CSV.
    Bench {
        #[arg(long, default_value_t = 4096)]
        points: usize,
        #[arg(long, default_value_t = 10_000)]
        queries: usize,
    },
    /// Train and evaluate every configuration of a sweep (gcmf or aca).
    Ablate {
        sweep: String,
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Numeric(_) | Error::Harness(_))))
                || e.downcast_ref::<GradientFailure>().is_some();
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

#[derive(Debug)]
struct GradientFailure(usize);

impl std::fmt::Display for GradientFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} gradient check(s) exceeded the tolerance", self.0)
    }
}

impl std::error::Error for GradientFailure {}

fn config(cli: &Cli) -> anyhow::Result<TrainConfig> {
    let mut cfg = match (&cli.config, cli.profile) {
        (Some(path), _) => TrainConfig::load(path)?,
        (None, Some(ProfileArg::Paper)) => TrainConfig::for_profile(Profile::Paper),
        (None, _) => TrainConfig::for_profile(Profile::Desk),
    };
    if let (Some(_), Some(p)) = (&cli.config, cli.profile) {
        let wanted = match p {
            ProfileArg::Desk => Profile::Desk,
            ProfileArg::Paper => Profile::Paper,
        };
        if cfg.profile != wanted {
            bail!(Error::config(format!(
                "--profile {p:?} conflicts with the profile in the config file"
            )));
        }
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(aca) = &cli.aca {
        cfg.set_aca_flag(aca)?;
    }
    if let Some(gcmf) = &cli.gcmf {
        cfg.set_gcmf_flag(gcmf)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = config(&cli)?;
    match cli.command {
        Command::GenData { out } => {
            let root = out.unwrap_or_else(|| cfg.data.dir.clone());
            for (split, eval) in [("train", false), ("eval", true)] {
                let dir = root.join(split);
                let samples = synthetic_split(&cfg, eval)?;
                for s in &samples {
                    save_sample(&dir.join(&s.id), s)?;
                }
                println!("{} {} samples in {}", samples.len(), split, dir.display());
            }
        }
        Command::Train { data, out, resume } => {
            let root = data.unwrap_or_else(|| cfg.data.dir.clone());
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let train = prepare_all(&cfg, &load_dataset(&root.join("train"))?)?;
            let mut trainer = match resume {
                Some(path) => Trainer::resume(cfg.clone(), &Checkpoint::load(&path)?)?,
                None => Trainer::new(cfg.clone())?,
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let result = trainer.fit(&train, Some(&out));
            trainer.write_logs(&out)?;
            result?;
            if let Some(last) = trainer.epochs.last() {
                println!("epoch {} loss {:.6}", last.epoch + 1, last.mean_loss);
            }
            println!("checkpoints in {}", out.display());
        }
        Command::Eval { checkpoint, data, sweep } => {
            let root = data.unwrap_or_else(|| cfg.data.dir.clone());
            let eval = prepare_all(&cfg, &load_dataset(&root.join("eval"))?)?;
            let mut warn = |m: String| eprintln!("warning: {m}");
            let mut model = load_model(&cfg, &checkpoint, &mut warn)?;
            let mut s = format!("config,{}\n", depthfuse::pipeline::Metrics::CSV_HEADER);
            match sweep {
                Some(name) => {
                    for (label, variant) in sweep_variants(&cfg, name.parse::<Sweep>()?)? {
                        model.configure(&variant);
                        s.push_str(&format!("{label},{}\n", evaluate(&model, &eval)?.csv_row()));
                    }
                }
                None => s.push_str(&format!("current,{}\n", evaluate(&model, &eval)?.csv_row())),
            }
            print!("{s}");
        }
        Command::Complete {
            checkpoint,
            rgb,
            depth,
            camera,
            out,
        } => {
            let mut warn = |m: String| eprintln!("warning: {m}");
            let model = load_model(&cfg, &checkpoint, &mut warn)?;
            let files = complete_files(&model, &cfg, &rgb, &depth, &camera, &out)?;
            println!("{}", files.depth.display());
            println!("{}", files.confidence.display());
        }
        Command::Gradcheck { seeds, pipeline } => {
            let mut cases = Vec::new();
            for seed in 0..seeds {
                cases.extend(op_gradient_cases(seed)?);
                cases.extend(block_gradient_cases(seed)?);
                if pipeline {
                    cases.push(pipeline_gradient_case(seed, 2)?);
                }
            }
            print!("{}", gradient_csv(&cases));
            let failed = cases.iter().filter(|c| !c.passed()).count();
            if failed > 0 {
                return Err(GradientFailure(failed).into());
            }
        }
        Command::Bench { points, queries } => {
            let rows = spatial_bench(points, queries, cfg.aca.k, cfg.aca.r_max, cfg.seed)?;
            print!("{}", spatial_csv(&rows));
            let mut att = Vec::new();
            for tokens in [256, 512, 1024, 2048, 4096, 8192] {
                att.push(time_attention("linear", tokens, 32, 5, cfg.seed)?);
                if tokens <= 2048 {
                    att.push(time_attention("softmax", tokens, 32, 3, cfg.seed)?);
                }
            }
            print!("{}", attention_csv(&att));
        }
        Command::Ablate {
            sweep,
            seeds,
            epochs,
            out,
        } => {
            let sweep: Sweep = sweep.parse()?;
            let seeds = parse_seeds(&seeds)?;
            let mut base = cfg;
            if let Some(e) = epochs {
                base.train.epochs = e;
            }
            let train = prepare_all(&base, &synthetic_split(&base, false)?)?;
            let eval = prepare_all(&base, &synthetic_split(&base, true)?)?;
            let mut progress = |r: &depthfuse::pipeline::train::AblationRow| {
                eprintln!("{} seed {}: rmse {:.4}", r.label, r.seed, r.metrics.rmse);
            };
            let rows = run_sweep(&base, sweep, &seeds, &train, &eval, &mut progress)?;
            let csv = ablation_csv(&rows);
            if let Some(path) = out {
                write_file(&path, &csv)?;
            }
            print!("{csv}");
        }
    }
    Ok(())
}

fn parse_seeds(s: &str) -> anyhow::Result<Vec<u64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<u64>()
                .map_err(|_| Error::input(format!("bad seed `{t}`")).into())
        })
        .collect()
}

fn write_file(path: &Path, body: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}
