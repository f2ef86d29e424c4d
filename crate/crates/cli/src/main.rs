//! `tsnet`: data generation, training, evaluation and ablation grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tsnet_core::checkpoint::Checkpoint;
use tsnet_core::config::ExperimentConfig;
use tsnet_core::data::{ModalityTransform, Split};
use tsnet_core::eval::evaluate;
use tsnet_core::experiment::{cells, format_csv, format_table, run_cells, AblationTable};
use tsnet_core::pipeline::{gen_data, load_prepared, load_split, DataSource};
use tsnet_core::train::{RunDir, Trainer};
use tsnet_core::Error;

#[derive(Parser)]
#[command(
    name = "tsnet",
    version,
    about = "Multimodal patch matching with three-stream networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build train/test/validation pair caches.
    GenData(GenDataArgs),
    /// Train one configuration.
    Train(TrainArgs),
    /// Score a split with a checkpoint.
    Eval(EvalArgs),
    /// Train an ablation grid over several seeds.
    Ablation(AblationArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Synthetic scenes: N SIZE TRANSFORM [SEED].
    #[arg(long, num_args = 3..=4, value_names = ["N", "SIZE", "TRANSFORM", "SEED"], conflicts_with = "from")]
    synth: Option<Vec<String>>,
    /// Directory of `<pair-id>/{a,b}.png` image pairs.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Pipeline seed (overridden by a fourth `--synth` value).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "data")]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (default: `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Supplies `data.cache`; its model must match the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Prepared dataset directory (overrides the config).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Where `{split}_scores.csv` and `{split}_curve.csv` are written.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblationArgs {
    /// `fusion` or `models`.
    table: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    runs: usize,
    /// Base seed; run r uses seed + r.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut seed = a.seed;
    let source = match (a.synth, a.from) {
        (Some(v), None) => {
            if let Some(s) = v.get(3) {
                seed = s.parse().with_context(|| format!("invalid seed `{s}`"))?;
            }
            DataSource::Synth {
                n_images: v[0]
                    .parse()
                    .with_context(|| format!("invalid image count `{}`", v[0]))?,
                size: v[1]
                    .parse()
                    .with_context(|| format!("invalid size `{}`", v[1]))?,
                transform: v[2].parse::<ModalityTransform>()?,
            }
        }
        (None, Some(dir)) => DataSource::Dir(dir),
        _ => bail!("gen-data needs exactly one of --synth or --from"),
    };
    let summary = gen_data(&source, seed, &a.out)?;
    let name = match &source {
        DataSource::Synth { .. } => "synthetic".to_string(),
        DataSource::Dir(d) => d
            .file_name()
            .map_or("dataset".into(), |n| n.to_string_lossy().into()),
    };
    print!("{}", summary.table(&name));
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.clone());
    let data = load_prepared(&cfg.data_cache)?;
    let tc = cfg.resolved_train(data.synthetic);
    let dir = RunDir::create(&out)?;
    if dir.metrics().exists() {
        fs::remove_file(dir.metrics())?;
    }
    fs::write(out.join("config.txt"), cfg.serialize())?;
    let mut trainer = Trainer::new(cfg.model, tc, data.stats)?;
    log::info!(
        "{} with {} parameters, {} epochs on {} training pairs",
        cfg.model.kind,
        cfg.model.param_count(),
        tc.epochs,
        data.train.len()
    );
    trainer.fit(&data.train, &data.val, tc.epochs, Some(&dir))?;
    println!(
        "best validation 95%ErrRate {:.4} after {} epochs; outputs in {}",
        trainer.best_val,
        trainer.epoch,
        out.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let split: Split = a.split.parse()?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let cfg = a
        .config
        .as_deref()
        .map(|p| load_config(Some(p)))
        .transpose()?;
    if let Some(c) = &cfg {
        if c.model != ck.spec {
            return Err(Error::Integrity {
                offset: 0,
                msg: format!(
                    "checkpoint holds {} / {} (width {}, bottleneck {}), config asks for {} / {} (width {}, bottleneck {})",
                    ck.spec.kind,
                    ck.spec.loss_mode,
                    ck.spec.tower.width_multiplier,
                    ck.spec.tower.bottleneck_multiplier,
                    c.model.kind,
                    c.model.loss_mode,
                    c.model.tower.width_multiplier,
                    c.model.tower.bottleneck_multiplier
                ),
            }
            .into());
        }
    }
    let data_dir = a
        .data
        .or_else(|| cfg.as_ref().map(|c| c.data_cache.clone()))
        .unwrap_or_else(|| ExperimentConfig::default().data_cache);
    let pairs = load_split(&data_dir, split, &ck.stats)?;
    let (model, store) = ck.restore()?;
    let report = evaluate(&model, &store, &pairs)?;
    let out = a.out.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    });
    fs::create_dir_all(&out)?;
    let mut scores = String::from("score,label\n");
    for (s, l) in &report.scores {
        let _ = writeln!(scores, "{s},{l}");
    }
    let mut curve = String::from("tpr,fpr\n");
    for (tpr, fpr) in &report.curve {
        let _ = writeln!(curve, "{tpr},{fpr}");
    }
    let stem = split.name();
    fs::write(out.join(format!("{stem}_scores.csv")), scores)?;
    fs::write(out.join(format!("{stem}_curve.csv")), curve)?;
    println!(
        "{stem}: {} positives, {} negatives, threshold {:.6}, 95%ErrRate {:.4}",
        report.n_pos, report.n_neg, report.threshold, report.err_rate_95
    );
    Ok(())
}

fn cmd_ablation(a: AblationArgs) -> Result<()> {
    let table: AblationTable = a.table.parse()?;
    let mut base = load_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        base.train.seed = s;
    }
    let out = a.out.unwrap_or_else(|| base.output_dir.join(&a.table));
    let data = load_prepared(&base.data_cache)?;
    let grid = cells(table, &base);
    fs::create_dir_all(&out)?;
    let results = run_cells(&grid, a.runs, &data, Some(&out))?;
    let text = format_table(&results);
    print!("{text}");
    fs::write(out.join("summary.txt"), &text)?;
    fs::write(out.join("summary.csv"), format_csv(&results))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablation(a) => cmd_ablation(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
