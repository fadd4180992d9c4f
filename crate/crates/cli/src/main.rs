use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use hsae_core::checkpoint::{load_checkpoint, save_checkpoint};
use hsae_core::data::{synthetic_generate, Manifest, SyntheticForest};
use hsae_core::export::{activation_frequencies, tree_document, tree_dot, TreeFormat};
use hsae_core::metrics::{build_report, DEFAULT_EVAL_ROWS};
use hsae_core::seed::derive_seed;
use hsae_core::training::training_stream;
use hsae_core::{TrainMode, Trainer};

mod config;

use config::{config_diff, Config};

const EVAL_CHUNK: usize = 4096;

#[derive(Parser)]
#[command(name = "hsae", version, about = "Hierarchical sparse autoencoder toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Hsae,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forest dataset (train and eval shards plus truth).
    Gen { config: PathBuf },
    /// Train a model on a manifest's shards.
    Train {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "hsae")]
        mode: Mode,
        /// Pin every kernel to a single thread and record the flag in the config.
        #[arg(long)]
        deterministic: bool,
        /// Continue from a checkpoint; the config must match it.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Defaults to `<data.dir>/train-manifest.json`.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Defaults to `training.out_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and print the metrics report as JSON.
    Eval {
        checkpoint: PathBuf,
        manifest: PathBuf,
        /// Planted forest (`truth.json`); adds the recovery block.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EVAL_ROWS)]
        max_rows: usize,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export the learned feature forest.
    ExportTree {
        checkpoint: PathBuf,
        #[arg(long, default_value = "json")]
        format: String,
        /// Manifest whose rows supply per-feature activation frequencies.
        #[arg(long)]
        stats: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_EVAL_ROWS)]
        max_rows: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { config } => cmd_gen(&config),
        Command::Train {
            config,
            mode,
            deterministic,
            resume,
            manifest,
            out,
        } => cmd_train(&config, mode, deterministic, resume.as_deref(), manifest, out),
        Command::Eval {
            checkpoint,
            manifest,
            truth,
            max_rows,
            out,
        } => cmd_eval(&checkpoint, &manifest, truth.as_deref(), max_rows, out.as_deref()),
        Command::ExportTree {
            checkpoint,
            format,
            stats,
            max_rows,
            out,
        } => cmd_export_tree(&checkpoint, &format, stats.as_deref(), max_rows, out.as_deref()),
    }
}

fn cmd_gen(config_path: &Path) -> Result<()> {
    let cfg = Config::load(config_path)?;
    let data = &cfg.data;
    let dir = cfg.data_dir();
    let forest = SyntheticForest::build(data.forest, derive_seed(data.seed, "forest", &[]))?;
    let train = synthetic_generate(
        &forest,
        data.train_rows,
        derive_seed(data.seed, "train", &[]),
        &dir,
        "train",
        data.rows_per_shard,
    )?;
    if data.eval_rows > 0 {
        let mut eval = synthetic_generate(
            &forest,
            data.eval_rows,
            derive_seed(data.seed, "eval", &[]),
            &dir,
            "eval",
            data.rows_per_shard,
        )?;
        // Held-out rows share the training normalization.
        eval.manifest.scaler = train.manifest.scaler;
        eval.manifest.save(&eval.manifest_path)?;
    }
    println!("{}", train.manifest_path.display());
    Ok(())
}

fn cmd_train(
    config_path: &Path,
    mode: Mode,
    deterministic: bool,
    resume: Option<&Path>,
    manifest: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let cfg = Config::load(config_path)?;
    let tc = cfg.train_config(deterministic)?;
    let mode = match mode {
        Mode::Hsae => TrainMode::Hsae,
        Mode::Baseline => TrainMode::Baseline,
    };
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build_global()
            .context("configuring a single-threaded pool")?;
    }
    let manifest_path = manifest.unwrap_or_else(|| cfg.data_dir().join("train-manifest.json"));
    let manifest = Manifest::load(&manifest_path)?;
    let source = manifest.open()?;
    let out_dir = out.unwrap_or_else(|| cfg.out_dir());
    std::fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;

    let (mut trainer, cursor) = match resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            let mut diff = config_diff(&ck.trainer.config, &tc)?;
            if ck.trainer.mode != mode {
                diff.insert(0, format!("mode: {:?} -> {:?}", ck.trainer.mode, mode));
            }
            if !diff.is_empty() {
                bail!("resume config mismatch: {}", diff.join("; "));
            }
            let mut t = ck.trainer;
            t.config.deterministic = deterministic;
            (t, ck.cursor)
        }
        None => (Trainer::new(tc.clone(), mode, manifest.d)?, None),
    };
    if trainer.levels[0].input_dim() != manifest.d {
        bail!(
            "checkpoint expects d={}, manifest has d={}",
            trainer.levels[0].input_dim(),
            manifest.d
        );
    }
    let mut stream = training_stream(&trainer.config, source)?;
    if let Some(c) = cursor {
        stream.seek(c)?;
    }

    let history_path = out_dir.join("history.ndjson");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&history_path)
        .with_context(|| format!("opening {}", history_path.display()))?;
    let mut history = BufWriter::new(file);
    let total = trainer.config.total_steps;
    let interval = cfg.training.checkpoint_interval;
    while trainer.step < total {
        let until = if interval > 0 {
            ((trainer.step / interval + 1) * interval).min(total)
        } else {
            total
        };
        let mut write_err = None;
        trainer.run_until(&mut stream, until, |_, m| {
            for r in m.records() {
                if let Err(e) = serde_json::to_writer(&mut history, &r)
                    .map_err(anyhow::Error::from)
                    .and_then(|_| history.write_all(b"\n").map_err(anyhow::Error::from))
                {
                    write_err.get_or_insert(e);
                }
            }
            Ok(())
        })?;
        if let Some(e) = write_err {
            return Err(e.context(format!("writing {}", history_path.display())));
        }
        if interval > 0 && trainer.step < total {
            let p = out_dir.join(format!("step-{:08}.ckpt", trainer.step));
            save_checkpoint(&trainer, Some(stream.cursor()), &p)?;
        }
    }
    history.flush().with_context(|| format!("writing {}", history_path.display()))?;
    trainer.finish()?;
    let final_path = out_dir.join("final.ckpt");
    save_checkpoint(&trainer, Some(stream.cursor()), &final_path)?;
    println!("{}", final_path.display());
    Ok(())
}

fn cmd_eval(ckpt: &Path, manifest: &Path, truth: Option<&Path>, max_rows: usize, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(ckpt)?;
    let manifest = Manifest::load(manifest)?;
    let source = manifest.open()?;
    let forest = truth.map(SyntheticForest::load).transpose()?;
    let t = &ck.trainer;
    let mut report = build_report(&t.levels, &t.hierarchy, &source, max_rows, EVAL_CHUNK, forest.as_ref())?;
    report.config = Some(serde_json::to_value(&t.config)?);
    emit(&report.to_json()?, out)
}

fn cmd_export_tree(ckpt: &Path, format: &str, stats: Option<&Path>, max_rows: usize, out: Option<&Path>) -> Result<()> {
    let format: TreeFormat = format.parse()?;
    let ck = load_checkpoint(ckpt)?;
    let t = &ck.trainer;
    let freqs = match stats {
        Some(p) => {
            let source = Manifest::load(p)?.open()?;
            Some(activation_frequencies(&t.levels, &source, max_rows, EVAL_CHUNK)?)
        }
        None => None,
    };
    let doc = tree_document(&t.hierarchy, &t.config.dict_sizes, freqs.as_deref())?;
    let text = match format {
        TreeFormat::Json => doc.to_json()? + "\n",
        TreeFormat::Dot => tree_dot(&doc),
    };
    emit(&text, out)
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            let tmp = p.with_extension("partial");
            std::fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
            std::fs::rename(&tmp, p).with_context(|| format!("writing {}", p.display()))
        }
        None => {
            let mut so = std::io::stdout().lock();
            so.write_all(text.as_bytes())?;
            so.flush()?;
            Ok(())
        }
    }
}
