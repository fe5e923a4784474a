use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use magmine::config::RunConfig;
use magmine::eval::evaluate_frames;
use magmine::experiment::{run_experiment, Recipe};
use magmine::feature_store::{read_header, Corpus, Split};
use magmine::mil::train_mil;
use magmine::mining::{run_mining, SampleManifest};
use magmine::nn::checkpoint::{load_checkpoint, save_checkpoint};
use magmine::supervised::{build_supervised_samples, train_supervised, SampleMode};
use magmine::synthgen::generate_corpus;

#[derive(Parser)]
#[command(name = "magmine", version, about = "Weakly supervised video anomaly detection on precomputed snippet features")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Dotted-path config override, e.g. --set mil.lr=1e-3 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generates a synthetic corpus (features + manifest + ground truth).
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the MIL anomaly detector.
    TrainAd {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory for checkpoint, trace, and report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains the supervised recognition head.
    TrainAr {
        #[arg(long)]
        manifest: PathBuf,
        /// Mined sample manifest; switches the mode to mined_manifest.
        #[arg(long)]
        samples: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mines positive/negative snippets from a trained detector.
    Mine {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Output sample manifest (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluates a checkpoint on a split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs the AD→mine→AR iteration loop.
    Iterate {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Runs a named experiment recipe end to end.
    Experiment {
        /// compare_ad_ar, ablate_neck, iterate, or single.
        #[arg(long)]
        recipe: String,
        /// Corpus directory; generated from the synth config when empty.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prints FVEC headers or manifest statistics.
    Inspect {
        path: PathBuf,
    },
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Ok(threads) = std::env::var("MAGMINE_THREADS") {
        let _: usize = threads.parse().context("MAGMINE_THREADS must be an integer")?;
        // execution is single-threaded; the cap is accepted for compatibility
    }
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for spec in &cli.overrides {
        cfg.apply_override(spec)?;
    }
    cfg.resolve_seeds();

    match cli.cmd {
        Cmd::Synth { out } => {
            let manifest = generate_corpus(&cfg.synth, &out)?;
            println!(
                "wrote corpus '{}' to {}: {} train / {} val / {} test videos, dim {}",
                manifest.name,
                out.display(),
                manifest.splits.train.len(),
                manifest.splits.val.len(),
                manifest.splits.test.len(),
                manifest.dim
            );
        }
        Cmd::TrainAd { manifest, out } => {
            let corpus = Corpus::load(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let state = train_mil(&corpus, &cfg.mil)?;
            let ckpt = out.join("ad.ckpt");
            save_checkpoint(&state.best_model, cfg.mil.seed, state.optimizer_steps, &ckpt)?;
            write_jsonl(&out.join("ad_trace.jsonl"), &state.trace)?;
            let mut report = evaluate_frames(&corpus, Split::Test, &state.best_model)?;
            report.checkpoint = Some("ad.ckpt".into());
            report.config_echo = Some(cfg.echo());
            report.write_json(&out.join("ad_report.json"))?;
            println!(
                "trained AD: best epoch {}, val frame AUC {:?}, test frame AUC {:.4}",
                state.best_epoch, state.best_val_auc, report.frame_auc
            );
        }
        Cmd::TrainAr { manifest, samples, out } => {
            let corpus = Corpus::load(&manifest)?;
            std::fs::create_dir_all(&out)?;
            let mut sup_cfg = cfg.sup.clone();
            let sample_manifest = samples.as_deref().map(SampleManifest::load).transpose()?;
            if sample_manifest.is_some() {
                sup_cfg.mode = SampleMode::MinedManifest;
            }
            let sup_samples = build_supervised_samples(&corpus, sup_cfg.mode, sample_manifest.as_ref())?;
            let state = train_supervised(&corpus, &sup_samples, &sup_cfg)?;
            let ckpt = out.join("ar.ckpt");
            save_checkpoint(&state.best_model, sup_cfg.seed, state.trace.len() as u64, &ckpt)?;
            write_jsonl(&out.join("ar_trace.jsonl"), &state.trace)?;
            let mut report = evaluate_frames(&corpus, Split::Test, &state.best_model)?;
            report.checkpoint = Some("ar.ckpt".into());
            report.config_echo = Some(cfg.echo());
            report.write_json(&out.join("ar_report.json"))?;
            println!(
                "trained AR: best epoch {}, val metric {:.4}, test frame AUC {:.4}",
                state.best_epoch, state.best_val_metric, report.frame_auc
            );
        }
        Cmd::Mine { manifest, ckpt, out } => {
            let corpus = Corpus::load(&manifest)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let ckpt_name = ckpt.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mined = run_mining(&corpus, &model, &cfg.mining, &ckpt_name)?;
            mined.save(&out)?;
            println!(
                "mined {} positives, {} negatives -> {}",
                mined.positives().count(),
                mined.negatives().count(),
                out.display()
            );
        }
        Cmd::Eval { manifest, ckpt, split, out } => {
            let corpus = Corpus::load(&manifest)?;
            let (model, _) = load_checkpoint(&ckpt)?;
            let split = parse_split(&split)?;
            let mut report = evaluate_frames(&corpus, split, &model)?;
            report.checkpoint = ckpt.file_name().map(|n| n.to_string_lossy().into_owned());
            report.config_echo = Some(cfg.echo());
            report.write_json(&out)?;
            println!("{split} frame AUC {:.4}, frame mAP {:.4}", report.frame_auc, report.frame_map);
        }
        Cmd::Iterate { manifest, iters, out } => {
            if let Some(n) = iters {
                cfg.iterations = n;
            }
            let corpus_dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
            let summary = run_experiment(Recipe::Iterate, &cfg, &corpus_dir, &out)?;
            print_summary_rows(&summary.rows);
        }
        Cmd::Experiment { recipe, corpus, out } => {
            let recipe: Recipe = recipe.parse()?;
            let summary = run_experiment(recipe, &cfg, &corpus, &out)?;
            print_summary_rows(&summary.rows);
        }
        Cmd::Inspect { path } => inspect(&cfg, &path)?,
    }
    Ok(())
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => bail!("unknown split '{other}' (expected train, val, or test)"),
    }
}

fn write_jsonl<T: serde::Serialize>(path: &Path, records: &[T]) -> anyhow::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn print_summary_rows(rows: &[magmine::experiment::ArmResult]) {
    for row in rows {
        println!("{}: test frame AUC {:.4}, mAP {:.4}", row.arm, row.test_frame_auc, row.test_frame_map);
    }
}

fn inspect(_cfg: &RunConfig, path: &Path) -> anyhow::Result<()> {
    if path.extension().is_some_and(|e| e == "fvec") {
        let (t, d) = read_header(path)?;
        println!("{}: {t} snippets x {d} dims", path.display());
        return Ok(());
    }
    let corpus = Corpus::load(path).with_context(|| format!("{} is neither FVEC nor a manifest", path.display()))?;
    let m = &corpus.manifest;
    println!("corpus '{}': dim {}, snippet_len {}", m.name, m.dim, m.snippet_len);
    for split in [Split::Train, Split::Val, Split::Test] {
        let recs = m.split(split);
        let abn = recs.iter().filter(|r| r.is_abnormal()).count();
        let frames: u64 = recs.iter().map(|r| r.num_frames).sum();
        println!("  {split}: {} videos ({abn} abnormal), {frames} frames", recs.len());
    }
    Ok(())
}
