//! End-to-end experiment recipes: corpus preparation, the AD→mine→AR
//! iteration loop, ablation arms, and a deterministic machine-readable
//! summary (JSON + CSV) with the resolved config and input hash embedded.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::Serialize;

use crate::config::{content_hash, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{evaluate_frames, EvalReport};
use crate::feature_store::{Corpus, Split};
use crate::mil::{train_mil, MilConfig, TrainState};
use crate::mining::{regenerate_features, run_mining, SampleManifest};
use crate::nn::checkpoint::save_checkpoint;
use crate::supervised::{
    build_supervised_samples, build_whole_video_samples, train_supervised, SampleMode, SupSample,
    SupTrainState,
};
use crate::synthgen::generate_corpus;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Recipe {
    CompareAdAr,
    AblateNeck,
    Iterate,
    Single,
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compare_ad_ar" => Ok(Recipe::CompareAdAr),
            "ablate_neck" => Ok(Recipe::AblateNeck),
            "iterate" => Ok(Recipe::Iterate),
            "single" => Ok(Recipe::Single),
            other => Err(Error::Config(format!(
                "unknown recipe '{other}' (expected compare_ad_ar, ablate_neck, iterate, or single)"
            ))),
        }
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Recipe::CompareAdAr => "compare_ad_ar",
            Recipe::AblateNeck => "ablate_neck",
            Recipe::Iterate => "iterate",
            Recipe::Single => "single",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ArmResult {
    pub arm: String,
    pub test_frame_auc: f64,
    pub test_frame_map: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub extra: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ExperimentSummary {
    pub recipe: String,
    pub name: String,
    pub master_seed: u64,
    /// SHA-256 of the corpus manifest the run consumed.
    pub input_hash: String,
    pub config: serde_json::Value,
    pub rows: Vec<ArmResult>,
}

impl ExperimentSummary {
    pub fn write(&self, dir: &Path) -> Result<()> {
        let json_path = dir.join("summary.json");
        let file = std::fs::File::create(&json_path).map_err(|e| Error::io(&json_path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Json { path: json_path.clone(), source: e })?;

        let mut csv = String::from("recipe,arm,metric,value\n");
        for row in &self.rows {
            csv.push_str(&format!("{},{},test_frame_auc,{}\n", self.recipe, row.arm, row.test_frame_auc));
            csv.push_str(&format!("{},{},test_frame_map,{}\n", self.recipe, row.arm, row.test_frame_map));
            for (metric, value) in &row.extra {
                csv.push_str(&format!("{},{},{metric},{value}\n", self.recipe, row.arm));
            }
        }
        let csv_path = dir.join("summary.csv");
        std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))
    }
}

/// Loads the corpus at `corpus_dir/manifest.json`, generating it from the
/// synth config first when absent.
pub fn ensure_corpus(cfg: &RunConfig, corpus_dir: &Path) -> Result<Corpus> {
    let manifest_path = corpus_dir.join("manifest.json");
    if !manifest_path.is_file() {
        generate_corpus(&cfg.synth, corpus_dir)?;
    }
    Corpus::load(&manifest_path)
}

fn write_trace_jsonl<T: Serialize>(dir: &Path, arm: &str, trace: &[T]) -> Result<()> {
    let path = dir.join(format!("{arm}_trace.jsonl"));
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for record in trace {
        serde_json::to_writer(&mut w, record).map_err(|e| Error::Json { path: path.clone(), source: e })?;
        w.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

fn stamp_report(report: &mut EvalReport, checkpoint: &str, cfg: &RunConfig) {
    report.checkpoint = Some(checkpoint.to_string());
    report.config_echo = Some(cfg.echo());
}

/// Trains one MIL arm, saves its checkpoint / trace / test report, and
/// returns the state and report.
fn run_mil_arm(corpus: &Corpus, cfg: &RunConfig, mil_cfg: &MilConfig, arm: &str, dir: &Path) -> Result<(TrainState, EvalReport)> {
    let state = train_mil(corpus, mil_cfg)?;
    let ckpt_name = format!("{arm}.ckpt");
    save_checkpoint(&state.best_model, mil_cfg.seed, state.optimizer_steps, &dir.join(&ckpt_name))?;
    write_trace_jsonl(dir, arm, &state.trace)?;
    let mut report = evaluate_frames(corpus, Split::Test, &state.best_model)?;
    stamp_report(&mut report, &ckpt_name, cfg);
    report.write_json(&dir.join(format!("{arm}_report.json")))?;
    Ok((state, report))
}

fn run_sup_arm(
    corpus: &Corpus,
    cfg: &RunConfig,
    sup_cfg: &crate::supervised::SupConfig,
    samples: &[SupSample],
    arm: &str,
    dir: &Path,
) -> Result<(SupTrainState, EvalReport)> {
    let state = train_supervised(corpus, samples, sup_cfg)?;
    let ckpt_name = format!("{arm}.ckpt");
    save_checkpoint(&state.best_model, sup_cfg.seed, state.trace.len() as u64, &dir.join(&ckpt_name))?;
    write_trace_jsonl(dir, arm, &state.trace)?;
    let mut report = evaluate_frames(corpus, Split::Test, &state.best_model)?;
    stamp_report(&mut report, &ckpt_name, cfg);
    report.write_json(&dir.join(format!("{arm}_report.json")))?;
    Ok((state, report))
}

fn arm_row(arm: &str, report: &EvalReport) -> ArmResult {
    ArmResult {
        arm: arm.to_string(),
        test_frame_auc: report.frame_auc,
        test_frame_map: report.frame_map,
        extra: BTreeMap::new(),
    }
}

pub struct IterationOutput {
    pub ad_state: TrainState,
    pub samples: SampleManifest,
    pub ar_state: SupTrainState,
    pub ad_report: EvalReport,
    pub ar_report: EvalReport,
}

/// One full AD→mine→AR cycle on `corpus`, writing all artifacts with the
/// iteration index in their names.
pub fn run_iteration(corpus: &Corpus, cfg: &RunConfig, iter_index: usize, dir: &Path) -> Result<IterationOutput> {
    let mut mil_cfg = cfg.mil.clone();
    mil_cfg.seed = cfg.mil.seed.wrapping_add(iter_index as u64);
    let ad_arm = format!("iter{iter_index}_ad");
    let (ad_state, ad_report) = run_mil_arm(corpus, cfg, &mil_cfg, &ad_arm, dir)?;

    let samples = run_mining(corpus, &ad_state.best_model, &cfg.mining, &format!("{ad_arm}.ckpt"))?;
    samples.save(&dir.join(format!("iter{iter_index}_samples.json")))?;

    let mut sup_cfg = cfg.sup.clone();
    sup_cfg.mode = SampleMode::MinedManifest;
    sup_cfg.seed = cfg.sup.seed.wrapping_add(iter_index as u64);
    let sup_samples = build_supervised_samples(corpus, SampleMode::MinedManifest, Some(&samples))?;
    let ar_arm = format!("iter{iter_index}_ar");
    let (ar_state, ar_report) = run_sup_arm(corpus, cfg, &sup_cfg, &sup_samples, &ar_arm, dir)?;

    Ok(IterationOutput { ad_state, samples, ar_state, ad_report, ar_report })
}

/// Runs a recipe end to end and writes `summary.json` / `summary.csv` into
/// `out_dir`. Returns the summary for programmatic checks.
pub fn run_experiment(recipe: Recipe, cfg: &RunConfig, corpus_dir: &Path, out_dir: &Path) -> Result<ExperimentSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let corpus = ensure_corpus(cfg, corpus_dir)?;
    let input_hash = content_hash(&corpus.base_dir.join("manifest.json"))?;
    let mut rows = Vec::new();

    match recipe {
        Recipe::Single => {
            let (_, report) = run_mil_arm(&corpus, cfg, &cfg.mil, "mil", out_dir)?;
            rows.push(arm_row("mil", &report));
        }
        Recipe::AblateNeck => {
            for (arm, use_neck) in [("mil_neck", true), ("mil_no_neck", false)] {
                let mut mil_cfg = cfg.mil.clone();
                mil_cfg.use_neck = use_neck;
                let (_, report) = run_mil_arm(&corpus, cfg, &mil_cfg, arm, out_dir)?;
                rows.push(arm_row(arm, &report));
            }
        }
        Recipe::CompareAdAr => {
            for (arm, use_neck) in [("mil_neck", true), ("mil_no_neck", false)] {
                let mut mil_cfg = cfg.mil.clone();
                mil_cfg.use_neck = use_neck;
                let (_, report) = run_mil_arm(&corpus, cfg, &mil_cfg, arm, out_dir)?;
                rows.push(arm_row(arm, &report));
            }
            let trimmed = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None)?;
            for (arm, selection) in [
                ("ar_trimmed_mean", crate::supervised::Selection::AllSnippetMean),
                ("ar_single_snippet", crate::supervised::Selection::SingleSnippet),
            ] {
                let mut sup_cfg = cfg.sup.clone();
                sup_cfg.mode = SampleMode::TrimmedGt;
                sup_cfg.selection = selection;
                let (state, report) = run_sup_arm(&corpus, cfg, &sup_cfg, &trimmed, arm, out_dir)?;
                let mut row = arm_row(arm, &report);
                row.extra.insert("best_val_metric".into(), state.best_val_metric);
                rows.push(row);
            }
        }
        Recipe::Iterate => {
            // untrimmed baseline first: the same head trained with
            // whole-abnormal-video positive labels
            let baseline_samples = build_whole_video_samples(&corpus)?;
            let mut base_cfg = cfg.sup.clone();
            base_cfg.mode = SampleMode::TrimmedGt;
            let (_, base_report) = run_sup_arm(&corpus, cfg, &base_cfg, &baseline_samples, "ar_whole_video", out_dir)?;
            rows.push(arm_row("ar_whole_video", &base_report));

            let mut current: Corpus = corpus.clone();
            for it in 0..cfg.iterations {
                let output = run_iteration(&current, cfg, it, out_dir)?;
                let mut ad_row = arm_row(&format!("iter{it}_ad"), &output.ad_report);
                if let Some(auc) = output.ad_state.best_val_auc {
                    ad_row.extra.insert("best_val_auc".into(), auc);
                }
                rows.push(ad_row);
                let mut ar_row = arm_row(&format!("iter{it}_ar"), &output.ar_report);
                ar_row.extra.insert("mined_positives".into(), output.samples.positives().count() as f64);
                ar_row.extra.insert("mined_negatives".into(), output.samples.negatives().count() as f64);
                rows.push(ar_row);

                if it + 1 < cfg.iterations {
                    let regen_dir = out_dir.join(format!("regen_iter{}", it + 1));
                    regenerate_features(&current, &output.ar_state.best_model, &regen_dir)?;
                    current = Corpus::load(&regen_dir.join("manifest.json"))?;
                }
            }
        }
    }

    let summary = ExperimentSummary {
        recipe: recipe.to_string(),
        name: cfg.name.clone(),
        master_seed: cfg.master_seed,
        input_hash,
        config: cfg.echo(),
        rows,
    };
    summary.write(out_dir)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_parsing_round_trips() {
        for name in ["compare_ad_ar", "ablate_neck", "iterate", "single"] {
            let recipe: Recipe = name.parse().unwrap();
            assert_eq!(recipe.to_string(), name);
        }
        assert!("nope".parse::<Recipe>().is_err());
    }
}
