//! Turns a trained anomaly detector into training data: reliable positive
//! snippets from abnormal videos, hard negative snippets from normal videos,
//! threshold-based balancing, and the decay fallback for overconfident or
//! undertrained detectors.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Corpus, Split};
use crate::mil::score_video;
use crate::nn::ScorerModel;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MiningConfig {
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    /// Target positives:negatives ratio after balancing.
    pub balance_ratio: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { pos_threshold: 0.995, neg_threshold: 0.5, balance_ratio: 1.0, seed: 0 }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.neg_threshold > 0.0 && self.neg_threshold < self.pos_threshold && self.pos_threshold < 1.0) {
            return Err(Error::Config(format!(
                "mining: need 0 < neg_threshold ({}) < pos_threshold ({}) < 1",
                self.neg_threshold, self.pos_threshold
            )));
        }
        if self.balance_ratio <= 0.0 {
            return Err(Error::Config("mining: balance_ratio must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub video_id: String,
    pub snippet: usize,
    pub label: u8,
    pub score: f64,
    /// False for negatives added by the uniform fill rule.
    pub hard: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub checkpoint: String,
    pub pos_threshold: f64,
    pub neg_threshold: f64,
    pub balance_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleManifest {
    pub provenance: Provenance,
    pub entries: Vec<SampleEntry>,
}

impl SampleManifest {
    pub fn positives(&self) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(|e| e.label == 1)
    }

    pub fn negatives(&self) -> impl Iterator<Item = &SampleEntry> {
        self.entries.iter().filter(|e| e.label == 0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Json { path: path.into(), source: e })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Json { path: path.into(), source: e })
    }
}

/// Scores every abnormal training video and keeps snippets above the positive
/// threshold. Errors when nothing clears the bar (callers may fall back to
/// [`mine_positives_with_decay`]).
pub fn mine_positives(corpus: &Corpus, model: &ScorerModel, cfg: &MiningConfig) -> Result<Vec<SampleEntry>> {
    mine_class(corpus, model, true, cfg.pos_threshold).and_then(|entries| {
        if entries.is_empty() {
            Err(Error::Mining(format!(
                "no abnormal snippet scored above pos_threshold {}",
                cfg.pos_threshold
            )))
        } else {
            Ok(entries)
        }
    })
}

/// Snippets of normal training videos above the negative threshold. May be
/// empty; the balance step fills the shortfall.
pub fn mine_hard_negatives(corpus: &Corpus, model: &ScorerModel, cfg: &MiningConfig) -> Result<Vec<SampleEntry>> {
    mine_class(corpus, model, false, cfg.neg_threshold)
}

fn mine_class(corpus: &Corpus, model: &ScorerModel, abnormal: bool, threshold: f64) -> Result<Vec<SampleEntry>> {
    let mut entries = Vec::new();
    for rec in corpus.manifest.split(Split::Train) {
        if rec.is_abnormal() != abnormal {
            continue;
        }
        let features = corpus.load_features(rec)?;
        let scores = score_video(&features, model)?;
        for (i, &score) in scores.iter().enumerate() {
            if score > threshold {
                entries.push(SampleEntry {
                    video_id: rec.video_id.clone(),
                    snippet: i,
                    label: u8::from(abnormal),
                    score,
                    hard: true,
                });
            }
        }
    }
    Ok(entries)
}

/// Positive mining with the threshold-decay fallback: the threshold drops in
/// 0.005 steps (floor 0.9) until enough snippets clear it.
pub fn mine_positives_with_decay(
    corpus: &Corpus,
    model: &ScorerModel,
    cfg: &MiningConfig,
) -> Result<(Vec<SampleEntry>, f64)> {
    let abn_videos = corpus
        .manifest
        .split(Split::Train)
        .iter()
        .filter(|r| r.is_abnormal())
        .count();
    let target = abn_videos.max(10);
    let mut threshold = cfg.pos_threshold;
    loop {
        let entries = mine_class(corpus, model, true, threshold)?;
        if entries.len() >= target || threshold <= 0.9 {
            if entries.is_empty() {
                eprintln!("mining: threshold decayed to floor {threshold:.3} with no positives");
            } else if threshold < cfg.pos_threshold {
                eprintln!(
                    "mining: pos_threshold decayed {:.3} -> {threshold:.3} ({} positives)",
                    cfg.pos_threshold,
                    entries.len()
                );
            }
            return Ok((entries, threshold));
        }
        threshold = (threshold - 0.005).max(0.9);
    }
}

fn deterministic_order(entries: &mut [SampleEntry]) {
    // score desc, then video_id asc, then snippet asc
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.video_id.cmp(&b.video_id))
            .then(a.snippet.cmp(&b.snippet))
    });
}

/// Balances negatives against positives: truncates to the top-scored quantile
/// when oversupplied, fills with uniformly sampled non-selected normal
/// snippets (flagged non-hard) when short.
pub fn balance(
    corpus: &Corpus,
    model: &ScorerModel,
    positives: Vec<SampleEntry>,
    mut negatives: Vec<SampleEntry>,
    cfg: &MiningConfig,
    checkpoint: &str,
) -> Result<SampleManifest> {
    if positives.is_empty() {
        return Err(Error::Mining("balance requires at least one positive".into()));
    }
    let target = (positives.len() as f64 * cfg.balance_ratio).ceil() as usize;
    deterministic_order(&mut negatives);
    if negatives.len() > target {
        negatives.truncate(target);
    } else if negatives.len() < target {
        let selected: std::collections::HashSet<(String, usize)> =
            negatives.iter().map(|e| (e.video_id.clone(), e.snippet)).collect();
        let mut pool = Vec::new();
        for rec in corpus.manifest.split(Split::Train) {
            if rec.is_abnormal() {
                continue;
            }
            let t = rec.expected_num_snippets(corpus.manifest.snippet_len);
            for i in 0..t {
                if !selected.contains(&(rec.video_id.clone(), i)) {
                    pool.push((rec.video_id.clone(), i));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        pool.shuffle(&mut rng);
        let need = (target - negatives.len()).min(pool.len());
        // fills carry the model's score for audit purposes
        let mut score_cache: std::collections::HashMap<String, Vec<f64>> = std::collections::HashMap::new();
        for (video_id, snippet) in pool.into_iter().take(need) {
            if !score_cache.contains_key(&video_id) {
                let rec = corpus
                    .manifest
                    .split(Split::Train)
                    .iter()
                    .find(|r| r.video_id == video_id)
                    .expect("pool entry from train split");
                let features = corpus.load_features(rec)?;
                score_cache.insert(video_id.clone(), score_video(&features, model)?);
            }
            let score = score_cache[&video_id][snippet];
            negatives.push(SampleEntry { video_id, snippet, label: 0, score, hard: false });
        }
    }
    let mut entries = positives;
    entries.extend(negatives);
    Ok(SampleManifest {
        provenance: Provenance {
            checkpoint: checkpoint.to_string(),
            pos_threshold: cfg.pos_threshold,
            neg_threshold: cfg.neg_threshold,
            balance_ratio: cfg.balance_ratio,
        },
        entries,
    })
}

/// Mines positives (with decay fallback), hard negatives, and balances them
/// into a sample manifest.
pub fn run_mining(
    corpus: &Corpus,
    model: &ScorerModel,
    cfg: &MiningConfig,
    checkpoint: &str,
) -> Result<SampleManifest> {
    cfg.validate()?;
    let (positives, used_threshold) = mine_positives_with_decay(corpus, model, cfg)?;
    if positives.is_empty() {
        return Err(Error::Mining(format!(
            "no abnormal snippet scored above the threshold floor (started at {})",
            cfg.pos_threshold
        )));
    }
    let negatives = mine_hard_negatives(corpus, model, cfg)?;
    let mut manifest = balance(corpus, model, positives, negatives, cfg, checkpoint)?;
    manifest.provenance.pos_threshold = used_threshold;
    Ok(manifest)
}

/// Writes a derived corpus whose FVEC files hold the model's 128-d penultimate
/// activations instead of the raw features. Splits, labels, and spans carry
/// over unchanged; the manifest's `dim` becomes the head's second hidden width.
pub fn regenerate_features(corpus: &Corpus, model: &ScorerModel, out_dir: &Path) -> Result<crate::feature_store::DatasetManifest> {
    use crate::feature_store::{save_manifest, write_features, FeatureMatrix};
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut manifest = corpus.manifest.clone();
    manifest.dim = model.head.hidden2;
    for split in [Split::Train, Split::Val, Split::Test] {
        let records: Vec<usize> = (0..corpus.manifest.split(split).len()).collect();
        for idx in records {
            let rec = &corpus.manifest.split(split)[idx];
            let features = corpus.load_features(rec)?;
            let out = model.forward(&features.data, None);
            let t = features.data.rows();
            let mut rows = Vec::with_capacity(t);
            for i in 0..t {
                rows.push(out.head_cache.penultimate(i).to_vec());
            }
            let rel = format!("features/{}.fvec", rec.video_id);
            let path = out_dir.join(&rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            let matrix = FeatureMatrix::new(rec.video_id.clone(), crate::linalg::Mat::from_rows(&rows))?;
            write_features(&matrix, &path)?;
            let split_records = match split {
                Split::Train => &mut manifest.splits.train,
                Split::Val => &mut manifest.splits.val,
                Split::Test => &mut manifest.splits.test,
            };
            split_records[idx].feature_path = rel;
        }
    }
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}
