//! Supervised recognition-head training on labeled snippet samples: plain BCE
//! on the scorer head (optionally through the neck), with ground-truth-trimmed
//! or mined sample sources and several per-epoch representation choices.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::frame_auc_preloaded;
use crate::feature_store::{Corpus, FeatureMatrix, Split};
use crate::linalg::Mat;
use crate::mil::load_split_features;
use crate::mining::SampleManifest;
use crate::nn::{AdamState, ScorerModel};
use crate::temporal::{multiset_average, segment_boundaries};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    TrimmedGt,
    MinedManifest,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    AllSnippetMean,
    RandomSegment,
    SingleSnippet,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupConfig {
    pub mode: SampleMode,
    pub selection: Selection,
    pub use_neck: bool,
    /// 1 keeps the plain selection; larger values average that many sampled
    /// snippets per sample per epoch.
    pub multiset_sets: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Segment count for random_segment selection.
    pub num_segments: usize,
    /// Reduced segment count for single_snippet selection.
    pub single_snippet_segments: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for SupConfig {
    fn default() -> Self {
        SupConfig {
            mode: SampleMode::TrimmedGt,
            selection: Selection::AllSnippetMean,
            use_neck: false,
            multiset_sets: 1,
            epochs: 50,
            batch_size: 32,
            lr: 1e-5,
            plateau_factor: 0.1,
            plateau_patience: 5,
            num_segments: 32,
            single_snippet_segments: 8,
            hidden1: 512,
            hidden2: 128,
            dropout_rate: 0.7,
            weight_decay: 5e-4,
            seed: 0,
        }
    }
}

impl SupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::Config(format!("plateau_factor {} not in (0,1)", self.plateau_factor)));
        }
        if self.plateau_patience < 1 {
            return Err(Error::Config("plateau_patience must be at least 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.multiset_sets == 0 || self.num_segments == 0 || self.single_snippet_segments == 0 {
            return Err(Error::Config("set and segment counts must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate {} not in [0,1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// One labeled training sample: a run of snippets from a single video.
#[derive(Clone, Debug)]
pub struct SupSample {
    pub video_id: String,
    pub label: u8,
    /// Snippet indices of this sample within its source video.
    pub snippets: Vec<usize>,
    pub features: FeatureMatrix,
}

/// Builds the labeled sample list for the requested mode.
///
/// trimmed_gt: one positive sample per annotation span (its covered snippet
/// run) and one negative sample per whole normal video. mined_manifest: one
/// single-snippet sample per manifest entry.
pub fn build_supervised_samples(
    corpus: &Corpus,
    mode: SampleMode,
    sample_manifest: Option<&SampleManifest>,
) -> Result<Vec<SupSample>> {
    let snippet_len = corpus.manifest.snippet_len;
    let mut samples = Vec::new();
    match mode {
        SampleMode::TrimmedGt => {
            for rec in corpus.manifest.split(Split::Train) {
                let features = corpus.load_features(rec)?;
                let t = features.num_snippets();
                if rec.is_abnormal() {
                    if rec.spans.is_empty() {
                        return Err(Error::Mining(format!(
                            "trimmed_gt: abnormal video {} has no annotation spans",
                            rec.video_id
                        )));
                    }
                    for span in &rec.spans {
                        let lo = (span.start() / snippet_len) as usize;
                        let hi = (span.end().div_ceil(snippet_len) as usize).min(t);
                        let snippets: Vec<usize> = (lo..hi).collect();
                        if snippets.is_empty() {
                            continue;
                        }
                        samples.push(subsample(rec.video_id.clone(), 1, snippets, &features)?);
                    }
                } else {
                    samples.push(subsample(rec.video_id.clone(), 0, (0..t).collect(), &features)?);
                }
            }
        }
        SampleMode::MinedManifest => {
            let manifest = sample_manifest
                .ok_or_else(|| Error::Mining("mined_manifest mode requires a sample manifest".into()))?;
            let mut cache: std::collections::HashMap<String, FeatureMatrix> = std::collections::HashMap::new();
            for entry in &manifest.entries {
                if !cache.contains_key(&entry.video_id) {
                    let rec = corpus
                        .manifest
                        .split(Split::Train)
                        .iter()
                        .find(|r| r.video_id == entry.video_id)
                        .ok_or_else(|| {
                            Error::Mining(format!("sample manifest references unknown video {}", entry.video_id))
                        })?;
                    cache.insert(entry.video_id.clone(), corpus.load_features(rec)?);
                }
                let features = &cache[&entry.video_id];
                if entry.snippet >= features.num_snippets() {
                    return Err(Error::Mining(format!(
                        "sample manifest: snippet {} out of range for video {}",
                        entry.snippet, entry.video_id
                    )));
                }
                samples.push(subsample(entry.video_id.clone(), entry.label, vec![entry.snippet], features)?);
            }
        }
    }
    let pos = samples.iter().filter(|s| s.label == 1).count();
    let neg = samples.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Mining(format!("need both classes, got {pos} positive / {neg} negative samples")));
    }
    eprintln!("supervised samples: {pos} positive, {neg} negative");
    Ok(samples)
}

/// Whole-video sample list: every abnormal training video becomes one positive
/// sample covering all its snippets, every normal video one negative sample.
/// This is the untrimmed baseline the mined manifest is compared against.
pub fn build_whole_video_samples(corpus: &Corpus) -> Result<Vec<SupSample>> {
    let mut samples = Vec::new();
    for rec in corpus.manifest.split(Split::Train) {
        let features = corpus.load_features(rec)?;
        let t = features.num_snippets();
        samples.push(subsample(rec.video_id.clone(), rec.label, (0..t).collect(), &features)?);
    }
    Ok(samples)
}

fn subsample(video_id: String, label: u8, snippets: Vec<usize>, features: &FeatureMatrix) -> Result<SupSample> {
    let rows: Vec<Vec<f64>> = snippets.iter().map(|&i| features.data.row(i).to_vec()).collect();
    let matrix = FeatureMatrix::new(video_id.clone(), Mat::from_rows(&rows))?;
    Ok(SupSample { video_id, label, snippets, features: matrix })
}

/// Per-epoch representation of one sample under the configured selection.
fn representation(sample: &SupSample, cfg: &SupConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let t = sample.features.num_snippets();
    if cfg.multiset_sets > 1 {
        return multiset_average(&sample.features, cfg.multiset_sets, rng.gen());
    }
    match cfg.selection {
        Selection::AllSnippetMean => mean_of(&sample.features, &(0..t).collect::<Vec<_>>()),
        Selection::RandomSegment => {
            let bounds = segment_boundaries(t, cfg.num_segments.min(t));
            let seg = &bounds[rng.gen_range(0..bounds.len())];
            mean_of(&sample.features, &seg.clone().collect::<Vec<_>>())
        }
        Selection::SingleSnippet => {
            let bounds = segment_boundaries(t, cfg.single_snippet_segments.min(t));
            let picks: Vec<usize> = bounds.iter().map(|r| rng.gen_range(r.start..r.end.max(r.start + 1))).collect();
            mean_of(&sample.features, &picks)
        }
    }
}

fn mean_of(features: &FeatureMatrix, picks: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; features.dim()];
    let inv = 1.0 / picks.len() as f64;
    for &i in picks {
        for (m, &v) in mean.iter_mut().zip(features.data.row(i)) {
            *m += v * inv;
        }
    }
    mean
}

#[derive(Clone, Debug, Serialize)]
pub struct SupEpochRecord {
    pub epoch: usize,
    pub loss_bce: f64,
    pub val_metric: f64,
    pub lr: f64,
}

pub struct SupTrainState {
    pub model: ScorerModel,
    pub best_model: ScorerModel,
    pub best_val_metric: f64,
    pub best_epoch: usize,
    pub trace: Vec<SupEpochRecord>,
}

/// Trains the head (and neck when configured) with plain BCE over the sample
/// representations. The learning rate drops by `plateau_factor` when the
/// validation metric has not improved for `plateau_patience` epochs; the
/// metric is validation frame AUC when the val split carries frame labels,
/// else validation clip accuracy.
pub fn train_supervised(corpus: &Corpus, samples: &[SupSample], cfg: &SupConfig) -> Result<SupTrainState> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no supervised samples".into()));
    }
    let classes: std::collections::HashSet<u8> = samples.iter().map(|s| s.label).collect();
    if classes.len() < 2 {
        return Err(Error::Training("supervised training needs both classes".into()));
    }
    let dim = corpus.manifest.dim;
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ScorerModel::new(dim, cfg.hidden1, cfg.hidden2, cfg.dropout_rate, cfg.use_neck, &mut init_rng);
    let mut adam = AdamState::new(model.num_params(), cfg.lr, cfg.weight_decay);

    let val = load_split_features(corpus, Split::Val)?;
    let val_has_spans = val.iter().any(|(rec, _)| !rec.spans.is_empty());

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut select_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(3));

    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_model = model.clone();
    let mut plateau_wait = 0usize;
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_rows = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = model.zeros_like();
            let mut batch_loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = &samples[idx];
                let rep = representation(sample, cfg, &mut select_rng);
                let x = Mat::from_rows(std::slice::from_ref(&rep));
                let out = model.forward(&x, Some(&mut dropout_rng));
                let s = out.scores[0];
                let y = f64::from(sample.label);
                batch_loss -= (y * s.ln() + (1.0 - y) * (1.0 - s).ln()) * inv;
                // BCE at the logit: d/dz = s - y
                let d_logit = vec![(s - y) * inv];
                let d_score = vec![0.0];
                model.backward(&x, &out, &d_logit, &d_score, None, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite(format!("supervised loss at epoch {epoch}")));
            }
            epoch_loss += batch_loss * batch.len() as f64;
            epoch_rows += batch.len();
            let mut flat = model.flat_params();
            adam.step(&mut flat, &grads.flat_params())?;
            model.set_flat_params(&flat);
        }
        let epoch_loss = epoch_loss / epoch_rows as f64;

        let val_metric = if val_has_spans {
            frame_auc_preloaded(&val, corpus.manifest.snippet_len, &model)?
        } else {
            let clips: Vec<(&FeatureMatrix, u8)> = val.iter().map(|(rec, m)| (m, rec.label)).collect();
            clip_accuracy_ref(&model, &clips, cfg.multiset_sets, cfg.seed)?
        };
        trace.push(SupEpochRecord { epoch, loss_bce: epoch_loss, val_metric, lr: adam.lr });

        if val_metric > best_val + 1e-9 {
            best_val = val_metric;
            best_epoch = epoch;
            best_model = model.clone();
            plateau_wait = 0;
        } else {
            plateau_wait += 1;
            if plateau_wait >= cfg.plateau_patience {
                adam.lr *= cfg.plateau_factor;
                plateau_wait = 0;
            }
        }
    }
    Ok(SupTrainState { model, best_model, best_val_metric: best_val, best_epoch, trace })
}

/// Fraction of clips classified correctly: clip score is the head output on
/// the clip's multi-set mean feature (the exact all-snippet mean when
/// `multiset_sets` covers the clip), predicted positive iff score > 0.5.
pub fn clip_accuracy(
    model: &ScorerModel,
    clips: &[(FeatureMatrix, u8)],
    multiset_sets: usize,
    seed: u64,
) -> Result<f64> {
    let refs: Vec<(&FeatureMatrix, u8)> = clips.iter().map(|(m, l)| (m, *l)).collect();
    clip_accuracy_ref(model, &refs, multiset_sets, seed)
}

fn clip_accuracy_ref(
    model: &ScorerModel,
    clips: &[(&FeatureMatrix, u8)],
    multiset_sets: usize,
    seed: u64,
) -> Result<f64> {
    if clips.is_empty() {
        return Err(Error::UndefinedMetric("clip_accuracy on empty clip list".into()));
    }
    let mut correct = 0usize;
    for (i, (matrix, label)) in clips.iter().enumerate() {
        let t = matrix.num_snippets();
        let rep = if multiset_sets >= t {
            // exact all-snippet mean, natural summation order
            let all: Vec<usize> = (0..t).collect();
            mean_of(matrix, &all)
        } else {
            multiset_average(matrix, multiset_sets, seed.wrapping_add(i as u64))
        };
        let x = Mat::from_rows(std::slice::from_ref(&rep));
        let score = model.score_matrix(&x)[0];
        let predicted = u8::from(score > 0.5);
        if predicted == *label {
            correct += 1;
        }
    }
    Ok(correct as f64 / clips.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::{AnnotationSpan, DatasetManifest, Splits, VideoRecord};
    use crate::feature_store::write_features;
    use tempfile::tempdir;

    /// Small two-Gaussian corpus written straight to disk: abnormal span
    /// features sit at +shift, everything else at -shift.
    fn separable_corpus(dir: &std::path::Path, shift: f64) -> Corpus {
        let dim = 6;
        let snippet_len = 4u64;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut records = |split: &str, n_abn: usize, n_nrm: usize| -> Vec<VideoRecord> {
            let mut recs = Vec::new();
            for c in 0..2 {
                let (n, tag, label) = if c == 0 { (n_abn, "abn", 1u8) } else { (n_nrm, "nrm", 0u8) };
                for i in 0..n {
                    let video_id = format!("{tag}_{split}_{i}");
                    let t = 12usize;
                    let span_lo = 3usize;
                    let span_hi = 7usize;
                    let mut rows = Vec::new();
                    for s in 0..t {
                        let hot = label == 1 && (span_lo..span_hi).contains(&s);
                        let center = if hot { shift } else { -shift };
                        rows.push((0..dim).map(|_| center + rng.gen_range(-0.1..0.1)).collect::<Vec<f64>>());
                    }
                    let rel = format!("features/{video_id}.fvec");
                    std::fs::create_dir_all(dir.join("features")).unwrap();
                    let m = FeatureMatrix::new(video_id.clone(), Mat::from_rows(&rows)).unwrap();
                    write_features(&m, &dir.join(&rel)).unwrap();
                    let spans = if label == 1 {
                        vec![AnnotationSpan(span_lo as u64 * snippet_len, span_hi as u64 * snippet_len)]
                    } else {
                        Vec::new()
                    };
                    recs.push(VideoRecord {
                        video_id,
                        label,
                        num_frames: t as u64 * snippet_len,
                        spans,
                        feature_path: rel,
                    });
                }
            }
            recs
        };
        let manifest = DatasetManifest {
            name: "sep".into(),
            dim,
            snippet_len,
            splits: Splits {
                train: records("train", 6, 6),
                val: records("val", 2, 2),
                test: records("test", 2, 2),
            },
        };
        crate::feature_store::save_manifest(&manifest, &dir.join("manifest.json")).unwrap();
        Corpus::load(&dir.join("manifest.json")).unwrap()
    }

    fn quick_cfg() -> SupConfig {
        SupConfig { epochs: 30, lr: 1e-2, hidden1: 16, hidden2: 8, dropout_rate: 0.0, ..SupConfig::default() }
    }

    #[test]
    fn trimmed_positives_stay_inside_spans() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        for s in samples.iter().filter(|s| s.label == 1) {
            // spans cover snippets 3..7 by construction
            assert!(s.snippets.iter().all(|&i| (3..7).contains(&i)), "{:?}", s.snippets);
            assert_eq!(s.snippets.len(), 4);
        }
        let negatives: Vec<_> = samples.iter().filter(|s| s.label == 0).collect();
        assert_eq!(negatives.len(), 6);
        assert!(negatives.iter().all(|s| s.snippets.len() == 12));
    }

    #[test]
    fn separable_classes_reach_full_training_accuracy() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        let cfg = quick_cfg();
        let state = train_supervised(&corpus, &samples, &cfg).unwrap();
        let clips: Vec<(FeatureMatrix, u8)> = samples.iter().map(|s| (s.features.clone(), s.label)).collect();
        let acc = clip_accuracy(&state.best_model, &clips, usize::MAX, 0).unwrap();
        assert_eq!(acc, 1.0, "training accuracy {acc}");
    }

    #[test]
    fn plateau_schedule_reduces_lr() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        // strong enough training that val AUC saturates at 1.0 quickly, then
        // plateaus: lr must decay by the factor at least once
        let cfg = SupConfig { epochs: 20, plateau_patience: 3, ..quick_cfg() };
        let state = train_supervised(&corpus, &samples, &cfg).unwrap();
        let last_lr = state.trace.last().unwrap().lr;
        assert!(last_lr < cfg.lr * 0.11, "lr never decayed: {last_lr}");
    }

    #[test]
    fn same_seed_reproduces_training_exactly() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        let cfg = SupConfig { epochs: 5, dropout_rate: 0.5, ..quick_cfg() };
        let a = train_supervised(&corpus, &samples, &cfg).unwrap();
        let b = train_supervised(&corpus, &samples, &cfg).unwrap();
        assert_eq!(a.model.flat_params(), b.model.flat_params());
        assert_eq!(a.best_epoch, b.best_epoch);
    }

    #[test]
    fn all_snippet_mean_representation_is_selection_rng_independent() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        let cfg = SupConfig::default();
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(999);
        let a = representation(&samples[0], &cfg, &mut r1);
        let b = representation(&samples[0], &cfg, &mut r2);
        assert_eq!(a, b);
    }

    #[test]
    fn random_selections_draw_from_the_sample_only() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let samples = build_supervised_samples(&corpus, SampleMode::TrimmedGt, None).unwrap();
        let pos = samples.iter().find(|s| s.label == 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for selection in [Selection::RandomSegment, Selection::SingleSnippet] {
            let cfg = SupConfig { selection, single_snippet_segments: 2, ..SupConfig::default() };
            for _ in 0..20 {
                let rep = representation(pos, &cfg, &mut rng);
                // positive sample rows all sit near +1, so any mean of them does too
                assert!(rep.iter().all(|&v| v > 0.5), "{rep:?}");
            }
        }
    }

    #[test]
    fn clip_accuracy_tie_rule_counts_half_scores_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ScorerModel::new(4, 8, 4, 0.0, false, &mut rng).zeros_like();
        // zero model scores exactly 0.5 everywhere -> everything predicted 0
        let clips: Vec<(FeatureMatrix, u8)> = (0..4)
            .map(|i| {
                let m = Mat::from_rows(&[vec![i as f64; 4]]);
                (FeatureMatrix::new(format!("c{i}"), m).unwrap(), u8::from(i % 2 == 0))
            })
            .collect();
        let acc = clip_accuracy(&model, &clips, 1, 0).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn mined_manifest_mode_is_exact_passthrough() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let manifest = SampleManifest {
            provenance: crate::mining::Provenance {
                checkpoint: "x".into(),
                pos_threshold: 0.995,
                neg_threshold: 0.5,
                balance_ratio: 1.0,
            },
            entries: vec![
                crate::mining::SampleEntry { video_id: "abn_train_0".into(), snippet: 4, label: 1, score: 0.999, hard: true },
                crate::mining::SampleEntry { video_id: "nrm_train_0".into(), snippet: 0, label: 0, score: 0.7, hard: true },
            ],
        };
        let samples = build_supervised_samples(&corpus, SampleMode::MinedManifest, Some(&manifest)).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].snippets, vec![4]);
        assert_eq!(samples[0].label, 1);
        assert_eq!(samples[1].label, 0);
    }

    #[test]
    fn missing_class_rejected() {
        let dir = tempdir().unwrap();
        let corpus = separable_corpus(dir.path(), 1.0);
        let manifest = SampleManifest {
            provenance: crate::mining::Provenance {
                checkpoint: "x".into(),
                pos_threshold: 0.995,
                neg_threshold: 0.5,
                balance_ratio: 1.0,
            },
            entries: vec![crate::mining::SampleEntry {
                video_id: "abn_train_0".into(),
                snippet: 4,
                label: 1,
                score: 0.999,
                hard: true,
            }],
        };
        assert!(build_supervised_samples(&corpus, SampleMode::MinedManifest, Some(&manifest)).is_err());
    }
}
