//! Frame-level ROC AUC, average precision, clip accuracy, and report assembly.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{frame_labels_from_spans, Corpus, Split};
use crate::nn::ScorerModel;
use crate::temporal::expand_to_frames;

/// Rank-statistic ROC AUC with half credit for ties.
///
/// Equals P(score_pos > score_neg) + 1/2 P(score_pos = score_neg) over all
/// positive/negative pairs. Tie groups get their average rank, kept in exact
/// integer "double rank" units so that complementing the labels complements
/// the AUC exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("roc_auc needs both classes".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // sum of double-ranks (2x the average 1-based rank) over positives
    let mut double_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // tie group occupies ranks i+1..=j+1; average double-rank = (i+1)+(j+1)
        let group_double_rank = (i as u64 + 1) + (j as u64 + 1);
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                double_rank_sum += group_double_rank;
            }
        }
        i = j + 1;
    }
    // 2U = sum(2*rank_pos) - P(P+1)
    let num2 = double_rank_sum - pos * (pos + 1);
    let den2 = 2 * pos * neg;
    // branch keeps auc(labels) + auc(1 - labels) == 1 exact in f64
    let auc = if 2 * num2 <= den2 {
        num2 as f64 / den2 as f64
    } else {
        1.0 - (den2 - num2) as f64 / den2 as f64
    };
    Ok(auc)
}

/// Step-wise non-interpolated average precision; ties broken score desc then
/// index asc.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    assert_eq!(scores.len(), labels.len());
    let total_pos = labels.iter().filter(|&&l| l == 1).count();
    if total_pos == 0 {
        return Err(Error::UndefinedMetric("average_precision needs at least one positive".into()));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score at index {i}")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &idx) in order.iter().enumerate() {
        if labels[idx] == 1 {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(sum / total_pos as f64)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerVideoAuc {
    pub video_id: String,
    pub auc: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub frame_auc: f64,
    pub frame_map: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_accuracy: Option<f64>,
    pub per_video_auc: Vec<PerVideoAuc>,
    pub num_frames: usize,
    pub num_positive_frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config_echo: Option<serde_json::Value>,
}

/// Scores every video of a split with the model, expands snippet scores to
/// frames, and computes global frame AUC / AP plus per-video AUCs.
pub fn evaluate_frames(corpus: &Corpus, split: Split, model: &ScorerModel) -> Result<EvalReport> {
    let records = corpus.manifest.split(split);
    if records.is_empty() {
        return Err(Error::UndefinedMetric(format!("split {split} is empty")));
    }
    let snippet_len = corpus.manifest.snippet_len;
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    let mut per_video = Vec::new();
    for rec in records {
        let features = corpus.load_features(rec)?;
        let snippet_scores = model.score_matrix(&features.data);
        let frame_scores = expand_to_frames(&snippet_scores, snippet_len, rec.num_frames)?;
        let frame_labels = frame_labels_from_spans(rec)?;
        if let Ok(auc) = roc_auc(&frame_scores, &frame_labels) {
            per_video.push(PerVideoAuc { video_id: rec.video_id.clone(), auc });
        }
        all_scores.extend(frame_scores);
        all_labels.extend(frame_labels);
    }
    let num_positive = all_labels.iter().filter(|&&l| l == 1).count();
    if num_positive == 0 {
        return Err(Error::UndefinedMetric(format!("split {split} has no positive frame")));
    }
    Ok(EvalReport {
        split,
        frame_auc: roc_auc(&all_scores, &all_labels)?,
        frame_map: average_precision(&all_scores, &all_labels)?,
        clip_accuracy: None,
        per_video_auc: per_video,
        num_frames: all_labels.len(),
        num_positive_frames: num_positive,
        checkpoint: None,
        config_echo: None,
    })
}

/// Frame AUC over preloaded videos; used for the per-epoch validation check
/// inside the trainers where re-reading features from disk would dominate.
pub fn frame_auc_preloaded(
    videos: &[(crate::feature_store::VideoRecord, crate::feature_store::FeatureMatrix)],
    snippet_len: u64,
    model: &ScorerModel,
) -> Result<f64> {
    let mut all_scores = Vec::new();
    let mut all_labels = Vec::new();
    for (rec, features) in videos {
        let snippet_scores = model.score_matrix(&features.data);
        all_scores.extend(expand_to_frames(&snippet_scores, snippet_len, rec.num_frames)?);
        all_labels.extend(frame_labels_from_spans(rec)?);
    }
    roc_auc(&all_scores, &all_labels)
}

impl EvalReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), self)
            .map_err(|e| Error::Json { path: path.into(), source: e })
    }

    /// Flat one-row-per-metric CSV for plotting.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("frame_auc,{}\n", self.frame_auc));
        out.push_str(&format!("frame_map,{}\n", self.frame_map));
        if let Some(acc) = self.clip_accuracy {
            out.push_str(&format!("clip_accuracy,{acc}\n"));
        }
        for pv in &self.per_video_auc {
            out.push_str(&format!("video_auc:{},{}\n", pv.video_id, pv.auc));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}
