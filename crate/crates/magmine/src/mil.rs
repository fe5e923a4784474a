//! Weakly supervised MIL training with the four-term objective: binary cross
//! entropy on the top-k magnitude segments, the feature-magnitude margin
//! hinge on paired abnormal/normal videos, and temporal smoothness / sparsity
//! on the abnormal score vectors.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::frame_auc_preloaded;
use crate::feature_store::{Corpus, FeatureMatrix, Split, VideoRecord};
use crate::linalg::Mat;
use crate::nn::{AdamState, ModelOutput, ScorerModel};
use crate::temporal::aggregate_segments;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MilConfig {
    /// Top-k magnitude segments used for selection and the margin loss.
    pub k: usize,
    pub margin: f64,
    pub lambda_smooth: f64,
    pub lambda_sparse: f64,
    pub num_segments: usize,
    pub batch_pairs: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden1: usize,
    pub hidden2: usize,
    pub dropout_rate: f64,
    pub use_neck: bool,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig {
            k: 3,
            margin: 100.0,
            lambda_smooth: 8e-5,
            lambda_sparse: 8e-5,
            num_segments: 32,
            batch_pairs: 16,
            epochs: 100,
            lr: 1e-3,
            weight_decay: 5e-4,
            hidden1: 512,
            hidden2: 128,
            dropout_rate: 0.7,
            use_neck: true,
            seed: 0,
        }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > self.num_segments {
            return Err(Error::Config(format!(
                "mil: k={} must be in 1..={}",
                self.k, self.num_segments
            )));
        }
        if self.margin <= 0.0 {
            return Err(Error::Config("mil: margin must be > 0".into()));
        }
        if self.lambda_smooth < 0.0 || self.lambda_sparse < 0.0 {
            return Err(Error::Config("mil: loss weights must be >= 0".into()));
        }
        if self.batch_pairs == 0 || self.epochs == 0 {
            return Err(Error::Config("mil: batch_pairs and epochs must be >= 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("mil: lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Indices of the k largest values (ties resolved to the lower index) and
/// their mean.
pub fn topk_select(magnitudes: &[f64], k: usize) -> (Vec<usize>, f64) {
    assert!(k >= 1 && k <= magnitudes.len(), "k out of range");
    let mut order: Vec<usize> = (0..magnitudes.len()).collect();
    order.sort_by(|&a, &b| magnitudes[b].partial_cmp(&magnitudes[a]).unwrap().then(a.cmp(&b)));
    order.truncate(k);
    let mean = order.iter().map(|&i| magnitudes[i]).sum::<f64>() / k as f64;
    (order, mean)
}

/// Eq-style margin hinge on the top-k magnitude gap: active only for an
/// (abnormal, normal) pair.
pub fn magnitude_loss(mag_abnormal: f64, mag_normal: f64, y_i: u8, y_j: u8, margin: f64) -> f64 {
    if (y_i, y_j) == (1, 0) {
        (margin - (mag_abnormal - mag_normal)).max(0.0)
    } else {
        0.0
    }
}

/// Sum of squared adjacent score differences.
pub fn smoothness_loss(scores: &[f64]) -> f64 {
    scores.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum()
}

/// Mean score.
pub fn sparsity_loss(scores: &[f64]) -> f64 {
    scores.iter().sum::<f64>() / scores.len() as f64
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub magnitude: f64,
    pub smoothness: f64,
    pub sparsity: f64,
}

impl LossBreakdown {
    fn accumulate(&mut self, other: &LossBreakdown) {
        self.total += other.total;
        self.bce += other.bce;
        self.magnitude += other.magnitude;
        self.smoothness += other.smoothness;
        self.sparsity += other.sparsity;
    }

    fn scale(&mut self, c: f64) {
        self.total *= c;
        self.bce *= c;
        self.magnitude *= c;
        self.smoothness *= c;
        self.sparsity *= c;
    }
}

struct VideoPass<'a> {
    features: &'a Mat,
    out: ModelOutput,
    topk: Vec<usize>,
    mean_mag: f64,
}

/// Loss (and optionally gradients) of one paired batch. `abnormal` and
/// `normal` must have equal length; pairing for the margin term is by batch
/// position.
pub fn batch_loss(
    model: &ScorerModel,
    abnormal: &[&Mat],
    normal: &[&Mat],
    cfg: &MilConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
    grads: Option<&mut ScorerModel>,
) -> Result<LossBreakdown> {
    assert_eq!(abnormal.len(), normal.len(), "batch pairing mismatch");
    let pairs = abnormal.len();
    assert!(pairs > 0);
    let k = cfg.k;

    fn run<'a>(
        model: &ScorerModel,
        features: &[&'a Mat],
        k: usize,
        dropout_rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Vec<VideoPass<'a>> {
        features
            .iter()
            .map(|f| {
                let out = model.forward(f, dropout_rng.as_deref_mut());
                let (topk, mean_mag) = topk_select(&out.magnitudes, k);
                VideoPass { features: f, out, topk, mean_mag }
            })
            .collect()
    }
    let abn: Vec<VideoPass<'_>> = run(model, abnormal, k, &mut dropout_rng);
    let nrm: Vec<VideoPass<'_>> = run(model, normal, k, &mut dropout_rng);

    let num_videos = 2 * pairs;
    let mut breakdown = LossBreakdown::default();
    for (pass, is_abnormal) in abn.iter().map(|p| (p, true)).chain(nrm.iter().map(|p| (p, false))) {
        let mut bce = 0.0;
        for &j in &pass.topk {
            let s = pass.out.scores[j];
            bce -= if is_abnormal { s.ln() } else { (1.0 - s).ln() };
        }
        breakdown.bce += bce / (k * num_videos) as f64;
        if is_abnormal {
            breakdown.smoothness += smoothness_loss(&pass.out.scores) / pairs as f64;
            breakdown.sparsity += sparsity_loss(&pass.out.scores) / pairs as f64;
        }
    }
    for (a, n) in abn.iter().zip(&nrm) {
        breakdown.magnitude += magnitude_loss(a.mean_mag, n.mean_mag, 1, 0, cfg.margin) / pairs as f64;
    }
    breakdown.total = breakdown.bce
        + breakdown.magnitude
        + cfg.lambda_smooth * breakdown.smoothness
        + cfg.lambda_sparse * breakdown.sparsity;
    if !breakdown.total.is_finite() {
        return Err(Error::NonFinite(format!("batch loss: {breakdown:?}")));
    }

    let Some(grads) = grads else {
        return Ok(breakdown);
    };

    for (pair_idx, (pass, is_abnormal)) in
        abn.iter().map(|p| (p, true)).chain(nrm.iter().map(|p| (p, false))).enumerate()
    {
        let s_count = pass.out.scores.len();
        let mut d_logit = vec![0.0; s_count];
        let mut d_score = vec![0.0; s_count];
        // BCE on the selected segments, at the logit
        let w_bce = 1.0 / (k * num_videos) as f64;
        for &j in &pass.topk {
            let s = pass.out.scores[j];
            d_logit[j] += w_bce * if is_abnormal { s - 1.0 } else { s };
        }
        // smoothness + sparsity on abnormal score vectors
        if is_abnormal {
            let scores = &pass.out.scores;
            let w_sm = cfg.lambda_smooth / pairs as f64;
            let w_sp = cfg.lambda_sparse / (pairs * s_count) as f64;
            for j in 0..s_count {
                let mut d = 0.0;
                if j > 0 {
                    d += 2.0 * (scores[j] - scores[j - 1]);
                }
                if j + 1 < s_count {
                    d -= 2.0 * (scores[j + 1] - scores[j]);
                }
                d_score[j] += w_sm * d + w_sp;
            }
        }
        // margin hinge: subgradient flows only into the selected rows
        let partner = if is_abnormal { &nrm[pair_idx] } else { &abn[pair_idx - pairs] };
        let (mag_a, mag_n, sign) = if is_abnormal {
            (pass.mean_mag, partner.mean_mag, -1.0)
        } else {
            (partner.mean_mag, pass.mean_mag, 1.0)
        };
        let active = magnitude_loss(mag_a, mag_n, 1, 0, cfg.margin) > 0.0;
        let mut d_neck = Mat::zeros(s_count, pass.out.neck_out.cols());
        if active {
            let w_mag = sign / (pairs * k) as f64;
            for &j in &pass.topk {
                let row = pass.out.neck_out.row(j);
                let norm = crate::linalg::l2_norm(row);
                if norm > 0.0 {
                    crate::linalg::axpy(w_mag / norm, row, d_neck.row_mut(j));
                }
            }
        }
        model.backward(pass.features, &pass.out, &d_logit, &d_score, Some(&d_neck), grads);
    }
    Ok(breakdown)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_frame_auc: Option<f64>,
    pub lr: f64,
}

/// Final state of a training run plus the best-validation checkpoint.
pub struct TrainState {
    pub model: ScorerModel,
    pub best_model: ScorerModel,
    pub best_val_auc: Option<f64>,
    pub best_epoch: usize,
    pub trace: Vec<EpochRecord>,
    pub optimizer_steps: u64,
    pub effective_batch_pairs: usize,
}

fn load_segments(corpus: &Corpus, records: &[&VideoRecord], s: usize) -> Result<Vec<Mat>> {
    records
        .iter()
        .map(|rec| {
            let features = corpus.load_features(rec)?;
            Ok(aggregate_segments(&features, s).features)
        })
        .collect()
}

pub fn load_split_features(corpus: &Corpus, split: Split) -> Result<Vec<(VideoRecord, FeatureMatrix)>> {
    corpus
        .manifest
        .split(split)
        .iter()
        .map(|rec| Ok((rec.clone(), corpus.load_features(rec)?)))
        .collect()
}

/// Reshuffling index iterator over one class of videos.
struct ClassIterator {
    order: Vec<usize>,
    pos: usize,
}

impl ClassIterator {
    fn new(n: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        ClassIterator { order, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.order.len() - self.pos
    }

    fn reset(&mut self, rng: &mut ChaCha8Rng) {
        self.order.shuffle(rng);
        self.pos = 0;
    }

    /// Draws `n`, reshuffling and restarting when exhausted mid-draw.
    fn draw(&mut self, n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if self.pos == self.order.len() {
                self.reset(rng);
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Trains the MIL detector. Two independently shuffled iterators pair random
/// abnormal/normal videos; an epoch ends when the longer iterator is
/// exhausted. Returns the final state and the best-validation-AUC checkpoint.
pub fn train_mil(corpus: &Corpus, cfg: &MilConfig) -> Result<TrainState> {
    cfg.validate()?;
    let train = corpus.manifest.split(Split::Train);
    let abn_records: Vec<&VideoRecord> = train.iter().filter(|r| r.is_abnormal()).collect();
    let nrm_records: Vec<&VideoRecord> = train.iter().filter(|r| !r.is_abnormal()).collect();
    if abn_records.is_empty() || nrm_records.is_empty() {
        return Err(Error::Training("train split needs both abnormal and normal videos".into()));
    }
    let b = cfg.batch_pairs.min(abn_records.len()).min(nrm_records.len());
    if b < cfg.batch_pairs {
        eprintln!("mil: batch_pairs reduced from {} to {b} to fit the train split", cfg.batch_pairs);
    }

    let abn_segments = load_segments(corpus, &abn_records, cfg.num_segments)?;
    let nrm_segments = load_segments(corpus, &nrm_records, cfg.num_segments)?;
    let val_videos = load_split_features(corpus, Split::Val)?;
    let has_val = val_videos
        .iter()
        .any(|(rec, _)| rec.spans.iter().map(|s| s.len()).sum::<u64>() > 0)
        && !val_videos.is_empty();

    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ScorerModel::new(
        corpus.manifest.dim,
        cfg.hidden1,
        cfg.hidden2,
        cfg.dropout_rate,
        cfg.use_neck,
        &mut init_rng,
    );
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let mut adam = AdamState::new(model.num_params(), cfg.lr, cfg.weight_decay);

    let mut abn_iter = ClassIterator::new(abn_segments.len(), &mut shuffle_rng);
    let mut nrm_iter = ClassIterator::new(nrm_segments.len(), &mut shuffle_rng);
    let longer_is_abn = abn_segments.len() >= nrm_segments.len();

    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut best_model = model.clone();
    let mut best_val_auc: Option<f64> = None;
    let mut best_epoch = 0;
    for epoch in 0..cfg.epochs {
        let mut epoch_loss = LossBreakdown::default();
        let mut steps = 0usize;
        loop {
            let longer = if longer_is_abn { &abn_iter } else { &nrm_iter };
            let remaining = longer.remaining();
            if remaining == 0 {
                break;
            }
            let batch = b.min(remaining);
            let abn_idx = abn_iter.draw(batch, &mut shuffle_rng);
            let nrm_idx = nrm_iter.draw(batch, &mut shuffle_rng);
            let abn_batch: Vec<&Mat> = abn_idx.iter().map(|&i| &abn_segments[i]).collect();
            let nrm_batch: Vec<&Mat> = nrm_idx.iter().map(|&i| &nrm_segments[i]).collect();
            let mut grads = model.zeros_like();
            let loss = batch_loss(&model, &abn_batch, &nrm_batch, cfg, Some(&mut dropout_rng), Some(&mut grads))?;
            let mut flat = model.flat_params();
            adam.step(&mut flat, &grads.flat_params()).map_err(|e| {
                Error::Training(format!("epoch {epoch}: {e}; last loss {:?}", loss))
            })?;
            model.set_flat_params(&flat);
            epoch_loss.accumulate(&loss);
            steps += 1;
        }
        // the longer iterator is spent; start both fresh next epoch
        abn_iter.reset(&mut shuffle_rng);
        nrm_iter.reset(&mut shuffle_rng);
        epoch_loss.scale(1.0 / steps.max(1) as f64);

        let val_frame_auc = if has_val {
            let auc = frame_auc_preloaded(&val_videos, corpus.manifest.snippet_len, &model)?;
            if best_val_auc.is_none() || auc > best_val_auc.unwrap() {
                best_val_auc = Some(auc);
                best_model = model.clone();
                best_epoch = epoch;
            }
            Some(auc)
        } else {
            None
        };
        trace.push(EpochRecord { epoch, loss: epoch_loss, val_frame_auc, lr: cfg.lr });
    }
    if !has_val {
        best_model = model.clone();
        best_epoch = cfg.epochs.saturating_sub(1);
    }
    Ok(TrainState {
        model,
        best_model,
        best_val_auc,
        best_epoch,
        trace,
        optimizer_steps: adam.step,
        effective_batch_pairs: b,
    })
}

/// Eval-mode per-snippet scores over the full snippet sequence.
pub fn score_video(matrix: &FeatureMatrix, model: &ScorerModel) -> Result<Vec<f64>> {
    if matrix.dim() != model.input_dim() {
        return Err(Error::DimMismatch(format!(
            "video {} has dim {}, model expects {}",
            matrix.video_id,
            matrix.dim(),
            model.input_dim()
        )));
    }
    Ok(model.score_matrix(&matrix.data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn topk_basic() {
        let (idx, mean) = topk_select(&[5.0, 1.0, 9.0, 3.0], 2);
        assert_eq!(idx, vec![2, 0]);
        assert_eq!(mean, 7.0);
    }

    #[test]
    fn topk_all() {
        let (_, mean) = topk_select(&[1.0, 2.0, 3.0], 3);
        assert_eq!(mean, 2.0);
    }

    #[test]
    fn topk_tie_takes_lower_index() {
        let (idx, _) = topk_select(&[4.0, 4.0, 1.0], 1);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn magnitude_loss_cases() {
        assert_eq!(magnitude_loss(80.0, 50.0, 1, 0, 100.0), 70.0);
        assert_eq!(magnitude_loss(200.0, 50.0, 1, 0, 100.0), 0.0);
        assert_eq!(magnitude_loss(80.0, 50.0, 1, 1, 100.0), 0.0);
        assert_eq!(magnitude_loss(80.0, 50.0, 0, 0, 100.0), 0.0);
    }

    #[test]
    fn magnitude_loss_monotone_on_active_hinge() {
        let base = magnitude_loss(60.0, 40.0, 1, 0, 100.0);
        assert!(magnitude_loss(61.0, 40.0, 1, 0, 100.0) < base);
        assert!(magnitude_loss(60.0, 41.0, 1, 0, 100.0) > base);
    }

    #[test]
    fn smoothness_cases() {
        assert_eq!(smoothness_loss(&[0.0, 1.0, 0.0]), 2.0);
        assert_eq!(smoothness_loss(&[0.4, 0.4, 0.4]), 0.0);
        assert!((smoothness_loss(&[0.2, 0.5, 0.9]) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn sparsity_cases() {
        assert!((sparsity_loss(&[0.2, 0.4]) - 0.3).abs() < 1e-12);
        assert_eq!(sparsity_loss(&[0.0, 0.0]), 0.0);
        assert_eq!(sparsity_loss(&[1.0, 1.0, 1.0]), 1.0);
    }
}
