//! Synthetic feature corpora with known per-frame ground truth.
//!
//! Snippet features are drawn from a two-mode Gaussian design: normal snippets
//! from N(mu0, sigma^2 I), abnormal-span snippets from N(mu1, sigma^2 I) with
//! ||mu1 - mu0|| = separation, and a configurable fraction of out-of-span
//! snippets in every video from the midpoint mode (mu0 + mu1)/2 to act as
//! distractors. Distractors inside abnormal videos make whole-video labels
//! genuinely misleading, the way irrelevant content does in untrimmed footage.
//! Span boundaries are snippet-aligned, so per-frame ground truth is exactly
//! recoverable from the manifest.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::feature_store::{
    save_manifest, write_features, AnnotationSpan, DatasetManifest, FeatureMatrix, Splits,
    VideoRecord,
};
use crate::linalg::Mat;

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Abnormal / normal video counts in the train split.
    pub num_abnormal: usize,
    pub num_normal: usize,
    pub dim: usize,
    pub snippet_len: u64,
    /// Inclusive snippet-count range per video.
    pub snippets_per_video: [usize; 2],
    /// Fraction of snippets inside abnormal spans, per abnormal video.
    pub abnormal_fraction: f64,
    /// Mean shift of abnormal features, ||mu1 - mu0||.
    pub separation: f64,
    pub noise_sigma: f64,
    /// Fraction of out-of-span snippets (in any video) drawn from the
    /// midpoint mode.
    pub distractor_rate: f64,
    /// Val / test split sizes relative to the train counts.
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_abnormal: 20,
            num_normal: 80,
            dim: 32,
            snippet_len: 16,
            snippets_per_video: [64, 256],
            abnormal_fraction: 0.2,
            separation: 2.0,
            noise_sigma: 1.0,
            distractor_rate: 0.05,
            val_fraction: 0.25,
            test_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let c = |ok: bool, msg: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("synth: {msg}")))
            }
        };
        c(self.num_abnormal >= 1, "num_abnormal must be >= 1")?;
        c(self.num_normal >= 1, "num_normal must be >= 1")?;
        c(self.dim >= 1, "dim must be >= 1")?;
        c(self.snippet_len >= 1, "snippet_len must be >= 1")?;
        c(
            self.snippets_per_video[0] >= 1 && self.snippets_per_video[0] <= self.snippets_per_video[1],
            "snippets_per_video range must be non-empty",
        )?;
        c(
            self.abnormal_fraction > 0.0 && self.abnormal_fraction < 1.0,
            "abnormal_fraction must be in (0,1)",
        )?;
        c(
            self.abnormal_fraction * self.snippets_per_video[0] as f64 >= 1.0,
            "abnormal_fraction * T_min must be >= 1 (span would be empty)",
        )?;
        c(self.separation >= 0.0, "separation must be >= 0")?;
        c(self.noise_sigma > 0.0, "noise_sigma must be > 0")?;
        c(
            (0.0..1.0).contains(&self.distractor_rate),
            "distractor_rate must be in [0,1)",
        )?;
        c(self.val_fraction > 0.0, "val_fraction must be > 0")?;
        c(self.test_fraction > 0.0, "test_fraction must be > 0")?;
        Ok(())
    }

    /// Unit direction of the abnormal mean shift.
    pub fn shift_direction(&self) -> Vec<f64> {
        let v = 1.0 / (self.dim as f64).sqrt();
        vec![v; self.dim]
    }
}

/// Which generative mode each snippet of a video was drawn from.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VideoGroundTruth {
    /// Snippet indices inside abnormal spans (abnormal videos only).
    #[serde(default)]
    pub abnormal_snippets: Vec<usize>,
    /// Snippet indices drawn from the midpoint mode.
    #[serde(default)]
    pub distractor_snippets: Vec<usize>,
}

/// Per-video generative ground truth, written beside the manifest.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CorpusGroundTruth {
    pub videos: BTreeMap<String, VideoGroundTruth>,
}

impl CorpusGroundTruth {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(GROUND_TRUTH_FILE);
        let file = std::fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_reader(std::io::BufReader::new(file))
            .map_err(|e| Error::Json { path, source: e })
    }
}

fn video_seed(corpus_seed: u64, video_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(corpus_seed.to_le_bytes());
    h.update(video_id.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

fn sample_row(rng: &mut ChaCha8Rng, mean_shift: f64, dir: &[f64], sigma: f64) -> Vec<f64> {
    dir.iter()
        .map(|&d| {
            let z: f64 = StandardNormal.sample(rng);
            mean_shift * d + sigma * z
        })
        .collect()
}

/// Snippet-index spans for one abnormal video: 1-3 contiguous runs totalling
/// roughly `abnormal_fraction * T` snippets, separated by at least one normal
/// snippet where space allows.
fn place_spans(rng: &mut ChaCha8Rng, t: usize, fraction: f64) -> Vec<(usize, usize)> {
    let total = ((fraction * t as f64).round() as usize).clamp(1, t - 1);
    let mut k = rng.gen_range(1..=3usize).min(total);
    // interior separators need one free snippet each
    while k > 1 && t - total < k - 1 {
        k -= 1;
    }
    // random composition of `total` into k parts >= 1
    let mut sizes = vec![1usize; k];
    for _ in 0..total - k {
        sizes[rng.gen_range(0..k)] += 1;
    }
    // distribute the remaining free snippets into k+1 gaps; interior gaps
    // already reserve one snippet
    let mut gaps = vec![0usize; k + 1];
    for g in gaps.iter_mut().take(k).skip(1) {
        *g = 1;
    }
    let free = t - total - (k - 1);
    for _ in 0..free {
        gaps[rng.gen_range(0..k + 1)] += 1;
    }
    let mut spans = Vec::with_capacity(k);
    let mut pos = 0usize;
    for (size, gap) in sizes.iter().zip(&gaps) {
        pos += gap;
        spans.push((pos, pos + size));
        pos += size;
    }
    spans
}

struct GeneratedVideo {
    record: VideoRecord,
    features: FeatureMatrix,
    truth: VideoGroundTruth,
}

fn generate_video(cfg: &SynthConfig, video_id: &str, abnormal: bool) -> GeneratedVideo {
    let mut rng = ChaCha8Rng::seed_from_u64(video_seed(cfg.seed, video_id));
    let t = rng.gen_range(cfg.snippets_per_video[0]..=cfg.snippets_per_video[1]);
    let dir = cfg.shift_direction();
    let mut truth = VideoGroundTruth { abnormal_snippets: vec![], distractor_snippets: vec![] };
    let mut spans = Vec::new();
    let mut rows = Vec::with_capacity(t);
    let mut inside = vec![false; t];
    if abnormal {
        let snippet_spans = place_spans(&mut rng, t, cfg.abnormal_fraction);
        for &(a, b) in &snippet_spans {
            inside[a..b].fill(true);
            spans.push(AnnotationSpan(a as u64 * cfg.snippet_len, b as u64 * cfg.snippet_len));
        }
    }
    for (i, &is_abn) in inside.iter().enumerate() {
        let shift = if is_abn {
            truth.abnormal_snippets.push(i);
            cfg.separation
        } else if rng.gen_bool(cfg.distractor_rate) {
            truth.distractor_snippets.push(i);
            cfg.separation / 2.0
        } else {
            0.0
        };
        rows.push(sample_row(&mut rng, shift, &dir, cfg.noise_sigma));
    }
    let features = FeatureMatrix::new(video_id, Mat::from_rows(&rows)).expect("finite by construction");
    let record = VideoRecord {
        video_id: video_id.to_string(),
        label: u8::from(abnormal),
        num_frames: t as u64 * cfg.snippet_len,
        spans,
        feature_path: format!("{video_id}.fvec"),
    };
    GeneratedVideo { record, features, truth }
}

/// Generates a full corpus (train/val/test FVEC files + manifest + ground
/// truth) under `out_dir`. Pure function of the config seed.
pub fn generate_corpus(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let split_count = |n: usize, frac: f64| ((n as f64 * frac).round() as usize).max(1);
    let plan = [
        ("train", cfg.num_abnormal, cfg.num_normal),
        ("val", split_count(cfg.num_abnormal, cfg.val_fraction), split_count(cfg.num_normal, cfg.val_fraction)),
        ("test", split_count(cfg.num_abnormal, cfg.test_fraction), split_count(cfg.num_normal, cfg.test_fraction)),
    ];

    let mut splits = Splits::default();
    let mut truth = CorpusGroundTruth::default();
    for (split_name, n_abn, n_nrm) in plan {
        let mut records = Vec::with_capacity(n_abn + n_nrm);
        for (abnormal, count, class) in [(true, n_abn, "abn"), (false, n_nrm, "nrm")] {
            for i in 0..count {
                let video_id = format!("{class}_{split_name}_{i:04}");
                let gv = generate_video(cfg, &video_id, abnormal);
                write_features(&gv.features, &out_dir.join(&gv.record.feature_path))?;
                truth.videos.insert(video_id, gv.truth);
                records.push(gv.record);
            }
        }
        match split_name {
            "train" => splits.train = records,
            "val" => splits.val = records,
            _ => splits.test = records,
        }
    }

    let manifest = DatasetManifest {
        name: format!("synth-seed{}", cfg.seed),
        dim: cfg.dim,
        snippet_len: cfg.snippet_len,
        splits,
    };
    save_manifest(&manifest, &out_dir.join("manifest.json"))?;

    let gt_path = out_dir.join(GROUND_TRUTH_FILE);
    let file = std::fs::File::create(&gt_path).map_err(|e| Error::io(&gt_path, e))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &truth)
        .map_err(|e| Error::Json { path: gt_path, source: e })?;
    Ok(manifest)
}
