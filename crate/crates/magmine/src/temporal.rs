//! Snippet -> segment aggregation, multi-set snippet sampling, and
//! snippet-score -> frame-score expansion. All pure functions.

use std::ops::Range;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::feature_store::FeatureMatrix;
use crate::linalg::Mat;

/// A video's features reduced to `S` equal-length segments.
#[derive(Clone, Debug)]
pub struct SegmentBatch {
    pub video_id: String,
    pub features: Mat,
    pub members: Vec<Range<usize>>,
}

impl SegmentBatch {
    pub fn num_segments(&self) -> usize {
        self.features.rows()
    }
}

/// Floor-rule segment boundaries: range j = [floor(j*T/S), floor((j+1)*T/S)).
/// Empty ranges collapse to a single duplicated snippet so short videos still
/// produce S segments.
pub fn segment_boundaries(num_snippets: usize, num_segments: usize) -> Vec<Range<usize>> {
    assert!(num_snippets >= 1 && num_segments >= 1);
    let t = num_snippets;
    (0..num_segments)
        .map(|j| {
            let lo = j * t / num_segments;
            let hi = (j + 1) * t / num_segments;
            if lo < hi {
                lo..hi
            } else {
                let idx = lo.min(t - 1);
                idx..idx + 1
            }
        })
        .collect()
}

/// Averages member snippet rows into segment features.
pub fn aggregate_segments(matrix: &FeatureMatrix, num_segments: usize) -> SegmentBatch {
    let members = segment_boundaries(matrix.num_snippets(), num_segments);
    let dim = matrix.dim();
    let mut features = Mat::zeros(num_segments, dim);
    for (j, range) in members.iter().enumerate() {
        let inv = 1.0 / range.len() as f64;
        let row = features.row_mut(j);
        for i in range.clone() {
            for (o, &v) in row.iter_mut().zip(matrix.data.row(i)) {
                *o += v * inv;
            }
        }
    }
    SegmentBatch { video_id: matrix.video_id.clone(), features, members }
}

/// Mean feature of `num_sets` sampled snippets; without replacement when the
/// video is long enough, with replacement otherwise.
pub fn multiset_average(matrix: &FeatureMatrix, num_sets: usize, seed: u64) -> Vec<f64> {
    assert!(num_sets >= 1);
    let t = matrix.num_snippets();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if num_sets <= t {
        let mut idx: Vec<usize> = (0..t).collect();
        idx.shuffle(&mut rng);
        idx.truncate(num_sets);
        idx
    } else {
        (0..num_sets).map(|_| rng.gen_range(0..t)).collect()
    };
    let mut mean = vec![0.0; matrix.dim()];
    let inv = 1.0 / picks.len() as f64;
    for i in picks {
        for (m, &v) in mean.iter_mut().zip(matrix.data.row(i)) {
            *m += v * inv;
        }
    }
    mean
}

/// Expands per-snippet scores to per-frame scores; remainder frames inherit
/// the last snippet's score.
pub fn expand_to_frames(snippet_scores: &[f64], snippet_len: u64, num_frames: u64) -> Result<Vec<f64>> {
    if num_frames < 1 {
        return Err(Error::Config("num_frames must be at least 1".into()));
    }
    assert!(!snippet_scores.is_empty());
    let t = snippet_scores.len();
    Ok((0..num_frames)
        .map(|f| {
            let idx = ((f / snippet_len) as usize).min(t - 1);
            snippet_scores[idx]
        })
        .collect())
}
