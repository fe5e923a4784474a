//! Three-layer scoring head: D -> H1 -> H2 -> 1 with ReLU, sigmoid output,
//! and inverted dropout after the two hidden layers in train mode.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{axpy, dot, Mat};

#[derive(Clone, Debug)]
pub struct ScorerHead {
    pub in_dim: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    pub w1: Mat,
    pub b1: Vec<f64>,
    pub w2: Mat,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: f64,
    pub dropout_rate: f64,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

impl ScorerHead {
    pub fn new(in_dim: usize, hidden1: usize, hidden2: usize, dropout_rate: f64, rng: &mut ChaCha8Rng) -> Self {
        let bound3 = 1.0 / (hidden2 as f64).sqrt();
        ScorerHead {
            in_dim,
            hidden1,
            hidden2,
            w1: fan_in_uniform(rng, in_dim, hidden1),
            b1: vec![0.0; hidden1],
            w2: fan_in_uniform(rng, hidden1, hidden2),
            b2: vec![0.0; hidden2],
            w3: (0..hidden2).map(|_| rng.gen_range(-bound3..bound3)).collect(),
            b3: 0.0,
            dropout_rate,
        }
    }

    pub fn zeros_like(&self) -> Self {
        ScorerHead {
            in_dim: self.in_dim,
            hidden1: self.hidden1,
            hidden2: self.hidden2,
            w1: Mat::zeros(self.in_dim, self.hidden1),
            b1: vec![0.0; self.hidden1],
            w2: Mat::zeros(self.hidden1, self.hidden2),
            b2: vec![0.0; self.hidden2],
            w3: vec![0.0; self.hidden2],
            b3: 0.0,
            dropout_rate: self.dropout_rate,
        }
    }

    /// Penultimate representation width (used for feature regeneration).
    pub fn penultimate_dim(&self) -> usize {
        self.hidden2
    }

    /// Per-row forward. Dropout masks are drawn from `rng` in row order when
    /// given; eval mode is mask-free (inverted dropout, so no scaling skew).
    pub fn forward(&self, features: &Mat, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<f64>, HeadCache) {
        let n = features.rows();
        assert_eq!(features.cols(), self.in_dim, "head input dim mismatch");
        let keep = 1.0 - self.dropout_rate;
        let mut a1 = Mat::zeros(n, self.hidden1);
        let mut a2 = Mat::zeros(n, self.hidden2);
        let mut mask1 = Mat::zeros(n, self.hidden1);
        let mut mask2 = Mat::zeros(n, self.hidden2);
        let mut scores = Vec::with_capacity(n);
        for i in 0..n {
            let x = features.row(i);
            // layer 1
            let row1 = a1.row_mut(i);
            row1.copy_from_slice(&self.b1);
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    axpy(xj, self.w1.row(j), row1);
                }
            }
            let m1 = mask1.row_mut(i);
            for (a, m) in row1.iter_mut().zip(m1.iter_mut()) {
                *a = a.max(0.0);
                *m = match rng.as_deref_mut() {
                    Some(r) if self.dropout_rate > 0.0 => {
                        if r.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }
                    _ => 1.0,
                };
                *a *= *m;
            }
            // layer 2
            let row1 = a1.row(i);
            let row2 = a2.row_mut(i);
            row2.copy_from_slice(&self.b2);
            for (j, &aj) in row1.iter().enumerate() {
                if aj != 0.0 {
                    axpy(aj, self.w2.row(j), row2);
                }
            }
            let m2 = mask2.row_mut(i);
            for (a, m) in row2.iter_mut().zip(m2.iter_mut()) {
                *a = a.max(0.0);
                *m = match rng.as_deref_mut() {
                    Some(r) if self.dropout_rate > 0.0 => {
                        if r.gen::<f64>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    }
                    _ => 1.0,
                };
                *a *= *m;
            }
            // output; clamp keeps scores strictly inside (0,1) even when the
            // sigmoid saturates past f64 range
            let z3 = dot(a2.row(i), &self.w3) + self.b3;
            scores.push(sigmoid(z3).clamp(SCORE_FLOOR, SCORE_CEIL));
        }
        (scores.clone(), HeadCache { a1, a2, mask1, mask2, scores })
    }

    /// Backward pass. `d_logit[i]` is dL/dz3 accumulated directly at the
    /// pre-sigmoid logit; `d_score[i]` is dL/ds and gets the sigmoid factor
    /// applied here. Returns dL/d(input rows); parameter gradients are summed
    /// into `grads`.
    pub fn backward(
        &self,
        features: &Mat,
        cache: &HeadCache,
        d_logit: &[f64],
        d_score: &[f64],
        grads: &mut ScorerHead,
    ) -> Mat {
        let n = features.rows();
        let mut d_input = Mat::zeros(n, self.in_dim);
        for i in 0..n {
            let s = cache.scores[i];
            let dz3 = d_logit[i] + d_score[i] * s * (1.0 - s);
            if dz3 == 0.0 {
                continue;
            }
            let a2 = cache.a2.row(i);
            grads.b3 += dz3;
            axpy(dz3, a2, &mut grads.w3);
            // through layer 2
            let mut d_a2: Vec<f64> = self.w3.iter().map(|&w| dz3 * w).collect();
            for ((d, &a), &m) in d_a2.iter_mut().zip(a2).zip(cache.mask2.row(i)) {
                // a is post-relu post-dropout; relu active iff a/m > 0, and
                // dropout kills the path when m == 0
                *d *= if m != 0.0 && a != 0.0 { m } else { 0.0 };
            }
            let a1 = cache.a1.row(i);
            for (j, &dj) in d_a2.iter().enumerate() {
                if dj != 0.0 {
                    grads.b2[j] += dj;
                }
            }
            for (j, &aj) in a1.iter().enumerate() {
                if aj != 0.0 {
                    axpy(aj, &d_a2, grads.w2.row_mut(j));
                }
            }
            let mut d_a1 = vec![0.0; self.hidden1];
            for (j, d) in d_a1.iter_mut().enumerate() {
                *d = dot(self.w2.row(j), &d_a2);
            }
            for ((d, &a), &m) in d_a1.iter_mut().zip(a1).zip(cache.mask1.row(i)) {
                *d *= if m != 0.0 && a != 0.0 { m } else { 0.0 };
            }
            // through layer 1
            let x = features.row(i);
            for (j, &dj) in d_a1.iter().enumerate() {
                if dj != 0.0 {
                    grads.b1[j] += dj;
                }
            }
            for (j, &xj) in x.iter().enumerate() {
                if xj != 0.0 {
                    axpy(xj, &d_a1, grads.w1.row_mut(j));
                }
            }
            let d_x = d_input.row_mut(i);
            for (j, d) in d_x.iter_mut().enumerate() {
                *d = dot(self.w1.row(j), &d_a1);
            }
        }
        d_input
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'static str, usize, usize, &'a [f64])) {
        f("head.w1", self.in_dim, self.hidden1, self.w1.data());
        f("head.b1", 1, self.hidden1, &self.b1);
        f("head.w2", self.hidden1, self.hidden2, self.w2.data());
        f("head.b2", 1, self.hidden2, &self.b2);
        f("head.w3", 1, self.hidden2, &self.w3);
        f("head.b3", 1, 1, std::slice::from_ref(&self.b3));
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&'static str, &mut [f64])) {
        f("head.w1", self.w1.data_mut());
        f("head.b1", &mut self.b1);
        f("head.w2", self.w2.data_mut());
        f("head.b2", &mut self.b2);
        f("head.w3", &mut self.w3);
        f("head.b3", std::slice::from_mut(&mut self.b3));
    }
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    /// Post-ReLU, post-dropout activations.
    pub a1: Mat,
    pub a2: Mat,
    /// Dropout scale per element (0 or 1/keep; all ones in eval mode).
    pub mask1: Mat,
    pub mask2: Mat,
    pub scores: Vec<f64>,
}

impl HeadCache {
    /// Penultimate activations for row `i` (the 128-d representation).
    pub fn penultimate(&self, i: usize) -> &[f64] {
        self.a2.row(i)
    }
}

pub const SCORE_FLOOR: f64 = 1e-300;
pub const SCORE_CEIL: f64 = 1.0 - 1e-16;

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_head_scores_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let head = ScorerHead::new(4, 8, 3, 0.0, &mut rng).zeros_like();
        let x = Mat::from_vec(2, 4, vec![1.0, -2.0, 3.0, 0.5, 0.0, 0.0, 1.0, 9.0]);
        let (scores, _) = head.forward(&x, None);
        assert!(scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn dropout_zero_matches_eval() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ScorerHead::new(5, 16, 8, 0.0, &mut rng);
        let x = Mat::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.1 - 0.7).collect());
        let (eval_scores, _) = head.forward(&x, None);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(2);
        let (train_scores, _) = head.forward(&x, Some(&mut drop_rng));
        assert_eq!(eval_scores, train_scores);
    }

    #[test]
    fn dropout_masks_deterministic_per_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = ScorerHead::new(5, 16, 8, 0.7, &mut rng);
        let x = Mat::from_vec(3, 5, (0..15).map(|i| i as f64 * 0.3 - 0.7).collect());
        let mut r1 = ChaCha8Rng::seed_from_u64(11);
        let mut r2 = ChaCha8Rng::seed_from_u64(11);
        let (s1, _) = head.forward(&x, Some(&mut r1));
        let (s2, _) = head.forward(&x, Some(&mut r2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn scores_stay_inside_unit_interval_for_large_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = ScorerHead::new(4, 8, 4, 0.0, &mut rng);
        let x = Mat::from_vec(2, 4, vec![1e6, -1e6, 1e6, 1e6, -1e6, 1e6, -1e6, -1e6]);
        let (scores, _) = head.forward(&x, None);
        for s in scores {
            assert!(s.is_finite() && s > 0.0 && s < 1.0);
        }
    }
}
