//! Numerical kernel: scoring head, non-local temporal neck, hand-written
//! gradients with a finite-difference oracle, and the Adam optimizer.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod head;
pub mod neck;

pub use adam::AdamState;
pub use head::{sigmoid, HeadCache, ScorerHead};
pub use neck::{NeckCache, NonLocalNeck};

use rand_chacha::ChaCha8Rng;

use crate::linalg::{l2_norm, Mat};

/// Per-row Euclidean norms (the temporal feature magnitudes).
pub fn l2_magnitudes(features: &Mat) -> Vec<f64> {
    features.iter_rows().map(l2_norm).collect()
}

/// Optional non-local neck followed by the scoring head.
#[derive(Clone, Debug)]
pub struct ScorerModel {
    pub neck: Option<NonLocalNeck>,
    pub head: ScorerHead,
}

impl ScorerModel {
    pub fn new(dim: usize, hidden1: usize, hidden2: usize, dropout: f64, use_neck: bool, rng: &mut ChaCha8Rng) -> Self {
        ScorerModel {
            neck: use_neck.then(|| NonLocalNeck::new(dim, rng)),
            head: ScorerHead::new(dim, hidden1, hidden2, dropout, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.head.in_dim
    }

    pub fn zeros_like(&self) -> Self {
        ScorerModel {
            neck: self.neck.as_ref().map(|n| n.zeros_like()),
            head: self.head.zeros_like(),
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, _, _, data| n += data.len());
        n
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'static str, usize, usize, &'a [f64])) {
        if let Some(neck) = &self.neck {
            neck.visit_params(f);
        }
        self.head.visit_params(f);
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&'static str, &mut [f64])) {
        if let Some(neck) = &mut self.neck {
            neck.visit_params_mut(f);
        }
        self.head.visit_params_mut(f);
    }

    /// Parameters flattened in declared order.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        self.visit_params(&mut |_, _, _, data| out.extend_from_slice(data));
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        self.visit_params_mut(&mut |_, data| {
            data.copy_from_slice(&flat[offset..offset + data.len()]);
            offset += data.len();
        });
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    /// Full forward: neck (if any), post-neck magnitudes, head scores.
    /// `dropout_rng` enables train-mode dropout.
    pub fn forward(&self, features: &Mat, dropout_rng: Option<&mut ChaCha8Rng>) -> ModelOutput {
        let (neck_out, neck_cache) = match &self.neck {
            Some(neck) => {
                let (out, cache) = neck.forward(features);
                (out, Some(cache))
            }
            None => (features.clone(), None),
        };
        let magnitudes = l2_magnitudes(&neck_out);
        let (scores, head_cache) = self.head.forward(&neck_out, dropout_rng);
        ModelOutput { neck_out, neck_cache, magnitudes, scores, head_cache }
    }

    /// Full backward. `d_logit`/`d_score` feed the head (see
    /// [`ScorerHead::backward`]); `d_neck_out` carries gradients applied
    /// directly to the neck output rows (the magnitude-loss path). Parameter
    /// gradients are accumulated into `grads`.
    pub fn backward(
        &self,
        features: &Mat,
        out: &ModelOutput,
        d_logit: &[f64],
        d_score: &[f64],
        d_neck_out: Option<&Mat>,
        grads: &mut ScorerModel,
    ) {
        let mut d_neck = self.head.backward(&out.neck_out, &out.head_cache, d_logit, d_score, &mut grads.head);
        if let Some(extra) = d_neck_out {
            d_neck.add_assign(extra);
        }
        if let Some(neck) = &self.neck {
            let grads_neck = grads.neck.as_mut().expect("grads shape mismatch");
            neck.backward(features, out.neck_cache.as_ref().unwrap(), &d_neck, grads_neck);
        }
    }

    /// Eval-mode snippet scores for a full video.
    pub fn score_matrix(&self, features: &Mat) -> Vec<f64> {
        self.forward(features, None).scores
    }
}

pub struct ModelOutput {
    pub neck_out: Mat,
    pub neck_cache: Option<NeckCache>,
    pub magnitudes: Vec<f64>,
    pub scores: Vec<f64>,
    pub head_cache: HeadCache,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn magnitudes_basic() {
        let m = Mat::from_vec(3, 2, vec![3.0, 4.0, 0.0, 0.0, -6.0, 8.0]);
        assert_eq!(l2_magnitudes(&m), vec![5.0, 0.0, 10.0]);
    }

    #[test]
    fn magnitude_homogeneity() {
        let m = Mat::from_vec(1, 3, vec![1.0, -2.0, 2.0]);
        let mut scaled = m.clone();
        scaled.scale(2.5);
        assert!((l2_magnitudes(&scaled)[0] - 2.5 * l2_magnitudes(&m)[0]).abs() < 1e-12);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = ScorerModel::new(6, 12, 5, 0.5, true, &mut rng);
        let flat = model.flat_params();
        assert_eq!(flat.len(), model.num_params());
        let mut other = model.zeros_like();
        other.set_flat_params(&flat);
        assert_eq!(other.flat_params(), flat);
    }
}
