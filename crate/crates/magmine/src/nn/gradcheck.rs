//! Central-difference verification of the analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::ScorerModel;

pub const DEFAULT_PERTURBATION: f64 = 1e-5;
pub const DEFAULT_SAMPLE: usize = 200;
pub const PASS_TOLERANCE: f64 = 1e-4;

/// Compares `analytic` against central differences of `loss_fn` on a random
/// sample of at least `sample` parameters (all of them for small models) and
/// returns the max relative error |analytic - numeric| / max(1, |numeric|).
///
/// `loss_fn` must be deterministic in the parameters (dropout off).
pub fn finite_diff_check(
    model: &ScorerModel,
    analytic: &[f64],
    mut loss_fn: impl FnMut(&ScorerModel) -> f64,
    sample: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let n = model.num_params();
    assert_eq!(analytic.len(), n, "gradient length mismatch");
    let mut indices: Vec<usize> = (0..n).collect();
    if sample < n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        indices.shuffle(&mut rng);
        indices.truncate(sample);
    }
    let mut flat = model.flat_params();
    let mut probe = model.clone();
    let mut max_rel = 0.0f64;
    for &i in &indices {
        let orig = flat[i];
        flat[i] = orig + h;
        probe.set_flat_params(&flat);
        let up = loss_fn(&probe);
        flat[i] = orig - h;
        probe.set_flat_params(&flat);
        let down = loss_fn(&probe);
        flat[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!("loss at perturbed parameter {i}")));
        }
        let numeric = (up - down) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        max_rel = max_rel.max(rel);
    }
    probe.set_flat_params(&flat);
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Mat;

    /// Quadratic loss through the head with zero dropout: the check should be
    /// at round-off scale, and a corrupted gradient must be caught.
    fn setup() -> (ScorerModel, Mat) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = ScorerModel::new(4, 6, 3, 0.0, false, &mut rng);
        let x = Mat::from_vec(3, 4, (0..12).map(|i| (i as f64 * 0.73).sin()).collect());
        (model, x)
    }

    fn score_sum_loss(model: &ScorerModel, x: &Mat) -> f64 {
        model.score_matrix(x).iter().map(|s| s * s).sum()
    }

    fn analytic_grads(model: &ScorerModel, x: &Mat) -> Vec<f64> {
        let out = model.forward(x, None);
        let d_score: Vec<f64> = out.scores.iter().map(|s| 2.0 * s).collect();
        let d_logit = vec![0.0; out.scores.len()];
        let mut grads = model.zeros_like();
        model.backward(x, &out, &d_logit, &d_score, None, &mut grads);
        grads.flat_params()
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (model, x) = setup();
        let analytic = analytic_grads(&model, &x);
        let err = finite_diff_check(&model, &analytic, |m| score_sum_loss(m, &x), usize::MAX, 1e-5, 0).unwrap();
        assert!(err < 1e-7, "max rel err {err}");
    }

    #[test]
    fn corrupted_gradient_fails_check() {
        let (model, x) = setup();
        let mut analytic = analytic_grads(&model, &x);
        // double one weight gradient
        let idx = analytic.iter().position(|&g| g.abs() > 1e-3).unwrap();
        analytic[idx] *= 2.0;
        let err = finite_diff_check(&model, &analytic, |m| score_sum_loss(m, &x), usize::MAX, 1e-5, 0).unwrap();
        assert!(err > PASS_TOLERANCE, "corruption not caught, err {err}");
    }

    #[test]
    fn neck_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut model = ScorerModel::new(4, 6, 3, 0.0, true, &mut rng);
        // move w_out and the side conv taps off zero so every path is live
        {
            let neck = model.neck.as_mut().unwrap();
            for (i, v) in neck.w_out.data_mut().iter_mut().enumerate() {
                *v = ((i as f64) * 0.41).sin() * 0.3;
            }
            for (i, v) in neck.conv_w[0].data_mut().iter_mut().enumerate() {
                *v = ((i as f64) * 0.13).cos() * 0.2;
            }
        }
        let x = Mat::from_vec(5, 4, (0..20).map(|i| (i as f64 * 0.31).cos()).collect());
        let analytic = analytic_grads(&model, &x);
        let err = finite_diff_check(&model, &analytic, |m| score_sum_loss(m, &x), usize::MAX, 1e-5, 0).unwrap();
        assert!(err < 1e-6, "max rel err {err}");
    }
}
