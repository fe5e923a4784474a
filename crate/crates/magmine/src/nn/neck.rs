//! Single-scale non-local temporal neck: a width-3 temporal convolution
//! followed by dot-product self-attention over segment rows, in residual form.
//!
//! out = S + W_out( softmax( (theta X)(phi X)^T / sqrt(D') ) * (g X) ),
//! where X = conv3(S). With W_out zero the neck is the identity, which is the
//! initialization; the convolution starts as the identity tap so gradient can
//! reach the attention maps from the first optimizer step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{softmax_rows, Mat};

#[derive(Clone, Debug)]
pub struct NonLocalNeck {
    pub dim: usize,
    pub proj: usize,
    /// Temporal convolution taps at offsets -1, 0, +1; each `dim x dim`,
    /// laid out input-dim x output-dim.
    pub conv_w: [Mat; 3],
    pub conv_b: Vec<f64>,
    pub theta: Mat,
    pub phi: Mat,
    pub g: Mat,
    pub w_out: Mat,
}

fn fan_in_uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    let bound = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Mat::from_vec(rows, cols, data)
}

fn identity(dim: usize) -> Mat {
    let mut m = Mat::zeros(dim, dim);
    for i in 0..dim {
        m.set(i, i, 1.0);
    }
    m
}

impl NonLocalNeck {
    pub fn projection_width(dim: usize) -> usize {
        (dim / 4).max(1)
    }

    pub fn new(dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let proj = Self::projection_width(dim);
        NonLocalNeck {
            dim,
            proj,
            conv_w: [Mat::zeros(dim, dim), identity(dim), Mat::zeros(dim, dim)],
            conv_b: vec![0.0; dim],
            theta: fan_in_uniform(rng, dim, proj),
            phi: fan_in_uniform(rng, dim, proj),
            g: fan_in_uniform(rng, dim, proj),
            w_out: Mat::zeros(proj, dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        NonLocalNeck {
            dim: self.dim,
            proj: self.proj,
            conv_w: [
                Mat::zeros(self.dim, self.dim),
                Mat::zeros(self.dim, self.dim),
                Mat::zeros(self.dim, self.dim),
            ],
            conv_b: vec![0.0; self.dim],
            theta: Mat::zeros(self.dim, self.proj),
            phi: Mat::zeros(self.dim, self.proj),
            g: Mat::zeros(self.dim, self.proj),
            w_out: Mat::zeros(self.proj, self.dim),
        }
    }

    fn conv_forward(&self, input: &Mat) -> Mat {
        let n = input.rows();
        let mut x = Mat::zeros(n, self.dim);
        for t in 0..n {
            x.row_mut(t).copy_from_slice(&self.conv_b);
        }
        for (tap, w) in self.conv_w.iter().enumerate() {
            let offset = tap as isize - 1;
            for t in 0..n as isize {
                let src = t + offset;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let in_row = input.row(src as usize);
                let out_row = x.row_mut(t as usize);
                for (j, &v) in in_row.iter().enumerate() {
                    if v != 0.0 {
                        crate::linalg::axpy(v, w.row(j), out_row);
                    }
                }
            }
        }
        x
    }

    pub fn forward(&self, input: &Mat) -> (Mat, NeckCache) {
        assert_eq!(input.cols(), self.dim, "neck input dim mismatch");
        let x = self.conv_forward(input);
        let q = x.matmul(&self.theta);
        let k = x.matmul(&self.phi);
        let v = x.matmul(&self.g);
        let scale = 1.0 / (self.proj as f64).sqrt();
        let mut att = q.matmul_a_bt(&k);
        att.scale(scale);
        softmax_rows(&mut att);
        let h = att.matmul(&v);
        let mut out = h.matmul(&self.w_out);
        out.add_assign(input);
        (out, NeckCache { x, q, k, v, att, h })
    }

    /// Accumulates parameter gradients into `grads` and returns dL/d(input).
    pub fn backward(&self, input: &Mat, cache: &NeckCache, d_out: &Mat, grads: &mut NonLocalNeck) -> Mat {
        let n = input.rows();
        let scale = 1.0 / (self.proj as f64).sqrt();
        // residual branch
        let mut d_input = d_out.clone();
        // out = h * w_out (+ input)
        grads.w_out.add_assign(&cache.h.matmul_at_b(d_out));
        let d_h = d_out.matmul_a_bt(&self.w_out);
        // h = att * v
        let d_att = d_h.matmul_a_bt(&cache.v);
        let d_v = cache.att.matmul_at_b(&d_h);
        // softmax rows, then the 1/sqrt(D') scale on the logits
        let mut d_logits = Mat::zeros(n, n);
        for i in 0..n {
            let a = cache.att.row(i);
            let da = d_att.row(i);
            let inner: f64 = a.iter().zip(da).map(|(x, y)| x * y).sum();
            let out_row = d_logits.row_mut(i);
            for ((o, &ai), &dai) in out_row.iter_mut().zip(a).zip(da) {
                *o = ai * (dai - inner) * scale;
            }
        }
        // logits = q k^T
        let d_q = d_logits.matmul(&cache.k);
        let d_k = d_logits.matmul_at_b(&cache.q);
        // projections
        grads.theta.add_assign(&cache.x.matmul_at_b(&d_q));
        grads.phi.add_assign(&cache.x.matmul_at_b(&d_k));
        grads.g.add_assign(&cache.x.matmul_at_b(&d_v));
        let mut d_x = d_q.matmul_a_bt(&self.theta);
        d_x.add_assign(&d_k.matmul_a_bt(&self.phi));
        d_x.add_assign(&d_v.matmul_a_bt(&self.g));
        // conv3
        for t in 0..n {
            for (d, &g) in grads.conv_b.iter_mut().zip(d_x.row(t)) {
                *d += g;
            }
        }
        for (tap, w) in self.conv_w.iter().enumerate() {
            let offset = tap as isize - 1;
            let gw = &mut grads.conv_w[tap];
            for t in 0..n as isize {
                let src = t + offset;
                if src < 0 || src >= n as isize {
                    continue;
                }
                let in_row = input.row(src as usize);
                let dx_row = d_x.row(t as usize);
                for (j, &v) in in_row.iter().enumerate() {
                    if v != 0.0 {
                        crate::linalg::axpy(v, dx_row, gw.row_mut(j));
                    }
                }
                let din_row = d_input.row_mut(src as usize);
                for (j, o) in din_row.iter_mut().enumerate() {
                    *o += crate::linalg::dot(w.row(j), dx_row);
                }
            }
        }
        d_input
    }

    pub fn visit_params<'a>(&'a self, f: &mut impl FnMut(&'static str, usize, usize, &'a [f64])) {
        f("neck.conv_w_m1", self.dim, self.dim, self.conv_w[0].data());
        f("neck.conv_w_0", self.dim, self.dim, self.conv_w[1].data());
        f("neck.conv_w_p1", self.dim, self.dim, self.conv_w[2].data());
        f("neck.conv_b", 1, self.dim, &self.conv_b);
        f("neck.theta", self.dim, self.proj, self.theta.data());
        f("neck.phi", self.dim, self.proj, self.phi.data());
        f("neck.g", self.dim, self.proj, self.g.data());
        f("neck.w_out", self.proj, self.dim, self.w_out.data());
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&'static str, &mut [f64])) {
        f("neck.conv_w_m1", self.conv_w[0].data_mut());
        f("neck.conv_w_0", self.conv_w[1].data_mut());
        f("neck.conv_w_p1", self.conv_w[2].data_mut());
        f("neck.conv_b", &mut self.conv_b);
        f("neck.theta", self.theta.data_mut());
        f("neck.phi", self.phi.data_mut());
        f("neck.g", self.g.data_mut());
        f("neck.w_out", self.w_out.data_mut());
    }
}

#[derive(Clone, Debug)]
pub struct NeckCache {
    pub x: Mat,
    pub q: Mat,
    pub k: Mat,
    pub v: Mat,
    pub att: Mat,
    pub h: Mat,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn zero_maps_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let neck = NonLocalNeck::new(6, &mut rng).zeros_like();
        let input = Mat::from_vec(4, 6, (0..24).map(|i| i as f64 * 0.37 - 2.0).collect());
        let (out, _) = neck.forward(&input);
        assert_eq!(out, input);
    }

    #[test]
    fn initialization_is_identity_through_residual() {
        // w_out starts at zero, so the residual dominates exactly
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let neck = NonLocalNeck::new(8, &mut rng);
        let input = Mat::from_vec(5, 8, (0..40).map(|i| (i as f64).sin()).collect());
        let (out, _) = neck.forward(&input);
        assert_eq!(out, input);
    }

    #[test]
    fn single_row_attention_is_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let neck = NonLocalNeck::new(4, &mut rng);
        let input = Mat::from_vec(1, 4, vec![0.3, -0.1, 2.0, 0.7]);
        let (_, cache) = neck.forward(&input);
        assert_eq!(cache.att.rows(), 1);
        assert!((cache.att.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut neck = NonLocalNeck::new(8, &mut rng);
        // random dense maps, not just init
        neck.w_out = Mat::from_vec(2, 8, (0..16).map(|i| (i as f64 * 0.21).cos()).collect());
        let input = Mat::from_vec(4, 8, (0..32).map(|i| (i as f64 * 1.3).sin() * 3.0).collect());
        let (_, cache) = neck.forward(&input);
        for i in 0..4 {
            let s: f64 = cache.att.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }
}
