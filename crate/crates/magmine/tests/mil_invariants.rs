//! Structural invariants of the MIL objective and trainer that go beyond the
//! per-function unit tests: batch symmetry, reduction to plain BCE, and
//! end-to-end reproducibility.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use magmine::feature_store::Corpus;
use magmine::linalg::Mat;
use magmine::mil::{batch_loss, train_mil, MilConfig};
use magmine::nn::ScorerModel;
use magmine::synthgen::{generate_corpus, SynthConfig};

fn random_model(dim: usize, seed: u64) -> ScorerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ScorerModel::new(dim, 16, 8, 0.0, true, &mut rng);
    let flat: Vec<f64> = (0..model.num_params()).map(|_| rng.gen_range(-0.3..0.3)).collect();
    model.set_flat_params(&flat);
    model
}

fn random_videos(n: usize, s: usize, dim: usize, shift: f64, rng: &mut ChaCha8Rng) -> Vec<Mat> {
    (0..n)
        .map(|_| {
            Mat::from_rows(
                &(0..s)
                    .map(|_| (0..dim).map(|_| shift + rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
                    .collect::<Vec<_>>(),
            )
        })
        .collect()
}

#[test]
fn batch_loss_invariant_under_joint_pair_permutation() {
    let dim = 6;
    let s = 16;
    let model = random_model(dim, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let abn = random_videos(4, s, dim, 0.7, &mut rng);
    let nrm = random_videos(4, s, dim, 0.0, &mut rng);
    let cfg = MilConfig { k: 2, num_segments: s, margin: 3.0, ..MilConfig::default() };

    fn refs<'a>(v: &'a [Mat], order: &[usize]) -> Vec<&'a Mat> {
        order.iter().map(|&i| &v[i]).collect()
    }
    let base = batch_loss(&model, &refs(&abn, &[0, 1, 2, 3]), &refs(&nrm, &[0, 1, 2, 3]), &cfg, None, None)
        .unwrap();
    // the margin term pairs by position, so the same permutation must be
    // applied to both classes
    for order in [[3, 2, 1, 0], [1, 3, 0, 2]] {
        let permuted =
            batch_loss(&model, &refs(&abn, &order), &refs(&nrm, &order), &cfg, None, None).unwrap();
        assert!((base.total - permuted.total).abs() < 1e-12, "{} vs {}", base.total, permuted.total);
        assert!((base.bce - permuted.bce).abs() < 1e-12);
        assert!((base.magnitude - permuted.magnitude).abs() < 1e-12);
    }
}

#[test]
fn batch_loss_with_k_equal_s_and_zero_weights_is_bce_plus_hinge_oracle() {
    let dim = 5;
    let s = 12;
    // no neck: segment magnitudes are plain feature norms, so the hinge term
    // has an independent closed form
    let mut mrng = ChaCha8Rng::seed_from_u64(11);
    let mut model = ScorerModel::new(dim, 16, 8, 0.0, false, &mut mrng);
    let flat: Vec<f64> = (0..model.num_params()).map(|_| mrng.gen_range(-0.3..0.3)).collect();
    model.set_flat_params(&flat);

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let abn = random_videos(2, s, dim, 0.5, &mut rng);
    let nrm = random_videos(2, s, dim, -0.5, &mut rng);
    let cfg = MilConfig {
        k: s,
        num_segments: s,
        margin: 1.5,
        lambda_smooth: 0.0,
        lambda_sparse: 0.0,
        ..MilConfig::default()
    };
    let abn_refs: Vec<&Mat> = abn.iter().collect();
    let nrm_refs: Vec<&Mat> = nrm.iter().collect();
    let loss = batch_loss(&model, &abn_refs, &nrm_refs, &cfg, None, None).unwrap();

    // oracle BCE: mean over every segment of every video (k = S selects all)
    let mut bce = 0.0;
    let mut count = 0usize;
    for (videos, y) in [(&abn, 1.0f64), (&nrm, 0.0)] {
        for v in videos.iter() {
            for &score in &model.score_matrix(v) {
                bce -= y * score.ln() + (1.0 - y) * (1.0 - score).ln();
                count += 1;
            }
        }
    }
    bce /= count as f64;
    // oracle hinge: mean feature norm per video, paired by position
    let mean_norm = |v: &Mat| -> f64 {
        (0..v.rows())
            .map(|i| v.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / v.rows() as f64
    };
    let hinge = abn
        .iter()
        .zip(&nrm)
        .map(|(a, n)| (cfg.margin - (mean_norm(a) - mean_norm(n))).max(0.0))
        .sum::<f64>()
        / abn.len() as f64;
    assert!((loss.bce - bce).abs() < 1e-12, "bce {} vs oracle {bce}", loss.bce);
    assert!((loss.magnitude - hinge).abs() < 1e-12, "hinge {} vs oracle {hinge}", loss.magnitude);
    assert!((loss.total - (bce + hinge)).abs() < 1e-12);
}

fn tiny_corpus(dir: &std::path::Path) -> Corpus {
    let cfg = SynthConfig {
        num_abnormal: 4,
        num_normal: 8,
        dim: 6,
        snippets_per_video: [24, 48],
        seed: 9,
        ..SynthConfig::default()
    };
    generate_corpus(&cfg, dir).unwrap();
    Corpus::load(&dir.join("manifest.json")).unwrap()
}

#[test]
fn train_mil_is_deterministic_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let cfg = MilConfig { epochs: 3, hidden1: 12, hidden2: 6, margin: 2.0, seed: 5, ..MilConfig::default() };
    let a = train_mil(&corpus, &cfg).unwrap();
    let b = train_mil(&corpus, &cfg).unwrap();
    assert_eq!(a.model.flat_params(), b.model.flat_params());
    assert_eq!(a.best_epoch, b.best_epoch);
    assert_eq!(a.optimizer_steps, b.optimizer_steps);
    for (ra, rb) in a.trace.iter().zip(&b.trace) {
        assert_eq!(ra.loss.total, rb.loss.total);
        assert_eq!(ra.val_frame_auc, rb.val_frame_auc);
    }
}

#[test]
fn training_reduces_loss_on_separable_data() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tiny_corpus(dir.path());
    let cfg = MilConfig {
        epochs: 40,
        hidden1: 12,
        hidden2: 6,
        margin: 2.0,
        dropout_rate: 0.0,
        seed: 5,
        ..MilConfig::default()
    };
    let state = train_mil(&corpus, &cfg).unwrap();
    let first: f64 = state.trace[..3].iter().map(|r| r.loss.total).sum::<f64>() / 3.0;
    let last: f64 = state.trace[state.trace.len() - 3..].iter().map(|r| r.loss.total).sum::<f64>() / 3.0;
    assert!(
        last < first * 0.9,
        "loss did not trend down: first-3 mean {first}, last-3 mean {last}"
    );
}
