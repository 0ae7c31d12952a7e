use ndarray::{Array1, Array2};
use proptest::prelude::*;
use pseudolabel_kit::seeding::{derive_rng, rng_from_seed};
use pseudolabel_kit::wsl::*;
use pseudolabel_kit::WeakLabels;
use rand::Rng;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
/// Below this magnitude the relative error is measured against the floor.
const SCALE_FLOOR: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Scalar objective `upstream . forward(feature, labels, params)`.
fn objective(feature: &[f64], labels: &WeakLabels, params: &AttentionParams, upstream: &[f64]) -> f64 {
    label_attention_forward(feature, labels, params)
        .unwrap()
        .iter()
        .zip(upstream)
        .map(|(o, g)| o * g)
        .sum()
}

fn central<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    (f(x + STEP) - f(x - STEP)) / (2.0 * STEP)
}

#[test]
fn attention_gradients_match_finite_differences() {
    let mut worst = 0.0f64;
    for case in 0..100u64 {
        let mut rng = derive_rng(case, &[b"gradcheck"]);
        let d = rng.random_range(1..=8);
        let c = rng.random_range(1..=8);
        let params = AttentionParams::new(
            Array2::from_shape_fn((d, c), |_| rng.random_range(-2.0..2.0)),
            Array1::from_shape_fn(d, |_| rng.random_range(-1.0..1.0)),
        )
        .unwrap();
        let labels = WeakLabels::new((0..c).map(|_| rng.random_bool(0.5)).collect());
        let feature: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let upstream: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();

        let grads = label_attention_backward(&feature, &labels, &params, &upstream).unwrap();

        for i in 0..d {
            let num = central(
                |x| {
                    let mut f = feature.clone();
                    f[i] = x;
                    objective(&f, &labels, &params, &upstream)
                },
                feature[i],
            );
            worst = worst.max(rel_err(grads.feature[i], num));

            let num = central(
                |x| {
                    let mut p = params.clone();
                    p.bias[i] = x;
                    objective(&feature, &labels, &p, &upstream)
                },
                params.bias[i],
            );
            worst = worst.max(rel_err(grads.bias[i], num));

            for k in 0..c {
                let num = central(
                    |x| {
                        let mut p = params.clone();
                        p.weight[[i, k]] = x;
                        objective(&feature, &labels, &p, &upstream)
                    },
                    params.weight[[i, k]],
                );
                worst = worst.max(rel_err(grads.weight[[i, k]], num));
            }
        }
    }
    assert!(worst < REL_TOL, "worst relative error {worst:e}");
}

proptest! {
    #[test]
    fn image_prob_is_a_convex_combination(logits in prop::collection::vec(-30.0..30.0f64, 1..64)) {
        let p = wsl_image_prob(&logits).unwrap();
        let lo = logits.iter().map(|&l| sigmoid(l)).fold(f64::INFINITY, f64::min);
        let hi = logits.iter().map(|&l| sigmoid(l)).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(p >= lo - 1e-15 && p <= hi + 1e-15);
    }

    #[test]
    fn rpn_probs_sum_to_one(n in 1usize..40, c in 1usize..10, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let scores = ProposalScores::new(
            Array1::from_shape_fn(n, |_| rng.random_range(-10.0..10.0)),
            Array2::from_shape_fn((n, c), |_| rng.random_range(-10.0..10.0)),
        ).unwrap();
        let p = wsl_image_prob_rpn(&scores, &WslConfig { k: 16 }, &mut rng).unwrap();
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn rpn_probs_ignore_rng_when_k_covers_all(n in 1usize..20, seed in any::<u64>()) {
        let mut rng = rng_from_seed(seed);
        let scores = ProposalScores::new(
            Array1::from_shape_fn(n, |_| rng.random_range(-5.0..5.0)),
            Array2::from_shape_fn((n, 3), |_| rng.random_range(-5.0..5.0)),
        ).unwrap();
        let cfg = WslConfig { k: 512 };
        let a = wsl_image_prob_rpn(&scores, &cfg, &mut rng_from_seed(1)).unwrap();
        let b = wsl_image_prob_rpn(&scores, &cfg, &mut rng_from_seed(2)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn loss_is_non_negative(p in prop::collection::vec(0.0..=1.0f64, 1..8), bits in any::<u8>()) {
        let labels = WeakLabels::new((0..p.len()).map(|k| bits >> k & 1 == 1).collect());
        prop_assert!(wsl_loss(&p, &labels).unwrap() >= 0.0);
    }

    #[test]
    fn attention_shrinks_features(
        f in prop::collection::vec(-10.0..10.0f64, 3),
        w in prop::collection::vec(-5.0..5.0f64, 6),
        bits in any::<u8>(),
    ) {
        let params = AttentionParams::new(Array2::from_shape_vec((3, 2), w).unwrap(), Array1::zeros(3)).unwrap();
        let labels = WeakLabels::new(vec![bits & 1 == 1, bits & 2 == 2]);
        let out = label_attention_forward(&f, &labels, &params).unwrap();
        for (o, x) in out.iter().zip(&f) {
            prop_assert!(o.abs() <= x.abs());
        }
    }
}
