//! Image-level label probabilities for weakly-annotated images, the
//! multi-label cross-entropy built on them, and label attention.
//!
//! Two forms of the image-level probability are provided:
//!
//! * [`wsl_image_prob`]: a softened max over proposals. Each proposal's
//!   foreground probability is `sigmoid(logit)`, and the proposals are
//!   weighted by a softmax over the same logits.
//! * [`wsl_image_prob_rpn`]: an objectness prior times a class posterior,
//!   `p_k = sum_j softmax_j(objectness)_j * softmax_k(class_logits[j])_k`,
//!   over a uniform subsample of at most `K` proposals.
//!
//! Label attention gates a feature vector channel-wise by
//! `sigmoid(W c + b)` where `c` is the multi-hot label vector.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::model::WeakLabels;

/// Probabilities are clamped to `[PROB_EPS, 1 - PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-12;

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax.
pub fn softmax(xs: ArrayView1<f64>) -> Array1<f64> {
    let max = xs.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let e = xs.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

/// Per-proposal outputs of a two-stage detector.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalScores {
    /// RPN objectness logits, one per proposal.
    pub objectness: Array1<f64>,
    /// Box-head class logits, proposals x classes.
    pub class_logits: Array2<f64>,
}

impl ProposalScores {
    pub fn new(objectness: Array1<f64>, class_logits: Array2<f64>) -> Result<Self> {
        if objectness.is_empty() {
            return Err(Error::arg("at least one proposal is required"));
        }
        if class_logits.nrows() != objectness.len() {
            return Err(Error::arg(format!(
                "{} objectness scores but {} class-logit rows",
                objectness.len(),
                class_logits.nrows()
            )));
        }
        if class_logits.ncols() == 0 {
            return Err(Error::arg("at least one class is required"));
        }
        if objectness.iter().chain(class_logits.iter()).any(|v| !v.is_finite()) {
            return Err(Error::arg("proposal scores must be finite"));
        }
        Ok(Self {
            objectness,
            class_logits,
        })
    }

    pub fn num_proposals(&self) -> usize {
        self.objectness.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WslConfig {
    /// Number of proposals sampled for the objectness softmax.
    pub k: usize,
}

impl Default for WslConfig {
    fn default() -> Self {
        Self { k: 512 }
    }
}

/// Softened-max image probability for one class from its per-proposal logits.
pub fn wsl_image_prob(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() {
        return Err(Error::arg("at least one proposal logit is required"));
    }
    if logits.iter().any(|l| !l.is_finite()) {
        return Err(Error::arg("logits must be finite"));
    }
    let view = ArrayView1::from(logits);
    let weights = softmax(view);
    Ok(weights
        .iter()
        .zip(logits)
        .map(|(w, &l)| w * sigmoid(l))
        .sum())
}

/// Objectness-prior times class-posterior image probabilities, one per class.
///
/// When there are more than `cfg.k` proposals, `cfg.k` of them are drawn
/// uniformly without replacement; otherwise all are used and `rng` is left
/// untouched.
pub fn wsl_image_prob_rpn(
    scores: &ProposalScores,
    cfg: &WslConfig,
    rng: &mut dyn RngCore,
) -> Result<Array1<f64>> {
    if cfg.k == 0 {
        return Err(Error::arg("K must be at least 1"));
    }
    let n = scores.num_proposals();
    let rows: Vec<usize> = if cfg.k >= n {
        (0..n).collect()
    } else {
        let mut picked = index::sample(rng, n, cfg.k).into_vec();
        picked.sort_unstable();
        picked
    };

    let objectness = scores.objectness.select(Axis(0), &rows);
    let weights = softmax(objectness.view());
    let mut probs = Array1::zeros(scores.num_classes());
    for (w, &j) in weights.iter().zip(&rows) {
        let q = softmax(scores.class_logits.row(j));
        probs.scaled_add(*w, &q);
    }
    // rounding can push a sum of convex weights a hair past 1
    probs.mapv_inplace(|p: f64| p.min(1.0));
    Ok(probs)
}

/// Multi-label binary cross-entropy, averaged over classes.
pub fn wsl_loss(image_probs: &[f64], labels: &WeakLabels) -> Result<f64> {
    if image_probs.len() != labels.len() {
        return Err(Error::arg(format!(
            "{} probabilities for {} labels",
            image_probs.len(),
            labels.len()
        )));
    }
    if image_probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = image_probs
        .iter()
        .zip(labels.flags())
        .map(|(&p, &y)| {
            let p = clamp_prob(p);
            if y {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / image_probs.len() as f64)
}

/// Weights of the fully connected layer mapping labels to channel gates.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// Channels x classes.
    pub weight: Array2<f64>,
    /// One entry per channel.
    pub bias: Array1<f64>,
}

impl AttentionParams {
    pub fn new(weight: Array2<f64>, bias: Array1<f64>) -> Result<Self> {
        if weight.nrows() != bias.len() {
            return Err(Error::arg(format!(
                "weight has {} rows but bias has {} entries",
                weight.nrows(),
                bias.len()
            )));
        }
        if weight.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(Error::arg("attention parameters must be finite"));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(channels: usize, classes: usize) -> Self {
        Self {
            weight: Array2::zeros((channels, classes)),
            bias: Array1::zeros(channels),
        }
    }

    pub fn channels(&self) -> usize {
        self.bias.len()
    }

    pub fn classes(&self) -> usize {
        self.weight.ncols()
    }
}

/// Gradients of `upstream . label_attention_forward(..)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub feature: Array1<f64>,
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

fn check_dims(feature: &[f64], labels: &WeakLabels, params: &AttentionParams) -> Result<()> {
    if feature.len() != params.channels() {
        return Err(Error::arg(format!(
            "feature has {} channels, attention expects {}",
            feature.len(),
            params.channels()
        )));
    }
    if labels.len() != params.classes() {
        return Err(Error::arg(format!(
            "{} labels, attention expects {}",
            labels.len(),
            params.classes()
        )));
    }
    Ok(())
}

/// The channel gate `sigmoid(W c + b)`.
pub fn attention_map(labels: &WeakLabels, params: &AttentionParams) -> Array1<f64> {
    let c = Array1::from(labels.as_f64());
    (params.weight.dot(&c) + &params.bias).mapv(sigmoid)
}

/// `sigmoid(W c + b) * feature`, elementwise.
pub fn label_attention_forward(
    feature: &[f64],
    labels: &WeakLabels,
    params: &AttentionParams,
) -> Result<Array1<f64>> {
    check_dims(feature, labels, params)?;
    Ok(attention_map(labels, params) * ArrayView1::from(feature))
}

/// Analytic gradients of the forward map contracted with `upstream`.
pub fn label_attention_backward(
    feature: &[f64],
    labels: &WeakLabels,
    params: &AttentionParams,
    upstream: &[f64],
) -> Result<AttentionGrads> {
    check_dims(feature, labels, params)?;
    if upstream.len() != feature.len() {
        return Err(Error::arg(format!(
            "upstream gradient has {} entries, expected {}",
            upstream.len(),
            feature.len()
        )));
    }
    let a = attention_map(labels, params);
    let g = ArrayView1::from(upstream);
    let f = ArrayView1::from(feature);
    let grad_feature = &g * &a;
    let grad_bias = &g * &f * &a.mapv(|v| v * (1.0 - v));
    let c = Array1::from(labels.as_f64());
    let grad_weight = grad_bias
        .view()
        .insert_axis(Axis(1))
        .dot(&c.view().insert_axis(Axis(0)));
    Ok(AttentionGrads {
        feature: grad_feature,
        weight: grad_weight,
        bias: grad_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding::rng_from_seed;
    use ndarray::array;

    #[test]
    fn image_prob_examples() {
        assert_eq!(wsl_image_prob(&[0.0]).unwrap(), 0.5);
        assert!((wsl_image_prob(&[0.0; 4]).unwrap() - 0.5).abs() < 1e-15);
        // softmax weight of +10 is 1/(1+e^-20); evaluated directly
        let w = 1.0 / (1.0 + (-20.0f64).exp());
        let expected = w * sigmoid(10.0) + (1.0 - w) * sigmoid(-10.0);
        let got = wsl_image_prob(&[10.0, -10.0]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((got - 0.99995).abs() < 1e-5);
        assert!(wsl_image_prob(&[]).is_err());
    }

    fn logits_for(q: &[f64]) -> Vec<f64> {
        q.iter().map(|p| p.ln()).collect()
    }

    #[test]
    fn rpn_prob_hand_example() {
        let rows = [logits_for(&[0.9, 0.1]), logits_for(&[0.1, 0.9])];
        let scores = ProposalScores::new(
            array![3.0f64.ln(), 0.0],
            Array2::from_shape_vec((2, 2), rows.concat()).unwrap(),
        )
        .unwrap();
        let mut rng = rng_from_seed(0);
        let p = wsl_image_prob_rpn(&scores, &WslConfig::default(), &mut rng).unwrap();
        assert!((p[0] - 0.7).abs() < 1e-12);
        assert!((p[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn rpn_prob_single_proposal_is_class_softmax() {
        let scores = ProposalScores::new(array![4.2], array![[1.0, -2.0, 0.5]]).unwrap();
        let mut rng = rng_from_seed(0);
        let p = wsl_image_prob_rpn(&scores, &WslConfig::default(), &mut rng).unwrap();
        let q = softmax(array![1.0, -2.0, 0.5].view());
        for (a, b) in p.iter().zip(q.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn rpn_prob_identical_rows_ignore_objectness() {
        let scores = ProposalScores::new(array![5.0, -3.0], array![[0.3, 0.1], [0.3, 0.1]]).unwrap();
        let mut rng = rng_from_seed(0);
        let p = wsl_image_prob_rpn(&scores, &WslConfig::default(), &mut rng).unwrap();
        let q = softmax(array![0.3, 0.1].view());
        assert!((p[0] - q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
    }

    #[test]
    fn rpn_prob_subsamples_when_k_small() {
        let n = 50;
        let scores = ProposalScores::new(
            Array1::from_iter((0..n).map(|i| i as f64 / 10.0)),
            Array2::from_shape_fn((n, 3), |(i, k)| ((i * 7 + k * 3) % 5) as f64),
        )
        .unwrap();
        let cfg = WslConfig { k: 8 };
        let a = wsl_image_prob_rpn(&scores, &cfg, &mut rng_from_seed(1)).unwrap();
        let b = wsl_image_prob_rpn(&scores, &cfg, &mut rng_from_seed(1)).unwrap();
        assert_eq!(a, b);
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(wsl_image_prob_rpn(&scores, &WslConfig { k: 0 }, &mut rng_from_seed(1)).is_err());
    }

    #[test]
    fn loss_examples() {
        let labels = WeakLabels::new(vec![true]);
        assert!((wsl_loss(&[0.5], &labels).unwrap() - 2f64.ln()).abs() < 1e-15);
        let two = WeakLabels::new(vec![true, false]);
        assert!((wsl_loss(&[0.5, 0.5], &two).unwrap() - 2f64.ln()).abs() < 1e-15);
        // perfect prediction, saturated at the clamp
        assert!(wsl_loss(&[1.0, 0.0], &two).unwrap() < 1e-11);
        assert!(wsl_loss(&[0.5], &two).is_err());
    }

    #[test]
    fn attention_forward_examples() {
        let labels = WeakLabels::new(vec![true, false]);
        let zero = AttentionParams::zeros(3, 2);
        let out = label_attention_forward(&[2.0, -4.0, 1.0], &labels, &zero).unwrap();
        assert_eq!(out, array![1.0, -2.0, 0.5]);

        let p = AttentionParams::new(array![[1.5, -2.0]], array![0.0]).unwrap();
        let out = label_attention_forward(&[3.0], &WeakLabels::empty(2), &p).unwrap();
        assert_eq!(out, array![1.5]);

        // sigmoid(ln 3) = 0.75
        let p = AttentionParams::new(array![[3f64.ln()]], array![0.0]).unwrap();
        let out = label_attention_forward(&[2.0], &WeakLabels::new(vec![true]), &p).unwrap();
        assert!((out[0] - 1.5).abs() < 1e-15);

        assert!(label_attention_forward(&[1.0, 2.0], &WeakLabels::new(vec![true]), &p).is_err());
        assert!(label_attention_forward(&[1.0], &WeakLabels::empty(2), &p).is_err());
    }

    #[test]
    fn attention_backward_zero_cases() {
        let p = AttentionParams::new(array![[0.3, -0.2], [1.0, 0.5]], array![0.1, -0.4]).unwrap();
        let labels = WeakLabels::new(vec![true, true]);
        let g = label_attention_backward(&[1.0, 2.0], &labels, &p, &[0.0, 0.0]).unwrap();
        assert!(g.feature.iter().chain(g.weight.iter()).chain(g.bias.iter()).all(|&v| v == 0.0));

        let g = label_attention_backward(&[1.0, 2.0], &WeakLabels::empty(2), &p, &[0.7, -1.1]).unwrap();
        assert!(g.weight.iter().all(|&v| v == 0.0));
        assert!(g.bias.iter().all(|&v| v != 0.0));

        assert!(label_attention_backward(&[1.0, 2.0], &labels, &p, &[1.0]).is_err());
    }
}
