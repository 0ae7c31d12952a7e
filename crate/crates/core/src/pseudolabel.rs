//! Pseudo-label generation strategies.
//!
//! [`rps_sample`] is Random Pseudo-label Sampling: per labelled class the
//! detections are grouped with [`nms_group`], each group is kept with
//! probability equal to its maximum score, and a kept group emits one member
//! drawn in proportion to the member scores. [`hard_threshold`] and
//! [`top1_per_label`] are the deterministic baselines it is compared with.
//!
//! Uniform draws are consumed in a fixed order: for each flagged class in
//! ascending order, for each group in head-score order, one draw for the keep
//! decision and, if kept, one draw for the member choice.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{class_view, Detection, WeakLabels};
use crate::seeding::UniformSource;
use crate::suppression::{nms, nms_group, DEFAULT_IOU_THR};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoLabel {
    pub class_id: usize,
    pub bbox: BBox,
    /// Raw class score of the selected detection.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    pub image_id: String,
    pub labels: Vec<PseudoLabel>,
    pub strategy_tag: String,
}

impl PseudoLabelSet {
    pub fn new(image_id: impl Into<String>, strategy_tag: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            labels: Vec::new(),
            strategy_tag: strategy_tag.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RpsConfig {
    /// IoU threshold handed to `nms_group`.
    pub iou_thr: f64,
    /// Number of independent pseudo-label sets drawn per image (B').
    pub sample_count: usize,
}

impl Default for RpsConfig {
    fn default() -> Self {
        Self {
            iou_thr: DEFAULT_IOU_THR,
            sample_count: 1,
        }
    }
}

impl RpsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.iou_thr > 0.0 && self.iou_thr <= 1.0) {
            return Err(Error::arg(format!("iou threshold {} outside (0, 1]", self.iou_thr)));
        }
        if self.sample_count == 0 {
            return Err(Error::arg("sample count must be at least 1"));
        }
        Ok(())
    }
}

/// Inverse-CDF draw from a probability vector: the first index whose
/// cumulative probability exceeds `u`. Rounding slack at the top end falls to
/// the last index with positive probability.
pub fn random_choice(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len().saturating_sub(1))
}

fn check_labels(dets: &[Detection], labels: &WeakLabels) -> Result<()> {
    if let Some(d) = dets.iter().find(|d| d.num_classes() != labels.len()) {
        return Err(Error::arg(format!(
            "detection has {} class scores but the weak labels have {} entries",
            d.num_classes(),
            labels.len()
        )));
    }
    Ok(())
}

/// Draws one pseudo-label set by Random Pseudo-label Sampling.
///
/// Classes whose weak flag is 0 are skipped. Output is ordered by class, then
/// by group.
pub fn rps_sample<U: UniformSource + ?Sized>(
    image_id: &str,
    dets: &[Detection],
    labels: &WeakLabels,
    cfg: &RpsConfig,
    rng: &mut U,
) -> Result<PseudoLabelSet> {
    cfg.validate()?;
    check_labels(dets, labels)?;
    let mut out = PseudoLabelSet::new(image_id, "rps");
    for k in labels.positive_classes() {
        let (boxes, scores) = class_view(dets, k, labels.len())?;
        for group in nms_group(&boxes, &scores, cfg.iou_thr)? {
            // step 1: keep the group with probability max(S_g)
            let max_score = group.max_score(&scores);
            let u = rng.next_uniform();
            if u > max_score || max_score <= 0.0 {
                continue;
            }
            // step 2: pick a member in proportion to its score
            let member_scores: Vec<f64> = group.indices().iter().map(|&i| scores[i]).collect();
            let total: f64 = member_scores.iter().sum();
            let probs: Vec<f64> = member_scores.iter().map(|s| s / total).collect();
            let pick = group.indices()[random_choice(&probs, rng.next_uniform())];
            out.labels.push(PseudoLabel {
                class_id: k,
                bbox: boxes[pick],
                score: scores[pick],
            });
        }
    }
    Ok(out)
}

/// Draws `cfg.sample_count` independent pseudo-label sets from one stream.
pub fn rps_samples<U: UniformSource + ?Sized>(
    image_id: &str,
    dets: &[Detection],
    labels: &WeakLabels,
    cfg: &RpsConfig,
    rng: &mut U,
) -> Result<Vec<PseudoLabelSet>> {
    cfg.validate()?;
    (0..cfg.sample_count)
        .map(|_| rps_sample(image_id, dets, labels, cfg, rng))
        .collect()
}

/// Confidence-threshold baseline: per class, standard NMS, then keep the
/// heads whose class score is at least `tau`.
///
/// With `labels` supplied only flagged classes are considered; without them
/// every class is (the purely semi-supervised setting).
pub fn hard_threshold(
    image_id: &str,
    dets: &[Detection],
    labels: Option<&WeakLabels>,
    tau: f64,
    iou_thr: f64,
) -> Result<PseudoLabelSet> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::arg(format!("tau {tau} outside (0, 1)")));
    }
    let mut out = PseudoLabelSet::new(image_id, "threshold");
    let Some(first) = dets.first() else {
        return Ok(out);
    };
    let num_classes = first.num_classes();
    if let Some(l) = labels {
        check_labels(dets, l)?;
    }
    for k in 0..num_classes {
        if labels.is_some_and(|l| !l.get(k)) {
            continue;
        }
        let (boxes, scores) = class_view(dets, k, num_classes)?;
        for head in nms(&boxes, &scores, iou_thr)? {
            if scores[head] >= tau {
                out.labels.push(PseudoLabel {
                    class_id: k,
                    bbox: boxes[head],
                    score: scores[head],
                });
            }
        }
    }
    Ok(out)
}

/// One-instance-per-label baseline: for each flagged class, the detection
/// with the highest class score (ties by lowest index).
pub fn top1_per_label(image_id: &str, dets: &[Detection], labels: &WeakLabels) -> Result<PseudoLabelSet> {
    check_labels(dets, labels)?;
    let mut out = PseudoLabelSet::new(image_id, "top1");
    for k in labels.positive_classes() {
        let best = dets
            .iter()
            .enumerate()
            .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                Some((_, s)) if s >= d.class_scores[k] => best,
                _ => Some((i, d.class_scores[k])),
            });
        if let Some((i, score)) = best {
            out.labels.push(PseudoLabel {
                class_id: k,
                bbox: dets[i].bbox,
                score,
            });
        }
    }
    Ok(out)
}

/// Anything that turns one image's detections into pseudo labels.
pub trait PseudoLabeler: Send + Sync {
    fn tag(&self) -> String;

    fn is_stochastic(&self) -> bool;

    fn label(
        &self,
        image_id: &str,
        dets: &[Detection],
        labels: &WeakLabels,
        rng: &mut dyn RngCore,
    ) -> Result<PseudoLabelSet>;
}

/// The built-in strategies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Strategy {
    Rps(RpsConfig),
    Threshold {
        tau: f64,
        iou_thr: f64,
        /// Restrict to classes flagged in the weak labels.
        label_aware: bool,
    },
    Top1,
}

impl Strategy {
    pub fn threshold(tau: f64) -> Self {
        Strategy::Threshold {
            tau,
            iou_thr: DEFAULT_IOU_THR,
            label_aware: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Strategy::Rps(cfg) => cfg.validate(),
            Strategy::Threshold { tau, iou_thr, .. } => {
                if !(*tau > 0.0 && *tau < 1.0) {
                    return Err(Error::arg(format!("tau {tau} outside (0, 1)")));
                }
                if !(*iou_thr > 0.0 && *iou_thr <= 1.0) {
                    return Err(Error::arg(format!("iou threshold {iou_thr} outside (0, 1]")));
                }
                Ok(())
            }
            Strategy::Top1 => Ok(()),
        }
    }
}

impl PseudoLabeler for Strategy {
    fn tag(&self) -> String {
        match self {
            Strategy::Rps(_) => "rps".into(),
            Strategy::Threshold { .. } => "threshold".into(),
            Strategy::Top1 => "top1".into(),
        }
    }

    fn is_stochastic(&self) -> bool {
        matches!(self, Strategy::Rps(_))
    }

    /// For RPS this draws a single set regardless of `sample_count`.
    fn label(
        &self,
        image_id: &str,
        dets: &[Detection],
        labels: &WeakLabels,
        rng: &mut dyn RngCore,
    ) -> Result<PseudoLabelSet> {
        match self {
            Strategy::Rps(cfg) => rps_sample(image_id, dets, labels, cfg, rng),
            Strategy::Threshold {
                tau,
                iou_thr,
                label_aware,
            } => hard_threshold(image_id, dets, label_aware.then_some(labels), *tau, *iou_thr),
            Strategy::Top1 => top1_per_label(image_id, dets, labels),
        }
    }
}
