//! Synthetic scenes, a simulated agent detector, and pseudo-label quality
//! metrics.
//!
//! Pseudo-label quality is measured directly (precision and recall against
//! the ground truth at one IoU threshold) instead of through a detector
//! trained on the labels.

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Exp1, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Dataset, Detection, ImageRecord, Instance};
use crate::pseudolabel::{PseudoLabelSet, PseudoLabeler};
use crate::seeding::derive_rng;
use crate::wsl::{clamp_prob, sigmoid, PROB_EPS};

/// Placement retries per instance when overlap is not allowed.
const PLACEMENT_RETRIES: usize = 1000;
/// Non-overlapping placement requires pairwise IoU below this.
const MAX_PLACEMENT_IOU: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub width: u32,
    pub height: u32,
    /// Inclusive range of instance counts.
    pub instance_count: (usize, usize),
    pub num_classes: usize,
    /// Inclusive range of box side lengths in pixels.
    pub box_size: (f64, f64),
    pub overlap_allowed: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
            instance_count: (1, 6),
            num_classes: 3,
            box_size: (24.0, 120.0),
            overlap_allowed: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::arg("canvas must have positive size"));
        }
        if self.num_classes == 0 {
            return Err(Error::arg("at least one class is required"));
        }
        let (lo, hi) = self.instance_count;
        if lo > hi {
            return Err(Error::arg(format!("empty instance count range [{lo}, {hi}]")));
        }
        let (smin, smax) = self.box_size;
        if !(smin > 0.0 && smin <= smax) {
            return Err(Error::arg(format!("bad box size range [{smin}, {smax}]")));
        }
        if smax > self.width.min(self.height) as f64 {
            return Err(Error::arg(format!(
                "box size {smax} does not fit a {}x{} canvas",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Knobs of the simulated detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorNoise {
    /// Standard deviation of the Gaussian jitter added to every corner.
    pub localization_sigma: f64,
    /// `(slope, offset)` applied to true-positive scores in logit space.
    pub score_calibration: (f64, f64),
    /// Expected number of spurious detections per image (a Poisson mean).
    pub false_positive_rate: f64,
    /// Probability that an instance yields no detection.
    pub miss_rate: f64,
    /// Probability that a detected instance yields a second, jittered detection.
    pub duplicate_rate: f64,
}

impl DetectorNoise {
    /// A perfect detector.
    pub fn none() -> Self {
        Self {
            localization_sigma: 0.0,
            score_calibration: (1.0, 0.0),
            false_positive_rate: 0.0,
            miss_rate: 0.0,
            duplicate_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.false_positive_rate >= 0.0 && self.false_positive_rate.is_finite()) {
            return Err(Error::arg("false positive rate must be non-negative"));
        }
        let rates = [
            ("miss_rate", self.miss_rate),
            ("duplicate_rate", self.duplicate_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::arg(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if !(self.localization_sigma >= 0.0 && self.localization_sigma.is_finite()) {
            return Err(Error::arg("localization sigma must be non-negative"));
        }
        let (a, b) = self.score_calibration;
        if !(a.is_finite() && b.is_finite()) {
            return Err(Error::arg("score calibration must be finite"));
        }
        Ok(())
    }

    /// Maps a raw confidence through the logit-space calibration.
    pub fn calibrate(&self, raw: f64) -> f64 {
        let p = clamp_prob(raw);
        let (slope, offset) = self.score_calibration;
        if (slope, offset) == (1.0, 0.0) {
            return p;
        }
        clamp_prob(sigmoid(slope * (p / (1.0 - p)).ln() + offset))
    }
}

impl Default for DetectorNoise {
    fn default() -> Self {
        Self {
            localization_sigma: 3.0,
            score_calibration: (1.0, 0.0),
            false_positive_rate: 0.5,
            miss_rate: 0.1,
            duplicate_rate: 0.3,
        }
    }
}

/// Synthetic coordinates live on a 1/64 px grid, where converting between
/// corner and `[x, y, w, h]` form is exact.
fn snap(v: f64) -> f64 {
    (v * 64.0).round() / 64.0
}

fn random_box(cfg: &SceneConfig, rng: &mut dyn RngCore) -> Result<BBox> {
    let (smin, smax) = cfg.box_size;
    let w = snap(rng.random_range(smin..=smax)).clamp(smin, smax);
    let h = snap(rng.random_range(smin..=smax)).clamp(smin, smax);
    let x = snap(rng.random_range(0.0..=cfg.width as f64 - w));
    let y = snap(rng.random_range(0.0..=cfg.height as f64 - h));
    BBox::new(x, y, x + w, y + h)
}

/// Generates a fully-annotated scene with weak labels derived from it.
pub fn generate_scene(image_id: &str, cfg: &SceneConfig, rng: &mut dyn RngCore) -> Result<ImageRecord> {
    cfg.validate()?;
    let (lo, hi) = cfg.instance_count;
    let count = rng.random_range(lo..=hi);
    let mut instances: Vec<Instance> = Vec::with_capacity(count);
    for _ in 0..count {
        let class_id = rng.random_range(0..cfg.num_classes);
        let mut placed = None;
        for _ in 0..PLACEMENT_RETRIES {
            let b = random_box(cfg, rng)?;
            let clear = cfg.overlap_allowed
                || instances
                    .iter()
                    .filter_map(Instance::bbox)
                    .all(|o| o.iou(&b) < MAX_PLACEMENT_IOU);
            if clear {
                placed = Some(b);
                break;
            }
        }
        let bbox = placed.ok_or_else(|| {
            Error::Generation(format!(
                "could not place instance {} of {count} in {image_id} after {PLACEMENT_RETRIES} tries",
                instances.len() + 1
            ))
        })?;
        instances.push(Instance::foreground(class_id, bbox));
    }
    ImageRecord::fully_annotated(image_id, cfg.width, cfg.height, cfg.num_classes, instances)
}

/// Generates `n` scenes, one derived stream per image.
pub fn generate_dataset(n: usize, cfg: &SceneConfig, seed: u64) -> Result<Dataset> {
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("{}", i + 1);
            let mut rng = derive_rng(seed, &[b"scene", id.as_bytes()]);
            generate_scene(&id, cfg, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Dataset::default_categories(cfg.num_classes), records)
}

fn jitter(b: &BBox, sigma: f64, width: f64, height: f64, rng: &mut dyn RngCore) -> Result<BBox> {
    if sigma == 0.0 {
        return Ok(*b);
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::arg(e.to_string()))?;
    let mut c = b.corners();
    for v in &mut c {
        *v = snap(*v + normal.sample(rng));
    }
    let (x1, x2) = (c[0].min(c[2]).clamp(0.0, width), c[0].max(c[2]).clamp(0.0, width));
    let (y1, y2) = (c[1].min(c[3]).clamp(0.0, height), c[1].max(c[3]).clamp(0.0, height));
    BBox::new(x1, y1, x2, y2)
}

/// Score vector peaked at `class_id` with value `score`; the remaining mass
/// is spread evenly over the other classes.
fn peaked_scores(num_classes: usize, class_id: usize, score: f64) -> Vec<f64> {
    let rest = if num_classes > 1 {
        (1.0 - score) / (num_classes - 1) as f64
    } else {
        0.0
    };
    (0..num_classes)
        .map(|k| if k == class_id { score } else { rest })
        .collect()
}

/// Simulates an agent detector on a fully-annotated record.
///
/// A detected instance gets a jittered box; its raw confidence is the IoU
/// between the jittered and true box (so a perfect detector reports
/// `1 - 1e-12`), which is then passed through the calibration. Spurious
/// detections get uniform boxes and flat Dirichlet scores.
pub fn simulate_detector(
    record: &ImageRecord,
    noise: &DetectorNoise,
    rng: &mut dyn RngCore,
) -> Result<Vec<Detection>> {
    noise.validate()?;
    if !record.is_fully_annotated() {
        return Err(Error::arg(format!(
            "image {} has no box annotations to simulate from",
            record.image_id
        )));
    }
    let c = record.weak_labels.len();
    let (w, h) = (record.width as f64, record.height as f64);
    let mut dets = Vec::new();

    for (class_id, gt) in record.foreground() {
        if rng.random::<f64>() < noise.miss_rate {
            continue;
        }
        let copies = if rng.random::<f64>() < noise.duplicate_rate { 2 } else { 1 };
        for _ in 0..copies {
            let b = jitter(gt, noise.localization_sigma, w, h, rng)?;
            let raw = gt.iou(&b).min(1.0 - PROB_EPS);
            let score = noise.calibrate(raw);
            dets.push(Detection::new(b, peaked_scores(c, class_id, score), None)?);
        }
    }

    if noise.false_positive_rate > 0.0 {
        let poisson = Poisson::new(noise.false_positive_rate).map_err(|e| Error::arg(e.to_string()))?;
        let count = poisson.sample(rng) as usize;
        for _ in 0..count {
            let (x1, x2) = ordered(snap(rng.random_range(0.0..=w)), snap(rng.random_range(0.0..=w)));
            let (y1, y2) = ordered(snap(rng.random_range(0.0..=h)), snap(rng.random_range(0.0..=h)));
            // flat Dirichlet over the classes plus background
            let draws: Vec<f64> = (0..=c).map(|_| Exp1.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let scores = draws[..c].iter().map(|d| (d / total).clamp(0.0, 1.0)).collect();
            dets.push(Detection::new(BBox::new(x1, y1, x2, y2)?, scores, None)?);
        }
    }
    Ok(dets)
}

fn ordered(a: f64, b: f64) -> (f64, f64) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

/// Matching counts and derived rates.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
    pub score_sum: f64,
}

impl MatchCounts {
    pub fn merge(&mut self, other: &MatchCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.iou_sum += other.iou_sum;
        self.score_sum += other.score_sum;
    }

    /// `TP / (TP + FP)`, with `0/0 = 1`.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// `TP / (TP + FN)`, with `0/0 = 1`.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Pseudo-label quality against ground truth at one IoU threshold.
///
/// Precision and recall use `0/0 = 1`. `mean_matched_iou` and
/// `matched_score_mean` are 0 when nothing matched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub iou_thr: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_matched_iou: f64,
    pub matched_score_mean: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub per_class: Vec<ClassReport>,
}

impl QualityReport {
    /// Builds a report from overall and per-class counts.
    pub fn from_counts(iou_thr: f64, total: &MatchCounts, per_class: &[MatchCounts]) -> Self {
        let mean = |s: f64| if total.tp == 0 { 0.0 } else { s / total.tp as f64 };
        Self {
            iou_thr,
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            mean_matched_iou: mean(total.iou_sum),
            matched_score_mean: mean(total.score_sum),
            tp: total.tp,
            fp: total.fp,
            fn_: total.fn_,
            per_class: per_class
                .iter()
                .enumerate()
                .map(|(k, c)| ClassReport {
                    class_id: k,
                    precision: c.precision(),
                    recall: c.recall(),
                    f1: c.f1(),
                    tp: c.tp,
                    fp: c.fp,
                    fn_: c.fn_,
                })
                .collect(),
        }
    }
}

/// Greedy per-class matching: pseudo labels in descending score order each
/// claim the unmatched ground-truth instance of their class with the highest
/// IoU, provided it reaches `iou_thr`. Returns per-class counts.
pub fn match_counts(pseudo: &PseudoLabelSet, record: &ImageRecord, iou_thr: f64) -> Result<Vec<MatchCounts>> {
    if !record.is_fully_annotated() {
        return Err(Error::arg(format!(
            "image {} has no box annotations to evaluate against",
            record.image_id
        )));
    }
    let c = record.weak_labels.len();
    let mut counts = vec![MatchCounts::default(); c];
    let gt: Vec<(usize, &BBox)> = record.foreground().collect();
    let mut matched = vec![false; gt.len()];

    let mut order: Vec<usize> = (0..pseudo.labels.len()).collect();
    order.sort_by(|&a, &b| {
        pseudo.labels[b]
            .score
            .total_cmp(&pseudo.labels[a].score)
            .then(a.cmp(&b))
    });
    for i in order {
        let label = &pseudo.labels[i];
        let class_counts = counts.get_mut(label.class_id).ok_or(Error::OutOfRange {
            index: label.class_id,
            len: c,
        })?;
        let best = gt
            .iter()
            .enumerate()
            .filter(|(g, (k, _))| !matched[*g] && *k == label.class_id)
            .map(|(g, (_, b))| (g, b.iou(&label.bbox)))
            .filter(|&(_, iou)| iou >= iou_thr)
            .fold(None::<(usize, f64)>, |best, cand| match best {
                Some((_, v)) if v >= cand.1 => best,
                _ => Some(cand),
            });
        match best {
            Some((g, iou)) => {
                matched[g] = true;
                class_counts.tp += 1;
                class_counts.iou_sum += iou;
                class_counts.score_sum += label.score;
            }
            None => class_counts.fp += 1,
        }
    }
    for (g, (k, _)) in gt.iter().enumerate() {
        if !matched[g] {
            counts[*k].fn_ += 1;
        }
    }
    Ok(counts)
}

/// Sums per-class (or per-image) counts.
pub fn pool(counts: &[MatchCounts]) -> MatchCounts {
    let mut t = MatchCounts::default();
    for c in counts {
        t.merge(c);
    }
    t
}

/// Scores one pseudo-label set against its record.
pub fn match_and_score(pseudo: &PseudoLabelSet, record: &ImageRecord, iou_thr: f64) -> Result<QualityReport> {
    let per_class = match_counts(pseudo, record, iou_thr)?;
    Ok(QualityReport::from_counts(iou_thr, &pool(&per_class), &per_class))
}

/// A strategy under comparison.
pub struct NamedStrategy {
    pub name: String,
    pub labeler: Box<dyn PseudoLabeler>,
}

impl NamedStrategy {
    pub fn new(name: impl Into<String>, labeler: impl PseudoLabeler + 'static) -> Self {
        Self {
            name: name.into(),
            labeler: Box::new(labeler),
        }
    }
}

/// Mean and sample standard deviation of one metric across trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub stddev: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, stddev: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let stddev = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Self { mean, stddev }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub trials: usize,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    pub mean_matched_iou: Summary,
    pub matched_score_mean: Summary,
    pub pseudo_labels: Summary,
    /// Dataset-level report of every trial.
    pub per_trial: Vec<QualityReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub iou_thr: f64,
    pub images: usize,
    pub rows: Vec<StrategySummary>,
}

/// Where the detections of a comparison come from.
pub enum DetectionSource<'a> {
    /// Simulate the agent detector anew for every trial.
    Simulated(DetectorNoise),
    /// Fixed detections per image id; only the strategies' own randomness
    /// varies between trials.
    Fixed(&'a std::collections::BTreeMap<String, Vec<Detection>>),
}

/// Compares strategies on identical detections.
///
/// For each trial and image the detector is simulated once (from a stream
/// derived from `seed`, the image id and the trial), and every strategy then
/// labels that same detection list with its own derived stream. Per-trial
/// reports pool the counts of all images.
pub fn compare_strategies(
    dataset: &Dataset,
    source: &DetectionSource<'_>,
    strategies: &[NamedStrategy],
    trials: usize,
    iou_thr: f64,
    seed: u64,
) -> Result<ComparisonTable> {
    if trials == 0 {
        return Err(Error::arg("at least one trial is required"));
    }
    if let DetectionSource::Simulated(noise) = source {
        noise.validate()?;
    }
    if let Some(r) = dataset.records().iter().find(|r| !r.is_fully_annotated()) {
        return Err(Error::arg(format!(
            "image {} lacks box annotations; comparisons need ground truth",
            r.image_id
        )));
    }
    let c = dataset.num_classes();
    let mut per_strategy: Vec<Vec<QualityReport>> = vec![Vec::with_capacity(trials); strategies.len()];
    let mut label_counts: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); strategies.len()];

    for trial in 0..trials {
        let trial_tag = (trial as u64).to_le_bytes();
        // per image: per strategy (per-class counts, pseudo-label count)
        let per_image: Vec<Vec<(Vec<MatchCounts>, usize)>> = dataset
            .records()
            .par_iter()
            .map(|record| {
                let id = record.image_id.as_bytes();
                let dets = match source {
                    DetectionSource::Simulated(noise) => {
                        let mut rng = derive_rng(seed, &[b"detector", id, &trial_tag]);
                        simulate_detector(record, noise, &mut rng)?
                    }
                    DetectionSource::Fixed(map) => map.get(&record.image_id).cloned().unwrap_or_default(),
                };
                strategies
                    .iter()
                    .map(|s| {
                        let mut rng = derive_rng(seed, &[b"strategy", s.name.as_bytes(), id, &trial_tag]);
                        let set = s.labeler.label(&record.image_id, &dets, &record.weak_labels, &mut rng)?;
                        Ok((match_counts(&set, record, iou_thr)?, set.len()))
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;

        for (s, reports) in per_strategy.iter_mut().enumerate() {
            let mut classes = vec![MatchCounts::default(); c];
            let mut labels = 0usize;
            for image in &per_image {
                let (counts, n) = &image[s];
                for (acc, cc) in classes.iter_mut().zip(counts) {
                    acc.merge(cc);
                }
                labels += n;
            }
            reports.push(QualityReport::from_counts(iou_thr, &pool(&classes), &classes));
            label_counts[s].push(labels as f64);
        }
    }

    let rows = strategies
        .iter()
        .zip(per_strategy)
        .zip(label_counts)
        .map(|((s, reports), labels)| {
            let field = |f: fn(&QualityReport) -> f64| Summary::of(&reports.iter().map(f).collect::<Vec<_>>());
            StrategySummary {
                strategy: s.name.clone(),
                trials,
                precision: field(|r| r.precision),
                recall: field(|r| r.recall),
                f1: field(|r| r.f1),
                mean_matched_iou: field(|r| r.mean_matched_iou),
                matched_score_mean: field(|r| r.matched_score_mean),
                pseudo_labels: Summary::of(&labels),
                per_trial: reports,
            }
        })
        .collect();
    Ok(ComparisonTable {
        iou_thr,
        images: dataset.records().len(),
        rows,
    })
}
