//! Exact and approximate evaluation of the EM objective for one image and one
//! foreground class.
//!
//! A model is represented by its per-proposal foreground probabilities
//! ([`ProposalPosterior`]). An [`Assignment`] marks each of the `N` proposals
//! foreground or background; the assignments consistent with a positive image
//! label form the set `B` of the `2^N - 1` masks with at least one foreground
//! bit. For a previous model `θ'` (the prior) and a current model `θ`:
//!
//! ```text
//! P(c=1 | θ)      = Σ_{t∈B} P(t | θ)                      (exact_weak_prob)
//! P(t | c; θ')    = P(t | θ') / P(c=1 | θ')               (conditioned on B)
//! Q               = Σ_{t∈B} P(t | c; θ') log P(t | θ)      (exact_q)
//!                 ≈ 1/B' Σ_{t ~ P(t|c;θ')} log P(t | θ)    (mc_q)
//!                 ≈ max_{t∈B} P(t | c; θ') log P(t | θ)    (max_q)
//! ```
//!
//! The exact routines enumerate `B` and are capped at
//! [`ENUMERATION_CAP`] proposals.

use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::seeding::UniformSource;
use crate::wsl::clamp_prob;

/// Largest `N` the enumerating routines accept (about 10^6 assignments).
pub const ENUMERATION_CAP: usize = 20;

/// Assignments are stored as bit masks.
pub const MAX_PROPOSALS: usize = 64;

/// Conditioning on `B` is refused when its prior mass falls below this.
pub const DEGENERATE_MASS: f64 = 1e-9;

pub const DEFAULT_REJECTION_BUDGET: usize = 10_000;

/// Per-proposal foreground probabilities (and optionally predicted boxes)
/// standing in for a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalPosterior {
    fg_prob: Vec<f64>,
    coords: Option<Vec<BBox>>,
}

impl ProposalPosterior {
    pub fn new(fg_prob: Vec<f64>) -> Result<Self> {
        if fg_prob.len() > MAX_PROPOSALS {
            return Err(Error::arg(format!(
                "{} proposals exceed the supported maximum of {MAX_PROPOSALS}",
                fg_prob.len()
            )));
        }
        if let Some(p) = fg_prob.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::arg(format!("probability {p} outside [0, 1]")));
        }
        Ok(Self {
            fg_prob,
            coords: None,
        })
    }

    pub fn with_coords(fg_prob: Vec<f64>, coords: Vec<BBox>) -> Result<Self> {
        if coords.len() != fg_prob.len() {
            return Err(Error::arg(format!(
                "{} probabilities but {} boxes",
                fg_prob.len(),
                coords.len()
            )));
        }
        let mut m = Self::new(fg_prob)?;
        m.coords = Some(coords);
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.fg_prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_prob.is_empty()
    }

    pub fn fg_prob(&self) -> &[f64] {
        &self.fg_prob
    }

    pub fn coords(&self) -> Option<&[BBox]> {
        self.coords.as_deref()
    }

    fn clamped(&self) -> Vec<f64> {
        self.fg_prob.iter().map(|&p| clamp_prob(p)).collect()
    }
}

/// A foreground/background choice for every proposal. Bit `j` is proposal `j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Assignment {
    bits: u64,
    len: usize,
}

impl Assignment {
    pub fn from_bits(bits: u64, len: usize) -> Result<Self> {
        if len > MAX_PROPOSALS || (len < MAX_PROPOSALS && bits >> len != 0) {
            return Err(Error::arg(format!("bit pattern {bits:#b} does not fit {len} proposals")));
        }
        Ok(Self { bits, len })
    }

    pub fn from_foreground(fg: &[bool]) -> Result<Self> {
        if fg.len() > MAX_PROPOSALS {
            return Err(Error::arg(format!("{} proposals exceed {MAX_PROPOSALS}", fg.len())));
        }
        let bits = fg
            .iter()
            .enumerate()
            .fold(0u64, |acc, (j, &f)| if f { acc | 1 << j } else { acc });
        Ok(Self { bits, len: fg.len() })
    }

    pub fn bits(&self) -> u64 {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_foreground(&self, j: usize) -> bool {
        self.bits >> j & 1 == 1
    }

    pub fn foreground_count(&self) -> u32 {
        self.bits.count_ones()
    }

    /// Whether the assignment has at least one foreground proposal.
    pub fn in_b(&self) -> bool {
        self.bits != 0
    }
}

/// Proposals left to right, `1` for foreground.
impl fmt::Display for Assignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for j in 0..self.len {
            f.write_str(if self.is_foreground(j) { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// Weights of the supervised terms and of the weakly-annotated term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_u: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_u: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_u", self.lambda_u),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::arg(format!("{name} = {v} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

fn check_cap(n: usize) -> Result<()> {
    if n == 0 || n > ENUMERATION_CAP {
        return Err(Error::arg(format!(
            "N = {n} outside the enumeration range [1, {ENUMERATION_CAP}]"
        )));
    }
    Ok(())
}

fn check_len(t: &Assignment, m: &ProposalPosterior) -> Result<()> {
    if t.len() != m.len() {
        return Err(Error::arg(format!(
            "assignment covers {} proposals, model has {}",
            t.len(),
            m.len()
        )));
    }
    Ok(())
}

/// Every assignment in `B` for `n` proposals, in ascending bit-pattern order.
pub fn enumerate_b(n: usize) -> Result<impl Iterator<Item = Assignment>> {
    check_cap(n)?;
    Ok((1u64..1 << n).map(move |bits| Assignment { bits, len: n }))
}

/// Compensated (Neumaier) summation; the enumerations add up to 10^6 terms.
#[derive(Debug, Default, Clone, Copy)]
struct Accumulator {
    sum: f64,
    comp: f64,
}

impl Accumulator {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn total(&self) -> f64 {
        self.sum + self.comp
    }
}

fn prob_bits(bits: u64, clamped: &[f64]) -> f64 {
    clamped
        .iter()
        .enumerate()
        .map(|(j, &p)| if bits >> j & 1 == 1 { p } else { 1.0 - p })
        .product()
}

/// Precomputed per-proposal log-likelihood terms of a model.
struct LogTerms {
    fg: Vec<f64>,
    bg: Vec<f64>,
}

impl LogTerms {
    fn new(model: &ProposalPosterior, coords_gt: Option<&[BBox]>) -> Result<Self> {
        let clamped = model.clamped();
        let mut fg: Vec<f64> = clamped.iter().map(|p| p.ln()).collect();
        let bg = clamped.iter().map(|p| (1.0 - p).ln()).collect();
        if let Some(gt) = coords_gt {
            let pred = model.coords().ok_or_else(|| {
                Error::arg("target coordinates given but the model predicts no boxes")
            })?;
            if gt.len() != pred.len() {
                return Err(Error::arg(format!(
                    "{} target boxes for {} proposals",
                    gt.len(),
                    pred.len()
                )));
            }
            for (j, (g, p)) in gt.iter().zip(pred).enumerate() {
                fg[j] -= g.l1_distance(p);
            }
        }
        Ok(Self { fg, bg })
    }

    fn loglik(&self, bits: u64) -> f64 {
        (0..self.fg.len())
            .map(|j| if bits >> j & 1 == 1 { self.fg[j] } else { self.bg[j] })
            .sum()
    }
}

/// The pseudo-label boxes for a Q computation: the prior's predictions, when
/// both models carry boxes.
fn coord_targets<'a>(prior: &'a ProposalPosterior, model: &ProposalPosterior) -> Option<&'a [BBox]> {
    match (prior.coords(), model.coords()) {
        (Some(gt), Some(_)) => Some(gt),
        _ => None,
    }
}

/// `Π_{fg} p_j · Π_{bg} (1 - p_j)` with clamped probabilities.
pub fn assignment_prob(t: &Assignment, m: &ProposalPosterior) -> Result<f64> {
    check_len(t, m)?;
    Ok(prob_bits(t.bits, &m.clamped()))
}

/// Probability of a positive image label, by summing over all of `B`.
pub fn exact_weak_prob(m: &ProposalPosterior) -> Result<f64> {
    check_cap(m.len())?;
    let clamped = m.clamped();
    let mut acc = Accumulator::default();
    for bits in 1u64..1 << m.len() {
        acc.add(prob_bits(bits, &clamped));
    }
    Ok(acc.total())
}

/// `1 - Π (1 - p_j)`, the closed form of [`exact_weak_prob`] under
/// independent proposals.
pub fn closed_form_weak_prob(m: &ProposalPosterior) -> f64 {
    1.0 - m.clamped().iter().map(|p| 1.0 - p).product::<f64>()
}

/// Log-likelihood of one supervised proposal:
/// `-(λ1·CE(gt_class, pred_prob) + λ2·L1(gt_box, pred_box))`. Background has
/// no box term.
pub fn supervised_loglik(
    pred_prob: f64,
    pred_box: &BBox,
    gt_class: bool,
    gt_box: Option<&BBox>,
    w: &LossWeights,
) -> Result<f64> {
    if !(0.0..=1.0).contains(&pred_prob) {
        return Err(Error::arg(format!("probability {pred_prob} outside [0, 1]")));
    }
    let p = clamp_prob(pred_prob);
    match (gt_class, gt_box) {
        (true, Some(gt)) => Ok(-(w.lambda1 * -p.ln() + w.lambda2 * gt.l1_distance(pred_box))),
        (false, None) => Ok(-(w.lambda1 * -(1.0 - p).ln())),
        (true, None) => Err(Error::arg("foreground target requires a box")),
        (false, Some(_)) => Err(Error::arg("background target cannot carry a box")),
    }
}

/// `log P(t | θ)`: Bernoulli terms over all proposals, minus the L1
/// coordinate error on foreground proposals when target boxes are given.
pub fn assignment_loglik(
    t: &Assignment,
    m: &ProposalPosterior,
    coords_gt: Option<&[BBox]>,
) -> Result<f64> {
    check_len(t, m)?;
    Ok(LogTerms::new(m, coords_gt)?.loglik(t.bits))
}

fn check_pair(prior: &ProposalPosterior, model: &ProposalPosterior) -> Result<()> {
    if prior.len() != model.len() {
        return Err(Error::arg(format!(
            "prior has {} proposals, model has {}",
            prior.len(),
            model.len()
        )));
    }
    Ok(())
}

fn conditioning_mass(prior: &ProposalPosterior) -> Result<f64> {
    let z = exact_weak_prob(prior)?;
    if z < DEGENERATE_MASS {
        return Err(Error::DegeneratePosterior(format!(
            "prior puts mass {z:e} on assignments with a foreground proposal"
        )));
    }
    Ok(z)
}

/// The prior's assignment probabilities conditioned on `B`, in enumeration
/// order. Sums to one.
pub fn posterior_over_b(prior: &ProposalPosterior) -> Result<Vec<(Assignment, f64)>> {
    let z = conditioning_mass(prior)?;
    let clamped = prior.clamped();
    Ok(enumerate_b(prior.len())?
        .map(|t| (t, prob_bits(t.bits, &clamped) / z))
        .collect())
}

/// Exact expected log-likelihood of `model` under the prior's posterior on `B`.
pub fn exact_q(prior: &ProposalPosterior, model: &ProposalPosterior) -> Result<f64> {
    check_pair(prior, model)?;
    let z = conditioning_mass(prior)?;
    let clamped = prior.clamped();
    let logs = LogTerms::new(model, coord_targets(prior, model))?;
    let mut acc = Accumulator::default();
    for bits in 1u64..1 << prior.len() {
        acc.add(prob_bits(bits, &clamped) / z * logs.loglik(bits));
    }
    Ok(acc.total())
}

/// Draws an assignment from the prior conditioned on `B`, by drawing every
/// proposal independently and rejecting the all-background outcome.
pub fn posterior_sample<U: UniformSource + ?Sized>(
    prior: &ProposalPosterior,
    rng: &mut U,
) -> Result<Assignment> {
    posterior_sample_with_budget(prior, rng, DEFAULT_REJECTION_BUDGET)
}

pub fn posterior_sample_with_budget<U: UniformSource + ?Sized>(
    prior: &ProposalPosterior,
    rng: &mut U,
    budget: usize,
) -> Result<Assignment> {
    if prior.is_empty() {
        return Err(Error::DegeneratePosterior("no proposals".into()));
    }
    for _ in 0..budget {
        let mut bits = 0u64;
        for (j, &p) in prior.fg_prob().iter().enumerate() {
            if rng.next_uniform() < p {
                bits |= 1 << j;
            }
        }
        if bits != 0 {
            return Ok(Assignment {
                bits,
                len: prior.len(),
            });
        }
    }
    Err(Error::DegeneratePosterior(format!(
        "no foreground proposal drawn in {budget} attempts"
    )))
}

/// A Monte-Carlo estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

/// Monte-Carlo estimate of [`exact_q`] from `b_prime` posterior samples.
pub fn mc_q<U: UniformSource + ?Sized>(
    prior: &ProposalPosterior,
    model: &ProposalPosterior,
    b_prime: usize,
    rng: &mut U,
) -> Result<f64> {
    Ok(mc_q_estimate(prior, model, b_prime, rng)?.mean)
}

pub fn mc_q_estimate<U: UniformSource + ?Sized>(
    prior: &ProposalPosterior,
    model: &ProposalPosterior,
    b_prime: usize,
    rng: &mut U,
) -> Result<McEstimate> {
    check_pair(prior, model)?;
    if b_prime == 0 {
        return Err(Error::arg("B' must be at least 1"));
    }
    let logs = LogTerms::new(model, coord_targets(prior, model))?;
    let mut sum = Accumulator::default();
    let mut values = Vec::with_capacity(b_prime);
    for _ in 0..b_prime {
        let v = logs.loglik(posterior_sample(prior, rng)?.bits);
        sum.add(v);
        values.push(v);
    }
    let n = b_prime as f64;
    let mean = sum.total() / n;
    let std_error = if b_prime > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate {
        mean,
        std_error,
        samples: b_prime,
    })
}

/// Which quantity [`max_q`] maximises over `B`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaxQMode {
    /// `P(t | c; θ') · log P(t | θ)` itself.
    #[default]
    Product,
    /// `P(t | c; θ')` alone; the product is then evaluated at that assignment.
    PosteriorOnly,
}

/// Brute-force maximum of the single-assignment approximation to Q. Ties go
/// to the smaller bit pattern.
pub fn max_q(
    prior: &ProposalPosterior,
    model: &ProposalPosterior,
    mode: MaxQMode,
) -> Result<(f64, Assignment)> {
    check_pair(prior, model)?;
    let z = conditioning_mass(prior)?;
    let clamped = prior.clamped();
    let logs = LogTerms::new(model, coord_targets(prior, model))?;
    let mut best: Option<(f64, f64, u64)> = None;
    for bits in 1u64..1 << prior.len() {
        let post = prob_bits(bits, &clamped) / z;
        let value = post * logs.loglik(bits);
        let key = match mode {
            MaxQMode::Product => value,
            MaxQMode::PosteriorOnly => post,
        };
        if best.is_none_or(|(k, _, _)| key > k) {
            best = Some((key, value, bits));
        }
    }
    let (_, value, bits) = best.expect("B is non-empty for N >= 1");
    Ok((value, Assignment { bits, len: prior.len() }))
}

/// Outcome of thresholding the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdAssignment {
    pub assignment: Assignment,
    /// False when no proposal cleared the threshold.
    pub in_b: bool,
}

/// Foreground exactly where the prior probability is at least `p_t`.
pub fn threshold_assignment(prior: &ProposalPosterior, p_t: f64) -> Result<ThresholdAssignment> {
    if !(p_t > 0.0 && p_t < 1.0) {
        return Err(Error::arg(format!("threshold {p_t} outside (0, 1)")));
    }
    let fg: Vec<bool> = prior.fg_prob().iter().map(|&p| p >= p_t).collect();
    let assignment = Assignment::from_foreground(&fg)?;
    Ok(ThresholdAssignment {
        assignment,
        in_b: assignment.in_b(),
    })
}

/// Supervised log-likelihoods plus `λ_u` times the weakly-annotated Q terms.
pub fn joint_objective(sup_terms: &[f64], weak_q_terms: &[f64], w: &LossWeights) -> f64 {
    sup_terms.iter().sum::<f64>() + w.lambda_u * weak_q_terms.iter().sum::<f64>()
}
