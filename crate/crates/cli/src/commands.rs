use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use pseudolabel_kit::em::{
    assignment_loglik, exact_q, joint_objective, max_q, mc_q_estimate, threshold_assignment, LossWeights,
    MaxQMode, ProposalPosterior,
};
use pseudolabel_kit::io::{
    load_annotations, load_detections, load_pseudo_labels, write_annotations, write_detections,
    write_pseudo_labels, DetectionMap,
};
use pseudolabel_kit::pseudolabel::rps_samples;
use pseudolabel_kit::seeding::{derive_rng, UniformSource};
use pseudolabel_kit::synth::{
    compare_strategies, generate_dataset, match_counts, pool, simulate_detector, ComparisonTable, DetectionSource,
    MatchCounts, NamedStrategy, QualityReport,
};
use pseudolabel_kit::wsl::{wsl_image_prob, wsl_image_prob_rpn, wsl_loss, ProposalScores, WslConfig};
use pseudolabel_kit::{Dataset, Error, PseudoLabelSet, PseudoLabeler, Result, RpsConfig, Strategy, WeakLabels};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::table::{emit, num, Table};
use crate::{CompareArgs, EmStudyArgs, EvaluateArgs, GenerateArgs, StrategyName, SynthArgs, WslArgs};

/// Label attached to every quality report.
const QUALITY_METRIC: &str = "pseudo-label precision/recall against ground truth (greedy matching)";

fn strategy(name: StrategyName, tau: f64, iou_thr: f64, b_prime: usize, label_aware: bool) -> Result<Strategy> {
    let s = match name {
        StrategyName::Rps => Strategy::Rps(RpsConfig {
            iou_thr,
            sample_count: b_prime,
        }),
        StrategyName::Threshold => Strategy::Threshold {
            tau,
            iou_thr,
            label_aware,
        },
        StrategyName::Top1 => Strategy::Top1,
    };
    s.validate()?;
    Ok(s)
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} = {v} outside (0, 1]")))
    }
}

fn unknown_images(dataset: &Dataset, dets: &DetectionMap) -> Result<()> {
    let problems: Vec<String> = dets
        .keys()
        .filter(|id| dataset.record(id).is_none())
        .map(|id| format!("detections for unknown image {id}"))
        .collect();
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = a.scene.config();
    cfg.validate()?;
    let noise = a.noise.noise();
    noise.validate()?;
    if !(0.0..=1.0).contains(&a.weak_fraction) {
        return Err(Error::InvalidArgument(format!(
            "weak fraction {} outside [0, 1]",
            a.weak_fraction
        )));
    }

    let truth = generate_dataset(a.scene.n, &cfg, a.seed)?;
    let n = truth.records().len();
    let weak = (a.weak_fraction * n as f64).round() as usize;
    let split: Vec<_> = truth
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| if i >= n - weak { r.to_weak() } else { r.clone() })
        .collect();
    let split = Dataset::new(truth.categories().to_vec(), split)?;

    let detections: DetectionMap = truth
        .records()
        .par_iter()
        .map(|r| {
            let mut rng = derive_rng(a.seed, &[b"detector", r.image_id.as_bytes()]);
            Ok((r.image_id.clone(), simulate_detector(r, &noise, &mut rng)?))
        })
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .collect();

    write_annotations(&a.out.join("dataset.json"), &split)?;
    write_annotations(&a.out.join("ground_truth.json"), &truth)?;
    write_detections(&a.out.join("detections.json"), &detections)?;
    println!(
        "wrote {n} images ({} fully annotated, {weak} weakly annotated) to {}",
        n - weak,
        a.out.display()
    );
    Ok(())
}

pub fn generate(a: &GenerateArgs) -> Result<()> {
    let s = strategy(a.strategy, a.tau, a.iou_thr, a.b_prime, !a.ignore_weak_labels)?;
    let dataset = load_annotations(&a.annotations)?;
    let dets = load_detections(&a.detections, dataset.num_classes())?;
    unknown_images(&dataset, &dets)?;

    let targets: Vec<_> = dataset
        .records()
        .iter()
        .filter(|r| a.all_images || !r.is_fully_annotated())
        .collect();
    let sets: Vec<Vec<PseudoLabelSet>> = targets
        .par_iter()
        .map(|r| {
            let id = r.image_id.as_str();
            let d = dets.get(id).map(Vec::as_slice).unwrap_or(&[]);
            let mut rng = derive_rng(a.seed, &[b"generate", id.as_bytes()]);
            match &s {
                Strategy::Rps(cfg) => rps_samples(id, d, &r.weak_labels, cfg, &mut rng),
                other => Ok(vec![other.label(id, d, &r.weak_labels, &mut rng)?]),
            }
        })
        .collect::<Result<_>>()?;
    let sets: Vec<PseudoLabelSet> = sets.into_iter().flatten().collect();

    write_pseudo_labels(&a.out, &sets, dataset.categories())?;
    println!(
        "wrote {} label sets with {} pseudo labels for {} images to {}",
        sets.len(),
        sets.iter().map(PseudoLabelSet::len).sum::<usize>(),
        targets.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationEntry {
    strategy: String,
    label_sets: usize,
    report: QualityReport,
}

#[derive(Serialize)]
struct Evaluation {
    metric: &'static str,
    iou_thr: f64,
    reports: Vec<EvaluationEntry>,
}

/// Pools the counts of all label sets sharing a strategy tag. Ground-truth
/// images without a label set are not counted.
pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    check_unit("iou threshold", a.iou_thr)?;
    let truth = load_annotations(&a.annotations)?;
    let (categories, sets) = load_pseudo_labels(&a.pseudo_labels)?;
    let ids = |cs: &[pseudolabel_kit::Category]| cs.iter().map(|c| c.id).collect::<Vec<_>>();
    if ids(&categories) != ids(truth.categories()) {
        return Err(Error::Validation(vec![format!(
            "pseudo-label categories {:?} differ from ground-truth categories {:?}",
            ids(&categories),
            ids(truth.categories())
        )]));
    }

    let c = truth.num_classes();
    let mut pooled: BTreeMap<&str, (usize, Vec<MatchCounts>)> = BTreeMap::new();
    let mut problems = Vec::new();
    for set in &sets {
        let Some(record) = truth.record(&set.image_id) else {
            problems.push(format!("label set for unknown image {}", set.image_id));
            continue;
        };
        let counts = match_counts(set, record, a.iou_thr)?;
        let entry = pooled
            .entry(set.strategy_tag.as_str())
            .or_insert_with(|| (0, vec![MatchCounts::default(); c]));
        entry.0 += 1;
        for (acc, cc) in entry.1.iter_mut().zip(&counts) {
            acc.merge(cc);
        }
    }
    if !problems.is_empty() {
        return Err(Error::Validation(problems));
    }

    let reports: Vec<EvaluationEntry> = pooled
        .into_iter()
        .map(|(tag, (n, classes))| EvaluationEntry {
            strategy: tag.to_string(),
            label_sets: n,
            report: QualityReport::from_counts(a.iou_thr, &pool(&classes), &classes),
        })
        .collect();

    let mut table = Table::new(&[
        "strategy",
        "category_id",
        "tp",
        "fp",
        "fn",
        "precision",
        "recall",
        "f1",
    ]);
    for e in &reports {
        let r = &e.report;
        table.push(vec![
            e.strategy.clone(),
            "all".into(),
            r.tp.to_string(),
            r.fp.to_string(),
            r.fn_.to_string(),
            num(r.precision),
            num(r.recall),
            num(r.f1),
        ]);
        for cr in &r.per_class {
            table.push(vec![
                e.strategy.clone(),
                truth.categories()[cr.class_id].id.to_string(),
                cr.tp.to_string(),
                cr.fp.to_string(),
                cr.fn_.to_string(),
                num(cr.precision),
                num(cr.recall),
                num(cr.f1),
            ]);
        }
    }
    let json = Evaluation {
        metric: QUALITY_METRIC,
        iou_thr: a.iou_thr,
        reports,
    };
    emit(a.out.as_deref(), &table, &json)
}

#[derive(Serialize)]
struct Comparison<'a> {
    metric: &'static str,
    seed: u64,
    #[serde(flatten)]
    table: &'a ComparisonTable,
}

pub fn compare(a: &CompareArgs) -> Result<()> {
    if a.trials == 0 {
        return Err(Error::InvalidArgument("at least one trial is required".into()));
    }
    check_unit("match iou", a.match_iou)?;
    let mut names = if a.strategy.is_empty() {
        vec![StrategyName::Rps, StrategyName::Threshold, StrategyName::Top1]
    } else {
        a.strategy.clone()
    };
    let mut seen = Vec::new();
    names.retain(|n| {
        let fresh = !seen.contains(n);
        seen.push(*n);
        fresh
    });
    let strategies = names
        .iter()
        .map(|&n| {
            let s = strategy(n, a.tau, a.iou_thr, 1, true)?;
            Ok(NamedStrategy::new(s.tag(), s))
        })
        .collect::<Result<Vec<_>>>()?;

    let table = match (&a.annotations, &a.detections) {
        (Some(ann), Some(det)) => {
            let dataset = load_annotations(ann)?;
            let dets = load_detections(det, dataset.num_classes())?;
            unknown_images(&dataset, &dets)?;
            compare_strategies(
                &dataset,
                &DetectionSource::Fixed(&dets),
                &strategies,
                a.trials,
                a.match_iou,
                a.seed,
            )?
        }
        _ => {
            let cfg = a.scene.config();
            cfg.validate()?;
            let noise = a.noise.noise();
            noise.validate()?;
            let dataset = generate_dataset(a.scene.n, &cfg, a.seed)?;
            compare_strategies(
                &dataset,
                &DetectionSource::Simulated(noise),
                &strategies,
                a.trials,
                a.match_iou,
                a.seed,
            )?
        }
    };

    let mut out = Table::new(&[
        "strategy",
        "trials",
        "precision_mean",
        "precision_std",
        "recall_mean",
        "recall_std",
        "f1_mean",
        "f1_std",
        "matched_iou_mean",
        "matched_iou_std",
        "matched_score_mean",
        "matched_score_std",
        "labels_mean",
        "labels_std",
    ]);
    for r in &table.rows {
        let mut row = vec![r.strategy.clone(), r.trials.to_string()];
        for s in [
            r.precision,
            r.recall,
            r.f1,
            r.mean_matched_iou,
            r.matched_score_mean,
            r.pseudo_labels,
        ] {
            row.push(num(s.mean));
            row.push(num(s.stddev));
        }
        out.push(row);
    }
    let json = Comparison {
        metric: QUALITY_METRIC,
        seed: a.seed,
        table: &table,
    };
    emit(a.out.as_deref(), &out, &json)
}

#[derive(Debug, Clone, Serialize)]
struct EmRow {
    instance: String,
    estimator: &'static str,
    samples: Option<usize>,
    value: f64,
    std_error: Option<f64>,
    exact: f64,
    abs_err: f64,
    rel_err: f64,
    /// Assignment chosen by the single-assignment estimators, proposals left to right.
    assignment: Option<String>,
}

#[derive(Serialize)]
struct EmInstance {
    instance: String,
    prior: Vec<f64>,
    model: Vec<f64>,
}

#[derive(Serialize)]
struct EmStudy {
    seed: u64,
    n: usize,
    lambda_u: f64,
    p_t: f64,
    instances: Vec<EmInstance>,
    rows: Vec<EmRow>,
}

/// Powers of ten from 100 below `max`, then `max` itself, plus `extra`.
fn sample_grid(max: usize, extra: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = std::iter::successors(Some(100usize), |&s| s.checked_mul(10))
        .take_while(|&s| s < max)
        .collect();
    grid.push(max);
    grid.push(extra);
    grid.sort_unstable();
    grid.dedup();
    grid
}

fn row(
    instance: &str,
    estimator: &'static str,
    samples: Option<usize>,
    value: f64,
    exact: f64,
    std_error: Option<f64>,
    assignment: Option<String>,
) -> EmRow {
    let abs_err = (value - exact).abs();
    EmRow {
        instance: instance.to_string(),
        estimator,
        samples,
        value,
        std_error,
        exact,
        abs_err,
        rel_err: abs_err / exact.abs(),
        assignment,
    }
}

fn study_instance(
    label: &str,
    index: u64,
    prior: &ProposalPosterior,
    model: &ProposalPosterior,
    grid: &[usize],
    a: &EmStudyArgs,
) -> Result<Vec<EmRow>> {
    let exact = exact_q(prior, model)?;
    let mut rows = vec![row(label, "exact", None, exact, exact, None, None)];
    for &b in grid {
        let mut rng = derive_rng(a.seed, &[b"mc", &index.to_le_bytes(), &(b as u64).to_le_bytes()]);
        let est = mc_q_estimate(prior, model, b, &mut rng)?;
        rows.push(row(label, "mc", Some(b), est.mean, exact, Some(est.std_error), None));
    }
    let (v, t) = max_q(prior, model, MaxQMode::Product)?;
    rows.push(row(label, "max", None, v, exact, None, Some(t.to_string())));
    let (v, t) = max_q(prior, model, MaxQMode::PosteriorOnly)?;
    rows.push(row(label, "max-posterior", None, v, exact, None, Some(t.to_string())));
    let th = threshold_assignment(prior, a.p_t)?;
    let v = assignment_loglik(&th.assignment, model, None)?;
    rows.push(row(label, "threshold", None, v, exact, None, Some(th.assignment.to_string())));
    Ok(rows)
}

/// Estimators of Q on random (or given) prior/model pairs. Each instance
/// gets one row per estimator; rows for instance `pooled` combine all
/// instances as weakly-annotated terms weighted by `λ_u`.
pub fn em_study(a: &EmStudyArgs) -> Result<()> {
    let weights = LossWeights {
        lambda_u: a.lambda_u,
        ..LossWeights::default()
    };
    weights.validate()?;
    if a.samples == 0 || a.b_prime == 0 {
        return Err(Error::InvalidArgument("sample sizes must be at least 1".into()));
    }
    if !(a.p_t > 0.0 && a.p_t < 1.0) {
        return Err(Error::InvalidArgument(format!("p_t = {} outside (0, 1)", a.p_t)));
    }
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = match (&a.prior, &a.model) {
        (Some(p), Some(m)) => {
            if p.len() != m.len() {
                return Err(Error::InvalidArgument(format!(
                    "prior has {} proposals but model has {}",
                    p.len(),
                    m.len()
                )));
            }
            vec![(p.clone(), m.clone())]
        }
        _ => {
            if a.instances == 0 {
                return Err(Error::InvalidArgument("at least one instance is required".into()));
            }
            (0..a.instances as u64)
                .map(|i| {
                    let mut rng = derive_rng(a.seed, &[b"instance", &i.to_le_bytes()]);
                    let p = (0..a.n).map(|_| rng.next_uniform()).collect();
                    let m = (0..a.n).map(|_| rng.next_uniform()).collect();
                    (p, m)
                })
                .collect()
        }
    };
    let posteriors = pairs
        .iter()
        .map(|(p, m)| Ok((ProposalPosterior::new(p.clone())?, ProposalPosterior::new(m.clone())?)))
        .collect::<Result<Vec<_>>>()?;

    let grid = sample_grid(a.samples, a.b_prime);
    let per_instance: Vec<Vec<EmRow>> = posteriors
        .par_iter()
        .enumerate()
        .map(|(i, (prior, model))| study_instance(&i.to_string(), i as u64, prior, model, &grid, a))
        .collect::<Result<_>>()?;

    let mut rows: Vec<EmRow> = per_instance.iter().flatten().cloned().collect();
    // pooled rows: same estimator position in every instance
    let exact: Vec<f64> = per_instance.iter().map(|r| r[0].value).collect();
    let exact_total = joint_objective(&[], &exact, &weights);
    for j in 0..per_instance[0].len() {
        let first = &per_instance[0][j];
        let values: Vec<f64> = per_instance.iter().map(|r| r[j].value).collect();
        let value = joint_objective(&[], &values, &weights);
        rows.push(row("pooled", first.estimator, first.samples, value, exact_total, None, None));
    }

    let mut table = Table::new(&[
        "instance",
        "estimator",
        "samples",
        "value",
        "std_error",
        "exact",
        "abs_err",
        "rel_err",
        "assignment",
    ]);
    for r in &rows {
        table.push(vec![
            r.instance.clone(),
            r.estimator.to_string(),
            r.samples.map(|s| s.to_string()).unwrap_or_default(),
            num(r.value),
            r.std_error.map(num).unwrap_or_default(),
            num(r.exact),
            num(r.abs_err),
            num(r.rel_err),
            r.assignment.clone().unwrap_or_default(),
        ]);
    }
    let json = EmStudy {
        seed: a.seed,
        n: pairs[0].0.len(),
        lambda_u: a.lambda_u,
        p_t: a.p_t,
        instances: pairs
            .into_iter()
            .enumerate()
            .map(|(i, (prior, model))| EmInstance {
                instance: i.to_string(),
                prior,
                model,
            })
            .collect(),
        rows,
    };
    emit(a.out.as_deref(), &table, &json)
}

#[derive(Serialize)]
struct WslClass {
    class_id: usize,
    label: bool,
    softmax_sigmoid: f64,
    objectness_weighted: f64,
}

#[derive(Serialize)]
struct WslReport {
    seed: u64,
    proposals: usize,
    k: usize,
    sampled: usize,
    classes: Vec<WslClass>,
    loss_softmax_sigmoid: f64,
    loss_objectness_weighted: f64,
}

/// Both image-label probabilities on one random set of proposal logits.
pub fn wsl(a: &WslArgs) -> Result<()> {
    let cfg = WslConfig { k: a.k };
    if a.n == 0 || a.classes == 0 || a.k == 0 {
        return Err(Error::InvalidArgument("--n, --classes and --k must be positive".into()));
    }
    let mut rng = derive_rng(a.seed, &[b"wsl"]);
    let objectness = Array1::from_shape_fn(a.n, |_| rng.random_range(-4.0..4.0));
    let class_logits = Array2::from_shape_fn((a.n, a.classes), |_| rng.random_range(-4.0..4.0));
    let labels = WeakLabels::new((0..a.classes).map(|_| rng.random_bool(0.5)).collect());
    let scores = ProposalScores::new(objectness, class_logits)?;

    let plain = (0..a.classes)
        .map(|k| wsl_image_prob(&scores.class_logits.column(k).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let weighted = wsl_image_prob_rpn(&scores, &cfg, &mut rng)?.to_vec();

    let classes: Vec<WslClass> = (0..a.classes)
        .map(|k| WslClass {
            class_id: k,
            label: labels.get(k),
            softmax_sigmoid: plain[k],
            objectness_weighted: weighted[k],
        })
        .collect();
    let mut table = Table::new(&["class_id", "label", "softmax_sigmoid", "objectness_weighted"]);
    for c in &classes {
        table.push(vec![
            c.class_id.to_string(),
            u8::from(c.label).to_string(),
            num(c.softmax_sigmoid),
            num(c.objectness_weighted),
        ]);
    }
    let json = WslReport {
        seed: a.seed,
        proposals: a.n,
        k: a.k,
        sampled: a.k.min(a.n),
        loss_softmax_sigmoid: wsl_loss(&plain, &labels)?,
        loss_objectness_weighted: wsl_loss(&weighted, &labels)?,
        classes,
    };
    emit(a.out.as_deref(), &table, &json)
}
