//! Dataset data model: detections, annotations and image-level labels.
//!
//! An [`ImageRecord`] carrying `full_annotations` belongs to the
//! fully-annotated split; one without belongs to the weakly-annotated split
//! and only knows which categories are present.

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Dense multi-hot image-level labels, one flag per foreground category.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct WeakLabels {
    flags: Vec<bool>,
}

impl WeakLabels {
    pub fn new(flags: Vec<bool>) -> Self {
        Self { flags }
    }

    /// All-zero labels for `num_classes` categories.
    pub fn empty(num_classes: usize) -> Self {
        Self {
            flags: vec![false; num_classes],
        }
    }

    /// Labels with the given class indices set.
    pub fn from_classes(num_classes: usize, classes: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut flags = vec![false; num_classes];
        for k in classes {
            *flags.get_mut(k).ok_or(Error::OutOfRange {
                index: k,
                len: num_classes,
            })? = true;
        }
        Ok(Self { flags })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn get(&self, k: usize) -> bool {
        self.flags.get(k).copied().unwrap_or(false)
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    /// Flags as 0.0 / 1.0 values.
    pub fn as_f64(&self) -> Vec<f64> {
        self.flags.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
    }

    /// Indices of flagged classes, ascending.
    pub fn positive_classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags
            .iter()
            .enumerate()
            .filter_map(|(k, &f)| f.then_some(k))
    }

    pub fn any(&self) -> bool {
        self.flags.iter().any(|&f| f)
    }
}

/// One ground-truth entry: a foreground object with its box, or background.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Instance {
    Foreground { class_id: usize, bbox: BBox },
    Background,
}

impl Instance {
    pub fn foreground(class_id: usize, bbox: BBox) -> Self {
        Instance::Foreground { class_id, bbox }
    }

    pub fn class_id(&self) -> Option<usize> {
        match self {
            Instance::Foreground { class_id, .. } => Some(*class_id),
            Instance::Background => None,
        }
    }

    pub fn bbox(&self) -> Option<&BBox> {
        match self {
            Instance::Foreground { bbox, .. } => Some(bbox),
            Instance::Background => None,
        }
    }
}

/// One proposal as output by a detector.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_scores: Vec<f64>,
    pub objectness: Option<f64>,
}

impl Detection {
    /// Builds a detection, checking that every score lies in `[0, 1]`.
    pub fn new(bbox: BBox, class_scores: Vec<f64>, objectness: Option<f64>) -> Result<Self> {
        if let Some(s) = class_scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::arg(format!("class score {s} outside [0, 1]")));
        }
        if let Some(o) = objectness.filter(|o| !(0.0..=1.0).contains(o)) {
            return Err(Error::arg(format!("objectness {o} outside [0, 1]")));
        }
        Ok(Self {
            bbox,
            class_scores,
            objectness,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_scores.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub weak_labels: WeakLabels,
    pub full_annotations: Option<Vec<Instance>>,
}

impl ImageRecord {
    /// A fully-annotated record whose weak labels are derived from `instances`.
    pub fn fully_annotated(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        num_classes: usize,
        instances: Vec<Instance>,
    ) -> Result<Self> {
        let weak = WeakLabels::from_classes(num_classes, instances.iter().filter_map(Instance::class_id))?;
        Ok(Self {
            image_id: image_id.into(),
            width,
            height,
            weak_labels: weak,
            full_annotations: Some(instances),
        })
    }

    pub fn weakly_annotated(
        image_id: impl Into<String>,
        width: u32,
        height: u32,
        weak_labels: WeakLabels,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            width,
            height,
            weak_labels,
            full_annotations: None,
        }
    }

    pub fn is_fully_annotated(&self) -> bool {
        self.full_annotations.is_some()
    }

    /// Drops the box-level annotations, keeping only the image-level labels.
    pub fn to_weak(&self) -> Self {
        Self {
            full_annotations: None,
            ..self.clone()
        }
    }

    /// Foreground instances, or an empty iterator for weak records.
    pub fn foreground(&self) -> impl Iterator<Item = (usize, &BBox)> {
        self.full_annotations
            .iter()
            .flatten()
            .filter_map(|inst| match inst {
                Instance::Foreground { class_id, bbox } => Some((*class_id, bbox)),
                Instance::Background => None,
            })
    }
}

/// An invariant broken by an [`ImageRecord`].
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyCanvas { width: u32, height: u32 },
    WeakLabelLength { expected: usize, found: usize },
    ClassOutOfRange { class_id: usize, num_classes: usize },
    OutOfBounds { index: usize, bbox: BBox },
    LabelInconsistency { class_id: usize, flagged: bool },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyCanvas { width, height } => {
                write!(f, "image size {width}x{height} is not positive")
            }
            Violation::WeakLabelLength { expected, found } => {
                write!(f, "weak label length {found} does not match {expected} categories")
            }
            Violation::ClassOutOfRange { class_id, num_classes } => {
                write!(f, "annotation class {class_id} outside [0, {num_classes})")
            }
            Violation::OutOfBounds { index, bbox } => {
                write!(f, "annotation {index} out of bounds: {:?}", bbox.corners())
            }
            Violation::LabelInconsistency { class_id, flagged } => {
                if *flagged {
                    write!(f, "label inconsistency: class {class_id} flagged but not annotated")
                } else {
                    write!(f, "label inconsistency: class {class_id} annotated but not flagged")
                }
            }
        }
    }
}

/// Lists every invariant `record` violates. An empty list means the record is
/// valid for a dataset with `num_classes` categories.
pub fn validate_record(record: &ImageRecord, num_classes: usize) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.width == 0 || record.height == 0 {
        out.push(Violation::EmptyCanvas {
            width: record.width,
            height: record.height,
        });
    }
    if record.weak_labels.len() != num_classes {
        out.push(Violation::WeakLabelLength {
            expected: num_classes,
            found: record.weak_labels.len(),
        });
    }
    let Some(annotations) = &record.full_annotations else {
        return out;
    };

    let mut annotated = vec![false; num_classes];
    for (index, inst) in annotations.iter().enumerate() {
        let Instance::Foreground { class_id, bbox } = inst else {
            continue;
        };
        if *class_id >= num_classes {
            out.push(Violation::ClassOutOfRange {
                class_id: *class_id,
                num_classes,
            });
        } else {
            annotated[*class_id] = true;
        }
        if !bbox.within(record.width as f64, record.height as f64) {
            out.push(Violation::OutOfBounds { index, bbox: *bbox });
        }
    }
    for (k, &seen) in annotated.iter().enumerate() {
        let flagged = record.weak_labels.get(k);
        if seen != flagged {
            out.push(Violation::LabelInconsistency { class_id: k, flagged });
        }
    }
    out
}

/// Category metadata as it appears in annotation files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Category {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    categories: Vec<Category>,
    records: Vec<ImageRecord>,
}

impl Dataset {
    /// Builds a dataset, validating every record and the uniqueness of image
    /// and category ids.
    pub fn new(categories: Vec<Category>, records: Vec<ImageRecord>) -> Result<Self> {
        let c = categories.len();
        let mut problems = Vec::new();
        let mut cat_ids = HashSet::new();
        for cat in &categories {
            if !cat_ids.insert(cat.id) {
                problems.push(format!("duplicate category id {}", cat.id));
            }
        }
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(r.image_id.as_str()) {
                problems.push(format!("duplicate image id {:?}", r.image_id));
            }
            for v in validate_record(r, c) {
                problems.push(format!("image {:?}: {v}", r.image_id));
            }
        }
        if problems.is_empty() {
            Ok(Self { categories, records })
        } else {
            Err(Error::Validation(problems))
        }
    }

    /// Categories named `class0..classN` with ids starting at 1.
    pub fn default_categories(num_classes: usize) -> Vec<Category> {
        (0..num_classes)
            .map(|k| Category {
                id: k as u64 + 1,
                name: format!("class{k}"),
            })
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn record(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    pub fn fully_annotated(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| r.is_fully_annotated())
    }

    pub fn weakly_annotated(&self) -> impl Iterator<Item = &ImageRecord> {
        self.records.iter().filter(|r| !r.is_fully_annotated())
    }
}

/// Projects detections onto class `k`: every box with its class-`k` score, in
/// input order and without filtering.
pub fn class_view(
    dets: &[Detection],
    k: usize,
    num_classes: usize,
) -> Result<(Vec<BBox>, Vec<f64>)> {
    if k >= num_classes {
        return Err(Error::OutOfRange {
            index: k,
            len: num_classes,
        });
    }
    let mut boxes = Vec::with_capacity(dets.len());
    let mut scores = Vec::with_capacity(dets.len());
    for d in dets {
        let s = *d.class_scores.get(k).ok_or_else(|| {
            Error::arg(format!(
                "detection has {} class scores, expected {num_classes}",
                d.class_scores.len()
            ))
        })?;
        boxes.push(d.bbox);
        scores.push(s);
    }
    Ok((boxes, scores))
}
