//! File formats.
//!
//! * Annotations: a subset of the COCO annotation schema (`images`,
//!   `annotations`, `categories`) plus a `weak_labels` block listing
//!   image-level category ids for weakly-annotated images. Boxes are
//!   `[x, y, width, height]` on disk and corner boxes in memory.
//! * Detections: a JSON array of `{image_id, bbox, scores, objectness?}`.
//! * Pseudo labels: COCO-result-shaped `annotations` with `score` and
//!   `strategy_tag`, grouped by a `label_sets` table so that empty sets and
//!   repeated draws for one image survive a round trip.
//!
//! Output is pretty-printed with fixed key order and shortest round-trip
//! number formatting, so equal inputs give byte-identical files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::{Category, Dataset, Detection, ImageRecord, Instance, WeakLabels};
use crate::pseudolabel::{PseudoLabel, PseudoLabelSet};

/// Image ids may be numbers or strings on disk; in memory they are strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum ImageId {
    Num(u64),
    Str(String),
}

impl ImageId {
    fn into_string(self) -> String {
        match self {
            ImageId::Num(n) => n.to_string(),
            ImageId::Str(s) => s,
        }
    }

    /// Canonical decimal ids are written back as numbers.
    fn from_str(id: &str) -> Self {
        match id.parse::<u64>() {
            Ok(n) if n.to_string() == id => ImageId::Num(n),
            _ => ImageId::Str(id.to_string()),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: ImageId,
    width: u32,
    height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    file_name: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    image_id: ImageId,
    category_id: u64,
    bbox: [f64; 4],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeakLabelEntry {
    image_id: ImageId,
    category_ids: Vec<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
    #[serde(default)]
    weak_labels: Vec<WeakLabelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DetectionEntry {
    image_id: ImageId,
    bbox: [f64; 4],
    scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    objectness: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LabelSetEntry {
    image_id: ImageId,
    strategy_tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoAnnotation {
    id: u64,
    label_set: usize,
    image_id: ImageId,
    category_id: u64,
    bbox: [f64; 4],
    score: f64,
    strategy_tag: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct PseudoLabelFile {
    categories: Vec<CocoCategory>,
    label_sets: Vec<LabelSetEntry>,
    annotations: Vec<PseudoAnnotation>,
}

fn parse<T: DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Format {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("in-memory JSON serialization cannot fail");
    s.push('\n');
    s
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, contents).map_err(io)
}

fn categories_from(cats: &[CocoCategory]) -> Vec<Category> {
    cats.iter()
        .map(|c| Category {
            id: c.id,
            name: c.name.clone(),
        })
        .collect()
}

fn categories_to(cats: &[Category]) -> Vec<CocoCategory> {
    cats.iter()
        .map(|c| CocoCategory {
            id: c.id,
            name: c.name.clone(),
        })
        .collect()
}

fn category_index(cats: &[Category]) -> HashMap<u64, usize> {
    cats.iter().enumerate().map(|(k, c)| (c.id, k)).collect()
}

fn xywh_box(bbox: [f64; 4]) -> Result<BBox> {
    let [x, y, w, h] = bbox;
    if w < 0.0 || h < 0.0 {
        return Err(Error::arg(format!("negative bbox size in {bbox:?}")));
    }
    BBox::from_xywh(x, y, w, h)
}

/// Parses an annotation file held in memory. `origin` is only used in error
/// messages.
pub fn annotations_from_str(text: &str, origin: &Path) -> Result<Dataset> {
    let file: AnnotationFile = parse(text, origin)?;
    let categories = categories_from(&file.categories);
    let index = category_index(&categories);
    let c = categories.len();
    let mut problems = Vec::new();

    let mut boxes: HashMap<String, Vec<Instance>> = HashMap::new();
    for (i, ann) in file.annotations.into_iter().enumerate() {
        let image_id = ann.image_id.into_string();
        let Some(&k) = index.get(&ann.category_id) else {
            problems.push(format!("annotation {i}: unknown category id {}", ann.category_id));
            continue;
        };
        match xywh_box(ann.bbox) {
            Ok(b) => boxes.entry(image_id).or_default().push(Instance::foreground(k, b)),
            Err(e) => problems.push(format!("annotation {i}: {e}")),
        }
    }

    let mut weak: HashMap<String, WeakLabels> = HashMap::new();
    for entry in file.weak_labels {
        let image_id = entry.image_id.into_string();
        let mut classes = Vec::new();
        for id in entry.category_ids {
            match index.get(&id) {
                Some(&k) => classes.push(k),
                None => problems.push(format!("weak labels of {image_id:?}: unknown category id {id}")),
            }
        }
        weak.insert(image_id, WeakLabels::from_classes(c, classes)?);
    }

    let mut records = Vec::with_capacity(file.images.len());
    for img in file.images {
        let id = img.id.into_string();
        let instances = boxes.remove(&id);
        let record = match (instances, weak.remove(&id)) {
            (Some(_), Some(_)) => {
                problems.push(format!("image {id:?} has both box annotations and weak labels"));
                continue;
            }
            (None, Some(labels)) => ImageRecord::weakly_annotated(id, img.width, img.height, labels),
            (instances, None) => ImageRecord::fully_annotated(
                id,
                img.width,
                img.height,
                c,
                instances.unwrap_or_default(),
            )?,
        };
        records.push(record);
    }
    for id in boxes.keys().chain(weak.keys()) {
        problems.push(format!("labels reference unknown image {id:?}"));
    }
    if !problems.is_empty() {
        problems.sort();
        return Err(Error::Validation(problems));
    }
    Dataset::new(categories, records)
}

pub fn annotations_to_string(dataset: &Dataset) -> String {
    let cats = dataset.categories();
    let mut file = AnnotationFile {
        images: Vec::new(),
        annotations: Vec::new(),
        categories: categories_to(cats),
        weak_labels: Vec::new(),
    };
    for r in dataset.records() {
        file.images.push(CocoImage {
            id: ImageId::from_str(&r.image_id),
            width: r.width,
            height: r.height,
            file_name: Some(format!("{}.jpg", r.image_id)),
        });
        if r.is_fully_annotated() {
            for (k, b) in r.foreground() {
                file.annotations.push(CocoAnnotation {
                    id: Some(file.annotations.len() as u64 + 1),
                    image_id: ImageId::from_str(&r.image_id),
                    category_id: cats[k].id,
                    bbox: b.to_xywh(),
                });
            }
        } else {
            file.weak_labels.push(WeakLabelEntry {
                image_id: ImageId::from_str(&r.image_id),
                category_ids: r.weak_labels.positive_classes().map(|k| cats[k].id).collect(),
            });
        }
    }
    to_json(&file)
}

pub fn load_annotations(path: &Path) -> Result<Dataset> {
    annotations_from_str(&read(path)?, path)
}

pub fn write_annotations(path: &Path, dataset: &Dataset) -> Result<()> {
    write_file(path, &annotations_to_string(dataset))
}

/// Detections keyed by image id.
pub type DetectionMap = BTreeMap<String, Vec<Detection>>;

pub fn detections_from_str(text: &str, origin: &Path, num_classes: usize) -> Result<DetectionMap> {
    let entries: Vec<DetectionEntry> = parse(text, origin)?;
    let mut out = DetectionMap::new();
    let mut problems = Vec::new();
    for (i, e) in entries.into_iter().enumerate() {
        if e.scores.len() != num_classes {
            problems.push(format!(
                "detection {i}: {} scores for {num_classes} categories",
                e.scores.len()
            ));
            continue;
        }
        let det = xywh_box(e.bbox).and_then(|b| Detection::new(b, e.scores, e.objectness));
        match det {
            Ok(d) => out.entry(e.image_id.into_string()).or_default().push(d),
            Err(err) => problems.push(format!("detection {i}: {err}")),
        }
    }
    if problems.is_empty() {
        Ok(out)
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn detections_to_string(dets: &DetectionMap) -> String {
    let entries: Vec<DetectionEntry> = dets
        .iter()
        .flat_map(|(id, list)| {
            list.iter().map(move |d| DetectionEntry {
                image_id: ImageId::from_str(id),
                bbox: d.bbox.to_xywh(),
                scores: d.class_scores.clone(),
                objectness: d.objectness,
            })
        })
        .collect();
    to_json(&entries)
}

pub fn load_detections(path: &Path, num_classes: usize) -> Result<DetectionMap> {
    detections_from_str(&read(path)?, path, num_classes)
}

pub fn write_detections(path: &Path, dets: &DetectionMap) -> Result<()> {
    write_file(path, &detections_to_string(dets))
}

pub fn pseudo_labels_to_string(sets: &[PseudoLabelSet], categories: &[Category]) -> Result<String> {
    let mut file = PseudoLabelFile {
        categories: categories_to(categories),
        label_sets: Vec::with_capacity(sets.len()),
        annotations: Vec::new(),
    };
    for (s, set) in sets.iter().enumerate() {
        file.label_sets.push(LabelSetEntry {
            image_id: ImageId::from_str(&set.image_id),
            strategy_tag: set.strategy_tag.clone(),
        });
        for l in &set.labels {
            let cat = categories.get(l.class_id).ok_or(Error::OutOfRange {
                index: l.class_id,
                len: categories.len(),
            })?;
            file.annotations.push(PseudoAnnotation {
                id: file.annotations.len() as u64 + 1,
                label_set: s,
                image_id: ImageId::from_str(&set.image_id),
                category_id: cat.id,
                bbox: l.bbox.to_xywh(),
                score: l.score,
                strategy_tag: set.strategy_tag.clone(),
            });
        }
    }
    Ok(to_json(&file))
}

pub fn pseudo_labels_from_str(text: &str, origin: &Path) -> Result<(Vec<Category>, Vec<PseudoLabelSet>)> {
    let file: PseudoLabelFile = parse(text, origin)?;
    let categories = categories_from(&file.categories);
    let index = category_index(&categories);
    let mut sets: Vec<PseudoLabelSet> = file
        .label_sets
        .into_iter()
        .map(|e| PseudoLabelSet::new(e.image_id.into_string(), e.strategy_tag))
        .collect();
    let mut problems = Vec::new();
    for a in file.annotations {
        let Some(set) = sets.get_mut(a.label_set) else {
            problems.push(format!("annotation {}: unknown label set {}", a.id, a.label_set));
            continue;
        };
        let Some(&class_id) = index.get(&a.category_id) else {
            problems.push(format!("annotation {}: unknown category id {}", a.id, a.category_id));
            continue;
        };
        if !(0.0..=1.0).contains(&a.score) {
            problems.push(format!("annotation {}: score {} outside [0, 1]", a.id, a.score));
            continue;
        }
        match xywh_box(a.bbox) {
            Ok(bbox) => set.labels.push(PseudoLabel {
                class_id,
                bbox,
                score: a.score,
            }),
            Err(e) => problems.push(format!("annotation {}: {e}", a.id)),
        }
    }
    if problems.is_empty() {
        Ok((categories, sets))
    } else {
        Err(Error::Validation(problems))
    }
}

pub fn write_pseudo_labels(path: &Path, sets: &[PseudoLabelSet], categories: &[Category]) -> Result<()> {
    write_file(path, &pseudo_labels_to_string(sets, categories)?)
}

pub fn load_pseudo_labels(path: &Path) -> Result<(Vec<Category>, Vec<PseudoLabelSet>)> {
    pseudo_labels_from_str(&read(path)?, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "images": [{"id": 1, "width": 100, "height": 100, "file_name": "a.jpg"},
                   {"id": "w2", "width": 50, "height": 40}],
        "annotations": [{"image_id": 1, "category_id": 7, "bbox": [10, 20, 30, 40]}],
        "categories": [{"id": 7, "name": "cat"}, {"id": 9, "name": "dog"}],
        "weak_labels": [{"image_id": "w2", "category_ids": [9]}]
    }"#;

    fn origin() -> &'static Path {
        Path::new("mem.json")
    }

    #[test]
    fn parses_minimal_file() {
        let ds = annotations_from_str(MINIMAL, origin()).unwrap();
        assert_eq!(ds.num_classes(), 2);
        let full = ds.record("1").unwrap();
        let inst = full.full_annotations.as_ref().unwrap();
        assert_eq!(inst.len(), 1);
        assert_eq!(inst[0].bbox().unwrap().corners(), [10.0, 20.0, 40.0, 60.0]);
        assert_eq!(full.weak_labels.flags(), &[true, false]);

        let weak = ds.record("w2").unwrap();
        assert!(weak.full_annotations.is_none());
        assert_eq!(weak.weak_labels.flags(), &[false, true]);
    }

    #[test]
    fn parse_errors_carry_position() {
        let err = annotations_from_str("{\n  \"images\": [,]\n}", origin()).unwrap_err();
        match err {
            Error::Format { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn out_of_bounds_annotation_is_validation_error() {
        let text = MINIMAL.replace("[10, 20, 30, 40]", "[90, 20, 30, 40]");
        assert!(matches!(annotations_from_str(&text, origin()), Err(Error::Validation(_))));
    }

    #[test]
    fn detections_parse_and_validate() {
        assert!(detections_from_str("[]", origin(), 2).unwrap().is_empty());
        let one = r#"[{"image_id": 3, "bbox": [0, 0, 5, 5], "scores": [0.9, 0.1]}]"#;
        let map = detections_from_str(one, origin(), 2).unwrap();
        assert_eq!(map["3"].len(), 1);
        let bad = r#"[{"image_id": 3, "bbox": [0, 0, 5, 5], "scores": [0.9, 0.1, 0.0]}]"#;
        assert!(matches!(detections_from_str(bad, origin(), 2), Err(Error::Validation(_))));
    }

    #[test]
    fn empty_pseudo_label_file() {
        let text = pseudo_labels_to_string(&[], &Dataset::default_categories(1)).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["annotations"], serde_json::json!([]));
    }

    #[test]
    fn pseudo_labels_write_xywh() {
        let cats = Dataset::default_categories(1);
        let set = PseudoLabelSet {
            image_id: "5".into(),
            labels: vec![PseudoLabel {
                class_id: 0,
                bbox: BBox::new(10.0, 20.0, 40.0, 60.0).unwrap(),
                score: 0.5,
            }],
            strategy_tag: "rps".into(),
        };
        let text = pseudo_labels_to_string(std::slice::from_ref(&set), &cats).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["annotations"][0]["bbox"], serde_json::json!([10.0, 20.0, 30.0, 40.0]));
        assert_eq!(v["annotations"][0]["image_id"], serde_json::json!(5));
        let (c2, back) = pseudo_labels_from_str(&text, origin()).unwrap();
        assert_eq!(c2, cats);
        assert_eq!(back, vec![set]);
    }
}
