use std::path::Path;

use proptest::prelude::*;
use pseudolabel_kit::io::*;
use pseudolabel_kit::{BBox, Dataset, ImageRecord, Instance, PseudoLabel, PseudoLabelSet, WeakLabels};

// Coordinates on a 1/64 px grid keep xywh <-> corners conversion exact.
fn grid(max: u32) -> impl Strategy<Value = f64> {
    (0..max * 64).prop_map(|v| v as f64 / 64.0)
}

fn boxed(w: u32, h: u32) -> impl Strategy<Value = BBox> {
    (grid(w), grid(h), grid(w), grid(h)).prop_map(|(a, b, c, d)| {
        BBox::new(a.min(c), b.min(d), a.max(c), b.max(d)).unwrap()
    })
}

fn record(id: usize, c: usize) -> impl Strategy<Value = ImageRecord> {
    (any::<bool>(), prop::collection::vec((0..c, boxed(64, 48)), 0..5), prop::collection::vec(any::<bool>(), c))
        .prop_map(move |(full, inst, flags)| {
            let image_id = if id.is_multiple_of(2) { id.to_string() } else { format!("img-{id}") };
            if full {
                let inst = inst.into_iter().map(|(k, b)| Instance::foreground(k, b)).collect();
                ImageRecord::fully_annotated(image_id, 64, 48, c, inst).unwrap()
            } else {
                ImageRecord::weakly_annotated(image_id, 64, 48, WeakLabels::new(flags))
            }
        })
}

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..5, 0usize..6).prop_flat_map(|(c, n)| {
        (0..n)
            .map(|i| record(i, c))
            .collect::<Vec<_>>()
            .prop_map(move |records| Dataset::new(Dataset::default_categories(c), records).unwrap())
    })
}

fn label_sets() -> impl Strategy<Value = (usize, Vec<PseudoLabelSet>)> {
    (1usize..4).prop_flat_map(|c| {
        let set = (
            0u32..1000,
            prop::sample::select(vec!["rps", "threshold", "top1"]),
            prop::collection::vec((0..c, boxed(500, 500), 0.0..=1.0f64), 0..6),
        )
            .prop_map(|(id, tag, labels)| PseudoLabelSet {
                image_id: id.to_string(),
                strategy_tag: tag.to_string(),
                labels: labels
                    .into_iter()
                    .map(|(class_id, bbox, score)| PseudoLabel { class_id, bbox, score })
                    .collect(),
            });
        (Just(c), prop::collection::vec(set, 0..6))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn datasets_round_trip(ds in dataset()) {
        let text = annotations_to_string(&ds);
        let back = annotations_from_str(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(annotations_to_string(&back), text);
    }

    #[test]
    fn pseudo_labels_round_trip((c, sets) in label_sets()) {
        let cats = Dataset::default_categories(c);
        let text = pseudo_labels_to_string(&sets, &cats).unwrap();
        let (back_cats, back) = pseudo_labels_from_str(&text, Path::new("mem")).unwrap();
        prop_assert_eq!(back_cats, cats);
        prop_assert_eq!(back, sets);
    }

    #[test]
    fn arbitrary_coordinates_round_trip_within_rounding(
        x in 0.0..1000.0f64, y in 0.0..1000.0f64, w in 0.0..500.0f64, h in 0.0..500.0f64,
    ) {
        let b = BBox::new(x, y, x + w, y + h).unwrap();
        let set = PseudoLabelSet {
            image_id: "1".into(),
            strategy_tag: "rps".into(),
            labels: vec![PseudoLabel { class_id: 0, bbox: b, score: 0.5 }],
        };
        let text = pseudo_labels_to_string(&[set], &Dataset::default_categories(1)).unwrap();
        let (_, back) = pseudo_labels_from_str(&text, Path::new("mem")).unwrap();
        for (a, c) in back[0].labels[0].bbox.corners().iter().zip(b.corners()) {
            prop_assert!((a - c).abs() <= 4.0 * f64::EPSILON * c.abs().max(1.0));
        }
    }
}

#[test]
fn files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let ds = pseudolabel_kit::synth::generate_dataset(5, &Default::default(), 1).unwrap();
    let path = dir.path().join("nested/ann.json");
    write_annotations(&path, &ds).unwrap();
    assert_eq!(load_annotations(&path).unwrap(), ds);
    assert!(matches!(
        load_annotations(&dir.path().join("missing.json")),
        Err(pseudolabel_kit::Error::Io { .. })
    ));
}
