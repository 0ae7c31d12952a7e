use proptest::prelude::*;
use pseudolabel_kit::geometry::BBox;
use pseudolabel_kit::suppression::{nms, nms_group};

fn instance() -> impl Strategy<Value = (Vec<BBox>, Vec<f64>, f64)> {
    (0usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(
                (0.0..80.0f64, 0.0..80.0f64, 1.0..30.0f64, 1.0..30.0f64)
                    .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap()),
                n,
            ),
            // coarse scores so that ties actually occur
            prop::collection::vec((0u32..20).prop_map(|s| s as f64 / 20.0), n),
            0.3..0.7f64,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn groups_partition_and_heads_match_nms((boxes, scores, thr) in instance()) {
        let groups = nms_group(&boxes, &scores, thr).unwrap();
        let heads: Vec<usize> = groups.iter().map(|g| g.head()).collect();
        prop_assert_eq!(&heads, &nms(&boxes, &scores, thr).unwrap());

        let mut all: Vec<usize> = groups.iter().flat_map(|g| g.indices().to_vec()).collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..boxes.len()).collect::<Vec<_>>());

        for g in &groups {
            let idx = g.indices();
            for w in idx.windows(2) {
                prop_assert!(scores[w[0]] > scores[w[1]] || (scores[w[0]] == scores[w[1]] && w[0] < w[1]));
            }
            for &m in &idx[1..] {
                prop_assert!(boxes[g.head()].iou(&boxes[m]) >= thr);
            }
        }
        for (i, &a) in heads.iter().enumerate() {
            for &b in &heads[i + 1..] {
                prop_assert!(boxes[a].iou(&boxes[b]) < thr);
            }
        }
        prop_assert_eq!(groups, nms_group(&boxes, &scores, thr).unwrap());
    }
}
