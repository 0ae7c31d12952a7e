//! Greedy non-maximum suppression, and a grouping variant that keeps the
//! suppressed boxes instead of discarding them.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::geometry::BBox;

/// IoU threshold used when none is given.
pub const DEFAULT_IOU_THR: f64 = 0.5;

/// Indices of one head box and the boxes it suppressed, ordered by descending
/// score (ties by ascending index). The first index is the head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NmsGroup {
    indices: Vec<usize>,
}

impl NmsGroup {
    pub fn head(&self) -> usize {
        self.indices[0]
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Maximum score among the members, i.e. the head's score.
    pub fn max_score(&self, scores: &[f64]) -> f64 {
        scores[self.head()]
    }
}

impl From<NmsGroup> for Vec<usize> {
    fn from(g: NmsGroup) -> Self {
        g.indices
    }
}

fn check_inputs(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Result<()> {
    if boxes.len() != scores.len() {
        return Err(Error::arg(format!(
            "{} boxes but {} scores",
            boxes.len(),
            scores.len()
        )));
    }
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::arg(format!("iou threshold {iou_thr} outside (0, 1]")));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::arg(format!("non-finite score {s}")));
    }
    Ok(())
}

/// Indices sorted by score descending, ties by ascending index.
pub(crate) fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Greedy NMS. Returns kept indices in descending score order; a box is
/// suppressed when its IoU with an already kept box is `>= iou_thr`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Result<Vec<usize>> {
    check_inputs(boxes, scores, iou_thr)?;
    let mut remaining = score_order(scores);
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let head = remaining.remove(0);
        keep.push(head);
        remaining.retain(|&i| boxes[head].iou(&boxes[i]) < iou_thr);
    }
    Ok(keep)
}

/// Greedy NMS that returns, for each kept head, the group of boxes it
/// suppressed.
///
/// A suppressed box joins the group of the first head (in processing order)
/// that reaches `iou_thr` against it. Groups come out in descending head
/// score and together they partition `0..boxes.len()`.
pub fn nms_group(boxes: &[BBox], scores: &[f64], iou_thr: f64) -> Result<Vec<NmsGroup>> {
    check_inputs(boxes, scores, iou_thr)?;
    let order = score_order(scores);
    let mut assigned = vec![false; boxes.len()];
    let mut groups = Vec::new();

    for (pos, &head) in order.iter().enumerate() {
        if assigned[head] {
            continue;
        }
        assigned[head] = true;
        let mut indices = vec![head];
        // members are visited in score order, so each group is already sorted
        for &other in &order[pos + 1..] {
            if !assigned[other] && boxes[head].iou(&boxes[other]) >= iou_thr {
                assigned[other] = true;
                indices.push(other);
            }
        }
        groups.push(NmsGroup { indices });
    }
    Ok(groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn abc() -> (Vec<BBox>, Vec<f64>) {
        (
            vec![
                bx(0.0, 0.0, 10.0, 10.0),
                bx(1.0, 0.0, 11.0, 10.0),
                bx(50.0, 50.0, 60.0, 60.0),
            ],
            vec![0.9, 0.6, 0.7],
        )
    }

    #[test]
    fn nms_hand_trace() {
        let (boxes, scores) = abc();
        assert!((boxes[0].iou(&boxes[1]) - 9.0 / 11.0).abs() < 1e-15);
        assert_eq!(nms(&boxes, &scores, 0.5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn nms_group_hand_trace() {
        let (boxes, scores) = abc();
        let groups: Vec<Vec<usize>> = nms_group(&boxes, &scores, 0.5)
            .unwrap()
            .into_iter()
            .map(Vec::from)
            .collect();
        assert_eq!(groups, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn singleton_and_empty() {
        let b = [bx(0.0, 0.0, 1.0, 1.0)];
        assert_eq!(nms(&b, &[0.3], 0.5).unwrap(), vec![0]);
        assert!(nms(&[], &[], 0.5).unwrap().is_empty());
        assert!(nms_group(&[], &[], 0.5).unwrap().is_empty());
    }

    #[test]
    fn disjoint_boxes_give_singletons_by_score() {
        let boxes = [
            bx(0.0, 0.0, 1.0, 1.0),
            bx(5.0, 5.0, 6.0, 6.0),
            bx(9.0, 9.0, 10.0, 10.0),
        ];
        let groups = nms_group(&boxes, &[0.2, 0.8, 0.5], 0.5).unwrap();
        let heads: Vec<usize> = groups.iter().map(NmsGroup::head).collect();
        assert_eq!(heads, vec![1, 2, 0]);
        assert!(groups.iter().all(|g| g.len() == 1));
    }

    #[test]
    fn ties_break_by_index() {
        let boxes = [bx(0.0, 0.0, 10.0, 10.0), bx(0.0, 0.0, 10.0, 10.0)];
        let groups = nms_group(&boxes, &[0.5, 0.5], 0.5).unwrap();
        assert_eq!(groups[0].indices(), &[0, 1]);
    }

    #[test]
    fn bad_arguments() {
        let b = [bx(0.0, 0.0, 1.0, 1.0)];
        assert!(nms(&b, &[0.1, 0.2], 0.5).is_err());
        assert!(nms(&b, &[0.1], 0.0).is_err());
        assert!(nms(&b, &[0.1], 1.5).is_err());
        assert!(nms(&b, &[f64::NAN], 0.5).is_err());
        assert!(nms(&b, &[0.1], 1.0).is_ok());
    }
}
