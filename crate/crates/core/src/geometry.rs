//! Axis-aligned boxes and intersection-over-union.
//!
//! Boxes use the continuous corner convention: `(x1, y1)` is the top-left
//! corner and `(x2, y2)` the bottom-right one, with no `+1` pixel correction.
//! A box with `x1 == x2` or `y1 == y2` is valid and has zero area.

use crate::error::{Error, Result};

/// An axis-aligned rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    /// Builds a box from its corners, rejecting non-finite coordinates and
    /// negative extents.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::arg(format!(
                "box coordinates must be finite, got ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        if x2 < x1 || y2 < y1 {
            return Err(Error::arg(format!(
                "box has negative extent: ({x1}, {y1}, {x2}, {y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    /// Builds a box from COCO-style `[x, y, width, height]`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    /// Area of the overlap with `other`; zero when the boxes are disjoint.
    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn union_area(&self, other: &BBox) -> f64 {
        self.area() + other.area() - self.intersection_area(other)
    }

    /// Intersection over union. Two zero-area boxes have IoU 0.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            (inter / union).clamp(0.0, 1.0)
        }
    }

    /// Sum of absolute corner differences.
    pub fn l1_distance(&self, other: &BBox) -> f64 {
        self.corners()
            .iter()
            .zip(other.corners())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// True when the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }
}

/// Free-function form of [`BBox::iou`].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn area_examples() {
        assert_eq!(b(0.0, 0.0, 10.0, 10.0).area(), 100.0);
        assert_eq!(b(5.0, 5.0, 5.0, 9.0).area(), 0.0);
        assert_eq!(b(0.0, 0.0, 3.0, 7.0).area(), 21.0);
    }

    #[test]
    fn iou_examples() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b(20.0, 20.0, 30.0, 30.0)), 0.0);
        // intersection 50, union 150
        let half = b(5.0, 0.0, 15.0, 10.0);
        assert!((a.iou(&half) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_union_is_zero() {
        let p = b(3.0, 3.0, 3.0, 3.0);
        assert_eq!(p.iou(&p), 0.0);
    }

    #[test]
    fn rejects_bad_boxes() {
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 1.0, 1.0, 0.0).is_err());
        assert!(BBox::new(f64::NAN, 0.0, 1.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn xywh_conversion() {
        let bx = BBox::from_xywh(10.0, 20.0, 30.0, 40.0).unwrap();
        assert_eq!(bx.corners(), [10.0, 20.0, 40.0, 60.0]);
        assert_eq!(bx.to_xywh(), [10.0, 20.0, 30.0, 40.0]);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-100.0..100.0f64, -100.0..100.0f64, 0.0..50.0f64, 0.0..50.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = a.iou(&c);
            prop_assert_eq!(ab, c.iou(&a));
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn self_iou_is_one(a in arb_box()) {
            prop_assume!(a.area() > 1e-6);
            prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn translation_invariant(a in arb_box(), c in arb_box(), dx in -64i32..64, dy in -64i32..64) {
            // integer shifts keep the arithmetic well conditioned
            let (dx, dy) = (dx as f64, dy as f64);
            let ta = a.translate(dx, dy).unwrap();
            let tc = c.translate(dx, dy).unwrap();
            prop_assert!((a.iou(&c) - ta.iou(&tc)).abs() < 1e-9);
        }

        #[test]
        fn inclusion_exclusion(a in arb_box(), c in arb_box()) {
            let inter = a.intersection_area(&c);
            let union = a.union_area(&c);
            prop_assert!((a.area() + c.area() - (inter + union)).abs() < 1e-9);
        }
    }
}
