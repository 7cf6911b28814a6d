//! Axis-aligned boxes and overlap.
//!
//! Boxes are corner-encoded `(x1, y1, x2, y2)` over real coordinates, with no
//! `+1` pixel convention. Zero-area boxes cannot be constructed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawBox", into = "RawBox")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

#[derive(Serialize, Deserialize)]
struct RawBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl TryFrom<RawBox> for BBox {
    type Error = Error;

    fn try_from(r: RawBox) -> Result<Self> {
        BBox::new(r.x1, r.y1, r.x2, r.y2)
    }
}

impl From<BBox> for RawBox {
    fn from(b: BBox) -> Self {
        RawBox {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
        }
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite();
        if finite && x1 < x2 && y1 < y2 {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::InvalidBox { x1, y1, x2, y2 })
        }
    }

    /// Box from center and size.
    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
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

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Intersection over union, in `[0, 1]`.
    pub fn iou(&self, other: &BBox) -> f64 {
        let inter = self.intersection_area(other);
        if inter == 0.0 {
            return 0.0;
        }
        let union = self.area() + other.area() - inter;
        (inter / union).clamp(0.0, 1.0)
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Result<Self> {
        Self::new(self.x1 + dx, self.y1 + dy, self.x2 + dx, self.y2 + dy)
    }

    /// Uniform scaling about the origin.
    pub fn scale(&self, factor: f64) -> Result<Self> {
        Self::new(
            self.x1 * factor,
            self.y1 * factor,
            self.x2 * factor,
            self.y2 * factor,
        )
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn areas() {
        assert_eq!(bx(0.0, 0.0, 1.0, 1.0).area(), 1.0);
        assert_eq!(bx(0.0, 0.0, 2.0, 3.0).area(), 6.0);
        assert_eq!(bx(5.0, 5.0, 6.0, 6.0).area(), 1.0);
    }

    #[test]
    fn iou_examples() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&bx(3.0, 3.0, 4.0, 4.0)), 0.0);
        // touching edges share no area
        assert_eq!(a.iou(&bx(2.0, 0.0, 3.0, 2.0)), 0.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        assert!((a.iou(&b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate_boxes() {
        assert!(BBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 1.0, 1.0, 1.0).is_err());
        assert!(BBox::new(1.0, 0.0, 0.0, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 1.0).is_err());
    }

    #[test]
    fn deserialize_validates() {
        let ok: BBox = serde_json::from_str(r#"{"x1":0,"y1":0,"x2":1,"y2":2}"#).unwrap();
        assert_eq!(ok.area(), 2.0);
        assert!(serde_json::from_str::<BBox>(r#"{"x1":0,"y1":0,"x2":0,"y2":2}"#).is_err());
    }

    // Corners on a 1/8 grid, so overlaps are either empty or at least 1/8 wide
    // and the relative rounding error of iou stays well below 1e-12.
    fn arb_box() -> impl Strategy<Value = BBox> {
        (-400i32..400, -400i32..400, 1i32..400, 1i32..400).prop_map(|(x, y, w, h)| {
            let (x, y, w, h) = (
                x as f64 / 8.0,
                y as f64 / 8.0,
                w as f64 / 8.0,
                h as f64 / 8.0,
            );
            bx(x, y, x + w, y + h)
        })
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = a.iou(&b);
            prop_assert_eq!(ab, b.iou(&a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(a.iou(&a), 1.0);
        }

        #[test]
        fn iou_invariant_under_translation_and_scaling(
            a in arb_box(), b in arb_box(),
            dx in -800i32..800, dy in -800i32..800, s in 0.01..100.0f64,
        ) {
            let (dx, dy) = (dx as f64 / 8.0, dy as f64 / 8.0);
            let base = a.iou(&b);
            let moved = a.translate(dx, dy).unwrap().iou(&b.translate(dx, dy).unwrap());
            let scaled = a.scale(s).unwrap().iou(&b.scale(s).unwrap());
            prop_assert!((moved - base).abs() <= 1e-12 * base + 1e-15);
            prop_assert!((scaled - base).abs() <= 1e-12 * base + 1e-15);
        }
    }
}
