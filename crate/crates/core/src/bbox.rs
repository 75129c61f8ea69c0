use serde::{Deserialize, Serialize};

use crate::error::{Result, TdaError};

/// Axis-aligned box in pixels: top-left corner plus extent.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { x, y, w, h };
        if !b.is_valid() {
            return Err(TdaError::Contract(format!("invalid box {x},{y},{w},{h}")));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(cx - w / 2.0, cy - h / 2.0, w, h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x, self.y, self.w, self.h].iter().all(|v| v.is_finite()) && self.w > 0.0 && self.h > 0.0
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            x: self.x * k,
            y: self.y * k,
            w: self.w * k,
            h: self.h * k,
        }
    }

    /// Overlap area with `other`.
    pub fn intersection(&self, other: &BoundingBox) -> f64 {
        let ix = (self.x + self.w).min(other.x + other.w) - self.x.max(other.x);
        let iy = (self.y + self.h).min(other.y + other.h) - self.y.max(other.y);
        if ix <= 0.0 || iy <= 0.0 {
            0.0
        } else {
            ix * iy
        }
    }

    /// Fraction of this box inside a `width x height` frame.
    pub fn fraction_inside(&self, width: f64, height: f64) -> f64 {
        let frame = BoundingBox {
            x: 0.0,
            y: 0.0,
            w: width,
            h: height,
        };
        self.intersection(&frame) / self.area()
    }
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection(b);
    if inter <= 0.0 {
        return 0.0;
    }
    // Extents measured from the corner coordinates, like the intersection,
    // so that iou(a, a) is exactly 1.
    let extent = |r: &BoundingBox| ((r.x + r.w) - r.x) * ((r.y + r.h) - r.y);
    let union = extent(a) + extent(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Center location error: distance between box centers.
pub fn cle(pred: &BoundingBox, gt: &BoundingBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    (px - gx).hypot(py - gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Counts unit cells covered by integer-aligned boxes.
    fn raster_iou(a: (i32, i32, i32, i32), c: (i32, i32, i32, i32)) -> f64 {
        let inside =
            |r: (i32, i32, i32, i32), px: i32, py: i32| px >= r.0 && px < r.0 + r.2 && py >= r.1 && py < r.1 + r.3;
        let (mut inter, mut union) = (0, 0);
        for py in -20..40 {
            for px in -20..40 {
                let (ia, ic) = (inside(a, px, py), inside(c, px, py));
                inter += (ia && ic) as i32;
                union += (ia || ic) as i32;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn iou_known_values() {
        let a = b(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(5.0, 5.0, 1.0, 1.0)), 0.0);
        let expect = raster_iou((0, 0, 2, 2), (1, 1, 2, 2));
        assert!((expect - 1.0 / 7.0).abs() < 1e-15);
        assert!((iou(&a, &b(1.0, 1.0, 2.0, 2.0)) - expect).abs() < 1e-15);
    }

    #[test]
    fn iou_matches_rasterization_on_integer_boxes() {
        let boxes = [(0, 0, 5, 3), (2, 1, 4, 4), (-3, 2, 6, 2), (1, -2, 3, 9), (4, 4, 1, 1)];
        for a in boxes {
            for c in boxes {
                let got = iou(
                    &b(a.0 as f64, a.1 as f64, a.2 as f64, a.3 as f64),
                    &b(c.0 as f64, c.1 as f64, c.2 as f64, c.3 as f64),
                );
                assert!((got - raster_iou(a, c)).abs() < 1e-12, "{a:?} {c:?}");
            }
        }
    }

    #[test]
    fn cle_three_four_five() {
        let a = BoundingBox::from_center(0.0, 0.0, 2.0, 2.0).unwrap();
        let c = BoundingBox::from_center(3.0, 4.0, 6.0, 1.0).unwrap();
        assert_eq!(cle(&a, &a), 0.0);
        assert_eq!(cle(&a, &c), 5.0);
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BoundingBox::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(BoundingBox::new(0.0, f64::NAN, 1.0, 1.0).is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| BoundingBox { x, y, w, h })
    }

    proptest! {
        #[test]
        fn iou_symmetric_bounded_scale_invariant(a in arb_box(), c in arb_box(), k in 0.1..10.0f64) {
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert_eq!(iou(&a, &a), 1.0);
            prop_assert!((iou(&a.scaled(k), &c.scaled(k)) - v).abs() < 1e-9);
        }

        #[test]
        fn cle_matches_direct_distance(a in arb_box(), c in arb_box()) {
            let dx = (a.x + a.w * 0.5) - (c.x + c.w * 0.5);
            let dy = (a.y + a.h * 0.5) - (c.y + c.h * 0.5);
            prop_assert!((cle(&a, &c) - (dx * dx + dy * dy).sqrt()).abs() < 1e-9);
        }
    }
}
