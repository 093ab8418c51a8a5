//! Axis-aligned boxes in normalized image coordinates.

use serde::{Deserialize, Serialize};

/// Center/size box, all coordinates in `[0, 1]` relative to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            cx: 0.5 * (x0 + x1),
            cy: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `[xmin, ymin, xmax, ymax]`.
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        ]
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Intersection with `other` (zero-area box when disjoint).
    pub fn intersect(&self, other: &BBox) -> BBox {
        let a = self.corners();
        let b = other.corners();
        let x0 = a[0].max(b[0]);
        let y0 = a[1].max(b[1]);
        let x1 = a[2].min(b[2]).max(x0);
        let y1 = a[3].min(b[3]).max(y0);
        BBox::from_corners(x0, y0, x1, y1)
    }

    pub fn within_unit(&self, tol: f64) -> bool {
        let c = self.corners();
        c[0] >= -tol && c[1] >= -tol && c[2] <= 1.0 + tol && c[3] <= 1.0 + tol
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Intersection over union; 0 for disjoint or degenerate pairs.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − |C \ (A ∪ B)| / |C|` with `C` the enclosing box.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let inter = a.intersect(b).area();
    let union = a.area() + b.area() - inter;
    let hull = (ca[2].max(cb[2]) - ca[0].min(cb[0])) * (ca[3].max(cb[3]) - ca[1].min(cb[1]));
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    if hull <= 0.0 {
        return iou;
    }
    iou - (hull - union) / hull
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_cases() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::from_corners(2.0, 0.0, 3.0, 1.0)), 0.0);
        let half = BBox::from_corners(0.5, 0.0, 1.5, 1.0);
        assert!((iou(&a, &half) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn giou_cases() {
        let a = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert!((giou(&a, &a) - 1.0).abs() < 1e-12);
        let b = BBox::from_corners(2.0, 0.0, 3.0, 1.0);
        assert!((giou(&a, &b) + 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(giou(&a, &b), giou(&b, &a));
        let far = BBox::from_corners(1e6, 1e6, 1e6 + 1.0, 1e6 + 1.0);
        assert!(giou(&a, &far) <= -0.99);
    }

    #[test]
    fn giou_equals_iou_when_hull_is_union() {
        let outer = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        let inner = BBox::from_corners(0.2, 0.2, 0.6, 0.7);
        assert!((giou(&outer, &inner) - iou(&outer, &inner)).abs() < 1e-15);
    }

    #[test]
    fn degenerate_box_is_defined() {
        let a = BBox::from_corners(0.0, 0.0, 0.0, 0.0);
        let b = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert!(giou(&a, &b).is_finite());
        assert_eq!(iou(&a, &a), 0.0);
    }
}
