//! Axis-aligned boxes in normalized scene space, 2D/3D IoU and greedy NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Axis-aligned box. Centers and extents are normalized to [0, 1]; `cz` and
/// `d` are fractions of the depth range.
#[derive(Debug, Clone, PartialEq)]
pub struct Box3D {
    pub cx: f64,
    pub cy: f64,
    pub cz: f64,
    pub w: f64,
    pub h: f64,
    pub d: f64,
    pub confidence: f64,
    pub class_scores: Vec<f64>,
}

impl Box3D {
    pub fn new(center: [f64; 3], extent: [f64; 3], confidence: f64, class_scores: Vec<f64>) -> Self {
        Self {
            cx: center[0],
            cy: center[1],
            cz: center[2],
            w: extent[0],
            h: extent[1],
            d: extent[2],
            confidence,
            class_scores,
        }
    }

    /// Ground-truth style box: confidence 1 and a one-hot class vector.
    pub fn labeled(class_id: usize, num_classes: usize, center: [f64; 3], extent: [f64; 3]) -> Self {
        let mut scores = vec![0.0; num_classes.max(class_id + 1)];
        scores[class_id] = 1.0;
        Self::new(center, extent, 1.0, scores)
    }

    pub fn center(&self) -> [f64; 3] {
        [self.cx, self.cy, self.cz]
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.w, self.h, self.d]
    }

    pub fn volume(&self) -> f64 {
        self.w * self.h * self.d
    }

    pub fn area_xy(&self) -> f64 {
        self.w * self.h
    }

    /// Index of the highest class score; ties go to the lowest index.
    pub fn class_id(&self) -> usize {
        let mut best = 0;
        for (i, &s) in self.class_scores.iter().enumerate() {
            if s > self.class_scores[best] {
                best = i;
            }
        }
        best
    }

    pub fn min_corner(&self) -> [f64; 3] {
        [self.cx - self.w / 2.0, self.cy - self.h / 2.0, self.cz - self.d / 2.0]
    }

    pub fn max_corner(&self) -> [f64; 3] {
        [self.cx + self.w / 2.0, self.cy + self.h / 2.0, self.cz + self.d / 2.0]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        let (lo, hi) = (self.min_corner(), self.max_corner());
        (0..3).all(|a| p[a] >= lo[a] && p[a] <= hi[a])
    }
}

#[inline]
fn overlap(center_a: f64, ext_a: f64, center_b: f64, ext_b: f64) -> f64 {
    let lo = (center_a - ext_a / 2.0).max(center_b - ext_b / 2.0);
    let hi = (center_a + ext_a / 2.0).min(center_b + ext_b / 2.0);
    (hi - lo).max(0.0)
}

/// Interval length measured through its corners, so that a box's own
/// overlap with itself equals its size bit-for-bit.
#[inline]
fn span(center: f64, ext: f64) -> f64 {
    ((center + ext / 2.0) - (center - ext / 2.0)).max(0.0)
}

#[inline]
fn ratio(inter: f64, size_a: f64, size_b: f64) -> f64 {
    if size_a <= 0.0 || size_b <= 0.0 {
        return 0.0;
    }
    let union = size_a + size_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Intersection volume over union volume. Zero-volume boxes score 0.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h) * overlap(a.cz, a.d, b.cz, b.d);
    let size = |x: &Box3D| span(x.cx, x.w) * span(x.cy, x.h) * span(x.cz, x.d);
    ratio(inter, size(a), size(b))
}

/// IoU of the image-plane projection (x, y); depth is ignored.
pub fn iou2d(a: &Box3D, b: &Box3D) -> f64 {
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cy, a.h, b.cy, b.h);
    let size = |x: &Box3D| span(x.cx, x.w) * span(x.cy, x.h);
    ratio(inter, size(a), size(b))
}

/// IoU of the top-down projection (x, z).
pub fn iou_xz(a: &Box3D, b: &Box3D) -> f64 {
    let inter = overlap(a.cx, a.w, b.cx, b.w) * overlap(a.cz, a.d, b.cz, b.d);
    let size = |x: &Box3D| span(x.cx, x.w) * span(x.cz, x.d);
    ratio(inter, size(a), size(b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    pub iou_threshold_3d: f64,
    /// Used by the two-projection comparison NMS only.
    pub iou_threshold_2d: f64,
    pub confidence_floor: f64,
    pub class_agnostic: bool,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold_3d: 0.35,
            iou_threshold_2d: 0.5,
            confidence_floor: 0.5,
            class_agnostic: true,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iou_threshold_3d", self.iou_threshold_3d),
            ("iou_threshold_2d", self.iou_threshold_2d),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        if !self.confidence_floor.is_finite() {
            return Err(Error::Config("confidence_floor must be finite".into()));
        }
        Ok(())
    }
}

/// Indices of boxes at or above the floor, by confidence descending (stable).
fn ranked(boxes: &[Box3D], floor: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len())
        .filter(|&i| boxes[i].confidence >= floor)
        .collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .confidence
            .partial_cmp(&boxes[a].confidence)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn greedy(boxes: &[Box3D], cfg: &NmsConfig, suppress: impl Fn(&Box3D, &Box3D) -> bool) -> Vec<usize> {
    let mut kept: Vec<usize> = Vec::new();
    for i in ranked(boxes, cfg.confidence_floor) {
        let cand = &boxes[i];
        let class = cand.class_id();
        let clash = kept.iter().any(|&k| {
            let other = &boxes[k];
            (cfg.class_agnostic || other.class_id() == class) && suppress(other, cand)
        });
        if !clash {
            kept.push(i);
        }
    }
    kept
}

/// Input indices kept by greedy 3D-IoU NMS, in output order.
pub fn nms3d_indices(boxes: &[Box3D], cfg: &NmsConfig) -> Vec<usize> {
    greedy(boxes, cfg, |kept, cand| iou3d(kept, cand) > cfg.iou_threshold_3d)
}

/// Greedy NMS scored by a single 3D IoU per pair.
pub fn nms3d(boxes: &[Box3D], cfg: &NmsConfig) -> Vec<Box3D> {
    nms3d_indices(boxes, cfg)
        .into_iter()
        .map(|i| boxes[i].clone())
        .collect()
}

/// Two-projection NMS: a candidate is suppressed only when both its front
/// (x, y) and top-down (x, z) IoU exceed `iou_threshold_2d`. Kept for timing
/// comparison against [`nms3d`].
pub fn nms_two_pass_2d(boxes: &[Box3D], cfg: &NmsConfig) -> Vec<Box3D> {
    greedy(boxes, cfg, |kept, cand| {
        iou2d(kept, cand) > cfg.iou_threshold_2d && iou_xz(kept, cand) > cfg.iou_threshold_2d
    })
    .into_iter()
    .map(|i| boxes[i].clone())
    .collect()
}

/// One `class_id confidence cx cy cz w h d` line per box, 6 decimals.
pub fn format_detections(boxes: &[Box3D]) -> String {
    let mut out = String::new();
    for b in boxes {
        writeln!(
            out,
            "{} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
            b.class_id(),
            b.confidence,
            b.cx,
            b.cy,
            b.cz,
            b.w,
            b.h,
            b.d
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn parse_detections(text: &str, num_classes: usize, path: &Path) -> Result<Vec<Box3D>> {
    let mut boxes = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class_id >= num_classes {
            return Err(err(format!("class id {class_id} >= {num_classes}")));
        }
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| err(format!("bad number {f:?}")))?;
        }
        let mut b = Box3D::labeled(class_id, num_classes, [v[1], v[2], v[3]], [v[4], v[5], v[6]]);
        b.confidence = v[0];
        boxes.push(b);
    }
    Ok(boxes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cube(c: [f64; 3], e: f64, conf: f64) -> Box3D {
        Box3D::new(c, [e, e, e], conf, vec![1.0, 0.0])
    }

    #[test]
    fn iou3d_closed_forms() {
        let a = cube([0.0, 0.0, 0.0], 1.0, 1.0);
        assert_eq!(iou3d(&a, &a), 1.0);
        assert_eq!(iou3d(&a, &cube([2.0, 0.0, 0.0], 1.0, 1.0)), 0.0);
        let shifted = cube([0.5, 0.0, 0.0], 1.0, 1.0);
        assert!((iou3d(&a, &shifted) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn iou2d_ignores_depth() {
        let a = Box3D::new([0.5, 0.5, 0.2], [0.3, 0.3, 0.1], 1.0, vec![]);
        let b = Box3D::new([0.5, 0.5, 0.8], [0.3, 0.3, 0.4], 1.0, vec![]);
        assert_eq!(iou2d(&a, &a), 1.0);
        assert_eq!(iou2d(&a, &b), 1.0);
        let c = Box3D::new([1.0, 0.0, 0.0], [1.0, 1.0, 1.0], 1.0, vec![]);
        let d = Box3D::new([1.5, 0.0, 0.0], [1.0, 1.0, 1.0], 1.0, vec![]);
        assert!((iou2d(&c, &d) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_score_zero() {
        let flat = Box3D::new([0.5; 3], [0.2, 0.2, 0.0], 1.0, vec![]);
        assert_eq!(iou3d(&flat, &flat), 0.0);
        assert_eq!(iou3d(&flat, &cube([0.5; 3], 0.4, 1.0)), 0.0);
        let point = Box3D::new([0.5; 3], [0.0; 3], 1.0, vec![]);
        assert_eq!(iou3d(&point, &point), 0.0);
    }

    #[test]
    fn boxes_may_cross_the_unit_cube() {
        let a = Box3D::new([0.95, 0.5, 0.5], [0.2, 0.2, 0.2], 1.0, vec![]);
        let b = Box3D::new([1.05, 0.5, 0.5], [0.2, 0.2, 0.2], 1.0, vec![]);
        assert!((iou3d(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn nms_examples() {
        let cfg = NmsConfig::default();
        let kept = nms3d(&[cube([0.5; 3], 0.2, 0.8), cube([0.5; 3], 0.2, 0.9)], &cfg);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let kept = nms3d(
            &[cube([0.2; 3], 0.1, 0.9), cube([0.8; 3], 0.1, 0.9)],
            &cfg,
        );
        assert_eq!(kept.len(), 2);

        // Collinear unit-depth slabs along x: width 1, shifted so that
        // iou(1st, 2nd) = 0.5 and iou(1st, 3rd) = 0.1.
        let slab = |x: f64, conf: f64| Box3D::new([x, 0.0, 0.0], [1.0, 1.0, 1.0], conf, vec![1.0]);
        let first = slab(0.0, 0.9);
        let second = slab(1.0 / 3.0, 0.8); // overlap 2/3 → (2/3)/(4/3) = 0.5
        let third = slab(9.0 / 11.0, 0.7); // overlap 2/11 → (2/11)/(20/11) = 0.1
        assert!((iou3d(&first, &second) - 0.5).abs() < 1e-12);
        assert!((iou3d(&first, &third) - 0.1).abs() < 1e-12);
        let kept = nms3d_indices(&[first, second, third], &cfg);
        assert_eq!(kept, vec![0, 2]);
    }

    #[test]
    fn nms_drops_below_floor_and_breaks_ties_by_index() {
        let cfg = NmsConfig::default();
        let boxes = [
            cube([0.2; 3], 0.1, 0.4),
            cube([0.5; 3], 0.1, 0.7),
            cube([0.8; 3], 0.1, 0.7),
        ];
        assert_eq!(nms3d_indices(&boxes, &cfg), vec![1, 2]);
        assert!(nms3d(&[], &cfg).is_empty());
    }

    #[test]
    fn per_class_mode_keeps_overlapping_other_class() {
        let mut cfg = NmsConfig::default();
        let a = Box3D::new([0.5; 3], [0.2; 3], 0.9, vec![1.0, 0.0]);
        let b = Box3D::new([0.5; 3], [0.2; 3], 0.8, vec![0.0, 1.0]);
        assert_eq!(nms3d(&[a.clone(), b.clone()], &cfg).len(), 1);
        cfg.class_agnostic = false;
        assert_eq!(nms3d(&[a, b], &cfg).len(), 2);
    }

    #[test]
    fn config_validation() {
        assert!(NmsConfig::default().validate().is_ok());
        let bad = NmsConfig {
            iou_threshold_3d: 0.0,
            ..NmsConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn detection_text_round_trip() {
        let boxes = vec![
            Box3D::new([0.5, 0.25, 0.125], [0.1, 0.2, 0.05], 0.875, vec![0.2, 0.9]),
            Box3D::labeled(0, 2, [0.3, 0.3, 0.3], [0.1, 0.1, 0.1]),
        ];
        let text = format_detections(&boxes);
        assert_eq!(
            text.lines().next().unwrap(),
            "1 0.875000 0.500000 0.250000 0.125000 0.100000 0.200000 0.050000"
        );
        let parsed = parse_detections(&text, 2, Path::new("d.txt")).unwrap();
        assert_eq!(parsed.len(), 2);
        assert_eq!(parsed[0].class_id(), 1);
        assert_eq!(parsed[1].center(), [0.3, 0.3, 0.3]);
        let err = parse_detections("0 1 2\n", 2, Path::new("d.txt")).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    fn arb_box() -> impl Strategy<Value = Box3D> {
        (
            prop::array::uniform3(0.0..1.0f64),
            prop::array::uniform3(0.01..0.6f64),
            0.0..1.0f64,
        )
            .prop_map(|(c, e, conf)| Box3D::new(c, e, conf, vec![1.0, 0.0]))
    }

    proptest! {
        #[test]
        fn iou3d_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
            let ab = iou3d(&a, &b);
            prop_assert_eq!(ab, iou3d(&b, &a));
            prop_assert!((0.0..=1.0).contains(&ab));
            prop_assert_eq!(iou3d(&a, &a), 1.0);
        }

        #[test]
        fn shared_depth_slab_reduces_to_2d(a in arb_box(), mut b in arb_box()) {
            b.cz = a.cz;
            b.d = a.d;
            prop_assert!((iou3d(&a, &b) - iou2d(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn nms_invariants(boxes in prop::collection::vec(arb_box(), 0..40)) {
            let cfg = NmsConfig::default();
            let kept = nms3d_indices(&boxes, &cfg);
            for (n, &i) in kept.iter().enumerate() {
                prop_assert!(boxes[i].confidence >= cfg.confidence_floor);
                for &j in &kept[n + 1..] {
                    prop_assert!(iou3d(&boxes[i], &boxes[j]) <= cfg.iou_threshold_3d);
                    prop_assert!(boxes[i].confidence >= boxes[j].confidence);
                }
            }
            if let Some(top) = (0..boxes.len())
                .filter(|&i| boxes[i].confidence >= cfg.confidence_floor)
                .max_by(|&a, &b| boxes[a].confidence.partial_cmp(&boxes[b].confidence).unwrap().then(b.cmp(&a)))
            {
                prop_assert_eq!(kept[0], top);
            }
        }
    }
}
