//! IoU evaluation: per-scene greedy matching and a Mean/Max report.

use std::fmt::Write as _;

use crate::dataset::{batch_inputs, Sample};
use crate::error::{Error, Result};
use crate::geometry::{iou2d, iou3d, nms3d, Box3D, NmsConfig};
use crate::grid::decode_batch;
use crate::net::Network;

/// Metrics of one ground-truth box; all zero when it went unmatched.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MatchRow {
    pub iou2d: f64,
    pub iou3d: f64,
    /// The 3D IoU raised to 2/3.
    pub iou3d_23: f64,
    pub matched: bool,
}

impl MatchRow {
    pub fn of(gt: &Box3D, det: &Box3D) -> Self {
        let v = iou3d(gt, det);
        Self {
            iou2d: iou2d(gt, det),
            iou3d: v,
            iou3d_23: v.powf(2.0 / 3.0),
            matched: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Stat {
    pub mean: f64,
    pub max: f64,
}

fn stat(values: impl Iterator<Item = f64>) -> Stat {
    let (mut sum, mut max, mut n) = (0.0, 0.0f64, 0usize);
    for v in values {
        sum += v;
        max = max.max(v);
        n += 1;
    }
    Stat {
        // rounding can push the sum of equal values past n·max
        mean: if n == 0 { 0.0 } else { (sum / n as f64).min(max) },
        max,
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// One row per ground-truth box across all scenes.
    pub rows: Vec<MatchRow>,
    pub detections: usize,
}

impl EvalReport {
    pub fn iou2d(&self) -> Stat {
        stat(self.rows.iter().map(|r| r.iou2d))
    }

    pub fn iou3d(&self) -> Stat {
        stat(self.rows.iter().map(|r| r.iou3d))
    }

    pub fn iou3d_23(&self) -> Stat {
        stat(self.rows.iter().map(|r| r.iou3d_23))
    }

    pub fn ground_truths(&self) -> usize {
        self.rows.len()
    }

    pub fn matched(&self) -> usize {
        self.rows.iter().filter(|r| r.matched).count()
    }

    pub fn unmatched_gt(&self) -> usize {
        self.ground_truths() - self.matched()
    }

    /// Aligned text table with Mean and Max rows.
    pub fn to_table(&self) -> String {
        let cols = [self.iou2d(), self.iou3d(), self.iou3d_23()];
        let mut out = String::new();
        let _ = writeln!(out, "{:<6} {:>8} {:>8} {:>12}", "", "2D IoU", "3D IoU", "3D IoU^(2/3)");
        let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4} {:>12.4}", "Mean", cols[0].mean, cols[1].mean, cols[2].mean);
        let _ = writeln!(out, "{:<6} {:>8.4} {:>8.4} {:>12.4}", "Max", cols[0].max, cols[1].max, cols[2].max);
        let _ = writeln!(
            out,
            "ground truths {}, matched {}, unmatched {}, detections {}",
            self.ground_truths(),
            self.matched(),
            self.unmatched_gt(),
            self.detections
        );
        out
    }
}

/// Greedy matching by descending 3D IoU; each detection is used at most
/// once. Returns the matched detection index per ground truth.
pub fn match_boxes(gt: &[Box3D], det: &[Box3D]) -> Vec<Option<usize>> {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gb) in gt.iter().enumerate() {
        for (d, db) in det.iter().enumerate() {
            let v = iou3d(gb, db);
            if v > 0.0 {
                pairs.push((v, g, d));
            }
        }
    }
    // stable: ties resolve to lower ground-truth then detection index
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut out = vec![None; gt.len()];
    let mut used = vec![false; det.len()];
    for (_, g, d) in pairs {
        if out[g].is_none() && !used[d] {
            out[g] = Some(d);
            used[d] = true;
        }
    }
    out
}

/// Accumulates one scene into the report.
pub fn score_scene(report: &mut EvalReport, gt: &[Box3D], det: &[Box3D]) {
    report.detections += det.len();
    for (g, m) in gt.iter().zip(match_boxes(gt, det)) {
        report.rows.push(m.map_or_else(MatchRow::default, |d| MatchRow::of(g, &det[d])));
    }
}

/// Scores precomputed detections, one list per scene.
pub fn evaluate_detections(scenes: &[(Vec<Box3D>, Vec<Box3D>)]) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let mut report = EvalReport::default();
    for (gt, det) in scenes {
        score_scene(&mut report, gt, det);
    }
    Ok(report)
}

/// Ground truth fed through the metric path as detections.
pub fn evaluate_oracle(samples: &[Sample]) -> Result<EvalReport> {
    let scenes: Vec<_> = samples.iter().map(|s| (s.boxes.clone(), s.boxes.clone())).collect();
    evaluate_detections(&scenes)
}

/// Forward, decode and NMS for each sample.
pub fn detect(net: &Network, samples: &[Sample], nms: &NmsConfig, batch_size: usize) -> Result<Vec<Vec<Box3D>>> {
    nms.validate()?;
    let spec = net.grid_spec();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let raw = net.forward(&batch_inputs(&refs)?)?;
        for boxes in decode_batch(&raw, &spec, nms.confidence_floor)? {
            out.push(nms3d(&boxes, nms));
        }
    }
    Ok(out)
}

pub fn evaluate_iou(net: &Network, samples: &[Sample], nms: &NmsConfig) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let dets = detect(net, samples, nms, 4)?;
    let scenes: Vec<_> = samples.iter().map(|s| s.boxes.clone()).zip(dets).collect();
    evaluate_detections(&scenes)
}
