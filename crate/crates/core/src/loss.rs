//! Sum-of-squares detection loss over decoded cell predictions.
//!
//! Five terms: center and size errors on occupied cells, object confidence
//! on occupied cells, no-object confidence on empty cells, and class error on
//! occupied cells. Terms are summed over cells and averaged over the batch.
//! The unreliable channel is not supervised.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::grid::{
    map_raw_to_cell, CellPrediction, GridSpec, TargetGrid, SLOT_CENTER, SLOT_CLASS, SLOT_CONF,
    SLOT_EXTENT,
};
use crate::tensor::{sigmoid_scalar, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub lambda_coord: f64,
    pub lambda_noobj: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_coord: 1.0,
            lambda_noobj: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_coord >= 0.0 && self.lambda_noobj >= 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be >= 0, got coord {} noobj {}",
                self.lambda_coord, self.lambda_noobj
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossBreakdown {
    pub center: f64,
    pub size: f64,
    pub conf_obj: f64,
    pub conf_noobj: f64,
    pub class: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn from_terms(center: f64, size: f64, conf_obj: f64, conf_noobj: f64, class: f64) -> Self {
        Self {
            center,
            size,
            conf_obj,
            conf_noobj,
            class,
            total: center + size + conf_obj + conf_noobj + class,
        }
    }

    fn scaled(&self, f: f64) -> Self {
        Self::from_terms(
            self.center * f,
            self.size * f,
            self.conf_obj * f,
            self.conf_noobj * f,
            self.class * f,
        )
    }

    fn plus(&self, o: &Self) -> Self {
        Self::from_terms(
            self.center + o.center,
            self.size + o.size,
            self.conf_obj + o.conf_obj,
            self.conf_noobj + o.conf_noobj,
            self.class + o.class,
        )
    }

    pub const CSV_HEADER: &'static str = "step,total,center,size,conf_obj,conf_noobj,class";

    pub fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{}",
            self.total, self.center, self.size, self.conf_obj, self.conf_noobj, self.class
        )
    }
}

fn check_spec(pred_cells: usize, target: &TargetGrid) -> Result<()> {
    if pred_cells != target.spec.cell_count() {
        return Err(Error::Dimension(format!(
            "prediction has {pred_cells} cells, target grid has {}",
            target.spec.cell_count()
        )));
    }
    Ok(())
}

/// Loss of one sample's decoded predictions against its targets.
pub fn compute_loss(pred: &[CellPrediction], target: &TargetGrid, cfg: &LossConfig) -> Result<LossBreakdown> {
    check_spec(pred.len(), target)?;
    let (mut center, mut size, mut conf_obj, mut conf_noobj, mut class) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target.cells()) {
        match t {
            Some(t) => {
                for a in 0..3 {
                    center += (t.center[a] - p.center[a]).powi(2);
                    size += (t.extent[a] - p.extent[a]).powi(2);
                }
                conf_obj += (1.0 - p.confidence).powi(2);
                for (k, &pk) in p.class_probs.iter().enumerate() {
                    let tk = if k == t.class_id { 1.0 } else { 0.0 };
                    class += (tk - pk).powi(2);
                }
            }
            None => conf_noobj += p.confidence.powi(2),
        }
    }
    Ok(LossBreakdown::from_terms(
        cfg.lambda_coord * center,
        cfg.lambda_coord * size,
        cfg.lambda_coord * conf_obj,
        cfg.lambda_noobj * conf_noobj,
        class,
    ))
}

/// Batch-mean loss of a raw `(batch, S, S, S·C)` grid and its gradient with
/// respect to the raw logits.
pub fn loss_and_grad(
    raw: &Tensor4,
    targets: &[TargetGrid],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, Tensor4)> {
    let batch = raw.shape().batch;
    let spec: GridSpec = match targets.first() {
        Some(t) => t.spec,
        None => return Err(Error::Dimension("loss needs at least one target grid".into())),
    };
    if targets.len() != batch || raw.shape() != spec.raw_shape(batch) {
        return Err(Error::Dimension(format!(
            "raw grid {} does not match {} target grids of size {}",
            raw.shape(),
            targets.len(),
            spec.size
        )));
    }
    let c = spec.channels_per_cell();
    let s = spec.size as f64;
    let inv_batch = 1.0 / batch as f64;
    let mut grad = Tensor4::zeros(raw.shape());
    let mut total = LossBreakdown::default();

    for (b, target) in targets.iter().enumerate() {
        if target.spec != spec {
            return Err(Error::Dimension("target grids disagree on grid spec".into()));
        }
        let item = raw.item(b);
        let preds: Vec<CellPrediction> = item
            .chunks_exact(c)
            .enumerate()
            .map(|(idx, r)| map_raw_to_cell(r, spec.cell_coords(idx), &spec))
            .collect();
        total = total.plus(&compute_loss(&preds, target, cfg)?);

        let n = spec.raw_len();
        let g_item = &mut grad.data_mut()[b * n..(b + 1) * n];
        for (idx, ((p, t), g)) in preds
            .iter()
            .zip(target.cells())
            .zip(g_item.chunks_exact_mut(c))
            .enumerate()
        {
            let dsig = |v: f64| v * (1.0 - v);
            match t {
                Some(t) => {
                    let lc = cfg.lambda_coord * inv_batch;
                    for a in 0..3 {
                        // center = (σ(raw) + offset) / S
                        let sg = sigmoid_scalar(item[idx * c + SLOT_CENTER + a]);
                        g[SLOT_CENTER + a] = lc * 2.0 * (p.center[a] - t.center[a]) * dsig(sg) / s;
                        g[SLOT_EXTENT + a] = lc * 2.0 * (p.extent[a] - t.extent[a]) * dsig(p.extent[a]);
                    }
                    g[SLOT_CONF] = lc * -2.0 * (1.0 - p.confidence) * dsig(p.confidence);
                    for (k, &pk) in p.class_probs.iter().enumerate() {
                        let tk = if k == t.class_id { 1.0 } else { 0.0 };
                        g[SLOT_CLASS + k] = inv_batch * 2.0 * (pk - tk) * dsig(pk);
                    }
                }
                None => {
                    g[SLOT_CONF] = cfg.lambda_noobj * inv_batch * 2.0 * p.confidence * dsig(p.confidence);
                }
            }
        }
    }
    Ok((total.scaled(inv_batch), grad))
}

/// Records the loss of `raw` on the tape. Returns the scalar node and the
/// per-term breakdown.
pub fn detection_loss(
    tape: &mut Tape<'_>,
    raw: Var,
    targets: &[TargetGrid],
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let (breakdown, grad) = loss_and_grad(tape.value(raw), targets, cfg)?;
    let node = tape.fused_scalar(raw, breakdown.total, grad)?;
    Ok((node, breakdown))
}
