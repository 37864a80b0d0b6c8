//! Mapping between box lists and the S×S×S detection grid.
//!
//! Raw network output for one sample is laid out cell-major as
//! `[i][j][k][slot]`, where `i` indexes x, `j` indexes y, `k` indexes depth
//! and `slot` runs over the per-cell channels:
//!
//! | slot | meaning                          |
//! |------|----------------------------------|
//! | 0    | confidence                       |
//! | 1    | unreliable value (not trained)   |
//! | 2..5 | anchor point x, y, z             |
//! | 5..8 | extents w, h, d                  |
//! | 8..  | class probabilities              |
//!
//! A batched raw grid is a [`Tensor4`] of shape `(batch, S, S, S·C)`.

use crate::error::{Error, Result};
use crate::geometry::Box3D;
use crate::tensor::{sigmoid_scalar, Shape4, Tensor4};

pub const SLOT_CONF: usize = 0;
pub const SLOT_UNRELIABLE: usize = 1;
pub const SLOT_CENTER: usize = 2;
pub const SLOT_EXTENT: usize = 5;
pub const SLOT_CLASS: usize = 8;

/// Box-geometry channels in front of the class channels.
pub const BOX_CHANNELS: usize = 8;
/// Per-cell channel count of the detector output.
pub const CHANNELS_PER_CELL: usize = 10;

/// Logit magnitude used when building raw grids from targets.
pub const SATURATED_LOGIT: f64 = 30.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    /// Cells per axis.
    pub size: usize,
    pub num_classes: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            size: 26,
            num_classes: 2,
        }
    }
}

impl GridSpec {
    /// Boxes per cell; fixed.
    pub const BOXES_PER_CELL: usize = 1;

    pub fn new(size: usize, num_classes: usize) -> Result<Self> {
        let spec = Self { size, num_classes };
        if size == 0 {
            return Err(Error::Config("grid size must be positive".into()));
        }
        if spec.channels_per_cell() != CHANNELS_PER_CELL {
            return Err(Error::Config(format!(
                "{BOX_CHANNELS} box channels + {num_classes} classes must give {CHANNELS_PER_CELL} channels per cell"
            )));
        }
        Ok(spec)
    }

    pub fn channels_per_cell(&self) -> usize {
        BOX_CHANNELS + self.num_classes
    }

    pub fn cell_count(&self) -> usize {
        self.size * self.size * self.size
    }

    /// Raw values for one sample.
    pub fn raw_len(&self) -> usize {
        self.cell_count() * self.channels_per_cell()
    }

    pub fn raw_shape(&self, batch: usize) -> Shape4 {
        Shape4::new(batch, self.size, self.size, self.size * self.channels_per_cell())
    }

    #[inline]
    pub fn cell_index(&self, (i, j, k): (usize, usize, usize)) -> usize {
        (i * self.size + j) * self.size + k
    }

    #[inline]
    pub fn cell_coords(&self, index: usize) -> (usize, usize, usize) {
        let s = self.size;
        (index / (s * s), (index / s) % s, index % s)
    }
}

/// Cell containing a normalized center; the upper face of the unit cube
/// belongs to the last cell.
pub fn cell_of(center: [f64; 3], spec: &GridSpec) -> Result<(usize, usize, usize)> {
    let s = spec.size;
    let mut idx = [0usize; 3];
    for (axis, (&v, slot)) in center.iter().zip(idx.iter_mut()).enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Range(format!(
                "center coordinate {v} on axis {} is outside [0, 1]",
                ["x", "y", "z"][axis]
            )));
        }
        *slot = ((v * s as f64).floor() as usize).min(s - 1);
    }
    Ok((idx[0], idx[1], idx[2]))
}

/// Decoded contents of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPrediction {
    pub confidence: f64,
    pub unreliable: f64,
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub class_probs: Vec<f64>,
}

impl CellPrediction {
    pub fn to_box(&self) -> Box3D {
        Box3D::new(self.center, self.extent, self.confidence, self.class_probs.clone())
    }
}

/// Decodes one cell's raw channels: sigmoids everywhere, anchor point offset
/// into the cell.
pub fn map_raw_to_cell(raw: &[f64], cell: (usize, usize, usize), spec: &GridSpec) -> CellPrediction {
    debug_assert_eq!(raw.len(), spec.channels_per_cell());
    let s = spec.size as f64;
    let offs = [cell.0 as f64, cell.1 as f64, cell.2 as f64];
    CellPrediction {
        confidence: sigmoid_scalar(raw[SLOT_CONF]),
        unreliable: sigmoid_scalar(raw[SLOT_UNRELIABLE]),
        center: std::array::from_fn(|a| (sigmoid_scalar(raw[SLOT_CENTER + a]) + offs[a]) / s),
        extent: std::array::from_fn(|a| sigmoid_scalar(raw[SLOT_EXTENT + a])),
        class_probs: raw[SLOT_CLASS..SLOT_CLASS + spec.num_classes]
            .iter()
            .map(|&v| sigmoid_scalar(v))
            .collect(),
    }
}

fn check_item(raw: &[f64], spec: &GridSpec) -> Result<()> {
    if raw.len() != spec.raw_len() {
        return Err(Error::Dimension(format!(
            "raw grid has {} values, expected {}³·{} = {}",
            raw.len(),
            spec.size,
            spec.channels_per_cell(),
            spec.raw_len()
        )));
    }
    Ok(())
}

/// Decodes every cell of one sample.
pub fn decode_cells(raw: &[f64], spec: &GridSpec) -> Result<Vec<CellPrediction>> {
    check_item(raw, spec)?;
    let c = spec.channels_per_cell();
    Ok(raw
        .chunks_exact(c)
        .enumerate()
        .map(|(idx, r)| map_raw_to_cell(r, spec.cell_coords(idx), spec))
        .collect())
}

/// Boxes from cells whose confidence is at least `confidence_floor`, in cell order.
pub fn decode_grid(raw: &[f64], spec: &GridSpec, confidence_floor: f64) -> Result<Vec<Box3D>> {
    check_item(raw, spec)?;
    let c = spec.channels_per_cell();
    Ok(raw
        .chunks_exact(c)
        .enumerate()
        .filter(|(_, r)| sigmoid_scalar(r[SLOT_CONF]) >= confidence_floor)
        .map(|(idx, r)| map_raw_to_cell(r, spec.cell_coords(idx), spec).to_box())
        .collect())
}

/// [`decode_grid`] for every item of a batched `(batch, S, S, S·C)` tensor.
pub fn decode_batch(raw: &Tensor4, spec: &GridSpec, confidence_floor: f64) -> Result<Vec<Vec<Box3D>>> {
    let expect = spec.raw_shape(raw.shape().batch);
    if raw.shape() != expect {
        return Err(Error::Dimension(format!(
            "raw grid shape {} does not match {expect}",
            raw.shape()
        )));
    }
    (0..expect.batch)
        .map(|b| decode_grid(raw.item(b), spec, confidence_floor))
        .collect()
}

/// Supervision for one occupied cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTarget {
    pub center: [f64; 3],
    pub extent: [f64; 3],
    pub class_id: usize,
}

impl CellTarget {
    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }

    pub fn to_box(&self, num_classes: usize) -> Box3D {
        Box3D::labeled(self.class_id, num_classes, self.center, self.extent)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    pub spec: GridSpec,
    cells: Vec<Option<CellTarget>>,
    collisions: usize,
}

impl TargetGrid {
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            cells: vec![None; spec.cell_count()],
            collisions: 0,
        }
    }

    pub fn cells(&self) -> &[Option<CellTarget>] {
        &self.cells
    }

    pub fn get(&self, cell: (usize, usize, usize)) -> Option<&CellTarget> {
        self.cells[self.spec.cell_index(cell)].as_ref()
    }

    /// Objectness indicator per cell.
    pub fn obj_mask(&self) -> Vec<bool> {
        self.cells.iter().map(Option::is_some).collect()
    }

    pub fn occupied(&self) -> usize {
        self.cells.iter().filter(|c| c.is_some()).count()
    }

    /// Boxes dropped because a larger box claimed the same cell.
    pub fn collisions(&self) -> usize {
        self.collisions
    }

    /// Ground-truth boxes in cell order.
    pub fn boxes(&self) -> Vec<Box3D> {
        self.cells
            .iter()
            .flatten()
            .map(|t| t.to_box(self.spec.num_classes))
            .collect()
    }

    /// Raw logits that decode to exactly these targets: inverse sigmoids for
    /// the geometry, saturated logits for confidence and class.
    pub fn to_logits(&self) -> Vec<f64> {
        let c = self.spec.channels_per_cell();
        let s = self.spec.size as f64;
        let mut raw = vec![0.0; self.spec.raw_len()];
        for (idx, (cell, out)) in self.cells.iter().zip(raw.chunks_exact_mut(c)).enumerate() {
            let Some(t) = cell else {
                out[SLOT_CONF] = -SATURATED_LOGIT;
                continue;
            };
            let (i, j, k) = self.spec.cell_coords(idx);
            let offs = [i as f64, j as f64, k as f64];
            out[SLOT_CONF] = SATURATED_LOGIT;
            for a in 0..3 {
                out[SLOT_CENTER + a] = logit(t.center[a] * s - offs[a]);
                out[SLOT_EXTENT + a] = logit(t.extent[a]);
            }
            for k in 0..self.spec.num_classes {
                out[SLOT_CLASS + k] = if k == t.class_id {
                    SATURATED_LOGIT
                } else {
                    -SATURATED_LOGIT
                };
            }
        }
        raw
    }
}

/// Inverse sigmoid, clamped away from ±∞.
pub fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln()
}

/// Assigns each box to the cell containing its center. When two boxes land
/// in one cell the larger volume wins and the collision is counted.
pub fn encode_targets(boxes: &[Box3D], spec: &GridSpec) -> Result<TargetGrid> {
    let mut grid = TargetGrid::empty(*spec);
    for b in boxes {
        let idx = spec.cell_index(cell_of(b.center(), spec)?);
        let target = CellTarget {
            center: b.center(),
            extent: b.extent(),
            class_id: b.class_id(),
        };
        if target.class_id >= spec.num_classes {
            return Err(Error::Range(format!(
                "class id {} >= {} classes",
                target.class_id, spec.num_classes
            )));
        }
        match &mut grid.cells[idx] {
            slot @ None => *slot = Some(target),
            Some(existing) => {
                grid.collisions += 1;
                if target.volume() > existing.volume() {
                    *existing = target;
                }
            }
        }
    }
    Ok(grid)
}
