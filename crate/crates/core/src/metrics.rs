//! Occupancy IoU / mIoU.
//!
//! Conventions: the binary IoU counts only occupied (non-free) voxels and is
//! 1.0 when both grids are empty. Per-class IoU skips the free class; the mean
//! is taken over classes present in either grid, and is 1.0 when no
//! non-free class is present anywhere.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{LabelPalette, OccupancyGrid};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Indexed by class id; `None` for the free class and for classes absent from both grids.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

pub fn compute_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, free_id: u8) -> Result<f64> {
    pred.same_shape(gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        let (po, go) = (p != free_id, g != free_id);
        inter += (po && go) as usize;
        union += (po || go) as usize;
    }
    Ok(ratio_or_one(inter, union))
}

pub fn compute_miou(pred: &OccupancyGrid, gt: &OccupancyGrid, palette: &LabelPalette) -> Result<MiouResult> {
    let mut acc = MiouAccumulator::new(palette);
    acc.add(pred, gt)?;
    Ok(acc.miou())
}

fn ratio_or_one(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// Accumulates intersection / union counts over many grid pairs, the
/// dataset-level protocol used for reporting.
#[derive(Debug, Clone)]
pub struct MiouAccumulator {
    free_id: u8,
    inter: Vec<u64>,
    union: Vec<u64>,
    occ_inter: u64,
    occ_union: u64,
}

impl MiouAccumulator {
    pub fn new(palette: &LabelPalette) -> Self {
        Self {
            free_id: palette.free_id,
            inter: vec![0; palette.n_classes],
            union: vec![0; palette.n_classes],
            occ_inter: 0,
            occ_union: 0,
        }
    }

    pub fn add(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
        pred.same_shape(gt)?;
        let n = self.inter.len();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p == g {
                if p < n {
                    self.inter[p] += 1;
                    self.union[p] += 1;
                }
            } else {
                if p < n {
                    self.union[p] += 1;
                }
                if g < n {
                    self.union[g] += 1;
                }
            }
            let (po, go) = (p != self.free_id as usize, g != self.free_id as usize);
            self.occ_inter += (po && go) as u64;
            self.occ_union += (po || go) as u64;
        }
        Ok(())
    }

    pub fn iou(&self) -> f64 {
        ratio_or_one(self.occ_inter as usize, self.occ_union as usize)
    }

    pub fn miou(&self) -> MiouResult {
        let mut per_class = vec![None; self.inter.len()];
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..self.inter.len() {
            if c == self.free_id as usize || self.union[c] == 0 {
                continue;
            }
            let v = self.inter[c] as f64 / self.union[c] as f64;
            per_class[c] = Some(v);
            sum += v;
            count += 1;
        }
        let mean = if count == 0 { 1.0 } else { sum / count as f64 };
        MiouResult { per_class, mean }
    }
}
