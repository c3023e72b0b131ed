use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};
use crate::grid::{LabelPalette, OccupancyGrid};

/// Half-open voxel box `[min, max)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BBox {
    pub fn new(min: [usize; 3], max: [usize; 3]) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, x: usize, y: usize, z: usize) -> bool {
        (self.min[0]..self.max[0]).contains(&x)
            && (self.min[1]..self.max[1]).contains(&y)
            && (self.min[2]..self.max[2]).contains(&z)
    }

    pub fn volume(&self) -> usize {
        (0..3).map(|a| self.max[a].saturating_sub(self.min[a])).product()
    }

    fn check(&self, dims: [usize; 3]) -> Result<()> {
        for a in 0..3 {
            if self.min[a] > self.max[a] || self.max[a] > dims[a] {
                return Err(OccError::InvalidEdit(format!(
                    "bbox {:?}..{:?} outside grid {dims:?}",
                    self.min, self.max
                )));
            }
        }
        Ok(())
    }

    pub fn voxels(&self) -> impl Iterator<Item = [usize; 3]> + '_ {
        (self.min[0]..self.max[0]).flat_map(move |x| {
            (self.min[1]..self.max[1]).flat_map(move |y| (self.min[2]..self.max[2]).map(move |z| [x, y, z]))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EditSpec {
    Remove { bbox: BBox },
    Insert { bbox: BBox, class_id: u8 },
}

/// Remove (clear to free) or insert (stamp a class) inside a voxel box.
pub fn edit_grid(grid: &OccupancyGrid, op: &EditSpec, palette: &LabelPalette) -> Result<OccupancyGrid> {
    let (bbox, label) = match op {
        EditSpec::Remove { bbox } => (bbox, palette.free_id),
        EditSpec::Insert { bbox, class_id } => {
            if *class_id as usize >= palette.n_classes {
                return Err(OccError::InvalidEdit(format!(
                    "class_id {class_id} >= n_classes {}",
                    palette.n_classes
                )));
            }
            (bbox, *class_id)
        }
    };
    bbox.check(grid.dims())?;
    let mut out = grid.clone();
    for [x, y, z] in bbox.voxels() {
        out.set(x, y, z, label);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn remove_on_free_region_is_noop_and_insert_remove_inverts() {
        let p = LabelPalette::driving();
        let mut g = OccupancyGrid::filled([4, 4, 2], 0, 1.0, [0.0; 3]).unwrap();
        g.set(3, 3, 1, 5);
        let b = BBox::new([0, 0, 0], [2, 2, 2]);
        assert_eq!(edit_grid(&g, &EditSpec::Remove { bbox: b }, &p).unwrap(), g);
        let ins = edit_grid(&g, &EditSpec::Insert { bbox: b, class_id: 3 }, &p).unwrap();
        assert_eq!(ins.occupied_count(0), 1 + b.volume());
        assert_eq!(edit_grid(&ins, &EditSpec::Remove { bbox: b }, &p).unwrap(), g);
    }

    #[test]
    fn rejects_bad_edits() {
        let p = LabelPalette::driving();
        let g = OccupancyGrid::filled([4, 4, 2], 0, 1.0, [0.0; 3]).unwrap();
        let out_of_bounds = BBox::new([0, 0, 0], [5, 1, 1]);
        assert!(edit_grid(&g, &EditSpec::Remove { bbox: out_of_bounds }, &p).is_err());
        let inverted = BBox::new([2, 0, 0], [1, 1, 1]);
        assert!(edit_grid(&g, &EditSpec::Remove { bbox: inverted }, &p).is_err());
        let b = BBox::new([0, 0, 0], [1, 1, 1]);
        assert!(edit_grid(&g, &EditSpec::Insert { bbox: b, class_id: 6 }, &p).is_err());
    }

    #[test]
    fn edit_spec_serializes_with_op_tag() {
        let e = EditSpec::Insert { bbox: BBox::new([0, 1, 2], [3, 4, 5]), class_id: 3 };
        let s = serde_json::to_string(&e).unwrap();
        assert!(s.contains("\"op\":\"INSERT\""));
        assert_eq!(serde_json::from_str::<EditSpec>(&s).unwrap(), e);
    }
}
