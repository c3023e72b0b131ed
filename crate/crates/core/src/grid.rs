use serde::{Deserialize, Serialize};

use crate::error::{OccError, Result};

/// Semantic class table shared by grids, renders and exports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPalette {
    pub n_classes: usize,
    pub free_id: u8,
    pub names: Vec<String>,
    pub colors: Vec<[u8; 3]>,
}

impl LabelPalette {
    pub fn new(free_id: u8, names: Vec<String>, colors: Vec<[u8; 3]>) -> Result<Self> {
        let palette = Self {
            n_classes: names.len(),
            free_id,
            names,
            colors,
        };
        palette.validate()?;
        Ok(palette)
    }

    /// The six-class palette used by the synthetic driving scenes.
    pub fn driving() -> Self {
        let names = ["free", "road", "sidewalk", "vehicle", "obstacle", "building"];
        let colors = [
            [0, 0, 0],
            [128, 64, 128],
            [244, 35, 232],
            [0, 0, 142],
            [220, 220, 0],
            [70, 70, 70],
        ];
        Self {
            n_classes: names.len(),
            free_id: 0,
            names: names.iter().map(|s| s.to_string()).collect(),
            colors: colors.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_classes > 255 {
            return Err(OccError::InvalidConfig(format!(
                "n_classes must be in 1..=255, got {}",
                self.n_classes
            )));
        }
        if self.names.len() != self.n_classes || self.colors.len() != self.n_classes {
            return Err(OccError::InvalidConfig(
                "palette names/colors must have n_classes entries".into(),
            ));
        }
        if self.free_id as usize >= self.n_classes {
            return Err(OccError::InvalidConfig(format!(
                "free_id {} out of range for {} classes",
                self.free_id, self.n_classes
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.names {
            if !seen.insert(name.as_str()) {
                return Err(OccError::InvalidConfig(format!("duplicate class name {name}")));
            }
        }
        Ok(())
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.names.iter().position(|n| n == name).map(|i| i as u8)
    }
}

/// A dense `H x W x D` volume of semantic labels.
///
/// Labels are stored x-major, then y, then z: `labels[(x * W + y) * D + z]`.
/// `origin` is the metric coordinate of the corner of voxel (0, 0, 0), so voxel
/// `(i, j, k)` has its center at `origin + (idx + 0.5) * voxel_size`.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyGrid {
    dims: [usize; 3],
    labels: Vec<u8>,
    pub voxel_size: f64,
    pub origin: [f64; 3],
}

impl OccupancyGrid {
    pub fn new(dims: [usize; 3], labels: Vec<u8>, voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(OccError::InvalidConfig(format!("grid dims must be positive, got {dims:?}")));
        }
        let n = dims[0] * dims[1] * dims[2];
        if labels.len() != n {
            return Err(OccError::DimensionMismatch(format!(
                "expected {n} labels for {dims:?}, got {}",
                labels.len()
            )));
        }
        if !(voxel_size.is_finite() && voxel_size > 0.0) {
            return Err(OccError::InvalidConfig(format!("voxel_size must be positive, got {voxel_size}")));
        }
        Ok(Self {
            dims,
            labels,
            voxel_size,
            origin,
        })
    }

    /// Grid filled with a single label.
    pub fn filled(dims: [usize; 3], label: u8, voxel_size: f64, origin: [f64; 3]) -> Result<Self> {
        Self::new(dims, vec![label; dims[0] * dims[1] * dims[2]], voxel_size, origin)
    }

    /// Grid centered on the ego vehicle in x/y with the ground at z = 0.
    pub fn ego_centered(dims: [usize; 3], label: u8, voxel_size: f64) -> Result<Self> {
        let origin = [
            -(dims[0] as f64) * voxel_size / 2.0,
            -(dims[1] as f64) * voxel_size / 2.0,
            0.0,
        ];
        Self::filled(dims, label, voxel_size, origin)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn into_labels(self) -> Vec<u8> {
        self.labels
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.dims[1] + y) * self.dims[2] + z
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.labels[self.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, label: u8) {
        let i = self.index(x, y, z);
        self.labels[i] = label;
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + (x as f64 + 0.5) * self.voxel_size,
            self.origin[1] + (y as f64 + 0.5) * self.voxel_size,
            self.origin[2] + (z as f64 + 0.5) * self.voxel_size,
        ]
    }

    /// Voxel containing a metric point, if inside the grid.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            idx[a] = f as usize;
        }
        Some(idx)
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(OccError::ShapeMismatch(self.dims, other.dims));
        }
        Ok(())
    }

    pub fn check_divisible(&self, factor: usize) -> Result<()> {
        if factor == 0 || self.dims.iter().any(|d| d % factor != 0) {
            return Err(OccError::InvalidConfig(format!(
                "grid dims {:?} not divisible by downsample factor {factor}",
                self.dims
            )));
        }
        Ok(())
    }

    pub fn validate(&self, palette: &LabelPalette) -> Result<()> {
        if let Some(bad) = self.labels.iter().find(|&&l| l as usize >= palette.n_classes) {
            return Err(OccError::InvalidLabel(format!(
                "label {bad} >= n_classes {}",
                palette.n_classes
            )));
        }
        Ok(())
    }

    pub fn occupied_count(&self, free_id: u8) -> usize {
        self.labels.iter().filter(|&&l| l != free_id).count()
    }

    pub fn class_counts(&self, n_classes: usize) -> Vec<usize> {
        let mut counts = vec![0usize; n_classes];
        for &l in &self.labels {
            if (l as usize) < n_classes {
                counts[l as usize] += 1;
            }
        }
        counts
    }

    /// Metric extent of the grid along x (meters).
    pub fn extent_x(&self) -> f64 {
        self.dims[0] as f64 * self.voxel_size
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_rejects_duplicates_and_bad_free_id() {
        let p = LabelPalette::new(0, vec!["a".into(), "a".into()], vec![[0; 3]; 2]);
        assert!(p.is_err());
        let p = LabelPalette::new(3, vec!["a".into(), "b".into()], vec![[0; 3]; 2]);
        assert!(p.is_err());
        LabelPalette::driving().validate().unwrap();
    }

    #[test]
    fn indexing_is_x_major() {
        let mut g = OccupancyGrid::filled([2, 3, 4], 0, 1.0, [0.0; 3]).unwrap();
        g.set(1, 2, 3, 7);
        assert_eq!(g.labels()[23], 7);
        assert_eq!(g.index(0, 1, 0), 4);
        assert_eq!(g.locate(g.voxel_center(1, 2, 3)), Some([1, 2, 3]));
        assert_eq!(g.locate([-0.1, 0.0, 0.0]), None);
    }

    #[test]
    fn rejects_zero_dims_and_wrong_length() {
        assert!(OccupancyGrid::filled([0, 1, 1], 0, 1.0, [0.0; 3]).is_err());
        assert!(OccupancyGrid::new([2, 2, 2], vec![0; 7], 1.0, [0.0; 3]).is_err());
    }
}
