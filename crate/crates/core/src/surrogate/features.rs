//! Per-coarse-cell topology features of a microstructure.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::lattice_coord;
use crate::microstructure::{voxelize, Microstructure};

pub const POROSITY_LOG_OFFSET: f64 = 1e-6;

/// Length unit of the distance feature.
pub const DISTANCE_SCALE: f64 = 0.1;
pub const DISTANCE_LOG_OFFSET: f64 = 1e-6;

pub const STANDARD_FEATURES: [&str; 3] = ["bias", "log_porosity", "log_mean_distance"];

/// `K x J` feature matrix, row `k` is the feature vector of coarse cell `k`
/// (row-major over the coarse grid, `cy * kx + cx`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub kx: usize,
    pub ky: usize,
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(kx: usize, ky: usize, names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let fm = FeatureMatrix {
            kx,
            ky,
            names,
            values,
        };
        if fm.values.len() != fm.cells() * fm.width() {
            return Err(Error::DimensionMismatch(format!(
                "{} feature values for {} cells x {} features",
                fm.values.len(),
                fm.cells(),
                fm.width()
            )));
        }
        Ok(fm)
    }

    pub fn cells(&self) -> usize {
        self.kx * self.ky
    }

    pub fn width(&self) -> usize {
        self.names.len()
    }

    pub fn row(&self, k: usize) -> &[f64] {
        let j = self.width();
        &self.values[k * j..(k + 1) * j]
    }

    pub fn get(&self, k: usize, j: usize) -> f64 {
        self.values[k * self.width() + j]
    }

    /// `Phi theta`
    pub fn apply(&self, theta: &[f64]) -> Vec<f64> {
        assert_eq!(theta.len(), self.width());
        (0..self.cells())
            .map(|k| self.row(k).iter().zip(theta).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// Appends a column (used for relevance diagnostics).
    pub fn with_column(&self, name: &str, column: &[f64]) -> FeatureMatrix {
        assert_eq!(column.len(), self.cells());
        let j = self.width();
        let mut values = Vec::with_capacity(self.cells() * (j + 1));
        for k in 0..self.cells() {
            values.extend_from_slice(self.row(k));
            values.push(column[k]);
        }
        let mut names = self.names.clone();
        names.push(name.to_string());
        FeatureMatrix {
            kx: self.kx,
            ky: self.ky,
            names,
            values,
        }
    }
}

/// Features per coarse cell from the voxelization at `resolution`:
/// `[1, log(porosity + 1e-6), log(d / DISTANCE_SCALE + 1e-6)]` with `d` the
/// mean distance from the cell's fluid voxels to the nearest exclusion or
/// the top/bottom wall.
///
/// Voxel `(ix, iy)` belongs to coarse cell `(ix * kx / res, iy * ky / res)`.
pub fn extract_features(
    ms: &Microstructure,
    coarse_grid: (usize, usize),
    resolution: usize,
) -> Result<FeatureMatrix> {
    let (kx, ky) = coarse_grid;
    if kx == 0 || ky == 0 || resolution < kx.max(ky) || resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "feature resolution {resolution} too coarse for a {kx}x{ky} grid"
        )));
    }
    let mask = voxelize(ms, resolution);
    let g = resolution;
    let cells = kx * ky;
    let mut voxels = vec![0usize; cells];
    let mut fluid = vec![0usize; cells];
    let mut dist = vec![0.0; cells];
    for iy in 0..g {
        let cy = iy * ky / g;
        let y = lattice_coord(iy, g);
        for ix in 0..g {
            let c = cy * kx + ix * kx / g;
            voxels[c] += 1;
            if mask.is_solid(ix, iy) {
                continue;
            }
            fluid[c] += 1;
            dist[c] += ms.distance_to_solid(lattice_coord(ix, g), y);
        }
    }
    let mut values = Vec::with_capacity(cells * STANDARD_FEATURES.len());
    for c in 0..cells {
        let porosity = fluid[c] as f64 / voxels[c] as f64;
        let mean_dist = if fluid[c] > 0 {
            dist[c] / fluid[c] as f64
        } else {
            0.0
        };
        values.extend_from_slice(&[
            1.0,
            (porosity + POROSITY_LOG_OFFSET).ln(),
            (mean_dist / DISTANCE_SCALE + DISTANCE_LOG_OFFSET).ln(),
        ]);
    }
    FeatureMatrix::new(
        kx,
        ky,
        STANDARD_FEATURES.iter().map(|s| s.to_string()).collect(),
        values,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microstructure::{sample_exclusions, Exclusion, MicrostructureConfig};
    use std::f64::consts::PI;

    #[test]
    fn empty_structure_features() {
        let f = extract_features(&Microstructure::empty(), (2, 2), 64).unwrap();
        for k in 0..4 {
            assert_eq!(f.get(k, 0), 1.0);
            assert!(f.get(k, 1).abs() < 1e-5);
            // only the channel walls bound the fluid
            assert!(f.get(k, 2) > (0.1f64 / DISTANCE_SCALE).ln());
        }
    }

    #[test]
    fn bias_column_and_ranges() {
        let cfg = MicrostructureConfig::default();
        for seed in 0..5 {
            let ms = sample_exclusions(&cfg, seed).unwrap();
            let f = extract_features(&ms, (4, 4), 128).unwrap();
            for k in 0..16 {
                assert_eq!(f.get(k, 0), 1.0);
                assert!(f.get(k, 1) <= 1e-5 && f.get(k, 1) > -5.0);
                assert!(f.row(k).iter().all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn single_disk_porosity() {
        let ms = Microstructure::new(vec![Exclusion {
            center: [0.25, 0.25],
            radius: 0.2,
        }])
        .unwrap();
        let f = extract_features(&ms, (2, 2), 256).unwrap();
        let expected = 1.0 - 4.0 * PI * 0.04;
        // voxel count error of the disk, relative to the cell area
        let tolerance = 2.0 * PI * 0.2 / 256.0 / 0.25;
        let porosity = f.get(0, 1).exp();
        assert!((porosity - expected).abs() < tolerance, "{porosity}");
        for k in 1..4 {
            assert!(f.get(k, 1).abs() < 1e-5);
        }
        // the disk pulls fluid in its own cell closer to solid
        assert!(f.get(0, 2) < f.get(3, 2));
    }

    #[test]
    fn appending_a_column() {
        let f = extract_features(&Microstructure::empty(), (1, 2), 16).unwrap();
        let g = f.with_column("noise", &[0.5, -0.5]);
        assert_eq!(g.width(), 4);
        assert_eq!(g.get(1, 3), -0.5);
        assert_eq!(&g.row(0)[..3], f.row(0));
    }
}
