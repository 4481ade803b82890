//! Random porous microstructures: impenetrable polydisperse disks in the unit
//! square, their rasterization and connectivity.

use std::collections::VecDeque;

use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Number of points of the radius quantization grid on `[r_min, 0.5]`.
pub const RADIUS_GRID_POINTS: usize = 1000;

pub const MAX_RADIUS: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Exclusion {
    pub center: [f64; 2],
    pub radius: f64,
}

impl Exclusion {
    pub fn overlaps(&self, other: &Exclusion) -> bool {
        let dx = self.center[0] - other.center[0];
        let dy = self.center[1] - other.center[1];
        let reach = self.radius + other.radius;
        dx * dx + dy * dy < reach * reach
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        dx * dx + dy * dy < self.radius * self.radius
    }

    pub fn area(&self) -> f64 {
        std::f64::consts::PI * self.radius * self.radius
    }
}

/// A list of non-overlapping circular exclusions in the unit square.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Microstructure {
    exclusions: Vec<Exclusion>,
}

#[derive(Serialize, Deserialize)]
struct MicrostructureRecord {
    centers: Vec<[f64; 2]>,
    radii: Vec<f64>,
}

impl Serialize for Microstructure {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MicrostructureRecord {
            centers: self.exclusions.iter().map(|e| e.center).collect(),
            radii: self.exclusions.iter().map(|e| e.radius).collect(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Microstructure {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rec = MicrostructureRecord::deserialize(d)?;
        if rec.centers.len() != rec.radii.len() {
            return Err(serde::de::Error::custom(format!(
                "{} centers but {} radii",
                rec.centers.len(),
                rec.radii.len()
            )));
        }
        let exclusions = rec
            .centers
            .into_iter()
            .zip(rec.radii)
            .map(|(center, radius)| Exclusion { center, radius })
            .collect();
        Microstructure::new(exclusions).map_err(serde::de::Error::custom)
    }
}

impl Microstructure {
    /// Validates the exclusion list (radius range, centers in the unit square,
    /// pairwise non-overlap).
    pub fn new(exclusions: Vec<Exclusion>) -> Result<Self> {
        for (i, e) in exclusions.iter().enumerate() {
            if !(e.radius > 0.0 && e.radius <= MAX_RADIUS) {
                return Err(Error::InvalidConfig(format!(
                    "exclusion {i}: radius {} outside (0, 0.5]",
                    e.radius
                )));
            }
            if !e.center.iter().all(|c| (0.0..=1.0).contains(c)) {
                return Err(Error::InvalidConfig(format!(
                    "exclusion {i}: center {:?} outside the unit square",
                    e.center
                )));
            }
        }
        for i in 0..exclusions.len() {
            for j in 0..i {
                if exclusions[i].overlaps(&exclusions[j]) {
                    return Err(Error::InvalidConfig(format!(
                        "exclusions {j} and {i} overlap"
                    )));
                }
            }
        }
        Ok(Microstructure { exclusions })
    }

    pub fn empty() -> Self {
        Microstructure::default()
    }

    pub fn exclusions(&self) -> &[Exclusion] {
        &self.exclusions
    }

    pub fn len(&self) -> usize {
        self.exclusions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exclusions.is_empty()
    }

    /// Total exclusion area clipped to nothing: disks cut by the top/bottom
    /// walls are counted in full.
    pub fn exclusion_area(&self) -> f64 {
        self.exclusions.iter().map(Exclusion::area).sum()
    }

    /// Reflection about `y = 0.5`.
    pub fn mirrored_y(&self) -> Self {
        Microstructure {
            exclusions: self
                .exclusions
                .iter()
                .map(|e| Exclusion {
                    center: [e.center[0], 1.0 - e.center[1]],
                    radius: e.radius,
                })
                .collect(),
        }
    }

    /// Distance from `(x, y)` to the nearest solid boundary: any exclusion or
    /// the top/bottom walls. Zero inside an exclusion.
    pub fn distance_to_solid(&self, x: f64, y: f64) -> f64 {
        let mut d = y.min(1.0 - y);
        for e in &self.exclusions {
            let gap = ((x - e.center[0]).hypot(y - e.center[1]) - e.radius).max(0.0);
            d = d.min(gap);
        }
        d
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("microstructure serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalParams {
    pub mu: f64,
    pub sigma: f64,
}

/// Distribution of the number of exclusions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CountDistribution {
    /// Continuous log-normal variate rounded to the nearest integer.
    LogNormal { mu: f64, sigma: f64 },
    Fixed { count: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MicrostructureConfig {
    pub count: CountDistribution,
    pub radius_lognormal: LogNormalParams,
    /// Lower end of the radius quantization grid.
    pub r_min: f64,
    /// Exclusion-free strip width at the inlet (x = 0) and outlet (x = 1).
    pub margin: f64,
    pub max_placement_attempts: usize,
}

impl Default for MicrostructureConfig {
    fn default() -> Self {
        MicrostructureConfig {
            count: CountDistribution::LogNormal {
                mu: 30f64.ln(),
                sigma: 0.2,
            },
            radius_lognormal: LogNormalParams {
                mu: 0.045f64.ln(),
                sigma: 0.3,
            },
            r_min: 0.02,
            margin: 0.03,
            max_placement_attempts: 10_000,
        }
    }
}

impl MicrostructureConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if let CountDistribution::LogNormal { mu, sigma } = self.count {
            if !(sigma >= 0.0) || !mu.is_finite() && mu != f64::NEG_INFINITY {
                return bad(format!("count log-normal ({mu}, {sigma})"));
            }
        }
        let LogNormalParams { mu, sigma } = self.radius_lognormal;
        if !(sigma >= 0.0) || !mu.is_finite() {
            return bad(format!("radius log-normal ({mu}, {sigma})"));
        }
        if !(self.r_min > 0.0 && self.r_min < MAX_RADIUS) {
            return bad(format!("r_min {} outside (0, 0.5)", self.r_min));
        }
        if !(0.0..0.5).contains(&self.margin) {
            return bad(format!("margin {} outside [0, 0.5)", self.margin));
        }
        if self.max_placement_attempts < 1 {
            return bad("max_placement_attempts must be at least 1".into());
        }
        Ok(())
    }

    pub fn radius_grid_step(&self) -> f64 {
        (MAX_RADIUS - self.r_min) / (RADIUS_GRID_POINTS - 1) as f64
    }

    /// Maps a continuous radius variate onto the quantization grid.
    pub fn quantize_radius(&self, r: f64) -> f64 {
        let step = self.radius_grid_step();
        let k = ((r.clamp(self.r_min, MAX_RADIUS) - self.r_min) / step).round();
        (self.r_min + k * step).min(MAX_RADIUS)
    }

    fn draw_count<R: Rng>(&self, rng: &mut R) -> usize {
        match self.count {
            CountDistribution::Fixed { count } => count,
            CountDistribution::LogNormal { mu, sigma } => {
                if mu == f64::NEG_INFINITY {
                    return 0;
                }
                let v = if sigma == 0.0 {
                    mu.exp()
                } else {
                    LogNormal::new(mu, sigma).expect("validated").sample(rng)
                };
                v.round().max(0.0) as usize
            }
        }
    }

    fn draw_radius<R: Rng>(&self, rng: &mut R) -> f64 {
        let LogNormalParams { mu, sigma } = self.radius_lognormal;
        let v = if sigma == 0.0 {
            mu.exp()
        } else {
            LogNormal::new(mu, sigma).expect("validated").sample(rng)
        };
        self.quantize_radius(v)
    }
}

/// Random sequential addition: draw the count, draw radii, place them
/// largest-first uniformly with rejection on overlap and margin violation.
pub fn sample_exclusions(config: &MicrostructureConfig, seed: u64) -> Result<Microstructure> {
    config.validate()?;
    let mut rng = seed::rng(seed);
    let count = config.draw_count(&mut rng);
    let mut radii: Vec<f64> = (0..count).map(|_| config.draw_radius(&mut rng)).collect();
    radii.sort_by(|a, b| b.total_cmp(a));

    let mut placed: Vec<Exclusion> = Vec::with_capacity(count);
    for (index, &radius) in radii.iter().enumerate() {
        let lo = config.margin + radius;
        let hi = 1.0 - config.margin - radius;
        if lo > hi {
            return Err(Error::PlacementFailure {
                index,
                radius,
                attempts: 0,
            });
        }
        let mut accepted = None;
        for _ in 0..config.max_placement_attempts {
            let candidate = Exclusion {
                center: [rng.random_range(lo..=hi), rng.random_range(0.0..=1.0)],
                radius,
            };
            if !placed.iter().any(|e| e.overlaps(&candidate)) {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(e) => placed.push(e),
            None => {
                return Err(Error::PlacementFailure {
                    index,
                    radius,
                    attempts: config.max_placement_attempts,
                })
            }
        }
    }
    Ok(Microstructure { exclusions: placed })
}

/// Boolean G×G raster, row-major with row index along y (`cells[iy * G + ix]`),
/// `true` = solid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SolidMask {
    resolution: usize,
    cells: Vec<bool>,
}

impl SolidMask {
    pub fn from_cells(resolution: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != resolution * resolution {
            return Err(Error::DimensionMismatch(format!(
                "{} cells for resolution {resolution}",
                cells.len()
            )));
        }
        Ok(SolidMask { resolution, cells })
    }

    pub fn all_fluid(resolution: usize) -> Self {
        SolidMask {
            resolution,
            cells: vec![false; resolution * resolution],
        }
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    #[inline]
    pub fn is_solid(&self, ix: usize, iy: usize) -> bool {
        self.cells[iy * self.resolution + ix]
    }

    pub fn set(&mut self, ix: usize, iy: usize, solid: bool) {
        self.cells[iy * self.resolution + ix] = solid;
    }

    pub fn solid_fraction(&self) -> f64 {
        self.cells.iter().filter(|&&s| s).count() as f64 / self.cells.len() as f64
    }

    /// Marks fluid cells that cannot exchange fluid with the inlet or outlet
    /// column (4-connectivity) as solid. Such pockets have no pressure level.
    pub fn without_isolated_pockets(&self) -> SolidMask {
        let g = self.resolution;
        let mut reached = vec![false; g * g];
        let mut queue = VecDeque::new();
        for iy in 0..g {
            for ix in [0, g - 1] {
                let k = iy * g + ix;
                if !self.cells[k] && !reached[k] {
                    reached[k] = true;
                    queue.push_back((ix, iy));
                }
            }
        }
        flood(self, &mut reached, &mut queue);
        SolidMask {
            resolution: g,
            cells: reached.iter().map(|&r| !r).collect(),
        }
    }

    /// Transposition (swaps the x and y axes).
    pub fn transposed(&self) -> SolidMask {
        let g = self.resolution;
        let mut cells = vec![false; g * g];
        for iy in 0..g {
            for ix in 0..g {
                cells[ix * g + iy] = self.cells[iy * g + ix];
            }
        }
        SolidMask { resolution: g, cells }
    }
}

fn flood(mask: &SolidMask, reached: &mut [bool], queue: &mut VecDeque<(usize, usize)>) {
    let g = mask.resolution;
    while let Some((ix, iy)) = queue.pop_front() {
        let mut visit = |jx: usize, jy: usize| {
            let k = jy * g + jx;
            if !mask.cells[k] && !reached[k] {
                reached[k] = true;
                queue.push_back((jx, jy));
            }
        };
        if ix > 0 {
            visit(ix - 1, iy);
        }
        if ix + 1 < g {
            visit(ix + 1, iy);
        }
        if iy > 0 {
            visit(ix, iy - 1);
        }
        if iy + 1 < g {
            visit(ix, iy + 1);
        }
    }
}

/// A cell is solid iff its center lies inside an exclusion disk.
pub fn voxelize(ms: &Microstructure, resolution: usize) -> SolidMask {
    assert!(resolution >= 2, "voxelization resolution must be at least 2");
    let g = resolution;
    let h = 1.0 / g as f64;
    let mut mask = SolidMask::all_fluid(g);
    for e in ms.exclusions() {
        let range = |c: f64| {
            let lo = ((c - e.radius) / h - 0.5).floor().max(0.0) as usize;
            let hi = (((c + e.radius) / h - 0.5).ceil().max(0.0) as usize).min(g - 1);
            lo..=hi
        };
        for iy in range(e.center[1]) {
            let y = (iy as f64 + 0.5) * h;
            for ix in range(e.center[0]) {
                let x = (ix as f64 + 0.5) * h;
                if e.contains(x, y) {
                    mask.set(ix, iy, true);
                }
            }
        }
    }
    mask
}

/// True iff a 4-connected fluid path joins the `x = 0` and `x = 1` columns.
pub fn percolates(mask: &SolidMask) -> bool {
    let g = mask.resolution;
    let mut reached = vec![false; g * g];
    let mut queue = VecDeque::new();
    for iy in 0..g {
        if !mask.is_solid(0, iy) {
            reached[iy * g] = true;
            queue.push_back((0, iy));
        }
    }
    flood(mask, &mut reached, &mut queue);
    (0..g).any(|iy| reached[iy * g + g - 1])
}

/// Fraction of fluid cells.
pub fn porosity(mask: &SolidMask) -> f64 {
    1.0 - mask.solid_fraction()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn disk(x: f64, y: f64, r: f64) -> Exclusion {
        Exclusion {
            center: [x, y],
            radius: r,
        }
    }

    #[test]
    fn degenerate_zero_count_gives_empty_structure() {
        let cfg = MicrostructureConfig {
            count: CountDistribution::Fixed { count: 0 },
            ..Default::default()
        };
        let ms = sample_exclusions(&cfg, 3).unwrap();
        assert!(ms.is_empty());
        assert_eq!(porosity(&voxelize(&ms, 32)), 1.0);

        let cfg = MicrostructureConfig {
            count: CountDistribution::LogNormal {
                mu: -10.0,
                sigma: 0.0,
            },
            ..Default::default()
        };
        assert!(sample_exclusions(&cfg, 3).unwrap().is_empty());
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = MicrostructureConfig::default();
        let a = sample_exclusions(&cfg, 11).unwrap();
        let b = sample_exclusions(&cfg, 11).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        let c = sample_exclusions(&cfg, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn generated_structures_respect_invariants() {
        let cfg = MicrostructureConfig::default();
        for seed in 0..50 {
            let ms = sample_exclusions(&cfg, seed).unwrap();
            let ex = ms.exclusions();
            for i in 0..ex.len() {
                let e = ex[i];
                assert!(e.radius > 0.0 && e.radius <= 0.5);
                assert!(e.center[0] - e.radius >= cfg.margin - 1e-15);
                assert!(e.center[0] + e.radius <= 1.0 - cfg.margin + 1e-15);
                for f in &ex[..i] {
                    let d = (e.center[0] - f.center[0]).hypot(e.center[1] - f.center[1]);
                    assert!(d >= e.radius + f.radius - 1e-14);
                }
            }
            // largest first
            assert!(ex.windows(2).all(|w| w[0].radius >= w[1].radius));
            // radii on the quantization grid
            for e in ex {
                let k = (e.radius - cfg.r_min) / cfg.radius_grid_step();
                assert!((k - k.round()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn over_dense_config_fails_placement() {
        let cfg = MicrostructureConfig {
            count: CountDistribution::Fixed { count: 50 },
            radius_lognormal: LogNormalParams {
                mu: 0.2f64.ln(),
                sigma: 0.0,
            },
            max_placement_attempts: 100,
            ..Default::default()
        };
        assert!(matches!(
            sample_exclusions(&cfg, 0),
            Err(Error::PlacementFailure { .. })
        ));
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = MicrostructureConfig::default();
        cfg.margin = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = MicrostructureConfig::default();
        cfg.max_placement_attempts = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = MicrostructureConfig::default();
        cfg.radius_lognormal.sigma = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let ms = sample_exclusions(&MicrostructureConfig::default(), 5).unwrap();
        let text = ms.to_json();
        let back: Microstructure = serde_json::from_str(&text).unwrap();
        assert_eq!(back, ms);
        assert_eq!(back.to_json(), text);

        let overlapping = r#"{"centers": [[0.5, 0.5], [0.55, 0.5]], "radii": [0.1, 0.1]}"#;
        assert!(serde_json::from_str::<Microstructure>(overlapping).is_err());
        let mismatched = r#"{"centers": [[0.5, 0.5]], "radii": []}"#;
        assert!(serde_json::from_str::<Microstructure>(mismatched).is_err());
    }

    #[test]
    fn voxelize_empty_is_all_fluid() {
        for g in [2, 7, 64] {
            let m = voxelize(&Microstructure::empty(), g);
            assert!(m.cells().iter().all(|&s| !s));
        }
    }

    #[test]
    fn voxelize_centered_disk_area() {
        let ms = Microstructure::new(vec![disk(0.5, 0.5, 0.25)]).unwrap();
        let frac = voxelize(&ms, 128).solid_fraction();
        assert!((frac - PI * 0.0625).abs() <= 2.0 / 128.0, "{frac}");
    }

    #[test]
    fn voxelize_half_radius_disk() {
        let ms = Microstructure::new(vec![disk(0.5, 0.5, 0.5)]).unwrap();
        for g in [4, 9, 64] {
            let m = voxelize(&ms, g);
            for (ix, iy) in [(0, 0), (g - 1, 0), (0, g - 1), (g - 1, g - 1)] {
                assert!(!m.is_solid(ix, iy));
            }
            assert!(m.is_solid(g / 2, g / 2));
        }
    }

    #[test]
    fn voxel_error_halves_with_resolution() {
        let cfg = MicrostructureConfig::default();
        let mut ratios = Vec::new();
        for seed in 0..20 {
            let ms = sample_exclusions(&cfg, seed).unwrap();
            // Exact solid area inside the unit square: disks may be cut by
            // the top/bottom walls. Integrate the clipped area numerically.
            let exact: f64 = ms.exclusions().iter().map(|e| clipped_area(e)).sum();
            let err = |g: usize| (voxelize(&ms, g).solid_fraction() - exact).abs();
            let (e1, e2) = (err(128), err(256));
            ratios.push((e1, e2));
        }
        let sum1: f64 = ratios.iter().map(|r| r.0).sum();
        let sum2: f64 = ratios.iter().map(|r| r.1).sum();
        assert!(sum2 <= 0.5 * sum1 + 1e-12, "{sum1} -> {sum2}");
    }

    /// Area of a disk intersected with the strip `0 <= y <= 1`.
    fn clipped_area(e: &Exclusion) -> f64 {
        let n = 20_000;
        let (y0, y1) = (
            (e.center[1] - e.radius).max(0.0),
            (e.center[1] + e.radius).min(1.0),
        );
        let dy = (y1 - y0) / n as f64;
        (0..n)
            .map(|k| {
                let y = y0 + (k as f64 + 0.5) * dy;
                let t = e.radius * e.radius - (y - e.center[1]).powi(2);
                2.0 * t.max(0.0).sqrt() * dy
            })
            .sum()
    }

    #[test]
    fn percolation_basic_cases() {
        assert!(percolates(&SolidMask::all_fluid(8)));
        let mut m = SolidMask::all_fluid(8);
        for iy in 0..8 {
            m.set(3, iy, true);
        }
        assert!(!percolates(&m));
        m.set(3, 5, false);
        assert!(percolates(&m));
    }

    fn recursive_fill(m: &SolidMask, ix: usize, iy: usize, seen: &mut Vec<bool>) {
        let g = m.resolution();
        if m.is_solid(ix, iy) || seen[iy * g + ix] {
            return;
        }
        seen[iy * g + ix] = true;
        if ix > 0 {
            recursive_fill(m, ix - 1, iy, seen);
        }
        if ix + 1 < g {
            recursive_fill(m, ix + 1, iy, seen);
        }
        if iy > 0 {
            recursive_fill(m, ix, iy - 1, seen);
        }
        if iy + 1 < g {
            recursive_fill(m, ix, iy + 1, seen);
        }
    }

    #[test]
    fn percolation_matches_recursive_flood_fill() {
        let g = 16;
        let mut agree_true = 0;
        for s in 0..1000u64 {
            let mut rng = seed::rng(seed::derive_seed(99, s));
            let cells: Vec<bool> = (0..g * g).map(|_| rng.random_bool(0.5)).collect();
            let m = SolidMask::from_cells(g, cells).unwrap();
            let mut seen = vec![false; g * g];
            for iy in 0..g {
                recursive_fill(&m, 0, iy, &mut seen);
            }
            let oracle = (0..g).any(|iy| seen[iy * g + g - 1]);
            assert_eq!(percolates(&m), oracle, "seed {s}");
            agree_true += oracle as usize;
        }
        assert!(agree_true > 0);
    }

    #[test]
    fn porosity_counts() {
        assert_eq!(porosity(&SolidMask::all_fluid(10)), 1.0);
        let full = SolidMask::from_cells(4, vec![true; 16]).unwrap();
        assert_eq!(porosity(&full), 0.0);
        let mut stripe = SolidMask::all_fluid(10);
        for iy in 0..5 {
            for ix in 0..10 {
                stripe.set(ix, iy, true);
            }
        }
        assert_eq!(porosity(&stripe), 0.5);
    }

    #[test]
    fn isolated_pockets_are_filled() {
        let mut m = SolidMask::all_fluid(6);
        // ring of solid around cell (3, 3)
        for (x, y) in [(2, 2), (3, 2), (4, 2), (2, 3), (4, 3), (2, 4), (3, 4), (4, 4)] {
            m.set(x, y, true);
        }
        let pruned = m.without_isolated_pockets();
        assert!(pruned.is_solid(3, 3));
        assert!(!pruned.is_solid(0, 0));
        assert_eq!(pruned.solid_fraction(), 9.0 / 36.0);
    }

    /// Discretized log-normal CDF on the quantization grid by direct
    /// summation of bin probabilities.
    fn discretized_cdf(cfg: &MicrostructureConfig) -> Vec<f64> {
        use statrs::distribution::{ContinuousCDF, LogNormal as SLogNormal};
        let d = SLogNormal::new(cfg.radius_lognormal.mu, cfg.radius_lognormal.sigma).unwrap();
        let step = cfg.radius_grid_step();
        let mut pmf = vec![0.0; RADIUS_GRID_POINTS];
        for (k, p) in pmf.iter_mut().enumerate() {
            let r = cfg.r_min + k as f64 * step;
            let lo = if k == 0 { 0.0 } else { d.cdf(r - 0.5 * step) };
            let hi = if k + 1 == RADIUS_GRID_POINTS {
                1.0
            } else {
                d.cdf(r + 0.5 * step)
            };
            *p = hi - lo;
        }
        let mut acc = 0.0;
        pmf.iter()
            .map(|p| {
                acc += p;
                acc
            })
            .collect()
    }

    #[test]
    fn radii_follow_discretized_lognormal() {
        let cfg = MicrostructureConfig::default();
        let mut rng = seed::rng(2024);
        let n = 10_000;
        let mut counts = vec![0usize; RADIUS_GRID_POINTS];
        for _ in 0..n {
            let r = cfg.draw_radius(&mut rng);
            let k = ((r - cfg.r_min) / cfg.radius_grid_step()).round() as usize;
            counts[k] += 1;
        }
        let cdf = discretized_cdf(&cfg);
        let mut acc = 0usize;
        let mut ks: f64 = 0.0;
        for k in 0..RADIUS_GRID_POINTS {
            acc += counts[k];
            ks = ks.max((acc as f64 / n as f64 - cdf[k]).abs());
        }
        // Kolmogorov-Smirnov critical value at the 1% level.
        let critical = 1.628 / (n as f64).sqrt();
        assert!(ks < critical, "KS {ks} >= {critical}");
    }
}
