#![allow(dead_code)]

use porous_rom::darcy::{CoarseDiffusivity, DarcyProblem};
use porous_rom::field::{Block, FineField};
use porous_rom::microstructure::{sample_exclusions, MicrostructureConfig};
use porous_rom::seed::{derive_seed, rng};
use porous_rom::stokes::lattice_fluid;
use porous_rom::surrogate::{extract_features, TrainingSample};
use porous_rom::BoundaryConditions;
use rand_distr::{Distribution, StandardNormal};

pub const TRUE_THETA: [f64; 3] = [1.0, 2.0, 0.5];

pub struct SyntheticSpec {
    pub n: usize,
    pub grid: (usize, usize),
    pub lattice: usize,
    pub theta: Vec<f64>,
    pub noise_variance: f64,
    pub tau: [f64; 3],
    pub bc: BoundaryConditions,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 20,
            grid: (2, 2),
            lattice: 32,
            theta: TRUE_THETA.to_vec(),
            noise_variance: 0.01,
            tau: [1e4, 1e4, 1e4],
            bc: BoundaryConditions::default(),
            seed: 11,
        }
    }
}

/// Training data drawn from the surrogate itself: real microstructure
/// features, `log lambda ~ N(phi theta, s2)`, Darcy response plus Gaussian
/// noise of precision `tau` on the fluid lattice points.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Vec<TrainingSample> {
    let cfg = MicrostructureConfig::default();
    let (kx, ky) = spec.grid;
    let g = spec.lattice;
    let problem = DarcyProblem::new(kx, ky, &spec.bc, g).unwrap();
    (0..spec.n)
        .map(|i| {
            let seed = derive_seed(spec.seed, i as u64);
            let ms = sample_exclusions(&cfg, seed).unwrap();
            let features = extract_features(&ms, spec.grid, 128).unwrap();
            let mut r = rng(derive_seed(seed, 1));
            let log_lam: Vec<f64> = features
                .apply(&spec.theta)
                .iter()
                .map(|m| {
                    let e: f64 = StandardNormal.sample(&mut r);
                    m + spec.noise_variance.sqrt() * e
                })
                .collect();
            let lam = CoarseDiffusivity::from_log(kx, ky, &log_lam).unwrap();
            let u = problem.solve(&lam).unwrap().solution();
            let mut field = FineField::zeros(g);
            let fluid = lattice_fluid(&ms, 64, g);
            field.fluid = fluid.clone();
            for b in Block::ALL {
                let sd = 1.0 / spec.tau[b.index()].sqrt();
                let src = u.block(b).to_vec();
                let dst = field.block_mut(b);
                for p in 0..g * g {
                    let e: f64 = StandardNormal.sample(&mut r);
                    dst[p] = if fluid[p] { src[p] + sd * e } else { 0.0 };
                }
            }
            TrainingSample { features, field }
        })
        .collect()
}

/// Largest relative decrease between consecutive bound values.
pub fn worst_elbo_drop(trace: &[f64]) -> f64 {
    trace
        .windows(2)
        .map(|w| (w[0] - w[1]) / w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}
