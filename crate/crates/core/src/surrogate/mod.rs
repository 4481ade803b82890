//! Bayesian reduced-order model: a log-linear feature map to coarse
//! diffusivities, the Darcy emulator, and a Gaussian coarse-to-fine map.

pub mod features;
pub mod gamma;
pub mod metrics;
pub mod predict;
pub mod state;
pub mod train;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::darcy::{CoarseDiffusivity, CoarseSolution};
use crate::error::{Error, Result};
use crate::field::{Block, FineField};

pub use features::{extract_features, FeatureMatrix};
pub use gamma::Gamma;
pub use metrics::{evaluate, BlockMetrics, Metrics};
pub use predict::{predict, predict_with_features, PredictiveField};
pub use state::{LatentPosterior, PosteriorState};
pub use train::{train, train_on_features, PrecisionMode, TrainConfig, TrainingSample};

/// Weights and log-diffusivity noise variance of `p_c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcParams {
    pub theta: Vec<f64>,
    pub noise_variance: f64,
}

/// Precisions of `p_cf`, indexed by `Block::index()`. Each block holds one
/// value (shared by all lattice points) or one per lattice point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcfParams {
    pub precision: [Vec<f64>; 3],
}

impl PcfParams {
    pub fn per_block(tau: [f64; 3]) -> Self {
        PcfParams {
            precision: tau.map(|t| vec![t]),
        }
    }

    pub fn tau(&self, b: Block, i: usize) -> f64 {
        let p = &self.precision[b.index()];
        if p.len() == 1 {
            p[0]
        } else {
            p[i]
        }
    }
}

fn check_pc(log_lam_len: usize, phi: &FeatureMatrix, params: &PcParams) -> Result<()> {
    if params.theta.len() != phi.width() || log_lam_len != phi.cells() {
        return Err(Error::DimensionMismatch(format!(
            "{} log-diffusivities and {} weights for {} cells x {} features",
            log_lam_len,
            params.theta.len(),
            phi.cells(),
            phi.width()
        )));
    }
    if !(params.noise_variance > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "noise variance must be positive, got {}",
            params.noise_variance
        )));
    }
    Ok(())
}

/// `log p_c(log lambda | phi, theta)`: independent `N(phi_k theta, s2)` per cell.
pub fn pc_logpdf(log_lam: &[f64], phi: &FeatureMatrix, params: &PcParams) -> Result<f64> {
    check_pc(log_lam.len(), phi, params)?;
    let s2 = params.noise_variance;
    let mean = phi.apply(&params.theta);
    let sq: f64 = log_lam
        .iter()
        .zip(&mean)
        .map(|(x, m)| (x - m) * (x - m))
        .sum();
    Ok(-0.5 * log_lam.len() as f64 * (2.0 * PI * s2).ln() - 0.5 * sq / s2)
}

/// Draws `lambda = exp(phi theta + s eps)`.
pub fn pc_sample_with<R: Rng>(
    phi: &FeatureMatrix,
    params: &PcParams,
    rng: &mut R,
) -> Result<CoarseDiffusivity> {
    check_pc(phi.cells(), phi, params)?;
    let s = params.noise_variance.sqrt();
    let log_lam: Vec<f64> = phi
        .apply(&params.theta)
        .into_iter()
        .map(|m| {
            let e: f64 = rng.sample(StandardNormal);
            m + s * e
        })
        .collect();
    CoarseDiffusivity::from_log(phi.kx, phi.ky, &log_lam)
}

pub fn pc_sample(phi: &FeatureMatrix, params: &PcParams, seed: u64) -> Result<CoarseDiffusivity> {
    pc_sample_with(phi, params, &mut crate::seed::rng(seed))
}

/// `log p_cf(u_f | u_c)` summed over fluid lattice points.
pub fn pcf_logpdf(u_f: &FineField, u_c: &CoarseSolution, params: &PcfParams) -> Result<f64> {
    if u_f.grid_size != u_c.grid_size {
        return Err(Error::DimensionMismatch(format!(
            "fine lattice {} vs coarse lattice {}",
            u_f.grid_size, u_c.grid_size
        )));
    }
    let n = u_f.len();
    for p in &params.precision {
        if p.len() != 1 && p.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} precisions for {} lattice points",
                p.len(),
                n
            )));
        }
    }
    let mut total = 0.0;
    for b in Block::ALL {
        let (f, c) = (u_f.block(b), u_c.block(b));
        for i in 0..n {
            if !u_f.fluid[i] {
                continue;
            }
            let tau = params.tau(b, i);
            let r = f[i] - c[i];
            total += 0.5 * (tau / (2.0 * PI)).ln() - 0.5 * tau * r * r;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microstructure::{sample_exclusions, MicrostructureConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phi() -> FeatureMatrix {
        let ms = sample_exclusions(&MicrostructureConfig::default(), 3).unwrap();
        extract_features(&ms, (2, 2), 64).unwrap()
    }

    fn theta() -> Vec<f64> {
        vec![0.4, 1.5, 0.5]
    }

    #[test]
    fn degenerate_sample_is_deterministic() {
        let phi = phi();
        let params = PcParams {
            theta: theta(),
            noise_variance: 1e-12,
        };
        let lam = pc_sample(&phi, &params, 9).unwrap();
        for (l, m) in lam.values.iter().zip(phi.apply(&params.theta)) {
            assert!((l / m.exp() - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn logpdf_at_mean() {
        let phi = phi();
        let params = PcParams {
            theta: theta(),
            noise_variance: 0.3,
        };
        let mean = phi.apply(&params.theta);
        let lp = pc_logpdf(&mean, &phi, &params).unwrap();
        assert!((lp + 2.0 * (2.0 * PI * 0.3).ln()).abs() < 1e-12);
        assert!(pc_logpdf(&mean[..3], &phi, &params).is_err());
    }

    #[test]
    fn sample_moments() {
        let phi = phi();
        let s2 = 0.25;
        let params = PcParams {
            theta: theta(),
            noise_variance: s2,
        };
        let mean = phi.apply(&params.theta);
        let n = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let lam = pc_sample_with(&phi, &params, &mut rng).unwrap();
            for k in 0..4 {
                let x = lam.values[k].ln();
                sum[k] += x;
                sq[k] += x * x;
            }
        }
        let nf = n as f64;
        for k in 0..4 {
            let m = sum[k] / nf;
            let v = (sq[k] - nf * m * m) / (nf - 1.0);
            assert!((m - mean[k]).abs() < 3.0 * (s2 / nf).sqrt(), "mean {k}");
            // standard error of the sample variance of a Gaussian
            assert!((v - s2).abs() < 3.0 * s2 * (2.0 / (nf - 1.0)).sqrt(), "var {k}");
        }
    }

    fn random_pair(seed: u64, g: usize) -> (FineField, CoarseSolution) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FineField::zeros(g);
        let mut c = CoarseSolution {
            grid_size: g,
            pressure: vec![0.0; g * g],
            flux_x: vec![0.0; g * g],
            flux_y: vec![0.0; g * g],
        };
        for i in 0..g * g {
            f.fluid[i] = rng.random_bool(0.7);
            for b in Block::ALL {
                c.block_mut(b)[i] = rng.random_range(-1.0..1.0);
                f.block_mut(b)[i] = if f.fluid[i] || b == Block::Pressure {
                    rng.random_range(-1.0..1.0)
                } else {
                    0.0
                };
            }
        }
        (f, c)
    }

    #[test]
    fn pcf_identity_and_precision_doubling() {
        let (f, _) = random_pair(1, 16);
        let c = CoarseSolution {
            grid_size: 16,
            pressure: f.pressure.clone(),
            flux_x: f.velocity_x.clone(),
            flux_y: f.velocity_y.clone(),
        };
        let tau = [2.0, 50.0, 7.0];
        let n = f.fluid_count() as f64;
        let lp = pcf_logpdf(&f, &c, &PcfParams::per_block(tau)).unwrap();
        let expected: f64 = tau.iter().map(|t| 0.5 * n * (t / (2.0 * PI)).ln()).sum();
        assert!((lp - expected).abs() < 1e-9);
        let lp2 = pcf_logpdf(&f, &c, &PcfParams::per_block(tau.map(|t| 2.0 * t))).unwrap();
        assert!((lp2 - lp - 3.0 * 0.5 * n * 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn pcf_matches_naive_sum() {
        for seed in 0..5 {
            let (f, c) = random_pair(seed, 12);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let per_point: [Vec<f64>; 3] =
                std::array::from_fn(|_| (0..144).map(|_| rng.random_range(0.5..5.0)).collect());
            let params = PcfParams {
                precision: per_point.clone(),
            };
            let mut naive = 0.0;
            for (b, block) in [
                (&f.pressure, &c.pressure),
                (&f.velocity_x, &c.flux_x),
                (&f.velocity_y, &c.flux_y),
            ]
            .iter()
            .enumerate()
            {
                for i in 0..144 {
                    if f.fluid[i] {
                        let t = per_point[b][i];
                        let r = block.0[i] - block.1[i];
                        naive += -0.5 * (2.0 * PI / t).ln() - t * r * r / 2.0;
                    }
                }
            }
            let lp = pcf_logpdf(&f, &c, &params).unwrap();
            assert!((lp - naive).abs() <= 1e-10 * naive.abs().max(1.0));
        }
    }
}
