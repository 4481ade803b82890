use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bc::BoundaryConditions;
use crate::error::{Error, Result};
use crate::field::Block;
use crate::surrogate::gamma::Gamma;
use crate::surrogate::train::PrecisionMode;
use crate::surrogate::{PcParams, PcfParams};

/// Gaussian `q_n(log lambda)` of one training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    /// Row-major `K x K`.
    pub covariance: Vec<f64>,
}

/// Variational posterior of a trained surrogate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorState {
    pub coarse_grid: (usize, usize),
    pub output_grid: usize,
    pub feature_resolution: usize,
    /// Stokes mesh of the training data; fixes the predictive fluid lattice.
    pub mesh_resolution: usize,
    pub bc: BoundaryConditions,
    pub feature_names: Vec<String>,
    pub precision_mode: PrecisionMode,
    pub theta_mean: Vec<f64>,
    /// Row-major `J x J`.
    pub theta_covariance: Vec<f64>,
    pub alpha: Vec<Gamma>,
    /// Precision `1 / sigma_c^2` of the log-diffusivity noise.
    pub beta: Gamma,
    /// `q(tau)` per block (`pressure`, `vx`, `vy`); one entry per block or
    /// one per lattice point.
    pub tau: [Vec<Gamma>; 3],
    /// Block-pooled precision, used at lattice points never observed in
    /// per-point mode.
    pub tau_pooled: [Gamma; 3],
    pub tau_prior: Gamma,
    pub latent: Vec<LatentPosterior>,
    pub elbo_trace: Vec<f64>,
    /// Sum of the per-sample terms of the final bound.
    pub data_elbo: f64,
    pub iterations: usize,
    pub converged: bool,
    pub training_size: usize,
}

impl PosteriorState {
    pub fn width(&self) -> usize {
        self.theta_mean.len()
    }

    pub fn cells(&self) -> usize {
        self.coarse_grid.0 * self.coarse_grid.1
    }

    pub fn final_elbo(&self) -> Option<f64> {
        self.elbo_trace.last().copied()
    }

    /// `q(tau)` at lattice point `i` of block `b`.
    pub fn tau_at(&self, b: Block, i: usize) -> Gamma {
        let t = &self.tau[b.index()];
        if t.len() == 1 {
            t[0]
        } else if t[i] == self.tau_prior {
            self.tau_pooled[b.index()]
        } else {
            t[i]
        }
    }

    /// Posterior-mean point estimates `(theta, 1/E[beta])` and `E[tau]`.
    pub fn point_estimates(&self) -> (PcParams, PcfParams) {
        let pc = PcParams {
            theta: self.theta_mean.clone(),
            noise_variance: 1.0 / self.beta.mean(),
        };
        let pcf = PcfParams {
            precision: std::array::from_fn(|b| self.tau[b].iter().map(Gamma::mean).collect()),
        };
        (pc, pcf)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.width();
        let k = self.cells();
        let g2 = self.output_grid * self.output_grid;
        let bad = |what: &str| Err(Error::InvalidConfig(format!("posterior state: {what}")));
        if j == 0 || self.feature_names.len() != j {
            return bad("feature names do not match the weights");
        }
        if self.theta_covariance.len() != j * j || self.alpha.len() != j {
            return bad("weight covariance or relevance precisions have the wrong size");
        }
        if k == 0 || self.output_grid == 0 {
            return bad("empty grid");
        }
        if !self.theta_mean.iter().chain(&self.theta_covariance).all(|v| v.is_finite()) {
            return bad("non-finite weight posterior");
        }
        for a in 0..j {
            for b in 0..a {
                let (x, y) = (self.theta_covariance[a * j + b], self.theta_covariance[b * j + a]);
                if (x - y).abs() > 1e-12 * x.abs().max(y.abs()).max(1e-300) {
                    return bad("weight covariance not symmetric");
                }
            }
            if !(self.theta_covariance[a * j + a] > 0.0) {
                return bad("weight covariance not positive definite");
            }
        }
        let gammas = self
            .alpha
            .iter()
            .chain(std::iter::once(&self.beta))
            .chain(self.tau.iter().flatten())
            .chain(self.tau_pooled.iter())
            .chain(std::iter::once(&self.tau_prior));
        for g in gammas {
            if !g.is_valid() {
                return bad("Gamma parameters must be positive and finite");
            }
        }
        for t in &self.tau {
            let expected = match self.precision_mode {
                PrecisionMode::PerBlock => 1,
                PrecisionMode::PerPoint => g2,
            };
            if t.len() != expected {
                return bad("precision count does not match the mode");
            }
        }
        for q in &self.latent {
            if q.mean.len() != k || q.covariance.len() != k * k {
                return bad("latent posterior has the wrong size");
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("posterior state serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let state: PosteriorState = Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))?;
        state.validate().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(state)
    }
}
