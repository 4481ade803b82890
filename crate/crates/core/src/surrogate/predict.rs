use nalgebra::{Cholesky, DMatrix};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::darcy::{CoarseDiffusivity, CoarseSolution, DarcyProblem};
use crate::error::{Error, Result};
use crate::field::{Block, FineField};
use crate::microstructure::Microstructure;
use crate::seed::{derive_seed, rng};
use crate::stokes::lattice_fluid;
use crate::surrogate::features::{extract_features, FeatureMatrix};
use crate::surrogate::state::PosteriorState;

/// Pointwise predictive mean and standard deviation; zero at solid points.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveField {
    pub mean: FineField,
    pub std: FineField,
    pub samples: usize,
}

/// One Monte Carlo draw: the Darcy response and the `p_cf` noise variance
/// per block and lattice point.
pub struct PredictiveDraw {
    pub response: CoarseSolution,
    pub noise_variance: [Vec<f64>; 3],
}

const CHUNK: usize = 32;

struct Sampler<'a> {
    state: &'a PosteriorState,
    problem: DarcyProblem,
    phi: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl<'a> Sampler<'a> {
    fn new(features: &FeatureMatrix, state: &'a PosteriorState) -> Result<Self> {
        state.validate().map_err(|e| Error::Untrained(e.to_string()))?;
        if state.elbo_trace.is_empty() {
            return Err(Error::Untrained("no training iterations recorded".into()));
        }
        let (kx, ky) = state.coarse_grid;
        if (features.kx, features.ky) != (kx, ky) || features.width() != state.width() {
            return Err(Error::DimensionMismatch(format!(
                "features {}x{}x{} for a {kx}x{ky} model with {} weights",
                features.kx,
                features.ky,
                features.width(),
                state.width()
            )));
        }
        let j = state.width();
        let sigma = DMatrix::from_row_slice(j, j, &state.theta_covariance);
        let chol = Cholesky::new(sigma)
            .ok_or_else(|| Error::SingularSystem("weight covariance is not positive definite".into()))?
            .l();
        Ok(Sampler {
            state,
            problem: DarcyProblem::new(kx, ky, &state.bc, state.output_grid)?,
            phi: DMatrix::from_row_slice(features.cells(), j, &features.values),
            chol,
        })
    }

    fn draw(&self, seed: u64, s: u64) -> Result<PredictiveDraw> {
        let st = self.state;
        let mut r = rng(derive_seed(seed, s));
        let j = st.width();
        let z: Vec<f64> = (0..j).map(|_| StandardNormal.sample(&mut r)).collect();
        let theta: Vec<f64> = (0..j)
            .map(|a| st.theta_mean[a] + (0..=a).map(|b| self.chol[(a, b)] * z[b]).sum::<f64>())
            .collect();
        let beta = st.beta.sample(&mut r);
        let sd = 1.0 / beta.sqrt();
        let k = self.phi.nrows();
        let log_lam: Vec<f64> = (0..k)
            .map(|c| {
                let e: f64 = StandardNormal.sample(&mut r);
                (0..j).map(|a| self.phi[(c, a)] * theta[a]).sum::<f64>() + sd * e
            })
            .collect();
        let (kx, ky) = st.coarse_grid;
        let lam = CoarseDiffusivity::from_log(kx, ky, &log_lam)?;
        let response = self.problem.solve(&lam)?.solution();
        let n = st.output_grid * st.output_grid;
        let noise_variance = std::array::from_fn(|b| {
            let block = Block::ALL[b];
            if st.tau[b].len() == 1 {
                vec![1.0 / st.tau[b][0].sample(&mut r); n]
            } else {
                (0..n).map(|i| 1.0 / st.tau_at(block, i).sample(&mut r)).collect()
            }
        });
        Ok(PredictiveDraw {
            response,
            noise_variance,
        })
    }
}

/// Draw `s` of the predictive distribution for `seed`; `predict_with_features`
/// averages exactly these draws.
pub fn predictive_draw(
    features: &FeatureMatrix,
    state: &PosteriorState,
    seed: u64,
    s: usize,
) -> Result<PredictiveDraw> {
    Sampler::new(features, state)?.draw(seed, s as u64)
}

#[derive(Clone)]
struct Moments {
    count: f64,
    mean: [Vec<f64>; 3],
    m2: [Vec<f64>; 3],
    noise: [Vec<f64>; 3],
}

impl Moments {
    fn zeros(n: usize) -> Self {
        let z = || std::array::from_fn(|_| vec![0.0; n]);
        Moments {
            count: 0.0,
            mean: z(),
            m2: z(),
            noise: z(),
        }
    }

    fn push(&mut self, d: &PredictiveDraw) {
        self.count += 1.0;
        for b in Block::ALL {
            let i = b.index();
            let x = d.response.block(b);
            for p in 0..x.len() {
                let delta = x[p] - self.mean[i][p];
                self.mean[i][p] += delta / self.count;
                self.m2[i][p] += delta * (x[p] - self.mean[i][p]);
                self.noise[i][p] += d.noise_variance[i][p];
            }
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.count == 0.0 {
            return;
        }
        let n = self.count + o.count;
        for i in 0..3 {
            for p in 0..self.mean[i].len() {
                let delta = o.mean[i][p] - self.mean[i][p];
                self.mean[i][p] += delta * o.count / n;
                self.m2[i][p] += o.m2[i][p] + delta * delta * self.count * o.count / n;
                self.noise[i][p] += o.noise[i][p];
            }
        }
        self.count = n;
    }
}

/// Monte Carlo predictive distribution on the lattice points flagged in
/// `fluid`. Draws are generated in fixed-size chunks and merged in order, so
/// the result does not depend on the thread count.
pub fn predict_with_features(
    features: &FeatureMatrix,
    fluid: &[bool],
    state: &PosteriorState,
    samples: usize,
    seed: u64,
) -> Result<PredictiveField> {
    if samples < 2 {
        return Err(Error::InvalidConfig(format!(
            "at least two predictive samples required, got {samples}"
        )));
    }
    let g = state.output_grid;
    let n = g * g;
    if fluid.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} fluid flags for a {g}x{g} lattice",
            fluid.len()
        )));
    }
    let sampler = Sampler::new(features, state)?;
    let chunks: Vec<Moments> = (0..samples.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut m = Moments::zeros(n);
            for s in c * CHUNK..((c + 1) * CHUNK).min(samples) {
                m.push(&sampler.draw(seed, s as u64)?);
            }
            Ok(m)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total = Moments::zeros(n);
    for c in &chunks {
        total.merge(c);
    }
    let s = samples as f64;
    let mut mean = FineField::zeros(g);
    let mut std = FineField::zeros(g);
    mean.fluid = fluid.to_vec();
    std.fluid = fluid.to_vec();
    for b in Block::ALL {
        let i = b.index();
        let (mb, sb) = (mean.block_mut(b), std.block_mut(b));
        for p in 0..n {
            if !fluid[p] {
                continue;
            }
            mb[p] = total.mean[i][p];
            let var = total.m2[i][p] / (s - 1.0) + total.noise[i][p] / s;
            sb[p] = var.max(0.0).sqrt();
        }
    }
    Ok(PredictiveField {
        mean,
        std,
        samples,
    })
}

/// Predictive distribution for a microstructure on the lattice fluid points
/// of the training mesh.
pub fn predict(
    ms: &Microstructure,
    state: &PosteriorState,
    samples: usize,
    seed: u64,
) -> Result<PredictiveField> {
    let features = extract_features(ms, state.coarse_grid, state.feature_resolution)?;
    let fluid = lattice_fluid(ms, state.mesh_resolution, state.output_grid);
    predict_with_features(&features, &fluid, state, samples, seed)
}
