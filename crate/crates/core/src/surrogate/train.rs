//! Variational EM for the surrogate.
//!
//! Factorization `q(theta) q(alpha) q(beta) q(tau) prod_n q_n(log lambda_n)`
//! with `beta = 1 / sigma_c^2`. The E-step fits each `q_n` by a Laplace
//! approximation (Gauss-Newton on `log lambda`, adjoint gradients) and keeps
//! the candidate only if the sample's bound contribution does not drop.
//! Expectations of the coarse-to-fine residual use a fixed antithetic set of
//! standard normal draws, so the bound is a deterministic function of the
//! variational parameters and every update is an ascent step. The M-step is
//! closed form.

use std::f64::consts::PI;

use log::{debug, info, warn};
use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bc::BoundaryConditions;
use crate::darcy::{CoarseDiffusivity, Cotangent, DarcyProblem};
use crate::error::{Error, Result};
use crate::field::{Block, FineField};
use crate::microstructure::Microstructure;
use crate::seed::{derive_seed, rng, stream};
use crate::surrogate::features::{extract_features, FeatureMatrix};
use crate::surrogate::gamma::Gamma;
use crate::surrogate::state::{LatentPosterior, PosteriorState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    /// One `tau` per output block.
    #[default]
    PerBlock,
    /// One `tau` per block and lattice point.
    PerPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub coarse_grid: (usize, usize),
    pub feature_resolution: usize,
    pub mesh_resolution: usize,
    pub bc: BoundaryConditions,
    pub max_iters: usize,
    /// Stop when `|dELBO| <= tol * max(1, |ELBO|)`.
    pub tol: f64,
    /// Monte Carlo draws per residual expectation (rounded up to even).
    pub mc_samples: usize,
    pub estep_max_iters: usize,
    /// Laplace optimum accepted when `|grad| <= tol * (1 + |objective|)`.
    pub estep_gradient_tol: f64,
    pub precision_mode: PrecisionMode,
    /// Shared Gamma hyperprior of `alpha`, `beta` and `tau`.
    pub hyperprior: Gamma,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            coarse_grid: (2, 2),
            feature_resolution: 256,
            mesh_resolution: 128,
            bc: BoundaryConditions::default(),
            max_iters: 60,
            tol: 1e-6,
            mc_samples: 10,
            estep_max_iters: 100,
            estep_gradient_tol: 1e-6,
            precision_mode: PrecisionMode::PerBlock,
            hyperprior: Gamma {
                shape: 1e-6,
                rate: 1e-6,
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let (kx, ky) = self.coarse_grid;
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if kx == 0 || ky == 0 {
            return bad("coarse grid must be at least 1x1".into());
        }
        if self.max_iters == 0 || self.mc_samples == 0 || self.estep_max_iters == 0 {
            return bad("iteration and sample counts must be positive".into());
        }
        if !(self.tol >= 0.0) || !(self.estep_gradient_tol > 0.0) {
            return bad("tolerances must be non-negative".into());
        }
        if !self.hyperprior.is_valid() {
            return bad("hyperprior must have positive shape and rate".into());
        }
        self.bc.validate()
    }
}

/// Features and fine-scale response of one training microstructure.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: FeatureMatrix,
    pub field: FineField,
}

/// Laplace objective of one sample:
/// `f(x) = -1/2 sum_i w_i (u_f,i - U_c,i(e^x))^2 - beta/2 |x - mu_prior|^2`
/// with `w = tau` on fluid points and `0` elsewhere.
pub struct LaplaceObjective<'a> {
    pub problem: &'a DarcyProblem,
    pub target: &'a FineField,
    pub weights: [Vec<f64>; 3],
    pub prior_mean: Vec<f64>,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct LaplaceFit {
    pub mean: Vec<f64>,
    /// Inverse Gauss-Newton Hessian at `mean`, row-major.
    pub covariance: Vec<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
}

impl LaplaceObjective<'_> {
    fn lambda(&self, x: &[f64]) -> Result<CoarseDiffusivity> {
        let (kx, ky) = self.problem.coarse_grid();
        if x.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
            return Err(Error::NonPositiveDiffusivity {
                cell: x.iter().position(|v| !v.is_finite() || v.abs() > 700.0).unwrap(),
                value: f64::NAN,
            });
        }
        CoarseDiffusivity::from_log(kx, ky, x)
    }

    fn misfit(&self, x: &[f64], u: &crate::darcy::CoarseSolution) -> (f64, Cotangent) {
        let g = self.problem.output_grid();
        let mut w = Cotangent::zeros(g);
        let mut sq = 0.0;
        for b in Block::ALL {
            let (f, c, wb) = (self.target.block(b), u.block(b), &self.weights[b.index()]);
            let out = w.block_mut(b);
            for i in 0..f.len() {
                if wb[i] == 0.0 {
                    continue;
                }
                let r = f[i] - c[i];
                sq += wb[i] * r * r;
                out[i] = wb[i] * r;
            }
        }
        let prior: f64 = x
            .iter()
            .zip(&self.prior_mean)
            .map(|(a, m)| (a - m) * (a - m))
            .sum();
        (-0.5 * sq - 0.5 * self.beta * prior, w)
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        let st = self.problem.solve(&self.lambda(x)?)?;
        Ok(self.misfit(x, &st.solution()).0)
    }

    /// Objective and its gradient in `log lambda` from one adjoint solve.
    pub fn value_and_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let lam = self.lambda(x)?;
        let st = self.problem.solve(&lam)?;
        let (f, w) = self.misfit(x, &st.solution());
        let dl = st.vjp(&w);
        let grad = (0..x.len())
            .map(|k| lam.values[k] * dl[k] - self.beta * (x[k] - self.prior_mean[k]))
            .collect();
        Ok((f, grad))
    }

    /// `J^T W J + beta I` at `x`.
    pub fn gauss_newton_hessian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let st = self.problem.solve(&self.lambda(x)?)?;
        let jac = st.jacobian_log();
        let k = x.len();
        let mut h = DMatrix::<f64>::identity(k, k) * self.beta;
        for b in Block::ALL {
            let wb = &self.weights[b.index()];
            for c in 0..k {
                let jc = jac[c].block(b);
                for d in 0..=c {
                    let jd = jac[d].block(b);
                    let s: f64 = (0..wb.len())
                        .filter(|&i| wb[i] != 0.0)
                        .map(|i| wb[i] * jc[i] * jd[i])
                        .sum();
                    h[(c, d)] += s;
                    if c != d {
                        h[(d, c)] += s;
                    }
                }
            }
        }
        Ok(h)
    }

    /// Curvature of `-f` from forward differences of the adjoint gradient.
    fn difference_hessian(&self, x: &[f64], g: &[f64]) -> Result<DMatrix<f64>> {
        let k = x.len();
        let mut h = DMatrix::zeros(k, k);
        for j in 0..k {
            let step = 1e-5 * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[j] += step;
            let (_, gp) = self.value_and_gradient(&xp)?;
            for i in 0..k {
                h[(i, j)] = -(gp[i] - g[i]) / step;
            }
        }
        Ok(symmetrize(&h))
    }

    /// Newton ascent from `x0` with backtracking. Curvature comes from
    /// differences of the adjoint gradient; where that is not negative
    /// definite the Gauss-Newton matrix is used instead.
    pub fn maximize(&self, x0: &[f64], max_iters: usize, gradient_tol: f64) -> Result<LaplaceFit> {
        let mut x = x0.to_vec();
        let (mut f, mut g) = self.value_and_gradient(&x)?;
        let mut iterations = 0;
        while iterations < max_iters {
            if norm(&g) <= gradient_tol * (1.0 + f.abs()) {
                break;
            }
            iterations += 1;
            let gv = DVector::from_column_slice(&g);
            let step = match Cholesky::new(self.difference_hessian(&x, &g)?) {
                Some(c) => c.solve(&gv),
                None => Cholesky::new(self.gauss_newton_hessian(&x)?)
                    .ok_or_else(|| singular("Gauss-Newton Hessian"))?
                    .solve(&gv),
            };
            let slope = step.dot(&gv);
            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a + t * d).collect();
                if let Ok((ft, gt)) = self.value_and_gradient(&trial) {
                    if ft >= f + 1e-4 * t * slope {
                        accepted = Some((trial, ft, gt));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((xn, fnew, gnew)) = accepted else {
                break;
            };
            x = xn;
            f = fnew;
            g = gnew;
        }
        let h = self.gauss_newton_hessian(&x)?;
        let cov = Cholesky::new(h).ok_or_else(|| singular("Gauss-Newton Hessian"))?.inverse();
        let cov = symmetrize(&cov);
        Ok(LaplaceFit {
            mean: x,
            covariance: cov.as_slice().to_vec(),
            objective: f,
            gradient_norm: norm(&g),
            iterations,
        })
    }
}

fn singular(what: &str) -> Error {
    Error::SingularSystem(what.to_string())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Expected squared residual per precision index, antithetic draws.
fn mc_residual(
    problem: &DarcyProblem,
    sample: &Prepared,
    mean: &[f64],
    cov: &DMatrix<f64>,
    draws: &[Vec<f64>],
    per_point: bool,
) -> Result<[Vec<f64>; 3]> {
    let k = mean.len();
    let l = Cholesky::new(cov.clone()).ok_or_else(|| singular("latent covariance"))?.l();
    let (kx, ky) = problem.coarse_grid();
    let n = sample.field.len();
    let len = if per_point { n } else { 1 };
    let mut acc: [Vec<f64>; 3] = std::array::from_fn(|_| vec![0.0; len]);
    for z in draws {
        let x: Vec<f64> = (0..k)
            .map(|a| mean[a] + (0..=a).map(|b| l[(a, b)] * z[b]).sum::<f64>())
            .collect();
        if x.iter().any(|v| !v.is_finite() || v.abs() > 700.0) {
            return Err(singular("latent draw overflows"));
        }
        let u = problem.solve(&CoarseDiffusivity::from_log(kx, ky, &x)?)?.solution();
        for b in Block::ALL {
            let (f, c) = (sample.field.block(b), u.block(b));
            let a = &mut acc[b.index()];
            for i in 0..n {
                if sample.field.fluid[i] {
                    let r = f[i] - c[i];
                    a[if per_point { i } else { 0 }] += r * r;
                }
            }
        }
    }
    let s = draws.len() as f64;
    for a in &mut acc {
        for v in a.iter_mut() {
            *v /= s;
        }
    }
    Ok(acc)
}

struct Prepared {
    phi: DMatrix<f64>,
    phi_gram: DMatrix<f64>,
    field: FineField,
    /// Observation count per precision index.
    obs: Vec<f64>,
}

#[derive(Clone)]
struct Latent {
    mean: Vec<f64>,
    cov: DMatrix<f64>,
    log_det: f64,
    residual: [Vec<f64>; 3],
}

struct Globals {
    m: DVector<f64>,
    sigma: DMatrix<f64>,
    alpha: Vec<Gamma>,
    beta: Gamma,
    tau: [Vec<Gamma>; 3],
}

impl Globals {
    fn tau_mean(&self, b: usize, j: usize) -> f64 {
        let t = &self.tau[b];
        t[if t.len() == 1 { 0 } else { j }].mean()
    }
}

fn prior_mean(p: &Prepared, g: &Globals) -> Vec<f64> {
    (&p.phi * &g.m).as_slice().to_vec()
}

/// Contribution of one sample to the bound.
fn sample_elbo(p: &Prepared, q: &Latent, g: &Globals) -> f64 {
    let k = q.mean.len() as f64;
    let ln2pi = (2.0 * PI).ln();
    let mut data = 0.0;
    for b in 0..3 {
        for (j, r) in q.residual[b].iter().enumerate() {
            let t = &g.tau[b][if g.tau[b].len() == 1 { 0 } else { j }];
            data += 0.5 * p.obs[j] * (t.mean_log() - ln2pi) - 0.5 * t.mean() * r;
        }
    }
    let pm = prior_mean(p, g);
    let sq: f64 = q.mean.iter().zip(&pm).map(|(a, b)| (a - b) * (a - b)).sum();
    let tr_c = q.cov.trace();
    let tr_phi = (&g.sigma * &p.phi_gram).trace();
    let latent = 0.5 * k * (g.beta.mean_log() - ln2pi) - 0.5 * g.beta.mean() * (sq + tr_c + tr_phi);
    let entropy = 0.5 * k * (1.0 + ln2pi) + 0.5 * q.log_det;
    data + latent + entropy
}

fn global_elbo(g: &Globals, prior: &Gamma) -> f64 {
    let j = g.m.len();
    let ln2pi = (2.0 * PI).ln();
    let mut total = 0.0;
    for a in 0..j {
        let al = &g.alpha[a];
        total += 0.5 * al.mean_log() - 0.5 * ln2pi
            - 0.5 * al.mean() * (g.m[a] * g.m[a] + g.sigma[(a, a)]);
        total -= al.kl(prior);
    }
    let log_det = 2.0
        * Cholesky::new(g.sigma.clone())
            .map(|c| c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .unwrap_or(f64::NEG_INFINITY);
    total += 0.5 * (j as f64 * (1.0 + ln2pi) + log_det);
    total -= g.beta.kl(prior);
    for t in g.tau.iter().flatten() {
        total -= t.kl(prior);
    }
    total
}

fn log_det_spd(m: &DMatrix<f64>) -> Option<f64> {
    Cholesky::new(m.clone()).map(|c| 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Antithetic standard normal draws, fixed for a whole training run.
fn common_draws(k: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let half = count.div_ceil(2);
    let mut r = rng(derive_seed(seed, stream::TRAINING));
    let base: Vec<Vec<f64>> = (0..half)
        .map(|_| (0..k).map(|_| StandardNormal.sample(&mut r)).collect())
        .collect();
    let mut out = base.clone();
    out.extend(base.iter().map(|z| z.iter().map(|v: &f64| -v).collect()));
    out
}

/// Extracts features and trains on `(microstructure, fine field)` pairs.
pub fn train(dataset: &[(Microstructure, FineField)], config: &TrainConfig) -> Result<PosteriorState> {
    config.validate()?;
    let samples = dataset
        .par_iter()
        .map(|(ms, field)| {
            Ok(TrainingSample {
                features: extract_features(ms, config.coarse_grid, config.feature_resolution)?,
                field: field.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    train_on_features(&samples, config)
}

pub fn train_on_features(samples: &[TrainingSample], config: &TrainConfig) -> Result<PosteriorState> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let (kx, ky) = config.coarse_grid;
    let k = kx * ky;
    let grid = samples[0].field.grid_size;
    let jw = samples[0].features.width();
    for s in samples {
        if s.field.grid_size != grid || s.features.cells() != k || s.features.width() != jw {
            return Err(Error::DimensionMismatch(
                "training samples disagree in lattice, coarse grid or feature count".into(),
            ));
        }
        if (s.features.kx, s.features.ky) != (kx, ky) {
            return Err(Error::DimensionMismatch("feature grid differs from the coarse grid".into()));
        }
        s.field.validate()?;
    }
    let per_point = config.precision_mode == PrecisionMode::PerPoint;
    let n_pts = grid * grid;
    let problem = DarcyProblem::new(kx, ky, &config.bc, grid)?;
    let prior = config.hyperprior;
    let nf = samples.len() as f64;

    let prepared: Vec<Prepared> = samples
        .iter()
        .map(|s| {
            let phi = DMatrix::from_row_slice(k, jw, &s.features.values);
            let phi_gram = phi.transpose() * &phi;
            let obs = if per_point {
                s.field.fluid.iter().map(|&f| if f { 1.0 } else { 0.0 }).collect()
            } else {
                vec![s.field.fluid_count() as f64]
            };
            Prepared {
                phi,
                phi_gram,
                field: s.field.clone(),
                obs,
            }
        })
        .collect();
    let gram_sum = prepared.iter().fold(DMatrix::zeros(jw, jw), |acc, p| acc + &p.phi_gram);

    // initial globals: unit diffusivity, unit noise, field-variance precisions
    let tau_init: [Vec<Gamma>; 3] = std::array::from_fn(|b| {
        let block = Block::ALL[b];
        let (mut s1, mut s2, mut c) = (0.0, 0.0, 0.0);
        for p in &prepared {
            for (i, v) in p.field.block(block).iter().enumerate() {
                if p.field.fluid[i] {
                    s1 += v;
                    s2 += v * v;
                    c += 1.0;
                }
            }
        }
        let var = if c > 1.0 { (s2 - s1 * s1 / c) / (c - 1.0) } else { 0.0 };
        let var = if var > 0.0 { var } else { 1.0 };
        vec![Gamma::new(1.0, var); if per_point { n_pts } else { 1 }]
    });
    let mut g = Globals {
        m: DVector::zeros(jw),
        sigma: DMatrix::identity(jw, jw),
        alpha: vec![Gamma::new(1.0, 1.0); jw],
        beta: Gamma::new(1.0, 1.0),
        tau: tau_init,
    };
    let draws = common_draws(k, config.mc_samples, config.seed);

    let init_cov = DMatrix::<f64>::identity(k, k) / g.beta.mean();
    let mut latents: Vec<Latent> = prepared
        .par_iter()
        .map(|p| {
            let mean = prior_mean(p, &g);
            let residual = mc_residual(&problem, p, &mean, &init_cov, &draws, per_point)?;
            Ok(Latent {
                mean,
                cov: init_cov.clone(),
                log_det: log_det_spd(&init_cov).unwrap(),
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut data_elbo = 0.0;
    while iterations < config.max_iters {
        iterations += 1;
        // E-step
        let accepted: usize = latents
            .par_iter_mut()
            .zip(prepared.par_iter())
            .map(|(q, p)| {
                let weights: [Vec<f64>; 3] = std::array::from_fn(|b| {
                    (0..n_pts)
                        .map(|i| {
                            if p.field.fluid[i] {
                                g.tau_mean(b, i)
                            } else {
                                0.0
                            }
                        })
                        .collect()
                });
                let obj = LaplaceObjective {
                    problem: &problem,
                    target: &p.field,
                    weights,
                    prior_mean: prior_mean(p, &g),
                    beta: g.beta.mean(),
                };
                let Ok(fit) = obj.maximize(&q.mean, config.estep_max_iters, config.estep_gradient_tol)
                else {
                    return 0;
                };
                log::trace!(
                    "laplace: {} steps, |g| {:.3e}, f {:.6e}",
                    fit.iterations,
                    fit.gradient_norm,
                    fit.objective
                );
                let cov = DMatrix::from_row_slice(k, k, &fit.covariance);
                let Some(log_det) = log_det_spd(&cov) else { return 0 };
                let Ok(residual) = mc_residual(&problem, p, &fit.mean, &cov, &draws, per_point)
                else {
                    return 0;
                };
                let candidate = Latent {
                    mean: fit.mean,
                    cov,
                    log_det,
                    residual,
                };
                if sample_elbo(p, &candidate, &g) >= sample_elbo(p, q, &g) {
                    *q = candidate;
                    1
                } else {
                    0
                }
            })
            .sum();

        // M-step: theta, alpha, beta, tau in turn
        let beta_bar = g.beta.mean();
        let mut a = &gram_sum * beta_bar;
        for j in 0..jw {
            a[(j, j)] += g.alpha[j].mean();
        }
        g.sigma = symmetrize(&Cholesky::new(a).ok_or_else(|| singular("weight precision"))?.inverse());
        let rhs = prepared
            .iter()
            .zip(&latents)
            .fold(DVector::zeros(jw), |acc, (p, q)| {
                acc + p.phi.transpose() * DVector::from_column_slice(&q.mean)
            });
        g.m = &g.sigma * rhs * beta_bar;
        for j in 0..jw {
            g.alpha[j] = Gamma::new(
                prior.shape + 0.5,
                prior.rate + 0.5 * (g.m[j] * g.m[j] + g.sigma[(j, j)]),
            );
        }
        let mut beta_rate = prior.rate;
        for (p, q) in prepared.iter().zip(&latents) {
            let pm = prior_mean(p, &g);
            let sq: f64 = q.mean.iter().zip(&pm).map(|(x, y)| (x - y) * (x - y)).sum();
            beta_rate += 0.5 * (sq + q.cov.trace() + (&g.sigma * &p.phi_gram).trace());
        }
        g.beta = Gamma::new(prior.shape + 0.5 * nf * k as f64, beta_rate);
        for b in 0..3 {
            let len = g.tau[b].len();
            for j in 0..len {
                let (mut shape, mut rate) = (prior.shape, prior.rate);
                for (p, q) in prepared.iter().zip(&latents) {
                    shape += 0.5 * p.obs[j];
                    rate += 0.5 * q.residual[b][j];
                }
                g.tau[b][j] = Gamma::new(shape, rate);
            }
        }

        data_elbo = latents
            .iter()
            .zip(&prepared)
            .map(|(q, p)| sample_elbo(p, q, &g))
            .sum::<f64>();
        let elbo = data_elbo + global_elbo(&g, &prior);
        debug!(
            "iteration {iterations}: elbo {elbo:.10e}, accepted {accepted}/{}, E[beta] {:.4e}",
            samples.len(),
            g.beta.mean()
        );
        let previous = trace.last().copied();
        trace.push(elbo);
        if let Some(prev) = previous {
            if (elbo - prev).abs() <= config.tol * elbo.abs().max(1.0) {
                converged = true;
                break;
            }
        }
    }
    if converged {
        info!("training converged after {iterations} iterations");
    } else {
        warn!(
            "training stopped at max_iters = {} with the bound still changing",
            config.max_iters
        );
    }

    let tau_pooled: [Gamma; 3] = std::array::from_fn(|b| {
        let (mut shape, mut rate) = (prior.shape, prior.rate);
        for (p, q) in prepared.iter().zip(&latents) {
            shape += 0.5 * p.obs.iter().sum::<f64>();
            rate += 0.5 * q.residual[b].iter().sum::<f64>();
        }
        Gamma::new(shape, rate)
    });
    let state = PosteriorState {
        coarse_grid: config.coarse_grid,
        output_grid: grid,
        feature_resolution: config.feature_resolution,
        mesh_resolution: config.mesh_resolution,
        bc: config.bc.clone(),
        feature_names: samples[0].features.names.clone(),
        precision_mode: config.precision_mode,
        theta_mean: g.m.as_slice().to_vec(),
        theta_covariance: row_major(&g.sigma),
        alpha: g.alpha,
        beta: g.beta,
        tau: g.tau,
        tau_pooled,
        tau_prior: prior,
        latent: latents
            .iter()
            .map(|q| LatentPosterior {
                mean: q.mean.clone(),
                covariance: row_major(&q.cov),
            })
            .collect(),
        elbo_trace: trace,
        data_elbo,
        iterations,
        converged,
        training_size: samples.len(),
    };
    state.validate()?;
    Ok(state)
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn objective_setup(seed: u64, problem: &DarcyProblem) -> (FineField, [Vec<f64>; 3], Vec<f64>) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let (kx, ky) = problem.coarse_grid();
        let g = problem.output_grid();
        let lam: Vec<f64> = (0..kx * ky).map(|_| r.random_range(0.1..10.0)).collect();
        let u = problem
            .solve(&CoarseDiffusivity::new(kx, ky, lam).unwrap())
            .unwrap()
            .solution();
        let mut target = FineField::zeros(g);
        for i in 0..g * g {
            target.fluid[i] = r.random_bool(0.8);
            for b in Block::ALL {
                target.block_mut(b)[i] = if target.fluid[i] {
                    u.block(b)[i] + 0.05 * r.random_range(-1.0..1.0)
                } else {
                    0.0
                };
            }
        }
        let weights = std::array::from_fn(|b| {
            (0..g * g)
                .map(|i| if target.fluid[i] { [50.0, 3.0, 8.0][b] } else { 0.0 })
                .collect()
        });
        let prior = (0..kx * ky).map(|_| r.random_range(-1.0..1.0)).collect();
        (target, weights, prior)
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let bc = BoundaryConditions::default();
        for (seed, grid) in (0..10).zip([(2, 2), (3, 2), (1, 4), (2, 2), (4, 4)].iter().cycle()) {
            let problem = DarcyProblem::new(grid.0, grid.1, &bc, 12).unwrap();
            let (target, weights, prior_mean) = objective_setup(seed, &problem);
            let obj = LaplaceObjective {
                problem: &problem,
                target: &target,
                weights,
                prior_mean,
                beta: 2.0,
            };
            let mut r = ChaCha8Rng::seed_from_u64(100 + seed);
            let x: Vec<f64> = (0..grid.0 * grid.1).map(|_| r.random_range(0.1f64..10.0).ln()).collect();
            let (_, g) = obj.value_and_gradient(&x).unwrap();
            let scale = norm(&g);
            for k in 0..x.len() {
                let h = 1e-6;
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let fd = (obj.value(&xp).unwrap() - obj.value(&xm).unwrap()) / (2.0 * h);
                let err = (g[k] - fd).abs() / fd.abs().max(1e-3 * scale);
                assert!(err <= 1e-4, "seed {seed} cell {k}: {} vs {fd}", g[k]);
            }
        }
    }

    #[test]
    fn laplace_optimum_is_stationary() {
        let bc = BoundaryConditions::default();
        for seed in 0..4 {
            let problem = DarcyProblem::new(2, 2, &bc, 16).unwrap();
            let (target, weights, prior_mean) = objective_setup(seed, &problem);
            let obj = LaplaceObjective {
                problem: &problem,
                target: &target,
                weights,
                prior_mean,
                beta: 1.0,
            };
            let fit = obj.maximize(&[0.0; 4], 100, 1e-6).unwrap();
            assert!(
                fit.gradient_norm <= 1e-6 * (1.0 + fit.objective.abs()),
                "seed {seed}: |g| = {} at f = {} after {} steps",
                fit.gradient_norm,
                fit.objective,
                fit.iterations
            );
            let (_, g) = obj.value_and_gradient(&fit.mean).unwrap();
            assert!((norm(&g) - fit.gradient_norm).abs() <= 1e-12 * (1.0 + norm(&g)));
            let c = DMatrix::from_row_slice(4, 4, &fit.covariance);
            assert!(Cholesky::new(c).is_some());
        }
    }

    #[test]
    fn common_draws_are_antithetic() {
        let d = common_draws(3, 10, 4);
        assert_eq!(d.len(), 10);
        for s in 0..5 {
            for k in 0..3 {
                assert_eq!(d[s][k], -d[s + 5][k]);
            }
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let err = train_on_features(&[], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset));
    }
}
