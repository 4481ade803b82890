use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Block, FineField};
use crate::surrogate::predict::PredictiveField;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub block: String,
    /// Mean over samples of `|mean - truth| / |truth|` on fluid points.
    /// Samples with an all-zero truth block are left out.
    pub relative_l2_error: f64,
    pub log_predictive_density: f64,
    pub coverage_1sigma: f64,
    pub coverage_2sigma: f64,
    pub points: usize,
}

/// Headline numbers refer to the pressure block; `blocks` has all three.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub samples: usize,
    pub relative_l2_error: f64,
    pub log_predictive_density: f64,
    pub coverage_1sigma: f64,
    pub coverage_2sigma: f64,
    pub blocks: Vec<BlockMetrics>,
}

fn block_metrics(b: Block, predictions: &[PredictiveField], truths: &[FineField]) -> BlockMetrics {
    let (mut err_sum, mut err_n) = (0.0, 0usize);
    let (mut lpd, mut c1, mut c2, mut pts) = (0.0, 0usize, 0usize, 0usize);
    for (p, t) in predictions.iter().zip(truths) {
        let (m, s, u) = (p.mean.block(b), p.std.block(b), t.block(b));
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..u.len() {
            if !t.fluid[i] {
                continue;
            }
            let r = u[i] - m[i];
            num += r * r;
            den += u[i] * u[i];
            pts += 1;
            let z = r.abs() / s[i];
            lpd += -0.5 * (2.0 * PI * s[i] * s[i]).ln() - 0.5 * z * z;
            if r.abs() <= s[i] {
                c1 += 1;
            }
            if r.abs() <= 2.0 * s[i] {
                c2 += 1;
            }
        }
        if den > 0.0 {
            err_sum += (num / den).sqrt();
            err_n += 1;
        }
    }
    let pf = pts.max(1) as f64;
    BlockMetrics {
        block: b.name().to_string(),
        relative_l2_error: if err_n > 0 { err_sum / err_n as f64 } else { f64::NAN },
        log_predictive_density: lpd / pf,
        coverage_1sigma: c1 as f64 / pf,
        coverage_2sigma: c2 as f64 / pf,
        points: pts,
    }
}

/// Accuracy and calibration of predictive fields against the truth, over the
/// truth's fluid points.
pub fn evaluate(predictions: &[PredictiveField], truths: &[FineField]) -> Result<Metrics> {
    if predictions.len() != truths.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for (p, t) in predictions.iter().zip(truths) {
        if p.mean.grid_size != t.grid_size || p.std.grid_size != t.grid_size {
            return Err(Error::DimensionMismatch(format!(
                "prediction lattice {} vs truth lattice {}",
                p.mean.grid_size, t.grid_size
            )));
        }
    }
    let blocks: Vec<BlockMetrics> = Block::ALL
        .iter()
        .map(|&b| block_metrics(b, predictions, truths))
        .collect();
    let head = &blocks[Block::Pressure.index()];
    Ok(Metrics {
        samples: predictions.len(),
        relative_l2_error: head.relative_l2_error,
        log_predictive_density: head.log_predictive_density,
        coverage_1sigma: head.coverage_1sigma,
        coverage_2sigma: head.coverage_2sigma,
        blocks: blocks.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn truth(g: usize, seed: u64) -> FineField {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut f = FineField::zeros(g);
        for i in 0..g * g {
            f.pressure[i] = Normal::new(1.0, 0.3).unwrap().sample(&mut r);
            f.velocity_x[i] = StandardNormal.sample(&mut r);
            f.velocity_y[i] = StandardNormal.sample(&mut r);
        }
        f
    }

    fn with_std(mean: FineField, s: f64) -> PredictiveField {
        let mut std = mean.clone();
        for b in Block::ALL {
            std.block_mut(b).iter_mut().for_each(|v| *v = s);
        }
        PredictiveField {
            mean,
            std,
            samples: 2,
        }
    }

    #[test]
    fn perfect_prediction() {
        let t = truth(8, 1);
        let m = evaluate(&[with_std(t.clone(), 1e-9)], &[t]).unwrap();
        assert_eq!(m.relative_l2_error, 0.0);
        assert_eq!(m.coverage_1sigma, 1.0);
        assert_eq!(m.coverage_2sigma, 1.0);
        assert_eq!(m.blocks.len(), 3);
    }

    #[test]
    fn offset_beyond_one_sigma() {
        let t = truth(8, 2);
        let mut mean = t.clone();
        for b in Block::ALL {
            mean.block_mut(b).iter_mut().for_each(|v| *v += 0.5 * (1.0 + 1e-9));
        }
        let m = evaluate(&[with_std(mean, 0.5)], &[t]).unwrap();
        assert_eq!(m.coverage_1sigma, 0.0);
        assert_eq!(m.coverage_2sigma, 1.0);
    }

    #[test]
    fn gaussian_simulation_coverage() {
        let t = truth(100, 3);
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let mut std = t.clone();
        let mut mean = t.clone();
        for b in Block::ALL {
            let (mb, sb) = (mean.block_mut(b), std.block_mut(b));
            for i in 0..mb.len() {
                let s: f64 = r.random_range(0.1..2.0);
                let e: f64 = StandardNormal.sample(&mut r);
                sb[i] = s;
                mb[i] += s * e;
            }
        }
        let m = evaluate(
            &[PredictiveField {
                mean,
                std,
                samples: 2,
            }],
            &[t],
        )
        .unwrap();
        for b in &m.blocks {
            assert_eq!(b.points, 10_000);
            assert!((b.coverage_1sigma - 0.6827).abs() < 0.03, "{}", b.coverage_1sigma);
            assert!((b.coverage_2sigma - 0.9545).abs() < 0.03);
        }
    }

    #[test]
    fn length_mismatch() {
        let t = truth(4, 0);
        assert!(evaluate(&[], &[t.clone()]).is_err());
        assert!(evaluate(&[with_std(t.clone(), 1.0)], &[t.clone(), t]).is_err());
    }
}
