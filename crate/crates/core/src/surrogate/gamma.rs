use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

/// Gamma distribution in the shape/rate parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gamma {
    pub shape: f64,
    pub rate: f64,
}

impl Gamma {
    pub fn new(shape: f64, rate: f64) -> Self {
        debug_assert!(shape > 0.0 && rate > 0.0, "Gamma({shape}, {rate})");
        Gamma { shape, rate }
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    /// `E[log x]`
    pub fn mean_log(&self) -> f64 {
        digamma(self.shape) - self.rate.ln()
    }

    pub fn is_valid(&self) -> bool {
        self.shape > 0.0 && self.rate > 0.0 && self.shape.is_finite() && self.rate.is_finite()
    }

    /// `KL(self || prior)`
    pub fn kl(&self, prior: &Gamma) -> f64 {
        let (a, b) = (self.shape, self.rate);
        let (a0, b0) = (prior.shape, prior.rate);
        (a - a0) * digamma(a) - ln_gamma(a) + ln_gamma(a0) + a0 * (b.ln() - b0.ln())
            + a * (b0 - b) / b
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        rand_distr::Gamma::new(self.shape, 1.0 / self.rate)
            .expect("valid gamma parameters")
            .sample(rng)
    }
}
