//! Norm clipping and the sketched Gaussian mechanism `SG(x; R, ξ) = R·x + ξ`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeding::{self, Purpose};
use crate::sketch::Compressor;

/// Clipping threshold, per-client noise scale and the root of all noise streams.
///
/// `tau = +inf` disables clipping and `sigma_g = 0` disables noise; either
/// makes the run non-private, which the accountant reports as `ε = ∞`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MechanismConfig {
    pub tau: f64,
    pub sigma_g: f64,
    pub noise_seed: u64,
}

impl MechanismConfig {
    pub fn new(tau: f64, sigma_g: f64, noise_seed: u64) -> Result<Self> {
        let cfg = Self {
            tau,
            sigma_g,
            noise_seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau.is_nan() || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "clipping threshold tau must be > 0, got {}",
                self.tau
            )));
        }
        if !self.sigma_g.is_finite() || self.sigma_g < 0.0 {
            return Err(Error::Config(format!(
                "noise scale sigma_g must be finite and >= 0, got {}",
                self.sigma_g
            )));
        }
        Ok(())
    }

    /// Isolated noise stream for one client in one round.
    pub fn noise_stream(&self, client: usize, round: u64) -> ChaCha8Rng {
        seeding::purpose_stream(Purpose::Noise, self.noise_seed, round, client as u64)
    }
}

/// `v · min{1, τ/‖v‖₂}`.
pub fn clip(v: &[f64], tau: f64) -> Vec<f64> {
    clip_with_activation(v, tau).0
}

/// Like [`clip`], also reporting whether the threshold was active
/// (`‖v‖ > τ`). The result never exceeds `τ` in computed norm, so clipping
/// is exactly idempotent.
pub fn clip_with_activation(v: &[f64], tau: f64) -> (Vec<f64>, bool) {
    debug_assert!(tau > 0.0);
    let n = linalg::norm(v);
    if n <= tau {
        return (v.to_vec(), false);
    }
    let mut factor = tau / n;
    loop {
        let out: Vec<f64> = v.iter().map(|x| x * factor).collect();
        if linalg::norm(&out) <= tau {
            return (out, true);
        }
        factor *= 1.0 - f64::EPSILON;
    }
}

/// Applies `SG(x; R, ξ) = R·x + ξ` with `ξ ~ N(0, σ_g² I_b)` drawn from `rng`.
///
/// The caller has already clipped `x`.
pub fn sgm_apply(
    x_clipped: &[f64],
    compressor: &Compressor,
    sigma_g: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let mut y = compressor.compress(x_clipped)?;
    if sigma_g > 0.0 {
        for yi in y.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *yi += sigma_g * z;
        }
    }
    Ok(y)
}

/// `2τ²/(bσ_g²)`; the ratio-sensitivity bounds need this below 1.
pub fn regime_ratio(tau: f64, b: usize, sigma_g: f64) -> f64 {
    2.0 * tau * tau / (b as f64 * sigma_g * sigma_g)
}

/// `(√(1 − 2τ²/(bσ²)), √(1 + 2τ²/(bσ²)))`: bounds on the inverse and direct
/// ratio sensitivity of the clipped sum under noise `σ_g` in sketch dimension `b`.
pub fn ratio_sensitivity_bounds(tau: f64, b: usize, sigma_g: f64) -> Result<(f64, f64)> {
    if sigma_g.is_nan() || sigma_g <= 0.0 {
        return Err(Error::Domain(format!(
            "ratio sensitivity needs sigma_g > 0, got {sigma_g}"
        )));
    }
    if b == 0 {
        return Err(Error::Domain("ratio sensitivity needs b >= 1".into()));
    }
    let u = regime_ratio(tau, b, sigma_g);
    if !(u < 1.0) {
        return Err(Error::Regime { ratio: u });
    }
    Ok(((1.0 - u).sqrt(), (1.0 + u).sqrt()))
}
