//! Server-side optimizers applied to the desketched aggregate update.
//!
//! AMSGrad updates the parameters with the current moments `(m_t, v_t)`:
//!
//! ```text
//! m_t = β₁ m_{t−1} + (1 − β₁) u
//! v̂_t = β₂ v_{t−1} + (1 − β₂) u²
//! v_t = max(v̂_t, v_{t−1})
//! θ_t = θ_{t−1} − η · m_t / (√v_t + ε)
//! ```
//!
//! There is no bias correction and moments start at zero. Adam is the same
//! recursion without the running maximum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::check_len;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub eta_global: f64,
}

impl GdConfig {
    pub fn new(eta_global: f64) -> Result<Self> {
        check_lr(eta_global)?;
        Ok(Self { eta_global })
    }
}

fn check_lr(eta: f64) -> Result<()> {
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and > 0, got {eta}")));
    }
    Ok(())
}

/// `θ − η·update`.
pub fn gd_step(theta: &[f64], update: &[f64], cfg: GdConfig) -> Result<Vec<f64>> {
    check_len(update, theta.len())?;
    Ok(theta
        .iter()
        .zip(update)
        .map(|(t, u)| t - cfg.eta_global * u)
        .collect())
}

/// Hyperparameters shared by AMSGrad and Adam.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Skip the `√v + ε` normalization and step along `m_t` directly.
    /// With `β₁ = 0` this reproduces plain GD.
    #[serde(default)]
    pub raw: bool,
}

impl Default for MomentConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            raw: false,
        }
    }
}

impl MomentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, beta) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::Config(format!("eps must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmsGradState {
    pub m: Vec<f64>,
    /// Running maximum of the second-moment estimates.
    pub v: Vec<f64>,
    /// Latest second-moment estimate before the maximum.
    pub v_hat: Vec<f64>,
    pub config: MomentConfig,
}

impl AmsGradState {
    pub fn new(d: usize, config: MomentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            v_hat: vec![0.0; d],
            config,
        })
    }
}

fn moment_update(
    theta: &[f64],
    update: &[f64],
    m_prev: &[f64],
    v_prev: &[f64],
    cfg: &MomentConfig,
    eta: f64,
    keep_max: bool,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let d = theta.len();
    check_len(update, d)?;
    check_len(m_prev, d)?;
    check_len(v_prev, d)?;
    let mut theta_next = Vec::with_capacity(d);
    let mut m = Vec::with_capacity(d);
    let mut v = Vec::with_capacity(d);
    let mut v_hat = Vec::with_capacity(d);
    for i in 0..d {
        let u = update[i];
        let mi = cfg.beta1 * m_prev[i] + (1.0 - cfg.beta1) * u;
        let vh = cfg.beta2 * v_prev[i] + (1.0 - cfg.beta2) * u * u;
        let vi = if keep_max { vh.max(v_prev[i]) } else { vh };
        let step = if cfg.raw { mi } else { mi / (vi.sqrt() + cfg.eps) };
        theta_next.push(theta[i] - eta * step);
        m.push(mi);
        v.push(vi);
        v_hat.push(vh);
    }
    Ok((theta_next, m, v, v_hat))
}

/// One AMSGrad step; returns the new parameters and the advanced state.
pub fn amsgrad_step(
    theta: &[f64],
    update: &[f64],
    state: &AmsGradState,
    eta_global: f64,
) -> Result<(Vec<f64>, AmsGradState)> {
    let (theta_next, m, v, v_hat) =
        moment_update(theta, update, &state.m, &state.v, &state.config, eta_global, true)?;
    Ok((
        theta_next,
        AmsGradState {
            m,
            v,
            v_hat,
            config: state.config,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub config: MomentConfig,
}

impl AdamState {
    pub fn new(d: usize, config: MomentConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            m: vec![0.0; d],
            v: vec![0.0; d],
            config,
        })
    }
}

/// One Adam step (no bias correction).
pub fn adam_step(
    theta: &[f64],
    update: &[f64],
    state: &AdamState,
    eta_global: f64,
) -> Result<(Vec<f64>, AdamState)> {
    let (theta_next, m, v, _) =
        moment_update(theta, update, &state.m, &state.v, &state.config, eta_global, false)?;
    Ok((
        theta_next,
        AdamState {
            m,
            v,
            config: state.config,
        },
    ))
}

/// A stateful `GLOBAL_OPT`.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalOptimizer {
    Gd(GdConfig),
    AmsGrad { eta_global: f64, state: AmsGradState },
    Adam { eta_global: f64, state: AdamState },
}

impl GlobalOptimizer {
    pub fn gd(eta_global: f64) -> Result<Self> {
        Ok(Self::Gd(GdConfig::new(eta_global)?))
    }

    pub fn amsgrad(d: usize, eta_global: f64, config: MomentConfig) -> Result<Self> {
        check_lr(eta_global)?;
        Ok(Self::AmsGrad {
            eta_global,
            state: AmsGradState::new(d, config)?,
        })
    }

    pub fn adam(d: usize, eta_global: f64, config: MomentConfig) -> Result<Self> {
        check_lr(eta_global)?;
        Ok(Self::Adam {
            eta_global,
            state: AdamState::new(d, config)?,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gd(_) => "gd",
            Self::AmsGrad { .. } => "amsgrad",
            Self::Adam { .. } => "adam",
        }
    }

    /// Applies one step in place.
    pub fn step(&mut self, theta: &mut Vec<f64>, update: &[f64]) -> Result<()> {
        match self {
            Self::Gd(cfg) => *theta = gd_step(theta, update, *cfg)?,
            Self::AmsGrad { eta_global, state } => {
                let (t, s) = amsgrad_step(theta, update, state, *eta_global)?;
                *theta = t;
                *state = s;
            }
            Self::Adam { eta_global, state } => {
                let (t, s) = adam_step(theta, update, state, *eta_global)?;
                *theta = t;
                *state = s;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn gd_examples() {
        let cfg = GdConfig::new(0.1).unwrap();
        assert_eq!(gd_step(&[1.0, 2.0], &[0.0, 0.0], cfg).unwrap(), vec![1.0, 2.0]);
        let t = gd_step(&[1.0, 1.0], &[0.5, -0.5], cfg).unwrap();
        assert!((t[0] - 0.95).abs() < 1e-15 && (t[1] - 1.05).abs() < 1e-15);
        assert!(gd_step(&[1.0], &[1.0, 2.0], cfg).is_err());
        assert!(GdConfig::new(0.0).is_err());
    }

    #[test]
    fn gd_is_additive() {
        let cfg = GdConfig::new(0.3).unwrap();
        let (u1, u2) = ([0.25, -1.0], [0.5, 0.75]);
        let two = gd_step(&gd_step(&[1.0, 2.0], &u1, cfg).unwrap(), &u2, cfg).unwrap();
        let one = gd_step(&[1.0, 2.0], &[0.75, -0.25], cfg).unwrap();
        for i in 0..2 {
            assert!((two[i] - one[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn amsgrad_instantaneous_moments() {
        let cfg = MomentConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, raw: false };
        let s = AmsGradState::new(3, cfg).unwrap();
        let g = [0.5, -2.0, 0.0];
        let (t, _) = amsgrad_step(&[0.0; 3], &g, &s, 0.1).unwrap();
        for i in 0..3 {
            assert_eq!(t[i], -0.1 * g[i] / (g[i].abs() + 1e-8));
        }
    }

    #[test]
    fn amsgrad_zero_update_is_noop() {
        let s = AmsGradState::new(2, MomentConfig::default()).unwrap();
        let (t, s2) = amsgrad_step(&[1.0, -1.0], &[0.0, 0.0], &s, 1.0).unwrap();
        assert_eq!(t, vec![1.0, -1.0]);
        assert_eq!(s2.v, s.v);
    }

    #[test]
    fn amsgrad_two_step_trace() {
        // Hand trace: m₁ = 0.1, v₁ = 0.01, m₂ = 0.19, v₂ = 0.0199.
        let s0 = AmsGradState::new(1, MomentConfig::default()).unwrap();
        let (t1, s1) = amsgrad_step(&[0.0], &[1.0], &s0, 1.0).unwrap();
        assert!((s1.m[0] - 0.1).abs() < 1e-15 && (s1.v[0] - 0.01).abs() < 1e-15);
        let theta1 = -0.1 / (0.1 + 1e-8);
        assert!((t1[0] - theta1).abs() < 1e-12);
        assert!((t1[0] + 0.99999990).abs() < 1e-8);
        let (t2, s2) = amsgrad_step(&t1, &[1.0], &s1, 1.0).unwrap();
        assert!((s2.m[0] - 0.19).abs() < 1e-15 && (s2.v[0] - 0.0199).abs() < 1e-15);
        let theta2 = theta1 - 0.19 / (0.0199f64.sqrt() + 1e-8);
        assert!((t2[0] - theta2).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_unit_beta2() {
        let cfg = MomentConfig { beta2: 1.0, ..MomentConfig::default() };
        assert!(AdamState::new(2, cfg).is_err());
        assert!(AmsGradState::new(2, cfg).is_err());
    }

    #[test]
    fn adam_matches_amsgrad_when_second_moment_grows() {
        // Non-decreasing |u| keeps v̂ monotone, so the max is inert.
        let cfg = MomentConfig::default();
        let mut ams = (vec![0.3, -0.2], AmsGradState::new(2, cfg).unwrap());
        let mut adam = (vec![0.3, -0.2], AdamState::new(2, cfg).unwrap());
        for k in 1..20 {
            let u = [k as f64, -2.0 * k as f64];
            ams = amsgrad_step(&ams.0, &u, &ams.1, 0.01).unwrap();
            adam = adam_step(&adam.0, &u, &adam.1, 0.01).unwrap();
            assert_eq!(ams.0, adam.0);
        }
    }

    #[test]
    fn adam_first_step_matches_amsgrad() {
        let cfg = MomentConfig::default();
        let u = [0.7, -0.1, 3.0];
        let a = amsgrad_step(&[1.0; 3], &u, &AmsGradState::new(3, cfg).unwrap(), 0.05).unwrap();
        let b = adam_step(&[1.0; 3], &u, &AdamState::new(3, cfg).unwrap(), 0.05).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn raw_amsgrad_with_zero_betas_is_gd() {
        let cfg = MomentConfig { beta1: 0.0, beta2: 0.0, eps: 1e-8, raw: true };
        let mut ams = GlobalOptimizer::amsgrad(2, 0.2, cfg).unwrap();
        let mut gd = GlobalOptimizer::gd(0.2).unwrap();
        let (mut a, mut g) = (vec![1.0, 2.0], vec![1.0, 2.0]);
        for k in 0..50 {
            let u = [(k as f64).sin(), (k as f64 * 0.3).cos()];
            ams.step(&mut a, &u).unwrap();
            gd.step(&mut g, &u).unwrap();
            assert_eq!(a, g);
        }
    }

    proptest! {
        #[test]
        fn v_is_monotone_and_steps_bounded(
            updates in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..40),
            beta1 in 0.0f64..0.999,
            beta2 in 0.0f64..0.999,
        ) {
            let cfg = MomentConfig { beta1, beta2, eps: 1e-8, raw: false };
            let mut state = AmsGradState::new(4, cfg).unwrap();
            let mut theta = vec![0.0; 4];
            for u in &updates {
                let (next, s) = amsgrad_step(&theta, u, &state, 0.5).unwrap();
                for i in 0..4 {
                    prop_assert!(s.v[i] >= state.v[i]);
                    prop_assert!((next[i] - theta[i]).abs() <= 0.5 * s.m[i].abs() / cfg.eps * (1.0 + 1e-12));
                }
                theta = next;
                state = s;
            }
        }
    }
}
