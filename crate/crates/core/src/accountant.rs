//! Privacy accounting for the sketched Gaussian mechanism.
//!
//! The release `SG(γ; R, ξ)` of a clipped sum `γ` (at most `m` contributions of
//! norm `τ`) is, over the draw of `R` and `ξ`, distributed as
//! `N(0, (‖γ‖²/b + mσ²)·I_b)`. Neighbouring datasets therefore differ only in
//! the variance of an isotropic Gaussian, which gives a closed-form Rényi
//! divergence. The per-step pipeline is:
//!
//! 1. RDP of one step: `α²τ⁴ / ((α−1)·b·σ⁴)`;
//! 2. conversion to `(ε₀, δ₀)`-DP at the optimal order `α*`;
//! 3. amplification by subsampling with ratio `q`;
//! 4. strong composition over `T` rounds.
//!
//! The total failure probability is `qTδ₀ + δ'` with the default split
//! `δ₀ = δ/(2qT)`, `δ' = δ/2`.
//!
//! A baseline accountant for the (unsketched) subsampled Gaussian mechanism is
//! included for noise comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mechanism::regime_ratio;
use crate::numfmt::serialize_f64;

/// `(α, ε)`-RDP guarantee.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpPoint {
    pub alpha: f64,
    pub epsilon: f64,
}

impl RdpPoint {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::Domain(format!("RDP order must exceed 1, got {alpha}")));
        }
        if !(epsilon >= 0.0) {
            return Err(Error::Domain(format!("RDP epsilon must be >= 0, got {epsilon}")));
        }
        Ok(Self { alpha, epsilon })
    }
}

/// `(ε, δ)`-DP guarantee. `ε` may be `+∞` for non-private settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpPoint {
    #[serde(serialize_with = "serialize_f64")]
    pub epsilon: f64,
    pub delta: f64,
}

impl DpPoint {
    pub fn new(epsilon: f64, delta: f64) -> Result<Self> {
        if !(epsilon >= 0.0) {
            return Err(Error::Domain(format!("epsilon must be >= 0, got {epsilon}")));
        }
        check_delta(delta)?;
        Ok(Self { epsilon, delta })
    }
}

fn check_delta(delta: f64) -> Result<()> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::Domain(format!("delta must lie in (0, 1), got {delta}")));
    }
    Ok(())
}

/// Parameters of one training run as seen by the accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantParams {
    /// Sampling ratio `m/n` (or `N/C` at client level).
    pub q: f64,
    /// Number of rounds `T`.
    pub rounds: u64,
    #[serde(serialize_with = "serialize_f64", deserialize_with = "crate::numfmt::deserialize_f64")]
    pub tau: f64,
    /// Sketch dimension.
    pub b: usize,
    pub sigma_g: f64,
}

impl AccountantParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(Error::Config(format!("sampling ratio q must lie in (0, 1], got {}", self.q)));
        }
        if self.rounds == 0 {
            return Err(Error::Config("number of rounds must be >= 1".into()));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!(
                "clipping threshold must be finite and > 0, got {}",
                self.tau
            )));
        }
        if self.b == 0 {
            return Err(Error::Config("sketch dimension b must be >= 1".into()));
        }
        if !(self.sigma_g > 0.0) {
            return Err(Error::Config(format!("sigma_g must be > 0, got {}", self.sigma_g)));
        }
        Ok(())
    }

    pub fn regime_ratio(&self) -> f64 {
        regime_ratio(self.tau, self.b, self.sigma_g)
    }

    pub fn regime_ok(&self) -> bool {
        self.regime_ratio() < 1.0
    }

    fn check_regime(&self) -> Result<()> {
        let ratio = self.regime_ratio();
        if ratio < 1.0 {
            Ok(())
        } else {
            Err(Error::Regime { ratio })
        }
    }
}

/// How the target `δ` is divided between per-step conversion and composition.
///
/// `δ' = composition_fraction · δ` goes to strong composition and the rest,
/// spread over `qT` subsampled steps, gives `δ₀ = (1 − fraction)·δ/(qT)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaSplit {
    pub composition_fraction: f64,
}

impl Default for DeltaSplit {
    fn default() -> Self {
        Self {
            composition_fraction: 0.5,
        }
    }
}

impl DeltaSplit {
    /// Returns `(δ₀, δ')`.
    pub fn apply(&self, delta: f64, q: f64, rounds: u64) -> Result<(f64, f64)> {
        check_delta(delta)?;
        let f = self.composition_fraction;
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!(
                "delta split fraction must lie in (0, 1), got {f}"
            )));
        }
        let delta_prime = f * delta;
        let delta0 = (1.0 - f) * delta / (q * rounds as f64);
        if !(delta0 > 0.0 && delta0 < 1.0) {
            return Err(Error::Calibration(format!(
                "per-step delta {delta0} is outside (0, 1); the delta budget is infeasible"
            )));
        }
        Ok((delta0, delta_prime))
    }
}

/// `f_α(x) = log x + log(x² / (αx² + 1 − α)) / (2(α−1))`.
///
/// `b·f_α(x)` is the order-`α` Rényi divergence from `N(0, s²I_b)` to
/// `N(0, x²s²I_b)`.
pub fn f_alpha(alpha: f64, x: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Domain(format!("order alpha must exceed 1, got {alpha}")));
    }
    if !(x > 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("f_alpha needs a finite x > 0, got {x}")));
    }
    let x2 = x * x;
    let denom = alpha * x2 + 1.0 - alpha;
    if !(denom > 0.0) {
        return Err(Error::Domain(format!(
            "alpha = {alpha} is too large for variance ratio x = {x} (alpha·x² + 1 − alpha = {denom})"
        )));
    }
    Ok(x.ln() + (x2 / denom).ln() / (2.0 * (alpha - 1.0)))
}

/// Exact `D_α(SG(γ(D)) ‖ SG(γ(D')))` given the norms of the two clipped sums.
pub fn renyi_divergence_sgm(
    alpha: f64,
    norm_d: f64,
    norm_dp: f64,
    m: usize,
    b: usize,
    sigma_g: f64,
) -> Result<f64> {
    if norm_d == norm_dp {
        f_alpha(alpha, 1.0)?;
        return Ok(0.0);
    }
    let floor = m as f64 * b as f64 * sigma_g * sigma_g;
    let x = ((norm_dp * norm_dp + floor) / (norm_d * norm_d + floor)).sqrt();
    Ok(b as f64 * f_alpha(alpha, x)?)
}

/// Upper bound on the one-step RDP at order `α`: `α²τ⁴ / ((α−1)·b·σ⁴)`.
pub fn sgm_rdp_bound(alpha: f64, tau: f64, b: usize, sigma_g: f64) -> Result<f64> {
    if !(alpha > 1.0) {
        return Err(Error::Domain(format!("order alpha must exceed 1, got {alpha}")));
    }
    if !(sigma_g > 0.0) || b == 0 {
        return Err(Error::Domain("need sigma_g > 0 and b >= 1".into()));
    }
    let ratio = regime_ratio(tau, b, sigma_g);
    if !(ratio < 1.0) {
        return Err(Error::Regime { ratio });
    }
    let r = tau * tau / (sigma_g * sigma_g);
    Ok(alpha * alpha * r * r / ((alpha - 1.0) * b as f64))
}

/// RDP to `(ε, δ)`-DP: `ε + log(1/δ)/(α−1)`.
pub fn rdp_to_dp(point: RdpPoint, delta: f64) -> Result<DpPoint> {
    check_delta(delta)?;
    DpPoint::new(
        point.epsilon + (1.0 / delta).ln() / (point.alpha - 1.0),
        delta,
    )
}

/// One-step DP guarantee at the optimal order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDp {
    pub point: DpPoint,
    #[serde(serialize_with = "serialize_f64")]
    pub alpha_star: f64,
}

/// `α* = 1 + √(1 + bσ⁴·log(1/δ₀)/τ⁴)`, the minimizer of
/// `α²τ⁴/((α−1)bσ⁴) + log(1/δ₀)/(α−1)`.
pub fn optimal_alpha(tau: f64, b: usize, sigma_g: f64, delta0: f64) -> f64 {
    let k = b as f64 * (sigma_g / tau).powi(4);
    1.0 + (1.0 + k * (1.0 / delta0).ln()).sqrt()
}

/// `(ε₀, δ₀)`-DP of one release, `ε₀ = (2τ⁴/(bσ⁴))·α*`.
pub fn sgm_step_dp(tau: f64, b: usize, sigma_g: f64, delta0: f64) -> Result<StepDp> {
    check_delta(delta0)?;
    if !(sigma_g > 0.0) || b == 0 || !(tau >= 0.0) {
        return Err(Error::Domain("need sigma_g > 0, tau >= 0 and b >= 1".into()));
    }
    let ratio = regime_ratio(tau, b, sigma_g);
    if !(ratio < 1.0) {
        return Err(Error::Regime { ratio });
    }
    let k = b as f64 * (sigma_g / tau).powi(4);
    let alpha_star = optimal_alpha(tau, b, sigma_g, delta0);
    let epsilon = if k.is_infinite() { 0.0 } else { 2.0 * alpha_star / k };
    Ok(StepDp {
        point: DpPoint::new(epsilon, delta0)?,
        alpha_star,
    })
}

/// Amplification by subsampling: `ε' = log(1 + p(e^ε − 1))`, `δ' = pδ`.
pub fn subsample_dp(point: DpPoint, p: f64) -> Result<DpPoint> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::Domain(format!("sampling ratio must lie in (0, 1], got {p}")));
    }
    if p == 1.0 {
        return Ok(point);
    }
    let eps = point.epsilon;
    let amplified = if eps.is_infinite() {
        f64::INFINITY
    } else if eps < 700.0 {
        (p * eps.exp_m1()).ln_1p()
    } else {
        // log((1−p) + p·e^ε) without overflowing e^ε
        eps + (p + (1.0 - p) * (-eps).exp()).ln()
    };
    DpPoint::new(amplified.min(eps), p * point.delta)
}

/// Strong composition over `k` adaptive uses:
/// `ε' = √(2k·log(1/δ'))·ε + kε(e^ε − 1)`, `δ_total = kδ + δ'`.
pub fn strong_compose(point: DpPoint, k: u64, delta_prime: f64) -> Result<DpPoint> {
    if k == 0 {
        return Err(Error::Domain("composition count must be >= 1".into()));
    }
    check_delta(delta_prime)?;
    let kf = k as f64;
    let eps = point.epsilon;
    let composed = (2.0 * kf * (1.0 / delta_prime).ln()).sqrt() * eps + kf * eps * eps.exp_m1();
    let total_delta = kf * point.delta + delta_prime;
    if !(total_delta < 1.0) {
        return Err(Error::Calibration(format!(
            "composed delta {total_delta} is not below 1"
        )));
    }
    DpPoint::new(composed, total_delta)
}

/// One stage of the accounting pipeline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceStage {
    pub stage: String,
    #[serde(serialize_with = "serialize_f64")]
    pub epsilon: f64,
    pub delta: f64,
}

/// Full accounting record for a run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccountantReport {
    pub mechanism: String,
    pub params: AccountantParams,
    pub target_delta: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub epsilon: f64,
    /// Total failure probability actually spent, `qTδ₀ + δ'`.
    pub delta: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub alpha_star: f64,
    pub regime_ok: bool,
    #[serde(serialize_with = "serialize_f64")]
    pub regime_ratio: f64,
    pub delta_split: DeltaSplit,
    pub pipeline_trace: Vec<TraceStage>,
    /// Set when the guarantee is vacuous (ε = ∞).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

pub const SGM_MECHANISM: &str = "sketched-gaussian";

/// Runs the full pipeline and records every stage.
pub fn sgm_account(params: AccountantParams, delta: f64, split: DeltaSplit) -> Result<AccountantReport> {
    params.validate()?;
    params.check_regime()?;
    let (delta0, delta_prime) = split.apply(delta, params.q, params.rounds)?;
    let step = sgm_step_dp(params.tau, params.b, params.sigma_g, delta0)?;
    let sub = subsample_dp(step.point, params.q)?;
    let composed = strong_compose(sub, params.rounds, delta_prime)?;
    if composed.delta > delta * (1.0 + 1e-12) {
        return Err(Error::Calibration(format!(
            "spent delta {} exceeds target {delta}",
            composed.delta
        )));
    }
    Ok(AccountantReport {
        mechanism: SGM_MECHANISM.into(),
        params,
        target_delta: delta,
        epsilon: composed.epsilon,
        delta: composed.delta,
        alpha_star: step.alpha_star,
        regime_ok: true,
        regime_ratio: params.regime_ratio(),
        delta_split: split,
        pipeline_trace: vec![
            TraceStage {
                stage: "step".into(),
                epsilon: step.point.epsilon,
                delta: step.point.delta,
            },
            TraceStage {
                stage: "subsampled".into(),
                epsilon: sub.epsilon,
                delta: sub.delta,
            },
            TraceStage {
                stage: "composed".into(),
                epsilon: composed.epsilon,
                delta: composed.delta,
            },
        ],
        note: None,
    })
}

impl AccountantReport {
    /// A report carrying `ε = ∞`, for runs that provide no guarantee.
    pub fn vacuous(params: AccountantParams, delta: f64, note: impl Into<String>) -> Self {
        Self {
            mechanism: SGM_MECHANISM.into(),
            params,
            target_delta: delta,
            epsilon: f64::INFINITY,
            delta,
            alpha_star: f64::NAN,
            regime_ok: params.sigma_g > 0.0 && params.regime_ok(),
            regime_ratio: if params.sigma_g > 0.0 {
                params.regime_ratio()
            } else {
                f64::INFINITY
            },
            delta_split: DeltaSplit::default(),
            pipeline_trace: Vec::new(),
            note: Some(note.into()),
        }
    }
}

/// End-to-end `ε` at total failure probability `delta`, default split.
pub fn sgm_epsilon(params: AccountantParams, delta: f64) -> Result<f64> {
    Ok(sgm_account(params, delta, DeltaSplit::default())?.epsilon)
}

/// Outcome of a noise calibration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Calibration {
    pub sigma_g: f64,
    pub report: AccountantReport,
}

/// Relative tolerance on the calibrated noise scale.
pub const CALIBRATION_RTOL: f64 = 1e-4;

/// Smallest `σ_g` (to [`CALIBRATION_RTOL`]) whose end-to-end `ε` does not exceed
/// `target.epsilon` at `target.delta`.
///
/// The search starts at the regime floor `√2·τ/√b` and doubles until feasible,
/// then bisects.
pub fn calibrate_sgm_sigma(
    target: DpPoint,
    q: f64,
    rounds: u64,
    tau: f64,
    b: usize,
    split: DeltaSplit,
) -> Result<Calibration> {
    if !(target.epsilon > 0.0) {
        return Err(Error::Calibration(format!(
            "target epsilon must be > 0, got {}",
            target.epsilon
        )));
    }
    let probe = AccountantParams {
        q,
        rounds,
        tau,
        b,
        sigma_g: 1.0,
    };
    probe.validate()?;
    split.apply(target.delta, q, rounds)?;

    let eps_at = |sigma_g: f64| -> Result<f64> {
        Ok(sgm_account(AccountantParams { sigma_g, ..probe }, target.delta, split)?.epsilon)
    };

    let floor = 2f64.sqrt() * tau / (b as f64).sqrt();
    let mut lo = floor;
    let mut hi = 2.0 * floor;
    let mut doublings = 0;
    while eps_at(hi)? > target.epsilon {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 200 || !hi.is_finite() {
            return Err(Error::Calibration(format!(
                "no noise scale reaches epsilon {} (last tried sigma_g = {lo})",
                target.epsilon
            )));
        }
    }
    while hi - lo > CALIBRATION_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let report = sgm_account(AccountantParams { sigma_g: hi, ..probe }, target.delta, split)?;
    Ok(Calibration { sigma_g: hi, report })
}

/// Evaluates the moments-accountant style sufficient noise level
/// `c₂·τ·√((1 + log^{1.5}(2mT/δ)/√b)·mT·log(2/δ)) / (nε)`.
///
/// The constant `c₂` is not known; the value is only meaningful for comparing
/// shapes (in `b`, `T`, `ε`) and is never used for calibration.
#[allow(clippy::too_many_arguments)]
pub fn ma_noise_bound(
    c2: f64,
    tau: f64,
    m: usize,
    rounds: u64,
    b: f64,
    n: usize,
    eps: f64,
    delta: f64,
) -> f64 {
    let mt = m as f64 * rounds as f64;
    let sketch_term = (2.0 * mt / delta).ln().powf(1.5) / b.sqrt();
    c2 * tau * ((1.0 + sketch_term) * mt * (2.0 / delta).ln()).sqrt() / (n as f64 * eps)
}

/// Label stored with baseline results.
pub const BASELINE_METHOD: &str =
    "sampled-gaussian RDP at integer orders 2..=256 (extended geometrically when the optimum is at 256), converted with eps + log(1/delta)/(alpha-1)";

/// RDP at integer order `alpha ≥ 2` of the Gaussian mechanism with noise
/// multiplier `sigma`, applied to a Poisson subsample of ratio `q`:
/// `log(Σ_k C(α,k)(1−q)^{α−k} q^k exp((k²−k)/(2σ²))) / (α−1)`.
pub fn baseline_gm_rdp(q: f64, sigma: f64, alpha: u64) -> f64 {
    debug_assert!(alpha >= 2);
    let a = alpha as f64;
    if q >= 1.0 {
        return a / (2.0 * sigma * sigma);
    }
    let (lq, l1q) = (q.ln(), (-q).ln_1p());
    let inv = 1.0 / (2.0 * sigma * sigma);
    let mut log_binom = 0.0;
    let mut terms = Vec::with_capacity(alpha as usize + 1);
    for k in 0..=alpha {
        if k > 0 {
            log_binom += ((alpha - k + 1) as f64).ln() - (k as f64).ln();
        }
        let kf = k as f64;
        terms.push(log_binom + (a - kf) * l1q + kf * lq + (kf * kf - kf) * inv);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
    (lse / (a - 1.0)).max(0.0)
}

/// End-to-end guarantee of the baseline accountant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BaselineReport {
    pub method: String,
    pub q: f64,
    pub sigma: f64,
    pub rounds: u64,
    pub delta: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub epsilon: f64,
    pub alpha: u64,
}

/// `ε` after `rounds` compositions of the subsampled Gaussian mechanism with
/// noise multiplier `sigma` (noise std `σ·τ` on sensitivity-`τ` sums).
pub fn baseline_gm_epsilon(q: f64, sigma: f64, rounds: u64, delta: f64) -> Result<BaselineReport> {
    check_delta(delta)?;
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("noise multiplier must be > 0, got {sigma}")));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("sampling ratio must lie in (0, 1], got {q}")));
    }
    let log_inv_delta = (1.0 / delta).ln();
    let eps_at = |alpha: u64| {
        rounds as f64 * baseline_gm_rdp(q, sigma, alpha) + log_inv_delta / (alpha as f64 - 1.0)
    };
    let (mut best_alpha, mut best) = (2, eps_at(2));
    for alpha in 3..=256 {
        let e = eps_at(alpha);
        if e < best {
            best = e;
            best_alpha = alpha;
        }
    }
    // With very little privacy loss the optimum sits at the top order; keep
    // going so that ε still tends to 0 as σ grows.
    let mut alpha = 256;
    while best_alpha == alpha && alpha < (1 << 20) {
        alpha *= 2;
        let e = eps_at(alpha);
        if e < best {
            best = e;
            best_alpha = alpha;
        }
    }
    Ok(BaselineReport {
        method: BASELINE_METHOD.into(),
        q,
        sigma,
        rounds,
        delta,
        epsilon: best,
        alpha: best_alpha,
    })
}

/// Smallest noise multiplier for which the baseline reaches `target.epsilon`.
pub fn calibrate_baseline_sigma(target: DpPoint, q: f64, rounds: u64) -> Result<f64> {
    if !(target.epsilon > 0.0) {
        return Err(Error::Calibration(format!(
            "target epsilon must be > 0, got {}",
            target.epsilon
        )));
    }
    let eps_at = |s: f64| -> Result<f64> { Ok(baseline_gm_epsilon(q, s, rounds, target.delta)?.epsilon) };
    let (mut lo, mut hi) = (0.5, 1.0);
    let mut steps = 0;
    while eps_at(hi)? > target.epsilon {
        lo = hi;
        hi *= 2.0;
        steps += 1;
        if steps > 60 {
            return Err(Error::Calibration(format!(
                "baseline cannot reach epsilon {}",
                target.epsilon
            )));
        }
    }
    if steps == 0 {
        while eps_at(lo)? <= target.epsilon {
            hi = lo;
            lo *= 0.5;
            steps += 1;
            if steps > 60 {
                return Ok(hi);
            }
        }
    }
    while hi - lo > CALIBRATION_RTOL * hi {
        let mid = 0.5 * (lo + hi);
        if eps_at(mid)? <= target.epsilon {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Ok(hi)
}
