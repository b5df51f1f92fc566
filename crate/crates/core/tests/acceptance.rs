//! End-to-end acceptance checks.
//!
//! Runs as a plain binary (`harness = false`) so that every criterion prints a
//! single `PASS`/`FAIL` line with the measured numbers. The process exits with
//! a non-zero status if any criterion fails.
//!
//! Reference values fall into two groups: reference noise levels and budgets,
//! checked at the stated tolerance, and independent oracles implemented here
//! from first principles (numerical integration, direct minimisation, a plain
//! FedAvg loop) that the library must agree with.

use std::time::{Duration, Instant};

use fedsgm::accountant::{
    baseline_gm_epsilon, calibrate_baseline_sigma, calibrate_sgm_sigma, f_alpha, renyi_divergence_sgm,
    sgm_epsilon, sgm_rdp_bound, AccountantParams, DeltaSplit, DpPoint,
};
use fedsgm::experiment::{load_config, load_config_file, simulate};
use fedsgm::fedsim::{client_sampler, run_federation, CompressorKind, FedConfig, OptimizerKind};
use fedsgm::mechanism::{sgm_apply, MechanismConfig};
use fedsgm::optim::{amsgrad_step, AmsGradState, MomentConfig};
use fedsgm::seeding::{derive_seed, stream};
use fedsgm::sketch::{Compressor, SketchMatrix, SketchSpec};
use fedsgm::tasks::{Partition, QuadraticSpec, QuadraticTask, Task};
use rand::Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

// ---------------------------------------------------------------------------
// Privacy accounting oracles
// ---------------------------------------------------------------------------

const DELTA: f64 = 1e-5;
const Q: f64 = 4.0 / 625.0;

/// End-to-end ε with the per-step order found by golden-section search on
/// `α²τ⁴/((α−1)bσ⁴) + log(1/δ₀)/(α−1)` instead of the closed form.
fn forward_oracle(sigma: f64, rounds: u64, b: f64, tau: f64) -> f64 {
    let delta0 = DELTA / (2.0 * Q * rounds as f64);
    let delta_prime = DELTA / 2.0;
    let c = tau.powi(4) / (b * sigma.powi(4));
    let objective = |a: f64| a * a * c / (a - 1.0) + (1.0 / delta0).ln() / (a - 1.0);
    // Search in log(α − 1) where the objective is unimodal and well scaled.
    let (mut x0, mut x1) = (1e-9f64.ln(), 1e9f64.ln());
    let g = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..300 {
        let a = x1 - g * (x1 - x0);
        let bb = x0 + g * (x1 - x0);
        if objective(1.0 + a.exp()) < objective(1.0 + bb.exp()) {
            x1 = bb;
        } else {
            x0 = a;
        }
    }
    let eps0 = objective(1.0 + (0.5 * (x0 + x1)).exp());
    let sub = (1.0 + Q * eps0.exp_m1()).ln();
    let k = rounds as f64;
    (2.0 * k * (1.0 / delta_prime).ln()).sqrt() * sub + k * sub * sub.exp_m1()
}

fn calibration_table(eps: &[f64], expected: &[f64], rounds: u64, b: usize) -> Outcome {
    let start = Instant::now();
    let mut sigmas = Vec::new();
    for &e in eps {
        let cal = calibrate_sgm_sigma(DpPoint::new(e, DELTA).unwrap(), Q, rounds, 1.0, b, DeltaSplit::default())
            .map_err(|err| format!("calibration at eps={e} failed: {err}"))?;
        sigmas.push(cal.sigma_g);
    }
    let elapsed = start.elapsed();
    let worst = sigmas.iter().zip(expected).map(|(s, x)| rel(*s, *x)).fold(0.0, f64::max);
    let detail = format!(
        "sigma_g = {:?} vs {:?}, worst rel err {:.3}, {:.0} ms",
        sigmas.iter().map(|s| (s * 1e4).round() / 1e4).collect::<Vec<_>>(),
        expected,
        worst,
        elapsed.as_secs_f64() * 1e3
    );
    check(worst <= 0.15 && elapsed < Duration::from_secs(1), detail)
}

fn criterion_1() -> Outcome {
    // Forward direction against the independent oracle first.
    let reference_sigma = [0.0883, 0.1013, 0.1588, 0.2265];
    let reference_eps = [2.94, 1.68, 0.43, 0.18];
    let mut forward = Vec::new();
    for (&s, &e) in reference_sigma.iter().zip(&reference_eps) {
        let params = AccountantParams {
            q: Q,
            rounds: 500,
            tau: 1.0,
            b: 400_000,
            sigma_g: s,
        };
        let lib = sgm_epsilon(params, DELTA).map_err(|e| e.to_string())?;
        let oracle = forward_oracle(s, 500, 4e5, 1.0);
        if rel(lib, oracle) > 1e-6 || rel(oracle, e) > 0.02 {
            return Err(format!("forward eps at sigma={s}: library {lib}, oracle {oracle}, expected ~{e}"));
        }
        forward.push((lib * 1000.0).round() / 1000.0);
    }
    let table = calibration_table(&[2.75, 1.60, 0.42, 0.18], &reference_sigma, 500, 400_000);
    let forward = format!("forward eps {forward:?} = oracle; ");
    table.map(|d| forward.clone() + &d).map_err(|d| forward + &d)
}

fn criterion_2() -> Outcome {
    calibration_table(&[2.45, 1.44, 0.35, 0.12], &[0.0948, 0.1071, 0.1664, 0.2580], 200, 200_000)
}

/// Integer-order RDP of the subsampled Gaussian computed by integrating
/// `E_{z~N(0,σ²)}[((1−q) + q·exp((2z−1)/(2σ²)))^α]` on a grid.
fn sampled_gaussian_rdp_oracle(q: f64, sigma: f64, alpha: u64) -> f64 {
    let a = alpha as f64;
    let s2 = sigma * sigma;
    let h = sigma / 200.0;
    let (lo, hi) = (-14.0 * sigma, a + 14.0 * sigma + 1.0);
    let n = ((hi - lo) / h).ceil() as usize;
    let log_integrand = |z: f64| {
        let log_ratio = {
            let t = (2.0 * z - 1.0) / (2.0 * s2);
            // log((1−q) + q e^t), stable for large t
            if t > 0.0 {
                t + ((1.0 - q) * (-t).exp() + q).ln()
            } else {
                ((1.0 - q) + q * t.exp()).ln()
            }
        };
        -z * z / (2.0 * s2) - 0.5 * (2.0 * std::f64::consts::PI * s2).ln() + a * log_ratio
    };
    let logs: Vec<f64> = (0..=n).map(|i| log_integrand(lo + i as f64 * h)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (i, l) in logs.iter().enumerate() {
        let w = if i == 0 || i == n { 0.5 } else { 1.0 };
        sum += w * (l - max).exp();
    }
    ((max + (sum * h).ln()) / (a - 1.0)).max(0.0)
}

fn baseline_oracle(q: f64, sigma: f64, rounds: u64) -> f64 {
    (2..=512u64)
        .map(|a| rounds as f64 * sampled_gaussian_rdp_oracle(q, sigma, a) + (1.0 / DELTA).ln() / (a as f64 - 1.0))
        .fold(f64::INFINITY, f64::min)
}

fn criterion_3() -> Outcome {
    let sigmas = [0.8, 1.0, 2.0, 4.0];
    let expected = [2.75, 1.60, 0.42, 0.18];
    let mut got = Vec::new();
    let mut worst: f64 = 0.0;
    for (&s, &e) in sigmas.iter().zip(&expected) {
        let lib = baseline_gm_epsilon(Q, s, 500, DELTA).map_err(|e| e.to_string())?.epsilon;
        let oracle = baseline_oracle(Q, s, 500);
        if rel(lib, oracle) > 1e-3 {
            return Err(format!("baseline at sigma={s}: library {lib} vs integration oracle {oracle}"));
        }
        worst = worst.max(rel(lib, e));
        got.push((lib * 1000.0).round() / 1000.0);
    }
    check(worst <= 0.20, format!("eps = {got:?} vs {expected:?}, worst rel err {worst:.3}; matches integration oracle"))
}

fn criterion_4() -> Outcome {
    let target = DpPoint::new(1.60, DELTA).unwrap();
    let sgm = calibrate_sgm_sigma(target, Q, 500, 1.0, 400_000, DeltaSplit::default())
        .map_err(|e| e.to_string())?
        .sigma_g;
    let baseline = calibrate_baseline_sigma(target, Q, 500).map_err(|e| e.to_string())? * 1.0;
    check(sgm < baseline, format!("SGM sigma_g {sgm:.4} < baseline noise std {baseline:.4}"))
}

// ---------------------------------------------------------------------------
// Divergence and f_alpha
// ---------------------------------------------------------------------------

/// `(1/(α−1))·log ∫ p^α q^{1−α}` for `p = N(0, vp)`, `q = N(0, vq)`, by the
/// trapezoidal rule, together with the log-integral.
fn renyi_1d_oracle(alpha: f64, vp: f64, vq: f64) -> Option<(f64, f64)> {
    let precision = alpha / vp + (1.0 - alpha) / vq;
    if !(precision > 0.0) {
        return None;
    }
    let s = precision.sqrt().recip();
    let h = s / 16.0;
    let n: i64 = 1280;
    let log_density = |x: f64, v: f64| -0.5 * (2.0 * std::f64::consts::PI * v).ln() - x * x / (2.0 * v);
    let mut sum = 0.0;
    for i in -n..=n {
        let x = i as f64 * h;
        let w = if i.abs() == n { 0.5 } else { 1.0 };
        sum += w * (alpha * log_density(x, vp) + (1.0 - alpha) * log_density(x, vq)).exp();
    }
    let log_integral = (sum * h).ln();
    Some((log_integral / (alpha - 1.0), log_integral))
}

fn criterion_5() -> Outcome {
    let mut rng = stream(derive_seed(&[5, 1]), 0);
    let mut accepted = 0;
    let mut worst: f64 = 0.0;
    let mut attempts = 0;
    while accepted < 200 {
        attempts += 1;
        if attempts > 100_000 {
            return Err(format!("only {accepted} admissible tuples generated"));
        }
        let alpha = 1.0 + 10f64.powf(rng.random_range(-1.3..1.8));
        let b = 10f64.powf(rng.random_range(0.0..4.0)).round() as usize;
        let m = rng.random_range(1..=50usize);
        let sigma = 10f64.powf(rng.random_range(-1.5..0.7));
        let tau = 10f64.powf(rng.random_range(-1.0..1.0));
        let nd = rng.random_range(0.0..=m as f64 * tau);
        let ndp = rng.random_range(0.0..=m as f64 * tau);
        let vp = nd * nd / b as f64 + m as f64 * sigma * sigma;
        let vq = ndp * ndp / b as f64 + m as f64 * sigma * sigma;
        let Some((per_dim, log_integral)) = renyi_1d_oracle(alpha, vp, vq) else {
            continue;
        };
        if log_integral < 1e-5 {
            continue;
        }
        let oracle = b as f64 * per_dim;
        let lib = renyi_divergence_sgm(alpha, nd, ndp, m, b, sigma)
            .map_err(|e| format!("library rejected an integrable tuple: {e}"))?;
        let err = rel(lib, oracle);
        if err > 1e-6 {
            return Err(format!(
                "alpha={alpha}, |g|={nd}, |g'|={ndp}, m={m}, b={b}, sigma={sigma}: {lib} vs oracle {oracle}"
            ));
        }
        worst = worst.max(err);
        accepted += 1;
    }

    // Upper bound on a grid of neighbouring norms (‖γ‖, ‖γ'‖ ≤ mτ, differing by
    // at most τ). The second-order bound on log(1 − αr) behind it needs
    // α²·r ≤ 1 with r = 2τ²/(bσ²); outside that range the exact divergence can
    // exceed it (or be infinite), which is reported but not asserted.
    let tau = 1.0;
    let (mut points, mut violations, mut outside, mut outside_violations) = (0u64, 0u64, 0u64, 0u64);
    let mut worst_ratio: f64 = 0.0;
    for &alpha in &[1.1, 1.5, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0] {
        for &b in &[1usize, 10, 100, 1_000, 10_000, 100_000] {
            for &r in &[1e-6, 1e-4, 1e-3, 1e-2, 0.05, 0.1, 0.3, 0.6, 0.9] {
                let sigma = (2.0 * tau * tau / (b as f64 * r)).sqrt();
                let bound = sgm_rdp_bound(alpha, tau, b, sigma).map_err(|e| e.to_string())?;
                let inside = alpha * alpha * r <= 1.0;
                for &m in &[1usize, 5, 50] {
                    let top = m as f64 * tau;
                    for i in 0..=20 {
                        let nd = top * i as f64 / 20.0;
                        for j in 0..=20 {
                            let ndp = (nd + tau * (j as f64 / 10.0 - 1.0)).clamp(0.0, top);
                            let exceeded = match renyi_divergence_sgm(alpha, nd, ndp, m, b, sigma) {
                                Ok(dv) => {
                                    if inside {
                                        worst_ratio = worst_ratio.max(dv / bound);
                                    }
                                    dv > bound * (1.0 + 1e-12)
                                }
                                Err(_) => true,
                            };
                            if inside {
                                points += 1;
                                violations += u64::from(exceeded);
                            } else {
                                outside += 1;
                                outside_violations += u64::from(exceeded);
                            }
                        }
                    }
                }
            }
        }
    }
    check(
        violations == 0,
        format!(
            "{accepted} random tuples match 1-D integration (worst rel err {worst:.1e}); \
             bound holds at {}/{points} grid points (max D/bound {worst_ratio:.3}); \
             outside alpha^2*r <= 1: {outside_violations}/{outside} exceed (not asserted)",
            points - violations
        ),
    )
}

fn criterion_6() -> Outcome {
    let per_alpha = 10_000;
    let mut bad = Vec::new();
    let mut total = 0;
    for &alpha in &[1.1f64, 2.0, 8.0, 64.0] {
        let lower = ((alpha - 1.0) / alpha).sqrt();
        let left = per_alpha / 2;
        let xs: Vec<f64> = (1..=left)
            .map(|i| lower + (1.0 - lower) * i as f64 / left as f64)
            .chain((1..=per_alpha - left).map(|i| 1.0 + 9.0 * i as f64 / (per_alpha - left) as f64))
            .collect();
        let fs: Vec<f64> = xs.iter().map(|&x| f_alpha(alpha, x).unwrap()).collect();
        total += xs.len();
        for k in 1..xs.len() {
            let diff = fs[k] - fs[k - 1];
            let ok = if xs[k] <= 1.0 { diff < 0.0 } else if xs[k - 1] >= 1.0 { diff > 0.0 } else { true };
            if !ok {
                bad.push((alpha, xs[k]));
            }
        }
        if f_alpha(alpha, 1.0).unwrap().abs() > 1e-15 {
            bad.push((alpha, 1.0));
        }
    }
    check(
        bad.is_empty(),
        format!("{total} grid points over alpha in {{1.1, 2, 8, 64}}; wrong-sign differences: {bad:?}"),
    )
}

// ---------------------------------------------------------------------------
// Sketch and mechanism statistics
// ---------------------------------------------------------------------------

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let (b, d, draws, sigma) = (64usize, 32usize, 10_000usize, 0.1);
    let mut rng = stream(derive_seed(&[7, 0]), 0);
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    x.iter_mut().for_each(|v| *v /= norm);

    let mut mean = vec![0.0; b];
    let mut second = vec![0.0; b * b];
    for k in 0..draws {
        let spec = SketchSpec::new(derive_seed(&[7, 1, k as u64]), b, d).map_err(|e| e.to_string())?;
        let comp = Compressor::Gaussian(SketchMatrix::auto(spec));
        let mut noise = stream(derive_seed(&[7, 2, k as u64]), 0);
        let y = sgm_apply(&x, &comp, sigma, &mut noise).map_err(|e| e.to_string())?;
        for i in 0..b {
            mean[i] += y[i];
            for j in 0..b {
                second[i * b + j] += y[i] * y[j];
            }
        }
    }
    let n = draws as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    let cov = |i: usize, j: usize| (second[i * b + j] - n * mean[i] * mean[j]) / (n - 1.0);
    let target = 1.0 / b as f64 + sigma * sigma;
    let worst_diag = (0..b).map(|i| rel(cov(i, i), target)).fold(0.0, f64::max);
    let mut worst_rho: f64 = 0.0;
    for i in 0..b {
        for j in (i + 1)..b {
            worst_rho = worst_rho.max((cov(i, j) / (cov(i, i) * cov(j, j)).sqrt()).abs());
        }
    }
    let elapsed = start.elapsed();
    check(
        worst_diag <= 0.05 && worst_rho <= 0.05 && elapsed < Duration::from_secs(30),
        format!(
            "target variance {target:.5}: worst diagonal rel err {worst_diag:.4}, max |rho| {worst_rho:.4}, {:.1} s",
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_8() -> Outcome {
    let seeds = 1000u64;
    // Unbiasedness of the desketched sketch.
    let (d, b) = (10usize, 4usize);
    let mut rng = stream(derive_seed(&[8, 0]), 0);
    let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for s in 0..seeds {
        let m = SketchMatrix::auto(SketchSpec::new(derive_seed(&[8, 1, s]), b, d).map_err(|e| e.to_string())?);
        let z = m.desketch(&m.sketch(&x).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        for i in 0..d {
            sum[i] += z[i];
            sum_sq[i] += z[i] * z[i];
        }
    }
    let n = seeds as f64;
    let mut worst_z: f64 = 0.0;
    for i in 0..d {
        let mean = sum[i] / n;
        let var = (sum_sq[i] - n * mean * mean) / (n - 1.0);
        worst_z = worst_z.max((mean - x[i]).abs() / (var / n).sqrt());
    }

    // Inner-product concentration at δ = 0.05.
    let delta = 0.05;
    let mut worst_rate: f64 = 0.0;
    for &(d, b) in &[(50usize, 5usize), (200, 20), (1000, 100)] {
        let mut rng = stream(derive_seed(&[8, 2, d as u64]), 0);
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let h: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let dot = |a: &[f64], c: &[f64]| a.iter().zip(c).map(|(p, q)| p * q).sum::<f64>();
        let radius = (d as f64 / delta).ln().powf(1.5) / (b as f64).sqrt() * dot(&g, &g).sqrt() * dot(&h, &h).sqrt();
        let mut violations = 0;
        for s in 0..seeds {
            let m = SketchMatrix::auto(SketchSpec::new(derive_seed(&[8, 3, d as u64, s]), b, d).map_err(|e| e.to_string())?);
            let rg = m.sketch(&g).map_err(|e| e.to_string())?;
            let rh = m.sketch(&h).map_err(|e| e.to_string())?;
            if (dot(&rg, &rh) - dot(&g, &h)).abs() > radius {
                violations += 1;
            }
        }
        worst_rate = worst_rate.max(violations as f64 / n);
    }
    check(
        worst_z <= 3.0 && worst_rate <= 0.25,
        format!("max |mean(R^T R x) - x| = {worst_z:.2} SE over {seeds} seeds; worst JL violation rate {worst_rate:.3}"),
    )
}

// ---------------------------------------------------------------------------
// Simulator
// ---------------------------------------------------------------------------

/// Plain FedAvg: full-batch local GD, average of `θ − θ_K`, global GD step.
fn fedavg_oracle(
    task: &dyn Task,
    partition: &Partition,
    per_round: usize,
    local_steps: usize,
    eta_local: f64,
    eta_global: f64,
    rounds: u64,
    seed: u64,
) -> (Vec<f64>, Vec<f64>) {
    let clients = partition.clients.len();
    let mut theta = task.initial_point();
    let mut losses = Vec::new();
    for t in 0..rounds {
        let selected = client_sampler(clients, per_round, t, seed).unwrap();
        let mut avg = vec![0.0; theta.len()];
        for &c in &selected {
            let mut local = theta.clone();
            for _ in 0..local_steps {
                let g = task.grad(&local, &partition.clients[c]);
                for (l, gi) in local.iter_mut().zip(&g) {
                    *l -= eta_local * gi;
                }
            }
            for i in 0..avg.len() {
                avg[i] += theta[i] - local[i];
            }
        }
        for i in 0..theta.len() {
            theta[i] -= eta_global * avg[i] / per_round as f64;
        }
        losses.push(task.full_loss(&theta));
    }
    (theta, losses)
}

fn criterion_9() -> Outcome {
    let mut rng = stream(derive_seed(&[9, 0]), 0);
    let cases = 12;
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let d = rng.random_range(3..=30usize);
        let eigenvalues: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..1.0)).collect();
        let clients = rng.random_range(2..=12usize);
        let per_round = rng.random_range(1..=clients);
        let samples = clients * rng.random_range(1..=4usize);
        let seed = rng.random::<u64>();
        let task = QuadraticTask::new(QuadraticSpec {
            eigenvalues,
            samples,
            spread: rng.random_range(0.1..1.0),
            init_radius: rng.random_range(1.0..10.0),
            seed,
        })
        .map_err(|e| e.to_string())?;
        let partition = Partition::iid(samples, clients, seed ^ 1);
        let cfg = FedConfig {
            clients,
            clients_per_round: per_round,
            local_steps: rng.random_range(1..=4usize),
            rounds: 100,
            eta_local: rng.random_range(0.05..0.8),
            eta_global: rng.random_range(0.3..1.5),
            batch_size: samples,
            mechanism: MechanismConfig::new(f64::INFINITY, 0.0, seed).map_err(|e| e.to_string())?,
            compressor: CompressorKind::Identity,
            optimizer: OptimizerKind::Gd,
            master_seed: seed,
            delta: 1e-5,
            threads: Some(1 + case % 3),
        };
        let out = run_federation(&cfg, &task, &partition).map_err(|e| e.to_string())?;
        let (theta, losses) = fedavg_oracle(
            &task,
            &partition,
            per_round,
            cfg.local_steps,
            cfg.eta_local,
            cfg.eta_global,
            cfg.rounds,
            seed,
        );
        let diff = out.final_theta.iter().zip(&theta).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut err = diff / scale;
        for (rec, l) in out.records.iter().zip(&losses) {
            err = err.max(rel(rec.train_loss, *l));
        }
        if err > 1e-12 {
            return Err(format!("case {case} (d={d}, C={clients}, N={per_round}): rel err {err:.2e}"));
        }
        worst = worst.max(err);
    }
    check(true, format!("{cases} random configurations, 100 rounds each: worst rel err {worst:.1e}"))
}

const CONVERGENCE_CONFIG: &str = r#"
[task]
kind = "quadratic"
d = 200
spectrum = "power_law"
exponent = 2.0
samples = 1000
spread = 0.0
init_radius = 50.0
partition = "iid"

[federation]
clients = 1000
clients_per_round = 100
local_steps = 4
rounds = 300
eta_local = 0.25
eta_global = 0.5
batch_size = 1
master_seed = 11

[mechanism]
tau = 1.0
sigma_g = "calibrate"

[sketch]
kind = "gaussian"
b = 50

[optimizer]
kind = "gd"

[accountant]
delta = 1e-5
target_epsilon = 8.0
"#;

fn criterion_10() -> Outcome {
    let start = Instant::now();
    let run = |overrides: &[String]| -> Result<_, String> {
        let cfg = load_config(CONVERGENCE_CONFIG, overrides).map_err(|e| e.to_string())?;
        simulate(cfg, overrides).map_err(|e| e.to_string())
    };
    let gd = run(&[])?;
    let ams = run(&["optimizer.kind=\"amsgrad\"".into(), "federation.eta_global=0.1".into()])?;
    let elapsed = start.elapsed();
    let intrinsic: f64 = (1..=200).map(|i| 1.0 / (i * i) as f64).sum();
    let reduction = gd.output.initial.grad_norm_sq / gd.output.records.last().unwrap().grad_norm_sq;
    let gd_loss = gd.output.records.last().unwrap().train_loss;
    let ams_loss = ams.output.records.last().unwrap().train_loss;
    check(
        reduction >= 100.0 && ams_loss <= 1.1 * gd_loss && elapsed < Duration::from_secs(120),
        format!(
            "I = {intrinsic:.3}, sigma_g = {:.4} (eps {:.3}); GD grad-norm^2 reduction {reduction:.0}x; \
             final loss GD {gd_loss:.4e}, AMSGrad {ams_loss:.4e} (ratio {:.3}); {:.1} s",
            gd.prepared.fed.mechanism.sigma_g,
            gd.prepared.accountant.epsilon,
            ams_loss / gd_loss,
            elapsed.as_secs_f64()
        ),
    )
}

fn criterion_11() -> Outcome {
    let cfg = MomentConfig::default();
    let state = AmsGradState::new(1, cfg).unwrap();
    let (t1, s1) = amsgrad_step(&[0.0], &[1.0], &state, 1.0).unwrap();
    let (t2, _) = amsgrad_step(&t1, &[1.0], &s1, 1.0).unwrap();
    let e1 = -0.1 / (0.1 + 1e-8);
    let e2 = e1 - 0.19 / (0.0199f64.sqrt() + 1e-8);
    let trace_err = (t1[0] - e1).abs().max((t2[0] - e2).abs());
    if trace_err > 1e-12 {
        return Err(format!("hand trace off by {trace_err:.2e}: got {t1:?}, {t2:?}"));
    }

    let mut rng = stream(derive_seed(&[11, 0]), 0);
    let sequences = 100_000;
    let mut steps = 0u64;
    for seq in 0..sequences {
        let d = rng.random_range(1..=4usize);
        let cfg = MomentConfig {
            beta1: rng.random_range(0.0..1.0),
            beta2: rng.random_range(0.0..1.0),
            eps: 1e-8,
            raw: rng.random_bool(0.2),
        };
        let mut state = AmsGradState::new(d, cfg).unwrap();
        let mut theta = vec![0.0; d];
        for _ in 0..rng.random_range(1..=12usize) {
            let scale = 10f64.powf(rng.random_range(-6.0..6.0));
            let u: Vec<f64> = (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
            let (next, s) = amsgrad_step(&theta, &u, &state, 0.1).unwrap();
            if s.v.iter().zip(&state.v).any(|(new, old)| new < old) {
                return Err(format!("sequence {seq}: v decreased from {:?} to {:?}", state.v, s.v));
            }
            theta = next;
            state = s;
            steps += 1;
        }
    }
    check(
        true,
        format!("hand trace within {trace_err:.1e}; v non-decreasing over {sequences} sequences ({steps} steps)"),
    )
}

fn criterion_12() -> Outcome {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut summary = Vec::new();
    for (name, overrides) in [
        ("quadratic.toml", vec!["federation.rounds=40".to_string()]),
        ("logreg.toml", vec!["federation.rounds=30".to_string(), "federation.threads=3".to_string()]),
    ] {
        let path = root.join(name);
        let first = simulate(load_config_file(&path, &overrides).map_err(|e| e.to_string())?, &overrides)
            .map_err(|e| e.to_string())?;
        let files = first.write(Some(dir.path())).map_err(|e| e.to_string())?;
        let again = simulate(load_config_file(&path, &overrides).map_err(|e| e.to_string())?, &overrides)
            .map_err(|e| e.to_string())?;
        // Replay from the written manifest.
        let replay = simulate(load_config_file(&files.manifest, &[]).map_err(|e| e.to_string())?, &overrides)
            .map_err(|e| e.to_string())?;
        let out = tempfile::tempdir().map_err(|e| e.to_string())?;
        let replay_files = replay.write(Some(out.path())).map_err(|e| e.to_string())?;
        let read = |p: &std::path::Path| std::fs::read(p).map_err(|e| e.to_string());
        let identical = first.csv == again.csv
            && first.manifest == again.manifest
            && read(&files.csv)? == read(&replay_files.csv)?
            && read(&files.manifest)? == read(&replay_files.manifest)?;
        if !identical {
            return Err(format!("{name}: repeated runs differ"));
        }
        summary.push(format!("{name} ({} bytes csv)", first.csv.len()));
    }
    check(true, format!("byte-identical reruns and manifest replays: {}", summary.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("calibration table, vision setting", criterion_1),
        ("calibration table, language setting", criterion_2),
        ("baseline epsilon table", criterion_3),
        ("noise advantage at matched epsilon", criterion_4),
        ("divergence exactness and upper bound", criterion_5),
        ("f_alpha monotonicity", criterion_6),
        ("SGM output covariance", criterion_7),
        ("sketch unbiasedness and JL concentration", criterion_8),
        ("identity/no-noise run equals FedAvg", criterion_9),
        ("convergence smoke test", criterion_10),
        ("AMSGrad invariant and hand trace", criterion_11),
        ("determinism", criterion_12),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name} ... PASS ({detail}) [{secs:.2}s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name} ... FAIL ({detail}) [{secs:.2}s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
