//! Fed-SGM simulation: client sampling, local SGD, clipping, sketching with
//! noise, fixed-order aggregation, desketching and a server optimizer step.
//! A centralized per-example variant (DP-SGD with a sketched mechanism) is
//! provided by [`run_central_sgm`].
//!
//! The server never sees raw client updates: [`server_round`] only accepts
//! [`SketchedUpdate`]s, which can only be produced by [`client_privatize`].

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::accountant::{self, AccountantParams};
use crate::error::{Error, Result};
use crate::linalg;
use crate::mechanism::{clip_with_activation, sgm_apply, MechanismConfig};
use crate::optim::{GlobalOptimizer, MomentConfig};
use crate::seeding::{self, Purpose};
use crate::sketch::{Compressor, SketchMatrix, SketchSpec};
use crate::tasks::{Partition, Task};

/// Environment variable capping the number of worker threads used for clients.
pub const THREADS_ENV: &str = "FED_SGM_THREADS";

/// Gradient norms are computed on the full dataset up to this dimension.
pub const EXACT_GRAD_MAX_DIM: usize = 10_000;
/// ... and up to this many `n·d` scalar operations per evaluation.
pub const EXACT_GRAD_MAX_WORK: usize = 50_000_000;
/// Size of the fixed probe batch used otherwise.
pub const PROBE_BATCH: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CompressorKind {
    /// No sketching; Fed-SGM then coincides with (DP-)FedAvg.
    Identity,
    Gaussian { b: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    Amsgrad(MomentConfig),
    Adam(MomentConfig),
}

impl OptimizerKind {
    pub fn build(&self, d: usize, eta_global: f64) -> Result<GlobalOptimizer> {
        match self {
            Self::Gd => GlobalOptimizer::gd(eta_global),
            Self::Amsgrad(m) => GlobalOptimizer::amsgrad(d, eta_global, *m),
            Self::Adam(m) => GlobalOptimizer::adam(d, eta_global, *m),
        }
    }
}

/// Hyperparameters of a Fed-SGM run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FedConfig {
    /// Total clients `C`.
    pub clients: usize,
    /// Clients per round `N`.
    pub clients_per_round: usize,
    /// Local steps `K`.
    pub local_steps: usize,
    /// Rounds `T`.
    pub rounds: u64,
    pub eta_local: f64,
    pub eta_global: f64,
    pub batch_size: usize,
    pub mechanism: MechanismConfig,
    pub compressor: CompressorKind,
    pub optimizer: OptimizerKind,
    pub master_seed: u64,
    /// Failure probability used for the per-round `ε` ledger.
    pub delta: f64,
    /// Worker threads; `None` defers to `FED_SGM_THREADS`, then to rayon's default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.clients == 0 || self.clients_per_round == 0 || self.clients_per_round > self.clients {
            return bad(format!(
                "need 1 <= N <= C, got N = {}, C = {}",
                self.clients_per_round, self.clients
            ));
        }
        if self.local_steps == 0 {
            return bad("local steps K must be >= 1".into());
        }
        if self.rounds == 0 {
            return bad("rounds T must be >= 1".into());
        }
        for (name, v) in [("eta_local", self.eta_local), ("eta_global", self.eta_global)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and > 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if let CompressorKind::Gaussian { b: 0 } = self.compressor {
            return bad("sketch dimension b must be >= 1".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta must lie in (0, 1), got {}", self.delta));
        }
        if self.threads == Some(0) {
            return bad("threads must be >= 1".into());
        }
        self.mechanism.validate()
    }

    /// Client sampling ratio `q = N/C`.
    pub fn q(&self) -> f64 {
        self.clients_per_round as f64 / self.clients as f64
    }

    /// Accountant view of the run after `rounds` rounds, or the reason no
    /// finite guarantee exists.
    pub fn accountant_params(&self, rounds: u64) -> std::result::Result<AccountantParams, String> {
        privacy_params(self.q(), rounds, &self.mechanism, self.compressor)
    }

    pub fn sketch_dim(&self, d: usize) -> usize {
        match self.compressor {
            CompressorKind::Identity => d,
            CompressorKind::Gaussian { b } => b,
        }
    }
}

fn privacy_params(
    q: f64,
    rounds: u64,
    mech: &MechanismConfig,
    compressor: CompressorKind,
) -> std::result::Result<AccountantParams, String> {
    let b = match compressor {
        CompressorKind::Identity => {
            return Err("identity compressor: the sketched accountant does not apply".into())
        }
        CompressorKind::Gaussian { b } => b,
    };
    if !mech.tau.is_finite() {
        return Err("clipping disabled (tau = inf): no sensitivity bound".into());
    }
    if mech.sigma_g <= 0.0 {
        return Err("sigma_g = 0: no noise is added".into());
    }
    Ok(AccountantParams {
        q,
        rounds,
        tau: mech.tau,
        b,
        sigma_g: mech.sigma_g,
    })
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundRecord {
    /// `0` is the initial point; round `t` is measured after `t` updates.
    pub round: u64,
    pub selected_clients: Vec<usize>,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_metric: f64,
    pub clip_activation_rate: f64,
    pub epsilon_spent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutput {
    pub initial: RoundRecord,
    /// One record per round, `1..=T`.
    pub records: Vec<RoundRecord>,
    pub final_theta: Vec<f64>,
    pub warnings: Vec<String>,
    /// True when loss and gradient norm come from a probe batch.
    pub metrics_are_estimates: bool,
}

impl RunOutput {
    /// Initial record followed by the per-round records.
    pub fn all_records(&self) -> impl Iterator<Item = &RoundRecord> {
        std::iter::once(&self.initial).chain(&self.records)
    }
}

/// A client's contribution in sketch space. Constructed only by
/// [`client_privatize`], so the server cannot be handed raw updates.
#[derive(Debug, Clone, PartialEq)]
pub struct SketchedUpdate {
    client: usize,
    payload: Vec<f64>,
}

impl SketchedUpdate {
    pub fn client(&self) -> usize {
        self.client
    }

    pub fn payload(&self) -> &[f64] {
        &self.payload
    }
}

/// Uniform size-`N` subset of `0..C`, sorted, deterministic in `(seed, round)`.
pub fn client_sampler(clients: usize, per_round: usize, round: u64, master_seed: u64) -> Result<Vec<usize>> {
    if per_round == 0 || per_round > clients {
        return Err(Error::Config(format!(
            "cannot sample {per_round} of {clients} clients"
        )));
    }
    if per_round == clients {
        return Ok((0..clients).collect());
    }
    let mut rng = seeding::purpose_stream(Purpose::Sampling, master_seed, round, 0);
    let mut ids = rand::seq::index::sample(&mut rng, clients, per_round).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `K` local SGD steps from `theta`; returns `Δ = θ − θ_K`.
///
/// Minibatches are drawn without replacement from a per-round shuffle of the
/// client's data; a new shuffle starts when the current one is exhausted.
/// When `batch_size` covers the whole shard every step is full-batch.
pub fn client_local_update(
    task: &dyn Task,
    theta: &[f64],
    shard: &[usize],
    local_steps: usize,
    eta_local: f64,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::Config("client has no data".into()));
    }
    if local_steps == 0 {
        return Err(Error::Config("local steps K must be >= 1".into()));
    }
    linalg::check_len(theta, task.dim())?;
    let mut local = theta.to_vec();
    if batch_size >= shard.len() {
        for _ in 0..local_steps {
            let g = task.grad(&local, shard);
            linalg::axpy(-eta_local, &g, &mut local);
        }
    } else {
        let mut order = shard.to_vec();
        order.shuffle(rng);
        let mut pos = 0;
        for _ in 0..local_steps {
            if pos + batch_size > order.len() {
                order.shuffle(rng);
                pos = 0;
            }
            let g = task.grad(&local, &order[pos..pos + batch_size]);
            linalg::axpy(-eta_local, &g, &mut local);
            pos += batch_size;
        }
    }
    Ok(linalg::sub(theta, &local))
}

/// `η_local · (R·clip(Δ/η_local, τ) + z)`, with the clip-activation flag.
///
/// Computed as `R·clip(Δ, η_local·τ) + η_local·z`, which is the same map and
/// returns `Δ` unchanged when nothing is clipped, sketched or noised.
pub fn client_privatize(
    client: usize,
    delta: &[f64],
    eta_local: f64,
    mech: &MechanismConfig,
    compressor: &Compressor,
    rng: &mut ChaCha8Rng,
) -> Result<(SketchedUpdate, bool)> {
    if !(eta_local > 0.0) {
        return Err(Error::Config(format!("eta_local must be > 0, got {eta_local}")));
    }
    linalg::check_len(delta, compressor.input_dim())?;
    let (clipped, active) = clip_with_activation(delta, eta_local * mech.tau);
    let payload = sgm_apply(&clipped, compressor, eta_local * mech.sigma_g, rng)?;
    Ok((SketchedUpdate { client, payload }, active))
}

/// Averages the updates in client-id order, desketches, and applies the
/// optimizer to `theta` in place.
pub fn server_round(
    theta: &mut Vec<f64>,
    updates: &[SketchedUpdate],
    expected: usize,
    compressor: &Compressor,
    optimizer: &mut GlobalOptimizer,
) -> Result<()> {
    if updates.len() != expected || expected == 0 {
        return Err(Error::Contract(format!(
            "expected {expected} client updates, received {}",
            updates.len()
        )));
    }
    let mut ordered: Vec<&SketchedUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client);
    if ordered.windows(2).any(|w| w[0].client == w[1].client) {
        return Err(Error::Contract("duplicate client update".into()));
    }
    let b = compressor.output_dim();
    let mut mean = vec![0.0; b];
    for u in ordered {
        linalg::check_len(&u.payload, b)?;
        linalg::axpy(1.0, &u.payload, &mut mean);
    }
    linalg::scale(&mut mean, 1.0 / expected as f64);
    let direction = compressor.decompress(&mean)?;
    optimizer.step(theta, &direction)
}

fn round_compressor(kind: CompressorKind, master_seed: u64, round: u64, d: usize) -> Result<Compressor> {
    Ok(match kind {
        CompressorKind::Identity => Compressor::Identity { d },
        CompressorKind::Gaussian { b } => {
            Compressor::Gaussian(SketchMatrix::auto(SketchSpec::for_round(master_seed, round, b, d)?))
        }
    })
}

fn resolve_threads(requested: Option<usize>) -> Result<Option<usize>> {
    if requested.is_some() {
        return Ok(requested);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn thread_pool(requested: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = resolve_threads(requested)? {
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Resource(format!("cannot start worker threads: {e}")))
}

/// Evaluates loss, gradient norm and test metric, on a probe batch for large problems.
struct Evaluator {
    probe: Option<Vec<usize>>,
}

impl Evaluator {
    fn new(task: &dyn Task, master_seed: u64) -> Self {
        let (n, d) = (task.num_samples(), task.dim());
        let exact = d <= EXACT_GRAD_MAX_DIM && n.saturating_mul(d) <= EXACT_GRAD_MAX_WORK;
        let probe = (!exact).then(|| {
            let mut rng = seeding::purpose_stream(Purpose::Probe, master_seed, 0, 0);
            let mut idx = rand::seq::index::sample(&mut rng, n, PROBE_BATCH.min(n)).into_vec();
            idx.sort_unstable();
            idx
        });
        Self { probe }
    }

    fn record(&self, task: &dyn Task, theta: &[f64], round: u64) -> RoundRecord {
        let (train_loss, grad) = match &self.probe {
            None => (task.full_loss(theta), task.full_grad(theta)),
            Some(idx) => (task.loss(theta, idx), task.grad(theta, idx)),
        };
        RoundRecord {
            round,
            selected_clients: Vec::new(),
            train_loss,
            grad_norm_sq: linalg::norm_sq(&grad),
            test_metric: task.test_metric(theta),
            clip_activation_rate: 0.0,
            epsilon_spent: 0.0,
        }
    }
}

/// Tracks `ε` spent after each round, or `∞` with a single warning.
struct Ledger {
    q: f64,
    delta: f64,
    params: std::result::Result<AccountantParams, String>,
}

impl Ledger {
    fn new(
        q: f64,
        delta: f64,
        mech: &MechanismConfig,
        compressor: CompressorKind,
        warnings: &mut Vec<String>,
    ) -> Self {
        let mut params = privacy_params(q, 1, mech, compressor);
        if let Ok(p) = params {
            if !p.regime_ok() {
                let msg = Error::Regime { ratio: p.regime_ratio() }.to_string();
                params = Err(msg);
            }
        }
        if let Err(reason) = &params {
            warnings.push(format!("privacy guarantee is vacuous (epsilon = inf): {reason}"));
        }
        Self { q, delta, params }
    }

    fn spent(&self, rounds: u64, warnings: &mut Vec<String>) -> f64 {
        let Ok(p) = self.params else {
            return f64::INFINITY;
        };
        match accountant::sgm_epsilon(AccountantParams { rounds, q: self.q, ..p }, self.delta) {
            Ok(e) => e,
            Err(e) => {
                let msg = format!("accountant failed after {rounds} rounds: {e}; epsilon = inf");
                if !warnings.contains(&msg) {
                    warnings.push(msg);
                }
                f64::INFINITY
            }
        }
    }
}

/// Runs `T` rounds of Fed-SGM on `task` with the given client partition.
pub fn run_federation(cfg: &FedConfig, task: &dyn Task, partition: &Partition) -> Result<RunOutput> {
    cfg.validate()?;
    if partition.num_clients() != cfg.clients {
        return Err(Error::Config(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            cfg.clients
        )));
    }
    if let Some(c) = partition.clients.iter().position(Vec::is_empty) {
        return Err(Error::Config(format!("client {c} has no data")));
    }
    let d = task.dim();
    let pool = thread_pool(cfg.threads)?;
    let mut warnings = Vec::new();
    let ledger = Ledger::new(cfg.q(), cfg.delta, &cfg.mechanism, cfg.compressor, &mut warnings);
    let evaluator = Evaluator::new(task, cfg.master_seed);
    let mut optimizer = cfg.optimizer.build(d, cfg.eta_global)?;
    let mut theta = task.initial_point();
    linalg::check_len(&theta, d)?;

    let initial = evaluator.record(task, &theta, 0);
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        let selected = client_sampler(cfg.clients, cfg.clients_per_round, round, cfg.master_seed)?;
        let compressor = round_compressor(cfg.compressor, cfg.master_seed, round, d)?;
        let theta_t = &theta;
        let results: Vec<Result<(SketchedUpdate, bool)>> = pool.install(|| {
            selected
                .par_iter()
                .map(|&c| {
                    let mut batch_rng =
                        seeding::purpose_stream(Purpose::LocalBatches, cfg.master_seed, round, c as u64);
                    let delta = client_local_update(
                        task,
                        theta_t,
                        &partition.clients[c],
                        cfg.local_steps,
                        cfg.eta_local,
                        cfg.batch_size,
                        &mut batch_rng,
                    )?;
                    let mut noise_rng = cfg.mechanism.noise_stream(c, round);
                    client_privatize(c, &delta, cfg.eta_local, &cfg.mechanism, &compressor, &mut noise_rng)
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(results.len());
        let mut clipped = 0usize;
        for r in results {
            let (u, active) = r?;
            clipped += usize::from(active);
            updates.push(u);
        }
        server_round(&mut theta, &updates, cfg.clients_per_round, &compressor, &mut optimizer)?;

        let mut rec = evaluator.record(task, &theta, round + 1);
        rec.selected_clients = selected;
        rec.clip_activation_rate = clipped as f64 / cfg.clients_per_round as f64;
        rec.epsilon_spent = ledger.spent(round + 1, &mut warnings);
        records.push(rec);
    }
    Ok(RunOutput {
        initial,
        records,
        final_theta: theta,
        warnings,
        metrics_are_estimates: evaluator.probe.is_some(),
    })
}

/// Centralized training with per-example clipping and the sketched mechanism.
///
/// Each round draws `batch_size` examples without replacement from the whole
/// dataset (`q = m/n`), clips each example gradient to `τ`, applies
/// `SG(·; R_t, ξ_{t,i})` with a fresh noise draw per example, averages in
/// batch order, desketches and calls the optimizer with `eta_global`.
/// Client-count, local-step and `eta_local` settings are ignored.
pub fn run_central_sgm(cfg: &FedConfig, task: &dyn Task) -> Result<RunOutput> {
    cfg.validate()?;
    let (n, d) = (task.num_samples(), task.dim());
    if n == 0 {
        return Err(Error::Config("dataset is empty".into()));
    }
    let m = cfg.batch_size.min(n);
    let mut warnings = Vec::new();
    let ledger = Ledger::new(m as f64 / n as f64, cfg.delta, &cfg.mechanism, cfg.compressor, &mut warnings);
    let evaluator = Evaluator::new(task, cfg.master_seed);
    let mut optimizer = cfg.optimizer.build(d, cfg.eta_global)?;
    let mut theta = task.initial_point();
    linalg::check_len(&theta, d)?;
    let pool = thread_pool(cfg.threads)?;
    let all: Vec<usize> = (0..n).collect();

    let initial = evaluator.record(task, &theta, 0);
    let mut records = Vec::with_capacity(cfg.rounds as usize);
    for round in 0..cfg.rounds {
        let compressor = round_compressor(cfg.compressor, cfg.master_seed, round, d)?;
        let mut rng = seeding::purpose_stream(Purpose::LocalBatches, cfg.master_seed, round, 0);
        let batch: Vec<usize> = if m == n {
            all.clone()
        } else {
            let mut order = all.clone();
            order.shuffle(&mut rng);
            order.truncate(m);
            order
        };
        let theta_t = &theta;
        let results: Vec<Result<(SketchedUpdate, bool)>> = pool.install(|| {
            batch
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| {
                    let g = task.grad(theta_t, &[i]);
                    let mut noise_rng = cfg.mechanism.noise_stream(slot, round);
                    client_privatize(slot, &g, 1.0, &cfg.mechanism, &compressor, &mut noise_rng)
                })
                .collect()
        });
        let mut updates = Vec::with_capacity(m);
        let mut clipped = 0usize;
        for r in results {
            let (u, active) = r?;
            clipped += usize::from(active);
            updates.push(u);
        }
        server_round(&mut theta, &updates, m, &compressor, &mut optimizer)?;

        let mut rec = evaluator.record(task, &theta, round + 1);
        rec.selected_clients = batch;
        rec.clip_activation_rate = clipped as f64 / m as f64;
        rec.epsilon_spent = ledger.spent(round + 1, &mut warnings);
        records.push(rec);
    }
    Ok(RunOutput {
        initial,
        records,
        final_theta: theta,
        warnings,
        metrics_are_estimates: evaluator.probe.is_some(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{make_quadratic, LogRegSpec, LogRegTask, PartitionMode, QuadraticSpec, QuadraticTask};

    fn base_cfg() -> FedConfig {
        FedConfig {
            clients: 4,
            clients_per_round: 4,
            local_steps: 1,
            rounds: 10,
            eta_local: 0.1,
            eta_global: 1.0,
            batch_size: usize::MAX,
            mechanism: MechanismConfig::new(f64::INFINITY, 0.0, 7).unwrap(),
            compressor: CompressorKind::Identity,
            optimizer: OptimizerKind::Gd,
            master_seed: 3,
            delta: 1e-5,
            threads: Some(2),
        }
    }

    #[test]
    fn local_update_examples() {
        let task = make_quadratic(&[1.0, 2.0], 1).unwrap();
        let mut rng = seeding::stream(0, 0);
        let theta = vec![1.0, -1.0];
        let g = task.full_grad(&theta);
        let delta = client_local_update(&task, &theta, &[0], 1, 0.3, 10, &mut rng).unwrap();
        for i in 0..2 {
            assert!((delta[i] - 0.3 * g[i]).abs() < 1e-15);
        }
        let zero = client_local_update(&task, &theta, &[0], 3, 0.0, 10, &mut rng).unwrap();
        assert_eq!(zero, vec![0.0, 0.0]);
        assert!(client_local_update(&task, &theta, &[], 1, 0.1, 1, &mut rng).is_err());
    }

    #[test]
    fn local_update_two_step_trace() {
        // L(θ) = ½θᵀ diag(1,2) θ: step k multiplies coordinate i by (1 − η a_i).
        // θ₀ = (1,1), η = 0.1 → θ₂ = (0.81, 0.64), Δ = (0.19, 0.36).
        let task = QuadraticTask::new(QuadraticSpec {
            eigenvalues: vec![1.0, 2.0],
            samples: 1,
            spread: 0.0,
            init_radius: 1.0,
            seed: 0,
        })
        .unwrap();
        let h = task.hessian_matrix();
        let opt = task.optimum().to_vec();
        // Shift so the minimizer is the origin, and rotate into the eigenbasis.
        let eig = nalgebra::SymmetricEigen::new(h.clone());
        let order: Vec<usize> = if eig.eigenvalues[0] < eig.eigenvalues[1] { vec![0, 1] } else { vec![1, 0] };
        let basis: Vec<Vec<f64>> = order.iter().map(|&j| eig.eigenvectors.column(j).iter().copied().collect()).collect();
        let theta: Vec<f64> = (0..2).map(|i| opt[i] + basis[0][i] + basis[1][i]).collect();
        let mut rng = seeding::stream(0, 0);
        let delta = client_local_update(&task, &theta, &[0], 2, 0.1, 1, &mut rng).unwrap();
        let coords = [linalg::dot(&delta, &basis[0]), linalg::dot(&delta, &basis[1])];
        assert!((coords[0] - 0.19).abs() < 1e-12, "{coords:?}");
        assert!((coords[1] - 0.36).abs() < 1e-12, "{coords:?}");
    }

    #[test]
    fn privatize_examples() {
        let comp = Compressor::Identity { d: 3 };
        let mut rng = seeding::stream(0, 0);
        let mech = MechanismConfig::new(1.0, 0.0, 0).unwrap();
        let delta = vec![0.01, -0.02, 0.015];
        let (u, active) = client_privatize(0, &delta, 0.1, &mech, &comp, &mut rng).unwrap();
        assert_eq!(u.payload(), &delta[..]);
        assert!(!active);

        let big = vec![0.2, 0.0, 0.0]; // ‖Δ/η‖ = 2τ
        let (u, active) = client_privatize(0, &big, 0.1, &mech, &comp, &mut rng).unwrap();
        assert!(active);
        assert!((linalg::norm(u.payload()) - 0.1).abs() < 1e-15);
        assert!(client_privatize(0, &big, 0.0, &mech, &comp, &mut rng).is_err());
        assert!(matches!(
            client_privatize(0, &[1.0], 0.1, &mech, &comp, &mut rng),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn upd(client: usize, payload: Vec<f64>) -> SketchedUpdate {
        SketchedUpdate { client, payload }
    }

    #[test]
    fn server_round_contract() {
        let comp = Compressor::Identity { d: 2 };
        let mut opt = GlobalOptimizer::gd(0.5).unwrap();
        let mut theta = vec![1.0, 2.0];
        server_round(&mut theta, &[upd(0, vec![0.0; 2]), upd(1, vec![0.0; 2])], 2, &comp, &mut opt).unwrap();
        assert_eq!(theta, vec![1.0, 2.0]);
        server_round(&mut theta, &[upd(3, vec![0.2, -0.4])], 1, &comp, &mut opt).unwrap();
        assert_eq!(theta, vec![0.9, 2.2]);
        let err = server_round(&mut theta, &[upd(0, vec![0.0; 2])], 2, &comp, &mut opt);
        assert!(matches!(err, Err(Error::Contract(_))));
        let err = server_round(&mut theta, &[upd(0, vec![0.0; 2]), upd(0, vec![0.0; 2])], 2, &comp, &mut opt);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn server_aggregation_is_order_independent() {
        let mut rng = seeding::stream(11, 0);
        let comp = Compressor::Gaussian(SketchMatrix::auto(SketchSpec::new(1, 8, 20).unwrap()));
        let updates: Vec<SketchedUpdate> = (0..7)
            .map(|c| {
                let p: Vec<f64> = (0..8).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
                upd(c, p)
            })
            .collect();
        let mut reference = None;
        for perm_seed in 0..5 {
            let mut shuffled = updates.clone();
            shuffled.shuffle(&mut seeding::stream(perm_seed, 1));
            let mut opt = GlobalOptimizer::gd(0.3).unwrap();
            let mut theta = vec![0.5; 20];
            server_round(&mut theta, &shuffled, 7, &comp, &mut opt).unwrap();
            match &reference {
                None => reference = Some(theta),
                Some(r) => assert_eq!(r, &theta),
            }
        }
    }

    #[test]
    fn sampler_properties() {
        assert_eq!(client_sampler(5, 5, 3, 1).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(client_sampler(5, 6, 0, 1).is_err());
        let a = client_sampler(1000, 10, 0, 1).unwrap();
        assert_eq!(a, client_sampler(1000, 10, 0, 1).unwrap());
        assert_ne!(a, client_sampler(1000, 10, 0, 2).unwrap());
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn sampler_is_uniform() {
        let (c, n, rounds) = (20usize, 5usize, 100_000u64);
        let mut counts = vec![0u64; c];
        for r in 0..rounds {
            for id in client_sampler(c, n, r, 42).unwrap() {
                counts[id] += 1;
            }
        }
        let p = n as f64 / c as f64;
        let se = (rounds as f64 * p * (1.0 - p)).sqrt();
        for k in counts {
            assert!((k as f64 - rounds as f64 * p).abs() <= 3.0 * se + 1.0, "{k}");
        }
    }

    #[test]
    fn plain_fedavg_matches_gradient_descent() {
        let task = LogRegTask::new(&LogRegSpec { n: 80, d: 5, seed: 2, ..LogRegSpec::default() }).unwrap();
        let part = Partition::iid(80, 4, 0);
        let cfg = base_cfg();
        let out = run_federation(&cfg, &task, &part).unwrap();
        // FedAvg with K=1 full-batch over equal shards is GD with step η_local·η_global.
        let mut theta = task.initial_point();
        for rec in &out.records {
            let g = task.full_grad(&theta);
            linalg::axpy(-cfg.eta_local * cfg.eta_global, &g, &mut theta);
            let loss = task.full_loss(&theta);
            assert!((rec.train_loss - loss).abs() <= 1e-12 * loss.abs());
            assert!(rec.epsilon_spent.is_infinite());
            assert_eq!(rec.clip_activation_rate, 0.0);
        }
        for i in 0..5 {
            assert!((out.final_theta[i] - theta[i]).abs() <= 1e-12 * theta[i].abs().max(1e-3));
        }
        assert!(!out.warnings.is_empty());
    }

    #[test]
    fn sketched_convergence_without_noise() {
        let eig: Vec<f64> = (0..20).map(|i| 1.0 - 0.04 * i as f64).collect();
        let task = QuadraticTask::new(QuadraticSpec {
            eigenvalues: eig,
            samples: 8,
            spread: 0.0,
            init_radius: 3.0,
            seed: 5,
        })
        .unwrap();
        let part = Partition::iid(8, 4, 1);
        let cfg = FedConfig {
            rounds: 200,
            eta_local: 0.5,
            eta_global: 1.0,
            mechanism: MechanismConfig::new(1e6, 0.0, 1).unwrap(),
            compressor: CompressorKind::Gaussian { b: 10 },
            ..base_cfg()
        };
        let out = run_federation(&cfg, &task, &part).unwrap();
        let last = out.records.last().unwrap();
        assert!(last.grad_norm_sq <= 1e-3 * out.initial.grad_norm_sq, "{}", last.grad_norm_sq);
    }

    #[test]
    fn runs_are_deterministic_and_schedule_independent() {
        let task = LogRegTask::new(&LogRegSpec { n: 200, d: 8, seed: 4, ..LogRegSpec::default() }).unwrap();
        let part = Partition::new(200, 10, PartitionMode::LabelSkew { concentration: 0.5 }, task.labels(), 2).unwrap();
        let cfg = FedConfig {
            clients: 10,
            clients_per_round: 4,
            local_steps: 3,
            rounds: 8,
            batch_size: 5,
            mechanism: MechanismConfig::new(0.5, 0.3, 9).unwrap(),
            compressor: CompressorKind::Gaussian { b: 4 },
            optimizer: OptimizerKind::Amsgrad(MomentConfig::default()),
            eta_global: 0.05,
            ..base_cfg()
        };
        let a = run_federation(&cfg, &task, &part).unwrap();
        let b = run_federation(&FedConfig { threads: Some(1), ..cfg.clone() }, &task, &part).unwrap();
        assert_eq!(a, b);
        let c = run_federation(&FedConfig { master_seed: 99, ..cfg.clone() }, &task, &part).unwrap();
        assert_ne!(a.final_theta, c.final_theta);
    }

    #[test]
    fn epsilon_ledger_matches_accountant() {
        let task = make_quadratic(&[1.0; 6], 2).unwrap();
        let part = Partition::iid(1, 1, 0);
        let cfg = FedConfig {
            clients: 1,
            clients_per_round: 1,
            rounds: 12,
            mechanism: MechanismConfig::new(1.0, 2.0, 0).unwrap(),
            compressor: CompressorKind::Gaussian { b: 4 },
            ..base_cfg()
        };
        let out = run_federation(&cfg, &task, &part).unwrap();
        let mut last = 0.0;
        for r in &out.records {
            assert!(r.epsilon_spent >= last);
            last = r.epsilon_spent;
        }
        let params = cfg.accountant_params(12).unwrap();
        assert_eq!(last, accountant::sgm_epsilon(params, cfg.delta).unwrap());
        assert!(out.warnings.is_empty());
    }

    #[test]
    fn regime_violation_warns_and_continues() {
        let task = make_quadratic(&[1.0; 6], 2).unwrap();
        let part = Partition::iid(1, 1, 0);
        let cfg = FedConfig {
            clients: 1,
            clients_per_round: 1,
            rounds: 3,
            mechanism: MechanismConfig::new(10.0, 0.1, 0).unwrap(),
            compressor: CompressorKind::Gaussian { b: 4 },
            ..base_cfg()
        };
        let out = run_federation(&cfg, &task, &part).unwrap();
        assert_eq!(out.records.len(), 3);
        assert!(out.records.iter().all(|r| r.epsilon_spent.is_infinite()));
        assert!(out.warnings.iter().any(|w| w.contains("regime")), "{:?}", out.warnings);
    }

    #[test]
    fn clip_rate_extremes() {
        let task = LogRegTask::new(&LogRegSpec { n: 100, d: 4, seed: 6, ..LogRegSpec::default() }).unwrap();
        let part = Partition::iid(100, 5, 0);
        let cfg = FedConfig {
            clients: 5,
            clients_per_round: 5,
            local_steps: 2,
            rounds: 4,
            mechanism: MechanismConfig::new(1e-9, 0.0, 0).unwrap(),
            ..base_cfg()
        };
        let out = run_federation(&cfg, &task, &part).unwrap();
        assert!(out.records.iter().all(|r| r.clip_activation_rate == 1.0));
        // logistic gradients have norm ≤ max‖x‖ + l2‖θ‖, far below 100 here
        let cfg = FedConfig { mechanism: MechanismConfig::new(100.0, 0.0, 0).unwrap(), ..cfg };
        let out = run_federation(&cfg, &task, &part).unwrap();
        assert!(out.records.iter().all(|r| r.clip_activation_rate == 0.0));
    }

    #[test]
    fn central_single_example_matches_single_client_federation() {
        let task = LogRegTask::new(&LogRegSpec { n: 50, d: 6, seed: 8, ..LogRegSpec::default() }).unwrap();
        let single = Partition { clients: vec![(0..50).collect()], mode: PartitionMode::Iid };
        let cfg = FedConfig {
            clients: 1,
            clients_per_round: 1,
            local_steps: 1,
            rounds: 15,
            eta_local: 1.0,
            eta_global: 0.2,
            batch_size: 1,
            mechanism: MechanismConfig::new(0.5, 0.4, 3).unwrap(),
            compressor: CompressorKind::Gaussian { b: 3 },
            ..base_cfg()
        };
        let fed = run_federation(&cfg, &task, &single).unwrap();
        let central = run_central_sgm(&cfg, &task).unwrap();
        for (a, b) in fed.final_theta.iter().zip(&central.final_theta) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
        for (a, b) in fed.records.iter().zip(&central.records) {
            assert_eq!(a.clip_activation_rate, b.clip_activation_rate);
        }
    }

    #[test]
    fn central_without_privacy_is_minibatch_sgd() {
        let task = LogRegTask::new(&LogRegSpec { n: 40, d: 3, seed: 9, ..LogRegSpec::default() }).unwrap();
        let cfg = FedConfig {
            rounds: 6,
            batch_size: 8,
            eta_global: 0.3,
            ..base_cfg()
        };
        let out = run_central_sgm(&cfg, &task).unwrap();
        let mut theta = task.initial_point();
        for rec in &out.records {
            let batch = &rec.selected_clients;
            let mut g = vec![0.0; 3];
            for &i in batch {
                linalg::axpy(1.0, &task.grad(&theta, &[i]), &mut g);
            }
            linalg::axpy(-0.3 / batch.len() as f64, &g, &mut theta);
        }
        for i in 0..3 {
            assert!((theta[i] - out.final_theta[i]).abs() <= 1e-12 * theta[i].abs().max(1e-6));
        }
    }

    #[test]
    fn config_errors() {
        let task = make_quadratic(&[1.0; 2], 2).unwrap();
        let part = Partition::iid(1, 1, 0);
        for cfg in [
            FedConfig { clients_per_round: 5, ..base_cfg() },
            FedConfig { local_steps: 0, ..base_cfg() },
            FedConfig { eta_local: -1.0, ..base_cfg() },
            FedConfig { compressor: CompressorKind::Gaussian { b: 0 }, ..base_cfg() },
        ] {
            assert!(matches!(run_federation(&cfg, &task, &part), Err(Error::Config(_))));
        }
        // partition size must match C
        assert!(run_federation(&base_cfg(), &task, &part).is_err());
    }
}
