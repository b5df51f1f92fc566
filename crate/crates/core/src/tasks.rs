//! Desk-scale objectives with controllable curvature, client partitions and
//! Hessian-spectrum diagnostics.
//!
//! The analysis of Fed-SGM assumes bounded per-client gradients (`G`),
//! sub-Gaussian minibatch noise (`σ_s`), smoothness, and a Hessian whose
//! absolute intrinsic dimension `I = Σ|λ_i| / max λ_i` is small. The first two
//! are estimated empirically by [`estimate_g_and_sigma_s`]; `I` is computed
//! exactly by [`intrinsic_dimension`] for `d ≤ 500`. Smoothness is left as
//! the largest Hessian eigenvalue and not instrumented separately.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seeding::{self, Purpose};

/// Largest dimension for which an exact Hessian is produced.
pub const EXACT_HESSIAN_MAX_DIM: usize = 500;

/// A differentiable empirical loss `L(θ) = (1/n) Σ ℓ(θ, x_i)`.
///
/// `loss` and `grad` average over the given sample indices.
pub trait Task: Send + Sync {
    fn name(&self) -> &'static str;
    fn dim(&self) -> usize;
    fn num_samples(&self) -> usize;
    fn loss(&self, theta: &[f64], indices: &[usize]) -> f64;
    fn grad(&self, theta: &[f64], indices: &[usize]) -> Vec<f64>;
    /// Hessian of the full-data loss; `None` above [`EXACT_HESSIAN_MAX_DIM`].
    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>>;
    /// `L* = min L`, when known.
    fn minimum_value(&self) -> Option<f64>;
    /// Class labels, for label-skewed partitions.
    fn labels(&self) -> Option<&[usize]> {
        None
    }
    fn initial_point(&self) -> Vec<f64>;
    /// Held-out quality measure (accuracy, or optimality gap for quadratics).
    fn test_metric(&self, theta: &[f64]) -> f64;

    fn full_loss(&self, theta: &[f64]) -> f64 {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.loss(theta, &all)
    }

    fn full_grad(&self, theta: &[f64]) -> Vec<f64> {
        let all: Vec<usize> = (0..self.num_samples()).collect();
        self.grad(theta, &all)
    }
}

// ---------------------------------------------------------------------------
// Quadratic

/// `λ_i = i^{−p}`, `i = 1..=d`.
pub fn power_law_spectrum(d: usize, exponent: f64) -> Vec<f64> {
    (1..=d).map(|i| (i as f64).powf(-exponent)).collect()
}

/// Haar-distributed orthogonal matrix from the QR factorization of a Gaussian matrix.
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Construction parameters for [`QuadraticTask`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub eigenvalues: Vec<f64>,
    /// Number of samples; each carries its own minimizer `c_i`.
    pub samples: usize,
    /// Standard deviation of `c_i` around the common minimizer.
    pub spread: f64,
    /// Distance of the initial point from the minimizer.
    pub init_radius: f64,
    pub seed: u64,
}

/// `ℓ(θ, i) = ½(θ − c_i)ᵀ H (θ − c_i)` with `H = Q Λ Qᵀ`, `Q` random orthogonal.
///
/// The full loss is `½(θ − c̄)ᵀH(θ − c̄) + const`, so its Hessian spectrum is
/// exactly the requested one.
#[derive(Debug, Clone)]
pub struct QuadraticTask {
    eigenvalues: Vec<f64>,
    hessian: DMatrix<f64>,
    /// Row-major `n × d`.
    centers: Vec<f64>,
    mean_center: Vec<f64>,
    /// `½·mean_i (c_i − c̄)ᵀH(c_i − c̄)`.
    offset: f64,
    init: Vec<f64>,
    n: usize,
    d: usize,
}

/// `L(θ) = ½(θ−θ*)ᵀQΛQᵀ(θ−θ*)` with a single sample.
pub fn make_quadratic(eigenvalues: &[f64], seed: u64) -> Result<QuadraticTask> {
    QuadraticTask::new(QuadraticSpec {
        eigenvalues: eigenvalues.to_vec(),
        samples: 1,
        spread: 0.0,
        init_radius: 1.0,
        seed,
    })
}

impl QuadraticTask {
    pub fn new(spec: QuadraticSpec) -> Result<Self> {
        let d = spec.eigenvalues.len();
        if d == 0 {
            return Err(Error::Config("quadratic spectrum is empty".into()));
        }
        if spec.eigenvalues.iter().any(|l| !l.is_finite()) {
            return Err(Error::Config("quadratic spectrum has non-finite entries".into()));
        }
        if !spec.eigenvalues.iter().any(|&l| l > 0.0) {
            return Err(Error::Config(
                "quadratic spectrum needs at least one positive eigenvalue".into(),
            ));
        }
        if spec.samples == 0 {
            return Err(Error::Config("quadratic task needs at least one sample".into()));
        }
        let mut rng = seeding::purpose_stream(Purpose::TaskData, spec.seed, 0, 0);
        let q = random_orthogonal(d, &mut rng);
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&spec.eigenvalues));
        let mut hessian = &q * lambda * q.transpose();
        // exact symmetry
        for i in 0..d {
            for j in 0..i {
                let s = 0.5 * (hessian[(i, j)] + hessian[(j, i)]);
                hessian[(i, j)] = s;
                hessian[(j, i)] = s;
            }
        }

        let optimum: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let mut centers = Vec::with_capacity(spec.samples * d);
        for _ in 0..spec.samples {
            for &o in &optimum {
                let z: f64 = rng.sample(StandardNormal);
                centers.push(o + spec.spread * z);
            }
        }
        let mut direction: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let norm = linalg::norm(&direction);
        linalg::scale(&mut direction, spec.init_radius / norm);

        let mut task = Self {
            eigenvalues: spec.eigenvalues,
            hessian,
            centers,
            mean_center: vec![0.0; d],
            offset: 0.0,
            init: Vec::new(),
            n: spec.samples,
            d,
        };
        let all: Vec<usize> = (0..task.n).collect();
        task.mean_center = task.mean_center_of(&all);
        task.offset = task.spread_term(&all, &task.mean_center.clone());
        task.init = task
            .mean_center
            .iter()
            .zip(&direction)
            .map(|(c, u)| c + u)
            .collect();
        Ok(task)
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    /// Full-data minimizer `c̄`.
    pub fn optimum(&self) -> &[f64] {
        &self.mean_center
    }

    pub fn hessian_matrix(&self) -> &DMatrix<f64> {
        &self.hessian
    }

    fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.d..(i + 1) * self.d]
    }

    fn mean_center_of(&self, indices: &[usize]) -> Vec<f64> {
        let mut c = vec![0.0; self.d];
        for &i in indices {
            linalg::axpy(1.0, self.center(i), &mut c);
        }
        linalg::scale(&mut c, 1.0 / indices.len() as f64);
        c
    }

    fn h_apply(&self, v: &[f64]) -> Vec<f64> {
        (&self.hessian * DVector::from_column_slice(v)).data.into()
    }

    fn quad_form(&self, v: &[f64]) -> f64 {
        linalg::dot(v, &self.h_apply(v))
    }

    fn spread_term(&self, indices: &[usize], mean: &[f64]) -> f64 {
        let total: f64 = indices
            .iter()
            .map(|&i| self.quad_form(&linalg::sub(self.center(i), mean)))
            .sum();
        0.5 * total / indices.len() as f64
    }
}

impl Task for QuadraticTask {
    fn name(&self) -> &'static str {
        "quadratic"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn num_samples(&self) -> usize {
        self.n
    }

    fn loss(&self, theta: &[f64], indices: &[usize]) -> f64 {
        let mean = self.mean_center_of(indices);
        0.5 * self.quad_form(&linalg::sub(theta, &mean)) + self.spread_term(indices, &mean)
    }

    fn grad(&self, theta: &[f64], indices: &[usize]) -> Vec<f64> {
        let mean = self.mean_center_of(indices);
        self.h_apply(&linalg::sub(theta, &mean))
    }

    fn hessian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        (self.d <= EXACT_HESSIAN_MAX_DIM).then(|| self.hessian.clone())
    }

    fn minimum_value(&self) -> Option<f64> {
        self.eigenvalues
            .iter()
            .all(|&l| l >= 0.0)
            .then_some(self.offset)
    }

    fn initial_point(&self) -> Vec<f64> {
        self.init.clone()
    }

    fn test_metric(&self, theta: &[f64]) -> f64 {
        let loss = self.full_loss(theta);
        match self.minimum_value() {
            Some(min) => loss - min,
            None => loss,
        }
    }

    fn full_loss(&self, theta: &[f64]) -> f64 {
        0.5 * self.quad_form(&linalg::sub(theta, &self.mean_center)) + self.offset
    }

    fn full_grad(&self, theta: &[f64]) -> Vec<f64> {
        self.h_apply(&linalg::sub(theta, &self.mean_center))
    }
}

// ---------------------------------------------------------------------------
// Logistic regression

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRegSpec {
    /// Training samples.
    pub n: usize,
    pub d: usize,
    /// Held-out samples for the test metric.
    pub test_samples: usize,
    /// Std of the Gaussian perturbation added to the true margin before labeling.
    pub label_noise: f64,
    /// Ridge penalty `½λ‖θ‖²`.
    pub l2: f64,
    pub seed: u64,
}

impl Default for LogRegSpec {
    fn default() -> Self {
        Self {
            n: 1000,
            d: 20,
            test_samples: 500,
            label_noise: 0.05,
            l2: 1e-3,
            seed: 0,
        }
    }
}

/// Binary logistic regression on synthetic Gaussian features whose labels
/// follow a random hyperplane, up to margin noise.
#[derive(Debug, Clone)]
pub struct LogRegTask {
    features: Vec<f64>,
    labels: Vec<usize>,
    test_features: Vec<f64>,
    test_labels: Vec<usize>,
    l2: f64,
    d: usize,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^{−z})` without overflow.
fn log1p_exp_neg(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

impl LogRegTask {
    pub fn new(spec: &LogRegSpec) -> Result<Self> {
        if spec.n == 0 || spec.d == 0 {
            return Err(Error::Config("logistic task needs n >= 1 and d >= 1".into()));
        }
        let mut rng = seeding::purpose_stream(Purpose::TaskData, spec.seed, 1, 0);
        let w: Vec<f64> = (0..spec.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let w_norm = linalg::norm(&w);
        let mut draw = |count: usize| {
            let mut xs = Vec::with_capacity(count * spec.d);
            let mut ys = Vec::with_capacity(count);
            for _ in 0..count {
                let x: Vec<f64> = (0..spec.d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let z: f64 = rng.sample(StandardNormal);
                let margin = linalg::dot(&w, &x) / w_norm + spec.label_noise * z;
                ys.push(usize::from(margin > 0.0));
                xs.extend(x);
            }
            (xs, ys)
        };
        let (features, labels) = draw(spec.n);
        let (test_features, test_labels) = draw(spec.test_samples);
        Ok(Self {
            features,
            labels,
            test_features,
            test_labels,
            l2: spec.l2,
            d: spec.d,
        })
    }

    /// Rebuilds a task from stored columns (see [`LogRegTask::to_columns`]).
    pub fn from_parts(features: Vec<f64>, labels: Vec<usize>, d: usize, l2: f64) -> Result<Self> {
        if d == 0 || features.len() != labels.len() * d {
            return Err(Error::Config("feature matrix does not match labels".into()));
        }
        Ok(Self {
            features,
            labels,
            test_features: Vec::new(),
            test_labels: Vec::new(),
            l2,
            d,
        })
    }

    fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.d..(i + 1) * self.d]
    }

    fn signed(label: usize) -> f64 {
        if label == 1 {
            1.0
        } else {
            -1.0
        }
    }

    fn accuracy_on(features: &[f64], labels: &[usize], d: usize, theta: &[f64]) -> f64 {
        if labels.is_empty() {
            return f64::NAN;
        }
        let correct = labels
            .iter()
            .enumerate()
            .filter(|(i, &y)| {
                let z = linalg::dot(&features[i * d..(i + 1) * d], theta);
                usize::from(z > 0.0) == y
            })
            .count();
        correct as f64 / labels.len() as f64
    }

    pub fn train_accuracy(&self, theta: &[f64]) -> f64 {
        Self::accuracy_on(&self.features, &self.labels, self.d, theta)
    }

    /// Snapshot as a column file: `label,x0,...,x{d-1}` per sample.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("label");
        for j in 0..self.d {
            let _ = write!(out, ",x{j}");
        }
        out.push('\n');
        for (i, y) in self.labels.iter().enumerate() {
            let _ = write!(out, "{y}");
            for v in self.x(i) {
                let _ = write!(out, ",{}", crate::numfmt::fmt_f64(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_columns(text: &str, l2: f64) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Config("empty dataset file".into()))?;
        let d = header.split(',').count() - 1;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (ln, line) in lines.enumerate() {
            let mut cols = line.split(',');
            let bad = || Error::Config(format!("malformed dataset row {}", ln + 2));
            labels.push(cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?);
            for _ in 0..d {
                features.push(cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?);
            }
        }
        Self::from_parts(features, labels, d, l2)
    }
}

impl Task for LogRegTask {
    fn name(&self) -> &'static str {
        "logreg"
    }

    fn dim(&self) -> usize {
        self.d
    }

    fn num_samples(&self) -> usize {
        self.labels.len()
    }

    fn loss(&self, theta: &[f64], indices: &[usize]) -> f64 {
        let data: f64 = indices
            .iter()
            .map(|&i| log1p_exp_neg(Self::signed(self.labels[i]) * linalg::dot(self.x(i), theta)))
            .sum::<f64>()
            / indices.len() as f64;
        data + 0.5 * self.l2 * linalg::norm_sq(theta)
    }

    fn grad(&self, theta: &[f64], indices: &[usize]) -> Vec<f64> {
        let mut g: Vec<f64> = theta.iter().map(|t| self.l2 * t).collect();
        let w = 1.0 / indices.len() as f64;
        for &i in indices {
            let y = Self::signed(self.labels[i]);
            let z = y * linalg::dot(self.x(i), theta);
            linalg::axpy(-w * y * sigmoid(-z), self.x(i), &mut g);
        }
        g
    }

    fn hessian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        if self.d > EXACT_HESSIAN_MAX_DIM {
            return None;
        }
        let mut h = DMatrix::from_diagonal_element(self.d, self.d, self.l2);
        let w = 1.0 / self.num_samples() as f64;
        for i in 0..self.num_samples() {
            let s = sigmoid(linalg::dot(self.x(i), theta));
            let x = DVector::from_column_slice(self.x(i));
            h.ger(w * s * (1.0 - s), &x, &x, 1.0);
        }
        Some(h)
    }

    fn minimum_value(&self) -> Option<f64> {
        None
    }

    fn labels(&self) -> Option<&[usize]> {
        Some(&self.labels)
    }

    fn initial_point(&self) -> Vec<f64> {
        vec![0.0; self.d]
    }

    fn test_metric(&self, theta: &[f64]) -> f64 {
        if self.test_labels.is_empty() {
            return self.train_accuracy(theta);
        }
        Self::accuracy_on(&self.test_features, &self.test_labels, self.d, theta)
    }
}

/// A logistic task with `n` samples in `d` dimensions, split over `clients`.
pub fn make_logreg(
    n: usize,
    d: usize,
    clients: usize,
    mode: PartitionMode,
    seed: u64,
) -> Result<(LogRegTask, Partition)> {
    let task = LogRegTask::new(&LogRegSpec {
        n,
        d,
        seed,
        ..LogRegSpec::default()
    })?;
    let partition = Partition::new(n, clients, mode, task.labels(), seed)?;
    Ok((task, partition))
}

// ---------------------------------------------------------------------------
// Partitions

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PartitionMode {
    Iid,
    /// Per-client class proportions drawn from a symmetric Dirichlet with
    /// this concentration; small values give strongly skewed clients.
    LabelSkew { concentration: f64 },
}

/// Disjoint, covering assignment of sample indices to clients.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub clients: Vec<Vec<usize>>,
    pub mode: PartitionMode,
}

fn shard_sizes(n: usize, clients: usize) -> Vec<usize> {
    (0..clients)
        .map(|c| n / clients + usize::from(c < n % clients))
        .collect()
}

impl Partition {
    pub fn new(n: usize, clients: usize, mode: PartitionMode, labels: Option<&[usize]>, seed: u64) -> Result<Self> {
        if clients == 0 || n < clients {
            return Err(Error::Config(format!(
                "cannot split {n} samples over {clients} clients (need n >= C >= 1)"
            )));
        }
        match mode {
            PartitionMode::Iid => Ok(Self::iid(n, clients, seed)),
            PartitionMode::LabelSkew { concentration } => {
                let labels = labels.ok_or_else(|| {
                    Error::Config("label-skew partitioning needs a labelled task".into())
                })?;
                Self::label_skew(labels, clients, concentration, seed)
            }
        }
    }

    /// Shuffled equal shards (sizes differ by at most one).
    pub fn iid(n: usize, clients: usize, seed: u64) -> Self {
        let mut rng = seeding::purpose_stream(Purpose::Partition, seed, 0, 0);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut out = Vec::with_capacity(clients);
        let mut start = 0;
        for size in shard_sizes(n, clients) {
            out.push(idx[start..start + size].to_vec());
            start += size;
        }
        Self {
            clients: out,
            mode: PartitionMode::Iid,
        }
    }

    /// Equal-size shards whose class mix follows per-client Dirichlet draws.
    pub fn label_skew(labels: &[usize], clients: usize, concentration: f64, seed: u64) -> Result<Self> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::Config(format!(
                "label-skew concentration must be finite and > 0, got {concentration}"
            )));
        }
        let n = labels.len();
        if clients == 0 || n < clients {
            return Err(Error::Config(format!(
                "cannot split {n} samples over {clients} clients"
            )));
        }
        let mut rng = seeding::purpose_stream(Purpose::Partition, seed, 1, 0);
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); classes];
        for (i, &y) in labels.iter().enumerate() {
            pools[y].push(i);
        }
        for p in pools.iter_mut() {
            p.shuffle(&mut rng);
        }
        let gamma = Gamma::new(concentration, 1.0)
            .map_err(|e| Error::Config(format!("bad concentration: {e}")))?;
        let mut out = Vec::with_capacity(clients);
        for size in shard_sizes(n, clients) {
            let weights: Vec<f64> = (0..classes).map(|_| gamma.sample(&mut rng)).collect();
            let mut shard = Vec::with_capacity(size);
            for _ in 0..size {
                let total: f64 = (0..classes)
                    .filter(|&k| !pools[k].is_empty())
                    .map(|k| weights[k])
                    .sum();
                let mut pick = rng.random::<f64>() * total;
                let mut chosen = None;
                for k in (0..classes).filter(|&k| !pools[k].is_empty()) {
                    chosen = Some(k);
                    if pick < weights[k] {
                        break;
                    }
                    pick -= weights[k];
                }
                let k = chosen.expect("pools cannot all be empty before every shard is full");
                shard.push(pools[k].pop().expect("non-empty pool"));
            }
            out.push(shard);
        }
        Ok(Self {
            clients: out,
            mode: PartitionMode::LabelSkew { concentration },
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    /// `client,sample` rows.
    pub fn to_columns(&self) -> String {
        let mut out = String::from("client,sample\n");
        for (c, shard) in self.clients.iter().enumerate() {
            for i in shard {
                let _ = writeln!(out, "{c},{i}");
            }
        }
        out
    }

    pub fn from_columns(text: &str, mode: PartitionMode) -> Result<Self> {
        let mut clients: Vec<Vec<usize>> = Vec::new();
        for (ln, line) in text.lines().enumerate().skip(1) {
            let bad = || Error::Config(format!("malformed partition row {}", ln + 1));
            let (c, i) = line.split_once(',').ok_or_else(bad)?;
            let c: usize = c.trim().parse().map_err(|_| bad())?;
            let i: usize = i.trim().parse().map_err(|_| bad())?;
            if clients.len() <= c {
                clients.resize(c + 1, Vec::new());
            }
            clients[c].push(i);
        }
        Ok(Self { clients, mode })
    }
}

// ---------------------------------------------------------------------------
// Diagnostics

/// `Σ|λ_i| / max λ_i`.
pub fn intrinsic_dimension_of_spectrum(eigenvalues: &[f64]) -> Result<f64> {
    let max = eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return Err(Error::Domain(format!(
            "intrinsic dimension undefined: largest eigenvalue is {max}"
        )));
    }
    Ok(eigenvalues.iter().map(|l| l.abs()).sum::<f64>() / max)
}

/// Eigenvalues of the full-data Hessian at `theta`.
pub fn hessian_spectrum(task: &dyn Task, theta: &[f64]) -> Result<Vec<f64>> {
    let h = task.hessian(theta).ok_or_else(|| {
        Error::Resource(format!(
            "exact Hessian unavailable for d = {} > {EXACT_HESSIAN_MAX_DIM}",
            task.dim()
        ))
    })?;
    Ok(SymmetricEigen::new(h).eigenvalues.iter().copied().collect())
}

/// Absolute intrinsic dimension of the Hessian at `theta`.
pub fn intrinsic_dimension(task: &dyn Task, theta: &[f64]) -> Result<f64> {
    intrinsic_dimension_of_spectrum(&hessian_spectrum(task, theta)?)
}

/// Empirical gradient bound and minibatch-noise scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradientStats {
    /// `max ‖∇L_c(θ)‖` over clients and sample points.
    pub g_est: f64,
    /// Sub-Gaussian scale fitted to the 97.5th percentile of `‖g_batch − ∇L_c‖`.
    pub sigma_s_est: f64,
}

/// Quantile used for the sub-Gaussian tail fit.
pub const SIGMA_S_QUANTILE: f64 = 0.975;

/// Estimates `G` and `σ_s` at the given parameter samples.
///
/// `σ_s` is a heuristic: for a `σ`-sub-Gaussian deviation,
/// `P(‖X‖ ≥ t) ≤ 2·exp(−t²/(2σ²))`, so the empirical quantile `t_q` gives
/// `σ ≈ t_q / √(2·log(2/(1 − q)))`.
pub fn estimate_g_and_sigma_s(
    task: &dyn Task,
    partition: &Partition,
    theta_samples: &[Vec<f64>],
    batch_size: usize,
    probes_per_client: usize,
    seed: u64,
) -> Result<GradientStats> {
    if theta_samples.is_empty() {
        return Err(Error::Config("need at least one parameter sample".into()));
    }
    let mut g_est: f64 = 0.0;
    let mut deviations = Vec::new();
    for (s, theta) in theta_samples.iter().enumerate() {
        linalg::check_len(theta, task.dim())?;
        for (c, shard) in partition.clients.iter().enumerate() {
            let full = task.grad(theta, shard);
            g_est = g_est.max(linalg::norm(&full));
            if batch_size >= shard.len() {
                deviations.extend(std::iter::repeat_n(0.0, probes_per_client));
                continue;
            }
            let mut rng = seeding::purpose_stream(Purpose::Probe, seed, s as u64, c as u64);
            for _ in 0..probes_per_client {
                let batch: Vec<usize> = shard.choose_multiple(&mut rng, batch_size).copied().collect();
                let g = task.grad(theta, &batch);
                deviations.push(linalg::norm(&linalg::sub(&g, &full)));
            }
        }
    }
    let sigma_s_est = if deviations.is_empty() {
        0.0
    } else {
        deviations.sort_by(f64::total_cmp);
        let pos = ((deviations.len() - 1) as f64 * SIGMA_S_QUANTILE).round() as usize;
        deviations[pos] / (2.0 * (2.0 / (1.0 - SIGMA_S_QUANTILE)).ln()).sqrt()
    };
    Ok(GradientStats { g_est, sigma_s_est })
}
