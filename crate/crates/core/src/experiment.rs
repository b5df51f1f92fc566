//! Run configuration files, simulation/sweep/diagnose drivers and output
//! writers.
//!
//! A run is described by a TOML document with the sections `task`,
//! `federation`, `mechanism`, `sketch`, `optimizer`, `accountant` and
//! `output`. Unknown keys are rejected. Privacy parameters never default:
//! `mechanism.tau`, `mechanism.sigma_g`, `sketch` and `accountant.delta`
//! must all be present. `sigma_g = "calibrate"` picks the smallest noise
//! meeting `accountant.target_epsilon`.
//!
//! Records go to a versioned CSV and every run writes a JSON manifest that
//! can be fed back to [`load_config_file`] to reproduce it byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de, Deserialize, Deserializer, Serialize};

use crate::accountant::{self, AccountantParams, AccountantReport, DeltaSplit, DpPoint};
use crate::error::{Error, Result};
use crate::fedsim::{self, CompressorKind, FedConfig, OptimizerKind, RunOutput};
use crate::mechanism::MechanismConfig;
use crate::numfmt::{deserialize_f64, fmt_f64, serialize_f64};
use crate::optim::MomentConfig;
use crate::seeding::{derive_seed, Purpose};
use crate::tasks::{
    self, LogRegSpec, LogRegTask, Partition, PartitionMode, QuadraticSpec, QuadraticTask, Task,
};

/// First line of every records CSV.
pub const CSV_HEADER_COMMENT: &str = "# fedsgm-records v1";
pub const CSV_COLUMNS: &str = "round,train_loss,grad_norm_sq,test_metric,clip_rate,epsilon_spent";
pub const MANIFEST_SCHEMA: &str = "fedsgm-manifest v1";

/// Accepts integers, and floats with an exact integer value (so `4e5` works).
fn count<'de, D: Deserializer<'de>, T: TryFrom<u64>>(d: D) -> std::result::Result<T, D::Error> {
    struct V;
    impl de::Visitor<'_> for V {
        type Value = u64;

        fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
            f.write_str("a non-negative integer")
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<u64, E> {
            Ok(v)
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<u64, E> {
            u64::try_from(v).map_err(|_| E::invalid_value(de::Unexpected::Signed(v), &self))
        }

        fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<u64, E> {
            if v >= 0.0 && v.fract() == 0.0 && v < 2f64.powi(63) {
                Ok(v as u64)
            } else {
                Err(E::invalid_value(de::Unexpected::Float(v), &self))
            }
        }
    }
    let v = d.deserialize_any(V)?;
    T::try_from(v).map_err(|_| de::Error::custom(format!("{v} is out of range")))
}

fn opt_count<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<usize>, D::Error> {
    count::<D, usize>(d).map(Some)
}

// ---------------------------------------------------------------------------
// Schema

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub task: TaskSection,
    pub federation: FederationSection,
    pub mechanism: MechanismSection,
    pub sketch: SketchSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    pub accountant: AccountantSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpectrumKind {
    /// `λ_i = i^{−exponent}`.
    #[default]
    PowerLaw,
    /// All eigenvalues 1.
    Flat,
    /// Taken from `eigenvalues`.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    #[default]
    Iid,
    LabelSkew,
}

fn two() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn label_noise() -> f64 {
    0.05
}
fn ridge() -> f64 {
    1e-3
}
fn test_samples() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSection {
    Quadratic {
        #[serde(deserialize_with = "count")]
        d: usize,
        #[serde(default)]
        spectrum: SpectrumKind,
        #[serde(default = "two")]
        exponent: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        eigenvalues: Option<Vec<f64>>,
        /// Defaults to one sample per client.
        #[serde(default, deserialize_with = "opt_count", skip_serializing_if = "Option::is_none")]
        samples: Option<usize>,
        #[serde(default)]
        spread: f64,
        #[serde(default = "one")]
        init_radius: f64,
        #[serde(default)]
        partition: PartitionName,
        #[serde(default = "half")]
        concentration: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Logreg {
        #[serde(deserialize_with = "count")]
        n: usize,
        #[serde(deserialize_with = "count")]
        d: usize,
        #[serde(default = "label_noise")]
        label_noise: f64,
        #[serde(default = "ridge")]
        l2: f64,
        #[serde(default = "test_samples", deserialize_with = "count")]
        test_samples: usize,
        #[serde(default)]
        partition: PartitionName,
        #[serde(default = "half")]
        concentration: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    #[default]
    Federated,
    /// Per-example clipping on the pooled dataset; `batch_size` is `m`.
    Central,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationSection {
    #[serde(default)]
    pub mode: RunMode,
    #[serde(deserialize_with = "count")]
    pub clients: usize,
    #[serde(deserialize_with = "count")]
    pub clients_per_round: usize,
    #[serde(deserialize_with = "count")]
    pub local_steps: usize,
    #[serde(deserialize_with = "count")]
    pub rounds: u64,
    pub eta_local: f64,
    pub eta_global: f64,
    #[serde(deserialize_with = "count")]
    pub batch_size: usize,
    pub master_seed: u64,
    #[serde(default, deserialize_with = "opt_count", skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

/// A fixed noise scale or `"calibrate"`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaSetting {
    Fixed(f64),
    Calibrate,
}

impl Serialize for SigmaSetting {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Self::Fixed(v) => s.serialize_f64(*v),
            Self::Calibrate => s.serialize_str("calibrate"),
        }
    }
}

impl<'de> Deserialize<'de> for SigmaSetting {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct V;
        impl de::Visitor<'_> for V {
            type Value = SigmaSetting;

            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a non-negative number or \"calibrate\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> std::result::Result<SigmaSetting, E> {
                Ok(SigmaSetting::Fixed(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> std::result::Result<SigmaSetting, E> {
                Ok(SigmaSetting::Fixed(v as f64))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> std::result::Result<SigmaSetting, E> {
                Ok(SigmaSetting::Fixed(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> std::result::Result<SigmaSetting, E> {
                if v == "calibrate" {
                    Ok(SigmaSetting::Calibrate)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }
        d.deserialize_any(V)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismSection {
    #[serde(serialize_with = "serialize_f64", deserialize_with = "deserialize_f64")]
    pub tau: f64,
    pub sigma_g: SigmaSetting,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SketchSection {
    Gaussian {
        #[serde(deserialize_with = "count")]
        b: usize,
    },
    Identity {},
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerName {
    #[default]
    Gd,
    Amsgrad,
    Adam,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.99
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub kind: OptimizerName,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub eps: f64,
    #[serde(default)]
    pub raw: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        Self {
            kind: OptimizerName::Gd,
            beta1: beta1(),
            beta2: beta2(),
            eps: adam_eps(),
            raw: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AccountantSection {
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_epsilon: Option<f64>,
}

fn runs_dir() -> String {
    "runs".into()
}
fn run_name() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "runs_dir")]
    pub dir: String,
    #[serde(default = "run_name")]
    pub name: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: runs_dir(),
            name: run_name(),
        }
    }
}

// ---------------------------------------------------------------------------
// Loading

fn parse_override(item: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {item:?} is not of the form key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((path, value))
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, item: &str) -> Result<()> {
    let (path, value) = parse_override(item)?;
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cursor = table;
    for p in parents {
        let entry = cursor
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {item:?}: {p:?} is not a section")))?;
    }
    cursor.insert(last.clone(), value);
    Ok(())
}

fn schema_error(e: impl std::fmt::Display, context: &str) -> Error {
    Error::Config(format!("invalid run configuration{context}: {e}"))
}

/// Parses a TOML run configuration and applies `key=value` overrides.
pub fn load_config(text: &str, overrides: &[String]) -> Result<RunConfigFile> {
    let cfg: RunConfigFile = if overrides.is_empty() {
        toml::from_str(text).map_err(|e| schema_error(e, ""))?
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| schema_error(e, ""))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e| schema_error(e, " (after overrides)"))?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a TOML config, or the `config` object of a JSON run manifest.
pub fn load_config_file(path: &Path, overrides: &[String]) -> Result<RunConfigFile> {
    let text = fs::read_to_string(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        let manifest: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| schema_error(e, " (manifest)"))?;
        let config = manifest
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Config("manifest has no `config` object".into()))?;
        let mut table: toml::Table =
            serde_json::from_value(config).map_err(|e| schema_error(e, " (manifest)"))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfigFile = toml::Value::Table(table)
            .try_into()
            .map_err(|e| schema_error(e, " (manifest)"))?;
        cfg.validate()?;
        Ok(cfg)
    } else {
        load_config(&text, overrides)
    }
}

impl RunConfigFile {
    /// Cross-section checks that the schema cannot express.
    pub fn validate(&self) -> Result<()> {
        if let SigmaSetting::Fixed(s) = self.mechanism.sigma_g {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::Config(format!("mechanism.sigma_g must be finite and >= 0, got {s}")));
            }
        }
        if self.mechanism.sigma_g == SigmaSetting::Calibrate {
            if self.accountant.target_epsilon.is_none() {
                return Err(Error::Config(
                    "mechanism.sigma_g = \"calibrate\" requires accountant.target_epsilon".into(),
                ));
            }
            if matches!(self.sketch, SketchSection::Identity {}) {
                return Err(Error::Config(
                    "cannot calibrate sigma_g with the identity sketch: the sketched accountant does not apply"
                        .into(),
                ));
            }
            if !self.mechanism.tau.is_finite() {
                return Err(Error::Config("cannot calibrate sigma_g with tau = inf".into()));
            }
        }
        if self.output.name.is_empty() || self.output.name.contains(['/', '\\']) {
            return Err(Error::Config(format!("output.name {:?} is not a plain file stem", self.output.name)));
        }
        Ok(())
    }

    pub fn master_seed(&self) -> u64 {
        self.federation.master_seed
    }

    pub fn seeds(&self) -> Seeds {
        let master = self.master_seed();
        let explicit = match &self.task {
            TaskSection::Quadratic { seed, .. } | TaskSection::Logreg { seed, .. } => *seed,
        };
        Seeds {
            master,
            task: explicit.unwrap_or_else(|| derive_seed(&[Purpose::TaskData as u64, master])),
            partition: derive_seed(&[Purpose::Partition as u64, master]),
            noise: derive_seed(&[Purpose::Noise as u64, master]),
        }
    }

    fn compressor(&self) -> CompressorKind {
        match self.sketch {
            SketchSection::Gaussian { b } => CompressorKind::Gaussian { b },
            SketchSection::Identity {} => CompressorKind::Identity,
        }
    }

    fn optimizer(&self) -> OptimizerKind {
        let o = &self.optimizer;
        let m = MomentConfig {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            raw: o.raw,
        };
        match o.kind {
            OptimizerName::Gd => OptimizerKind::Gd,
            OptimizerName::Amsgrad => OptimizerKind::Amsgrad(m),
            OptimizerName::Adam => OptimizerKind::Adam(m),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Seeds {
    pub master: u64,
    pub task: u64,
    pub partition: u64,
    pub noise: u64,
}

/// Everything needed to execute a configuration.
pub struct Prepared {
    pub config: RunConfigFile,
    pub seeds: Seeds,
    pub task: Box<dyn Task>,
    pub partition: Partition,
    pub fed: FedConfig,
    /// Privacy accounting for the full run (vacuous when no guarantee applies).
    pub accountant: AccountantReport,
    /// Whether `sigma_g` came from calibration.
    pub calibrated: bool,
}

fn partition_mode(name: PartitionName, concentration: f64) -> PartitionMode {
    match name {
        PartitionName::Iid => PartitionMode::Iid,
        PartitionName::LabelSkew => PartitionMode::LabelSkew { concentration },
    }
}

fn build_task(cfg: &RunConfigFile, seeds: &Seeds) -> Result<(Box<dyn Task>, Partition)> {
    let clients = cfg.federation.clients;
    match &cfg.task {
        TaskSection::Quadratic {
            d,
            spectrum,
            exponent,
            eigenvalues,
            samples,
            spread,
            init_radius,
            partition,
            concentration,
            ..
        } => {
            let eig = match (spectrum, eigenvalues) {
                (SpectrumKind::Explicit, Some(e)) if e.len() == *d => e.clone(),
                (SpectrumKind::Explicit, Some(e)) => {
                    return Err(Error::Config(format!(
                        "task.eigenvalues has {} entries but task.d = {d}",
                        e.len()
                    )))
                }
                (SpectrumKind::Explicit, None) => {
                    return Err(Error::Config("task.spectrum = \"explicit\" needs task.eigenvalues".into()))
                }
                (_, Some(_)) => {
                    return Err(Error::Config(
                        "task.eigenvalues is only used with spectrum = \"explicit\"".into(),
                    ))
                }
                (SpectrumKind::PowerLaw, None) => tasks::power_law_spectrum(*d, *exponent),
                (SpectrumKind::Flat, None) => vec![1.0; *d],
            };
            let n = samples.unwrap_or(clients);
            let task = QuadraticTask::new(QuadraticSpec {
                eigenvalues: eig,
                samples: n,
                spread: *spread,
                init_radius: *init_radius,
                seed: seeds.task,
            })?;
            let part = Partition::new(n, clients, partition_mode(*partition, *concentration), None, seeds.partition)?;
            Ok((Box::new(task), part))
        }
        TaskSection::Logreg {
            n,
            d,
            label_noise,
            l2,
            test_samples,
            partition,
            concentration,
            ..
        } => {
            let task = LogRegTask::new(&LogRegSpec {
                n: *n,
                d: *d,
                test_samples: *test_samples,
                label_noise: *label_noise,
                l2: *l2,
                seed: seeds.task,
            })?;
            let part = Partition::new(
                *n,
                clients,
                partition_mode(*partition, *concentration),
                task.labels(),
                seeds.partition,
            )?;
            Ok((Box::new(task), part))
        }
    }
}

/// Builds the task and partition, resolves `sigma_g` and accounts for the run.
pub fn prepare(config: RunConfigFile) -> Result<Prepared> {
    config.validate()?;
    let seeds = config.seeds();
    let (task, partition) = build_task(&config, &seeds)?;
    let f = &config.federation;
    let q = match f.mode {
        RunMode::Federated => f.clients_per_round as f64 / f.clients as f64,
        RunMode::Central => f.batch_size.min(task.num_samples()) as f64 / task.num_samples() as f64,
    };
    let compressor = config.compressor();
    let delta = config.accountant.delta;
    let tau = config.mechanism.tau;

    let (sigma_g, calibrated, calibration_report) = match config.mechanism.sigma_g {
        SigmaSetting::Fixed(s) => (s, false, None),
        SigmaSetting::Calibrate => {
            let CompressorKind::Gaussian { b } = compressor else {
                unreachable!("validated above")
            };
            let eps = config.accountant.target_epsilon.expect("validated above");
            let target = DpPoint::new(eps, delta)?;
            let cal = accountant::calibrate_sgm_sigma(target, q, f.rounds, tau, b, DeltaSplit::default())?;
            (cal.sigma_g, true, Some(cal.report))
        }
    };
    let mechanism = MechanismConfig::new(tau, sigma_g, seeds.noise)?;
    let fed = FedConfig {
        clients: f.clients,
        clients_per_round: f.clients_per_round,
        local_steps: f.local_steps,
        rounds: f.rounds,
        eta_local: f.eta_local,
        eta_global: f.eta_global,
        batch_size: f.batch_size,
        mechanism,
        compressor,
        optimizer: config.optimizer(),
        master_seed: f.master_seed,
        delta,
        threads: f.threads,
    };
    fed.validate()?;

    let accountant = match calibration_report {
        Some(r) => r,
        None => account_run(q, &fed, task.dim()),
    };
    Ok(Prepared {
        config,
        seeds,
        task,
        partition,
        fed,
        accountant,
        calibrated,
    })
}

fn account_run(q: f64, fed: &FedConfig, d: usize) -> AccountantReport {
    let fallback = AccountantParams {
        q,
        rounds: fed.rounds,
        tau: fed.mechanism.tau,
        b: fed.sketch_dim(d),
        sigma_g: fed.mechanism.sigma_g,
    };
    match fed.accountant_params(fed.rounds) {
        Err(reason) => AccountantReport::vacuous(fallback, fed.delta, reason),
        Ok(p) => {
            let p = AccountantParams { q, ..p };
            accountant::sgm_account(p, fed.delta, DeltaSplit::default())
                .unwrap_or_else(|e| AccountantReport::vacuous(p, fed.delta, e.to_string()))
        }
    }
}

// ---------------------------------------------------------------------------
// Simulation

/// Runs a prepared configuration in the configured mode.
pub fn execute(p: &Prepared) -> Result<RunOutput> {
    match p.config.federation.mode {
        RunMode::Federated => fedsim::run_federation(&p.fed, p.task.as_ref(), &p.partition),
        RunMode::Central => fedsim::run_central_sgm(&p.fed, p.task.as_ref()),
    }
}

/// Records as CSV, initial point first.
pub fn records_csv(out: &RunOutput) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{CSV_HEADER_COMMENT}");
    let _ = writeln!(s, "{CSV_COLUMNS}");
    for r in out.all_records() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.round,
            fmt_f64(r.train_loss),
            fmt_f64(r.grad_norm_sq),
            fmt_f64(r.test_metric),
            fmt_f64(r.clip_activation_rate),
            fmt_f64(r.epsilon_spent)
        );
    }
    s
}

#[derive(Debug, Clone, Serialize)]
pub struct FinalMetrics {
    #[serde(serialize_with = "serialize_f64")]
    pub train_loss: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub grad_norm_sq: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub test_metric: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub epsilon_spent: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub mean_clip_rate: f64,
}

impl FinalMetrics {
    pub fn of(out: &RunOutput) -> Self {
        let last = out.records.last().unwrap_or(&out.initial);
        let clip = if out.records.is_empty() {
            0.0
        } else {
            out.records.iter().map(|r| r.clip_activation_rate).sum::<f64>() / out.records.len() as f64
        };
        Self {
            train_loss: last.train_loss,
            grad_norm_sq: last.grad_norm_sq,
            test_metric: last.test_metric,
            epsilon_spent: last.epsilon_spent,
            mean_clip_rate: clip,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest<'a> {
    pub schema: &'static str,
    pub version: &'static str,
    pub config: &'a RunConfigFile,
    pub overrides: &'a [String],
    pub seeds: Seeds,
    #[serde(serialize_with = "serialize_f64")]
    pub sigma_g: f64,
    pub sigma_g_calibrated: bool,
    pub accountant: &'a AccountantReport,
    pub metrics_are_estimates: bool,
    pub warnings: &'a [String],
    pub final_metrics: FinalMetrics,
    pub records_file: String,
}

/// Paths written by [`simulate`].
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationFiles {
    pub csv: PathBuf,
    pub manifest: PathBuf,
}

pub struct Simulation {
    pub prepared: Prepared,
    pub output: RunOutput,
    pub csv: String,
    pub manifest: String,
}

/// Runs a configuration and renders its CSV and manifest.
pub fn simulate(config: RunConfigFile, overrides: &[String]) -> Result<Simulation> {
    let prepared = prepare(config)?;
    let output = execute(&prepared)?;
    let csv = records_csv(&output);
    let manifest = Manifest {
        schema: MANIFEST_SCHEMA,
        version: env!("CARGO_PKG_VERSION"),
        config: &prepared.config,
        overrides,
        seeds: prepared.seeds,
        sigma_g: prepared.fed.mechanism.sigma_g,
        sigma_g_calibrated: prepared.calibrated,
        accountant: &prepared.accountant,
        metrics_are_estimates: output.metrics_are_estimates,
        warnings: &output.warnings,
        final_metrics: FinalMetrics::of(&output),
        records_file: format!("{}.csv", prepared.config.output.name),
    };
    let manifest = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Contract(format!("cannot serialize manifest: {e}")))?
        + "\n";
    Ok(Simulation {
        prepared,
        output,
        csv,
        manifest,
    })
}

impl Simulation {
    /// Writes `<name>.csv` and `<name>.manifest.json` into `dir` (default: `output.dir`).
    pub fn write(&self, dir: Option<&Path>) -> Result<SimulationFiles> {
        let out = &self.prepared.config.output;
        let dir = dir.map_or_else(|| PathBuf::from(&out.dir), Path::to_path_buf);
        let files = SimulationFiles {
            csv: dir.join(format!("{}.csv", out.name)),
            manifest: dir.join(format!("{}.manifest.json", out.name)),
        };
        write_atomic(&files.csv, self.csv.as_bytes())?;
        write_atomic(&files.manifest, self.manifest.as_bytes())?;
        Ok(files)
    }
}

/// Writes via a sibling temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", file_name.to_string_lossy(), std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sweeps

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub value: String,
    pub repetition: usize,
    pub master_seed: u64,
    pub sigma_g: f64,
    pub epsilon: f64,
    pub train_loss: f64,
    pub grad_norm_sq: f64,
    pub test_metric: f64,
    pub mean_clip_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub value: String,
    pub runs: usize,
    pub sigma_g: f64,
    pub epsilon: f64,
    pub train_loss_mean: f64,
    pub train_loss_stderr: f64,
    pub grad_norm_sq_mean: f64,
    pub grad_norm_sq_stderr: f64,
    pub test_metric_mean: f64,
    pub test_metric_stderr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    pub axis: String,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the configuration once per `value` of `axis` and per repetition.
///
/// Repetition `r > 0` replaces the master seed by `derive_seed([seed, r])`.
pub fn sweep(
    base_text: &str,
    overrides: &[String],
    axis: &str,
    values: &[String],
    repetitions: usize,
) -> Result<SweepOutput> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if repetitions == 0 {
        return Err(Error::Config("sweep needs at least one repetition".into()));
    }
    let base = load_config(base_text, overrides)?;
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for value in values {
        let mut ovr = overrides.to_vec();
        ovr.push(format!("{axis}={value}"));
        let cfg = load_config(base_text, &ovr).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("sweep axis {axis:?} = {value}: {m}")),
            other => other,
        })?;
        let mut group = Vec::new();
        for rep in 0..repetitions {
            let seed = if rep == 0 {
                base.master_seed()
            } else {
                derive_seed(&[base.master_seed(), rep as u64])
            };
            let mut cfg = cfg.clone();
            cfg.federation.master_seed = seed;
            let prepared = prepare(cfg)?;
            let out = execute(&prepared)?;
            let fin = FinalMetrics::of(&out);
            group.push(SweepRow {
                value: value.clone(),
                repetition: rep,
                master_seed: seed,
                sigma_g: prepared.fed.mechanism.sigma_g,
                epsilon: prepared.accountant.epsilon,
                train_loss: fin.train_loss,
                grad_norm_sq: fin.grad_norm_sq,
                test_metric: fin.test_metric,
                mean_clip_rate: fin.mean_clip_rate,
            });
        }
        let col = |f: fn(&SweepRow) -> f64| mean_stderr(&group.iter().map(f).collect::<Vec<_>>());
        let (tl, tls) = col(|r| r.train_loss);
        let (gn, gns) = col(|r| r.grad_norm_sq);
        let (tm, tms) = col(|r| r.test_metric);
        summary.push(SweepSummary {
            value: value.clone(),
            runs: group.len(),
            sigma_g: col(|r| r.sigma_g).0,
            epsilon: col(|r| r.epsilon).0,
            train_loss_mean: tl,
            train_loss_stderr: tls,
            grad_norm_sq_mean: gn,
            grad_norm_sq_stderr: gns,
            test_metric_mean: tm,
            test_metric_stderr: tms,
        });
        rows.extend(group);
    }
    Ok(SweepOutput {
        axis: axis.to_string(),
        rows,
        summary,
    })
}

impl SweepOutput {
    pub fn rows_csv(&self) -> String {
        let mut s = format!(
            "# fedsgm-sweep v1 axis={}\nvalue,repetition,master_seed,sigma_g,epsilon,train_loss,grad_norm_sq,test_metric,clip_rate\n",
            self.axis
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.value,
                r.repetition,
                r.master_seed,
                fmt_f64(r.sigma_g),
                fmt_f64(r.epsilon),
                fmt_f64(r.train_loss),
                fmt_f64(r.grad_norm_sq),
                fmt_f64(r.test_metric),
                fmt_f64(r.mean_clip_rate)
            );
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!(
            "# fedsgm-sweep-summary v1 axis={}\nvalue,runs,sigma_g,epsilon,train_loss_mean,train_loss_stderr,grad_norm_sq_mean,grad_norm_sq_stderr,test_metric_mean,test_metric_stderr\n",
            self.axis
        );
        for r in &self.summary {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                r.value,
                r.runs,
                fmt_f64(r.sigma_g),
                fmt_f64(r.epsilon),
                fmt_f64(r.train_loss_mean),
                fmt_f64(r.train_loss_stderr),
                fmt_f64(r.grad_norm_sq_mean),
                fmt_f64(r.grad_norm_sq_stderr),
                fmt_f64(r.test_metric_mean),
                fmt_f64(r.test_metric_stderr)
            );
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Diagnostics

/// Rounds of the configured run whose iterates are used as gradient samples.
pub const DIAGNOSE_ROUNDS: u64 = 20;

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub task: &'static str,
    pub d: usize,
    pub n: usize,
    pub clients: usize,
    pub clients_per_round: usize,
    pub local_steps: usize,
    pub intrinsic_dimension: f64,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub theta_samples: usize,
    pub g_est: f64,
    pub sigma_s_est: f64,
    #[serde(serialize_with = "serialize_f64")]
    pub tau: f64,
    pub k_times_g_est: f64,
    pub clipping_inactive: bool,
    pub sigma_g: f64,
    /// `max{0, G(KG − τ)/K}`.
    pub clip_term_shape: f64,
    /// `η·I·σ_g²/(N·K)` with `η = η_global·η_local`.
    pub noise_term_shape: f64,
    /// `(L(θ₀) − L*)/(ηTK)`, when `L*` is known.
    pub init_term_shape: Option<f64>,
}

/// Hessian spectrum, gradient-bound and clipping-regime diagnostics.
///
/// Gradient statistics are sampled along the first [`DIAGNOSE_ROUNDS`]
/// iterates of the configured run. Error-term values are shapes with all
/// constants dropped, useful only for comparing settings.
pub fn diagnose(config: RunConfigFile) -> Result<DiagnoseReport> {
    let mut short = config.clone();
    short.federation.rounds = short.federation.rounds.min(DIAGNOSE_ROUNDS);
    let prepared = prepare(config)?;
    let task = prepared.task.as_ref();
    let theta0 = task.initial_point();
    let spectrum = tasks::hessian_spectrum(task, &theta0)?;
    let intrinsic = tasks::intrinsic_dimension_of_spectrum(&spectrum)?;
    let lambda_max = spectrum.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lambda_min = spectrum.iter().cloned().fold(f64::INFINITY, f64::min);

    // Re-use the calibrated sigma so the short run matches the real one.
    short.mechanism.sigma_g = SigmaSetting::Fixed(prepared.fed.mechanism.sigma_g);
    let short = prepare(short)?;
    let mut samples = vec![theta0.clone()];
    let mut fed = short.fed.clone();
    for t in 1..=short.fed.rounds {
        fed.rounds = t;
        let out = match short.config.federation.mode {
            RunMode::Federated => fedsim::run_federation(&fed, task, &prepared.partition)?,
            RunMode::Central => fedsim::run_central_sgm(&fed, task)?,
        };
        samples.push(out.final_theta);
    }
    let f = &prepared.fed;
    let stats = tasks::estimate_g_and_sigma_s(
        task,
        &prepared.partition,
        &samples,
        f.batch_size,
        16,
        prepared.seeds.master,
    )?;
    let k = f.local_steps as f64;
    let g = stats.g_est;
    let tau = f.mechanism.tau;
    let eta = f.eta_global * f.eta_local;
    let init_term_shape = task
        .minimum_value()
        .map(|min| (task.full_loss(&theta0) - min) / (eta * f.rounds as f64 * k));
    Ok(DiagnoseReport {
        task: task.name(),
        d: task.dim(),
        n: task.num_samples(),
        clients: f.clients,
        clients_per_round: f.clients_per_round,
        local_steps: f.local_steps,
        intrinsic_dimension: intrinsic,
        lambda_max,
        lambda_min,
        theta_samples: samples.len(),
        g_est: g,
        sigma_s_est: stats.sigma_s_est,
        tau,
        k_times_g_est: k * g,
        clipping_inactive: tau >= k * g,
        sigma_g: f.mechanism.sigma_g,
        clip_term_shape: (g * (k * g - tau) / k).max(0.0),
        noise_term_shape: eta * intrinsic * f.mechanism.sigma_g.powi(2) / (f.clients_per_round as f64 * k),
        init_term_shape,
    })
}

impl DiagnoseReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "{k:<28} {v}");
        };
        line("task", self.task.to_string());
        line("dimension d", self.d.to_string());
        line("samples n", self.n.to_string());
        line("clients C / N / K", format!("{} / {} / {}", self.clients, self.clients_per_round, self.local_steps));
        line("intrinsic dimension I", fmt_f64(self.intrinsic_dimension));
        line("lambda max (smoothness)", fmt_f64(self.lambda_max));
        line("lambda min", fmt_f64(self.lambda_min));
        line("gradient samples", self.theta_samples.to_string());
        line("G_est", fmt_f64(self.g_est));
        line("sigma_s_est (heuristic)", fmt_f64(self.sigma_s_est));
        line("tau", fmt_f64(self.tau));
        line("K * G_est", fmt_f64(self.k_times_g_est));
        line(
            "clip regime",
            if self.clipping_inactive {
                "inactive (tau >= K*G_est)".to_string()
            } else {
                "active (tau < K*G_est)".to_string()
            },
        );
        line("sigma_g", fmt_f64(self.sigma_g));
        let _ = writeln!(s, "error-term shapes (constants and log factors dropped; not a bound):");
        let mut line = |k: &str, v: String| {
            let _ = writeln!(s, "  {k:<26} {v}");
        };
        line("clipping  max{0,G(KG-tau)/K}", fmt_f64(self.clip_term_shape));
        line("noise     eta*I*sigma^2/(NK)", fmt_f64(self.noise_term_shape));
        if let Some(v) = self.init_term_shape {
            line("init      (L0-L*)/(eta*T*K)", fmt_f64(v));
        }
        s
    }
}
