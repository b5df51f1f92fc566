use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedsgm::accountant::{self, AccountantParams, DeltaSplit, DpPoint};
use fedsgm::experiment::{self, RunConfigFile};
use fedsgm::numfmt::{fmt_f64, serialize_f64};
use fedsgm::Error;

/// Sketched Gaussian mechanism: privacy accounting, noise calibration and
/// federated training simulations.
#[derive(Debug, Parser)]
#[command(name = "fedsgm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Smallest noise scale meeting a target (epsilon, delta), with the
    /// unsketched baseline for comparison.
    Calibrate(CalibrateArgs),
    /// Privacy guarantee of a given noise scale, stage by stage.
    Accountant(AccountantArgs),
    /// Run a configuration file and write records CSV plus a manifest.
    Simulate(SimulateArgs),
    /// Repeat a configuration over values of one key.
    Sweep(SweepArgs),
    /// Hessian spectrum, gradient bounds and clipping regime of a configuration.
    Diagnose(DiagnoseArgs),
}

/// Accepts plain integers and integral floats such as `4e5`.
fn parse_count(s: &str) -> Result<usize, String> {
    if let Ok(v) = s.parse::<usize>() {
        return Ok(v);
    }
    match s.parse::<f64>() {
        Ok(v) if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 => Ok(v as usize),
        _ => Err(format!("{s:?} is not a non-negative integer")),
    }
}

fn parse_rounds(s: &str) -> Result<u64, String> {
    parse_count(s).map(|v| v as u64)
}

#[derive(Debug, Args)]
struct PrivacyArgs {
    /// Failure probability delta.
    #[arg(long)]
    delta: f64,
    /// Sampling ratio (clients per round / clients).
    #[arg(long)]
    q: f64,
    /// Number of rounds.
    #[arg(long = "T", alias = "rounds", value_parser = parse_rounds)]
    rounds: u64,
    /// Clipping threshold.
    #[arg(long)]
    tau: f64,
    /// Fraction of delta spent on composition.
    #[arg(long, default_value_t = 0.5)]
    composition_fraction: f64,
}

impl PrivacyArgs {
    fn check(&self) -> Result<(), String> {
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(format!("--delta must lie in (0, 1), got {}", self.delta));
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return Err(format!("--q must lie in (0, 1], got {}", self.q));
        }
        if self.rounds == 0 {
            return Err("--T must be >= 1".into());
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(format!("--tau must be finite and > 0, got {}", self.tau));
        }
        Ok(())
    }

    fn split(&self) -> DeltaSplit {
        DeltaSplit {
            composition_fraction: self.composition_fraction,
        }
    }
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    /// Target epsilon.
    #[arg(long)]
    eps: f64,
    #[command(flatten)]
    privacy: PrivacyArgs,
    /// Sketch dimension.
    #[arg(long, value_parser = parse_count)]
    b: usize,
    /// Print JSON instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MechanismChoice {
    /// Sketched Gaussian mechanism.
    Sgm,
    /// Subsampled Gaussian mechanism without sketching; `--sigma` is the noise multiplier.
    Baseline,
}

#[derive(Debug, Args)]
struct AccountantArgs {
    /// Noise scale sigma_g (noise multiplier for `--mechanism baseline`).
    #[arg(long)]
    sigma: f64,
    #[command(flatten)]
    privacy: PrivacyArgs,
    /// Sketch dimension (required for the sketched mechanism).
    #[arg(long, value_parser = parse_count)]
    b: Option<usize>,
    #[arg(long, value_enum, default_value_t = MechanismChoice::Sgm)]
    mechanism: MechanismChoice,
    #[arg(long)]
    json: bool,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run configuration (TOML) or a run manifest (JSON) to replay.
    config: PathBuf,
    /// `section.key=value`, applied after loading; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory (default: `output.dir` from the configuration).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Configuration key to vary, e.g. `sketch.b`.
    #[arg(long)]
    axis: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    values: Vec<String>,
    /// Repetitions per value with derived seeds.
    #[arg(long, default_value_t = 1)]
    reps: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    json: bool,
}

/// Failure with its exit code: 1 for usage/configuration, 2 for infeasible requests.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_infeasible() || matches!(e, Error::Resource(_)) {
            2
        } else {
            1
        };
        let mut message = e.to_string();
        if matches!(e, Error::Resource(_)) {
            message.push_str(
                "\nhint: exact Hessian diagnostics need d <= 500; reduce task.d or rely on the \
                 probe-batch gradient estimates reported by `simulate`",
            );
        }
        Self { code, message }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 1,
        message: message.into(),
    }
}

fn to_json<T: Serialize>(value: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(value).map_err(|e| usage(format!("cannot serialize output: {e}")))
}

#[derive(Serialize)]
struct CalibrateOutput {
    epsilon: f64,
    delta: f64,
    q: f64,
    rounds: u64,
    tau: f64,
    b: usize,
    sigma_g: f64,
    /// Noise std the unsketched baseline needs at the same (ε, δ).
    #[serde(serialize_with = "serialize_f64")]
    baseline_sigma: f64,
    #[serde(serialize_with = "serialize_f64")]
    ratio: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    baseline_error: Option<String>,
    report: accountant::AccountantReport,
}

fn cmd_calibrate(args: CalibrateArgs) -> Result<String, Failure> {
    let p = &args.privacy;
    p.check().map_err(usage)?;
    if args.b == 0 {
        return Err(usage("--b must be >= 1"));
    }
    let target = DpPoint::new(args.eps, p.delta)?;
    let cal = accountant::calibrate_sgm_sigma(target, p.q, p.rounds, p.tau, args.b, p.split())?;
    let (baseline_sigma, baseline_error) = match accountant::calibrate_baseline_sigma(target, p.q, p.rounds) {
        Ok(mult) => (mult * p.tau, None),
        Err(e) => (f64::NAN, Some(e.to_string())),
    };
    let out = CalibrateOutput {
        epsilon: args.eps,
        delta: p.delta,
        q: p.q,
        rounds: p.rounds,
        tau: p.tau,
        b: args.b,
        sigma_g: cal.sigma_g,
        baseline_sigma,
        ratio: cal.sigma_g / baseline_sigma,
        baseline_error,
        report: cal.report,
    };
    if args.json {
        return to_json(&out);
    }
    let mut s = format!(
        "target            epsilon = {}, delta = {}\n\
         sgm sigma_g       {}\n\
         achieved epsilon  {}\n",
        fmt_f64(out.epsilon),
        fmt_f64(out.delta),
        fmt_f64(out.sigma_g),
        fmt_f64(out.report.epsilon),
    );
    match &out.baseline_error {
        None => s.push_str(&format!(
            "baseline sigma    {}\nratio sgm/base    {}\n",
            fmt_f64(out.baseline_sigma),
            fmt_f64(out.ratio)
        )),
        Some(e) => s.push_str(&format!("baseline sigma    unavailable ({e})\n")),
    }
    Ok(s)
}

fn cmd_accountant(args: AccountantArgs) -> Result<String, Failure> {
    let p = &args.privacy;
    p.check().map_err(usage)?;
    if !(args.sigma > 0.0 && args.sigma.is_finite()) {
        return Err(usage(format!("--sigma must be finite and > 0, got {}", args.sigma)));
    }
    match args.mechanism {
        MechanismChoice::Baseline => {
            let r = accountant::baseline_gm_epsilon(p.q, args.sigma, p.rounds, p.delta)?;
            if args.json {
                return to_json(&r);
            }
            Ok(format!(
                "method            {}\nnoise multiplier  {}\nepsilon           {}\ndelta             {}\nbest order        {}\n",
                r.method,
                fmt_f64(r.sigma),
                fmt_f64(r.epsilon),
                fmt_f64(r.delta),
                r.alpha
            ))
        }
        MechanismChoice::Sgm => {
            let b = args.b.ok_or_else(|| usage("--b is required for the sketched mechanism"))?;
            let params = AccountantParams {
                q: p.q,
                rounds: p.rounds,
                tau: p.tau,
                b,
                sigma_g: args.sigma,
            };
            let r = accountant::sgm_account(params, p.delta, p.split())?;
            if args.json {
                return to_json(&r);
            }
            let mut s = format!(
                "regime ratio 2tau^2/(b sigma^2) = {}\nalpha* = {}\n{:<12} {:>24} {:>24}\n",
                fmt_f64(r.regime_ratio),
                fmt_f64(r.alpha_star),
                "stage",
                "epsilon",
                "delta"
            );
            for st in &r.pipeline_trace {
                s.push_str(&format!(
                    "{:<12} {:>24} {:>24}\n",
                    st.stage,
                    fmt_f64(st.epsilon),
                    fmt_f64(st.delta)
                ));
            }
            s.push_str(&format!(
                "final        epsilon = {}, delta = {}\n",
                fmt_f64(r.epsilon),
                fmt_f64(r.delta)
            ));
            Ok(s)
        }
    }
}

fn load(args: &ConfigArgs) -> Result<RunConfigFile, Failure> {
    Ok(experiment::load_config_file(&args.config, &args.overrides)?)
}

fn cmd_simulate(args: SimulateArgs) -> Result<String, Failure> {
    let cfg = load(&args.config)?;
    let sim = experiment::simulate(cfg, &args.config.overrides)?;
    let files = sim.write(args.out.as_deref())?;
    for w in &sim.output.warnings {
        eprintln!("warning: {w}");
    }
    let fin = experiment::FinalMetrics::of(&sim.output);
    Ok(format!(
        "records   {}\nmanifest  {}\nsigma_g   {}\nrounds    {}\nfinal     train_loss = {}, grad_norm_sq = {}, test_metric = {}\nepsilon   {}\n",
        files.csv.display(),
        files.manifest.display(),
        fmt_f64(sim.prepared.fed.mechanism.sigma_g),
        sim.output.records.len(),
        fmt_f64(fin.train_loss),
        fmt_f64(fin.grad_norm_sq),
        fmt_f64(fin.test_metric),
        fmt_f64(sim.prepared.accountant.epsilon),
    ))
}

fn cmd_sweep(args: SweepArgs) -> Result<String, Failure> {
    if args.values.is_empty() {
        return Err(usage("--values needs at least one value"));
    }
    let text = std::fs::read_to_string(&args.config.config).map_err(Error::from)?;
    let base = experiment::load_config(&text, &args.config.overrides)?;
    let out = experiment::sweep(&text, &args.config.overrides, &args.axis, &args.values, args.reps)?;
    let dir = args.out.unwrap_or_else(|| PathBuf::from(&base.output.dir));
    let rows = dir.join(format!("{}.sweep.csv", base.output.name));
    let summary = dir.join(format!("{}.sweep-summary.csv", base.output.name));
    experiment::write_atomic(&rows, out.rows_csv().as_bytes())?;
    let summary_csv = out.summary_csv();
    experiment::write_atomic(&summary, summary_csv.as_bytes())?;
    Ok(format!(
        "rows     {}\nsummary  {}\n{}",
        rows.display(),
        summary.display(),
        summary_csv
    ))
}

fn cmd_diagnose(args: DiagnoseArgs) -> Result<String, Failure> {
    let cfg = load(&args.config)?;
    let report = experiment::diagnose(cfg)?;
    if args.json {
        to_json(&report)
    } else {
        Ok(report.to_text())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Accountant(a) => cmd_accountant(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    };
    match result {
        Ok(text) => {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
