//! Command-line front end for the `prefdyn` lab.
//!
//! Each subcommand is also callable as a function so the integration tests
//! can drive it without spawning processes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use prefdyn::experiments::{margin_scan, output, sweep, Lab, RunConfig, SweepAxis, SweepPoint};
use prefdyn::losses::{Denominator, WeightConvention};
use prefdyn::verify::{self, CheckResult, VerifyOptions};

/// Environment variable capping sweep worker threads.
pub const THREADS_ENV: &str = "PREFDYN_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "prefdyn",
    version,
    about = "Preference-optimization dynamics lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct RunArgs {
    /// TOML config; a `.json` extension switches to JSON.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the run seed from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Compute α and γ from squared-error differences with a signed denominator.
    #[arg(long)]
    pub code_convention: bool,
    /// Use `r_l + ε` instead of `|r_l| + ε` in the α/γ normalization.
    #[arg(long)]
    pub literal_denominator: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain a reference, align it, write metrics.csv and summary.json.
    Train(RunArgs),
    /// Train, then write margin_scan.csv and gamma_trace.csv.
    Diagnose(RunArgs),
    /// One run per value of a single hyperparameter.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Run the numerical self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break a routine to confirm the checks notice.
        #[arg(long, hide = true)]
        inject_fault: Option<Fault>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Fault {
    /// Flip the sign of ∂L/∂x₁ in the DPO partials.
    PartialsSign,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0}")]
    Aborted(String),
    #[error("verification failed: {}", .0.join(", "))]
    Verify(Vec<String>),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Aborted(_) => 2,
            CliError::Verify(_) => 3,
        }
    }
}

impl From<prefdyn::Error> for CliError {
    fn from(e: prefdyn::Error) -> Self {
        use prefdyn::Error as E;
        match e {
            E::Aborted { .. } => CliError::Aborted(e.to_string()),
            E::Io(_) | E::Csv(_) | E::Json(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

fn path_error<E: std::fmt::Display>(e: serde_path_to_error::Error<E>) -> CliError {
    let path = e.path().to_string();
    let inner = e.into_inner().to_string();
    // Unknown keys are reported at their parent; name the key itself.
    let key = match unknown_field(&inner) {
        Some(field) if path == "." => field.to_owned(),
        Some(field) if !path.ends_with(field) => format!("{path}.{field}"),
        _ => path,
    };
    // TOML prefixes a location line and a source excerpt; keep the reason.
    let reason = inner
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .unwrap_or_default();
    CliError::Config(format!("`{key}`: {reason}"))
}

fn unknown_field(msg: &str) -> Option<&str> {
    let rest = msg.split("unknown field `").nth(1)?;
    rest.split('`').next()
}

/// Parses a config file: JSON for a `.json` extension, TOML otherwise.
/// Missing keys take their defaults; unknown keys are rejected.
pub fn parse_config(text: &str, json: bool) -> Result<RunConfig, CliError> {
    if json {
        let mut de = serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(&mut de).map_err(path_error)
    } else {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(path_error)
    }
}

pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let json = path
        .extension()
        .is_some_and(|x| x.eq_ignore_ascii_case("json"));
    parse_config(&text, json)
}

/// The config a run actually uses: file (or defaults) plus flag overrides.
pub fn resolve(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.code_convention {
        cfg.loss.convention = WeightConvention::Code;
    }
    if args.literal_denominator {
        cfg.loss.denominator = Denominator::Literal;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out)?;
    output::write_json(&out.join("config.resolved.json"), cfg)?;
    Ok(())
}

/// Writes `metrics.csv`, `summary.json` and `config.resolved.json`. An
/// aborted run still leaves the metrics gathered before the abort.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare_out(out, cfg)?;
    match Lab::new(*cfg)?.run() {
        Ok(outcome) => {
            output::write_metrics(&out.join("metrics.csv"), &outcome.log)?;
            output::write_json(&out.join("summary.json"), &outcome.summary(cfg))?;
            Ok(())
        }
        Err(prefdyn::Error::Aborted {
            step,
            what,
            partial,
        }) => {
            output::write_metrics(&out.join("metrics.csv"), &partial)?;
            Err(CliError::Aborted(format!(
                "run aborted at step {step}: {what}"
            )))
        }
        Err(e) => Err(e.into()),
    }
}

/// Trains, then writes the per-step Γ trace and a margin scan of the
/// trained model.
pub fn cmd_diagnose(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    prepare_out(out, cfg)?;
    let lab = Lab::new(*cfg)?;
    let outcome = match lab.run() {
        Ok(o) => o,
        Err(prefdyn::Error::Aborted {
            step,
            what,
            partial,
        }) => {
            output::write_gamma_trace(&out.join("gamma_trace.csv"), &partial)?;
            return Err(CliError::Aborted(format!(
                "run aborted at step {step}: {what}"
            )));
        }
        Err(e) => return Err(e.into()),
    };
    output::write_gamma_trace(&out.join("gamma_trace.csv"), &outcome.log)?;
    let rows = margin_scan(
        &lab,
        &outcome.final_params,
        &outcome.ref_params,
        &cfg.diagnose,
        &cfg.loss,
    )?;
    output::write_margin_scan(&out.join("margin_scan.csv"), &rows)?;
    Ok(())
}

pub const SWEEP_HEADER: [&str; 8] = [
    "value",
    "mean_alpha_positive",
    "mean_gamma_positive",
    "positive_pairs",
    "param_distance",
    "gamma_pos_frac",
    "final_chosen_logp",
    "error",
];

#[derive(Serialize)]
struct SweepRow<'a> {
    value: f64,
    mean_alpha_positive: f64,
    mean_gamma_positive: f64,
    positive_pairs: usize,
    param_distance: f64,
    gamma_pos_frac: f64,
    final_chosen_logp: f64,
    error: &'a str,
}

fn write_sweep(path: &Path, points: &[SweepPoint]) -> Result<(), CliError> {
    let mut text = SWEEP_HEADER.join(",");
    text.push('\n');
    for p in points {
        let row = SweepRow {
            value: p.value,
            mean_alpha_positive: p.mean_alpha_positive,
            mean_gamma_positive: p.mean_gamma_positive,
            positive_pairs: p.positive_pairs,
            param_distance: p.param_distance,
            gamma_pos_frac: p.gamma_pos_frac,
            final_chosen_logp: p
                .log
                .as_ref()
                .and_then(|l| l.last())
                .map_or(f64::NAN, |e| e.chosen_logp),
            error: p.error.as_deref().unwrap_or(""),
        };
        text.push_str(&csv_line(&row)?);
    }
    fs::write(path, text)?;
    Ok(())
}

fn csv_line<T: Serialize>(row: &T) -> Result<String, CliError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(vec![]);
    w.serialize(row).map_err(|e| CliError::Io(e.to_string()))?;
    let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| CliError::Io(e.to_string()))
}

/// Worker cap from [`THREADS_ENV`]; unset means rayon's default.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .map(Some)
            .ok_or_else(|| {
                CliError::Config(format!(
                    "`{THREADS_ENV}` must be a positive integer, got `{v}`"
                ))
            }),
        Err(_) => Ok(None),
    }
}

/// Writes `sweep.csv` (one row per value) and `sweep.json` (full logs).
/// Aborted points are recorded and reported through the exit code.
pub fn cmd_sweep(
    cfg: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    out: &Path,
    threads: Option<usize>,
) -> Result<Vec<SweepPoint>, CliError> {
    prepare_out(out, cfg)?;
    let points = sweep(cfg, axis, values, threads)?;
    write_sweep(&out.join("sweep.csv"), &points)?;
    output::write_json(&out.join("sweep.json"), &points)?;
    let aborted: Vec<String> = points
        .iter()
        .filter_map(|p| {
            p.error
                .as_ref()
                .map(|e| format!("{}={}: {e}", axis.name(), p.value))
        })
        .collect();
    if aborted.is_empty() {
        Ok(points)
    } else {
        Err(CliError::Aborted(aborted.join("; ")))
    }
}

fn flipped_partials(x1: f64, x2: f64, beta: f64) -> prefdyn::Result<(f64, f64)> {
    let (d1, d2) = prefdyn::dynamics::dpo_partials(x1, x2, beta)?;
    Ok((-d1, d2))
}

pub fn verify_options(seed: u64, fault: Option<Fault>) -> VerifyOptions {
    let mut opts = VerifyOptions {
        seed,
        ..VerifyOptions::default()
    };
    if fault == Some(Fault::PartialsSign) {
        opts.partials = flipped_partials;
    }
    opts
}

/// Prints a pass/fail table to `w`; fails naming every failed check.
pub fn cmd_verify(opts: &VerifyOptions, w: &mut impl Write) -> Result<Vec<CheckResult>, CliError> {
    let results = verify::run_all(opts);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        writeln!(
            w,
            "{}  {:width$}  worst={:.3e}  limit={:.1e}  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.worst,
            r.threshold,
            r.detail,
        )?;
    }
    let failed: Vec<String> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name.clone())
        .collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Verify(failed))
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => cmd_train(&resolve(&args)?, &args.out),
        Command::Diagnose(args) => cmd_diagnose(&resolve(&args)?, &args.out),
        Command::Sweep { run, axis, values } => {
            let cfg = resolve(&run)?;
            let points = cmd_sweep(&cfg, axis, &values, &run.out, threads_from_env()?)?;
            for p in points {
                println!(
                    "{}={}  mean_alpha_positive={:.4}  mean_gamma_positive={:.4}  param_distance={:.4}",
                    axis.name(),
                    p.value,
                    p.mean_alpha_positive,
                    p.mean_gamma_positive,
                    p.param_distance
                );
            }
            Ok(())
        }
        Command::Verify { seed, inject_fault } => cmd_verify(
            &verify_options(seed, inject_fault),
            &mut std::io::stdout().lock(),
        )
        .map(|_| ()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(parse_config("", false).unwrap(), RunConfig::default());
        assert_eq!(parse_config("{}", true).unwrap(), RunConfig::default());
    }

    #[test]
    fn nested_keys_override() {
        let cfg = parse_config("steps = 7\n[loss]\nfamily = \"DPO\"\nK1 = 3.0\n", false).unwrap();
        assert_eq!(cfg.steps, 7);
        assert_eq!(cfg.loss.family, prefdyn::LossFamily::Dpo);
        assert_eq!(cfg.loss.k1, 3.0);
    }

    #[test]
    fn unknown_key_is_named_with_its_path() {
        let err = parse_config("[loss]\nfamilly = \"DPO\"\n", false).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("loss.familly"), "{err}");
        let err = parse_config("{\"stepz\": 3}", true).unwrap_err();
        assert!(err.to_string().contains("`stepz`"), "{err}");
    }

    #[test]
    fn bad_value_is_named_with_its_path() {
        let err = parse_config("[loss]\nfamily = \"PPO\"\n", false).unwrap_err();
        assert!(err.to_string().contains("loss.family"), "{err}");
    }

    #[test]
    fn resolved_json_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.loss.alpha_override = Some(0.3);
        cfg.eta = 0.1 + 0.2;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(parse_config(&text, true).unwrap(), cfg);
    }

    #[test]
    fn flags_override_config() {
        let args = RunArgs {
            config: None,
            out: PathBuf::from("unused"),
            seed: Some(9),
            code_convention: true,
            literal_denominator: true,
        };
        let cfg = resolve(&args).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.loss.convention, WeightConvention::Code);
        assert_eq!(cfg.loss.denominator, Denominator::Literal);
    }

    #[test]
    fn exit_codes() {
        assert_eq!(CliError::Config(String::new()).exit_code(), 1);
        assert_eq!(CliError::Aborted(String::new()).exit_code(), 2);
        assert_eq!(CliError::Verify(vec![]).exit_code(), 3);
    }

    #[test]
    fn sweep_values_parse_as_list() {
        let cli = Cli::try_parse_from(["prefdyn", "sweep", "--axis", "K1", "--values", "2,10,20"])
            .unwrap();
        match cli.command {
            Command::Sweep { axis, values, .. } => {
                assert_eq!(axis, SweepAxis::K1);
                assert_eq!(values, vec![2.0, 10.0, 20.0]);
            }
            other => panic!("{other:?}"),
        }
    }
}
