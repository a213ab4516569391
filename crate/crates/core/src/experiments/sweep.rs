//! One-axis hyperparameter sweeps over independent runs.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::run::{Lab, RunConfig, RunLog};
use crate::error::{Error, Result};
use crate::net::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    K1,
    K2,
    #[serde(rename = "beta")]
    Beta,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::K1 => "K1",
            SweepAxis::K2 => "K2",
            SweepAxis::Beta => "beta",
        }
    }

    pub fn apply(self, base: &RunConfig, value: f64) -> RunConfig {
        let mut cfg = *base;
        match self {
            SweepAxis::K1 => cfg.loss.k1 = value,
            SweepAxis::K2 => cfg.loss.k2 = value,
            SweepAxis::Beta => cfg.loss.beta = value,
        }
        cfg
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "K1" | "k1" => Ok(SweepAxis::K1),
            "K2" | "k2" => Ok(SweepAxis::K2),
            "beta" => Ok(SweepAxis::Beta),
            other => Err(Error::Config(format!(
                "unknown sweep axis `{other}` (expected K1, K2 or beta)"
            ))),
        }
    }
}

/// Outcome of one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    /// Mean α over trained pairs with a positive margin.
    pub mean_alpha_positive: f64,
    /// Mean γ over trained pairs with a positive margin.
    pub mean_gamma_positive: f64,
    /// Trained pairs with a positive margin.
    pub positive_pairs: usize,
    pub param_distance: f64,
    pub gamma_pos_frac: f64,
    /// `None` when the run aborted; `error` then says why.
    pub log: Option<RunLog>,
    pub error: Option<String>,
}

fn summarize(value: f64, outcome: Result<(RunLog, f64)>) -> SweepPoint {
    match outcome {
        Ok((log, dist)) => {
            let (alpha, gamma, n) = log.positive_margin_weights();
            SweepPoint {
                value,
                mean_alpha_positive: alpha,
                mean_gamma_positive: gamma,
                positive_pairs: n,
                param_distance: dist,
                gamma_pos_frac: log.gamma_pos_frac(),
                log: Some(log),
                error: None,
            }
        }
        Err(e) => SweepPoint {
            value,
            mean_alpha_positive: f64::NAN,
            mean_gamma_positive: f64::NAN,
            positive_pairs: 0,
            param_distance: f64::NAN,
            gamma_pos_frac: f64::NAN,
            log: match &e {
                Error::Aborted { partial, .. } => Some((**partial).clone()),
                _ => None,
            },
            error: Some(e.to_string()),
        },
    }
}

/// Runs `base` once per value of `axis`. The reference model does not
/// depend on the loss settings, so it is pretrained once and shared.
/// `threads` caps the worker count (`None` uses rayon's default).
pub fn sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[f64],
    threads: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    let configs: Vec<RunConfig> = values.iter().map(|&v| axis.apply(base, v)).collect();
    for c in &configs {
        c.validate()?;
    }
    let reference = Lab::new(*base)?.pretrain_reference()?;
    let run_one = |(cfg, &value): (&RunConfig, &f64)| -> SweepPoint {
        let outcome = (|| {
            let lab = Lab::new(*cfg)?;
            let out = lab.train_from(&reference)?;
            let dist = param_distance(&out.final_params, &out.ref_params);
            Ok((out.log, dist))
        })();
        summarize(value, outcome)
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| configs.par_iter().zip(values).map(run_one).collect()))
}

/// `‖a − b‖₂`.
pub fn param_distance(a: &ParamVector, b: &ParamVector) -> f64 {
    a.sub(b).norm()
}

/// True when every consecutive pair strictly increases.
pub fn strictly_increasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] > w[0])
}

/// True when every consecutive pair strictly decreases.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_parsing() {
        assert_eq!("K1".parse::<SweepAxis>().unwrap(), SweepAxis::K1);
        assert_eq!("beta".parse::<SweepAxis>().unwrap(), SweepAxis::Beta);
        assert!("gamma".parse::<SweepAxis>().is_err());
    }

    #[test]
    fn apply_touches_one_field() {
        let base = RunConfig::default();
        let c = SweepAxis::K2.apply(&base, 3.0);
        assert_eq!(c.loss.k2, 3.0);
        assert_eq!(c.loss.k1, base.loss.k1);
    }

    #[test]
    fn monotone_helpers() {
        assert!(strictly_increasing(&[1.0, 2.0, 3.0]));
        assert!(!strictly_increasing(&[1.0, 1.0]));
        assert!(strictly_decreasing(&[3.0, 2.0]));
        assert!(!strictly_decreasing(&[f64::NAN, 1.0]));
    }

    #[test]
    fn empty_values_rejected() {
        assert!(sweep(&RunConfig::default(), SweepAxis::K1, &[], Some(1)).is_err());
    }
}
