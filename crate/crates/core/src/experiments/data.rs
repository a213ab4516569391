//! Synthetic preference pairs.
//!
//! Conditions are drawn uniformly from `[−1, 1]^k`; candidates are the
//! condition's centre plus unit Gaussian noise and are scored by
//! `R(x0, c) = −‖x0 − centre(c)‖²`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataMode {
    /// Best and worst of `candidates_per_condition` draws.
    BestOfK,
    /// Chosen as in `best_of_k`; rejected is a small perturbation of it.
    NearDuplicate,
    /// Each pair independently `best_of_k` or `near_duplicate` with
    /// probability ½. The default: it spans both small- and large-margin
    /// pairs.
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n_pairs: usize,
    pub candidates_per_condition: usize,
    pub mode: DataMode,
    pub duplicate_eps: f64,
    pub condition_dim: usize,
    pub data_dim: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 256,
            candidates_per_condition: 4,
            mode: DataMode::Mixed,
            duplicate_eps: 0.05,
            condition_dim: 2,
            data_dim: 2,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidates_per_condition < 2 {
            return Err(Error::Config(
                "data.candidates_per_condition must be >= 2".into(),
            ));
        }
        if self.n_pairs == 0 {
            return Err(Error::Config("data.n_pairs must be >= 1".into()));
        }
        if self.data_dim == 0 || self.condition_dim == 0 {
            return Err(Error::Config(
                "data.data_dim and data.condition_dim must be >= 1".into(),
            ));
        }
        if !(self.duplicate_eps >= 0.0 && self.duplicate_eps.is_finite()) {
            return Err(Error::Config(
                "data.duplicate_eps must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Clean samples of one preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePair {
    pub x0_w: Vec<f64>,
    pub x0_l: Vec<f64>,
    pub c: Vec<f64>,
}

/// Point of data space a condition is centred on; conditions shorter than
/// the data dimension wrap around.
pub fn condition_centre(c: &[f64], data_dim: usize) -> Vec<f64> {
    (0..data_dim).map(|i| c[i % c.len()]).collect()
}

/// `−‖x0 − centre(c)‖²`.
pub fn synthetic_reward(x0: &[f64], c: &[f64]) -> f64 {
    let centre = condition_centre(c, x0.len());
    -x0.iter()
        .zip(&centre)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
}

/// Indices of the highest- and lowest-scoring candidates; ties go to the
/// lowest index.
pub fn best_and_worst(candidates: &[Vec<f64>], c: &[f64]) -> (usize, usize) {
    let scores: Vec<f64> = candidates.iter().map(|x| synthetic_reward(x, c)).collect();
    let mut best = 0;
    let mut worst = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
        if s < scores[worst] {
            worst = i;
        }
    }
    (best, worst)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn gen_pairs(cfg: &DataConfig) -> Result<Vec<SamplePair>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.data_dim;
    let mut pairs = Vec::with_capacity(cfg.n_pairs);
    for _ in 0..cfg.n_pairs {
        let c: Vec<f64> = (0..cfg.condition_dim)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let centre = condition_centre(&c, m);
        let candidates: Vec<Vec<f64>> = (0..cfg.candidates_per_condition)
            .map(|_| {
                gaussian_vec(&mut rng, m)
                    .iter()
                    .zip(&centre)
                    .map(|(n, o)| o + n)
                    .collect()
            })
            .collect();
        let (best, worst) = best_and_worst(&candidates, &c);
        let duplicate = match cfg.mode {
            DataMode::BestOfK => false,
            DataMode::NearDuplicate => true,
            DataMode::Mixed => rng.gen_bool(0.5),
        };
        let x0_w = candidates[best].clone();
        let x0_l = if duplicate {
            let noise = gaussian_vec(&mut rng, m);
            x0_w.iter()
                .zip(&noise)
                .map(|(x, n)| x + cfg.duplicate_eps * n)
                .collect()
        } else {
            candidates[worst].clone()
        };
        pairs.push(SamplePair { x0_w, x0_l, c });
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_rule_picks_closest() {
        let c = [0.0, 0.0];
        let cands = vec![vec![0.1, 0.0], vec![0.9, 0.0]];
        assert_eq!(best_and_worst(&cands, &c), (0, 1));
        let tied = vec![vec![0.5, 0.0], vec![0.0, 0.5], vec![0.5, 0.0]];
        assert_eq!(best_and_worst(&tied, &c), (0, 0));
    }

    #[test]
    fn zero_eps_duplicates_are_exact() {
        let cfg = DataConfig {
            mode: DataMode::NearDuplicate,
            duplicate_eps: 0.0,
            n_pairs: 10,
            ..DataConfig::default()
        };
        for p in gen_pairs(&cfg).unwrap() {
            assert_eq!(p.x0_w, p.x0_l);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = DataConfig {
            mode: DataMode::Mixed,
            n_pairs: 32,
            ..DataConfig::default()
        };
        assert_eq!(gen_pairs(&cfg).unwrap(), gen_pairs(&cfg).unwrap());
        let other = DataConfig { seed: 1, ..cfg };
        assert_ne!(gen_pairs(&cfg).unwrap(), gen_pairs(&other).unwrap());
    }

    #[test]
    fn chosen_scores_at_least_rejected() {
        let cfg = DataConfig {
            n_pairs: 64,
            mode: DataMode::BestOfK,
            ..DataConfig::default()
        };
        for p in gen_pairs(&cfg).unwrap() {
            assert!(synthetic_reward(&p.x0_w, &p.c) >= synthetic_reward(&p.x0_l, &p.c));
            assert!(p.c.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn rejects_single_candidate() {
        let cfg = DataConfig {
            candidates_per_condition: 1,
            ..DataConfig::default()
        };
        assert!(gen_pairs(&cfg).is_err());
    }
}
