//! Margin scans: gradient norm and similarity factor against the reward margin.

use serde::{Deserialize, Serialize};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::run::{DiagnoseConfig, Draw, Lab};
use crate::dynamics::{measured_dlogp, sgd_step};
use crate::error::{Error, Result};
use crate::losses::{dpo_loss, dpo_loss_shifted, LossConfig, PreferencePair};
use crate::net::ParamVector;

const STREAM_SCAN: u64 = 4;

/// One scanned pair, averaged over its draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanRow {
    pub index: usize,
    pub pair: usize,
    pub margin: f64,
    pub grad_norm: f64,
    pub similarity_factor: f64,
    pub pred_dlogp_w: f64,
    pub pred_dlogp_l: f64,
}

/// `n_points` groups of `draws_per_point` draws, each group sharing one
/// pair, from a stream independent of training and evaluation.
pub fn scan_draws(lab: &Lab, n_points: usize, draws_per_point: usize) -> Vec<Vec<Draw>> {
    let mut rng = ChaCha8Rng::seed_from_u64(lab.config.seed);
    rng.set_stream(STREAM_SCAN);
    (0..n_points)
        .map(|_| {
            let pair = rng.gen_range(0..lab.pairs.len());
            (0..draws_per_point)
                .map(|_| Draw {
                    pair,
                    ..lab.draw(&mut rng)
                })
                .collect()
        })
        .collect()
}

/// For each scan point: the mean reward margin, the norm of the mean DPO
/// gradient, and the measured similarity factor
/// `Δlog p_w − Δlog p_l` after one probe step of size `probe_eta` on that
/// gradient, all averaged over the point's draws. A single draw's margin
/// is dominated by the irreducible denoising error, so averaging is what
/// exposes a pair's systematic margin.
pub fn margin_scan(
    lab: &Lab,
    params: &ParamVector,
    ref_params: &ParamVector,
    diag: &DiagnoseConfig,
    cfg: &LossConfig,
) -> Result<Vec<ScanRow>> {
    if diag.draws_per_point == 0 {
        return Err(Error::Config(
            "diagnose.draws_per_point must be >= 1".into(),
        ));
    }
    let model = &lab.model;
    scan_draws(lab, diag.n_points, diag.draws_per_point)
        .iter()
        .enumerate()
        .map(|(index, draws)| {
            let k = draws.len() as f64;
            let pairs: Vec<PreferencePair> =
                draws.iter().map(|d| lab.pair(d)).collect::<Result<_>>()?;
            let mut grad = ParamVector::zeros(params.len());
            let mut glp_w = ParamVector::zeros(params.len());
            let mut glp_l = ParamVector::zeros(params.len());
            let mut margin = 0.0;
            for pair in &pairs {
                let o = dpo_loss(model, params, ref_params, pair, cfg)?;
                grad.axpy(1.0 / k, &o.grad);
                margin += o.rewards.margin / k;
                glp_w.axpy(1.0 / k, &model.grad_log_prob(params, pair.chosen())?);
                glp_l.axpy(1.0 / k, &model.grad_log_prob(params, pair.rejected())?);
            }
            let after = sgd_step(params, &grad, diag.probe_eta);
            let mut similarity = 0.0;
            for pair in &pairs {
                similarity += (measured_dlogp(model, params, &after, pair.chosen())?
                    - measured_dlogp(model, params, &after, pair.rejected())?)
                    / k;
            }
            Ok(ScanRow {
                index,
                pair: draws[0].pair,
                margin,
                grad_norm: grad.norm(),
                similarity_factor: similarity,
                pred_dlogp_w: -diag.probe_eta * glp_w.dot(&grad),
                pred_dlogp_l: -diag.probe_eta * glp_l.dot(&grad),
            })
        })
        .collect()
}

/// Holds one pair's geometry fixed and moves only its margin through
/// `shifts`; returns `(margin, ‖∇L_DPO‖)` per shift.
pub fn geometry_fixed_scan(
    lab: &Lab,
    params: &ParamVector,
    ref_params: &ParamVector,
    draw: &Draw,
    cfg: &LossConfig,
    shifts: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let pair = lab.pair(draw)?;
    shifts
        .iter()
        .map(|&s| {
            let o = dpo_loss_shifted(&lab.model, params, ref_params, &pair, cfg, s)?;
            Ok((o.rewards.margin, o.grad.norm()))
        })
        .collect()
}

/// Number of adjacent pairs (ordered by margin) where the second value
/// fails to strictly decrease.
pub fn decreasing_violations(points: &[(f64, f64)]) -> usize {
    let mut sorted = points.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    sorted.windows(2).filter(|w| !(w[1].1 < w[0].1)).count()
}

/// Average ranks (1-based), ties sharing their mean rank.
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = rank;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Spearman rank correlation; errors on length mismatch, fewer than two
/// points, or a constant input.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    crate::error::check_len("spearman input", a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::Domain("spearman needs at least two points".into()));
    }
    let rho = pearson(&ranks(a), &ranks(b));
    if rho.is_finite() {
        Ok(rho)
    } else {
        Err(Error::Domain(
            "spearman undefined for constant input".into(),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spearman_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap(), 1.0);
        assert_eq!(spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap(), -1.0);
        // Monotone but nonlinear still ranks perfectly.
        assert_eq!(spearman(&a, &[1.0, 8.0, 27.0, 64.0]).unwrap(), 1.0);
        assert!(spearman(&a, &[1.0, 1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn ties_share_ranks() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn violation_count() {
        assert_eq!(
            decreasing_violations(&[(0.0, 3.0), (1.0, 2.0), (2.0, 1.0)]),
            0
        );
        assert_eq!(
            decreasing_violations(&[(2.0, 3.0), (0.0, 2.0), (1.0, 2.0)]),
            2
        );
    }
}
