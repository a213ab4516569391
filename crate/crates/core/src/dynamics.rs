//! First-order learning dynamics of a single gradient-descent step.
//!
//! A GD step of size η on a loss moves θ by `−η∇L`; to first order the
//! log-likelihood at an observation point then changes by
//! `−η ∇log p(obs) · ∇L`. With `∇log p = J_μᵀ G` (J the Jacobian of the
//! transition mean, G the score in μ) this factors into G terms and the
//! empirical NTK block `J_a J_bᵀ`.

use serde::Serialize;

use crate::diffusion::{Denoiser, NoisyLatent, Transition};
use crate::error::{Error, Result};
use crate::losses::{self, gaussian_log_ratio, LossConfig, PreferencePair};
use crate::math::{self, sigmoid, Matrix};
use crate::net::ParamVector;

/// `(x_prev − μ_θ(x_t)) / σ_t²`.
#[derive(Debug, Clone, PartialEq)]
pub struct GTerm {
    pub g: Vec<f64>,
}

pub fn g_term(model: &Denoiser, params: &ParamVector, point: &Transition) -> Result<GTerm> {
    Ok(GTerm {
        g: model.mean_score(params, point)?,
    })
}

/// `J_μ(a) · J_μ(b)ᵀ`, an `m × m` block of the empirical NTK.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBlock {
    pub k: Matrix,
}

pub fn kernel_from_jacobians(ja: &Matrix, jb: &Matrix) -> KernelBlock {
    KernelBlock {
        k: ja.mul_transpose(jb),
    }
}

pub fn ntk_kernel(
    model: &Denoiser,
    params: &ParamVector,
    a: &NoisyLatent,
    b: &NoisyLatent,
) -> Result<KernelBlock> {
    let ja = model.mean_jacobian(params, &a.x, a.t, &a.c)?;
    let jb = model.mean_jacobian(params, &b.x, b.t, &b.c)?;
    Ok(kernel_from_jacobians(&ja, &jb))
}

/// `G(a) · K(a, b) · G(b)ᵀ`.
fn coupling(model: &Denoiser, params: &ParamVector, a: &Transition, b: &Transition) -> Result<f64> {
    let ga = g_term(model, params, a)?;
    let gb = g_term(model, params, b)?;
    let k = ntk_kernel(model, params, &a.latent(), &b.latent())?;
    Ok(k.k.bilinear(&ga.g, &gb.g))
}

/// θ − η · grad.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, eta: f64) -> ParamVector {
    let mut next = params.clone();
    next.axpy(-eta, grad);
    next
}

/// First-order Δ log p at `observer` after one SFT step of size η on `updater`.
pub fn predicted_dlogp_sft(
    model: &Denoiser,
    params: &ParamVector,
    observer: &Transition,
    updater: &Transition,
    eta: f64,
) -> Result<f64> {
    Ok(eta * coupling(model, params, observer, updater)?)
}

/// First-order Δ log p at `observer` after one DPO step of size η on `pair`.
pub fn predicted_dlogp_dpo(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    observer: &Transition,
    pair: &PreferencePair,
    cfg: &LossConfig,
    eta: f64,
) -> Result<f64> {
    let margin = losses::reward_margin(model, pair, params, ref_params)?;
    let a = sigmoid(cfg.beta_t() * margin);
    predicted_dlogp_dpo_at(model, params, observer, pair, cfg, a, eta)
}

/// As [`predicted_dlogp_dpo`] with the strength factor supplied.
pub fn predicted_dlogp_dpo_at(
    model: &Denoiser,
    params: &ParamVector,
    observer: &Transition,
    pair: &PreferencePair,
    cfg: &LossConfig,
    a: f64,
    eta: f64,
) -> Result<f64> {
    let scale = eta * cfg.beta_t() * (1.0 - a);
    if scale == 0.0 {
        return Ok(0.0);
    }
    let cw = coupling(model, params, observer, pair.chosen())?;
    let cl = coupling(model, params, observer, pair.rejected())?;
    Ok(scale * (cw - cl))
}

/// `log p_after(point) − log p_before(point)`.
pub fn measured_dlogp(
    model: &Denoiser,
    before: &ParamVector,
    after: &ParamVector,
    point: &Transition,
) -> Result<f64> {
    let sigma = model.schedule.likelihood_sigma(point.t)?;
    let mu_after = model.mean(after, &point.x_t, point.t, &point.c)?;
    let mu_before = model.mean(before, &point.x_t, point.t, &point.c)?;
    Ok(gaussian_log_ratio(
        &point.x_prev,
        &mu_after,
        &mu_before,
        sigma,
    ))
}

/// Γ: first-order gain in the chosen log-likelihood of a PG-DPO step over a
/// DPO step, `−η ∇log p_w · (∇L_PGDPO − ∇L_DPO)`.
pub fn gamma_advantage(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
    eta: f64,
) -> Result<f64> {
    let pg = losses::pgdpo_loss(model, params, ref_params, pair, cfg)?;
    let dpo = losses::dpo_loss(model, params, ref_params, pair, cfg)?;
    let glp = model.grad_log_prob(params, pair.chosen())?;
    Ok(gamma_from_grads(&glp, &pg.grad, &dpo.grad, eta))
}

pub(crate) fn gamma_from_grads(
    grad_log_p_w: &ParamVector,
    grad_pg: &ParamVector,
    grad_dpo: &ParamVector,
    eta: f64,
) -> f64 {
    if grad_pg == grad_dpo {
        return 0.0;
    }
    -eta * grad_log_p_w.dot(&grad_pg.sub(grad_dpo))
}

/// Partials of `L(x₁, x₂) = −ln(x₁^β / (x₁^β + x₂^β))` where `x₁`, `x₂` are
/// the chosen and rejected likelihood ratios.
pub fn dpo_partials(x1: f64, x2: f64, beta: f64) -> Result<(f64, f64)> {
    if !(x1 > 0.0 && x2 > 0.0) {
        return Err(Error::Domain(format!(
            "likelihood ratios must be positive, got ({x1}, {x2})"
        )));
    }
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("beta must be > 0, got {beta}")));
    }
    // divide through by x1^β to stay finite for large exponents
    let q = (x2 / x1).powf(beta);
    let d1 = -beta * q / (x1 * (1.0 + q));
    let d2 = beta * q / (x2 * (1.0 + q));
    Ok((d1, d2))
}

/// IPO strength factor `margin − 1/(2β)`.
pub fn strength_factor_ipo(margin: f64, beta: f64) -> f64 {
    margin - 1.0 / (2.0 * beta)
}

/// SLiC hinge indicator `𝟙(δ − log_ratio > 0)`.
pub fn slic_gate(log_ratio: f64, delta: f64) -> u8 {
    u8::from(delta - log_ratio > 0.0)
}

/// Everything recorded about one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub margin: f64,
    pub a: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub grad_norm: f64,
    pub pred_dlogp_w: f64,
    pub pred_dlogp_l: f64,
    pub pred_dlogp_obs: f64,
    pub meas_dlogp_w: f64,
    pub meas_dlogp_l: f64,
    pub meas_dlogp_obs: f64,
    pub similarity_factor: f64,
    pub gamma_advantage: f64,
}

/// Predicted and measured effects of one DPO step of size η on `pair`,
/// observed at the pair and at `observer`. `params` is not modified.
#[allow(clippy::too_many_arguments)]
pub fn step_diagnostics(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    observer: &Transition,
    cfg: &LossConfig,
    eta: f64,
    step: usize,
) -> Result<StepDiagnostics> {
    let dpo = losses::dpo_loss(model, params, ref_params, pair, cfg)?;
    let pg = losses::pgdpo_loss(model, params, ref_params, pair, cfg)?;
    let after = sgd_step(params, &dpo.grad, eta);
    let pred = |obs: &Transition| predicted_dlogp_dpo_at(model, params, obs, pair, cfg, dpo.a, eta);
    let meas = |obs: &Transition| measured_dlogp(model, params, &after, obs);
    let meas_w = meas(pair.chosen())?;
    let meas_l = meas(pair.rejected())?;
    let glp = model.grad_log_prob(params, pair.chosen())?;
    Ok(StepDiagnostics {
        step,
        margin: dpo.rewards.margin,
        a: dpo.a,
        alpha: pg.alpha,
        gamma: pg.gamma,
        grad_norm: dpo.grad.norm(),
        pred_dlogp_w: pred(pair.chosen())?,
        pred_dlogp_l: pred(pair.rejected())?,
        pred_dlogp_obs: pred(observer)?,
        meas_dlogp_w: meas_w,
        meas_dlogp_l: meas_l,
        meas_dlogp_obs: meas(observer)?,
        similarity_factor: meas_w - meas_l,
        gamma_advantage: gamma_from_grads(&glp, &pg.grad, &dpo.grad, eta),
    })
}

/// Frobenius norm of a kernel block.
pub fn kernel_norm(k: &KernelBlock) -> f64 {
    math::norm_sq(k.k.as_slice()).sqrt()
}
