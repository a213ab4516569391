//! SFT, DPO, IPO, SLiC and PG-DPO losses with parameter gradients.
//!
//! Every likelihood here is the exact Gaussian transition density of the
//! denoiser, so implicit rewards are `log p_θ − log p_ref` at a single
//! reverse step. Gradients flow only through `p_θ`; the reference model is a
//! constant.

use serde::{Deserialize, Serialize};

use crate::diffusion::{Denoiser, Transition};
use crate::error::{Error, Result};
use crate::math::{neg_log_sigmoid, sigmoid};
use crate::net::ParamVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossFamily {
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "DPO")]
    Dpo,
    #[serde(rename = "IPO")]
    Ipo,
    #[serde(rename = "SLiC")]
    Slic,
    #[serde(rename = "PGDPO")]
    PgDpo,
}

impl LossFamily {
    pub fn name(self) -> &'static str {
        match self {
            LossFamily::Sft => "SFT",
            LossFamily::Dpo => "DPO",
            LossFamily::Ipo => "IPO",
            LossFamily::Slic => "SLiC",
            LossFamily::PgDpo => "PGDPO",
        }
    }
}

/// Which quantities feed the α/γ sigmoids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightConvention {
    /// Implicit rewards `r = log p_θ − log p_ref`.
    #[default]
    Reward,
    /// Mean squared-error differences `‖x − μ_θ‖² − ‖x − μ_ref‖²` with a
    /// signed `d_l + ε` denominator. The differences carry the opposite sign
    /// to rewards, which changes how α and γ respond to the margin.
    Code,
}

/// Denominator of the normalized margin in reward convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `|r_l| + ε`
    #[default]
    Abs,
    /// `r_l + ε`
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub family: LossFamily,
    /// KL strength β.
    pub beta: f64,
    /// Step-count multiplier in `βT`.
    #[serde(rename = "T")]
    pub steps: usize,
    #[serde(rename = "K1")]
    pub k1: f64,
    #[serde(rename = "K2")]
    pub k2: f64,
    pub eps_stab: f64,
    pub delta_slic: f64,
    pub convention: WeightConvention,
    pub denominator: Denominator,
    /// Pins α instead of computing it from the margin.
    pub alpha_override: Option<f64>,
    /// Pins γ instead of computing it from the margin.
    pub gamma_override: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            family: LossFamily::PgDpo,
            beta: 0.02,
            steps: 50,
            k1: 10.0,
            k2: 10.0,
            eps_stab: 1e-6,
            delta_slic: 0.0,
            convention: WeightConvention::Reward,
            denominator: Denominator::Abs,
            alpha_override: None,
            gamma_override: None,
        }
    }
}

impl LossConfig {
    /// `βT`.
    pub fn beta_t(&self) -> f64 {
        self.beta * self.steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.beta, self.k1, self.k2, self.eps_stab, self.delta_slic]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("loss parameters must be finite".into()));
        }
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "loss.beta must be > 0, got {}",
                self.beta
            )));
        }
        if self.steps == 0 {
            return Err(Error::Config("loss.T must be >= 1".into()));
        }
        if self.k1 < 0.0 || self.k2 < 0.0 {
            return Err(Error::Config("loss.K1 and loss.K2 must be >= 0".into()));
        }
        if !(self.eps_stab > 0.0) {
            return Err(Error::Config("loss.eps_stab must be > 0".into()));
        }
        if self.delta_slic < 0.0 {
            return Err(Error::Config("loss.delta_slic must be >= 0".into()));
        }
        for (name, v) in [
            ("loss.alpha_override", self.alpha_override),
            ("loss.gamma_override", self.gamma_override),
        ] {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
                }
            }
        }
        Ok(())
    }
}

/// Chosen/rejected transitions sharing a step and a condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    chosen: Transition,
    rejected: Transition,
}

impl PreferencePair {
    pub fn new(
        x_prev_w: Vec<f64>,
        x_t_w: Vec<f64>,
        x_prev_l: Vec<f64>,
        x_t_l: Vec<f64>,
        t: usize,
        c: Vec<f64>,
    ) -> Result<Self> {
        let all_finite = [&x_prev_w, &x_t_w, &x_prev_l, &x_t_l, &c]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if !all_finite {
            return Err(Error::Domain(
                "preference pair has non-finite entries".into(),
            ));
        }
        Ok(Self {
            chosen: Transition {
                x_prev: x_prev_w,
                x_t: x_t_w,
                t,
                c: c.clone(),
            },
            rejected: Transition {
                x_prev: x_prev_l,
                x_t: x_t_l,
                t,
                c,
            },
        })
    }

    pub fn from_transitions(chosen: Transition, rejected: Transition) -> Result<Self> {
        if chosen.t != rejected.t || chosen.c != rejected.c {
            return Err(Error::Domain(
                "chosen and rejected must share t and c".into(),
            ));
        }
        Self::new(
            chosen.x_prev,
            chosen.x_t,
            rejected.x_prev,
            rejected.x_t,
            chosen.t,
            chosen.c,
        )
    }

    pub fn chosen(&self) -> &Transition {
        &self.chosen
    }

    pub fn rejected(&self) -> &Transition {
        &self.rejected
    }

    pub fn t(&self) -> usize {
        self.chosen.t
    }

    /// Pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            chosen: self.rejected.clone(),
            rejected: self.chosen.clone(),
        }
    }
}

/// Implicit rewards of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardPair {
    pub r_w: f64,
    pub r_l: f64,
    pub margin: f64,
}

impl RewardPair {
    pub fn new(r_w: f64, r_l: f64) -> Self {
        Self {
            r_w,
            r_l,
            margin: r_w - r_l,
        }
    }
}

/// `log N(x; μ_a, σ²) − log N(x; μ_b, σ²)` without forming either term.
pub(crate) fn gaussian_log_ratio(x: &[f64], mu_a: &[f64], mu_b: &[f64], sigma: f64) -> f64 {
    // ‖x−μ_b‖² − ‖x−μ_a‖² = (μ_a − μ_b)·(2x − μ_a − μ_b)
    let s: f64 = x
        .iter()
        .zip(mu_a)
        .zip(mu_b)
        .map(|((xi, a), b)| (a - b) * (2.0 * xi - (a + b)))
        .sum();
    s / (2.0 * sigma * sigma)
}

/// `log p_θ(x_prev | x_t) − log p_ref(x_prev | x_t)`.
pub fn implicit_reward(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    tr: &Transition,
) -> Result<f64> {
    let sigma = model.schedule.likelihood_sigma(tr.t)?;
    let mu = model.mean(params, &tr.x_t, tr.t, &tr.c)?;
    let mu_ref = model.mean(ref_params, &tr.x_t, tr.t, &tr.c)?;
    crate::error::check_len("x_prev", mu.len(), tr.x_prev.len())?;
    Ok(gaussian_log_ratio(&tr.x_prev, &mu, &mu_ref, sigma))
}

pub fn rewards(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
) -> Result<RewardPair> {
    Ok(RewardPair::new(
        implicit_reward(model, params, ref_params, pair.chosen())?,
        implicit_reward(model, params, ref_params, pair.rejected())?,
    ))
}

/// `r_w − r_l`.
pub fn reward_margin(
    model: &Denoiser,
    pair: &PreferencePair,
    params: &ParamVector,
    ref_params: &ParamVector,
) -> Result<f64> {
    Ok(rewards(model, params, ref_params, pair)?.margin)
}

/// Scalar loss and its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    pub grad: ParamVector,
}

/// `−log p_θ(x_prev | x_t)`.
pub fn sft_loss(model: &Denoiser, params: &ParamVector, tr: &Transition) -> Result<LossValue> {
    let loss = -model.log_prob(params, tr)?;
    let grad = model.grad_log_prob(params, tr)?.scaled(-1.0);
    Ok(LossValue { loss, grad })
}

/// `dL/dr_w · ∇log p_w + dL/dr_l · ∇log p_l`, pushed through the mean.
fn reward_chain(
    model: &Denoiser,
    params: &ParamVector,
    pair: &PreferencePair,
    d_rw: f64,
    d_rl: f64,
) -> Result<ParamVector> {
    let mut grad = ParamVector::zeros(params.len());
    for (tr, coeff) in [(pair.chosen(), d_rw), (pair.rejected(), d_rl)] {
        if coeff == 0.0 {
            continue;
        }
        let upstream: Vec<f64> = model
            .mean_score(params, tr)?
            .iter()
            .map(|g| g * coeff)
            .collect();
        grad.axpy(
            1.0,
            &model.mean_vjp(params, &tr.x_t, tr.t, &tr.c, &upstream)?,
        );
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    pub grad: ParamVector,
    pub rewards: RewardPair,
    /// Strength factor `a = σ(βT · margin)`.
    pub a: f64,
}

/// `−ln σ(βT (r_w − r_l))`.
pub fn dpo_loss(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<DpoOutput> {
    dpo_loss_shifted(model, params, ref_params, pair, cfg, 0.0)
}

/// DPO with a constant added to the margin. The shift stands in for a change
/// of the reference log-likelihoods and leaves every gradient direction
/// untouched.
pub fn dpo_loss_shifted(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
    margin_shift: f64,
) -> Result<DpoOutput> {
    let base = rewards(model, params, ref_params, pair)?;
    let rw = RewardPair::new(base.r_w + margin_shift, base.r_l);
    let bt = cfg.beta_t();
    let z = bt * rw.margin;
    let a = sigmoid(z);
    let loss = neg_log_sigmoid(z);
    let k = (1.0 - a) * bt;
    let grad = reward_chain(model, params, pair, -k, k)?;
    debug_assert!({
        let alt = dpo_grad_from_sft(model, params, pair, a, cfg)?;
        let scale = grad.norm().max(alt.norm()).max(1e-300);
        !(grad.is_finite() && alt.is_finite() && scale.is_finite())
            || grad.sub(&alt).norm() / scale < 1e-10
            || grad.norm() < 1e-280
    });
    Ok(DpoOutput {
        loss,
        grad,
        rewards: rw,
        a,
    })
}

/// `Tβ(1 − a)(∇L_SFT(w) − ∇L_SFT(l))` for a given strength factor.
pub fn dpo_grad_from_sft(
    model: &Denoiser,
    params: &ParamVector,
    pair: &PreferencePair,
    a: f64,
    cfg: &LossConfig,
) -> Result<ParamVector> {
    let gw = sft_loss(model, params, pair.chosen())?.grad;
    let gl = sft_loss(model, params, pair.rejected())?.grad;
    Ok(gw.sub(&gl).scaled(cfg.beta_t() * (1.0 - a)))
}

/// DPO gradient via the SFT decomposition, with `a` taken at the current margin.
pub fn dpo_grad_decomposed(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<ParamVector> {
    let r = rewards(model, params, ref_params, pair)?;
    let a = sigmoid(cfg.beta_t() * r.margin);
    dpo_grad_from_sft(model, params, pair, a, cfg)
}

fn normalized_margin(num: f64, den: f64, mode: Denominator, eps: f64) -> f64 {
    match mode {
        Denominator::Abs => num / (den.abs() + eps),
        Denominator::Literal => num / (den + eps),
    }
}

/// ARS weight `σ(K₁ · (r_w − r_l) / (|r_l| + ε))`.
pub fn ars_alpha(r_w: f64, r_l: f64, cfg: &LossConfig) -> f64 {
    sigmoid(cfg.k1 * normalized_margin(r_w - r_l, r_l, cfg.denominator, cfg.eps_stab))
}

/// IPR weight `σ(−K₂ · (r_w − r_l) / (|r_l| + ε))`.
pub fn ipr_gamma(r_w: f64, r_l: f64, cfg: &LossConfig) -> f64 {
    sigmoid(-cfg.k2 * normalized_margin(r_w - r_l, r_l, cfg.denominator, cfg.eps_stab))
}

/// α and γ for a pair under the configured convention and overrides.
///
/// `err_scale` converts a reward into a mean squared-error difference:
/// `d = −r · err_scale` with `err_scale = 2σ²/m`.
pub fn pgdpo_weights(rewards: &RewardPair, err_scale: f64, cfg: &LossConfig) -> (f64, f64) {
    let (alpha, gamma) = match cfg.convention {
        WeightConvention::Reward => (
            ars_alpha(rewards.r_w, rewards.r_l, cfg),
            ipr_gamma(rewards.r_w, rewards.r_l, cfg),
        ),
        WeightConvention::Code => {
            let d_w = -rewards.r_w * err_scale;
            let d_l = -rewards.r_l * err_scale;
            let x = (d_w - d_l) / (d_l + cfg.eps_stab);
            (sigmoid(cfg.k1 * x), sigmoid(-cfg.k2 * x))
        }
    };
    (
        cfg.alpha_override.unwrap_or(alpha),
        cfg.gamma_override.unwrap_or(gamma),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgDpoOutput {
    pub loss: f64,
    pub grad: ParamVector,
    pub rewards: RewardPair,
    pub alpha: f64,
    pub gamma: f64,
}

/// `−[γ ln σ(βT r_w − α βT r_l) + (1 − γ) βT r_w]` with α, γ held constant.
pub fn pgdpo_loss(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<PgDpoOutput> {
    let r = rewards(model, params, ref_params, pair)?;
    let sigma = model.schedule.likelihood_sigma(pair.t())?;
    let err_scale = 2.0 * sigma * sigma / model.arch.output_dim as f64;
    let (alpha, gamma) = pgdpo_weights(&r, err_scale, cfg);
    pgdpo_loss_frozen(model, params, pair, &r, alpha, gamma, cfg)
}

/// `(∂L/∂r_w, ∂L/∂r_l)` of PG-DPO at frozen weights.
pub fn pgdpo_reward_coeffs(r: &RewardPair, alpha: f64, gamma: f64, cfg: &LossConfig) -> (f64, f64) {
    let bt = cfg.beta_t();
    let s = sigmoid(bt * (r.r_w - alpha * r.r_l));
    (
        -gamma * (1.0 - s) * bt - (1.0 - gamma) * bt,
        gamma * (1.0 - s) * alpha * bt,
    )
}

/// `(∂L/∂r_w, ∂L/∂r_l)` of DPO.
pub fn dpo_reward_coeffs(r: &RewardPair, cfg: &LossConfig) -> (f64, f64) {
    let bt = cfg.beta_t();
    let k = (1.0 - sigmoid(bt * r.margin)) * bt;
    (-k, k)
}

/// PG-DPO at explicit weights; `r` must be the rewards at `params`.
pub fn pgdpo_loss_frozen(
    model: &Denoiser,
    params: &ParamVector,
    pair: &PreferencePair,
    r: &RewardPair,
    alpha: f64,
    gamma: f64,
    cfg: &LossConfig,
) -> Result<PgDpoOutput> {
    let bt = cfg.beta_t();
    let z = bt * (r.r_w - alpha * r.r_l);
    let loss = gamma * neg_log_sigmoid(z) - (1.0 - gamma) * bt * r.r_w;
    let (d_rw, d_rl) = pgdpo_reward_coeffs(r, alpha, gamma, cfg);
    let grad = reward_chain(model, params, pair, d_rw, d_rl)?;
    Ok(PgDpoOutput {
        loss,
        grad,
        rewards: *r,
        alpha,
        gamma,
    })
}

/// `(r_w − r_l − 1/(2β))²`.
pub fn ipo_loss(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    cfg: &LossConfig,
) -> Result<(LossValue, RewardPair)> {
    let r = rewards(model, params, ref_params, pair)?;
    let h = crate::dynamics::strength_factor_ipo(r.margin, cfg.beta);
    let grad = reward_chain(model, params, pair, 2.0 * h, -2.0 * h)?;
    Ok((LossValue { loss: h * h, grad }, r))
}

/// `max(0, δ − (log p_θ(w) − log p_θ(l))) + β L_SFT(x_ref)`.
///
/// The hinge counts as inactive when its argument is exactly zero.
pub fn slic_loss(
    model: &Denoiser,
    params: &ParamVector,
    pair: &PreferencePair,
    x_ref: &Transition,
    cfg: &LossConfig,
) -> Result<LossValue> {
    let lw = model.log_prob(params, pair.chosen())?;
    let ll = model.log_prob(params, pair.rejected())?;
    let log_ratio = lw - ll;
    let gate = crate::dynamics::slic_gate(log_ratio, cfg.delta_slic);
    let reg = sft_loss(model, params, x_ref)?;
    let hinge = if gate == 1 {
        cfg.delta_slic - log_ratio
    } else {
        0.0
    };
    let g = f64::from(gate);
    let mut grad = reward_chain(model, params, pair, -g, g)?;
    grad.axpy(cfg.beta, &reg.grad);
    Ok(LossValue {
        loss: hinge + cfg.beta * reg.loss,
        grad,
    })
}

/// Per-evaluation extras shared by every family.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossDiag {
    pub margin: f64,
    pub r_w: f64,
    pub r_l: f64,
    pub a: f64,
    pub alpha: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub loss: f64,
    pub grad: ParamVector,
    pub diag: LossDiag,
}

/// Evaluates `cfg.family`. SFT trains on the chosen transition; SLiC needs
/// `slic_target`.
pub fn evaluate(
    model: &Denoiser,
    params: &ParamVector,
    ref_params: &ParamVector,
    pair: &PreferencePair,
    slic_target: Option<&Transition>,
    cfg: &LossConfig,
) -> Result<LossEval> {
    let r = rewards(model, params, ref_params, pair)?;
    let sigma = model.schedule.likelihood_sigma(pair.t())?;
    let err_scale = 2.0 * sigma * sigma / model.arch.output_dim as f64;
    let (alpha, gamma) = pgdpo_weights(&r, err_scale, cfg);
    let mut diag = LossDiag {
        margin: r.margin,
        r_w: r.r_w,
        r_l: r.r_l,
        a: sigmoid(cfg.beta_t() * r.margin),
        alpha,
        gamma,
    };
    let (loss, grad) = match cfg.family {
        LossFamily::Sft => {
            let v = sft_loss(model, params, pair.chosen())?;
            (v.loss, v.grad)
        }
        LossFamily::Dpo => {
            let o = dpo_loss(model, params, ref_params, pair, cfg)?;
            (o.loss, o.grad)
        }
        LossFamily::Ipo => {
            let (v, _) = ipo_loss(model, params, ref_params, pair, cfg)?;
            (v.loss, v.grad)
        }
        LossFamily::Slic => {
            let target = slic_target
                .ok_or_else(|| Error::Domain("SLiC needs a reference-sample target".into()))?;
            let v = slic_loss(model, params, pair, target, cfg)?;
            (v.loss, v.grad)
        }
        LossFamily::PgDpo => {
            let o = pgdpo_loss_frozen(model, params, pair, &r, alpha, gamma, cfg)?;
            diag.alpha = o.alpha;
            diag.gamma = o.gamma;
            (o.loss, o.grad)
        }
    };
    Ok(LossEval { loss, grad, diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::make_ddpm_schedule;
    use crate::net::{init_params, NetArch};

    fn model() -> Denoiser {
        Denoiser::new(
            NetArch::for_data(2, 2, 12, 2).unwrap(),
            make_ddpm_schedule(50, 1e-4, 0.02).unwrap(),
        )
    }

    fn pair(t: usize) -> PreferencePair {
        PreferencePair::new(
            vec![0.3, -0.2],
            vec![0.5, 0.1],
            vec![-0.4, 0.6],
            vec![-0.2, 0.8],
            t,
            vec![0.1, -0.3],
        )
        .unwrap()
    }

    #[test]
    fn scalar_hand_case_reward() {
        // m = 1, σ = 1, μ_θ = 0, μ_ref = 1, x = 0: −0 − (−½) = ½
        assert!((gaussian_log_ratio(&[0.0], &[0.0], &[1.0], 1.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn implicit_reward_is_log_density_difference() {
        let m = model();
        let p = init_params(&m.arch, 1);
        let r = init_params(&m.arch, 2);
        let tr = pair(40).chosen().clone();
        let direct = m.log_prob(&p, &tr).unwrap() - m.log_prob(&r, &tr).unwrap();
        let got = implicit_reward(&m, &p, &r, &tr).unwrap();
        assert!((direct - got).abs() < 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn closer_mean_gives_positive_reward() {
        let m = model();
        let p = init_params(&m.arch, 1);
        let r = init_params(&m.arch, 2);
        let mut tr = pair(40).chosen().clone();
        tr.x_prev = m.mean(&p, &tr.x_t, tr.t, &tr.c).unwrap();
        assert!(implicit_reward(&m, &p, &r, &tr).unwrap() > 0.0);
        assert!(implicit_reward(&m, &r, &p, &tr).unwrap() < 0.0);
    }

    #[test]
    fn sft_stationary_at_mean() {
        let m = model();
        let p = init_params(&m.arch, 2);
        let mut tr = pair(20).chosen().clone();
        tr.x_prev = m.mean(&p, &tr.x_t, tr.t, &tr.c).unwrap();
        let v = sft_loss(&m, &p, &tr).unwrap();
        let sigma = m.schedule.sigma(20);
        let expect = (2.0 * std::f64::consts::PI * sigma * sigma).ln();
        assert!((v.loss - expect).abs() < 1e-12);
        assert!(v.grad.norm() < 1e-12);
        let mu = tr.x_prev.clone();
        tr.x_prev = vec![mu[0] + 0.01, mu[1]];
        let l1 = sft_loss(&m, &p, &tr).unwrap().loss;
        tr.x_prev = vec![mu[0] + 0.02, mu[1]];
        let l2 = sft_loss(&m, &p, &tr).unwrap().loss;
        assert!(l2 > l1);
    }

    #[test]
    fn dpo_at_zero_margin_is_ln2() {
        let m = model();
        let p = init_params(&m.arch, 3);
        let out = dpo_loss(&m, &p, &p, &pair(10), &LossConfig::default()).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.a, 0.5);
    }

    #[test]
    fn dpo_unit_margin_value_and_saturation() {
        let m = model();
        let p = init_params(&m.arch, 3);
        let cfg = LossConfig {
            beta: 0.02,
            ..LossConfig::default()
        };
        // βT = 1, so a unit shift gives softplus(−1)
        let out = dpo_loss_shifted(&m, &p, &p, &pair(10), &cfg, 1.0).unwrap();
        assert!((out.loss - 0.313_261_687_518_222_8).abs() < 1e-12);
        let sat = dpo_loss_shifted(&m, &p, &p, &pair(10), &cfg, 60.0).unwrap();
        assert!(sat.loss < 1e-25);
        let free = dpo_loss(&m, &p, &p, &pair(10), &cfg).unwrap();
        assert!(sat.grad.norm() < 1e-20 * free.grad.norm().max(1.0));
    }

    #[test]
    fn alpha_gamma_values() {
        let cfg = LossConfig::default();
        assert_eq!(ars_alpha(0.4, 0.4, &cfg), 0.5);
        assert_eq!(ipr_gamma(-2.0, -2.0, &cfg), 0.5);
        // K = 10, (r_w − r_l)/(|r_l| + ε) = 0.1 (ε = 0 here for an exact ratio)
        let exact = LossConfig {
            eps_stab: f64::MIN_POSITIVE,
            ..cfg
        };
        assert!((ars_alpha(1.1, 1.0, &exact) - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((ipr_gamma(1.1, 1.0, &exact) - 0.268_941_421_369_995_1).abs() < 1e-12);
        let flat = LossConfig { k1: 0.0, ..cfg };
        assert_eq!(ars_alpha(5.0, -3.0, &flat), 0.5);
        assert!(ipr_gamma(1e6, 1.0, &cfg) < 1e-12);
    }

    #[test]
    fn literal_denominator_flips_with_negative_rejected_reward() {
        let abs = LossConfig::default();
        let lit = LossConfig {
            denominator: Denominator::Literal,
            ..abs
        };
        // positive margin, negative r_l
        assert!(ars_alpha(-0.5, -1.0, &abs) > 0.5);
        assert!(ars_alpha(-0.5, -1.0, &lit) < 0.5);
    }

    #[test]
    fn pgdpo_reduces_to_dpo_at_unit_weights() {
        let m = model();
        let p = init_params(&m.arch, 4);
        let r = init_params(&m.arch, 5);
        let cfg = LossConfig {
            beta: 0.001,
            alpha_override: Some(1.0),
            gamma_override: Some(1.0),
            ..LossConfig::default()
        };
        let pg = pgdpo_loss(&m, &p, &r, &pair(30), &cfg).unwrap();
        let dpo = dpo_loss(&m, &p, &r, &pair(30), &cfg).unwrap();
        assert!((pg.loss - dpo.loss).abs() < 1e-12);
        assert!(pg.grad.max_abs_diff(&dpo.grad) <= 1e-12 * dpo.grad.norm().max(1.0));
    }

    #[test]
    fn pgdpo_gamma_zero_is_reward_maximization() {
        let m = model();
        let p = init_params(&m.arch, 4);
        let r = init_params(&m.arch, 5);
        let cfg = LossConfig {
            beta: 0.001,
            gamma_override: Some(0.0),
            ..LossConfig::default()
        };
        let pg = pgdpo_loss(&m, &p, &r, &pair(30), &cfg).unwrap();
        let rw = implicit_reward(&m, &p, &r, pair(30).chosen()).unwrap();
        assert!((pg.loss + cfg.beta_t() * rw).abs() < 1e-12);
        let expect = m
            .grad_log_prob(&p, pair(30).chosen())
            .unwrap()
            .scaled(-cfg.beta_t());
        assert!(pg.grad.max_abs_diff(&expect) < 1e-12 * expect.norm().max(1.0));
    }

    #[test]
    fn ipo_minimum_and_value() {
        let m = model();
        let p = init_params(&m.arch, 6);
        let cfg = LossConfig {
            beta: 0.5,
            ..LossConfig::default()
        };
        let (v, r) = ipo_loss(&m, &p, &p, &pair(12), &cfg).unwrap();
        assert_eq!(r.margin, 0.0);
        assert!((v.loss - 1.0).abs() < 1e-15);
    }

    #[test]
    fn slic_inactive_hinge_is_pure_regularizer() {
        let m = model();
        let p = init_params(&m.arch, 7);
        let mut pr = pair(15);
        let ratio = |pr: &PreferencePair| {
            m.log_prob(&p, pr.chosen()).unwrap() - m.log_prob(&p, pr.rejected()).unwrap()
        };
        if ratio(&pr) < 0.0 {
            pr = pr.swapped();
        }
        let x_ref = pr.chosen().clone();
        let cfg = LossConfig {
            delta_slic: 0.5 * ratio(&pr),
            beta: 0.3,
            ..LossConfig::default()
        };
        let v = slic_loss(&m, &p, &pr, &x_ref, &cfg).unwrap();
        let reg = sft_loss(&m, &p, &x_ref).unwrap();
        assert!((v.loss - 0.3 * reg.loss).abs() < 1e-12);
        assert!(v.grad.max_abs_diff(&reg.grad.scaled(0.3)) < 1e-12);
    }

    #[test]
    fn slic_tie_is_inactive() {
        let m = model();
        let p = init_params(&m.arch, 7);
        let tr = pair(15).chosen().clone();
        let same = PreferencePair::from_transitions(tr.clone(), tr.clone()).unwrap();
        let cfg = LossConfig {
            delta_slic: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let v = slic_loss(&m, &p, &same, &tr, &cfg).unwrap();
        assert_eq!(v.loss, 0.0);
        assert_eq!(v.grad.norm(), 0.0);
    }

    #[test]
    fn margin_is_antisymmetric() {
        let m = model();
        let p = init_params(&m.arch, 8);
        let r = init_params(&m.arch, 9);
        let pr = pair(25);
        let a = reward_margin(&m, &pr, &p, &r).unwrap();
        let b = reward_margin(&m, &pr.swapped(), &p, &r).unwrap();
        assert!(a != 0.0);
        assert_eq!(a, -b);
    }

    #[test]
    fn pair_requires_shared_step_and_condition() {
        let w = pair(10).chosen().clone();
        let mut l = pair(10).rejected().clone();
        l.t = 11;
        assert!(PreferencePair::from_transitions(w.clone(), l).is_err());
        assert!(
            PreferencePair::new(vec![f64::NAN], vec![0.0], vec![0.0], vec![0.0], 3, vec![])
                .is_err()
        );
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig {
            beta: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            eps_stab: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(LossConfig {
            alpha_override: Some(1.5),
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
