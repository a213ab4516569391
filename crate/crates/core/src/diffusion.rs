//! Noise schedules, forward noising, the DDPM posterior mean and Gaussian
//! transition likelihoods.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::{self, Matrix};
use crate::net::{self, NetArch, ParamVector};

/// `1 − ᾱ_{t−1} − σ_t²` within this of zero is snapped to zero.
const VARIANCE_SLACK: f64 = 1e-12;

/// Discrete diffusion schedule indexed by `t ∈ [0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    steps: usize,
    alpha_bar: Vec<f64>,
    sigma: Vec<f64>,
}

impl Schedule {
    /// Validated schedule from cumulative products and transition stds,
    /// both of length `T + 1`.
    pub fn from_parts(alpha_bar: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if alpha_bar.len() < 2 {
            return Err(Error::InvalidSchedule("need T >= 1".into()));
        }
        if sigma.len() != alpha_bar.len() {
            return Err(Error::InvalidSchedule(format!(
                "alpha_bar has {} entries but sigma has {}",
                alpha_bar.len(),
                sigma.len()
            )));
        }
        if alpha_bar[0] != 1.0 {
            return Err(Error::InvalidSchedule("alpha_bar[0] must be 1".into()));
        }
        for w in alpha_bar.windows(2) {
            if !(w[1] < w[0]) || !(w[1] > 0.0) {
                return Err(Error::InvalidSchedule(
                    "alpha_bar must be strictly decreasing within (0, 1]".into(),
                ));
            }
        }
        if sigma.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::InvalidSchedule(
                "sigma must be finite and >= 0".into(),
            ));
        }
        Ok(Self {
            steps: alpha_bar.len() - 1,
            alpha_bar,
            sigma,
        })
    }

    /// `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigma[t]
    }

    /// Steps whose transition has a defined likelihood (σ_t > 0).
    pub fn likelihood_steps(&self) -> Vec<usize> {
        (1..=self.steps).filter(|&t| self.sigma[t] > 0.0).collect()
    }

    /// Same ᾱ with every σ_t = 0 (deterministic DDIM sampling).
    pub fn ddim(&self) -> Schedule {
        Schedule {
            steps: self.steps,
            alpha_bar: self.alpha_bar.clone(),
            sigma: vec![0.0; self.sigma.len()],
        }
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            Err(Error::Domain(format!(
                "step {t} outside 1..={}",
                self.steps
            )))
        } else {
            Ok(())
        }
    }

    /// σ_t, rejecting deterministic steps.
    pub fn likelihood_sigma(&self, t: usize) -> Result<f64> {
        self.check_step(t)?;
        let s = self.sigma[t];
        if s > 0.0 {
            Ok(s)
        } else {
            Err(Error::Domain(format!(
                "transition at step {t} is deterministic (sigma = 0)"
            )))
        }
    }

    /// `√(1 − ᾱ_{t−1} − σ_t²)`.
    fn direction_coeff(&self, t: usize) -> Result<f64> {
        let v = 1.0 - self.alpha_bar[t - 1] - self.sigma[t] * self.sigma[t];
        if v < -VARIANCE_SLACK {
            return Err(Error::InvalidSchedule(format!(
                "1 - alpha_bar[t-1] - sigma_t^2 = {v} < 0 at step {t}"
            )));
        }
        if v <= VARIANCE_SLACK {
            return Ok(0.0);
        }
        Ok(v.sqrt())
    }

    /// `(a, b)` with `posterior_mean = a · x_t + b · ε̂`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64)> {
        self.check_step(t)?;
        let ab = self.alpha_bar[t];
        let ab_prev = self.alpha_bar[t - 1];
        let d = self.direction_coeff(t)?;
        let a = (ab_prev / ab).sqrt();
        let b = d - (ab_prev * (1.0 - ab) / ab).sqrt();
        Ok((a, b))
    }
}

/// Linear-β DDPM schedule with σ_t set to the posterior std.
pub fn make_ddpm_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<Schedule> {
    if steps == 0 {
        return Err(Error::InvalidSchedule("T must be >= 1".into()));
    }
    if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
        return Err(Error::InvalidSchedule(format!(
            "need 0 < beta_min <= beta_max < 1, got [{beta_min}, {beta_max}]"
        )));
    }
    let beta = |t: usize| {
        if steps == 1 {
            beta_min
        } else {
            beta_min + (beta_max - beta_min) * (t - 1) as f64 / (steps - 1) as f64
        }
    };
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    let mut sigma = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    sigma.push(0.0);
    for t in 1..=steps {
        let b = beta(t);
        let prev = alpha_bar[t - 1];
        let cur = prev * (1.0 - b);
        alpha_bar.push(cur);
        sigma.push(((1.0 - prev) / (1.0 - cur) * b).sqrt());
    }
    Schedule::from_parts(alpha_bar, sigma)
}

/// Serializable schedule parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<Schedule> {
        make_ddpm_schedule(self.steps, self.beta_min, self.beta_max)
    }
}

/// `√ᾱ_t · x0 + √(1 − ᾱ_t) · ε`.
pub fn q_sample(x0: &[f64], t: usize, eps: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len("eps", x0.len(), eps.len())?;
    let ab = sched.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| s0 * x + s1 * e).collect())
}

/// `x̂_0 = (x_t − √(1−ᾱ_t) ε̂) / √ᾱ_t`.
pub fn predict_x0(x_t: &[f64], t: usize, eps_hat: &[f64], sched: &Schedule) -> Result<Vec<f64>> {
    sched.check_step(t)?;
    check_len("eps_hat", x_t.len(), eps_hat.len())?;
    let ab = sched.alpha_bar(t);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - s1 * e) / s0)
        .collect())
}

/// Mean of `p(x_{t−1} | x_t)` given a noise prediction.
pub fn posterior_mean(
    x_t: &[f64],
    t: usize,
    eps_hat: &[f64],
    sched: &Schedule,
) -> Result<Vec<f64>> {
    let x0 = predict_x0(x_t, t, eps_hat, sched)?;
    let d = sched.direction_coeff(t)?;
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let (s0, s1) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0
        .iter()
        .zip(x_t)
        .map(|(x0i, xti)| ab_prev.sqrt() * x0i + d * (xti - s0 * x0i) / s1)
        .collect())
}

/// `log N(x_prev; mean, σ² I)`.
pub fn transition_log_prob(x_prev: &[f64], mean: &[f64], sigma_t: f64) -> Result<f64> {
    check_len("mean", x_prev.len(), mean.len())?;
    if !(sigma_t > 0.0) {
        return Err(Error::Domain(format!("sigma_t must be > 0, got {sigma_t}")));
    }
    let m = x_prev.len() as f64;
    let var = sigma_t * sigma_t;
    let sq: f64 = x_prev
        .iter()
        .zip(mean)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(-0.5 * m * (2.0 * PI * var).ln() - sq / (2.0 * var))
}

/// Flow-matching noise level `σ_t = a·√(t / (1 − t))`.
pub fn flow_sigma(a: f64, t: f64) -> f64 {
    a * (t / (1.0 - t)).sqrt()
}

/// One Euler–Maruyama step of the stochastic flow-matching SDE.
pub fn flow_em_step(
    x_t: &[f64],
    t: f64,
    dt: f64,
    v: &[f64],
    a: f64,
    noise: &[f64],
) -> Result<Vec<f64>> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::Domain(format!("flow time {t} outside (0, 1)")));
    }
    if a < 0.0 {
        return Err(Error::Domain(format!("noise level a = {a} < 0")));
    }
    check_len("v", x_t.len(), v.len())?;
    check_len("noise", x_t.len(), noise.len())?;
    let s = flow_sigma(a, t);
    let k = s * s / (2.0 * t);
    let diffusion = s * dt.sqrt();
    Ok(x_t
        .iter()
        .zip(v)
        .zip(noise)
        .map(|((x, vi), n)| x + (vi + k * (x + (1.0 - t) * vi)) * dt + diffusion * n)
        .collect())
}

/// Noisy latent `x_t` at step `t` under condition `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyLatent {
    pub x: Vec<f64>,
    pub t: usize,
    pub c: Vec<f64>,
}

/// One reverse transition `x_t → x_prev` under condition `c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub x_prev: Vec<f64>,
    pub x_t: Vec<f64>,
    pub t: usize,
    pub c: Vec<f64>,
}

impl Transition {
    pub fn latent(&self) -> NoisyLatent {
        NoisyLatent {
            x: self.x_t.clone(),
            t: self.t,
            c: self.c.clone(),
        }
    }
}

/// Network plus schedule: the map `θ ↦ μ_θ(x_t)` and its likelihood.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub arch: NetArch,
    pub schedule: Schedule,
}

impl Denoiser {
    pub fn new(arch: NetArch, schedule: Schedule) -> Self {
        Self { arch, schedule }
    }

    pub fn t_norm(&self, t: usize) -> f64 {
        t as f64 / self.schedule.steps() as f64
    }

    pub fn eps(&self, params: &ParamVector, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        net::forward(&self.arch, params, x_t, self.t_norm(t), c)
    }

    /// μ_θ(x_t).
    pub fn mean(&self, params: &ParamVector, x_t: &[f64], t: usize, c: &[f64]) -> Result<Vec<f64>> {
        let eps = self.eps(params, x_t, t, c)?;
        posterior_mean(x_t, t, &eps, &self.schedule)
    }

    pub fn log_prob(&self, params: &ParamVector, tr: &Transition) -> Result<f64> {
        let sigma = self.schedule.likelihood_sigma(tr.t)?;
        let mean = self.mean(params, &tr.x_t, tr.t, &tr.c)?;
        transition_log_prob(&tr.x_prev, &mean, sigma)
    }

    /// `upstreamᵀ · ∂μ/∂θ`.
    pub fn mean_vjp(
        &self,
        params: &ParamVector,
        x_t: &[f64],
        t: usize,
        c: &[f64],
        upstream: &[f64],
    ) -> Result<ParamVector> {
        let (_, b) = self.schedule.posterior_coeffs(t)?;
        let u = math::scale(upstream, b);
        net::vjp(&self.arch, params, x_t, self.t_norm(t), c, &u)
    }

    /// `∂μ/∂θ` as an `m × P` matrix.
    pub fn mean_jacobian(
        &self,
        params: &ParamVector,
        x_t: &[f64],
        t: usize,
        c: &[f64],
    ) -> Result<Matrix> {
        let (_, b) = self.schedule.posterior_coeffs(t)?;
        let j = net::jacobian(&self.arch, params, x_t, self.t_norm(t), c)?;
        let rows: Vec<Vec<f64>> = (0..j.rows()).map(|i| math::scale(j.row(i), b)).collect();
        Ok(Matrix::from_rows(&rows))
    }

    /// `∂ log p / ∂μ = (x_prev − μ) / σ²`.
    pub fn mean_score(&self, params: &ParamVector, tr: &Transition) -> Result<Vec<f64>> {
        let sigma = self.schedule.likelihood_sigma(tr.t)?;
        check_len("x_prev", self.arch.output_dim, tr.x_prev.len())?;
        let mean = self.mean(params, &tr.x_t, tr.t, &tr.c)?;
        let inv_var = 1.0 / (sigma * sigma);
        Ok(tr
            .x_prev
            .iter()
            .zip(&mean)
            .map(|(x, mu)| (x - mu) * inv_var)
            .collect())
    }

    /// `∇_θ log p_θ(x_prev | x_t)`.
    pub fn grad_log_prob(&self, params: &ParamVector, tr: &Transition) -> Result<ParamVector> {
        let g = self.mean_score(params, tr)?;
        self.mean_vjp(params, &tr.x_t, tr.t, &tr.c, &g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::simpson;

    #[test]
    fn single_step_schedule() {
        let s = make_ddpm_schedule(1, 0.1, 0.1).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert_eq!(s.sigma(1), 0.0);
    }

    #[test]
    fn schedule_rejects_bad_ranges() {
        assert!(make_ddpm_schedule(0, 0.1, 0.2).is_err());
        assert!(make_ddpm_schedule(10, 0.0, 0.2).is_err());
        assert!(make_ddpm_schedule(10, 0.3, 0.2).is_err());
        assert!(make_ddpm_schedule(10, 0.1, 1.0).is_err());
        assert!(Schedule::from_parts(vec![1.0, 0.5, 0.6], vec![0.0; 3]).is_err());
        assert!(Schedule::from_parts(vec![0.9, 0.5], vec![0.0; 2]).is_err());
    }

    #[test]
    fn default_schedule_matches_cumprod_oracle() {
        let s = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let mut prod = 1.0;
        for i in 0..50 {
            let beta = 1e-4 + (0.02 - 1e-4) * i as f64 / 49.0;
            prod *= 1.0 - beta;
        }
        assert!((s.alpha_bar(50) - prod).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        // posterior std vanishes only at t = 1
        assert_eq!(s.likelihood_steps(), (2..=50).collect::<Vec<_>>());
    }

    #[test]
    fn q_sample_closed_form() {
        let s = Schedule::from_parts(vec![1.0, 0.75], vec![0.0, 0.1]).unwrap();
        let out = q_sample(&[0.0, 0.0], 1, &[1.0, 0.0], &s).unwrap();
        assert!((out[0] - 0.5).abs() < 1e-15 && out[1] == 0.0);
        assert!(q_sample(&[0.0], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let x0 = [0.3, -1.2];
        let eps = [0.7, 0.1];
        for t in [1, 17, 50] {
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            assert!((back[0] - x0[0]).abs() < 1e-12 && (back[1] - x0[1]).abs() < 1e-12);
        }
        let xt = [0.4, 0.2];
        let z = predict_x0(&xt, 30, &[0.0, 0.0], &s).unwrap();
        assert!((z[0] - 0.4 / s.alpha_bar(30).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn posterior_mean_boundaries() {
        let s = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let (xt, eps) = ([0.5, -0.4], [0.2, 0.9]);
        let x0 = predict_x0(&xt, 1, &eps, &s).unwrap();
        let mu = posterior_mean(&xt, 1, &eps, &s).unwrap();
        assert!((mu[0] - x0[0]).abs() < 1e-12 && (mu[1] - x0[1]).abs() < 1e-12);

        // σ_t chosen so the direction term vanishes
        let ab = vec![1.0, 0.9, 0.8];
        let sig = vec![0.0, 0.0, (1.0f64 - 0.9).sqrt()];
        let s2 = Schedule::from_parts(ab, sig).unwrap();
        let x0 = predict_x0(&xt, 2, &eps, &s2).unwrap();
        let mu = posterior_mean(&xt, 2, &eps, &s2).unwrap();
        for i in 0..2 {
            assert!((mu[i] - 0.9f64.sqrt() * x0[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_mean_rejects_oversized_sigma() {
        let s = Schedule::from_parts(vec![1.0, 0.9, 0.8], vec![0.0, 0.0, 0.5]).unwrap();
        assert!(posterior_mean(&[0.0], 2, &[0.0], &s).is_err());
    }

    #[test]
    fn posterior_coeffs_reproduce_mean() {
        let s = make_ddpm_schedule(50, 1e-4, 0.02).unwrap();
        let (xt, eps) = ([0.5, -0.4], [0.2, 0.9]);
        for t in [1, 2, 25, 50] {
            let (a, b) = s.posterior_coeffs(t).unwrap();
            let mu = posterior_mean(&xt, t, &eps, &s).unwrap();
            for i in 0..2 {
                assert!((mu[i] - (a * xt[i] + b * eps[i])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaussian_log_prob_values() {
        let v1 = transition_log_prob(&[0.3], &[0.3], 1.0).unwrap();
        assert!((v1 + 0.918_938_533_204_672_7).abs() < 1e-12);
        let v2 = transition_log_prob(&[0.3, 1.0], &[0.3, 1.0], 1.0).unwrap();
        assert!((v2 + 1.837_877_066_409_345_5).abs() < 1e-12);
        assert!(transition_log_prob(&[0.0], &[0.0], 0.0).is_err());
        let near = transition_log_prob(&[0.1], &[0.0], 0.5).unwrap();
        let far = transition_log_prob(&[0.4], &[0.0], 0.5).unwrap();
        assert!(near > far);
    }

    #[test]
    fn gaussian_density_integrates_to_one() {
        for sigma in [0.05, 1.0, 3.0] {
            let mean = 0.7;
            let total = simpson(
                |x| transition_log_prob(&[x], &[mean], sigma).unwrap().exp(),
                mean - 8.0 * sigma,
                mean + 8.0 * sigma,
                2000,
            );
            assert!((total - 1.0).abs() < 1e-6, "sigma={sigma} total={total}");
        }
    }

    #[test]
    fn flow_step_cases() {
        let x = [0.5, -1.0];
        let v = [0.2, 0.3];
        let n = [1.0, -1.0];
        let det = flow_em_step(&x, 0.4, 0.1, &v, 0.0, &n).unwrap();
        assert!((det[0] - 0.52).abs() < 1e-15 && (det[1] + 0.97).abs() < 1e-15);
        assert_eq!(flow_em_step(&x, 0.4, 0.0, &v, 0.7, &n).unwrap(), x.to_vec());
        assert!(flow_em_step(&x, 1.0, 0.1, &v, 0.7, &n).is_err());
        assert!(flow_em_step(&x, 0.0, 0.1, &v, 0.7, &n).is_err());

        // drift-only against the formula written out by hand
        let (t, dt, a) = (0.3, 0.05, 0.8);
        let s2 = a * a * t / (1.0 - t);
        let expect: Vec<f64> = (0..2)
            .map(|i| x[i] + (v[i] + s2 / (2.0 * t) * (x[i] + (1.0 - t) * v[i])) * dt)
            .collect();
        let got = flow_em_step(&x, t, dt, &v, a, &[0.0, 0.0]).unwrap();
        assert!((got[0] - expect[0]).abs() < 1e-14 && (got[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn zero_noise_flow_matches_euler_integration() {
        let mut x = vec![1.0, 2.0];
        let v = [0.5, -0.25];
        let dt = 0.01;
        let mut t = 0.1;
        for _ in 0..50 {
            x = flow_em_step(&x, t, dt, &v, 0.0, &[0.3, 0.3]).unwrap();
            t += dt;
        }
        assert!((x[0] - 1.25).abs() < 1e-12 && (x[1] - 1.875).abs() < 1e-12);
    }
}
