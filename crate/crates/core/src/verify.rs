//! Self-checks against independent oracles: finite differences, η-halving
//! convergence of first-order predictions, and closed-form identities.
//!
//! Every check is deterministic given [`VerifyOptions::seed`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::diffusion::{make_ddpm_schedule, transition_log_prob, Denoiser, Transition};
use crate::dynamics::{self, measured_dlogp, sgd_step};
use crate::error::Result;
use crate::losses::{self, LossConfig, LossFamily, PreferencePair, RewardPair};
use crate::net::{self, init_params, NetArch, ParamVector};
use crate::oracle::{central_difference, central_difference_grad, relative_error, simpson};

/// Signature of [`dynamics::dpo_partials`]; swappable so a test fixture can
/// inject a fault and confirm the suite catches it.
pub type PartialsFn = fn(f64, f64, f64) -> Result<(f64, f64)>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Random (params, pair, t) configurations per gradient check.
    pub configs: usize,
    /// Random (x₁, x₂, β) triples for the partials checks.
    pub partial_samples: usize,
    pub partials: PartialsFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 20,
            partial_samples: 100,
            partials: dynamics::dpo_partials,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed value of the checked statistic.
    pub worst: f64,
    pub threshold: f64,
    pub detail: String,
}

impl CheckResult {
    fn at_most(name: &str, worst: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_owned(),
            passed: worst <= threshold,
            worst,
            threshold,
            detail: detail.into(),
        }
    }

    fn failed(name: &str, err: impl std::fmt::Display) -> Self {
        Self {
            name: name.to_owned(),
            passed: false,
            worst: f64::NAN,
            threshold: f64::NAN,
            detail: format!("error: {err}"),
        }
    }
}

fn wrap(name: &str, r: Result<CheckResult>) -> CheckResult {
    r.unwrap_or_else(|e| CheckResult::failed(name, e))
}

/// Small model used by the checks.
pub fn check_model() -> Result<Denoiser> {
    Ok(Denoiser::new(
        NetArch::for_data(2, 2, 8, 2)?,
        make_ddpm_schedule(50, 1e-4, 0.02)?,
    ))
}

fn gauss(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

/// A transition whose target sits a few σ from the reference mean, so
/// log-likelihoods stay in a realistic range.
fn random_transition(
    model: &Denoiser,
    ref_params: &ParamVector,
    rng: &mut ChaCha8Rng,
    t: usize,
    c: &[f64],
) -> Result<Transition> {
    let x_t = gauss(rng, 2);
    let mu = model.mean(ref_params, &x_t, t, c)?;
    let sigma = model.schedule.likelihood_sigma(t)?;
    let x_prev = mu
        .iter()
        .zip(gauss(rng, 2))
        .map(|(m, z)| m + sigma * z)
        .collect();
    Ok(Transition {
        x_prev,
        x_t,
        t,
        c: c.to_vec(),
    })
}

/// One random configuration: current params, reference params, a pair and
/// a held-out observer sharing its step.
pub struct Config {
    pub params: ParamVector,
    pub ref_params: ParamVector,
    pub pair: PreferencePair,
    pub held_out: Transition,
}

pub fn random_config(model: &Denoiser, seed: u64, t_range: (usize, usize)) -> Result<Config> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ref_params = init_params(&model.arch, rng.gen());
    // Current params: a small perturbation of the reference, as after
    // some fine-tuning.
    let mut params = ref_params.clone();
    let noise = ParamVector::from_vec(gauss(&mut rng, params.len()));
    params.axpy(0.05, &noise);
    let t = rng.gen_range(t_range.0..=t_range.1);
    let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..=1.0)).collect();
    let chosen = random_transition(model, &ref_params, &mut rng, t, &c)?;
    let rejected = random_transition(model, &ref_params, &mut rng, t, &c)?;
    let held_out = random_transition(model, &ref_params, &mut rng, t, &c)?;
    Ok(Config {
        params,
        ref_params,
        pair: PreferencePair::from_transitions(chosen, rejected)?,
        held_out,
    })
}

/// Analytic network vjp against central differences of `u · f(θ)`.
pub fn check_net_vjp(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "net_vjp_fd";
    wrap(
        NAME,
        (|| {
            let arch = NetArch::for_data(2, 2, 8, 2)?;
            let mut worst: f64 = 0.0;
            for i in 0..opts.configs as u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(i));
                let p = init_params(&arch, rng.gen());
                let (x, c, u) = (gauss(&mut rng, 2), gauss(&mut rng, 2), gauss(&mut rng, 2));
                let t = rng.gen_range(0.0..1.0);
                let analytic = net::vjp(&arch, &p, &x, t, &c, &u)?;
                let fd = central_difference_grad(
                    |th| {
                        let out =
                            net::forward(&arch, &ParamVector::from_vec(th.to_vec()), &x, t, &c)
                                .expect("shapes fixed");
                        out.iter().zip(&u).map(|(o, w)| o * w).sum()
                    },
                    &p,
                    1e-6,
                );
                worst = worst.max(relative_error(&analytic, &fd, 1e-8));
            }
            Ok(CheckResult::at_most(
                NAME,
                worst,
                1e-6,
                format!("{} configs", opts.configs),
            ))
        })(),
    )
}

fn family_loss(
    model: &Denoiser,
    params: &ParamVector,
    cfg_set: &Config,
    slic_target: &Transition,
    frozen: Option<(f64, f64)>,
    cfg: &LossConfig,
) -> Result<(f64, ParamVector)> {
    let pair = &cfg_set.pair;
    let rp = &cfg_set.ref_params;
    Ok(match cfg.family {
        LossFamily::Sft => {
            let v = losses::sft_loss(model, params, pair.chosen())?;
            (v.loss, v.grad)
        }
        LossFamily::Dpo => {
            let o = losses::dpo_loss(model, params, rp, pair, cfg)?;
            (o.loss, o.grad)
        }
        LossFamily::Ipo => {
            let (v, _) = losses::ipo_loss(model, params, rp, pair, cfg)?;
            (v.loss, v.grad)
        }
        LossFamily::Slic => {
            let v = losses::slic_loss(model, params, pair, slic_target, cfg)?;
            (v.loss, v.grad)
        }
        LossFamily::PgDpo => {
            let r = losses::rewards(model, params, rp, pair)?;
            let (alpha, gamma) = frozen.expect("weights supplied");
            let o = losses::pgdpo_loss_frozen(model, params, pair, &r, alpha, gamma, cfg)?;
            (o.loss, o.grad)
        }
    })
}

/// Each family's analytic gradient against central differences, with
/// PG-DPO's α and γ held at their values at the unperturbed point.
pub fn check_loss_grads(opts: &VerifyOptions) -> Vec<CheckResult> {
    let families = [
        LossFamily::Sft,
        LossFamily::Dpo,
        LossFamily::Ipo,
        LossFamily::Slic,
        LossFamily::PgDpo,
    ];
    families
        .iter()
        .map(|&family| {
            let name = format!("grad_fd_{}", family.name().to_lowercase());
            wrap(
                &name,
                (|| {
                    let model = check_model()?;
                    let cfg = LossConfig {
                        family,
                        beta: 0.02,
                        delta_slic: 0.5,
                        ..LossConfig::default()
                    };
                    let mut worst: f64 = 0.0;
                    for i in 0..opts.configs as u64 {
                        let set = random_config(&model, opts.seed.wrapping_add(1000 + i), (2, 50))?;
                        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(5000 + i));
                        let target = random_transition(
                            &model,
                            &set.ref_params,
                            &mut rng,
                            set.pair.t(),
                            &set.pair.chosen().c,
                        )?;
                        let frozen = {
                            let r =
                                losses::rewards(&model, &set.params, &set.ref_params, &set.pair)?;
                            let sigma = model.schedule.likelihood_sigma(set.pair.t())?;
                            let err_scale = 2.0 * sigma * sigma / model.arch.output_dim as f64;
                            Some(losses::pgdpo_weights(&r, err_scale, &cfg))
                        };
                        let (_, analytic) =
                            family_loss(&model, &set.params, &set, &target, frozen, &cfg)?;
                        let fd = central_difference_grad(
                            |th| {
                                family_loss(
                                    &model,
                                    &ParamVector::from_vec(th.to_vec()),
                                    &set,
                                    &target,
                                    frozen,
                                    &cfg,
                                )
                                .expect("finite loss")
                                .0
                            },
                            &set.params,
                            1e-6,
                        );
                        worst = worst.max(relative_error(&analytic, &fd, 1e-8));
                    }
                    Ok(CheckResult::at_most(
                        &name,
                        worst,
                        1e-5,
                        format!("{} configs", opts.configs),
                    ))
                })(),
            )
        })
        .collect()
}

/// The direct DPO gradient against its decomposition into SFT gradients.
pub fn check_dpo_decomposition(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "dpo_decomposition";
    wrap(
        NAME,
        (|| {
            let model = check_model()?;
            let cfg = LossConfig {
                family: LossFamily::Dpo,
                ..LossConfig::default()
            };
            let mut worst: f64 = 0.0;
            for i in 0..opts.configs as u64 {
                let set = random_config(&model, opts.seed.wrapping_add(2000 + i), (2, 50))?;
                let direct =
                    losses::dpo_loss(&model, &set.params, &set.ref_params, &set.pair, &cfg)?.grad;
                let decomposed = losses::dpo_grad_decomposed(
                    &model,
                    &set.params,
                    &set.ref_params,
                    &set.pair,
                    &cfg,
                )?;
                worst = worst.max(relative_error(&direct, &decomposed, 1e-300));
            }
            Ok(CheckResult::at_most(
                NAME,
                worst,
                1e-10,
                format!("{} configs", opts.configs),
            ))
        })(),
    )
}

pub const RICHARDSON_ETAS: [f64; 3] = [1e-2, 1e-3, 1e-4];

/// Spread (max / min) of `|err(η)| / η²` over [`RICHARDSON_ETAS`]. A
/// first-order-correct prediction has a bounded second-order remainder,
/// so the spread stays O(1).
pub fn richardson_spread(mut err: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut scaled = Vec::with_capacity(RICHARDSON_ETAS.len());
    for eta in RICHARDSON_ETAS {
        scaled.push(err(eta)?.abs() / (eta * eta));
    }
    let max = scaled.iter().copied().fold(f64::MIN, f64::max);
    let min = scaled.iter().copied().fold(f64::MAX, f64::min);
    Ok(if min > 0.0 { max / min } else { f64::INFINITY })
}

/// Predicted against measured Δlog p for SFT and DPO steps at the
/// chosen, rejected and a held-out observer.
pub fn check_richardson(opts: &VerifyOptions) -> Vec<CheckResult> {
    let sft = wrap(
        "richardson_sft",
        (|| {
            let model = check_model()?;
            let mut worst: f64 = 0.0;
            for i in 0..opts.configs.min(5) as u64 {
                let set = random_config(&model, opts.seed.wrapping_add(3000 + i), (10, 45))?;
                let updater = set.pair.chosen();
                let grad = losses::sft_loss(&model, &set.params, updater)?.grad;
                for obs in [set.pair.chosen(), set.pair.rejected(), &set.held_out] {
                    worst = worst.max(richardson_spread(|eta| {
                        let after = sgd_step(&set.params, &grad, eta);
                        Ok(measured_dlogp(&model, &set.params, &after, obs)?
                            - dynamics::predicted_dlogp_sft(
                                &model,
                                &set.params,
                                obs,
                                updater,
                                eta,
                            )?)
                    })?);
                }
            }
            Ok(CheckResult::at_most(
                "richardson_sft",
                worst,
                10.0,
                "max/min of |meas − pred|/η²",
            ))
        })(),
    );
    let dpo = wrap(
        "richardson_dpo",
        (|| {
            let model = check_model()?;
            let cfg = LossConfig {
                family: LossFamily::Dpo,
                ..LossConfig::default()
            };
            let mut worst: f64 = 0.0;
            for i in 0..opts.configs.min(5) as u64 {
                let set = random_config(&model, opts.seed.wrapping_add(3100 + i), (10, 45))?;
                let grad =
                    losses::dpo_loss(&model, &set.params, &set.ref_params, &set.pair, &cfg)?.grad;
                for obs in [set.pair.chosen(), set.pair.rejected(), &set.held_out] {
                    worst = worst.max(richardson_spread(|eta| {
                        let after = sgd_step(&set.params, &grad, eta);
                        Ok(measured_dlogp(&model, &set.params, &after, obs)?
                            - dynamics::predicted_dlogp_dpo(
                                &model,
                                &set.params,
                                &set.ref_params,
                                obs,
                                &set.pair,
                                &cfg,
                                eta,
                            )?)
                    })?);
                }
            }
            Ok(CheckResult::at_most(
                "richardson_dpo",
                worst,
                10.0,
                "max/min of |meas − pred|/η²",
            ))
        })(),
    );
    vec![sft, dpo]
}

/// Γ against the measured difference between a PG-DPO and a DPO step at
/// the chosen sample.
pub fn check_gamma_richardson(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "gamma_richardson";
    wrap(
        NAME,
        (|| {
            let model = check_model()?;
            let cfg = LossConfig::default();
            let mut worst: f64 = 0.0;
            for i in 0..opts.configs.min(5) as u64 {
                let set = random_config(&model, opts.seed.wrapping_add(3200 + i), (10, 45))?;
                let (p, rp, pair) = (&set.params, &set.ref_params, &set.pair);
                let g_pg = losses::pgdpo_loss(&model, p, rp, pair, &cfg)?.grad;
                let g_dpo = losses::dpo_loss(&model, p, rp, pair, &cfg)?.grad;
                worst = worst.max(richardson_spread(|eta| {
                    let gain = measured_dlogp(&model, p, &sgd_step(p, &g_pg, eta), pair.chosen())?
                        - measured_dlogp(&model, p, &sgd_step(p, &g_dpo, eta), pair.chosen())?;
                    Ok(gain - dynamics::gamma_advantage(&model, p, rp, pair, &cfg, eta)?)
                })?);
            }
            Ok(CheckResult::at_most(
                NAME,
                worst,
                10.0,
                "max/min of |meas − Γ|/η²",
            ))
        })(),
    )
}

fn partial_samples(opts: &VerifyOptions) -> Vec<(f64, f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(4000));
    (0..opts.partial_samples)
        .map(|_| {
            (
                rng.gen_range(0.2..5.0),
                rng.gen_range(0.2..5.0),
                rng.gen_range(0.1..3.0),
            )
        })
        .collect()
}

fn dpo_in_ratios(x1: f64, x2: f64, beta: f64) -> f64 {
    let a = beta * x1.ln();
    let b = beta * x2.ln();
    // −ln(e^a / (e^a + e^b)) = softplus(b − a)
    crate::math::softplus(b - a)
}

/// Closed-form partials against central differences of the loss written in
/// likelihood ratios.
pub fn check_dpo_partials_fd(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "dpo_partials_fd";
    wrap(
        NAME,
        (|| {
            let mut worst: f64 = 0.0;
            for (x1, x2, beta) in partial_samples(opts) {
                let (d1, d2) = (opts.partials)(x1, x2, beta)?;
                let f1 = central_difference(|v| dpo_in_ratios(v, x2, beta), x1, 1e-5);
                let f2 = central_difference(|v| dpo_in_ratios(x1, v, beta), x2, 1e-5);
                worst = worst.max((d1 - f1).abs()).max((d2 - f2).abs());
            }
            Ok(CheckResult::at_most(
                NAME,
                worst,
                1e-8,
                format!("{} samples", opts.partial_samples),
            ))
        })(),
    )
}

/// `|∂L/∂x₂| / |∂L/∂x₁| = x₁ / x₂`.
pub fn check_dpo_partials_ratio(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "dpo_partials_ratio";
    wrap(
        NAME,
        (|| {
            let mut worst: f64 = 0.0;
            for (x1, x2, beta) in partial_samples(opts) {
                let (d1, d2) = (opts.partials)(x1, x2, beta)?;
                let ratio = d2.abs() / d1.abs();
                worst = worst.max((ratio - x1 / x2).abs() / (x1 / x2));
            }
            Ok(CheckResult::at_most(
                NAME,
                worst,
                1e-10,
                format!("{} samples", opts.partial_samples),
            ))
        })(),
    )
}

/// Closed-form identities at the loss boundaries.
pub fn check_boundaries(opts: &VerifyOptions) -> Vec<CheckResult> {
    let model = match check_model() {
        Ok(m) => m,
        Err(e) => return vec![CheckResult::failed("boundaries", e)],
    };
    let set = match random_config(&model, opts.seed.wrapping_add(6000), (2, 50)) {
        Ok(s) => s,
        Err(e) => return vec![CheckResult::failed("boundaries", e)],
    };
    let (p, rp, pair) = (&set.params, &set.ref_params, &set.pair);

    let pg_equals_dpo = wrap(
        "pgdpo_equals_dpo_at_unit_weights",
        (|| {
            let cfg = LossConfig {
                alpha_override: Some(1.0),
                gamma_override: Some(1.0),
                ..LossConfig::default()
            };
            let pg = losses::pgdpo_loss(&model, p, rp, pair, &cfg)?;
            let dpo = losses::dpo_loss(&model, p, rp, pair, &cfg)?;
            let err = ((pg.loss - dpo.loss).abs() / dpo.loss.abs().max(1e-300))
                .max(relative_error(&pg.grad, &dpo.grad, 1e-300));
            Ok(CheckResult::at_most(
                "pgdpo_equals_dpo_at_unit_weights",
                err,
                1e-12,
                "loss and gradient",
            ))
        })(),
    );

    let half_weights = wrap(
        "weights_half_at_zero_margin",
        (|| {
            let cfg = LossConfig::default();
            let at_ref = losses::rewards(&model, rp, rp, pair)?;
            let (a, g) = losses::pgdpo_weights(&at_ref, 1.0, &cfg);
            let tied = RewardPair::new(-0.7, -0.7);
            let (a2, g2) = losses::pgdpo_weights(&tied, 1.0, &cfg);
            let err = [a, g, a2, g2]
                .iter()
                .map(|v| (v - 0.5).abs())
                .fold(0.0, f64::max);
            Ok(CheckResult::at_most(
                "weights_half_at_zero_margin",
                err,
                0.0,
                "α and γ at r_w = r_l",
            ))
        })(),
    );

    let beta = 0.25;
    let h = dynamics::strength_factor_ipo(1.0 / (2.0 * beta), beta);
    let ipo_zero = CheckResult::at_most("ipo_zero_at_target_margin", h * h, 0.0, "β = 0.25");

    let slic_inactive = wrap(
        "slic_hinge_inactive_above_delta",
        (|| {
            let log_ratio =
                model.log_prob(p, pair.chosen())? - model.log_prob(p, pair.rejected())?;
            let cfg = LossConfig {
                family: LossFamily::Slic,
                delta_slic: log_ratio - 1.0,
                beta: 0.0,
                ..LossConfig::default()
            };
            let v = losses::slic_loss(&model, p, pair, pair.chosen(), &cfg)?;
            let worst = v.loss.abs().max(v.grad.norm());
            Ok(CheckResult::at_most(
                "slic_hinge_inactive_above_delta",
                worst,
                0.0,
                "loss and gradient vanish",
            ))
        })(),
    );

    vec![pg_equals_dpo, half_weights, ipo_zero, slic_inactive]
}

/// DPO gradient norm strictly decreasing in the margin when only the
/// margin moves.
pub fn check_saturation(opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "dpo_grad_norm_saturates";
    wrap(
        NAME,
        (|| {
            let model = check_model()?;
            let cfg = LossConfig {
                family: LossFamily::Dpo,
                ..LossConfig::default()
            };
            let set = random_config(&model, opts.seed.wrapping_add(7000), (10, 45))?;
            let bt = cfg.beta_t();
            let mut violations = 0usize;
            let mut last = f64::INFINITY;
            for i in 0..50 {
                // βT · shift from −4 to 8
                let shift = (-4.0 + 12.0 * i as f64 / 49.0) / bt;
                let n = losses::dpo_loss_shifted(
                    &model,
                    &set.params,
                    &set.ref_params,
                    &set.pair,
                    &cfg,
                    shift,
                )?
                .grad
                .norm();
                if !(n < last) {
                    violations += 1;
                }
                last = n;
            }
            Ok(CheckResult::at_most(
                NAME,
                violations as f64,
                0.0,
                "violations over 50 margins",
            ))
        })(),
    )
}

/// The transition density integrates to one.
pub fn check_normalisation(_opts: &VerifyOptions) -> CheckResult {
    const NAME: &str = "gaussian_normalisation";
    let mut worst: f64 = 0.0;
    for (mu, sigma) in [(0.0, 1.0), (0.3, 0.01), (-2.0, 0.2)] {
        let integral = simpson(
            |x| {
                transition_log_prob(&[x], &[mu], sigma)
                    .expect("scalar")
                    .exp()
            },
            mu - 12.0 * sigma,
            mu + 12.0 * sigma,
            2000,
        );
        worst = worst.max((integral - 1.0).abs());
    }
    CheckResult::at_most(NAME, worst, 1e-6, "1-D Simpson")
}

/// Every check, in a fixed order.
pub fn run_all(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![check_net_vjp(opts)];
    out.extend(check_loss_grads(opts));
    out.push(check_dpo_decomposition(opts));
    out.extend(check_richardson(opts));
    out.push(check_gamma_richardson(opts));
    out.push(check_dpo_partials_fd(opts));
    out.push(check_dpo_partials_ratio(opts));
    out.extend(check_boundaries(opts));
    out.push(check_saturation(opts));
    out.push(check_normalisation(opts));
    out
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}
