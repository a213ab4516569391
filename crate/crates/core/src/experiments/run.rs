//! Reference pretraining and the alignment training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::data::{gen_pairs, DataConfig, SamplePair};
use crate::diffusion::{posterior_mean, q_sample, Denoiser, ScheduleConfig, Transition};
use crate::dynamics;
use crate::error::{Error, Result};
use crate::losses::{self, LossConfig, LossFamily, PreferencePair, RewardPair};
use crate::net::{self, init_params, NetArch, ParamVector};

// RNG streams derived from the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_PRETRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;
const STREAM_TRAIN: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    /// Plain gradient descent; the only mode the first-order predictions hold for.
    #[default]
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub hidden_width: usize,
    pub hidden_layers: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            hidden_width: 64,
            hidden_layers: 2,
        }
    }
}

/// Settings for the post-training margin scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub n_points: usize,
    /// (t, noise) draws averaged per scan point; all share one pair.
    pub draws_per_point: usize,
    /// Step size of the probe update whose effect is measured per pair.
    pub probe_eta: f64,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            n_points: 50,
            draws_per_point: 8,
            probe_eta: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Learning rate η of the alignment phase.
    pub eta: f64,
    pub steps: usize,
    /// Pairs averaged per update.
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub pretrain_eta: f64,
    pub pretrain_batch: usize,
    pub eval_every: usize,
    pub eval_set_size: usize,
    pub optimizer: Optimizer,
    pub loss: LossConfig,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub net: NetConfig,
    pub diagnose: DiagnoseConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            eta: 1e-2,
            steps: 2000,
            batch_size: 16,
            pretrain_steps: 1000,
            pretrain_eta: 0.05,
            pretrain_batch: 16,
            eval_every: 100,
            eval_set_size: 512,
            optimizer: Optimizer::Gd,
            loss: LossConfig::default(),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            net: NetConfig::default(),
            diagnose: DiagnoseConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.data.validate()?;
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.pretrain_eta > 0.0 && self.pretrain_eta.is_finite()) {
            return Err(Error::Config("pretrain_eta must be > 0".into()));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.eval_every == 0 || self.eval_every > self.steps {
            return Err(Error::Config(format!(
                "eval_every must lie in 1..=steps ({}), got {}",
                self.steps, self.eval_every
            )));
        }
        if self.eval_set_size == 0 || self.pretrain_batch == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "eval_set_size, batch_size and pretrain_batch must be >= 1".into(),
            ));
        }
        if self.net.hidden_width == 0 {
            return Err(Error::Config("net.hidden_width must be >= 1".into()));
        }
        let d = &self.diagnose;
        if !(d.probe_eta > 0.0) || d.n_points == 0 || d.draws_per_point == 0 {
            return Err(Error::Config(
                "diagnose.probe_eta must be > 0; n_points and draws_per_point >= 1".into(),
            ));
        }
        let sched = self.schedule.build()?;
        if sched.likelihood_steps().is_empty() {
            return Err(Error::Config(
                "schedule has no step with a stochastic transition".into(),
            ));
        }
        Ok(())
    }

    pub fn arch(&self) -> Result<NetArch> {
        NetArch::for_data(
            self.data.data_dim,
            self.data.condition_dim,
            self.net.hidden_width,
            self.net.hidden_layers,
        )
    }

    pub fn model(&self) -> Result<Denoiser> {
        Ok(Denoiser::new(self.arch()?, self.schedule.build()?))
    }
}

/// One evaluation point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub chosen_logp: f64,
    pub rejected_logp: f64,
    pub margin: f64,
    pub alpha: f64,
    pub gamma: f64,
    /// Mean applied-gradient norm since the previous evaluation.
    pub grad_norm: f64,
    /// Mean Γ since the previous evaluation.
    pub gamma_advantage: f64,
    /// Fraction of all steps so far with Γ > 0.
    pub gamma_pos_frac: f64,
}

/// Per-update trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub grad_norm: f64,
    pub gamma_advantage: f64,
    /// Pairs in the batch with a positive reward margin.
    pub positive_pairs: usize,
    /// Sum of α over those pairs.
    pub alpha_positive_sum: f64,
    /// Sum of γ over those pairs.
    pub gamma_positive_sum: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub evals: Vec<EvalRecord>,
    pub steps: Vec<StepRecord>,
}

impl RunLog {
    pub fn first(&self) -> Option<&EvalRecord> {
        self.evals.first()
    }

    pub fn last(&self) -> Option<&EvalRecord> {
        self.evals.last()
    }

    /// Fraction of updates with Γ > 0.
    pub fn gamma_pos_frac(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let pos = self
            .steps
            .iter()
            .filter(|s| s.gamma_advantage > 0.0)
            .count();
        pos as f64 / self.steps.len() as f64
    }

    pub fn mean_alpha(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.alpha))
    }

    pub fn mean_gamma(&self) -> f64 {
        mean(self.steps.iter().map(|s| s.gamma))
    }

    /// Mean realized `(α, γ)` over every trained pair with a positive
    /// margin, and how many there were.
    pub fn positive_margin_weights(&self) -> (f64, f64, usize) {
        let n: usize = self.steps.iter().map(|s| s.positive_pairs).sum();
        if n == 0 {
            return (f64::NAN, f64::NAN, 0);
        }
        let a: f64 = self.steps.iter().map(|s| s.alpha_positive_sum).sum();
        let g: f64 = self.steps.iter().map(|s| s.gamma_positive_sum).sum();
        (a / n as f64, g / n as f64, n)
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// A noised pair draw: which pair, which step, which forward noise.
#[derive(Debug, Clone, PartialEq)]
pub struct Draw {
    pub pair: usize,
    pub t: usize,
    pub noise: Vec<f64>,
}

/// Data, model and config of one run.
#[derive(Debug, Clone)]
pub struct Lab {
    pub config: RunConfig,
    pub model: Denoiser,
    pub pairs: Vec<SamplePair>,
}

impl Lab {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = config.model()?;
        let pairs = gen_pairs(&config.data)?;
        Ok(Self {
            config,
            model,
            pairs,
        })
    }

    pub fn with_pairs(config: RunConfig, pairs: Vec<SamplePair>) -> Result<Self> {
        config.validate()?;
        if pairs.is_empty() {
            return Err(Error::Config("no preference pairs".into()));
        }
        let model = config.model()?;
        Ok(Self {
            config,
            model,
            pairs,
        })
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> Draw {
        let steps = self.model.schedule.likelihood_steps();
        Draw {
            pair: rng.gen_range(0..self.pairs.len()),
            t: *steps.choose(rng).expect("validated non-empty"),
            noise: gaussian_vec(rng, self.config.data.data_dim),
        }
    }

    /// Noised transition of a clean sample; the target is the true
    /// posterior mean given the clean sample.
    pub fn transition(&self, x0: &[f64], c: &[f64], t: usize, noise: &[f64]) -> Result<Transition> {
        let sched = &self.model.schedule;
        let x_t = q_sample(x0, t, noise, sched)?;
        let x_prev = posterior_mean(&x_t, t, noise, sched)?;
        Ok(Transition {
            x_prev,
            x_t,
            t,
            c: c.to_vec(),
        })
    }

    /// Preference pair for a draw; chosen and rejected share the noise.
    pub fn pair(&self, draw: &Draw) -> Result<PreferencePair> {
        let sp = &self.pairs[draw.pair];
        PreferencePair::from_transitions(
            self.transition(&sp.x0_w, &sp.c, draw.t, &draw.noise)?,
            self.transition(&sp.x0_l, &sp.c, draw.t, &draw.noise)?,
        )
    }

    /// Fixed evaluation draws, independent of the training stream.
    pub fn eval_set(&self) -> Vec<Draw> {
        let mut rng = stream(self.config.seed, STREAM_EVAL);
        (0..self.config.eval_set_size)
            .map(|_| self.draw(&mut rng))
            .collect()
    }

    pub fn init_params(&self) -> Result<ParamVector> {
        let arch = self.config.arch()?;
        let mut rng = stream(self.config.seed, STREAM_INIT);
        Ok(init_params(&arch, rng.gen()))
    }

    /// SFT pretraining of the reference denoiser with the noise-prediction
    /// objective on every chosen and rejected sample.
    pub fn pretrain_reference(&self) -> Result<ParamVector> {
        let mut params = self.init_params()?;
        let cfg = &self.config;
        if cfg.pretrain_steps == 0 {
            return Ok(params);
        }
        let pool: Vec<(&[f64], &[f64])> = self
            .pairs
            .iter()
            .flat_map(|p| {
                [
                    (p.x0_w.as_slice(), p.c.as_slice()),
                    (p.x0_l.as_slice(), p.c.as_slice()),
                ]
            })
            .collect();
        let arch = self.model.arch;
        let m = cfg.data.data_dim as f64;
        let mut rng = stream(cfg.seed, STREAM_PRETRAIN);
        let steps = self.model.schedule.steps();
        for step in 0..cfg.pretrain_steps {
            let mut grad = ParamVector::zeros(params.len());
            let mut loss = 0.0;
            for _ in 0..cfg.pretrain_batch {
                let (x0, c) = pool[rng.gen_range(0..pool.len())];
                let t = rng.gen_range(1..=steps);
                let noise = gaussian_vec(&mut rng, x0.len());
                let x_t = q_sample(x0, t, &noise, &self.model.schedule)?;
                let pred = net::forward(&arch, &params, &x_t, self.model.t_norm(t), c)?;
                let resid: Vec<f64> = pred.iter().zip(&noise).map(|(p, n)| p - n).collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>() / m;
                let upstream: Vec<f64> = resid.iter().map(|r| 2.0 * r / m).collect();
                grad.axpy(
                    1.0,
                    &net::vjp(&arch, &params, &x_t, self.model.t_norm(t), c, &upstream)?,
                );
            }
            let scale = 1.0 / cfg.pretrain_batch as f64;
            if !(loss.is_finite() && grad.is_finite()) {
                return Err(Error::Aborted {
                    step,
                    what: "non-finite pretraining loss".into(),
                    partial: Box::default(),
                });
            }
            params.axpy(-cfg.pretrain_eta * scale, &grad);
        }
        Ok(params)
    }

    /// Mean noise-prediction loss of `params` over `draws` (both members).
    pub fn denoising_loss(&self, params: &ParamVector, draws: &[Draw]) -> Result<f64> {
        let mut total = 0.0;
        for d in draws {
            let sp = &self.pairs[d.pair];
            for x0 in [&sp.x0_w, &sp.x0_l] {
                let x_t = q_sample(x0, d.t, &d.noise, &self.model.schedule)?;
                let pred = self.model.eps(params, &x_t, d.t, &sp.c)?;
                total += pred
                    .iter()
                    .zip(&d.noise)
                    .map(|(p, n)| (p - n) * (p - n))
                    .sum::<f64>()
                    / x0.len() as f64;
            }
        }
        Ok(total / (2 * draws.len()) as f64)
    }

    fn evaluate(
        &self,
        params: &ParamVector,
        ref_params: &ParamVector,
        eval: &[(PreferencePair, f64)],
    ) -> Result<(f64, f64, f64, f64, f64)> {
        let (mut cw, mut cl, mut mg, mut al, mut ga) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let cfg = &self.config.loss;
        for (pair, err_scale) in eval {
            cw += self.model.log_prob(params, pair.chosen())?;
            cl += self.model.log_prob(params, pair.rejected())?;
            let r = losses::rewards(&self.model, params, ref_params, pair)?;
            let (a, g) = losses::pgdpo_weights(&r, *err_scale, cfg);
            mg += r.margin;
            al += a;
            ga += g;
        }
        let n = eval.len() as f64;
        Ok((cw / n, cl / n, mg / n, al / n, ga / n))
    }

    /// Alignment training from a given reference snapshot.
    pub fn train_from(&self, ref_params: &ParamVector) -> Result<TrainOutcome> {
        let cfg = &self.config;
        let model = &self.model;
        let eval: Vec<(PreferencePair, f64)> = self
            .eval_set()
            .iter()
            .map(|d| {
                let sigma = model.schedule.sigma(d.t);
                Ok((
                    self.pair(d)?,
                    2.0 * sigma * sigma / cfg.data.data_dim as f64,
                ))
            })
            .collect::<Result<_>>()?;
        let mut rng = stream(cfg.seed, STREAM_TRAIN);
        let mut params = ref_params.clone();
        let mut adam = match cfg.optimizer {
            Optimizer::Gd => None,
            Optimizer::Adam => Some(Adam::new(params.len())),
        };
        let mut log = RunLog::default();
        let mut window_grad = 0.0;
        let mut window_gamma = 0.0;
        let mut window_n = 0usize;
        let mut gamma_pos = 0usize;

        let record = |log: &mut RunLog,
                      params: &ParamVector,
                      step: usize,
                      grad_norm: f64,
                      gamma_adv: f64,
                      gamma_pos_frac: f64|
         -> Result<()> {
            let (cw, cl, mg, al, ga) = self.evaluate(params, ref_params, &eval)?;
            log.evals.push(EvalRecord {
                step,
                chosen_logp: cw,
                rejected_logp: cl,
                margin: mg,
                alpha: al,
                gamma: ga,
                grad_norm,
                gamma_advantage: gamma_adv,
                gamma_pos_frac,
            });
            Ok(())
        };
        record(&mut log, &params, 0, 0.0, 0.0, 0.0)?;

        for step in 1..=cfg.steps {
            let ev = self.batch_step(&params, ref_params, &mut rng)?;
            let grad_norm = ev.grad.norm();
            let gamma_adv = ev.gamma_advantage;
            if !(ev.loss.is_finite() && grad_norm.is_finite() && gamma_adv.is_finite()) {
                return Err(Error::Aborted {
                    step,
                    what: format!(
                        "non-finite loss or gradient ({} loss)",
                        cfg.loss.family.name()
                    ),
                    partial: Box::new(log),
                });
            }
            match adam.as_mut() {
                None => params.axpy(-cfg.eta, &ev.grad),
                Some(opt) => opt.step(&mut params, &ev.grad, cfg.eta),
            }
            if gamma_adv > 0.0 {
                gamma_pos += 1;
            }
            window_grad += grad_norm;
            window_gamma += gamma_adv;
            window_n += 1;
            log.steps.push(StepRecord {
                step,
                loss: ev.loss,
                margin: ev.margin,
                alpha: ev.alpha,
                gamma: ev.gamma,
                grad_norm,
                gamma_advantage: gamma_adv,
                positive_pairs: ev.positive_pairs,
                alpha_positive_sum: ev.alpha_positive_sum,
                gamma_positive_sum: ev.gamma_positive_sum,
            });
            if step % cfg.eval_every == 0 || step == cfg.steps {
                let n = window_n as f64;
                record(
                    &mut log,
                    &params,
                    step,
                    window_grad / n,
                    window_gamma / n,
                    gamma_pos as f64 / step as f64,
                )?;
                if !params.is_finite() {
                    return Err(Error::Aborted {
                        step,
                        what: "non-finite parameters".into(),
                        partial: Box::new(log),
                    });
                }
                window_grad = 0.0;
                window_gamma = 0.0;
                window_n = 0;
            }
        }
        Ok(TrainOutcome {
            log,
            ref_params: ref_params.clone(),
            final_params: params,
        })
    }

    /// Mean loss, gradient and diagnostics over one minibatch of draws.
    /// Γ is the first-order gain in the batch-mean chosen log-likelihood.
    fn batch_step(
        &self,
        params: &ParamVector,
        ref_params: &ParamVector,
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchEval> {
        let cfg = &self.config;
        let model = &self.model;
        let n = params.len();
        let mut out = BatchEval {
            loss: 0.0,
            grad: ParamVector::zeros(n),
            margin: 0.0,
            alpha: 0.0,
            gamma: 0.0,
            gamma_advantage: 0.0,
            positive_pairs: 0,
            alpha_positive_sum: 0.0,
            gamma_positive_sum: 0.0,
        };
        let mut g_pg = ParamVector::zeros(n);
        let mut g_dpo = ParamVector::zeros(n);
        let mut g_logp_w = ParamVector::zeros(n);
        for _ in 0..cfg.batch_size {
            let draw = self.draw(rng);
            let pair = self.pair(&draw)?;
            let slic_target = if cfg.loss.family == LossFamily::Slic {
                let chosen = pair.chosen();
                let mu_ref = model.mean(ref_params, &chosen.x_t, chosen.t, &chosen.c)?;
                let sigma = model.schedule.sigma(chosen.t);
                let z = gaussian_vec(rng, mu_ref.len());
                Some(Transition {
                    x_prev: mu_ref.iter().zip(&z).map(|(m, z)| m + sigma * z).collect(),
                    ..chosen.clone()
                })
            } else {
                None
            };
            let ev = losses::evaluate(
                model,
                params,
                ref_params,
                &pair,
                slic_target.as_ref(),
                &cfg.loss,
            )?;
            out.loss += ev.loss;
            out.grad.axpy(1.0, &ev.grad);
            out.margin += ev.diag.margin;
            out.alpha += ev.diag.alpha;
            out.gamma += ev.diag.gamma;
            if ev.diag.margin > 0.0 {
                out.positive_pairs += 1;
                out.alpha_positive_sum += ev.diag.alpha;
                out.gamma_positive_sum += ev.diag.gamma;
            }
            // Both comparison gradients are combinations of ∇log p at the
            // pair, since the reference terms are constant.
            let glp_w = model.grad_log_prob(params, pair.chosen())?;
            let glp_l = model.grad_log_prob(params, pair.rejected())?;
            let r = RewardPair::new(ev.diag.r_w, ev.diag.r_l);
            let (pw, pl) = losses::pgdpo_reward_coeffs(&r, ev.diag.alpha, ev.diag.gamma, &cfg.loss);
            let (dw, dl) = losses::dpo_reward_coeffs(&r, &cfg.loss);
            g_pg.axpy(pw, &glp_w);
            g_pg.axpy(pl, &glp_l);
            g_dpo.axpy(dw, &glp_w);
            g_dpo.axpy(dl, &glp_l);
            g_logp_w.axpy(1.0, &glp_w);
        }
        let inv = 1.0 / cfg.batch_size as f64;
        out.loss *= inv;
        out.grad = out.grad.scaled(inv);
        out.margin *= inv;
        out.alpha *= inv;
        out.gamma *= inv;
        out.gamma_advantage = dynamics::gamma_from_grads(
            &g_logp_w.scaled(inv),
            &g_pg.scaled(inv),
            &g_dpo.scaled(inv),
            cfg.eta,
        );
        Ok(out)
    }

    /// Pretrain then align.
    pub fn run(&self) -> Result<TrainOutcome> {
        let reference = self.pretrain_reference()?;
        self.train_from(&reference)
    }
}

/// Adam with the usual defaults (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
struct BatchEval {
    loss: f64,
    grad: ParamVector,
    margin: f64,
    alpha: f64,
    gamma: f64,
    gamma_advantage: f64,
    positive_pairs: usize,
    alpha_positive_sum: f64,
    gamma_positive_sum: f64,
}

#[derive(Debug, Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamVector, grad: &ParamVector, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + 1e-8);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub log: RunLog,
    pub ref_params: ParamVector,
    pub final_params: ParamVector,
}

/// Final metrics of a run, written as `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub family: LossFamily,
    pub steps: usize,
    pub initial_chosen_logp: f64,
    pub final_chosen_logp: f64,
    pub initial_rejected_logp: f64,
    pub final_rejected_logp: f64,
    pub final_margin: f64,
    pub mean_alpha: f64,
    pub mean_gamma: f64,
    pub gamma_pos_frac: f64,
    pub param_distance_from_ref: f64,
    pub config: RunConfig,
}

impl TrainOutcome {
    pub fn summary(&self, config: &RunConfig) -> RunSummary {
        let first = self.log.first().copied().expect("initial eval recorded");
        let last = self.log.last().copied().expect("initial eval recorded");
        RunSummary {
            family: config.loss.family,
            steps: config.steps,
            initial_chosen_logp: first.chosen_logp,
            final_chosen_logp: last.chosen_logp,
            initial_rejected_logp: first.rejected_logp,
            final_rejected_logp: last.rejected_logp,
            final_margin: last.margin,
            mean_alpha: self.log.mean_alpha(),
            mean_gamma: self.log.mean_gamma(),
            gamma_pos_frac: self.log.gamma_pos_frac(),
            param_distance_from_ref: self.final_params.sub(&self.ref_params).norm(),
            config: *config,
        }
    }
}

/// Pretrained reference snapshot for `run`.
pub fn pretrain_reference(run: &RunConfig) -> Result<ParamVector> {
    Lab::new(*run)?.pretrain_reference()
}

/// Full run: data, reference pretraining and alignment.
pub fn train(run: &RunConfig) -> Result<RunLog> {
    Ok(Lab::new(*run)?.run()?.log)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            steps: 20,
            eval_every: 10,
            pretrain_steps: 5,
            eval_set_size: 8,
            net: NetConfig {
                hidden_width: 8,
                hidden_layers: 1,
            },
            data: DataConfig {
                n_pairs: 16,
                ..DataConfig::default()
            },
            ..RunConfig::default()
        }
    }

    #[test]
    fn zero_pretrain_returns_init() {
        let cfg = RunConfig {
            pretrain_steps: 0,
            ..small()
        };
        let lab = Lab::new(cfg).unwrap();
        assert_eq!(
            lab.pretrain_reference().unwrap(),
            lab.init_params().unwrap()
        );
    }

    #[test]
    fn pretraining_is_deterministic() {
        let cfg = small();
        assert_eq!(
            pretrain_reference(&cfg).unwrap(),
            pretrain_reference(&cfg).unwrap()
        );
    }

    #[test]
    fn training_is_deterministic_and_logs_evals() {
        let cfg = small();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a, b);
        let steps: Vec<usize> = a.evals.iter().map(|e| e.step).collect();
        assert_eq!(steps, vec![0, 10, 20]);
        assert_eq!(a.steps.len(), 20);
    }

    #[test]
    fn eval_every_must_fit() {
        let cfg = RunConfig {
            eval_every: 50,
            ..small()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn every_family_trains() {
        for family in [
            LossFamily::Sft,
            LossFamily::Dpo,
            LossFamily::Ipo,
            LossFamily::Slic,
            LossFamily::PgDpo,
        ] {
            let mut cfg = small();
            cfg.loss.family = family;
            cfg.loss.beta = 0.01;
            let log = train(&cfg).unwrap();
            assert!(log.evals.iter().all(|e| e.chosen_logp.is_finite()));
        }
    }

    #[test]
    fn adam_runs() {
        let cfg = RunConfig {
            optimizer: Optimizer::Adam,
            ..small()
        };
        assert!(train(&cfg).is_ok());
    }

    #[test]
    fn divergence_aborts_with_partial_log() {
        let mut cfg = small();
        cfg.loss.family = LossFamily::Sft;
        cfg.eta = 1e12;
        cfg.eval_every = 1;
        match train(&cfg) {
            Err(Error::Aborted { partial, .. }) => assert!(!partial.evals.is_empty()),
            other => panic!("expected abort, got {other:?}"),
        }
    }
}
