//! Attack optimizers.
//!
//! All optimizers *descend* the chosen loss (the ledger writes every loss so
//! lower favors the adversary) and keep iterates inside the perturbation
//! budget and the valid sample range via [`clip_box`]. The white-box family
//! (one-step sign, iterated sign/Adam, and the change-of-variable
//! minimum-distortion attack) reads exact input gradients; the black-box
//! family in [`black`] estimates them from score queries.

mod black;

pub use black::{
    estimate_threshold, fakebob, fakebob_with, nes_estimate_gradient, nes_gradient,
    CountingOracle, GradientSource, ScoreOracle, ThresholdEstimate, ThresholdSearchConfig,
};

use crate::audio::Waveform;
use crate::losses::{
    eval_loss, goal_met, input_loss_grad, losses_for_setting, AttackSetting, LossError, LossId,
};
use crate::rng::seeded_rng;
use crate::srs::{decide, score, Decision, Embedder, SpeakerDatabase, SrsError};
use rand::Rng;

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("bad attack configuration: {0}")]
    BadConfig(&'static str),
    #[error("loss {0} is not eligible for the minimum-distortion optimizer on this setting")]
    NotCwEligible(&'static str),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("threshold probe is already accepted; estimation needs a rejected voice")]
    ProbeAlreadyAccepted,
    #[error("loss {0} needs a threshold, but none is known or estimable here")]
    ThresholdUnavailable(&'static str),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Srs(#[from] SrsError),
}

/// Which optimizer an [`AttackConfig`] drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Fgsm,
    Pgd,
    Cw2,
    Nes,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Fgsm => "fgsm",
            OptimizerKind::Pgd => "pgd",
            OptimizerKind::Cw2 => "cw2",
            OptimizerKind::Nes => "nes",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = AttackError;
    fn from_str(s: &str) -> Result<Self, AttackError> {
        match s {
            "fgsm" => Ok(OptimizerKind::Fgsm),
            "pgd" => Ok(OptimizerKind::Pgd),
            "cw2" => Ok(OptimizerKind::Cw2),
            "nes" => Ok(OptimizerKind::Nes),
            _ => Err(AttackError::BadConfig("optimizer must be fgsm, pgd, cw2, or nes")),
        }
    }
}

/// Shared knob block for every optimizer. Fields irrelevant to the selected
/// optimizer are ignored (the minimum-distortion attack has no epsilon; the
/// sign attacks have no distance weight).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub optimizer: OptimizerKind,
    /// Max-norm perturbation budget, in raw sample units.
    pub epsilon: f64,
    /// Per-iteration step size (or Adam learning rate).
    pub alpha: f64,
    pub iterations: usize,
    /// Start from a uniform point inside the budget box instead of the voice.
    pub random_start: bool,
    /// Use Adam instead of plain sign steps in the iterated attacks.
    pub adam: bool,
    /// Stop as soon as the goal decision holds.
    pub early_stop: bool,
    /// Confidence margin for the minimum-distortion attack.
    pub kappa: f64,
    /// Initial distance weight for the minimum-distortion attack.
    pub lambda_init: f64,
    pub binary_search_steps: usize,
    /// Score queries per gradient estimate (must be even; antithetic pairs).
    pub nes_samples: usize,
    /// Smoothing radius for gradient estimation.
    pub nes_sigma: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            optimizer: OptimizerKind::Pgd,
            epsilon: 0.002,
            alpha: 0.0004,
            iterations: 5,
            random_start: false,
            adam: false,
            early_stop: false,
            kappa: 0.0,
            lambda_init: 0.1,
            binary_search_steps: 9,
            nes_samples: 50,
            nes_sigma: 1e-3,
        }
    }
}

impl AttackConfig {
    /// Baseline configuration per optimizer: one step at the full budget for
    /// the one-shot attack, five budget-fifth steps for the iterated one,
    /// Adam at 0.01 for the minimum-distortion attack, and a patient
    /// early-stopping loop for the query-based attack.
    pub fn default_for(optimizer: OptimizerKind) -> Self {
        let base = AttackConfig::default();
        match optimizer {
            OptimizerKind::Fgsm => AttackConfig { optimizer, iterations: 1, ..base },
            OptimizerKind::Pgd => AttackConfig { optimizer, ..base },
            OptimizerKind::Cw2 => AttackConfig {
                optimizer,
                alpha: 0.01,
                iterations: 300,
                adam: true,
                ..base
            },
            OptimizerKind::Nes => AttackConfig {
                optimizer,
                iterations: 200,
                early_stop: true,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.epsilon > 0.0) && self.optimizer != OptimizerKind::Cw2 {
            return Err(AttackError::BadConfig("epsilon must be positive"));
        }
        if !(self.alpha > 0.0) {
            return Err(AttackError::BadConfig("alpha must be positive"));
        }
        if self.iterations == 0 {
            return Err(AttackError::BadConfig("iterations must be at least 1"));
        }
        if self.nes_samples < 2 || self.nes_samples % 2 != 0 {
            return Err(AttackError::BadConfig("nes_samples must be even and at least 2"));
        }
        if !(self.nes_sigma > 0.0) {
            return Err(AttackError::BadConfig("nes_sigma must be positive"));
        }
        if self.kappa < 0.0 {
            return Err(AttackError::BadConfig("kappa must be non-negative"));
        }
        if !(self.lambda_init > 0.0) {
            return Err(AttackError::BadConfig("lambda_init must be positive"));
        }
        if self.binary_search_steps == 0 {
            return Err(AttackError::BadConfig("binary_search_steps must be at least 1"));
        }
        Ok(())
    }
}

/// What an optimizer hands back. `success` is always recomputed from the
/// returned waveform's decision, never from loop bookkeeping.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub adversarial: Waveform,
    pub success: bool,
    pub final_decision: Decision,
    pub iterations_used: usize,
    /// Score queries spent (black-box attacks only; see the accounting note
    /// on [`fakebob`]). White-box attacks report 0.
    pub queries_used: u64,
    pub final_loss: f64,
    pub perturbation_linf: f64,
    pub perturbation_l2: f64,
}

/// The attacked system with its gradients exposed.
#[derive(Clone, Copy)]
pub struct WhiteBoxModel<'a> {
    pub db: &'a SpeakerDatabase,
    pub embedder: &'a Embedder,
}

impl<'a> WhiteBoxModel<'a> {
    pub fn new(db: &'a SpeakerDatabase, embedder: &'a Embedder) -> Self {
        WhiteBoxModel { db, embedder }
    }

    pub fn scores(&self, x: &Waveform) -> Result<Vec<f64>, AttackError> {
        Ok(score(x, self.db, self.embedder)?)
    }

    pub fn decide(&self, x: &Waveform) -> Result<Decision, AttackError> {
        let s = self.scores(x)?;
        Ok(decide(&s, self.db)?)
    }

    pub fn loss(&self, x: &Waveform, loss: LossId, setting: &AttackSetting) -> Result<f64, AttackError> {
        let s = self.scores(x)?;
        Ok(eval_loss(loss, &s, setting, self.db.threshold)?)
    }

    pub fn input_gradient(
        &self,
        x: &Waveform,
        loss: LossId,
        setting: &AttackSetting,
    ) -> Result<Vec<f64>, AttackError> {
        Ok(input_loss_grad(x, loss, setting, self.db, self.embedder)?)
    }

    pub fn goal_met(&self, x: &Waveform, setting: &AttackSetting) -> Result<bool, AttackError> {
        Ok(goal_met(setting, self.decide(x)?))
    }
}

/// Projects `candidate` into the intersection of the budget box around
/// `original` and the valid sample range: elementwise
/// `min(x + eps, 1, max(candidate, x - eps, -1))`.
pub fn clip_box(candidate: &[f64], original: &[f64], epsilon: f64) -> Vec<f64> {
    debug_assert_eq!(candidate.len(), original.len());
    candidate
        .iter()
        .zip(original.iter())
        .map(|(&c, &x)| (x + epsilon).min(1.0).min(c.max(x - epsilon).max(-1.0)))
        .collect()
}

/// `v > 0 -> 1`, `v < 0 -> -1`, zero stays zero (unlike `f64::signum`).
pub fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub(crate) fn perturbation_norms(adv: &Waveform, original: &Waveform) -> (f64, f64) {
    let mut linf = 0.0_f64;
    let mut sq = 0.0_f64;
    for (a, o) in adv.samples.iter().zip(original.samples.iter()) {
        let d = a - o;
        linf = linf.max(d.abs());
        sq += d * d;
    }
    (linf, sq.sqrt())
}

pub(crate) fn finish_outcome(
    model: &WhiteBoxModel,
    setting: &AttackSetting,
    loss: LossId,
    original: &Waveform,
    adversarial: Waveform,
    iterations_used: usize,
) -> Result<AttackOutcome, AttackError> {
    let scores = model.scores(&adversarial)?;
    let final_decision = decide(&scores, model.db)?;
    let final_loss = eval_loss(loss, &scores, setting, model.db.threshold)?;
    let success = goal_met(setting, final_decision);
    let (linf, l2) = perturbation_norms(&adversarial, original);
    Ok(AttackOutcome {
        adversarial,
        success,
        final_decision,
        iterations_used,
        queries_used: 0,
        final_loss,
        perturbation_linf: linf,
        perturbation_l2: l2,
    })
}

/// One-step sign attack: `x' = clip(x - eps * sign(grad))`.
pub fn fgsm(
    x: &Waveform,
    loss: LossId,
    setting: &AttackSetting,
    model: &WhiteBoxModel,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let g = model.input_gradient(x, loss, setting)?;
    if g.iter().any(|v| !v.is_finite()) {
        return Err(AttackError::NonFiniteGradient);
    }
    let stepped: Vec<f64> =
        x.samples.iter().zip(g.iter()).map(|(&xi, &gi)| xi - cfg.epsilon * sign0(gi)).collect();
    let adv = Waveform::new(clip_box(&stepped, &x.samples, cfg.epsilon));
    finish_outcome(model, setting, loss, x, adv, 1)
}

/// First-moment/second-moment adaptive step state.
pub(crate) struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(dim: usize, lr: f64) -> Self {
        Adam { m: vec![0.0; dim], v: vec![0.0; dim], t: 0, lr }
    }

    /// Returns the descent step (to subtract) for gradient `g`.
    pub(crate) fn step(&mut self, g: &[f64]) -> Vec<f64> {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        g.iter()
            .enumerate()
            .map(|(i, &gi)| {
                self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * gi;
                self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * gi * gi;
                let mhat = self.m[i] / bc1;
                let vhat = self.v[i] / bc2;
                self.lr * mhat / (vhat.sqrt() + Self::EPS)
            })
            .collect()
    }
}

/// The budgeted descent loop shared by the iterated white-box attack and the
/// query-based attack (which plugs in an estimated gradient). Returns the
/// final iterate and the number of gradient steps taken.
///
/// An all-zero gradient means the landscape is flat at the iterate (every
/// max-based loss hits this once saturated); the loop stops early since no
/// further progress is possible.
pub(crate) fn descend_loop(
    original: &Waveform,
    start: Waveform,
    cfg: &AttackConfig,
    mut grad_fn: impl FnMut(&Waveform) -> Result<Vec<f64>, AttackError>,
    mut goal_fn: impl FnMut(&Waveform) -> Result<bool, AttackError>,
) -> Result<(Waveform, usize), AttackError> {
    let mut current = start;
    let mut iterations_used = 0;
    if cfg.early_stop && goal_fn(&current)? {
        return Ok((current, 0));
    }
    let mut adam = cfg.adam.then(|| Adam::new(original.len(), cfg.alpha));
    for _ in 0..cfg.iterations {
        let g = grad_fn(&current)?;
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AttackError::NonFiniteGradient);
        }
        if g.iter().all(|&v| v == 0.0) {
            break;
        }
        let stepped: Vec<f64> = match adam.as_mut() {
            Some(adam) => {
                let step = adam.step(&g);
                current.samples.iter().zip(step.iter()).map(|(&xi, &si)| xi - si).collect()
            }
            None => current
                .samples
                .iter()
                .zip(g.iter())
                .map(|(&xi, &gi)| xi - cfg.alpha * sign0(gi))
                .collect(),
        };
        current = Waveform::new(clip_box(&stepped, &original.samples, cfg.epsilon));
        iterations_used += 1;
        if cfg.early_stop && goal_fn(&current)? {
            break;
        }
    }
    Ok((current, iterations_used))
}

/// Iterated sign (or Adam) attack under a max-norm budget, optionally from a
/// random start inside the budget box.
pub fn pgd(
    x: &Waveform,
    loss: LossId,
    setting: &AttackSetting,
    model: &WhiteBoxModel,
    cfg: &AttackConfig,
    seed: u64,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let start = if cfg.random_start {
        let mut rng = seeded_rng(seed);
        let jittered: Vec<f64> = x
            .samples
            .iter()
            .map(|&xi| xi + rng.gen_range(-cfg.epsilon..=cfg.epsilon))
            .collect();
        Waveform::new(clip_box(&jittered, &x.samples, cfg.epsilon))
    } else {
        x.clone()
    };
    let (adv, iters) = descend_loop(
        x,
        start,
        cfg,
        |w| model.input_gradient(w, loss, setting),
        |w| model.goal_met(w, setting),
    )?;
    finish_outcome(model, setting, loss, x, adv, iters)
}

/// Minimum-distortion attack via a change of variable.
///
/// Voices live in [-1, 1], so `x' = tanh(z)` ranges over exactly the valid
/// box and the optimization over `z` is unconstrained. The objective is
/// `max(L(x') + kappa, 0) + lambda * |x' - x|_2`; the first term only pushes
/// while the goal is unmet (the loss must be sign-tied to the decision,
/// which is what `cw_eligible` certifies), the second pays for distance.
/// `lambda` is bracket-searched across rounds for the largest value that
/// still succeeds, i.e. the strongest stealth pressure the attack tolerates;
/// the returned voice is the successful iterate with the smallest distortion
/// seen anywhere. Success additionally requires the goal decision to hold at
/// the candidate, keeping the loss-sign and decision views of success
/// aligned even at exact-tie boundaries.
pub fn cw2(
    x: &Waveform,
    loss: LossId,
    setting: &AttackSetting,
    model: &WhiteBoxModel,
    cfg: &AttackConfig,
) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let eligible = losses_for_setting(setting.id())
        .iter()
        .any(|spec| spec.loss == loss && spec.cw_eligible);
    if !eligible {
        return Err(AttackError::NotCwEligible(loss.name()));
    }
    // atanh needs |v| < 1; voices are clamped a hair inside the box.
    const BOUND: f64 = 1.0 - 1e-12;
    let z0: Vec<f64> = x.samples.iter().map(|&v| v.clamp(-BOUND, BOUND).atanh()).collect();

    let mut lambda_lo = 0.0_f64;
    let mut lambda_hi = 10.0 * cfg.lambda_init * 2f64.powi(cfg.binary_search_steps as i32);
    let mut lambda = cfg.lambda_init;

    let mut best: Option<(Waveform, f64)> = None; // smallest-distortion success
    let mut fallback: Option<(Waveform, f64)> = None; // lowest loss seen anywhere
    let mut total_iterations = 0usize;

    for _round in 0..cfg.binary_search_steps {
        let mut z = z0.clone();
        let mut adam = Adam::new(z.len(), cfg.alpha);
        let mut round_success = false;
        for iter in 0..=cfg.iterations {
            let x_adv = Waveform::new(z.iter().map(|&v| v.tanh()).collect());
            let scores = model.scores(&x_adv)?;
            let loss_val = eval_loss(loss, &scores, setting, model.db.threshold)?;
            let delta: Vec<f64> =
                x_adv.samples.iter().zip(x.samples.iter()).map(|(a, o)| a - o).collect();
            let l2 = delta.iter().map(|d| d * d).sum::<f64>().sqrt();
            if loss_val <= -cfg.kappa && goal_met(setting, decide(&scores, model.db)?) {
                round_success = true;
                if best.as_ref().map_or(true, |(_, bl2)| l2 < *bl2) {
                    best = Some((x_adv.clone(), l2));
                }
            }
            if fallback.as_ref().map_or(true, |(_, fl)| loss_val < *fl) {
                fallback = Some((x_adv.clone(), loss_val));
            }
            if iter == cfg.iterations {
                break;
            }
            // Gradient of the objective in x, then through tanh to z.
            let mut grad_x = vec![0.0; x.len()];
            if loss_val + cfg.kappa > 0.0 {
                let g = input_loss_grad(&x_adv, loss, setting, model.db, model.embedder)?;
                for (gx, gi) in grad_x.iter_mut().zip(g.iter()) {
                    *gx += gi;
                }
            }
            if l2 > 1e-12 {
                for (gx, d) in grad_x.iter_mut().zip(delta.iter()) {
                    *gx += lambda * d / l2;
                }
            }
            if grad_x.iter().any(|v| !v.is_finite()) {
                return Err(AttackError::NonFiniteGradient);
            }
            let grad_z: Vec<f64> = grad_x
                .iter()
                .zip(z.iter())
                .map(|(&gx, &zi)| {
                    let t = zi.tanh();
                    gx * (1.0 - t * t)
                })
                .collect();
            let step = adam.step(&grad_z);
            for (zi, si) in z.iter_mut().zip(step.iter()) {
                *zi -= si;
            }
            total_iterations += 1;
        }
        // Largest lambda that still succeeds: push up on success, down on
        // failure.
        if round_success {
            lambda_lo = lambda;
        } else {
            lambda_hi = lambda;
        }
        lambda = 0.5 * (lambda_lo + lambda_hi);
    }

    let adversarial = match (&best, &fallback) {
        (Some((adv, _)), _) => adv.clone(),
        (None, Some((adv, _))) => adv.clone(),
        (None, None) => x.clone(),
    };
    let mut outcome = finish_outcome(model, setting, loss, x, adversarial, total_iterations)?;
    // A returned success must carry the loss-sign certificate.
    outcome.success = best.is_some() && outcome.final_loss <= -cfg.kappa && outcome.success;
    Ok(outcome)
}
