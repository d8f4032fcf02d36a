//! Local training: proximal subproblems, their solvers, and step schedules.
//!
//! Each round a client minimizes `F_i(w) + (rho/2) ||w - center||^2` where
//! `center` is its personalized cloud model and `rho = lambda / alpha_k`.
//! Solves are inexact: a fixed epoch budget of mini-batch steps, matching
//! how such systems are actually run. The quadratic kind also has a
//! closed-form solution used as a test oracle.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::fmath;
use crate::models::{LabeledDataset, LossModel};
use crate::params::{sq_distance, ParamVector};
use crate::{Error, Result};

/// One client's proximal subproblem for one round.
#[derive(Debug, Clone)]
pub struct ProxProblem<'a> {
    pub model: &'a LossModel,
    pub data: &'a LabeledDataset,
    /// Prox center (the personalized cloud model `u_i`).
    pub center: &'a ParamVector,
    /// Proximal coefficient `lambda / alpha_k`.
    pub rho: f64,
}

impl<'a> ProxProblem<'a> {
    pub fn new(
        model: &'a LossModel,
        data: &'a LabeledDataset,
        center: &'a ParamVector,
        rho: f64,
    ) -> Result<Self> {
        if !(rho.is_finite() && rho > 0.0) {
            return Err(Error::Domain(format!("rho must be positive, got {rho}")));
        }
        if center.len() != model.param_dim() {
            return Err(Error::DimensionMismatch {
                context: "prox center",
                expected: model.param_dim(),
                actual: center.len(),
            });
        }
        Ok(Self {
            model,
            data,
            center,
            rho,
        })
    }
}

/// `F(w) + (rho/2) ||w - center||^2`.
pub fn prox_objective(p: &ProxProblem, w: &ParamVector) -> Result<f64> {
    let loss = p.model.loss(w, p.data)?;
    Ok(loss + 0.5 * p.rho * sq_distance(w, p.center)?)
}

/// Exact minimizer of the quadratic prox subproblem
/// `0.5 ||w - c||^2 + (rho/2) ||w - center||^2`, i.e.
/// `(c + rho * center) / (1 + rho)` coordinatewise.
pub fn prox_solve_quadratic(
    c: &ParamVector,
    center: &ParamVector,
    rho: f64,
) -> Result<ParamVector> {
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Domain(format!("rho must be positive, got {rho}")));
    }
    let scale = 1.0 / (1.0 + rho);
    ParamVector::new(
        c.iter()
            .zip(center.iter())
            .map(|(cv, uv)| (cv + rho * uv) * scale)
            .collect(),
    )
}

/// Local update rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SolverMethod {
    Sgd,
    /// Adam with the standard moment constants 0.9 / 0.999 and eps 1e-8,
    /// state reset at the start of every solve.
    #[default]
    Adam,
}

/// Mini-batch solver configuration. Defaults: 10 epochs, batch size 100,
/// learning rate 1e-3, Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub method: SolverMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 100,
            learning_rate: 1e-3,
            method: SolverMethod::Adam,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Domain(
                "epochs and batch size must be positive".into(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Domain(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Runs `cfg.epochs` passes of mini-batch updates on the prox objective's
/// gradient (`grad F + rho (w - center)`) starting from the center, with a
/// descent guard: if the final iterate does not improve on the start, the
/// whole solve retries with a halved learning rate (same batch order), up to
/// 5 times, after which the start point is returned unchanged. Non-finite
/// iterates count as failed attempts; an objective that is already non-finite
/// at the start is a divergence error.
///
/// `rho = 0` is accepted and turns the solve into plain local training from
/// `center` (used by the global baselines); the [`ProxProblem`] constructor
/// still requires `rho > 0`, so build the problem struct directly for that.
pub fn prox_solve_iterative(
    p: &ProxProblem,
    cfg: &SolverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ParamVector> {
    cfg.validate()?;
    if !(p.rho.is_finite() && p.rho >= 0.0) {
        return Err(Error::Domain(format!("rho must be >= 0, got {}", p.rho)));
    }
    let start_obj = objective_raw(p, p.center.as_slice())?;
    if !start_obj.is_finite() {
        return Err(Error::NumericalDivergence {
            client: None,
            round: None,
        });
    }

    for attempt in 0..=5 {
        let lr = cfg.learning_rate * fmath::powi(0.5, attempt);
        // Each attempt replays the same batch order.
        let mut attempt_rng = rng.clone();
        if let Some(candidate) = run_epochs(p, cfg, lr, &mut attempt_rng) {
            let obj = objective_raw(p, &candidate)?;
            if obj.is_finite() && obj <= start_obj {
                // Consume the stream only once the result is accepted, so the
                // caller's stream state does not depend on retry count.
                *rng = attempt_rng;
                return ParamVector::new(candidate).map_err(|_| Error::NumericalDivergence {
                    client: None,
                    round: None,
                });
            }
        }
    }
    Ok(p.center.clone())
}

fn objective_raw(p: &ProxProblem, w: &[f64]) -> Result<f64> {
    if w.len() != p.model.param_dim() {
        return Err(Error::DimensionMismatch {
            context: "prox iterate",
            expected: p.model.param_dim(),
            actual: w.len(),
        });
    }
    let loss = p.model.batch_loss(w, p.data, None);
    let penalty: f64 = w
        .iter()
        .zip(p.center.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(loss + 0.5 * p.rho * penalty)
}

/// One full solve attempt; `None` if an iterate went non-finite.
fn run_epochs(
    p: &ProxProblem,
    cfg: &SolverConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<f64>> {
    let d = p.model.param_dim();
    let n = p.data.len();
    let mut w: Vec<f64> = p.center.as_slice().to_vec();
    let mut g = vec![0.0; d];
    let mut indices: Vec<usize> = (0..n).collect();
    let mut batch = Vec::with_capacity(cfg.batch_size.min(n));

    let mut adam_m = vec![0.0; d];
    let mut adam_v = vec![0.0; d];
    let mut adam_t = 0u32;

    for _ in 0..cfg.epochs {
        indices.shuffle(rng);
        for chunk in indices.chunks(cfg.batch_size) {
            // The shuffle decides batch membership only; accumulation runs in
            // index order so results do not depend on the draw order.
            batch.clear();
            batch.extend_from_slice(chunk);
            batch.sort_unstable();
            p.model.batch_grad(&w, p.data, Some(&batch), &mut g);
            for (gk, (wk, ck)) in g.iter_mut().zip(w.iter().zip(p.center.iter())) {
                *gk += p.rho * (wk - ck);
            }
            match cfg.method {
                SolverMethod::Sgd => {
                    for (wk, gk) in w.iter_mut().zip(g.iter()) {
                        *wk -= lr * gk;
                    }
                }
                SolverMethod::Adam => {
                    adam_t += 1;
                    let bias1 = 1.0 - fmath::powi(ADAM_BETA1, adam_t as i32);
                    let bias2 = 1.0 - fmath::powi(ADAM_BETA2, adam_t as i32);
                    for ((wk, gk), (mk, vk)) in w
                        .iter_mut()
                        .zip(g.iter())
                        .zip(adam_m.iter_mut().zip(adam_v.iter_mut()))
                    {
                        *mk = ADAM_BETA1 * *mk + (1.0 - ADAM_BETA1) * gk;
                        *vk = ADAM_BETA2 * *vk + (1.0 - ADAM_BETA2) * gk * gk;
                        let m_hat = *mk / bias1;
                        let v_hat = *vk / bias2;
                        *wk -= lr * m_hat / (fmath::sqrt(v_hat) + ADAM_EPS);
                    }
                }
            }
            if w.iter().any(|v| !v.is_finite()) {
                return None;
            }
        }
    }
    Some(w)
}

/// Step-size schedule `alpha_k` for the server's gradient step.
#[derive(Debug, Clone, PartialEq)]
pub enum StepSchedule {
    /// `alpha_k = lambda / sqrt(K)` for all `k <= K`: the constant step the
    /// convergence rate analysis prescribes for a fixed horizon.
    ConstantTheory { lambda: f64, horizon: usize },
    /// `alpha0 * factor^floor((k-1)/period)`.
    StepDecay {
        alpha0: f64,
        factor: f64,
        period: usize,
    },
    /// `a / k`; square-summable but not summable.
    Diminishing { a: f64 },
}

impl StepSchedule {
    pub fn constant_theory(lambda: f64, horizon: usize) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) || horizon == 0 {
            return Err(Error::Domain(
                "constant schedule needs lambda > 0 and a positive horizon".into(),
            ));
        }
        Ok(Self::ConstantTheory { lambda, horizon })
    }

    pub fn step_decay(alpha0: f64, factor: f64, period: usize) -> Result<Self> {
        if !(alpha0.is_finite() && alpha0 > 0.0)
            || !(factor.is_finite() && factor > 0.0 && factor <= 1.0)
            || period == 0
        {
            return Err(Error::Domain(
                "step decay needs alpha0 > 0, factor in (0, 1], period >= 1".into(),
            ));
        }
        Ok(Self::StepDecay {
            alpha0,
            factor,
            period,
        })
    }

    /// The default decay recipe: start at 1e4, shrink by 0.1 every 30
    /// rounds.
    pub fn step_decay_default() -> Self {
        Self::StepDecay {
            alpha0: 1e4,
            factor: 0.1,
            period: 30,
        }
    }

    pub fn diminishing(a: f64) -> Result<Self> {
        if !(a.is_finite() && a > 0.0) {
            return Err(Error::Domain("diminishing schedule needs a > 0".into()));
        }
        Ok(Self::Diminishing { a })
    }

    /// `alpha_k` for round `k >= 1`.
    pub fn step_size(&self, k: usize) -> Result<f64> {
        if k == 0 {
            return Err(Error::Domain("round index starts at 1".into()));
        }
        match *self {
            Self::ConstantTheory { lambda, horizon } => {
                if k > horizon {
                    return Err(Error::Domain(format!(
                        "round {k} exceeds the schedule horizon {horizon}"
                    )));
                }
                Ok(lambda / fmath::sqrt(horizon as f64))
            }
            Self::StepDecay {
                alpha0,
                factor,
                period,
            } => Ok(alpha0 * fmath::powi(factor, ((k - 1) / period) as i32)),
            Self::Diminishing { a } => Ok(a / k as f64),
        }
    }
}
