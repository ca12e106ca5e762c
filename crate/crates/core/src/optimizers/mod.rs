//! SGD with momentum and the layer-wise adaptive rules built on it: LARS,
//! LAMB-style scaling, LAMBC, CLARS, AGC and LALC.
//!
//! Every rule consumes the momentum buffer `m` produced by
//! [`momentum_update`] and moves the weights along `-m` (column-wise for
//! AGC); the rules differ only in the scalar multiplying `m`. Norms are
//! Frobenius over the whole tensor.

mod schedule;

pub use schedule::{schedule_lr, Decay, ScheduleSpec};

use crate::error::{ensure, Result};
use crate::network::ParamKind;
use crate::tensor::Matrix;

/// Stand-in for `‖m‖²/‖w‖²` when `‖w‖ = 0`, so LALC's step collapses to 0.
pub const LALC_ZERO_NORM_SENTINEL: f64 = 1e300;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Lars,
    /// LAMBC without the clip.
    LambScaled,
    Lambc,
    Clars,
    Agc,
    Lalc,
}

impl OptimizerKind {
    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Lars => "lars",
            OptimizerKind::LambScaled => "lamb",
            OptimizerKind::Lambc => "lambc",
            OptimizerKind::Clars => "clars",
            OptimizerKind::Agc => "agc",
            OptimizerKind::Lalc => "lalc",
        }
    }

    pub fn needs_per_sample_norms(&self) -> bool {
        *self == OptimizerKind::Clars
    }
}

/// Scaling function for the LAMB family: identity, optionally clamped to
/// `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Phi {
    pub lo: Option<f64>,
    pub hi: Option<f64>,
}

impl Phi {
    pub fn apply(&self, z: f64) -> f64 {
        let z = self.lo.map_or(z, |lo| z.max(lo));
        self.hi.map_or(z, |hi| z.min(hi))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSpec {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    pub eta: f64,
    pub eps: f64,
    /// LAMBC's trust-ratio ceiling `μ`.
    pub clip_mu: f64,
    pub phi: Phi,
    /// Apply the adaptive rule to biases and BN parameters too; by default
    /// they take plain SGD steps.
    pub adapt_bn_bias: bool,
    pub schedule: ScheduleSpec,
}

impl OptimizerSpec {
    /// Momentum 0.9, weight decay 5e-4, and the recommended `η`, `ε` (and
    /// `μ` for LAMBC) for the schedule's batch size.
    pub fn with_defaults(kind: OptimizerKind, schedule: ScheduleSpec) -> Self {
        let eta = recommended_eta(kind, schedule.batch_size).unwrap_or(1.0);
        OptimizerSpec {
            kind,
            momentum: 0.9,
            weight_decay: 5e-4,
            eta,
            eps: recommended_eps(kind),
            clip_mu: if kind == OptimizerKind::Lambc { eta } else { f64::INFINITY },
            phi: Phi::default(),
            adapt_bn_bias: false,
            schedule,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!((0.0..1.0).contains(&self.momentum), Config, "momentum {} not in [0, 1)", self.momentum);
        ensure!(self.weight_decay >= 0.0, Config, "weight_decay {} must be >= 0", self.weight_decay);
        ensure!(self.eps >= 0.0, Config, "eps {} must be >= 0", self.eps);
        if self.kind != OptimizerKind::Sgd {
            ensure!(self.eta > 0.0 && self.eta.is_finite(), Config, "eta {} must be > 0", self.eta);
        }
        if self.kind == OptimizerKind::Lambc {
            ensure!(self.clip_mu > 0.0, Config, "clip_mu {} must be > 0", self.clip_mu);
        }
        self.schedule.validate()
    }
}

/// `η` by batch size for the rules that have one: rows for batch 128, 2048,
/// 4096 and 8192, each batch mapped to the first row at or above it. For
/// LAMBC the value is used as the clip `μ`.
pub fn recommended_eta(kind: OptimizerKind, batch_size: usize) -> Option<f64> {
    let row = match batch_size {
        0..=128 => 0,
        129..=2048 => 1,
        2049..=4096 => 2,
        _ => 3,
    };
    let col: [f64; 4] = match kind {
        OptimizerKind::Lars => [1e-2, 1e-3, 1e-3, 1e-3],
        OptimizerKind::Clars => [1e-2, 1e-3, 1e-3, 1e-4],
        OptimizerKind::Lambc => [1e-2; 4],
        OptimizerKind::Agc => [1e-1, 1e-1, 1e-2, 1e-2],
        OptimizerKind::Lalc => [1e3, 1e3, 1e3, 2e3],
        OptimizerKind::Sgd | OptimizerKind::LambScaled => return None,
    };
    Some(col[row])
}

pub fn recommended_eps(kind: OptimizerKind) -> f64 {
    match kind {
        OptimizerKind::Agc => 1e-3,
        OptimizerKind::Lalc => 1.0,
        _ => 1e-8,
    }
}

/// Momentum buffer of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOptimizerState {
    pub m: Matrix,
    pub t: usize,
}

impl LayerOptimizerState {
    pub fn new(rows: usize, cols: usize) -> Self {
        LayerOptimizerState { m: Matrix::zeros(rows, cols), t: 0 }
    }
}

/// `m ← momentum·m + (g + weight_decay·w)`; returns the new `m`.
pub fn momentum_update<'a>(
    state: &'a mut LayerOptimizerState,
    g: &Matrix,
    w: &Matrix,
    momentum: f64,
    weight_decay: f64,
) -> Result<&'a Matrix> {
    g.check_same_shape(w)?;
    g.check_same_shape(&state.m)?;
    for ((m, &gi), &wi) in state.m.as_mut_slice().iter_mut().zip(g.as_slice()).zip(w.as_slice()) {
        *m = momentum * *m + (gi + weight_decay * wi);
    }
    state.t += 1;
    Ok(&state.m)
}

/// `a / b`, with `0/0` read as 0 (the zero-norm fail-safe).
fn safe_ratio(a: f64, b: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else {
        a / b
    }
}

fn descend(w: &Matrix, m: &Matrix, scale: f64) -> Result<Matrix> {
    w.zip_map(m, |wi, mi| wi - scale * mi)
}

pub fn step_sgd(w: &Matrix, m: &Matrix, gamma_t: f64) -> Result<Matrix> {
    descend(w, m, gamma_t)
}

/// LARS trust ratio `η‖w‖ / (‖g‖ + β‖w‖ + ε)` with the raw gradient norm.
pub fn lars_trust_ratio(w_norm: f64, g_norm: f64, eta: f64, eps: f64, weight_decay: f64) -> f64 {
    safe_ratio(eta * w_norm, g_norm + weight_decay * w_norm + eps)
}

pub fn step_lars(w: &Matrix, m: &Matrix, g: &Matrix, gamma_t: f64, eta: f64, eps: f64, weight_decay: f64) -> Result<Matrix> {
    g.check_same_shape(w)?;
    let tau = lars_trust_ratio(w.norm(), g.norm(), eta, eps, weight_decay);
    descend(w, m, gamma_t * tau)
}

/// `min(φ(‖w‖)/(‖m‖ + ε), μ)`; pass `μ = ∞` for the unclipped rule.
pub fn lambc_trust_ratio(w_norm: f64, m_norm: f64, eps: f64, clip_mu: f64, phi: Phi) -> f64 {
    safe_ratio(phi.apply(w_norm), m_norm + eps).min(clip_mu)
}

pub fn step_lambc(w: &Matrix, m: &Matrix, gamma_t: f64, eps: f64, clip_mu: f64, phi: Phi) -> Result<Matrix> {
    let tau = lambc_trust_ratio(w.norm(), m.norm(), eps, clip_mu, phi);
    descend(w, m, gamma_t * tau)
}

/// CLARS trust ratio `η‖w‖ / (mean_b ‖g_b‖ + ε)`.
pub fn clars_trust_ratio(w_norm: f64, mean_sample_norm: f64, eta: f64, eps: f64) -> f64 {
    safe_ratio(eta * w_norm, mean_sample_norm + eps)
}

pub fn step_clars(w: &Matrix, m: &Matrix, per_sample_grads: &[Matrix], gamma_t: f64, eta: f64, eps: f64) -> Result<Matrix> {
    ensure!(!per_sample_grads.is_empty(), Domain, "CLARS needs at least one per-sample gradient");
    let mut total = 0.0;
    for g in per_sample_grads {
        g.check_same_shape(w)?;
        total += g.norm();
    }
    let mean = total / per_sample_grads.len() as f64;
    step_clars_with_norm(w, m, mean, gamma_t, eta, eps)
}

/// CLARS with the averaged per-sample norm computed elsewhere.
pub fn step_clars_with_norm(w: &Matrix, m: &Matrix, mean_sample_norm: f64, gamma_t: f64, eta: f64, eps: f64) -> Result<Matrix> {
    ensure!(mean_sample_norm >= 0.0, Domain, "negative per-sample norm");
    let tau = clars_trust_ratio(w.norm(), mean_sample_norm, eta, eps);
    descend(w, m, gamma_t * tau)
}

/// Per-column AGC ratios `min(η‖w_u‖/(‖m_u‖ + ε), 1)`; a unit is one output
/// column of an `in × out` weight.
pub fn agc_unit_ratios(w: &Matrix, m: &Matrix, eta: f64, eps: f64) -> Result<Vec<f64>> {
    w.check_same_shape(m)?;
    let cols = w.cols();
    let mut wn = vec![0.0; cols];
    let mut mn = vec![0.0; cols];
    for r in 0..w.rows() {
        for (c, (&wi, &mi)) in w.row(r).iter().zip(m.row(r)).enumerate() {
            wn[c] += wi * wi;
            mn[c] += mi * mi;
        }
    }
    Ok(wn
        .iter()
        .zip(&mn)
        .map(|(w2, m2)| safe_ratio(eta * w2.sqrt(), m2.sqrt() + eps).min(1.0))
        .collect())
}

pub fn step_agc(w: &Matrix, m: &Matrix, gamma_t: f64, eta: f64, eps: f64) -> Result<Matrix> {
    let tau = agc_unit_ratios(w, m, eta, eps)?;
    let mut out = w.clone();
    for r in 0..w.rows() {
        for (c, (o, &mi)) in out.row_mut(r).iter_mut().zip(m.row(r)).enumerate() {
            *o -= gamma_t * tau[c] * mi;
        }
    }
    Ok(out)
}

/// LALC cap `λ = 1 / (η‖m‖²/‖w‖² + ε)`.
pub fn lalc_lambda(w_norm: f64, m_norm: f64, eta: f64, eps: f64) -> f64 {
    let ratio = if w_norm == 0.0 { LALC_ZERO_NORM_SENTINEL } else { (m_norm / w_norm).powi(2) };
    1.0 / (eta * ratio + eps)
}

/// Returns the new weights and the applied step size `min(γ_t, λ)`.
pub fn step_lalc(w: &Matrix, m: &Matrix, gamma_t: f64, eta: f64, eps: f64) -> Result<(Matrix, f64)> {
    let step = gamma_t.min(lalc_lambda(w.norm(), m.norm(), eta, eps));
    Ok((descend(w, m, step)?, step))
}

/// Per-tensor optimizer driver: one momentum buffer per parameter tensor and
/// the schedule clock.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub spec: OptimizerSpec,
    pub states: Vec<LayerOptimizerState>,
    pub t: usize,
}

/// What a step did to one tensor: the multiplier applied to `m` (the mean
/// over units for AGC).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AppliedStep {
    pub rate: f64,
    pub adaptive: bool,
}

impl Optimizer {
    pub fn new(spec: OptimizerSpec, params: &[&Matrix]) -> Result<Self> {
        spec.validate()?;
        let states = params.iter().map(|p| LayerOptimizerState::new(p.rows(), p.cols())).collect();
        Ok(Optimizer { spec, states, t: 0 })
    }

    pub fn current_lr(&self) -> Result<f64> {
        schedule_lr(&self.spec.schedule, self.t)
    }

    /// Updates every tensor in place and advances the schedule.
    ///
    /// `per_sample_norms[i]` is the mean per-sample gradient norm of tensor
    /// `i`; required for CLARS only.
    pub fn step(
        &mut self,
        params: &mut [&mut Matrix],
        kinds: &[ParamKind],
        grads: &[Matrix],
        per_sample_norms: Option<&[f64]>,
    ) -> Result<Vec<AppliedStep>> {
        let n = self.states.len();
        ensure!(
            params.len() == n && kinds.len() == n && grads.len() == n,
            Shape,
            "optimizer tracks {n} tensors, got {} params, {} kinds, {} grads",
            params.len(),
            kinds.len(),
            grads.len()
        );
        if self.spec.kind.needs_per_sample_norms() {
            ensure!(
                per_sample_norms.is_some_and(|v| v.len() == n),
                Precondition,
                "CLARS needs one per-sample norm per tensor"
            );
        }
        let gamma = self.current_lr()?;
        let s = &self.spec;
        let mut applied = Vec::with_capacity(n);
        for i in 0..n {
            let w: &Matrix = &*params[i];
            let m = momentum_update(&mut self.states[i], &grads[i], w, s.momentum, s.weight_decay)?;
            let adaptive = s.kind != OptimizerKind::Sgd && (s.adapt_bn_bias || kinds[i] == ParamKind::Weight);
            let (new_w, rate) = if !adaptive {
                (step_sgd(w, m, gamma)?, gamma)
            } else {
                match s.kind {
                    OptimizerKind::Sgd => unreachable!(),
                    OptimizerKind::Lars => {
                        let tau = lars_trust_ratio(w.norm(), grads[i].norm(), s.eta, s.eps, s.weight_decay);
                        (step_lars(w, m, &grads[i], gamma, s.eta, s.eps, s.weight_decay)?, gamma * tau)
                    }
                    OptimizerKind::LambScaled | OptimizerKind::Lambc => {
                        let mu = if s.kind == OptimizerKind::Lambc { s.clip_mu } else { f64::INFINITY };
                        let tau = lambc_trust_ratio(w.norm(), m.norm(), s.eps, mu, s.phi);
                        (step_lambc(w, m, gamma, s.eps, mu, s.phi)?, gamma * tau)
                    }
                    OptimizerKind::Clars => {
                        let norm = per_sample_norms.expect("checked")[i];
                        let tau = clars_trust_ratio(w.norm(), norm, s.eta, s.eps);
                        (step_clars_with_norm(w, m, norm, gamma, s.eta, s.eps)?, gamma * tau)
                    }
                    OptimizerKind::Agc => {
                        let tau = agc_unit_ratios(w, m, s.eta, s.eps)?;
                        let mean = tau.iter().sum::<f64>() / tau.len() as f64;
                        (step_agc(w, m, gamma, s.eta, s.eps)?, gamma * mean)
                    }
                    OptimizerKind::Lalc => step_lalc(w, m, gamma, s.eta, s.eps)?,
                }
            };
            *params[i] = new_w;
            applied.push(AppliedStep { rate, adaptive });
        }
        self.t += 1;
        Ok(applied)
    }
}
