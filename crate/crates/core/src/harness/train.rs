//! Mini-batch training with gradient accumulation and per-step diagnostics.

use serde::Serialize;

use super::data::{Dataset, Task};
use crate::diagnostics::{explosion_profile, layer_report, ExplosionProfile, LayerReport};
use crate::error::{ensure, Error, Result};
use crate::network::{
    backward, forward, forward_with, init_network, BackwardOptions, NetworkState, ParamInfo, Retain, StatsSource,
};
use crate::optimizers::{AppliedStep, Optimizer, OptimizerSpec};
use crate::tensor::{Matrix, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// Softmax cross-entropy over class ids.
    CrossEntropy,
    /// `(1/B) Σ_b ‖y_b − t_b‖²`.
    Mse,
}

impl Loss {
    pub fn for_task(task: Task) -> Loss {
        match task {
            Task::Classification { .. } => Loss::CrossEntropy,
            Task::Regression => Loss::Mse,
        }
    }
}

/// Batch-mean loss, its gradient with respect to the output, and the
/// number of correct argmax predictions (0 for MSE).
pub fn loss_and_grad(loss: Loss, output: &Matrix, targets: &Matrix) -> Result<(f64, Matrix, usize)> {
    let (b, k) = output.shape();
    ensure!(targets.rows() == b, Shape, "{} targets for {b} outputs", targets.rows());
    let nb = b as f64;
    match loss {
        Loss::Mse => {
            output.check_same_shape(targets)?;
            let r = output.zip_map(targets, |y, t| y - t)?;
            Ok((r.sum_squares() / nb, r.scale(2.0 / nb), 0))
        }
        Loss::CrossEntropy => {
            ensure!(targets.cols() == 1, Shape, "cross-entropy needs class-id targets");
            let mut grad = Matrix::zeros(b, k);
            let (mut total, mut correct) = (0.0, 0);
            for r in 0..b {
                let row = output.row(r);
                let label = targets.get(r, 0) as usize;
                ensure!(label < k, Domain, "class id {label} with {k} outputs");
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + sum.ln();
                total += lse - row[label];
                let arg = (0..k).max_by(|&a, &c| row[a].total_cmp(&row[c])).unwrap_or(0);
                correct += usize::from(arg == label);
                for (j, g) in grad.row_mut(r).iter_mut().enumerate() {
                    let p = (row[j] - lse).exp();
                    *g = (p - f64::from(u8::from(j == label))) / nb;
                }
            }
            Ok((total / nb, grad, correct))
        }
    }
}

/// BN statistics a per-sample pass should reuse: the batch statistics in
/// train mode, the running averages otherwise.
fn full_batch_source(state: &NetworkState, batch: &Matrix, rng: &mut RngStream) -> Result<StatsSource> {
    if state.has_batch_norm() && state.train {
        let ft = forward_with(state, batch, rng, &StatsSource::Batch)?;
        Ok(StatsSource::Fixed(ft.bn_stats))
    } else {
        Ok(StatsSource::Running)
    }
}

/// Gradient of every sample's own loss, one single-row pass each, with BN
/// statistics frozen at the full-batch values. Returns `[sample][tensor]`.
///
/// Dropout masks are drawn per pass, so with dropout the samples do not
/// reproduce one shared batch pass.
pub fn per_sample_grads(
    state: &NetworkState,
    batch: &Matrix,
    targets: &Matrix,
    loss: Loss,
    rng: &mut RngStream,
) -> Result<Vec<Vec<Matrix>>> {
    ensure!(batch.rows() >= 1, Shape, "empty batch");
    ensure!(targets.rows() == batch.rows(), Shape, "targets and batch differ in rows");
    let source = full_batch_source(state, batch, rng)?;
    let opts = BackwardOptions { param_grads: true, retain: Retain::Only(vec![]), freeze_bn: true, per_sample_norms: false };
    let mut out = Vec::with_capacity(batch.rows());
    for r in 0..batch.rows() {
        let x = batch.select_rows(&[r]);
        let t = targets.select_rows(&[r]);
        let ft = forward_with(state, &x, rng, &source)?;
        let (_, g, _) = loss_and_grad(loss, ft.output(), &t)?;
        out.push(backward(state, &ft, &g, &opts)?.param_grads);
    }
    Ok(out)
}

/// `Σ_b ‖∇θ ℓ_b‖` per tensor, from one batched backward of the batch-mean
/// loss gradient `g_out` under frozen BN statistics.
fn per_sample_norm_sums(state: &NetworkState, ft: &crate::network::ForwardTrace, g_out: &Matrix, rows: usize) -> Result<Vec<f64>> {
    let opts = BackwardOptions { param_grads: false, retain: Retain::Only(vec![]), freeze_bn: true, per_sample_norms: true };
    let bt = backward(state, ft, g_out, &opts)?;
    // g_out rows carry a 1/B factor; one sample's own loss gradient is B× its row.
    let scale = rows as f64;
    Ok(bt.per_sample_sq_norms.iter().map(|v| v.iter().map(|s| scale * s.sqrt()).sum()).collect())
}

/// Everything that defines a training run besides its output location.
#[derive(Debug, Clone)]
pub struct TrainSetup {
    pub seed: u64,
    pub specs: Vec<crate::network::LayerSpec>,
    pub init: crate::network::InitScheme,
    pub bn_mode: crate::network::BnMode,
    pub optimizer: OptimizerSpec,
    pub micro_batch: usize,
    pub log_every: usize,
    pub layer_reports: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub grad_norm: f64,
    pub profile: Option<ExplosionProfile>,
    pub reports: Vec<LayerReport>,
    pub applied: Vec<AppliedStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub status: RunStatus,
    pub seed: u64,
    pub optimizer: String,
    pub steps_completed: usize,
    pub total_steps: usize,
    /// Step whose loss or gradient first went non-finite.
    pub diverged_at: Option<usize>,
    /// Mean training loss over the last epoch's worth of steps.
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub min_lalc_step: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct MetricsLog {
    pub rows: Vec<StepLog>,
    pub param_info: Vec<ParamInfo>,
    pub summary: TrainSummary,
}

pub struct TrainOutcome {
    pub log: MetricsLog,
    pub state: NetworkState,
}

pub const RNG_INIT: u64 = 1;
pub const RNG_DATA: u64 = 2;
pub const RNG_SHUFFLE: u64 = 3;
pub const RNG_DROPOUT: u64 = 4;

fn check_setup(setup: &TrainSetup, data: &Dataset, state: &NetworkState) -> Result<()> {
    let batch = setup.optimizer.schedule.batch_size;
    ensure!(
        state.input_dim() == data.input_dim(),
        Config,
        "network input {} but data has {} features",
        state.input_dim(),
        data.input_dim()
    );
    ensure!(
        state.output_dim() == data.output_dim(),
        Config,
        "network output {} but the task needs {}",
        state.output_dim(),
        data.output_dim()
    );
    ensure!(data.len() >= batch, Config, "dataset has {} rows, batch is {batch}", data.len());
    ensure!(
        setup.micro_batch > 0 && batch.is_multiple_of(setup.micro_batch),
        Config,
        "micro_batch {} must divide batch_size {batch}",
        setup.micro_batch
    );
    ensure!(setup.log_every > 0, Config, "log_every must be > 0");
    if state.has_batch_norm() {
        ensure!(setup.micro_batch >= 2, Config, "batch norm needs micro batches of at least 2 rows");
    }
    Ok(())
}

pub fn train(setup: &TrainSetup, data: &Dataset) -> Result<TrainOutcome> {
    setup.optimizer.validate()?;
    let root = RngStream::new(setup.seed);
    let mut state = init_network(&setup.specs, setup.init, &mut root.derive(RNG_INIT)).map_err(|e| match e {
        Error::Shape(m) => Error::Config(m),
        other => other,
    })?;
    state.bn_mode = setup.bn_mode;
    state.train = true;
    check_setup(setup, data, &state)?;
    train_state(setup, data, state)
}

/// Trains an already initialized network.
pub fn train_state(setup: &TrainSetup, data: &Dataset, mut state: NetworkState) -> Result<TrainOutcome> {
    check_setup(setup, data, &state)?;
    let root = RngStream::new(setup.seed);
    let loss_kind = Loss::for_task(data.task);
    let spec = &setup.optimizer;
    let batch = spec.schedule.batch_size;
    let total = spec.schedule.total_steps;
    let info = state.param_info();
    let kinds: Vec<_> = info.iter().map(|i| i.kind).collect();
    let mut opt = Optimizer::new(spec.clone(), &state.params())?;
    let boundaries = state.block_boundaries();
    let needs_norms = spec.kind.needs_per_sample_norms();

    let n = data.len();
    let steps_per_epoch = n / batch;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut epoch = 0;
    let mut cursor = n; // forces a shuffle before the first step
    let mut rows = Vec::new();
    let mut recent: Vec<(f64, f64)> = Vec::new();
    let mut status = RunStatus::Completed;
    let mut diverged_at = None;
    let mut min_lalc: Option<f64> = None;
    let mut done = 0;

    for step in 0..total {
        if cursor + batch > n {
            if step > 0 {
                epoch += 1;
            }
            perm = (0..n).collect();
            root.derive(RNG_SHUFFLE).derive(epoch as u64).shuffle(&mut perm);
            cursor = 0;
        }
        let idx = &perm[cursor..cursor + batch];
        cursor += batch;
        let log_now = step % setup.log_every == 0 || step + 1 == total;
        let mut drop_rng = root.derive(RNG_DROPOUT).derive(step as u64);

        let mut grads: Vec<Matrix> = info.iter().map(|p| Matrix::zeros(p.shape.0, p.shape.1)).collect();
        let mut norm_sums = vec![0.0; info.len()];
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut diag = None;
        let weight = setup.micro_batch as f64 / batch as f64;
        for (k, chunk) in idx.chunks(setup.micro_batch).enumerate() {
            let x = data.inputs.select_rows(chunk);
            let t = data.targets.select_rows(chunk);
            let ft = forward(&state, &x, &mut drop_rng)?;
            let (l, g, c) = loss_and_grad(loss_kind, ft.output(), &t)?;
            loss_sum += l * weight;
            correct += c;
            let g = g.scale(weight);
            let want_diag = log_now && k == 0;
            let retain = if want_diag { Retain::Only(boundaries.clone()) } else { Retain::Only(vec![]) };
            let bt = backward(&state, &ft, &g, &BackwardOptions { retain, ..Default::default() })?;
            for (acc, pg) in grads.iter_mut().zip(&bt.param_grads) {
                acc.axpy(1.0, pg)?;
            }
            if needs_norms {
                for (s, v) in norm_sums.iter_mut().zip(per_sample_norm_sums(&state, &ft, &g, batch)?) {
                    *s += v;
                }
            }
            if want_diag && l.is_finite() {
                let profile = explosion_profile(&bt, &boundaries).ok();
                let reports = if setup.layer_reports { layer_report(&ft, &bt, &state, &boundaries)? } else { Vec::new() };
                diag = Some((profile, reports));
            }
            if state.has_batch_norm() {
                state.commit_running_stats(&ft)?;
            }
        }
        let grad_norm = grads.iter().map(|g| g.sum_squares()).sum::<f64>().sqrt();
        if !loss_sum.is_finite() || !grad_norm.is_finite() {
            status = RunStatus::Diverged;
            diverged_at = Some(step);
            break;
        }
        let lr = opt.current_lr()?;
        let mean_norms: Vec<f64> = norm_sums.iter().map(|s| s / batch as f64).collect();
        let mut params = state.params_mut();
        let applied = opt.step(&mut params, &kinds, &grads, needs_norms.then_some(mean_norms.as_slice()))?;
        if spec.kind == crate::optimizers::OptimizerKind::Lalc {
            let m = applied.iter().filter(|a| a.adaptive).map(|a| a.rate).fold(f64::INFINITY, f64::min);
            if m.is_finite() {
                min_lalc = Some(min_lalc.map_or(m, |p: f64| p.min(m)));
            }
        }
        let accuracy = correct as f64 / batch as f64;
        recent.push((loss_sum, accuracy));
        if recent.len() > steps_per_epoch.max(1) {
            recent.remove(0);
        }
        done = step + 1;
        if log_now {
            let (profile, reports) = diag.unwrap_or((None, Vec::new()));
            rows.push(StepLog { step, epoch, lr, loss: loss_sum, accuracy, grad_norm, profile, reports, applied });
        }
    }

    let mean = |f: fn(&(f64, f64)) -> f64| -> Option<f64> {
        (!recent.is_empty() && status == RunStatus::Completed)
            .then(|| recent.iter().map(f).sum::<f64>() / recent.len() as f64)
    };
    let summary = TrainSummary {
        status,
        seed: setup.seed,
        optimizer: spec.kind.name().to_string(),
        steps_completed: done,
        total_steps: total,
        diverged_at,
        final_loss: mean(|r| r.0),
        final_accuracy: if matches!(data.task, Task::Classification { .. }) { mean(|r| r.1) } else { None },
        min_lalc_step: min_lalc,
    };
    Ok(TrainOutcome { log: MetricsLog { rows, param_info: info, summary }, state })
}
