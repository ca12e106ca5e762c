//! First and exact diagonal second derivatives of an MSE loss with respect
//! to sampled dense weights.
//!
//! For a piecewise-linear network with one output and BN statistics held
//! fixed, each output `y_b` is locally linear in every weight, so with
//! `L = (1/B)·Σ_b (y_b − t_b)²`
//!
//! ```text
//! dL/dw_ij   = (2/B)·Σ_b r_b · a_bi · δ_bj
//! d²L/dw_ij² = (2/B)·Σ_b (a_bi · δ_bj)²
//! ```
//!
//! where `a` is the dense layer's input, `δ_bj = ∂y_b/∂z_bj` its output
//! sensitivity and `r = y − t`. The probe freezes BN at the batch
//! statistics of the unperturbed network (or uses running statistics in
//! eval mode); the derivatives are exact for that frozen network.

use crate::error::{ensure, Error, Result};
use crate::network::{backward, forward_with, BackwardOptions, BnStats, Layer, NetworkState, Retain, StatsSource};
use crate::tensor::{column_stats, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct HessianSample {
    /// Ordinal of the dense layer.
    pub layer_index: usize,
    pub grad_norm: f64,
    pub hess_norm: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianEntry {
    pub layer_index: usize,
    /// Index into [`NetworkState::params`].
    pub param_index: usize,
    pub row: usize,
    pub col: usize,
    pub grad: f64,
    pub hess: f64,
}

#[derive(Debug, Clone)]
pub struct HessianProbe {
    pub samples: Vec<HessianSample>,
    pub entries: Vec<HessianEntry>,
    /// The BN statistics source the derivatives are exact for.
    pub source: StatsSource,
}

/// Samples `k` weights per dense layer (without replacement, all of them if
/// the layer is smaller) and evaluates both derivatives.
pub fn hessian_probe(
    state: &NetworkState,
    batch: &Matrix,
    targets: &Matrix,
    rng: &mut RngStream,
    k: usize,
) -> Result<HessianProbe> {
    ensure!(
        state.is_piecewise_linear() && !state.has_dropout(),
        Precondition,
        "hessian probe needs ReLU/LeakyReLU/Identity activations only"
    );
    ensure!(state.output_dim() == 1, Precondition, "hessian probe needs a scalar output, got {}", state.output_dim());
    ensure!(
        state.layers.iter().all(|l| !matches!(l, Layer::Residual(_))),
        Precondition,
        "hessian probe does not support residual blocks"
    );
    ensure!(
        targets.shape() == (batch.rows(), 1),
        Shape,
        "targets {:?} for a batch of {}",
        targets.shape(),
        batch.rows()
    );
    ensure!(k > 0, Domain, "need at least one sample per layer");

    let source = if state.has_batch_norm() && state.train {
        StatsSource::Fixed(batch_stats(state, batch)?)
    } else {
        StatsSource::Running
    };
    let ft = forward_with(state, batch, rng, &source)?;
    let rows = batch.rows();
    let resid = ft.output().zip_map(targets, |y, t| y - t)?;
    let ones = Matrix::filled(rows, 1, 1.0);
    let bt = backward(state, &ft, &ones, &BackwardOptions { param_grads: false, retain: Retain::All, ..Default::default() })?;

    let mut param_index = 0;
    let mut dense_ord = 0;
    let mut samples = Vec::new();
    let mut entries = Vec::new();
    let scale = 2.0 / rows as f64;
    for (i, layer) in state.layers.iter().enumerate() {
        let d = match layer {
            Layer::Dense(d) => d,
            Layer::BatchNorm(bn) => {
                param_index += if bn.gamma.is_some() { 2 } else { 0 };
                continue;
            }
            _ => continue,
        };
        let a = ft.boundary(i);
        let delta = bt.grad(i + 1).expect("retained");
        let (n_in, n_out) = d.w.shape();
        let mut idx: Vec<usize> = (0..n_in * n_out).collect();
        rng.shuffle(&mut idx);
        idx.truncate(k.min(idx.len()));
        let (mut g2, mut h2) = (0.0, 0.0);
        for &flat in &idx {
            let (r, c) = (flat / n_out, flat % n_out);
            let (mut g, mut h) = (0.0, 0.0);
            for b in 0..rows {
                let ad = a.get(b, r) * delta.get(b, c);
                g += resid.get(b, 0) * ad;
                h += ad * ad;
            }
            let (g, h) = (scale * g, scale * h);
            g2 += g * g;
            h2 += h * h;
            entries.push(HessianEntry { layer_index: dense_ord, param_index, row: r, col: c, grad: g, hess: h });
        }
        samples.push(HessianSample { layer_index: dense_ord, grad_norm: g2.sqrt(), hess_norm: h2.sqrt(), samples: idx.len() });
        param_index += 1 + usize::from(d.b.is_some());
        dense_ord += 1;
    }
    Ok(HessianProbe { samples, entries, source })
}

/// Parameter gradients of the MSE loss for a network whose BN statistics come
/// from `source`; used to check the curvature values by differencing.
pub fn mse_param_grads(
    state: &NetworkState,
    batch: &Matrix,
    targets: &Matrix,
    source: &StatsSource,
) -> Result<Vec<Matrix>> {
    let ft = forward_with(state, batch, &mut RngStream::new(0), source)?;
    let scale = 2.0 / (batch.rows() * state.output_dim()) as f64;
    let g = ft.output().zip_map(targets, |y, t| scale * (y - t))?;
    let opts = BackwardOptions { param_grads: true, retain: Retain::Only(vec![]), ..Default::default() };
    Ok(backward(state, &ft, &g, &opts)?.param_grads)
}

fn batch_stats(state: &NetworkState, batch: &Matrix) -> Result<Vec<BnStats>> {
    let ft = forward_with(state, batch, &mut RngStream::new(0), &StatsSource::Batch)?;
    Ok(ft.bn_stats)
}

/// Least-squares slope of `ln hess_norm` on `ln grad_norm` over the layers
/// where both are positive.
pub fn loglog_slope(samples: &[HessianSample]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = samples
        .iter()
        .filter(|s| s.grad_norm > 0.0 && s.hess_norm > 0.0 && s.grad_norm.is_finite() && s.hess_norm.is_finite())
        .map(|s| (s.grad_norm.ln(), s.hess_norm.ln()))
        .collect();
    ensure!(pts.len() >= 3, Degenerate, "{} usable layers, need 3", pts.len());
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    if sxx <= 1e-300 * n {
        return Err(Error::Degenerate("all gradient norms are equal".into()));
    }
    Ok(sxy / sxx)
}

/// Adjacent-layer comparison of sampled derivative variances: the
/// curvature ratio against the squared gradient ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjacentRatio {
    pub layer_index: usize,
    /// `Var(h_n) / Var(h_{n+1})`.
    pub hess_ratio: f64,
    /// `(Var(g_n) / Var(g_{n+1}))²`.
    pub grad_ratio_sq: f64,
}

pub fn adjacent_variance_ratios(probe: &HessianProbe) -> Result<Vec<AdjacentRatio>> {
    let layers = probe.samples.len();
    let var_of = |layer: usize, pick: &dyn Fn(&HessianEntry) -> f64| -> Result<f64> {
        let v: Vec<f64> = probe.entries.iter().filter(|e| e.layer_index == layer).map(pick).collect();
        ensure!(v.len() >= 2, Degenerate, "layer {layer} has fewer than two samples");
        Ok(column_stats(&Matrix::from_vec(v.len(), 1, v)?)?.1[0])
    };
    let mut out = Vec::new();
    for l in 0..layers.saturating_sub(1) {
        let (gh0, gh1) = (var_of(l, &|e| e.hess)?, var_of(l + 1, &|e| e.hess)?);
        let (gg0, gg1) = (var_of(l, &|e| e.grad)?, var_of(l + 1, &|e| e.grad)?);
        ensure!(gh1 > 0.0 && gg1 > 0.0, Degenerate, "zero derivative variance at layer {}", l + 1);
        out.push(AdjacentRatio { layer_index: l, hess_ratio: gh0 / gh1, grad_ratio_sq: (gg0 / gg1).powi(2) });
    }
    Ok(out)
}
