//! Measured quantities computed from forward/backward traces: explosion
//! profiles across block boundaries, per-layer statistic panels, and the
//! gradient/curvature probe in [`hessian`].
//!
//! All variances are population variances pooled over batch and width at a
//! boundary, so a boundary contributes one number.

pub mod csv;
pub mod hessian;

pub use hessian::{
    hessian_probe, adjacent_variance_ratios, loglog_slope, mse_param_grads, HessianEntry, HessianProbe, HessianSample,
    AdjacentRatio,
};

use crate::error::{ensure, Error, Result};
use crate::network::{
    backward, forward, forward_with, inject_output_gradient, ActivationKind, BackwardOptions, BackwardTrace,
    BnStats, ForwardTrace, Layer, NetworkState, Retain, StatsSource,
};
use crate::tensor::{column_stats, matched_abs_corr, pairwise_abs_corr, Matrix, RngStream};

#[derive(Debug, Clone, PartialEq)]
pub struct ExplosionProfile {
    /// Top-level layer index of each boundary; the last is the output.
    pub boundaries: Vec<usize>,
    pub var_g: Vec<f64>,
    /// `var_g[k] / var_g[k+1]`, one per block.
    pub per_layer_ratio: Vec<f64>,
    /// `√(var_g[k] / var_g[last])`; the last entry is exactly 1.
    pub cumulative_rate: Vec<f64>,
}

impl ExplosionProfile {
    /// Geometric mean of the per-block std ratio `√per_layer_ratio`; 1 for a
    /// profile with no blocks.
    pub fn geometric_mean_rate(&self) -> f64 {
        if self.per_layer_ratio.is_empty() {
            return 1.0;
        }
        let log_sum: f64 = self.per_layer_ratio.iter().map(|r| 0.5 * r.ln()).sum();
        (log_sum / self.per_layer_ratio.len() as f64).exp()
    }

    pub fn depth(&self) -> usize {
        self.per_layer_ratio.len()
    }
}

/// Builds the profile from boundary gradients retained in `bt`.
pub fn explosion_profile(bt: &BackwardTrace, boundaries: &[usize]) -> Result<ExplosionProfile> {
    ensure!(!boundaries.is_empty(), Precondition, "no boundaries given");
    let mut var_g = Vec::with_capacity(boundaries.len());
    for &b in boundaries {
        let g = bt
            .grad(b)
            .ok_or_else(|| Error::Precondition(format!("gradient at boundary {b} was not retained")))?;
        var_g.push(g.pooled_stats().1);
    }
    let last = *var_g.last().expect("nonempty");
    ensure!(last > 0.0, Degenerate, "output gradient has zero variance");
    let mut per_layer_ratio = Vec::with_capacity(var_g.len() - 1);
    for k in 0..var_g.len() - 1 {
        ensure!(var_g[k + 1] > 0.0, Degenerate, "zero gradient variance at boundary {}", boundaries[k + 1]);
        per_layer_ratio.push(var_g[k] / var_g[k + 1]);
    }
    let mut cumulative_rate: Vec<f64> = var_g.iter().map(|v| (v / last).sqrt()).collect();
    *cumulative_rate.last_mut().expect("nonempty") = 1.0;
    Ok(ExplosionProfile { boundaries: boundaries.to_vec(), var_g, per_layer_ratio, cumulative_rate })
}

/// Per-boundary statistics for the early-training panels. Correlations are
/// `None` when every column involved is constant.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerReport {
    /// Ordinal of the boundary.
    pub layer_index: usize,
    /// Top-level layer index of the boundary.
    pub boundary: usize,
    pub var_x: f64,
    pub var_g: f64,
    /// Pooled variance of the first dense weight in the block that starts
    /// here; `None` at the output.
    pub var_w: Option<f64>,
    /// Column-averaged `mean/std` of the activation input.
    pub mean_std_ratio: Option<f64>,
    pub corr_xg: Option<f64>,
    pub corr_xx: Option<f64>,
}

fn first_dense(layers: &[Layer]) -> Option<&Matrix> {
    layers.iter().find_map(|l| match l {
        Layer::Dense(d) => Some(&d.w),
        Layer::Residual(inner) => first_dense(inner),
        _ => None,
    })
}

fn mean_std_ratio(x: &Matrix) -> Option<f64> {
    let (mean, var) = column_stats(x).ok()?;
    let ratios: Vec<f64> = mean
        .iter()
        .zip(&var)
        .filter(|(_, &v)| v > 0.0)
        .map(|(m, v)| m / v.sqrt())
        .collect();
    if ratios.is_empty() {
        None
    } else {
        Some(ratios.iter().sum::<f64>() / ratios.len() as f64)
    }
}

fn ok_degenerate(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Degenerate(_)) | Err(Error::Domain(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

pub fn layer_report(
    ft: &ForwardTrace,
    bt: &BackwardTrace,
    state: &NetworkState,
    boundaries: &[usize],
) -> Result<Vec<LayerReport>> {
    let n = state.layers.len();
    let mut out = Vec::with_capacity(boundaries.len());
    for (k, &b) in boundaries.iter().enumerate() {
        ensure!(b <= n, Shape, "boundary {b} beyond {n} layers");
        let x = ft.boundary(b);
        let g = bt
            .grad(b)
            .ok_or_else(|| Error::Precondition(format!("gradient at boundary {b} was not retained")))?;
        let end = boundaries.get(k + 1).copied().unwrap_or(n).max(b);
        let var_w = first_dense(&state.layers[b..end]).map(|w| w.pooled_stats().1);
        let rows_ok = x.rows() >= 2;
        out.push(LayerReport {
            layer_index: k,
            boundary: b,
            var_x: x.pooled_stats().1,
            var_g: g.pooled_stats().1,
            var_w,
            mean_std_ratio: if rows_ok { mean_std_ratio(x) } else { None },
            corr_xg: if rows_ok { ok_degenerate(matched_abs_corr(x, g))? } else { None },
            corr_xx: if rows_ok && x.cols() >= 2 { ok_degenerate(pairwise_abs_corr(x))? } else { None },
        });
    }
    Ok(out)
}

/// Result of one injected-gradient probe pass.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub profile: ExplosionProfile,
    pub reports: Option<Vec<LayerReport>>,
}

/// Forward `batch` in the state's mode, inject an i.i.d. `N(0,1)` output
/// gradient, backpropagate without parameter gradients and measure the
/// profile at [`NetworkState::block_boundaries`].
pub fn explosion_probe(
    state: &NetworkState,
    batch: &Matrix,
    rng: &mut RngStream,
    with_reports: bool,
) -> Result<ProbeResult> {
    let ft = forward(state, batch, rng)?;
    probe_trace(state, &ft, rng, with_reports)
}

/// As [`explosion_probe`] with an explicit BN statistics source.
pub fn explosion_probe_with(
    state: &NetworkState,
    batch: &Matrix,
    rng: &mut RngStream,
    source: &StatsSource,
    with_reports: bool,
) -> Result<ProbeResult> {
    let ft = forward_with(state, batch, rng, source)?;
    probe_trace(state, &ft, rng, with_reports)
}

fn probe_trace(state: &NetworkState, ft: &ForwardTrace, rng: &mut RngStream, with_reports: bool) -> Result<ProbeResult> {
    let boundaries = state.block_boundaries();
    let out = ft.output();
    let g = inject_output_gradient(rng, out.rows(), out.cols());
    let opts = BackwardOptions { param_grads: false, retain: Retain::Only(boundaries.clone()), ..Default::default() };
    let bt = backward(state, ft, &g, &opts)?;
    let profile = explosion_profile(&bt, &boundaries)?;
    let reports = if with_reports { Some(layer_report(ft, &bt, state, &boundaries)?) } else { None };
    Ok(ProbeResult { profile, reports })
}

/// `Σ_i Var(x_i)·Var(g_i)` over the columns of a boundary.
pub fn variance_product(x: &Matrix, g: &Matrix) -> Result<f64> {
    x.check_same_shape(g)?;
    let (_, vx) = column_stats(x)?;
    let (_, vg) = column_stats(g)?;
    Ok(vx.iter().zip(&vg).map(|(a, b)| a * b).sum())
}

/// Ratio of variance products across one block, measured at boundaries `a`
/// (input side) and `b` (output side).
pub fn variance_product_ratio(ft: &ForwardTrace, bt: &BackwardTrace, a: usize, b: usize) -> Result<f64> {
    let ga = bt.grad(a).ok_or_else(|| Error::Precondition(format!("boundary {a} not retained")))?;
    let gb = bt.grad(b).ok_or_else(|| Error::Precondition(format!("boundary {b} not retained")))?;
    let num = variance_product(ft.boundary(a), ga)?;
    let den = variance_product(ft.boundary(b), gb)?;
    ensure!(den > 0.0, Degenerate, "zero variance product at boundary {b}");
    Ok(num / den)
}

/// BN statistics with each layer's per-unit variances replaced by their
/// mean, so every unit in a layer shares one `σ̂`.
pub fn equalize_stats(stats: &[BnStats]) -> Vec<BnStats> {
    stats
        .iter()
        .map(|s| {
            let v = s.var.iter().sum::<f64>() / s.var.len() as f64;
            BnStats { mean: s.mean.clone(), var: vec![v; s.var.len()] }
        })
        .collect()
}

/// Mean-field block ratio `E[f'(z)²] / Var(f(z))` for `z ~ N(mu, 1)`: the
/// gradient-variance gain of one `[act → Dense → BN]` block with frozen
/// statistics and independent inputs. For ReLU this is `C(mu/√2)`.
/// Dropout preserves both sides and gives 1.
pub fn activation_block_ratio(kind: ActivationKind, mu: f64) -> f64 {
    if let ActivationKind::Dropout { .. } = kind {
        return 1.0;
    }
    let pdf = |z: f64| (-(z - mu) * (z - mu) / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let (lo, hi) = (mu - 14.0, mu + 14.0);
    // Split at the kink and pull the endpoints in slightly so each piece is
    // integrated with its one-sided derivative.
    let pieces: Vec<(f64, f64)> = if lo < 0.0 && hi > 0.0 {
        vec![(lo, -1e-13), (1e-13, hi)]
    } else {
        vec![(lo, hi)]
    };
    let simpson = |f: &dyn Fn(f64) -> f64| -> f64 {
        let n = 20_000;
        pieces
            .iter()
            .map(|&(a, b)| {
                let h = (b - a) / n as f64;
                let inner: f64 = (1..n).map(|i| if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h)).sum();
                (f(a) + f(b) + inner) * h / 3.0
            })
            .sum()
    };
    let d2 = simpson(&|z| {
        let d = kind.derivative(z);
        d * d * pdf(z)
    });
    let m1 = simpson(&|z| kind.apply(z) * pdf(z));
    let m2 = simpson(&|z| {
        let f = kind.apply(z);
        f * f * pdf(z)
    });
    d2 / (m2 - m1 * m1)
}
