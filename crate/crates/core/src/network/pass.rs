use super::{ActivationKind, BatchNormLayer, BnMode, DenseLayer, Layer, NetworkState};
use crate::error::{ensure, Error, Result};
use crate::tensor::{column_stats, Matrix, RngStream};

/// Per-column mean and population variance of one BN layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Where the BN layers take `μ̂`, `σ̂²` from.
#[derive(Debug, Clone)]
pub enum StatsSource {
    /// Statistics of the current batch.
    Batch,
    /// The layers' running averages.
    Running,
    /// Supplied per BN layer in depth-first order, e.g. the `bn_stats` of an
    /// earlier full-batch trace.
    Fixed(Vec<BnStats>),
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    Bn { mean: Vec<f64>, inv_std: Vec<f64> },
    /// Inverted-dropout multipliers, `0` or `1/(1−p)`.
    Dropout(Matrix),
    Residual(StackTrace),
}

#[derive(Debug, Clone)]
struct StackTrace {
    xs: Vec<Matrix>,
    caches: Vec<Cache>,
}

/// Everything a backward pass needs: the input of every top-level layer,
/// the final output, and the BN statistics actually used.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    stack: StackTrace,
    /// Depth-first, one entry per BN layer.
    pub bn_stats: Vec<BnStats>,
    from_batch: bool,
}

impl ForwardTrace {
    /// Boundary `i` is the input of top-level layer `i`; boundary
    /// `len() - 1` is the network output.
    pub fn boundary(&self, i: usize) -> &Matrix {
        &self.stack.xs[i]
    }

    pub fn len(&self) -> usize {
        self.stack.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn input(&self) -> &Matrix {
        &self.stack.xs[0]
    }

    pub fn output(&self) -> &Matrix {
        self.stack.xs.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Matrix {
        self.stack.xs.pop().expect("trace holds at least the input")
    }

    /// True when BN used the statistics of this batch.
    pub fn stats_from_batch(&self) -> bool {
        self.from_batch
    }
}

struct ForwardCtx<'a> {
    source: &'a StatsSource,
    cursor: usize,
    collected: Vec<BnStats>,
    dropout: bool,
    eps: f64,
    rng: &'a mut RngStream,
}

/// Forward pass in the state's mode: batch statistics and active dropout in
/// train mode, running statistics otherwise. Running averages are not
/// touched; see [`NetworkState::commit_running_stats`].
pub fn forward(state: &NetworkState, batch: &Matrix, rng: &mut RngStream) -> Result<ForwardTrace> {
    let source = if state.train { StatsSource::Batch } else { StatsSource::Running };
    forward_with(state, batch, rng, &source)
}

/// Forward pass with an explicit BN statistics source. Dropout follows
/// `state.train`.
pub fn forward_with(
    state: &NetworkState,
    batch: &Matrix,
    rng: &mut RngStream,
    source: &StatsSource,
) -> Result<ForwardTrace> {
    ensure!(
        batch.cols() == state.input_dim(),
        Shape,
        "batch has {} columns, network input is {}",
        batch.cols(),
        state.input_dim()
    );
    if let StatsSource::Fixed(s) = source {
        ensure!(
            s.len() == state.bn_layer_count(),
            Shape,
            "{} fixed BN statistics for {} BN layers",
            s.len(),
            state.bn_layer_count()
        );
    }
    let mut ctx = ForwardCtx {
        source,
        cursor: 0,
        collected: Vec::with_capacity(state.bn_layer_count()),
        dropout: state.train,
        eps: state.bn_eps,
        rng,
    };
    let stack = forward_stack(&state.layers, batch.clone(), &mut ctx)?;
    Ok(ForwardTrace {
        stack,
        bn_stats: ctx.collected,
        from_batch: matches!(source, StatsSource::Batch),
    })
}

fn forward_stack(layers: &[Layer], x: Matrix, ctx: &mut ForwardCtx<'_>) -> Result<StackTrace> {
    let mut xs = Vec::with_capacity(layers.len() + 1);
    let mut caches = Vec::with_capacity(layers.len());
    xs.push(x);
    for layer in layers {
        let input = xs.last().expect("nonempty");
        let (out, cache) = match layer {
            Layer::Dense(d) => (dense_forward(d, input)?, Cache::None),
            Layer::BatchNorm(bn) => bn_forward(bn, input, ctx)?,
            Layer::Activation(kind) => activation_forward(*kind, input, ctx),
            Layer::Residual(inner) => {
                let t = forward_stack(inner, input.clone(), ctx)?;
                let mut out = input.clone();
                out.axpy(1.0, t.xs.last().expect("nonempty"))?;
                (out, Cache::Residual(t))
            }
        };
        xs.push(out);
        caches.push(cache);
    }
    Ok(StackTrace { xs, caches })
}

fn dense_forward(d: &DenseLayer, x: &Matrix) -> Result<Matrix> {
    let mut y = x.matmul(&d.w)?;
    if let Some(b) = &d.b {
        y.add_row_broadcast(b.as_slice())?;
    }
    Ok(y)
}

fn bn_forward(bn: &BatchNormLayer, x: &Matrix, ctx: &mut ForwardCtx<'_>) -> Result<(Matrix, Cache)> {
    let stats = match ctx.source {
        StatsSource::Batch => {
            ensure!(x.rows() >= 2, Degenerate, "batch norm on a batch of {} row(s)", x.rows());
            let (mean, var) = column_stats(x)?;
            BnStats { mean, var }
        }
        StatsSource::Running => BnStats { mean: bn.running_mean.clone(), var: bn.running_var.clone() },
        StatsSource::Fixed(all) => all[ctx.cursor].clone(),
    };
    ctx.cursor += 1;
    ensure!(stats.mean.len() == bn.dim, Shape, "BN statistics have the wrong width");
    let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + ctx.eps).sqrt()).collect();
    let mut y = x.clone();
    let gamma = bn.gamma.as_ref().map(|g| g.as_slice());
    let beta = bn.beta.as_ref().map(|b| b.as_slice());
    for r in 0..y.rows() {
        let row = y.row_mut(r);
        for j in 0..row.len() {
            let mut v = (row[j] - stats.mean[j]) * inv_std[j];
            if let (Some(g), Some(b)) = (gamma, beta) {
                v = v * g[j] + b[j];
            }
            row[j] = v;
        }
    }
    let cache = Cache::Bn { mean: stats.mean.clone(), inv_std };
    ctx.collected.push(stats);
    Ok((y, cache))
}

fn activation_forward(kind: ActivationKind, x: &Matrix, ctx: &mut ForwardCtx<'_>) -> (Matrix, Cache) {
    match kind {
        ActivationKind::Dropout { p } if ctx.dropout => {
            let keep = 1.0 / (1.0 - p);
            let mut mask = Matrix::zeros(x.rows(), x.cols());
            for m in mask.as_mut_slice() {
                *m = if ctx.rng.uniform() < p { 0.0 } else { keep };
            }
            let y = x.zip_map(&mask, |a, m| a * m).expect("same shape");
            (y, Cache::Dropout(mask))
        }
        _ => (x.map(|v| kind.apply(v)), Cache::None),
    }
}

/// Controls the cost and footprint of [`backward`].
#[derive(Debug, Clone)]
pub struct BackwardOptions {
    /// Compute `dL/dθ` for every parameter tensor.
    pub param_grads: bool,
    /// Which top-level boundary gradients to keep.
    pub retain: Retain,
    /// Treat BN statistics as constants regardless of the state's mode.
    pub freeze_bn: bool,
    /// Also record, for every parameter tensor, the squared norm of each
    /// row's contribution to its gradient. Rows are independent only under
    /// frozen BN statistics.
    pub per_sample_norms: bool,
}

impl Default for BackwardOptions {
    fn default() -> Self {
        BackwardOptions { param_grads: true, retain: Retain::All, freeze_bn: false, per_sample_norms: false }
    }
}

#[derive(Debug, Clone)]
pub enum Retain {
    All,
    Only(Vec<usize>),
}

impl Retain {
    fn keeps(&self, i: usize) -> bool {
        match self {
            Retain::All => true,
            Retain::Only(v) => v.contains(&i),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BackwardTrace {
    /// `g[i] = dL/d(boundary i)` when retained.
    pub grads: Vec<Option<Matrix>>,
    /// Gradient with respect to the network input.
    pub input_grad: Matrix,
    /// Same order as [`NetworkState::params`]; empty if not requested.
    pub param_grads: Vec<Matrix>,
    /// `[tensor][row]` squared norms of the per-row gradient contributions,
    /// same tensor order; empty unless requested.
    pub per_sample_sq_norms: Vec<Vec<f64>>,
}

impl BackwardTrace {
    pub fn grad(&self, i: usize) -> Option<&Matrix> {
        self.grads.get(i).and_then(|g| g.as_ref())
    }
}

struct BackwardCtx {
    exact_bn: bool,
    param_grads: bool,
    per_sample: bool,
    /// Parameter gradients in reverse order.
    rev: Vec<Matrix>,
    rev_ps: Vec<Vec<f64>>,
}

fn row_sq_norms(m: &Matrix) -> Vec<f64> {
    (0..m.rows()).map(|r| m.row(r).iter().map(|v| v * v).sum()).collect()
}

/// Backpropagates `g_out = dL/d(output)` through the pass recorded in
/// `trace`.
///
/// BN differentiates through its statistics only in [`BnMode::Exact`] and
/// only when the trace used batch statistics; otherwise `μ̂`, `σ̂` are
/// constants.
pub fn backward(
    state: &NetworkState,
    trace: &ForwardTrace,
    g_out: &Matrix,
    opts: &BackwardOptions,
) -> Result<BackwardTrace> {
    let out = trace.output();
    ensure!(
        g_out.shape() == out.shape(),
        Shape,
        "output gradient {:?} vs output {:?}",
        g_out.shape(),
        out.shape()
    );
    let n = state.layers.len();
    if trace.stack.caches.len() != n {
        return Err(Error::Shape("trace does not belong to this network".into()));
    }
    let mut ctx = BackwardCtx {
        exact_bn: state.bn_mode == BnMode::Exact && trace.from_batch && !opts.freeze_bn,
        param_grads: opts.param_grads || opts.per_sample_norms,
        per_sample: opts.per_sample_norms,
        rev: Vec::new(),
        rev_ps: Vec::new(),
    };
    let mut grads = vec![None; n + 1];
    let mut g = g_out.clone();
    if opts.retain.keeps(n) {
        grads[n] = Some(g.clone());
    }
    for i in (0..n).rev() {
        g = backward_layer(&state.layers[i], &trace.stack, i, g, &mut ctx)?;
        if opts.retain.keeps(i) {
            grads[i] = Some(g.clone());
        }
    }
    ctx.rev.reverse();
    ctx.rev_ps.reverse();
    let param_grads = if opts.param_grads { ctx.rev } else { Vec::new() };
    Ok(BackwardTrace { grads, input_grad: g, param_grads, per_sample_sq_norms: ctx.rev_ps })
}

fn backward_stack(layers: &[Layer], t: &StackTrace, mut g: Matrix, ctx: &mut BackwardCtx) -> Result<Matrix> {
    for i in (0..layers.len()).rev() {
        g = backward_layer(&layers[i], t, i, g, ctx)?;
    }
    Ok(g)
}

fn backward_layer(layer: &Layer, t: &StackTrace, i: usize, g: Matrix, ctx: &mut BackwardCtx) -> Result<Matrix> {
    let x = &t.xs[i];
    match (layer, &t.caches[i]) {
        (Layer::Dense(d), _) => {
            if ctx.param_grads {
                if d.b.is_some() {
                    ctx.rev.push(Matrix::from_vec(1, g.cols(), g.column_sums())?);
                }
                ctx.rev.push(x.t_matmul(&g)?);
            }
            if ctx.per_sample {
                // one row's W gradient is the outer product x_bᵀ g_b
                let gn = row_sq_norms(&g);
                if d.b.is_some() {
                    ctx.rev_ps.push(gn.clone());
                }
                ctx.rev_ps.push(row_sq_norms(x).iter().zip(&gn).map(|(a, b)| a * b).collect());
            }
            g.matmul_t(&d.w)
        }
        (Layer::BatchNorm(bn), Cache::Bn { mean, inv_std }) => bn_backward(bn, x, mean, inv_std, g, ctx),
        (Layer::Activation(_), Cache::Dropout(mask)) => g.zip_map(mask, |a, m| a * m),
        (Layer::Activation(kind), _) => x.zip_map(&g, |xv, gv| gv * kind.derivative(xv)),
        (Layer::Residual(inner), Cache::Residual(it)) => {
            let mut through = backward_stack(inner, it, g.clone(), ctx)?;
            through.axpy(1.0, &g)?;
            Ok(through)
        }
        _ => Err(Error::Shape("trace cache does not match layer".into())),
    }
}

fn bn_backward(
    bn: &BatchNormLayer,
    x: &Matrix,
    mean: &[f64],
    inv_std: &[f64],
    g: Matrix,
    ctx: &mut BackwardCtx,
) -> Result<Matrix> {
    let (rows, cols) = g.shape();
    let gamma: Vec<f64> = match &bn.gamma {
        Some(gm) => gm.as_slice().to_vec(),
        None => vec![1.0; cols],
    };
    let need_sums = ctx.exact_bn || (ctx.param_grads && bn.gamma.is_some());
    // Σ_r dy and Σ_r dy·x̂ per column.
    let mut sum_g = vec![0.0; cols];
    let mut sum_gx = vec![0.0; cols];
    if need_sums {
        for r in 0..rows {
            let (xr, gr) = (x.row(r), g.row(r));
            for j in 0..cols {
                let xhat = (xr[j] - mean[j]) * inv_std[j];
                sum_g[j] += gr[j];
                sum_gx[j] += gr[j] * xhat;
            }
        }
    }
    if ctx.param_grads && bn.gamma.is_some() {
        ctx.rev.push(Matrix::from_vec(1, cols, sum_g.clone())?);
        ctx.rev.push(Matrix::from_vec(1, cols, sum_gx.clone())?);
    }
    if ctx.per_sample && bn.gamma.is_some() {
        let mut beta_sq = vec![0.0; rows];
        let mut gamma_sq = vec![0.0; rows];
        for r in 0..rows {
            let (xr, gr) = (x.row(r), g.row(r));
            for j in 0..cols {
                let gx = gr[j] * (xr[j] - mean[j]) * inv_std[j];
                beta_sq[r] += gr[j] * gr[j];
                gamma_sq[r] += gx * gx;
            }
        }
        ctx.rev_ps.push(beta_sq);
        ctx.rev_ps.push(gamma_sq);
    }
    let mut dx = g;
    if ctx.exact_bn {
        let nf = rows as f64;
        for r in 0..rows {
            let xr = x.row(r);
            let dr = dx.row_mut(r);
            for j in 0..cols {
                let xhat = (xr[j] - mean[j]) * inv_std[j];
                let s = gamma[j] * inv_std[j];
                dr[j] = s * (dr[j] - (sum_g[j] + xhat * sum_gx[j]) / nf);
            }
        }
    } else {
        for r in 0..rows {
            let dr = dx.row_mut(r);
            for j in 0..cols {
                dr[j] *= gamma[j] * inv_std[j];
            }
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::super::{block_stack, init_network, InitScheme, LayerSpec, BN_MOMENTUM};
    use super::*;
    use crate::tensor::gaussian;

    fn net(specs: &[LayerSpec], seed: u64) -> NetworkState {
        init_network(specs, InitScheme::He, &mut RngStream::new(seed)).unwrap()
    }

    #[test]
    fn identity_dense_passes_through() {
        let mut st = net(
            &[
                LayerSpec::Dense { in_dim: 3, out_dim: 3, bias: true },
                LayerSpec::Activation(ActivationKind::Identity),
            ],
            0,
        );
        if let Layer::Dense(d) = &mut st.layers[0] {
            d.w = Matrix::identity(3);
        }
        let x = gaussian(&mut RngStream::new(1), 0.0, 1.0, 5, 3).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(2)).unwrap();
        assert_eq!(t.output(), &x);
    }

    #[test]
    fn bn_hand_example() {
        let mut st = net(&[LayerSpec::BatchNorm { dim: 1, affine: true }], 0);
        st.bn_eps = 0.0;
        let x = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        assert_eq!(t.output().as_slice(), &[-1.0, 1.0]);
        assert_eq!(t.bn_stats[0], BnStats { mean: vec![1.0], var: vec![1.0] });
    }

    #[test]
    fn bn_train_output_is_standardized() {
        let mut st = net(&[LayerSpec::BatchNorm { dim: 4, affine: true }], 0);
        st.bn_eps = 0.0;
        if let Layer::BatchNorm(bn) = &mut st.layers[0] {
            bn.gamma = Some(Matrix::from_vec(1, 4, vec![0.5, 1.0, 2.0, 3.0]).unwrap());
        }
        let x = gaussian(&mut RngStream::new(4), 3.0, 7.0, 1000, 4).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let (m, v) = column_stats(t.output()).unwrap();
        for (j, g) in [0.5f64, 1.0, 2.0, 3.0].iter().enumerate() {
            assert!(m[j].abs() < 1e-10);
            assert!((v[j] - g * g).abs() < 1e-10);
        }
    }

    #[test]
    fn one_row_train_batch_is_degenerate() {
        let st = net(&[LayerSpec::BatchNorm { dim: 2, affine: true }], 0);
        let x = Matrix::zeros(1, 2);
        assert!(matches!(forward(&st, &x, &mut RngStream::new(0)), Err(Error::Degenerate(_))));
        let mut eval = st.clone();
        eval.train = false;
        assert!(forward(&eval, &x, &mut RngStream::new(0)).is_ok());
    }

    #[test]
    fn running_stats_commit_with_momentum() {
        let mut st = net(&[LayerSpec::BatchNorm { dim: 1, affine: false }], 0);
        let x = Matrix::from_vec(2, 1, vec![0.0, 2.0]).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        st.commit_running_stats(&t).unwrap();
        if let Layer::BatchNorm(bn) = &st.layers[0] {
            assert!((bn.running_mean[0] - 0.1).abs() < 1e-15);
            assert!((bn.running_var[0] - 1.0).abs() < 1e-15);
        }
        st.train = false;
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        assert!(st.commit_running_stats(&t).is_err());
    }

    #[test]
    fn adopted_stats_reproduce_the_batch_in_eval_mode() {
        let mut st = net(&[LayerSpec::BatchNorm { dim: 3, affine: true }], 0);
        let x = gaussian(&mut RngStream::new(5), 1.0, 2.0, 16, 3).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        st.adopt_batch_stats(&t).unwrap();
        assert_eq!(st.bn_momentum, BN_MOMENTUM);
        st.train = false;
        let e = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        for (a, b) in t.output().as_slice().iter().zip(e.output().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dropout_mask_statistics() {
        let st = net(
            &[
                LayerSpec::BatchNorm { dim: 100, affine: true },
                LayerSpec::Activation(ActivationKind::Dropout { p: 0.5 }),
            ],
            0,
        );
        let x = gaussian(&mut RngStream::new(3), 0.0, 1.0, 1000, 100).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(8)).unwrap();
        let pre = t.boundary(1);
        let out = t.output();
        let zeroed = out.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / out.len() as f64;
        assert!((zeroed - 0.5).abs() < 0.01, "{zeroed}");
        for (a, b) in pre.as_slice().iter().zip(out.as_slice()) {
            assert!(*b == 0.0 || (b - 2.0 * a).abs() < 1e-15);
        }
        let mut eval = st.clone();
        eval.train = false;
        let t = forward(&eval, &x, &mut RngStream::new(8)).unwrap();
        assert_eq!(t.output(), t.boundary(1));
    }

    #[test]
    fn dense_backward_selects_weight_row() {
        let st = net(&[LayerSpec::Dense { in_dim: 3, out_dim: 4, bias: false }], 6);
        let x = gaussian(&mut RngStream::new(1), 0.0, 1.0, 1, 3).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let mut g = Matrix::zeros(1, 4);
        g.set(0, 2, 1.0);
        let bt = backward(&st, &t, &g, &BackwardOptions::default()).unwrap();
        let w = st.params()[0];
        for i in 0..3 {
            assert_eq!(bt.input_grad.get(0, i), w.get(i, 2));
        }
    }

    #[test]
    fn frozen_bn_backward_divides_by_sigma() {
        let mut st = net(&[LayerSpec::BatchNorm { dim: 3, affine: true }], 0);
        st.bn_mode = BnMode::FrozenStats;
        let x = gaussian(&mut RngStream::new(2), 1.0, 3.0, 64, 3).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let g = gaussian(&mut RngStream::new(5), 0.0, 1.0, 64, 3).unwrap();
        let bt = backward(&st, &t, &g, &BackwardOptions::default()).unwrap();
        let s = &t.bn_stats[0];
        for r in 0..64 {
            for j in 0..3 {
                let want = g.get(r, j) / (s.var[j] + st.bn_eps).sqrt();
                assert!((bt.input_grad.get(r, j) - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn relu_gradient_is_zero_where_blocked() {
        let st = net(&block_stack(16, 3, ActivationKind::Relu, false), 1);
        let x = gaussian(&mut RngStream::new(2), 0.0, 1.0, 32, 16).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let g = gaussian(&mut RngStream::new(3), 0.0, 1.0, 32, 16).unwrap();
        let bt = backward(&st, &t, &g, &BackwardOptions::default()).unwrap();
        for i in st.block_boundaries().into_iter().filter(|&i| i < st.layers.len()) {
            // gradient just after the ReLU (input of the dense layer) is masked
            let (xin, gafter) = (t.boundary(i), bt.grad(i + 1).unwrap());
            let gbefore = bt.grad(i).unwrap();
            for k in 0..xin.len() {
                if xin.as_slice()[k] <= 0.0 {
                    assert_eq!(gbefore.as_slice()[k], 0.0);
                } else {
                    assert_eq!(gbefore.as_slice()[k], gafter.as_slice()[k]);
                }
            }
        }
    }

    #[test]
    fn zero_inner_residual_is_identity() {
        let specs = [LayerSpec::Residual(vec![
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Dense { in_dim: 4, out_dim: 4, bias: true },
        ])];
        let st = init_network(&specs, InitScheme::FixedSigma(0.0), &mut RngStream::new(0)).unwrap();
        let x = gaussian(&mut RngStream::new(1), 0.0, 1.0, 8, 4).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        assert_eq!(t.output(), &x);
        let g = gaussian(&mut RngStream::new(2), 0.0, 1.0, 8, 4).unwrap();
        let bt = backward(&st, &t, &g, &BackwardOptions::default()).unwrap();
        assert_eq!(bt.input_grad, g);
    }

    #[test]
    fn retain_only_keeps_requested_boundaries() {
        let st = net(&block_stack(8, 2, ActivationKind::Relu, false), 1);
        let x = gaussian(&mut RngStream::new(2), 0.0, 1.0, 16, 8).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let g = gaussian(&mut RngStream::new(3), 0.0, 1.0, 16, 8).unwrap();
        let full = backward(&st, &t, &g, &BackwardOptions::default()).unwrap();
        let opts = BackwardOptions { param_grads: false, retain: Retain::Only(st.block_boundaries()), ..Default::default() };
        let lean = backward(&st, &t, &g, &opts).unwrap();
        assert!(lean.param_grads.is_empty());
        assert_eq!(full.param_grads.len(), st.params().len());
        for i in 0..=st.layers.len() {
            match lean.grad(i) {
                Some(m) => assert_eq!(Some(m), full.grad(i)),
                None => assert!(!st.block_boundaries().contains(&i)),
            }
        }
        assert_eq!(lean.input_grad, full.input_grad);
    }

    /// Loss = mean of squared outputs.
    fn msq_loss(st: &NetworkState, x: &Matrix, seed: u64) -> f64 {
        let t = forward(st, x, &mut RngStream::new(seed)).unwrap();
        t.output().sum_squares() / t.output().len() as f64
    }

    #[test]
    fn exact_gradients_match_finite_differences() {
        let specs = vec![
            LayerSpec::Dense { in_dim: 5, out_dim: 6, bias: true },
            LayerSpec::BatchNorm { dim: 6, affine: true },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Residual(vec![
                LayerSpec::Activation(ActivationKind::Gelu),
                LayerSpec::Dense { in_dim: 6, out_dim: 6, bias: true },
                LayerSpec::BatchNorm { dim: 6, affine: true },
            ]),
            LayerSpec::Activation(ActivationKind::Dropout { p: 0.3 }),
            LayerSpec::Dense { in_dim: 6, out_dim: 6, bias: false },
            LayerSpec::Activation(ActivationKind::Elu { alpha: 1.0 }),
            LayerSpec::BatchNorm { dim: 6, affine: false },
            LayerSpec::Activation(ActivationKind::Swish),
            LayerSpec::Dense { in_dim: 6, out_dim: 4, bias: true },
            LayerSpec::Activation(ActivationKind::LeakyRelu { alpha: 0.1 }),
            LayerSpec::Dense { in_dim: 4, out_dim: 3, bias: true },
        ];
        let mut st = net(&specs, 11);
        // move BN parameters off their identity values
        let mut prng = RngStream::new(12);
        for p in st.params_mut() {
            for v in p.as_mut_slice() {
                *v += 0.3 * prng.standard_normal();
            }
        }
        let x = gaussian(&mut RngStream::new(13), 0.5, 1.5, 12, 5).unwrap();
        let seed = 99;
        let t = forward(&st, &x, &mut RngStream::new(seed)).unwrap();
        let out = t.output();
        let g_out = out.scale(2.0 / out.len() as f64);
        let bt = backward(&st, &t, &g_out, &BackwardOptions::default()).unwrap();

        let sizes: Vec<usize> = st.params().iter().map(|m| m.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut pick = RngStream::new(14);
        let h = 1e-5;
        let mut checked = 0;
        while checked < 100 {
            let mut flat = pick.below(total as u64) as usize;
            let mut pi = 0;
            while flat >= sizes[pi] {
                flat -= sizes[pi];
                pi += 1;
            }
            let analytic = bt.param_grads[pi].as_slice()[flat];
            let base = st.params()[pi].as_slice()[flat];
            let mut probe = st.clone();
            probe.params_mut()[pi].as_mut_slice()[flat] = base + h;
            let up = msq_loss(&probe, &x, seed);
            probe.params_mut()[pi].as_mut_slice()[flat] = base - h;
            let down = msq_loss(&probe, &x, seed);
            let fd = (up - down) / (2.0 * h);
            let scale = analytic.abs().max(fd.abs());
            assert!(
                (fd - analytic).abs() <= 1e-6 * scale + 1e-10,
                "param {pi}[{flat}]: fd {fd} vs analytic {analytic}"
            );
            checked += 1;
        }
    }

    #[test]
    fn exact_and_frozen_agree_for_large_linear_batches() {
        let width = 32;
        let mut specs = vec![LayerSpec::BatchNorm { dim: width, affine: true }];
        for _ in 0..3 {
            specs.push(LayerSpec::Activation(ActivationKind::Identity));
            specs.push(LayerSpec::Dense { in_dim: width, out_dim: width, bias: true });
            specs.push(LayerSpec::BatchNorm { dim: width, affine: true });
        }
        let mut st = net(&specs, 21);
        let x = gaussian(&mut RngStream::new(22), 0.0, 1.0, 4096, width).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let g = gaussian(&mut RngStream::new(23), 0.0, 1.0, 4096, width).unwrap();
        let opts = BackwardOptions { param_grads: false, retain: Retain::All, ..Default::default() };
        let exact = backward(&st, &t, &g, &opts).unwrap();
        st.bn_mode = BnMode::FrozenStats;
        let frozen = backward(&st, &t, &g, &opts).unwrap();
        for i in st.block_boundaries() {
            let ve = exact.grad(i).unwrap().pooled_stats().1;
            let vf = frozen.grad(i).unwrap().pooled_stats().1;
            assert!((ve / vf - 1.0).abs() < 0.1, "boundary {i}: {ve} vs {vf}");
        }
    }

    #[test]
    fn fixed_stats_reproduce_batch_pass() {
        let st = net(&block_stack(6, 2, ActivationKind::Relu, true), 3);
        let x = gaussian(&mut RngStream::new(4), 0.0, 1.0, 20, 6).unwrap();
        let t = forward(&st, &x, &mut RngStream::new(0)).unwrap();
        let fixed = StatsSource::Fixed(t.bn_stats.clone());
        let t2 = forward_with(&st, &x, &mut RngStream::new(0), &fixed).unwrap();
        assert_eq!(t.output(), t2.output());
        assert!(!t2.stats_from_batch());
        let one = x.select_rows(&[7]);
        let t3 = forward_with(&st, &one, &mut RngStream::new(0), &fixed).unwrap();
        assert_eq!(t3.output().row(0), t.output().row(7));
    }
}
