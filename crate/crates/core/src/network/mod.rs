//! Dense layer stacks with batch normalization, instrumented forward and
//! backward passes, and the probe-input constructors.
//!
//! Shapes follow the tensor convention: rows are samples, columns are
//! features. A dense layer holds `W` as `in_dim × out_dim` and computes
//! `x·W + b`.
//!
//! Forward and backward take `&NetworkState`; the only mutations are
//! [`init_network`], [`NetworkState::commit_running_stats`] and optimizer
//! steps through [`NetworkState::params_mut`].

mod activation;
mod pass;

pub use activation::ActivationKind;
pub use pass::{
    backward, forward, forward_with, BackwardOptions, BackwardTrace, BnStats, ForwardTrace,
    Retain, StatsSource,
};

use crate::error::{ensure, Error, Result};
use crate::tensor::{gaussian, Matrix, RngStream};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dense { in_dim: usize, out_dim: usize, bias: bool },
    BatchNorm { dim: usize, affine: bool },
    Activation(ActivationKind),
    /// `y = x + inner(x)`; `inner` must map `d → d`.
    Residual(Vec<LayerSpec>),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// `N(0, 2/n_out)`.
    He,
    /// `N(0, s²)`.
    FixedSigma(f64),
}

/// How the BN backward pass treats the batch statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Differentiate through `μ̂` and `σ̂`.
    Exact,
    /// Treat `μ̂`, `σ̂` as constants: `dx = dy·γ/σ̂`.
    FrozenStats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
}

/// Location and role of one parameter tensor, in [`NetworkState::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub kind: ParamKind,
    /// Dotted path of layer indices, e.g. `"3"` or `"2.1"` inside a residual.
    pub path: String,
    pub shape: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub w: Matrix,
    /// `1 × out_dim`.
    pub b: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub dim: usize,
    /// `1 × dim` each; `None` when the layer is not affine.
    pub gamma: Option<Matrix>,
    pub beta: Option<Matrix>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    BatchNorm(BatchNormLayer),
    Activation(ActivationKind),
    Residual(Vec<Layer>),
}

#[derive(Debug, Clone)]
pub struct NetworkState {
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
    pub bn_mode: BnMode,
    /// Train mode: BN uses batch statistics and dropout is active.
    pub train: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
    input_dim: usize,
    output_dim: usize,
}

/// Propagates the feature dimension through `specs`. `dim` is `None` while
/// only activations have been seen.
fn chain_dims(specs: &[LayerSpec], mut dim: Option<usize>, path: &str) -> Result<(Option<usize>, Option<usize>)> {
    let mut first = None;
    for (i, spec) in specs.iter().enumerate() {
        let here = format!("{path}{i}");
        let (need, out) = match spec {
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                ensure!(*in_dim > 0 && *out_dim > 0, Shape, "layer {here}: dense dims must be positive");
                (Some(*in_dim), Some(*out_dim))
            }
            LayerSpec::BatchNorm { dim: d, .. } => {
                ensure!(*d > 0, Shape, "layer {here}: batchnorm dim must be positive");
                (Some(*d), Some(*d))
            }
            LayerSpec::Activation(kind) => {
                kind.validate()?;
                (None, None)
            }
            LayerSpec::Residual(inner) => {
                ensure!(!inner.is_empty(), Shape, "layer {here}: empty residual block");
                let (i_in, i_out) = chain_dims(inner, dim, &format!("{here}."))?;
                ensure!(
                    i_in == i_out,
                    Shape,
                    "layer {here}: residual inner stack maps {i_in:?} -> {i_out:?}"
                );
                (i_in, i_out)
            }
        };
        if let Some(n) = need {
            if let Some(d) = dim {
                ensure!(d == n, Shape, "layer {here}: expects input dim {n}, got {d}");
            }
            if first.is_none() {
                first = Some(n);
            }
        }
        if out.is_some() {
            dim = out;
        }
    }
    Ok((first.or(dim), dim))
}

/// Checks that `specs` chain and returns `(input_dim, output_dim)`.
pub fn validate_specs(specs: &[LayerSpec]) -> Result<(usize, usize)> {
    ensure!(!specs.is_empty(), Shape, "network has no layers");
    match chain_dims(specs, None, "")? {
        (Some(i), Some(o)) => Ok((i, o)),
        _ => Err(Error::Shape("network dimensions are undetermined: no dense or batchnorm layer".into())),
    }
}

fn init_layers(specs: &[LayerSpec], scheme: InitScheme, rng: &mut RngStream) -> Result<Vec<Layer>> {
    specs
        .iter()
        .map(|spec| {
            Ok(match spec {
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    let sigma = match scheme {
                        InitScheme::He => (2.0 / *out_dim as f64).sqrt(),
                        InitScheme::FixedSigma(s) => s,
                    };
                    Layer::Dense(DenseLayer {
                        w: gaussian(rng, 0.0, sigma, *in_dim, *out_dim)?,
                        b: bias.then(|| Matrix::zeros(1, *out_dim)),
                    })
                }
                LayerSpec::BatchNorm { dim, affine } => Layer::BatchNorm(BatchNormLayer {
                    dim: *dim,
                    gamma: affine.then(|| Matrix::filled(1, *dim, 1.0)),
                    beta: affine.then(|| Matrix::zeros(1, *dim)),
                    running_mean: vec![0.0; *dim],
                    running_var: vec![1.0; *dim],
                }),
                LayerSpec::Activation(kind) => Layer::Activation(*kind),
                LayerSpec::Residual(inner) => Layer::Residual(init_layers(inner, scheme, rng)?),
            })
        })
        .collect()
}

/// Builds a network in train mode with [`BnMode::Exact`]. Weights are drawn
/// from `rng` in layer order.
pub fn init_network(specs: &[LayerSpec], scheme: InitScheme, rng: &mut RngStream) -> Result<NetworkState> {
    let (input_dim, output_dim) = validate_specs(specs)?;
    if let InitScheme::FixedSigma(s) = scheme {
        ensure!(s >= 0.0 && s.is_finite(), Domain, "init sigma {s} must be finite and >= 0");
    }
    Ok(NetworkState {
        specs: specs.to_vec(),
        layers: init_layers(specs, scheme, rng)?,
        bn_mode: BnMode::Exact,
        train: true,
        bn_eps: BN_EPS,
        bn_momentum: BN_MOMENTUM,
        input_dim,
        output_dim,
    })
}

fn collect_params<'a>(layers: &'a [Layer], path: &str, out: &mut Vec<(ParamInfo, &'a Matrix)>) {
    for (i, layer) in layers.iter().enumerate() {
        let here = format!("{path}{i}");
        let mut push = |kind, m: &'a Matrix| {
            out.push((ParamInfo { kind, path: here.clone(), shape: m.shape() }, m));
        };
        match layer {
            Layer::Dense(d) => {
                push(ParamKind::Weight, &d.w);
                if let Some(b) = &d.b {
                    push(ParamKind::Bias, b);
                }
            }
            Layer::BatchNorm(bn) => {
                if let (Some(g), Some(b)) = (&bn.gamma, &bn.beta) {
                    push(ParamKind::BnGamma, g);
                    push(ParamKind::BnBeta, b);
                }
            }
            Layer::Activation(_) => {}
            Layer::Residual(inner) => collect_params(inner, &format!("{here}."), out),
        }
    }
}

fn collect_params_mut<'a>(layers: &'a mut [Layer], out: &mut Vec<&'a mut Matrix>) {
    for layer in layers.iter_mut() {
        match layer {
            Layer::Dense(d) => {
                out.push(&mut d.w);
                if let Some(b) = &mut d.b {
                    out.push(b);
                }
            }
            Layer::BatchNorm(bn) => {
                if let (Some(g), Some(b)) = (&mut bn.gamma, &mut bn.beta) {
                    out.push(g);
                    out.push(b);
                }
            }
            Layer::Activation(_) => {}
            Layer::Residual(inner) => collect_params_mut(inner, out),
        }
    }
}

fn commit_layers(layers: &mut [Layer], stats: &mut std::slice::Iter<'_, BnStats>, momentum: f64) {
    for layer in layers.iter_mut() {
        match layer {
            Layer::BatchNorm(bn) => {
                let s = stats.next().expect("trace and network disagree on BN count");
                for j in 0..bn.dim {
                    bn.running_mean[j] = (1.0 - momentum) * bn.running_mean[j] + momentum * s.mean[j];
                    bn.running_var[j] = (1.0 - momentum) * bn.running_var[j] + momentum * s.var[j];
                }
            }
            Layer::Residual(inner) => commit_layers(inner, stats, momentum),
            _ => {}
        }
    }
}

fn any_layer(layers: &[Layer], pred: &dyn Fn(&Layer) -> bool) -> bool {
    layers.iter().any(|l| match l {
        Layer::Residual(inner) => pred(l) || any_layer(inner, pred),
        _ => pred(l),
    })
}

impl NetworkState {
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    /// Parameter tensors in depth-first layer order: `W, b` per dense layer,
    /// `γ, β` per affine BN layer.
    pub fn params(&self) -> Vec<&Matrix> {
        self.param_entries().into_iter().map(|(_, m)| m).collect()
    }

    pub fn param_info(&self) -> Vec<ParamInfo> {
        self.param_entries().into_iter().map(|(i, _)| i).collect()
    }

    fn param_entries(&self) -> Vec<(ParamInfo, &Matrix)> {
        let mut out = Vec::new();
        collect_params(&self.layers, "", &mut out);
        out
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        collect_params_mut(&mut self.layers, &mut out);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.len()).sum()
    }

    pub fn bn_layer_count(&self) -> usize {
        fn count(layers: &[Layer]) -> usize {
            layers
                .iter()
                .map(|l| match l {
                    Layer::BatchNorm(_) => 1,
                    Layer::Residual(inner) => count(inner),
                    _ => 0,
                })
                .sum()
        }
        count(&self.layers)
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// averages with momentum [`bn_momentum`](Self::bn_momentum).
    pub fn commit_running_stats(&mut self, trace: &ForwardTrace) -> Result<()> {
        ensure!(
            trace.stats_from_batch(),
            Precondition,
            "trace did not compute batch statistics"
        );
        ensure!(
            trace.bn_stats.len() == self.bn_layer_count(),
            Shape,
            "trace has {} BN layers, network has {}",
            trace.bn_stats.len(),
            self.bn_layer_count()
        );
        let momentum = self.bn_momentum;
        commit_layers(&mut self.layers, &mut trace.bn_stats.iter(), momentum);
        Ok(())
    }

    /// Replaces the running averages with the batch statistics of a
    /// train-mode trace, so eval mode reproduces that batch's normalization.
    pub fn adopt_batch_stats(&mut self, trace: &ForwardTrace) -> Result<()> {
        let momentum = self.bn_momentum;
        self.bn_momentum = 1.0;
        let res = self.commit_running_stats(trace);
        self.bn_momentum = momentum;
        res
    }

    /// Top-level layer indices where gradient variance is measured: the input
    /// of every activation or residual layer, plus the output (index
    /// `layers.len()`).
    pub fn block_boundaries(&self) -> Vec<usize> {
        let mut b: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Layer::Activation(_) | Layer::Residual(_)))
            .map(|(i, _)| i)
            .collect();
        b.push(self.layers.len());
        b
    }

    /// True when no curved activation occurs anywhere in the stack.
    pub fn is_piecewise_linear(&self) -> bool {
        !any_layer(&self.layers, &|l| matches!(l, Layer::Activation(k) if !k.is_piecewise_linear()))
    }

    pub fn has_batch_norm(&self) -> bool {
        self.bn_layer_count() > 0
    }

    pub fn has_dropout(&self) -> bool {
        any_layer(&self.layers, &|l| matches!(l, Layer::Activation(ActivationKind::Dropout { .. })))
    }
}

/// `[BN] + [act → Dense → BN] × depth`, the block layout the explosion
/// probes measure. With `residual`, each block is wrapped as
/// `x + BN(Dense(act(x)))`.
pub fn block_stack(width: usize, depth: usize, act: ActivationKind, residual: bool) -> Vec<LayerSpec> {
    let mut specs = vec![LayerSpec::BatchNorm { dim: width, affine: true }];
    for _ in 0..depth {
        let block = vec![
            LayerSpec::Activation(act),
            LayerSpec::Dense { in_dim: width, out_dim: width, bias: true },
            LayerSpec::BatchNorm { dim: width, affine: true },
        ];
        if residual {
            specs.push(LayerSpec::Residual(block));
        } else {
            specs.extend(block);
        }
    }
    specs
}

/// i.i.d. `N(0, 1)` matrix used as the output gradient of a probe.
pub fn inject_output_gradient(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    gaussian(rng, 0.0, 1.0, rows, cols).expect("unit sigma is valid")
}

/// Rows `b_k · t` with `b_k ~ N(0, 1)`: every column is a multiple of one
/// random vector.
pub fn make_correlated_batch(t: &[f64], rng: &mut RngStream, batch_size: usize) -> Result<Matrix> {
    ensure!(!t.is_empty() && batch_size > 0, Shape, "empty direction or batch");
    ensure!(t.iter().all(|v| v.is_finite()), Domain, "direction has non-finite entries");
    ensure!(t.iter().any(|&v| v != 0.0), Domain, "direction vector is zero");
    let mut m = Matrix::zeros(batch_size, t.len());
    for r in 0..batch_size {
        let b = rng.standard_normal();
        for (dst, &ti) in m.row_mut(r).iter_mut().zip(t) {
            *dst = b * ti;
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{column_stats, pairwise_abs_corr};

    #[test]
    fn he_and_fixed_sigma_variances() {
        let specs = [LayerSpec::Dense { in_dim: 512, out_dim: 512, bias: true }];
        let net = init_network(&specs, InitScheme::He, &mut RngStream::new(1)).unwrap();
        let (_, var) = net.params()[0].pooled_stats();
        let target = 2.0 / 512.0;
        assert!(var > 0.94 * target && var < 1.06 * target, "{var}");
        assert!(net.params()[1].as_slice().iter().all(|&b| b == 0.0));

        let net = init_network(&specs, InitScheme::FixedSigma(0.01), &mut RngStream::new(2)).unwrap();
        let sd = net.params()[0].pooled_stats().1.sqrt();
        assert!(sd > 0.0099 && sd < 0.0101, "{sd}");
    }

    #[test]
    fn bn_parameters_start_at_identity() {
        let net = init_network(&block_stack(8, 2, ActivationKind::Relu, false), InitScheme::He, &mut RngStream::new(3))
            .unwrap();
        for (info, m) in net.param_info().iter().zip(net.params()) {
            match info.kind {
                ParamKind::BnGamma => assert!(m.as_slice().iter().all(|&v| v == 1.0)),
                ParamKind::BnBeta => assert!(m.as_slice().iter().all(|&v| v == 0.0)),
                _ => {}
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let bad = [
            LayerSpec::Dense { in_dim: 4, out_dim: 3, bias: false },
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Dense { in_dim: 4, out_dim: 2, bias: false },
        ];
        assert!(matches!(validate_specs(&bad), Err(Error::Shape(_))));
        let bad_res = [LayerSpec::Residual(vec![LayerSpec::Dense { in_dim: 4, out_dim: 3, bias: true }])];
        assert!(matches!(validate_specs(&bad_res), Err(Error::Shape(_))));
        let only_act = [LayerSpec::Activation(ActivationKind::Relu)];
        assert!(validate_specs(&only_act).is_err());
        let ok = [
            LayerSpec::Activation(ActivationKind::Relu),
            LayerSpec::Dense { in_dim: 4, out_dim: 3, bias: false },
            LayerSpec::Residual(vec![
                LayerSpec::Activation(ActivationKind::Gelu),
                LayerSpec::Dense { in_dim: 3, out_dim: 3, bias: true },
            ]),
        ];
        assert_eq!(validate_specs(&ok).unwrap(), (4, 3));
    }

    #[test]
    fn param_order_is_depth_first() {
        let specs = [
            LayerSpec::Dense { in_dim: 2, out_dim: 3, bias: true },
            LayerSpec::Residual(vec![
                LayerSpec::BatchNorm { dim: 3, affine: true },
                LayerSpec::Dense { in_dim: 3, out_dim: 3, bias: false },
            ]),
            LayerSpec::BatchNorm { dim: 3, affine: false },
        ];
        let net = init_network(&specs, InitScheme::He, &mut RngStream::new(0)).unwrap();
        let kinds: Vec<_> = net.param_info().iter().map(|i| (i.kind, i.path.clone())).collect();
        assert_eq!(
            kinds,
            vec![
                (ParamKind::Weight, "0".into()),
                (ParamKind::Bias, "0".into()),
                (ParamKind::BnGamma, "1.0".into()),
                (ParamKind::BnBeta, "1.0".into()),
                (ParamKind::Weight, "1.1".into()),
            ]
        );
        assert_eq!(net.bn_layer_count(), 2);
        assert_eq!(net.param_count(), 6 + 3 + 3 + 3 + 9);
    }

    #[test]
    fn block_boundaries_of_probe_stack() {
        let net = init_network(&block_stack(4, 3, ActivationKind::Relu, false), InitScheme::He, &mut RngStream::new(0))
            .unwrap();
        assert_eq!(net.block_boundaries(), vec![1, 4, 7, 10]);
        let net = init_network(&block_stack(4, 3, ActivationKind::Relu, true), InitScheme::He, &mut RngStream::new(0))
            .unwrap();
        assert_eq!(net.block_boundaries(), vec![1, 2, 3, 4]);
        assert!(net.is_piecewise_linear());
        let net = init_network(&block_stack(4, 1, ActivationKind::Swish, true), InitScheme::He, &mut RngStream::new(0))
            .unwrap();
        assert!(!net.is_piecewise_linear());
    }

    #[test]
    fn correlated_batch_is_rank_one() {
        let mut rng = RngStream::new(5);
        let t: Vec<f64> = (0..6).map(|i| if i % 2 == 0 { 1.0 + i as f64 } else { -0.5 }).collect();
        let m = make_correlated_batch(&t, &mut rng, 10_000).unwrap();
        assert!((pairwise_abs_corr(&m).unwrap() - 1.0).abs() < 1e-12);
        let (_, var) = column_stats(&m).unwrap();
        for (v, ti) in var.iter().zip(&t) {
            assert!((v / (ti * ti) - 1.0).abs() < 0.05);
        }
        let e1 = [1.0, 0.0, 0.0];
        let m = make_correlated_batch(&e1, &mut rng, 50).unwrap();
        assert!((0..50).all(|r| m.get(r, 1) == 0.0 && m.get(r, 2) == 0.0));
        assert!(matches!(make_correlated_batch(&[0.0, 0.0], &mut rng, 4), Err(Error::Domain(_))));
    }

    #[test]
    fn injected_gradient_is_unit_gaussian() {
        let a = inject_output_gradient(&mut RngStream::new(9), 100_000, 3);
        let b = inject_output_gradient(&mut RngStream::new(9), 100_000, 3);
        assert_eq!(a, b);
        let (_, var) = column_stats(&a).unwrap();
        assert!(var.iter().all(|v| (0.99..=1.01).contains(v)), "{var:?}");
    }
}
