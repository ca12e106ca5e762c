//! Sampled gradient and curvature norms per dense layer of a deep ReLU
//! network with scalar output and MSE loss. For one sample through frozen BN
//! the curvature tracks the square of the gradient; the batch-mean loss is
//! shown for contrast.
//!
//! cargo run --release --example hessian_square_law -- [layers] [width] [batch]

use gradflow::diagnostics::{hessian_probe, adjacent_variance_ratios, loglog_slope};
use gradflow::network::{forward_with, init_network, ActivationKind, InitScheme, LayerSpec, StatsSource};
use gradflow::tensor::gaussian;
use gradflow::RngStream;

fn main() -> gradflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let layers = args.first().copied().unwrap_or(12);
    let width = args.get(1).copied().unwrap_or(128);
    let batch = args.get(2).copied().unwrap_or(256);

    let mut specs = Vec::new();
    for _ in 0..layers - 1 {
        specs.push(LayerSpec::Dense { in_dim: width, out_dim: width, bias: true });
        specs.push(LayerSpec::BatchNorm { dim: width, affine: true });
        specs.push(LayerSpec::Activation(ActivationKind::Relu));
    }
    specs.push(LayerSpec::Dense { in_dim: width, out_dim: 1, bias: true });
    let root = RngStream::new(0);
    let mut net = init_network(&specs, InitScheme::He, &mut root.derive(1))?;
    let x = gaussian(&mut root.derive(2), 0.0, 1.0, batch, width)?;
    let y = gaussian(&mut root.derive(3), 0.0, 1.0, batch, 1)?;

    let batch_probe = hessian_probe(&net, &x, &y, &mut root.derive(4), 1000)?;

    let trace = forward_with(&net, &x, &mut RngStream::new(0), &StatsSource::Batch)?;
    net.adopt_batch_stats(&trace)?;
    net.train = false;
    let probe = hessian_probe(&net, &x.select_rows(&[0]), &y.select_rows(&[0]), &mut root.derive(4), 1000)?;
    println!("one sample, BN frozen at the statistics of {batch} rows");
    for s in &probe.samples {
        println!("layer {:2}: |g| {:.4e}  |h| {:.4e}  ({} weights)", s.layer_index, s.grad_norm, s.hess_norm, s.samples);
    }
    println!("log-log slope {:.3} (square law: 2)", loglog_slope(&probe.samples)?);
    for r in adjacent_variance_ratios(&probe)? {
        println!("  layers {}/{}: Var h ratio {:.3}, (Var g ratio)^2 {:.3}", r.layer_index, r.layer_index + 1, r.hess_ratio, r.grad_ratio_sq);
    }

    // The batch residual is dominated by the output scale, so |g| stays flat
    // across layers while |h| grows and the slope comes out steeper.
    println!("batch of {batch}: log-log slope {:.3}", loglog_slope(&batch_probe.samples)?);
    Ok(())
}
