//! Per-block explosion rate for several activations under one probe, against
//! the mean-field value `sqrt(E[f'^2] / Var f)`, then residual against
//! vanilla ReLU stacks by depth.
//!
//! cargo run --release --example activation_comparison -- [depth] [width] [batch]

use gradflow::diagnostics::{activation_block_ratio, explosion_probe};
use gradflow::network::{block_stack, init_network, ActivationKind, BnMode, InitScheme};
use gradflow::tensor::gaussian;
use gradflow::RngStream;

fn rate(act: ActivationKind, depth: usize, width: usize, batch: usize, residual: bool, seed: u64) -> gradflow::Result<(f64, f64)> {
    let root = RngStream::new(seed);
    let mut net = init_network(&block_stack(width, depth, act, residual), InitScheme::He, &mut root.derive(1))?;
    net.bn_mode = BnMode::FrozenStats;
    let x = gaussian(&mut root.derive(2), 0.0, 1.0, batch, width)?;
    let p = explosion_probe(&net, &x, &mut root.derive(3), false)?.profile;
    Ok((p.geometric_mean_rate(), p.cumulative_rate[0]))
}

fn main() -> gradflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let depth = args.first().copied().unwrap_or(10);
    let width = args.get(1).copied().unwrap_or(256);
    let batch = args.get(2).copied().unwrap_or(2048);

    println!("depth {depth}, width {width}, batch {batch}");
    let acts = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu { alpha: 0.2 },
        ActivationKind::Gelu,
        ActivationKind::Swish,
        ActivationKind::Elu { alpha: 1.0 },
        ActivationKind::Dropout { p: 0.5 },
    ];
    for act in acts {
        let (g, _) = rate(act, depth, width, batch, false, 0)?;
        let theory = activation_block_ratio(act, 0.0).sqrt();
        println!("  {:<12} measured {g:.4}  mean-field {theory:.4}", act.name());
    }

    println!("\ninput/output gradient std ratio, ReLU");
    for d in [4, 8, 16] {
        let (_, vanilla) = rate(ActivationKind::Relu, d, width, batch, false, 1)?;
        let (_, residual) = rate(ActivationKind::Relu, d, width, batch, true, 1)?;
        println!("  depth {d:2}: vanilla {vanilla:10.3}  residual {residual:8.3}");
    }
    Ok(())
}
