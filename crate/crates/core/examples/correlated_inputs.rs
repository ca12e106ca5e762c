//! One `[BN] → [ReLU → Dense → BN]` block fed perfectly correlated rows.
//! Prints the gradient-variance ratio across the block with the real
//! per-unit BN statistics and with the statistics equalized across units.
//!
//! cargo run --release --example correlated_inputs -- [width] [batch] [seeds]

use gradflow::analytic::{correlated_rate_zero_centered, explosion_rate_lower};
use gradflow::diagnostics::{equalize_stats, explosion_probe_with};
use gradflow::network::{block_stack, forward_with, init_network, make_correlated_batch, ActivationKind, BnMode, InitScheme, StatsSource};
use gradflow::RngStream;

fn main() -> gradflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let width = args.first().copied().unwrap_or(512);
    let batch = args.get(1).copied().unwrap_or(8192);
    let seeds = args.get(2).copied().unwrap_or(3) as u64;

    println!("published constant pi/(1+pi) = {:.4}; independent-input C(0) = {:.4}", correlated_rate_zero_centered(), explosion_rate_lower(0.0)?);
    for seed in 0..seeds {
        let root = RngStream::new(seed);
        let mut net = init_network(&block_stack(width, 1, ActivationKind::Relu, false), InitScheme::He, &mut root.derive(1))?;
        net.bn_mode = BnMode::FrozenStats;
        let mut trng = root.derive(4);
        let t: Vec<f64> = (0..width).map(|_| trng.standard_normal()).collect();
        let x = make_correlated_batch(&t, &mut root.derive(2), batch)?;
        let real = explosion_probe_with(&net, &x, &mut root.derive(3), &StatsSource::Batch, false)?;
        let stats = forward_with(&net, &x, &mut root.derive(3), &StatsSource::Batch)?.bn_stats;
        let eq = explosion_probe_with(&net, &x, &mut root.derive(3), &StatsSource::Fixed(equalize_stats(&stats)), false)?;
        println!(
            "seed {seed}: Var(g_in)/Var(g_out) real stats {:.4}, equalized stats {:.4}",
            real.profile.per_layer_ratio[0], eq.profile.per_layer_ratio[0]
        );
    }
    Ok(())
}
