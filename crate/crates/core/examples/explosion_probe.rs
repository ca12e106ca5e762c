//! Per-block gradient explosion of a `[ReLU → Dense → BN]` stack at He
//! initialization, compared with the mean-field value `√C(0)`.
//!
//! cargo run --release --example explosion_probe -- [depth] [width] [batch] [seeds]

use std::time::Instant;

use gradflow::analytic::explosion_rate_lower;
use gradflow::diagnostics::explosion_probe;
use gradflow::network::{block_stack, init_network, ActivationKind, BnMode, InitScheme};
use gradflow::tensor::gaussian;
use gradflow::RngStream;

fn main() -> gradflow::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let depth = args.first().copied().unwrap_or(20);
    let width = args.get(1).copied().unwrap_or(512);
    let batch = args.get(2).copied().unwrap_or(4096);
    let seeds = args.get(3).copied().unwrap_or(3) as u64;

    let target = explosion_rate_lower(0.0)?.sqrt();
    println!("depth {depth}, width {width}, batch {batch}; mean-field rate {target:.4}");
    let mut logs = Vec::new();
    for seed in 0..seeds {
        let t0 = Instant::now();
        let root = RngStream::new(seed);
        let mut net = init_network(&block_stack(width, depth, ActivationKind::Relu, false), InitScheme::He, &mut root.derive(1))?;
        net.bn_mode = BnMode::FrozenStats;
        let x = gaussian(&mut root.derive(2), 0.0, 1.0, batch, width)?;
        let res = explosion_probe(&net, &x, &mut root.derive(3), false)?;
        let rate = res.profile.geometric_mean_rate();
        logs.push(rate.ln());
        println!(
            "seed {seed}: geometric-mean rate {rate:.4}, input/output std ratio {:.1} ({:.1?})",
            res.profile.cumulative_rate[0],
            t0.elapsed()
        );
    }
    let mean = (logs.iter().sum::<f64>() / logs.len() as f64).exp();
    println!("over seeds: {mean:.4}");
    Ok(())
}
