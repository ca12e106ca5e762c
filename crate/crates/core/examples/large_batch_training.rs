//! Large-batch stability on synthetic 10-class data: plain SGD at batch 4096
//! with a linearly scaled rate against LALC at the same batch and SGD at
//! batch 128. Same number of epochs for every run, cosine decay, no warmup.
//!
//! cargo run --release --example large_batch_training -- [epochs] [width] [class_sep] [seeds]

use std::time::Instant;

use gradflow::harness::{synth_gaussian_classes, train, Dataset, RunStatus, TrainSetup};
use gradflow::network::{ActivationKind, BnMode, InitScheme, LayerSpec};
use gradflow::optimizers::{Decay, OptimizerKind, OptimizerSpec, ScheduleSpec};
use gradflow::RngStream;

const DIM: usize = 64;
const CLASSES: usize = 10;
const SAMPLES: usize = 20_000;
const DEPTH: usize = 8;

fn mlp(width: usize) -> Vec<LayerSpec> {
    let mut s = Vec::new();
    let mut d_in = DIM;
    for _ in 0..DEPTH {
        s.push(LayerSpec::Dense { in_dim: d_in, out_dim: width, bias: true });
        s.push(LayerSpec::BatchNorm { dim: width, affine: true });
        s.push(LayerSpec::Activation(ActivationKind::Relu));
        d_in = width;
    }
    s.push(LayerSpec::Dense { in_dim: width, out_dim: CLASSES, bias: true });
    s
}

fn run(kind: OptimizerKind, batch: usize, epochs: usize, width: usize, seed: u64, data: &Dataset) -> gradflow::Result<(RunStatus, Option<f64>)> {
    let schedule = ScheduleSpec {
        base_lr: 0.1,
        batch_size: batch,
        reference_batch: 128,
        warmup_steps: 0,
        total_steps: epochs * (SAMPLES / batch),
        decay: Decay::Cosine,
    };
    let setup = TrainSetup {
        seed,
        specs: mlp(width),
        init: InitScheme::He,
        bn_mode: BnMode::Exact,
        optimizer: OptimizerSpec::with_defaults(kind, schedule),
        micro_batch: batch,
        log_every: usize::MAX,
        layer_reports: false,
    };
    let out = train(&setup, data)?;
    Ok((out.log.summary.status, out.log.summary.final_loss))
}

fn main() -> gradflow::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let epochs: usize = args.first().map_or(90, |a| a.parse().expect("epochs"));
    let width: usize = args.get(1).map_or(128, |a| a.parse().expect("width"));
    let sep: f64 = args.get(2).map_or(3.0, |a| a.parse().expect("class_sep"));
    let seeds: u64 = args.get(3).map_or(3, |a| a.parse().expect("seeds"));

    println!("{epochs} epochs, width {width}, class_sep {sep}");
    for seed in 0..seeds {
        let data = synth_gaussian_classes(&mut RngStream::new(seed).derive(2), CLASSES, SAMPLES / CLASSES, DIM, sep)?;
        for (name, kind, batch) in [
            ("sgd b=4096 ", OptimizerKind::Sgd, 4096),
            ("lalc b=4096", OptimizerKind::Lalc, 4096),
            ("sgd b=128  ", OptimizerKind::Sgd, 128),
        ] {
            let t0 = Instant::now();
            let (status, loss) = run(kind, batch, epochs, width, seed, &data)?;
            let loss = loss.map_or("-".to_string(), |l| format!("{l:.4}"));
            println!("seed {seed} {name}: {status:?}, final loss {loss} ({:.1?})", t0.elapsed());
        }
    }
    Ok(())
}
