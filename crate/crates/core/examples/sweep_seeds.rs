//! Writes two small configs (SGD and LALC at a large batch), sweeps them
//! over three seeds and prints the aggregated summary.
//!
//! cargo run --release --example sweep_seeds -- [out_dir]

use std::fs;
use std::path::PathBuf;

use gradflow::harness::run_sweep;

fn config(kind: &str) -> String {
    format!(
        r#"{{
  "version": 1,
  "network": [
    {{"type": "dense", "in": 32, "out": 64}}, {{"type": "batchnorm", "dim": 64}}, {{"type": "activation", "kind": "relu"}},
    {{"type": "dense", "in": 64, "out": 64}}, {{"type": "batchnorm", "dim": 64}}, {{"type": "activation", "kind": "relu"}},
    {{"type": "dense", "in": 64, "out": 4}}
  ],
  "dataset": {{"kind": "synth_gaussian_classes", "classes": 4, "per_class": 1024, "dim": 32, "class_sep": 2.0}},
  "optimizer": {{"kind": "{kind}"}},
  "schedule": {{"base_lr": 0.1, "batch_size": 1024, "total_steps": 40}},
  "train": {{"log_every": 10, "layer_reports": false}}
}}"#
    )
}

fn main() -> gradflow::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("gradflow_sweep_example"));
    let configs = out.join("configs");
    fs::create_dir_all(&configs).expect("create config dir");
    for kind in ["sgd", "lalc"] {
        fs::write(configs.join(format!("{kind}.json")), config(kind)).expect("write config");
    }
    run_sweep(&configs, 3, &out.join("results"))?;
    print!("{}", fs::read_to_string(out.join("results").join("summary.csv")).expect("summary written"));
    Ok(())
}
