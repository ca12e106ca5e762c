//! The CLI subcommands as library functions. Each writes versioned CSV files
//! (plus a JSON summary where useful) into an output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{DatasetConfig, ProbeInput, RunConfig, TaskConfig};
use super::data::{load_csv, load_idx, synth_gaussian_classes, synth_regression, Dataset, Task};
use super::train::{train, MetricsLog, RunStatus, TrainSetup, TrainSummary, RNG_DATA, RNG_INIT};
use crate::analytic::explosion_rate_table;
use crate::diagnostics::csv::{fmt_f64, fmt_opt, write_hessian, write_layer_rows, write_layers, write_preamble, write_profile, LAYERS_HEADER, LAYERS_SCHEMA};
use crate::diagnostics::{explosion_probe, hessian_probe, adjacent_variance_ratios, loglog_slope, ProbeResult};
use crate::error::{ensure, Error, Result};
use crate::network::{forward_with, init_network, NetworkState, StatsSource};
use crate::tensor::{gaussian, Matrix, RngStream};

pub const ANALYTIC_SCHEMA: &str = "gradflow.analytic.v1";
pub const ANALYTIC_HEADER: &str = "r,c_r,sqrt_c_r";
pub const METRICS_SCHEMA: &str = "gradflow.metrics.v1";
pub const METRICS_HEADER: &str = "step,epoch,lr,loss,accuracy,grad_norm,geometric_rate";
pub const TRAIN_PROFILE_SCHEMA: &str = "gradflow.train_profile.v1";
pub const TRAIN_PROFILE_HEADER: &str = "step,layer,var_g,per_layer_ratio,cumulative_rate";
pub const STEPS_SCHEMA: &str = "gradflow.steps.v1";
pub const STEPS_HEADER: &str = "step,param,path,kind,rate,adaptive";
pub const RUNS_SCHEMA: &str = "gradflow.sweep_runs.v1";
pub const RUNS_HEADER: &str = "config,seed,status,steps_completed,final_loss,final_accuracy,message";
pub const SUMMARY_SCHEMA: &str = "gradflow.sweep_summary.v1";
pub const SUMMARY_HEADER: &str =
    "config,runs,completed,diverged,failed,mean_final_loss,std_final_loss,mean_final_accuracy,std_final_accuracy";

const RNG_PROBE_INPUT: u64 = 5;
const RNG_PROBE: u64 = 6;
const RNG_TARGETS: u64 = 7;

fn write_file(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    body(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// `r,c_r,sqrt_c_r` over an evenly spaced grid.
pub fn analytic_table(w: &mut impl Write, r_min: f64, r_max: f64, steps: usize) -> Result<()> {
    let rows = explosion_rate_table(r_min, r_max, steps)?;
    let io = |e| Error::io("<stdout>", e);
    write_preamble(w, ANALYTIC_SCHEMA, ANALYTIC_HEADER).map_err(io)?;
    for (r, c, s) in rows {
        writeln!(w, "{},{},{}", fmt_f64(r), fmt_f64(c), fmt_f64(s)).map_err(io)?;
    }
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let d = cfg.dataset.as_ref().ok_or_else(|| Error::Config("missing \"dataset\" section".into()))?;
    let mut rng = RngStream::new(cfg.seed).derive(RNG_DATA);
    let cfg_err = |e: Error| match e {
        Error::Domain(m) | Error::Shape(m) => Error::Config(m),
        other => other,
    };
    match d {
        DatasetConfig::SynthGaussianClasses { classes, per_class, dim, class_sep } => {
            synth_gaussian_classes(&mut rng, *classes, *per_class, *dim, *class_sep).map_err(cfg_err)
        }
        DatasetConfig::SynthRegression { samples, dim, outputs, noise } => {
            synth_regression(&mut rng, *samples, *dim, *outputs, *noise).map_err(cfg_err)
        }
        DatasetConfig::Idx { images, labels } => load_idx(images, labels),
        DatasetConfig::Csv { path, label_col, task } => load_csv(path, label_col, *task == TaskConfig::Classification),
    }
}

pub fn train_setup(cfg: &RunConfig) -> Result<TrainSetup> {
    let optimizer = cfg.optimizer_spec()?;
    Ok(TrainSetup {
        seed: cfg.seed,
        specs: cfg.layer_specs()?,
        init: cfg.init_scheme()?,
        bn_mode: cfg.bn_mode(),
        micro_batch: cfg.train.micro_batch.unwrap_or(optimizer.schedule.batch_size),
        log_every: cfg.train.log_every,
        layer_reports: cfg.train.layer_reports,
        optimizer,
    })
}

fn init_state(cfg: &RunConfig, train_mode: bool) -> Result<NetworkState> {
    let specs = cfg.layer_specs()?;
    let mut st = init_network(&specs, cfg.init_scheme()?, &mut RngStream::new(cfg.seed).derive(RNG_INIT))?;
    st.bn_mode = cfg.bn_mode();
    st.train = train_mode;
    Ok(st)
}

fn probe_inputs(cfg: &RunConfig, rows: usize, dim: usize) -> Result<(Matrix, Option<Dataset>)> {
    ensure!(rows > 0, Config, "probe batch_size must be > 0");
    match cfg.probe.input {
        ProbeInput::Gaussian => {
            let mut rng = RngStream::new(cfg.seed).derive(RNG_PROBE_INPUT);
            Ok((gaussian(&mut rng, 0.0, 1.0, rows, dim)?, None))
        }
        ProbeInput::Dataset => {
            let ds = load_dataset(cfg)?;
            ensure!(ds.len() >= rows, Config, "dataset has {} rows, probe needs {rows}", ds.len());
            ensure!(ds.input_dim() == dim, Config, "dataset has {} features, network expects {dim}", ds.input_dim());
            let sub = ds.select(&(0..rows).collect::<Vec<_>>());
            Ok((sub.inputs.clone(), Some(sub)))
        }
    }
}

/// One forward/backward with an injected `N(0, 1)` output gradient; writes
/// `profile.csv` and `layers.csv`.
pub fn run_probe(cfg: &RunConfig, out: &Path) -> Result<ProbeResult> {
    let st = init_state(cfg, cfg.probe.train_mode)?;
    let (x, _) = probe_inputs(cfg, cfg.probe.batch_size, st.input_dim())?;
    let res = explosion_probe(&st, &x, &mut RngStream::new(cfg.seed).derive(RNG_PROBE), true)?;
    ensure_dir(out)?;
    write_file(&out.join("profile.csv"), |w| write_profile(w, &res.profile))?;
    let reports = res.reports.as_deref().unwrap_or(&[]);
    write_file(&out.join("layers.csv"), |w| write_layers(w, reports, 0))?;
    Ok(res)
}

#[derive(Debug, Clone, Serialize)]
pub struct AdjacentRatioRow {
    pub layer: usize,
    pub hess_ratio: f64,
    pub grad_ratio_sq: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct HessianReport {
    pub slope: Option<f64>,
    pub adjacent: Vec<AdjacentRatioRow>,
    pub layers: usize,
}

/// Samples curvature and gradient of the MSE loss per dense layer; writes
/// `hessian.csv` and `hessian.json` (log-log slope and adjacent-layer
/// ratios).
pub fn run_hessian(cfg: &RunConfig, out: &Path) -> Result<HessianReport> {
    let st = init_state(cfg, cfg.probe.train_mode)?;
    let rows = cfg.hessian.batch_size;
    let probe_cfg = RunConfig { probe: super::config::ProbeConfig { batch_size: rows, ..cfg.probe.clone() }, ..cfg.clone() };
    let (x, ds) = probe_inputs(&probe_cfg, rows, st.input_dim())?;
    let targets = match ds {
        Some(d) => {
            ensure!(d.task == Task::Regression && d.targets.cols() == 1, Config, "hessian needs a scalar regression dataset");
            d.targets
        }
        None => gaussian(&mut RngStream::new(cfg.seed).derive(RNG_TARGETS), 0.0, 1.0, rows, 1)?,
    };
    let (st, x, targets) = if cfg.hessian.single_sample {
        let mut st = st;
        let trace = forward_with(&st, &x, &mut RngStream::new(cfg.seed).derive(RNG_PROBE), &StatsSource::Batch)?;
        st.adopt_batch_stats(&trace)?;
        st.train = false;
        (st, x.select_rows(&[0]), targets.select_rows(&[0]))
    } else {
        (st, x, targets)
    };
    let probe = hessian_probe(&st, &x, &targets, &mut RngStream::new(cfg.seed).derive(RNG_PROBE), cfg.hessian.samples_per_layer)
        .map_err(|e| match e {
            Error::Precondition(m) => Error::Config(m),
            other => other,
        })?;
    let report = HessianReport {
        slope: loglog_slope(&probe.samples).ok(),
        adjacent: adjacent_variance_ratios(&probe)
            .map(|v| {
                v.iter()
                    .map(|r| AdjacentRatioRow { layer: r.layer_index, hess_ratio: r.hess_ratio, grad_ratio_sq: r.grad_ratio_sq })
                    .collect()
            })
            .unwrap_or_default(),
        layers: probe.samples.len(),
    };
    ensure_dir(out)?;
    write_file(&out.join("hessian.csv"), |w| write_hessian(w, &probe.samples))?;
    write_json(&out.join("hessian.json"), &report)?;
    Ok(report)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("plain data serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn write_metrics(w: &mut impl Write, log: &MetricsLog) -> std::io::Result<()> {
    write_preamble(w, METRICS_SCHEMA, METRICS_HEADER)?;
    for r in &log.rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.step,
            r.epoch,
            fmt_f64(r.lr),
            fmt_f64(r.loss),
            fmt_f64(r.accuracy),
            fmt_f64(r.grad_norm),
            fmt_opt(r.profile.as_ref().map(|p| p.geometric_mean_rate()))
        )?;
    }
    Ok(())
}

pub fn write_train_profile(w: &mut impl Write, log: &MetricsLog) -> std::io::Result<()> {
    write_preamble(w, TRAIN_PROFILE_SCHEMA, TRAIN_PROFILE_HEADER)?;
    for r in &log.rows {
        let Some(p) = &r.profile else { continue };
        for k in 0..p.var_g.len() {
            writeln!(
                w,
                "{},{},{},{},{}",
                r.step,
                k,
                fmt_f64(p.var_g[k]),
                fmt_opt(p.per_layer_ratio.get(k).copied()),
                fmt_f64(p.cumulative_rate[k])
            )?;
        }
    }
    Ok(())
}

pub fn write_steps(w: &mut impl Write, log: &MetricsLog) -> std::io::Result<()> {
    write_preamble(w, STEPS_SCHEMA, STEPS_HEADER)?;
    for r in &log.rows {
        for (i, (a, info)) in r.applied.iter().zip(&log.param_info).enumerate() {
            writeln!(w, "{},{},{},{:?},{},{}", r.step, i, info.path, info.kind, fmt_f64(a.rate), a.adaptive)?;
        }
    }
    Ok(())
}

/// Trains and writes `metrics.csv`, `layers.csv`, `train_profile.csv`,
/// `steps.csv` and `summary.json`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainSummary> {
    let setup = train_setup(cfg)?;
    let data = load_dataset(cfg)?;
    let outcome = train(&setup, &data)?;
    let log = &outcome.log;
    ensure_dir(out)?;
    write_file(&out.join("metrics.csv"), |w| write_metrics(w, log))?;
    write_file(&out.join("layers.csv"), |w| {
        write_preamble(w, LAYERS_SCHEMA, LAYERS_HEADER)?;
        log.rows.iter().try_for_each(|r| write_layer_rows(w, &r.reports, r.step))
    })?;
    write_file(&out.join("train_profile.csv"), |w| write_train_profile(w, log))?;
    write_file(&out.join("steps.csv"), |w| write_steps(w, log))?;
    write_json(&out.join("summary.json"), &log.summary)?;
    Ok(log.summary.clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRun {
    pub config: String,
    pub seed: u64,
    pub result: std::result::Result<TrainSummary, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepAggregate {
    pub config: String,
    pub runs: usize,
    pub completed: usize,
    pub diverged: usize,
    pub failed: usize,
    pub loss: Option<(f64, Option<f64>)>,
    pub accuracy: Option<(f64, Option<f64>)>,
}

/// Mean and sample standard deviation (`n − 1`); the deviation needs two
/// values.
pub fn mean_std(v: &[f64]) -> Option<(f64, Option<f64>)> {
    if v.is_empty() {
        return None;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.len() >= 2).then(|| (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    Some((mean, std))
}

pub fn aggregate(config: &str, runs: &[SweepRun]) -> SweepAggregate {
    let ok: Vec<&TrainSummary> = runs.iter().filter_map(|r| r.result.as_ref().ok()).collect();
    let completed: Vec<&&TrainSummary> = ok.iter().filter(|s| s.status == RunStatus::Completed).collect();
    let losses: Vec<f64> = completed.iter().filter_map(|s| s.final_loss).collect();
    let accs: Vec<f64> = completed.iter().filter_map(|s| s.final_accuracy).collect();
    SweepAggregate {
        config: config.to_string(),
        runs: runs.len(),
        completed: completed.len(),
        diverged: ok.len() - completed.len(),
        failed: runs.len() - ok.len(),
        loss: mean_std(&losses),
        accuracy: mean_std(&accs),
    }
}

/// Sorted `*.json` files of a directory.
pub fn sweep_configs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    ensure!(!v.is_empty(), Config, "no .json configs in {}", dir.display());
    Ok(v)
}

fn csv_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

fn pair_cols(p: Option<(f64, Option<f64>)>) -> String {
    match p {
        Some((m, s)) => format!("{},{}", fmt_f64(m), fmt_opt(s)),
        None => ",".into(),
    }
}

/// Trains every config under `seeds` consecutive seeds starting at its own
/// `seed`. A failing run is recorded and the sweep moves on. Writes
/// `runs.csv` and `summary.csv` into `out`, each run into
/// `out/<config>/seed_<s>/`.
pub fn run_sweep(dir: &Path, seeds: usize, out: &Path) -> Result<Vec<SweepAggregate>> {
    ensure!(seeds >= 1, Config, "need at least one seed");
    let configs = sweep_configs(dir)?;
    ensure_dir(out)?;
    let mut runs: Vec<SweepRun> = Vec::new();
    let mut aggs = Vec::new();
    for path in &configs {
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let mut these = Vec::new();
        match RunConfig::load(path) {
            Ok(base) => {
                for k in 0..seeds as u64 {
                    let cfg = RunConfig { seed: base.seed.wrapping_add(k), ..base.clone() };
                    let run_dir = out.join(&name).join(format!("seed_{}", cfg.seed));
                    let result = run_train(&cfg, &run_dir).map_err(|e| e.to_string());
                    these.push(SweepRun { config: name.clone(), seed: cfg.seed, result });
                }
            }
            Err(e) => these.push(SweepRun { config: name.clone(), seed: 0, result: Err(e.to_string()) }),
        }
        aggs.push(aggregate(&name, &these));
        runs.extend(these);
    }
    write_file(&out.join("runs.csv"), |w| {
        write_preamble(w, RUNS_SCHEMA, RUNS_HEADER)?;
        for r in &runs {
            match &r.result {
                Ok(s) => writeln!(
                    w,
                    "{},{},{},{},{},{},",
                    csv_text(&r.config),
                    r.seed,
                    if s.status == RunStatus::Completed { "completed" } else { "diverged" },
                    s.steps_completed,
                    fmt_opt(s.final_loss),
                    fmt_opt(s.final_accuracy)
                )?,
                Err(m) => writeln!(w, "{},{},error,0,,,{}", csv_text(&r.config), r.seed, csv_text(m))?,
            }
        }
        Ok(())
    })?;
    write_file(&out.join("summary.csv"), |w| {
        write_preamble(w, SUMMARY_SCHEMA, SUMMARY_HEADER)?;
        for a in &aggs {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                csv_text(&a.config),
                a.runs,
                a.completed,
                a.diverged,
                a.failed,
                pair_cols(a.loss),
                pair_cols(a.accuracy)
            )?;
        }
        Ok(())
    })?;
    Ok(aggs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::from_json(text).unwrap()
    }

    const SHALLOW: &str = r#"{"version": 1, "network": [{"type": "dense", "in": 3, "out": 3}], "probe": {"batch_size": 64}}"#;

    #[test]
    fn analytic_table_rows() {
        let mut buf = Vec::new();
        analytic_table(&mut buf, -6.0, 6.0, 121).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "#schema=gradflow.analytic.v1");
        assert_eq!(lines[1], ANALYTIC_HEADER);
        assert_eq!(lines.len(), 123);
        assert!(lines[62].starts_with("0.0,"));
    }

    #[test]
    fn probe_of_layer_without_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let res = run_probe(&cfg(SHALLOW), dir.path()).unwrap();
        assert_eq!(res.profile.cumulative_rate, vec![1.0]);
        let text = fs::read_to_string(dir.path().join("profile.csv")).unwrap();
        assert_eq!(text.lines().count(), 2 + res.profile.boundaries.len());
    }

    #[test]
    fn probe_csv_has_one_row_per_boundary() {
        let text = r#"{"version": 1, "seed": 3,
            "network": [{"type": "block_stack", "width": 16, "depth": 4, "activation": "relu"}],
            "probe": {"batch_size": 128}}"#;
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(text);
        let res = run_probe(&c, dir.path()).unwrap();
        let st = init_state(&c, true).unwrap();
        let body = fs::read_to_string(dir.path().join("profile.csv")).unwrap();
        assert_eq!(body.lines().count() - 2, st.block_boundaries().len());
        assert_eq!(res.profile.boundaries, st.block_boundaries());
        let layers = fs::read_to_string(dir.path().join("layers.csv")).unwrap();
        assert_eq!(layers.lines().count() - 2, st.block_boundaries().len());
    }

    #[test]
    fn hessian_command_writes_slope() {
        let text = r#"{"version": 1, "init": {"scheme": "fixed_sigma", "sigma": 0.5},
            "network": [
                {"type": "dense", "in": 8, "out": 8}, {"type": "activation", "kind": "relu"},
                {"type": "dense", "in": 8, "out": 8}, {"type": "activation", "kind": "relu"},
                {"type": "dense", "in": 8, "out": 8}, {"type": "activation", "kind": "relu"},
                {"type": "dense", "in": 8, "out": 1}],
            "hessian": {"batch_size": 32, "samples_per_layer": 20}}"#;
        let dir = tempfile::tempdir().unwrap();
        let rep = run_hessian(&cfg(text), dir.path()).unwrap();
        assert_eq!(rep.layers, 4);
        assert_eq!(rep.adjacent.len(), 3);
        assert!(dir.path().join("hessian.json").exists());
        let body = fs::read_to_string(dir.path().join("hessian.csv")).unwrap();
        assert_eq!(body.lines().count(), 2 + 4);
        let bad = r#"{"version": 1, "network": [{"type": "dense", "in": 4, "out": 2}]}"#;
        assert!(matches!(run_hessian(&cfg(bad), dir.path()), Err(Error::Config(_))));
    }

    #[test]
    fn hessian_single_sample_uses_frozen_batch_stats() {
        let text = |single: bool| {
            format!(
                r#"{{"version": 1, "network": [
                    {{"type": "dense", "in": 8, "out": 8}}, {{"type": "batchnorm", "dim": 8}}, {{"type": "activation", "kind": "relu"}},
                    {{"type": "dense", "in": 8, "out": 8}}, {{"type": "batchnorm", "dim": 8}}, {{"type": "activation", "kind": "relu"}},
                    {{"type": "dense", "in": 8, "out": 1}}],
                "hessian": {{"batch_size": 64, "samples_per_layer": 16, "single_sample": {single}}}}}"#
            )
        };
        let dir = tempfile::tempdir().unwrap();
        let one = run_hessian(&cfg(&text(true)), dir.path()).unwrap();
        let one_csv = fs::read_to_string(dir.path().join("hessian.csv")).unwrap();
        let all = run_hessian(&cfg(&text(false)), dir.path()).unwrap();
        let all_csv = fs::read_to_string(dir.path().join("hessian.csv")).unwrap();
        assert_eq!((one.layers, all.layers), (3, 3));
        assert!(one.slope.is_some() && all.slope.is_some());
        assert_ne!(one_csv, all_csv);
    }

    const TRAIN: &str = r#"{"version": 1, "seed": 11,
        "network": [{"type": "dense", "in": 6, "out": 8}, {"type": "batchnorm", "dim": 8},
                    {"type": "activation", "kind": "relu"}, {"type": "dense", "in": 8, "out": 3}],
        "dataset": {"kind": "synth_gaussian_classes", "classes": 3, "per_class": 40, "dim": 6, "class_sep": 3.0},
        "optimizer": {"kind": "sgd"},
        "schedule": {"base_lr": 0.1, "batch_size": 30, "reference_batch": 30, "total_steps": 12, "decay": "cosine"},
        "train": {"log_every": 4}}"#;

    #[test]
    fn train_outputs_are_byte_identical_on_rerun() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let c = cfg(TRAIN);
        let s = run_train(&c, a.path()).unwrap();
        run_train(&c, b.path()).unwrap();
        assert_eq!(s.status, RunStatus::Completed);
        for f in ["metrics.csv", "layers.csv", "train_profile.csv", "steps.csv", "summary.json"] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
        let metrics = fs::read_to_string(a.path().join("metrics.csv")).unwrap();
        // steps 0, 4, 8 and the last one
        assert_eq!(metrics.lines().count(), 2 + 4);
    }

    #[test]
    fn sweep_std_is_zero_for_identical_runs() {
        // BN-only network (γ = 1, β = 0 regardless of seed) on identical rows:
        // shuffling cannot matter, so every seed gives the same loss bit for bit
        let dir = tempfile::tempdir().unwrap();
        let rows: String = (0..20).map(|_| "1.0,2.0,0\n").collect();
        fs::write(dir.path().join("d.csv"), format!("a,b,label\n{rows}")).unwrap();
        let configs = dir.path().join("configs");
        fs::create_dir(&configs).unwrap();
        let text = format!(
            r#"{{"version": 1,
            "network": [{{"type": "batchnorm", "dim": 2}}],
            "dataset": {{"kind": "csv", "path": {:?}, "label_col": "label", "task": "classification"}},
            "optimizer": {{"kind": "sgd", "weight_decay": 0.0}},
            "schedule": {{"base_lr": 0.0, "batch_size": 10, "total_steps": 3, "decay": "constant"}}}}"#,
            dir.path().join("d.csv")
        );
        fs::write(configs.join("flat.json"), &text).unwrap();
        fs::write(configs.join("broken.json"), "{\"version\": 1}").unwrap();
        let out = dir.path().join("out");
        let aggs = run_sweep(&configs, 3, &out).unwrap();
        assert_eq!(aggs.len(), 2);
        assert_eq!((aggs[0].config.as_str(), aggs[0].failed), ("broken", 1));
        let flat = &aggs[1];
        assert_eq!(flat.completed, 3);
        assert_eq!(flat.loss.unwrap().1, Some(0.0));
        let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
        assert_eq!(summary.lines().count(), 2 + 2);
        let last = summary.lines().last().unwrap();
        assert_eq!(last.split(',').nth(6), Some("0.0"));
        let runs = fs::read_to_string(out.join("runs.csv")).unwrap();
        assert_eq!(runs.lines().count(), 2 + 4);
        assert!(out.join("flat").join("seed_2").join("metrics.csv").exists());
    }

    #[test]
    fn sweep_aggregation_matches_recomputation() {
        let mk = |loss: Option<f64>, status| SweepRun {
            config: "c".into(),
            seed: 0,
            result: Ok(TrainSummary {
                status,
                seed: 0,
                optimizer: "sgd".into(),
                steps_completed: 1,
                total_steps: 1,
                diverged_at: None,
                final_loss: loss,
                final_accuracy: None,
                min_lalc_step: None,
            }),
        };
        let runs = vec![
            mk(Some(1.0), RunStatus::Completed),
            mk(Some(2.0), RunStatus::Completed),
            mk(Some(4.0), RunStatus::Completed),
            mk(None, RunStatus::Diverged),
            SweepRun { config: "c".into(), seed: 1, result: Err("boom".into()) },
        ];
        let a = aggregate("c", &runs);
        assert_eq!((a.runs, a.completed, a.diverged, a.failed), (5, 3, 1, 1));
        let (m, s) = a.loss.unwrap();
        assert!((m - 7.0 / 3.0).abs() < 1e-15);
        // Σ(x−m)² = 14/3, over n−1 = 2
        assert!((s.unwrap() - (7.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[3.0, 3.0, 3.0]), Some((3.0, Some(0.0))));
        assert_eq!(mean_std(&[3.0]), Some((3.0, None)));
    }
}
