//! JSON run configuration. Unknown keys are rejected so a misspelled
//! hyperparameter fails loudly instead of silently taking its default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::network::{block_stack, validate_specs, ActivationKind, BnMode, InitScheme, LayerSpec};
use crate::optimizers::{
    recommended_eps, recommended_eta, Decay, OptimizerKind, OptimizerSpec, Phi, ScheduleSpec,
};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variable that overrides every output directory.
pub const OUT_ENV: &str = "GRADFLOW_OUT";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    pub network: Vec<LayerConfig>,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub bn_mode: BnModeConfig,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    #[serde(default)]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub probe: ProbeConfig,
    #[serde(default)]
    pub hessian: HessianConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerConfig {
    Dense {
        #[serde(rename = "in")]
        in_dim: usize,
        #[serde(rename = "out")]
        out_dim: usize,
        #[serde(default = "yes")]
        bias: bool,
    },
    #[serde(rename = "batchnorm")]
    BatchNorm {
        dim: usize,
        #[serde(default = "yes")]
        affine: bool,
    },
    Activation {
        kind: String,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        p: Option<f64>,
    },
    Residual { layers: Vec<LayerConfig> },
    /// `[BN] + [act → Dense → BN] × depth`, optionally residual-wrapped.
    BlockStack {
        width: usize,
        depth: usize,
        activation: String,
        #[serde(default)]
        alpha: Option<f64>,
        #[serde(default)]
        p: Option<f64>,
        #[serde(default)]
        residual: bool,
    },
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(tag = "scheme", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitConfig {
    #[default]
    He,
    FixedSigma { sigma: f64 },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum BnModeConfig {
    #[default]
    Exact,
    FrozenStats,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum TaskConfig {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    SynthGaussianClasses { classes: usize, per_class: usize, dim: usize, class_sep: f64 },
    /// Targets `x·A + noise` with `A ~ N(0, 1/dim)`.
    SynthRegression {
        samples: usize,
        dim: usize,
        #[serde(default = "one")]
        outputs: usize,
        #[serde(default)]
        noise: f64,
    },
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf, label_col: String, task: TaskConfig },
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: String,
    #[serde(default)]
    pub eta: Option<f64>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub clip_mu: Option<f64>,
    #[serde(default)]
    pub phi_lo: Option<f64>,
    #[serde(default)]
    pub phi_hi: Option<f64>,
    #[serde(default)]
    pub adapt_bn_bias: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    #[serde(default = "reference_batch")]
    pub reference_batch: usize,
    #[serde(default)]
    pub warmup_steps: usize,
    pub total_steps: usize,
    #[serde(default = "cosine")]
    pub decay: String,
}

fn reference_batch() -> usize {
    128
}

fn cosine() -> String {
    "cosine".into()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Diagnostics cadence in optimizer steps.
    #[serde(default = "one")]
    pub log_every: usize,
    /// Rows per forward pass; the schedule's `batch_size` is reached by
    /// accumulating gradients. Defaults to the full batch.
    #[serde(default)]
    pub micro_batch: Option<usize>,
    #[serde(default = "yes")]
    pub layer_reports: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { log_every: 1, micro_batch: None, layer_reports: true }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInput {
    #[default]
    Gaussian,
    Dataset,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    #[serde(default = "probe_batch")]
    pub batch_size: usize,
    /// BN on batch statistics and dropout active.
    #[serde(default = "yes")]
    pub train_mode: bool,
    #[serde(default)]
    pub input: ProbeInput,
}

fn probe_batch() -> usize {
    1024
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig { batch_size: probe_batch(), train_mode: true, input: ProbeInput::Gaussian }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct HessianConfig {
    #[serde(default = "hessian_batch")]
    pub batch_size: usize,
    #[serde(default = "hessian_samples")]
    pub samples_per_layer: usize,
    /// Probe one input row with BN frozen at the statistics of the
    /// `batch_size`-row batch (eval mode). Otherwise the whole batch is probed.
    #[serde(default = "single_sample")]
    pub single_sample: bool,
}

fn hessian_batch() -> usize {
    256
}

fn hessian_samples() -> usize {
    1000
}

fn single_sample() -> bool {
    true
}

impl Default for HessianConfig {
    fn default() -> Self {
        HessianConfig { batch_size: hessian_batch(), samples_per_layer: hessian_samples(), single_sample: single_sample() }
    }
}

fn config_err(e: Error) -> Error {
    match e {
        Error::Config(_) | Error::Io { .. } => e,
        other => Error::Config(other.to_string()),
    }
}

pub fn parse_activation(kind: &str, alpha: Option<f64>, p: Option<f64>) -> Result<ActivationKind> {
    let k = match kind {
        "relu" => ActivationKind::Relu,
        "leaky_relu" => ActivationKind::LeakyRelu { alpha: alpha.unwrap_or(0.2) },
        "elu" => ActivationKind::Elu { alpha: alpha.unwrap_or(1.0) },
        "swish" => ActivationKind::Swish,
        "gelu" => ActivationKind::Gelu,
        "dropout" => ActivationKind::Dropout { p: p.unwrap_or(0.5) },
        "identity" => ActivationKind::Identity,
        other => return Err(Error::Config(format!("unknown activation {other:?}"))),
    };
    k.validate().map_err(config_err)?;
    Ok(k)
}

pub fn parse_optimizer_kind(kind: &str) -> Result<OptimizerKind> {
    Ok(match kind {
        "sgd" => OptimizerKind::Sgd,
        "lars" => OptimizerKind::Lars,
        "lamb" | "lamb_scaled" => OptimizerKind::LambScaled,
        "lambc" => OptimizerKind::Lambc,
        "clars" => OptimizerKind::Clars,
        "agc" => OptimizerKind::Agc,
        "lalc" => OptimizerKind::Lalc,
        other => return Err(Error::Config(format!("unknown optimizer {other:?}"))),
    })
}

fn layer_specs(layers: &[LayerConfig]) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::new();
    for l in layers {
        match l {
            LayerConfig::Dense { in_dim, out_dim, bias } => {
                out.push(LayerSpec::Dense { in_dim: *in_dim, out_dim: *out_dim, bias: *bias })
            }
            LayerConfig::BatchNorm { dim, affine } => out.push(LayerSpec::BatchNorm { dim: *dim, affine: *affine }),
            LayerConfig::Activation { kind, alpha, p } => {
                out.push(LayerSpec::Activation(parse_activation(kind, *alpha, *p)?))
            }
            LayerConfig::Residual { layers } => out.push(LayerSpec::Residual(layer_specs(layers)?)),
            LayerConfig::BlockStack { width, depth, activation, alpha, p, residual } => {
                let act = parse_activation(activation, *alpha, *p)?;
                out.extend(block_stack(*width, *depth, act, *residual));
            }
        }
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        ensure!(
            cfg.version == CONFIG_VERSION,
            Config,
            "unsupported config version {} (expected {CONFIG_VERSION})",
            cfg.version
        );
        cfg.layer_specs()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Layer specs after expansion, checked for dimensional consistency.
    pub fn layer_specs(&self) -> Result<Vec<LayerSpec>> {
        let specs = layer_specs(&self.network)?;
        ensure!(!specs.is_empty(), Config, "network has no layers");
        validate_specs(&specs).map_err(config_err)?;
        Ok(specs)
    }

    pub fn init_scheme(&self) -> Result<InitScheme> {
        match self.init {
            InitConfig::He => Ok(InitScheme::He),
            InitConfig::FixedSigma { sigma } => {
                ensure!(sigma > 0.0 && sigma.is_finite(), Config, "init sigma {sigma} must be > 0");
                Ok(InitScheme::FixedSigma(sigma))
            }
        }
    }

    pub fn bn_mode(&self) -> BnMode {
        match self.bn_mode {
            BnModeConfig::Exact => BnMode::Exact,
            BnModeConfig::FrozenStats => BnMode::FrozenStats,
        }
    }

    pub fn schedule_spec(&self) -> Result<ScheduleSpec> {
        let s = self.schedule.as_ref().ok_or_else(|| Error::Config("missing \"schedule\" section".into()))?;
        let decay = match s.decay.as_str() {
            "cosine" => Decay::Cosine,
            "constant" => Decay::Constant,
            other => return Err(Error::Config(format!("unknown decay {other:?}"))),
        };
        let spec = ScheduleSpec {
            base_lr: s.base_lr,
            batch_size: s.batch_size,
            reference_batch: s.reference_batch,
            warmup_steps: s.warmup_steps,
            total_steps: s.total_steps,
            decay,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Missing `eta`/`eps` fall back to the recommended values for the
    /// schedule's batch size.
    pub fn optimizer_spec(&self) -> Result<OptimizerSpec> {
        let o = self.optimizer.as_ref().ok_or_else(|| Error::Config("missing \"optimizer\" section".into()))?;
        let kind = parse_optimizer_kind(&o.kind)?;
        let schedule = self.schedule_spec()?;
        let defaults = OptimizerSpec::with_defaults(kind, schedule.clone());
        if kind != OptimizerKind::Lambc {
            ensure!(o.clip_mu.is_none(), Config, "clip_mu applies to lambc only");
        }
        let eta = match o.eta {
            Some(e) => e,
            None if kind == OptimizerKind::Sgd || kind == OptimizerKind::Lambc || kind == OptimizerKind::LambScaled => {
                defaults.eta
            }
            None => recommended_eta(kind, schedule.batch_size).expect("adaptive kinds have a table entry"),
        };
        let spec = OptimizerSpec {
            kind,
            momentum: o.momentum.unwrap_or(defaults.momentum),
            weight_decay: o.weight_decay.unwrap_or(defaults.weight_decay),
            eta,
            eps: o.eps.unwrap_or_else(|| recommended_eps(kind)),
            clip_mu: o.clip_mu.unwrap_or(defaults.clip_mu),
            phi: Phi { lo: o.phi_lo, hi: o.phi_hi },
            adapt_bn_bias: o.adapt_bn_bias,
            schedule,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// `GRADFLOW_OUT`, then `output_dir`, then `gradflow_out`.
    pub fn output_dir(&self) -> PathBuf {
        resolve_out(self.output_dir.as_deref())
    }
}

pub fn resolve_out(configured: Option<&Path>) -> PathBuf {
    if let Some(v) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(v);
    }
    configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("gradflow_out"))
}
