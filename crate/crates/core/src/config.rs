//! Run configuration: a TOML file, then `RFLOW_SECTION__KEY` environment
//! variables, then `--section.key=value` flags, later sources winning.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::Abscissa;
use crate::flow::{FlowSpec, NetKind, PatchSpec};
use crate::heatbath::PriorPlan;
use crate::lattice::{ActionParams, BoundaryConvention, ReplicaGeometry};
use crate::protocol::{Direction, Method, ProtocolSchedule};
use crate::train::{AdamHyper, TrainConfig};

pub const ENV_PREFIX: &str = "RFLOW_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub dim: usize,
    pub extent_t: usize,
    /// Spatial extent; L_x = L_y = L in D = 3.
    pub extent_l: usize,
    pub replicas: usize,
    pub cut: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig { dim: 2, extent_t: 64, extent_l: 16, replicas: 2, cut: 1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ActionConfig {
    pub kappa: f64,
    pub lambda: f64,
}

impl Default for ActionConfig {
    fn default() -> Self {
        ActionConfig { kappa: 0.2758297, lambda: 0.03 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetChoice {
    /// Linear dense map (no hidden layers unless `hidden` is set).
    Fcnn,
    /// Convolutional, three hidden layers of eight kernels unless `hidden` is set.
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodConfig {
    pub kind: Method,
    /// Stochastic steps of NE-MCMC and SNF; 0 means an instantaneous switch.
    pub n_step: usize,
    /// Patch height (τ rows) and width (x columns).
    pub patch: [usize; 2],
    pub net: NetChoice,
    pub hidden: Option<Vec<usize>>,
    pub blocks: usize,
    pub direction: Direction,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            kind: Method::Nf,
            n_step: 2,
            patch: [4, 5],
            net: NetChoice::Fcnn,
            hidden: None,
            blocks: 4,
            direction: Direction::Forward,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: u64,
    pub batch: usize,
    pub era: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub blockwise: bool,
    pub source: TrainSource,
    /// Sweeps between training samples of the chain; `prior.stride` if unset.
    pub stride: Option<u64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainSource {
    /// Fresh batches from a continuing heatbath chain.
    #[default]
    Chain,
    /// Resample the `prior` ensemble (prior.rfpr).
    Pool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let a = AdamHyper::default();
        TrainSection {
            steps: t.steps,
            batch: t.batch,
            era: t.era,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            blockwise: false,
            source: TrainSource::Chain,
            stride: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    /// Evolutions (fresh prior samples) per run or scan point.
    pub count: u64,
    /// Evolutions handed to the worker pool at once.
    pub chunk: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig { count: 10_000, chunk: 1000 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Training-pool chain.
    pub prior: u64,
    /// Network initialisation.
    pub init: u64,
    /// Batch draws and SNF noise during training.
    pub train: u64,
    /// Evaluation chain and evolution streams.
    pub sample: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds { prior: 1, init: 2, train: 3, sample: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Checkpoint to read; `<dir>/model.rflw` when unset.
    pub checkpoint: Option<PathBuf>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: PathBuf::from("runs/default"), checkpoint: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimateConfig {
    pub boundary: BoundaryConvention,
    pub abscissa: Abscissa,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum ScanAxis {
    #[default]
    #[serde(rename = "l")]
    Cut,
    #[serde(rename = "kappa")]
    Kappa,
    #[serde(rename = "L")]
    Volume,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScanConfig {
    pub axis: ScanAxis,
    /// Empty: every cut 0..L−1 for the l axis.
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub geometry: GeometryConfig,
    pub action: ActionConfig,
    pub method: MethodConfig,
    pub prior: PriorPlan,
    pub train: TrainSection,
    pub sample: SampleConfig,
    pub seeds: Seeds,
    pub output: OutputConfig,
    pub estimate: EstimateConfig,
    pub scan: ScanConfig,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated) in `table`.
pub fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("malformed key `{path}`")));
    }
    let (last, parents) = keys.split_last().unwrap();
    let mut at = table;
    for k in parents {
        let entry = at.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        at = entry.as_table_mut().ok_or_else(|| config_err(format!("`{k}` in `{path}` is not a section")))?;
    }
    at.insert(last.to_string(), parse_value(raw));
    Ok(())
}

/// `RFLOW_TRAIN__STEPS` → `train.steps`. Variables without `__` are ignored.
pub fn env_key(var: &str) -> Option<String> {
    let rest = var.strip_prefix(ENV_PREFIX)?;
    rest.contains("__").then(|| rest.to_lowercase().replace("__", "."))
}

impl RunConfig {
    /// Merges the file text, environment pairs and flag overrides, then
    /// validates.
    pub fn resolve<'a>(
        file: Option<&str>,
        env: impl IntoIterator<Item = (String, String)>,
        flags: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Result<Self> {
        let mut table: toml::Table = match file {
            Some(text) => toml::from_str(text).map_err(|e| config_err(e.to_string()))?,
            None => toml::Table::new(),
        };
        let mut env: Vec<(String, String)> =
            env.into_iter().filter_map(|(k, v)| env_key(&k).map(|k| (k, v))).collect();
        env.sort();
        for (k, v) in &env {
            apply_override(&mut table, k, v)?;
        }
        for (k, v) in flags {
            apply_override(&mut table, k, v)?;
        }
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry()?;
        self.params()?;
        self.prior.validate().map_err(|e| config_err(e.to_string()))?;
        self.train_config().validate().map_err(|e| config_err(e.to_string()))?;
        let m = &self.method;
        if m.patch.contains(&0) {
            return Err(config_err("patch extents must be positive"));
        }
        if matches!(m.kind, Method::Nf | Method::Snf) && m.blocks == 0 {
            return Err(config_err("flows need at least one block"));
        }
        if m.kind != Method::Nemc && m.direction == Direction::Reverse {
            return Err(config_err("reverse evolutions are only defined for nemc"));
        }
        if self.sample.count == 0 || self.sample.chunk == 0 {
            return Err(config_err("sample count and chunk must be positive"));
        }
        if self.scan.axis == ScanAxis::Volume && self.geometry.dim == 3 && m.kind != Method::Nemc && m.net == NetChoice::Fcnn {
            return Err(config_err("dense nets cannot transfer across volume in D = 3; use net = \"cnn\""));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Result<ReplicaGeometry> {
        let g = &self.geometry;
        let ly = if g.dim == 3 { g.extent_l } else { 1 };
        ReplicaGeometry::new(g.dim, g.extent_t, g.extent_l, ly, g.replicas, g.cut).map_err(|e| config_err(e.to_string()))
    }

    pub fn params(&self) -> Result<ActionParams> {
        ActionParams::new(self.action.kappa, self.action.lambda).map_err(|e| config_err(e.to_string()))
    }

    pub fn schedule(&self) -> ProtocolSchedule {
        ProtocolSchedule::linear(self.method.n_step)
    }

    pub fn net_kind(&self) -> NetKind {
        match (self.method.net, &self.method.hidden) {
            (NetChoice::Fcnn, None) => NetKind::fcnn(),
            (NetChoice::Cnn, None) => NetKind::cnn(),
            (NetChoice::Fcnn, Some(h)) => NetKind::Dense { hidden: h.clone() },
            (NetChoice::Cnn, Some(h)) => NetKind::Conv { hidden: h.clone() },
        }
    }

    pub fn flow_spec(&self) -> Result<FlowSpec> {
        let [h, w] = self.method.patch;
        Ok(FlowSpec { patch: PatchSpec::new(h, w)?, net: self.net_kind(), n_blocks: self.method.blocks })
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            steps: t.steps,
            batch: t.batch,
            adam: AdamHyper { lr: t.lr, beta1: t.beta1, beta2: t.beta2, eps: t.eps },
            era: t.era,
            seed: self.seeds.train,
            blockwise: t.blockwise,
        }
    }

    /// Plan of the training chain.
    pub fn train_chain_plan(&self) -> PriorPlan {
        PriorPlan { stride: self.train.stride.unwrap_or(self.prior.stride), ..self.prior }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output.checkpoint.clone().unwrap_or_else(|| self.output.dir.join("model.rflw"))
    }

    /// Canonical TOML text; re-resolving it yields the same configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }
}
