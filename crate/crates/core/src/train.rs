//! Variational training of flows and stochastic flows, and checkpoints.
//!
//! Both objectives are the mean generalised work of a batch. Gradients are
//! pathwise: prior samples and heatbath draws are constants, and the stage
//! gradients of an SNF only see the deterministic blocks of that stage.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::ess;
use crate::flow::{DefectWindow, FlowModel, FlowSpec, NetKind, PatchSpec};
use crate::heatbath::{sweep, ChainState, PriorStream};
use crate::lattice::{ActionParams, FieldConfig, Lattice, ReplicaGeometry};
use crate::protocol::ProtocolSchedule;
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::snf::{check_inputs, SnfModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }
}

/// One bias-corrected adaptive-moment update of `params[range]`.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, hyper: &AdamHyper, range: Range<usize>) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ShapeMismatch { expected: params.len(), got: grads.len() });
    }
    state.t += 1;
    let b1t = 1.0 - hyper.beta1.powi(state.t as i32);
    let b2t = 1.0 - hyper.beta2.powi(state.t as i32);
    for k in range {
        let g = grads[k];
        state.m[k] = hyper.beta1 * state.m[k] + (1.0 - hyper.beta1) * g;
        state.v[k] = hyper.beta2 * state.v[k] + (1.0 - hyper.beta2) * g * g;
        let m_hat = state.m[k] / b1t;
        let v_hat = state.v[k] / b2t;
        params[k] -= hyper.lr * m_hat / (v_hat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// The part of a prior sample a flow needs: its window vector and the
/// protocol jump S_{l+1}(φ₀) − S_l(φ₀).
#[derive(Clone, Debug, PartialEq)]
pub struct NfSample {
    pub window: Vec<f64>,
    pub jump: f64,
}

impl NfSample {
    pub fn new(window: &DefectWindow, lattice: &Lattice, params: &ActionParams, field: &FieldConfig) -> Self {
        NfSample { window: window.gather(field.values()), jump: lattice.protocol_jump(field.values(), params, 0.0, 1.0) }
    }
}

/// Mean loss, its gradient and the per-sample works.
#[derive(Clone, Debug)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub works: Vec<f64>,
}

fn reduce(parts: Vec<(f64, Vec<f64>)>, n_params: usize) -> Result<LossGrad> {
    let n = parts.len() as f64;
    let mut grad = vec![0.0; n_params];
    let mut works = Vec::with_capacity(parts.len());
    let mut sum = 0.0;
    for (w, g) in parts {
        sum += w;
        works.push(w);
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    grad.iter_mut().for_each(|g| *g /= n);
    Ok(LossGrad { loss: sum / n, grad, works })
}

/// Mean of `S_{l+1}(g(φ₀)) − S_l(φ₀) − log J` over the batch and its gradient.
pub fn nf_loss_and_grad(flow: &FlowModel, window: &DefectWindow, params: &ActionParams, batch: &[NfSample]) -> Result<LossGrad> {
    if batch.is_empty() {
        return Err(invalid("empty training batch"));
    }
    let np = flow.n_params();
    let layers = 0..flow.layers().len();
    let parts = batch
        .par_iter()
        .map(|s| {
            let mut v = s.window.clone();
            let mut g = vec![0.0; np];
            let (delta, log_j) = flow.stage_grad(layers.clone(), window, params, 1.0, &mut v, &mut g)?;
            let mut work = 0.0;
            work += s.jump;
            work += delta - log_j;
            Ok((work, g))
        })
        .collect::<Result<Vec<_>>>()?;
    reduce(parts, np)
}

/// One SNF evolution with the stage gradients accumulated into `grad`.
pub fn snf_work_and_grad(
    model: &SnfModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    field: FieldConfig,
    seed: u64,
    grad: &mut [f64],
) -> Result<f64> {
    check_inputs(lattice, window, &model.flow, &field)?;
    let levels = model.schedule.levels();
    let mut state = ChainState::new(field, rng_from_seed(seed));
    let mut work = 0.0;
    for j in 0..model.n_stages() {
        let (c0, c1) = (levels[j], levels[j + 1]);
        work += lattice.protocol_jump(state.field.values(), params, c0, c1);
        let layers = model.stage_layers(j);
        if !layers.is_empty() {
            let mut v = window.gather(state.field.values());
            let (delta, log_j) = model.flow.stage_grad(layers, window, params, c1, &mut v, grad)?;
            window.scatter(&v, state.field.values_mut());
            work += delta - log_j;
        }
        if model.schedule.is_stochastic() {
            sweep(&mut state, params, lattice, Some(c1))?;
        }
    }
    Ok(work)
}

/// Mean W_SNF over the batch and its pathwise gradient; evolution `i` runs on
/// the random stream `seeds[i]`.
pub fn snf_loss_and_grad(
    model: &SnfModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    batch: Vec<FieldConfig>,
    seeds: &[u64],
) -> Result<LossGrad> {
    if batch.is_empty() || batch.len() != seeds.len() {
        return Err(invalid("SNF batch needs one seed per non-empty sample"));
    }
    let np = model.flow.n_params();
    let parts = batch
        .into_par_iter()
        .zip(seeds.par_iter())
        .map(|(f, &seed)| {
            let mut g = vec![0.0; np];
            let w = snf_work_and_grad(model, window, lattice, params, f, seed, &mut g)?;
            Ok((w, g))
        })
        .collect::<Result<Vec<_>>>()?;
    reduce(parts, np)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub adam: AdamHyper,
    pub era: u64,
    pub seed: u64,
    pub blockwise: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 100_000, batch: 100, adam: AdamHyper::default(), era: 100, seed: 1, blockwise: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.era == 0 {
            return Err(invalid("batch size and era length must be positive"));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 || !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return Err(invalid("invalid optimizer settings"));
        }
        Ok(())
    }
}

/// Where training batches come from.
pub enum PriorSource<'a> {
    /// A persistent heatbath chain, one sample every `stride` sweeps.
    Chain(PriorStream<'a>),
    /// Resampling with replacement from stored configurations.
    Pool { fields: Vec<FieldConfig>, rng: Rng },
    /// Resampling from stored flow inputs (flows only).
    WindowPool { samples: Vec<NfSample>, rng: Rng },
}

impl<'a> PriorSource<'a> {
    pub fn pool(fields: Vec<FieldConfig>, seed: u64) -> Result<Self> {
        if fields.is_empty() {
            return Err(invalid("empty prior pool"));
        }
        Ok(PriorSource::Pool { fields, rng: rng_from_seed(seed) })
    }

    pub fn window_pool(samples: Vec<NfSample>, seed: u64) -> Result<Self> {
        if samples.is_empty() {
            return Err(invalid("empty prior pool"));
        }
        Ok(PriorSource::WindowPool { samples, rng: rng_from_seed(seed) })
    }

    pub fn fields(&mut self, n: usize) -> Result<Vec<FieldConfig>> {
        match self {
            PriorSource::Chain(s) => (0..n).map(|_| s.next_sample()).collect(),
            PriorSource::Pool { fields, rng } => Ok((0..n).map(|_| fields[rng.random_range(0..fields.len())].clone()).collect()),
            PriorSource::WindowPool { .. } => Err(invalid("a window pool cannot feed stochastic flows")),
        }
    }

    pub fn nf_samples(&mut self, n: usize, window: &DefectWindow, lattice: &Lattice, params: &ActionParams) -> Result<Vec<NfSample>> {
        match self {
            PriorSource::WindowPool { samples, rng } => {
                Ok((0..n).map(|_| samples[rng.random_range(0..samples.len())].clone()).collect())
            }
            _ => Ok(self.fields(n)?.iter().map(|f| NfSample::new(window, lattice, params, f)).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrainModel {
    Nf(FlowModel),
    Snf(SnfModel),
}

impl TrainModel {
    pub fn flow(&self) -> &FlowModel {
        match self {
            TrainModel::Nf(f) => f,
            TrainModel::Snf(m) => &m.flow,
        }
    }

    pub fn flow_mut(&mut self) -> &mut FlowModel {
        match self {
            TrainModel::Nf(f) => f,
            TrainModel::Snf(m) => &mut m.flow,
        }
    }

    pub fn schedule(&self) -> Option<&ProtocolSchedule> {
        match self {
            TrainModel::Nf(_) => None,
            TrainModel::Snf(m) => Some(&m.schedule),
        }
    }
}

/// One metrics row. Row 0 is the untrained model on the first batch; row
/// `k ≥ 1` averages steps `(k−1)·era .. k·era`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EraMetrics {
    pub era: u64,
    pub step: u64,
    pub mean_loss: f64,
    pub ess: f64,
    pub wallclock_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<EraMetrics>,
    pub adam: AdamState,
    pub steps: u64,
}

/// Context shared by every training step.
pub struct TrainTarget<'a> {
    pub window: &'a DefectWindow,
    pub lattice: &'a Lattice,
    pub params: &'a ActionParams,
}

fn batch_loss(model: &TrainModel, target: &TrainTarget<'_>, source: &mut PriorSource<'_>, n: usize, seed: u64, step: u64) -> Result<LossGrad> {
    match model {
        TrainModel::Nf(flow) => {
            let batch = source.nf_samples(n, target.window, target.lattice, target.params)?;
            nf_loss_and_grad(flow, target.window, target.params, &batch)
        }
        TrainModel::Snf(snf) => {
            let fields = source.fields(n)?;
            let seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(seed, step * n as u64 + i)).collect();
            snf_loss_and_grad(snf, target.window, target.lattice, target.params, fields, &seeds)
        }
    }
}

/// Trains the weights in `range` (all weights when `None`) for
/// `config.steps` steps. On a non-finite loss the model keeps its last finite
/// weights and an error is returned.
pub fn train_loop(
    model: &mut TrainModel,
    config: &TrainConfig,
    source: &mut PriorSource<'_>,
    target: &TrainTarget<'_>,
    range: Option<Range<usize>>,
    mut adam: Option<AdamState>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let np = model.flow().n_params();
    let range = range.unwrap_or(0..np);
    let mut adam = adam.take().unwrap_or_else(|| AdamState::new(np));
    let start = Instant::now();
    let mut metrics = Vec::new();
    let (mut loss_acc, mut ess_acc, mut in_era) = (0.0, 0.0, 0u64);
    let mut weights = model.flow().params();
    for step in 0..config.steps {
        let lg = batch_loss(model, target, source, config.batch, config.seed, step)?;
        if !lg.loss.is_finite() || lg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!("non-finite loss at training step {step}")));
        }
        let batch_ess = ess(&lg.works)?;
        if step == 0 {
            metrics.push(EraMetrics { era: 0, step: 0, mean_loss: lg.loss, ess: batch_ess, wallclock_s: 0.0 });
        }
        loss_acc += lg.loss;
        ess_acc += batch_ess;
        in_era += 1;
        adam_step(&mut weights, &lg.grad, &mut adam, &config.adam, range.clone())?;
        model.flow_mut().set_params(&weights)?;
        if in_era == config.era || step + 1 == config.steps {
            metrics.push(EraMetrics {
                era: metrics.len() as u64,
                step: step + 1,
                mean_loss: loss_acc / in_era as f64,
                ess: ess_acc / in_era as f64,
                wallclock_s: start.elapsed().as_secs_f64(),
            });
            (loss_acc, ess_acc, in_era) = (0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome { metrics, adam, steps: config.steps })
}

/// Trains the SNF blocks one after another, each with a fresh optimizer and
/// an equal share of `config.steps` (the last block takes the remainder).
pub fn blockwise_train(
    model: &mut SnfModel,
    config: &TrainConfig,
    source: &mut PriorSource<'_>,
    target: &TrainTarget<'_>,
) -> Result<Vec<TrainOutcome>> {
    let nb = model.flow.n_blocks() as u64;
    if nb == 0 {
        return Err(invalid("no blocks to train"));
    }
    let mut wrapped = TrainModel::Snf(model.clone());
    let mut out = Vec::new();
    for b in 0..nb {
        let steps = if b + 1 == nb { config.steps - config.steps / nb * (nb - 1) } else { config.steps / nb };
        let cfg = if nb == 1 { *config } else { TrainConfig { steps, seed: derive_seed(config.seed, b), ..*config } };
        let range = wrapped.flow().block_range(b as usize);
        out.push(train_loop(&mut wrapped, &cfg, source, target, Some(range), None)?);
    }
    if let TrainModel::Snf(m) = wrapped {
        *model = m;
    }
    Ok(out)
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RFLW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained model plus everything needed to resume or transfer it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub geometry: ReplicaGeometry,
    pub params: ActionParams,
    pub model: TrainModel,
    pub hyper: AdamHyper,
    pub adam: Option<AdamState>,
    pub step: u64,
}

/// Geometry and coupling changes allowed when loading a checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Transfer {
    pub extent_t: Option<usize>,
    /// Spatial extent; in D = 3 both L_x and L_y.
    pub extent_l: Option<usize>,
    pub cut: Option<usize>,
    pub kappa: Option<f64>,
}

impl Transfer {
    pub fn is_identity(&self) -> bool {
        *self == Transfer::default()
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
}

struct Reader<'a>(&'a [u8]);

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.0.len() < n {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let (a, b) = self.0.split_at(n);
        self.0 = b;
        Ok(a)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("size field overflows".into()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > self.0.len() / 8 {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

impl Checkpoint {
    /// Layout (little-endian): magic, u32 version, geometry (u32 D, u64 T,
    /// L_x, L_y, n, l), f64 κ, λ, u64 patch rows and columns, u8 net kind with
    /// u64-prefixed hidden widths, u64 blocks, u8 schedule flag [u8
    /// stochastic, f64-vector levels], u64 step, f64-vector weights, f64 lr,
    /// β₁, β₂, ε, u8 Adam flag [u64 t, f64-vectors m, v]. Weights follow layer
    /// order, each net in the order documented by the network module.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        let g = &self.geometry;
        w.u32(g.dim as u32);
        for v in [g.extent_t, g.extent_x, g.extent_y, g.n_replicas, g.cut] {
            w.u64(v as u64);
        }
        w.f64(self.params.kappa);
        w.f64(self.params.lambda);
        let flow = self.model.flow();
        let spec = flow.spec();
        w.u64(spec.patch.height as u64);
        w.u64(spec.patch.width as u64);
        let (kind, hidden) = match &spec.net {
            NetKind::Dense { hidden } => (0, hidden),
            NetKind::Conv { hidden } => (1, hidden),
        };
        w.u8(kind);
        w.u64(hidden.len() as u64);
        hidden.iter().for_each(|h| w.u64(*h as u64));
        w.u64(spec.n_blocks as u64);
        match self.model.schedule() {
            None => w.u8(0),
            Some(s) => {
                w.u8(1);
                w.u8(s.is_stochastic() as u8);
                w.f64s(s.levels());
            }
        }
        w.u64(self.step);
        w.f64s(&flow.params());
        let h = self.hyper;
        for v in [h.lr, h.beta1, h.beta2, h.eps] {
            w.f64(v);
        }
        match &self.adam {
            None => w.u8(0),
            Some(a) => {
                w.u8(1);
                w.u64(a.t);
                w.f64s(&a.m);
                w.f64s(&a.v);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a flow checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Incompatible(format!(
                "checkpoint version {version}, this build reads version {CHECKPOINT_VERSION}"
            )));
        }
        let dim = r.u32()? as usize;
        let (t, lx, ly, n, cut) = (r.usize()?, r.usize()?, r.usize()?, r.usize()?, r.usize()?);
        let geometry = ReplicaGeometry::new(dim, t, lx, ly, n, cut)?;
        let params = ActionParams::new(r.f64()?, r.f64()?)?;
        let patch = PatchSpec::new(r.usize()?, r.usize()?)?;
        let kind = r.u8()?;
        let n_hidden = r.usize()?;
        if n_hidden > 64 {
            return Err(Error::Format("implausible hidden layer count".into()));
        }
        let hidden = (0..n_hidden).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let net = match kind {
            0 => NetKind::Dense { hidden },
            1 => NetKind::Conv { hidden },
            k => return Err(Error::Format(format!("unknown net kind {k}"))),
        };
        let n_blocks = r.usize()?;
        let schedule = match r.u8()? {
            0 => None,
            _ => {
                let stochastic = r.u8()? != 0;
                let levels = r.f64s()?;
                Some(if stochastic {
                    ProtocolSchedule::from_levels(levels)?
                } else if levels == [0.0, 1.0] {
                    ProtocolSchedule::instantaneous()
                } else {
                    return Err(Error::Format("deterministic schedule must be [0, 1]".into()));
                })
            }
        };
        let step = r.u64()?;
        let weights = r.f64s()?;
        let spec = FlowSpec { patch, net, n_blocks };
        let flow = FlowModel::from_params(spec, dim, n, ly, &weights)?;
        let hyper = AdamHyper { lr: r.f64()?, beta1: r.f64()?, beta2: r.f64()?, eps: r.f64()? };
        let adam = match r.u8()? {
            0 => None,
            _ => {
                let t = r.u64()?;
                let m = r.f64s()?;
                let v = r.f64s()?;
                if m.len() != weights.len() || v.len() != weights.len() {
                    return Err(Error::Format("optimizer state does not match the weights".into()));
                }
                Some(AdamState { m, v, t })
            }
        };
        if !r.0.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let model = match schedule {
            None => TrainModel::Nf(flow),
            Some(s) => TrainModel::Snf(SnfModel::new(flow, s)),
        };
        Ok(Checkpoint { geometry, params, model, hyper, adam, step })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Loads and moves the model to a new volume, cut or hopping parameter.
    pub fn load_with(path: &Path, transfer: &Transfer) -> Result<Self> {
        Self::load(path)?.transferred(transfer)
    }

    pub fn transferred(&self, transfer: &Transfer) -> Result<Self> {
        let mut g = self.geometry.clone();
        if let Some(t) = transfer.extent_t {
            g.extent_t = t;
        }
        if let Some(l) = transfer.extent_l {
            g.extent_x = l;
            if g.dim == 3 {
                g.extent_y = l;
            }
        }
        if let Some(c) = transfer.cut {
            g.cut = c;
        }
        g.validate()?;
        let mut params = self.params;
        if let Some(k) = transfer.kappa {
            params.kappa = k;
            params.validate()?;
        }
        let flow = self.model.flow().rebind(&g)?;
        let model = match &self.model {
            TrainModel::Nf(_) => TrainModel::Nf(flow),
            TrainModel::Snf(m) => TrainModel::Snf(SnfModel::new(flow, m.schedule.clone())),
        };
        Ok(Checkpoint { geometry: g, params, model, hyper: self.hyper, adam: self.adam.clone(), step: self.step })
    }
}
