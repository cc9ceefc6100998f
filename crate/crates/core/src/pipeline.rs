//! Config-driven building blocks shared by the `rflow` commands: prior
//! pools, training, streamed evaluation and checkpoint transfer.

use std::path::Path;

use crate::config::RunConfig;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::flow::{DefectWindow, FlowModel};
use crate::heatbath::{generate_prior, PriorPlan};
use crate::lattice::{ActionParams, FieldConfig, Lattice, ReplicaGeometry};
use crate::protocol::{evolve_all, Direction, Method, ProtocolSchedule, WorkRecord};
use crate::rng::derive_seed;
use crate::snf::{nf_evolve_all, snf_evolve_all, SnfModel};
use crate::train::{
    blockwise_train, train_loop, AdamState, Checkpoint, EraMetrics, NfSample, PriorSource, TrainConfig, TrainModel,
    TrainTarget, Transfer,
};

/// Anything that turns a prior sample into a work record.
#[derive(Clone, Debug)]
pub enum Sampler {
    Nemc { schedule: ProtocolSchedule, direction: Direction },
    Nf(FlowModel),
    Snf(SnfModel),
}

impl Sampler {
    pub fn method(&self) -> Method {
        match self {
            Sampler::Nemc { .. } => Method::Nemc,
            Sampler::Nf(_) => Method::Nf,
            Sampler::Snf(_) => Method::Snf,
        }
    }

    pub fn from_model(model: TrainModel) -> Self {
        match model {
            TrainModel::Nf(f) => Sampler::Nf(f),
            TrainModel::Snf(s) => Sampler::Snf(s),
        }
    }

    /// Action level of the prior: cut l, or cut l + 1 for reverse evolutions.
    fn prior_level(&self) -> Option<f64> {
        match self {
            Sampler::Nemc { direction: Direction::Reverse, .. } => Some(1.0),
            _ => None,
        }
    }

    fn flow(&self) -> Option<&FlowModel> {
        match self {
            Sampler::Nemc { .. } => None,
            Sampler::Nf(f) => Some(f),
            Sampler::Snf(s) => Some(&s.flow),
        }
    }

    fn evolve(
        &self,
        lattice: &Lattice,
        window: Option<&DefectWindow>,
        params: &ActionParams,
        fields: Vec<FieldConfig>,
        master: u64,
        first: u64,
    ) -> Result<Vec<WorkRecord>> {
        match self {
            Sampler::Nemc { schedule, direction } => evolve_all(lattice, params, schedule, *direction, fields, master, first),
            Sampler::Nf(f) => nf_evolve_all(f, window.expect("flows carry a window"), lattice, params, fields, master, first),
            Sampler::Snf(s) => snf_evolve_all(s, window.expect("flows carry a window"), lattice, params, fields, master, first),
        }
    }
}

/// Streams `count` fresh prior samples through `sampler`, `chunk` at a time.
/// The prior chain runs on `derive_seed(seed, 0)`; evolution `i` on
/// `derive_seed(derive_seed(seed, 1), i)`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    sampler: &Sampler,
    geom: &ReplicaGeometry,
    params: &ActionParams,
    plan: PriorPlan,
    count: u64,
    chunk: usize,
    seed: u64,
    mut sink: impl FnMut(&[WorkRecord]) -> Result<()>,
) -> Result<()> {
    evaluate_many(std::slice::from_ref(sampler), geom, params, plan, count, chunk, seed, |_, r| sink(r))
}

/// Like [`evaluate`], but every sampler sees the same prior samples and the
/// same evolution streams. `sink` receives the sampler index with each chunk.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_many(
    samplers: &[Sampler],
    geom: &ReplicaGeometry,
    params: &ActionParams,
    plan: PriorPlan,
    count: u64,
    chunk: usize,
    seed: u64,
    mut sink: impl FnMut(usize, &[WorkRecord]) -> Result<()>,
) -> Result<()> {
    let Some(first) = samplers.first() else {
        return Err(Error::InvalidInput("no samplers to evaluate".into()));
    };
    if samplers.iter().any(|s| s.prior_level() != first.prior_level()) {
        return Err(Error::InvalidInput("samplers need the same prior ensemble".into()));
    }
    let lattice = Lattice::new(geom)?;
    let windows = samplers
        .iter()
        .map(|s| match s.flow() {
            Some(f) => {
                f.check_geometry(geom)?;
                Ok(Some(DefectWindow::new(&lattice, f.spec().patch)?))
            }
            None => Ok(None),
        })
        .collect::<Result<Vec<_>>>()?;
    let plan = PriorPlan { samples: count, ..plan };
    let mut prior = generate_prior(plan, params, &lattice, first.prior_level(), derive_seed(seed, 0))?;
    let master = derive_seed(seed, 1);
    let mut done = 0u64;
    while done < count {
        let n = (count - done).min(chunk.max(1) as u64) as usize;
        let fields = (&mut prior).take(n).collect::<Result<Vec<_>>>()?;
        for (k, (s, w)) in samplers.iter().zip(&windows).enumerate() {
            let recs = s.evolve(&lattice, w.as_ref(), params, fields.clone(), master, done)?;
            sink(k, &recs)?;
        }
        done += n as u64;
    }
    Ok(())
}

/// Collects [`evaluate`] into memory.
pub fn evaluate_all(
    sampler: &Sampler,
    geom: &ReplicaGeometry,
    params: &ActionParams,
    plan: PriorPlan,
    count: u64,
    seed: u64,
) -> Result<Vec<WorkRecord>> {
    let mut out = Vec::with_capacity(count as usize);
    evaluate(sampler, geom, params, plan, count, 1000, seed, |r| {
        out.extend_from_slice(r);
        Ok(())
    })?;
    Ok(out)
}

/// `plan.samples` equilibrium configurations at the geometry's cut.
pub fn prior_pool(geom: &ReplicaGeometry, params: &ActionParams, plan: PriorPlan, seed: u64) -> Result<Ensemble> {
    let lattice = Lattice::new(geom)?;
    let mut stream = generate_prior(plan, params, &lattice, None, seed)?;
    let fields = stream.by_ref().collect::<Result<Vec<_>>>()?;
    log::info!("prior pool: {} samples, heatbath acceptance {:.4}", fields.len(), stream.chain_state().acceptance_rate());
    Ok(Ensemble { geometry: geom.clone(), params: *params, fields })
}

/// Fresh, untrained model for the configured method.
pub fn initial_model(cfg: &RunConfig) -> Result<TrainModel> {
    let geom = cfg.geometry()?;
    let flow = FlowModel::new(cfg.flow_spec()?, &geom, cfg.seeds.init)?;
    match cfg.method.kind {
        Method::Nf => Ok(TrainModel::Nf(flow)),
        Method::Snf => Ok(TrainModel::Snf(SnfModel::new(flow, cfg.schedule()))),
        Method::Nemc => Err(Error::Config("nemc has nothing to train".into())),
    }
}

pub struct Trained {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EraMetrics>,
}

/// Where training batches come from.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// A continuing heatbath chain: thermalise, then one sample every
    /// `plan.stride` sweeps. `plan.samples` is ignored.
    Chain { geometry: &'a ReplicaGeometry, params: ActionParams, plan: PriorPlan, seed: u64 },
    /// Resampling with replacement from a stored ensemble. Small pools are
    /// easily overfitted by the larger flows.
    Pool { ensemble: &'a Ensemble, seed: u64 },
}

impl TrainData<'_> {
    fn target(&self) -> (&ReplicaGeometry, ActionParams) {
        match self {
            TrainData::Chain { geometry, params, .. } => (geometry, *params),
            TrainData::Pool { ensemble, .. } => (&ensemble.geometry, ensemble.params),
        }
    }
}

/// Trains `model` on batches from `data`. Blockwise training concatenates
/// the per-block metric rows.
pub fn train_model(model: TrainModel, data: TrainData<'_>, config: &TrainConfig) -> Result<Trained> {
    let (geom, params) = data.target();
    let lattice = Lattice::new(geom)?;
    let window = DefectWindow::new(&lattice, model.flow().spec().patch)?;
    let target = TrainTarget { window: &window, lattice: &lattice, params: &params };
    let mut source = match (data, &model) {
        (TrainData::Chain { plan, seed, .. }, _) => {
            let plan = PriorPlan { samples: u64::MAX, ..plan };
            PriorSource::Chain(generate_prior(plan, &params, &lattice, None, seed)?)
        }
        (TrainData::Pool { ensemble, seed }, TrainModel::Nf(_)) => {
            let samples = ensemble.fields.iter().map(|f| NfSample::new(&window, &lattice, &params, f)).collect();
            PriorSource::window_pool(samples, seed)?
        }
        (TrainData::Pool { ensemble, seed }, TrainModel::Snf(_)) => PriorSource::pool(ensemble.fields.clone(), seed)?,
    };
    let (model, metrics, adam): (TrainModel, Vec<EraMetrics>, Option<AdamState>) = match model {
        TrainModel::Snf(mut snf) if config.blockwise => {
            let outs = blockwise_train(&mut snf, config, &mut source, &target)?;
            let metrics = outs.iter().flat_map(|o| o.metrics.iter().copied()).collect();
            (TrainModel::Snf(snf), metrics, None)
        }
        mut m => {
            let out = train_loop(&mut m, config, &mut source, &target, None, None)?;
            (m, out.metrics, Some(out.adam))
        }
    };
    let checkpoint = Checkpoint {
        geometry: geom.clone(),
        params,
        model,
        hyper: config.adam,
        adam,
        step: config.steps,
    };
    Ok(Trained { checkpoint, metrics })
}

/// Moves a checkpoint onto the configured geometry and κ.
pub fn transfer_to(ck: &Checkpoint, geom: &ReplicaGeometry, params: &ActionParams) -> Result<Checkpoint> {
    let g = &ck.geometry;
    if g.dim != geom.dim || g.n_replicas != geom.n_replicas {
        return Err(Error::Incompatible(format!(
            "checkpoint is for D = {}, n = {}; run asks for D = {}, n = {}",
            g.dim, g.n_replicas, geom.dim, geom.n_replicas
        )));
    }
    if ck.params.lambda != params.lambda {
        return Err(Error::Incompatible(format!(
            "checkpoint was trained at lambda = {}, run asks for {}",
            ck.params.lambda, params.lambda
        )));
    }
    let differ = |a: usize, b: usize| (a != b).then_some(b);
    let t = Transfer {
        extent_t: differ(g.extent_t, geom.extent_t),
        extent_l: differ(g.extent_x, geom.extent_x),
        cut: differ(g.cut, geom.cut),
        kappa: (ck.params.kappa != params.kappa).then_some(params.kappa),
    };
    if t.is_identity() {
        return Ok(ck.clone());
    }
    ck.transferred(&t)
}

/// Sampler for the configured method, reading the checkpoint for flows.
pub fn sampler_for(cfg: &RunConfig, checkpoint: Option<&Checkpoint>) -> Result<Sampler> {
    match cfg.method.kind {
        Method::Nemc => Ok(Sampler::Nemc { schedule: cfg.schedule(), direction: cfg.method.direction }),
        kind => {
            let ck = checkpoint.ok_or_else(|| Error::Config("flow sampling needs a checkpoint; run `train` first".into()))?;
            let moved = transfer_to(ck, &cfg.geometry()?, &cfg.params()?)?;
            let sampler = Sampler::from_model(moved.model);
            if sampler.method() != kind {
                return Err(Error::Config(format!(
                    "checkpoint holds a {} model, config asks for {}",
                    sampler.method().tag(),
                    kind.tag()
                )));
            }
            Ok(sampler)
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("cannot read checkpoint {}: {io}", path.display())),
        other => other,
    })
}
