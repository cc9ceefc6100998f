//! Stochastic normalizing flows: defect blocks interleaved with heatbath
//! sweeps along the interpolation schedule.
//!
//! Stage `j` moves the action level from `c(j)` to `c(j+1)`: the protocol
//! jump is booked on the incoming configuration, then the stage's blocks act
//! and their action change is booked at `c(j+1)`, then one sweep runs at
//! `c(j+1)` (skipped for the instantaneous schedule).

use std::ops::Range;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::flow::{nf_work, DefectWindow, FlowModel};
use crate::heatbath::{sweep, ChainState, PriorStream};
use crate::lattice::{ActionParams, FieldConfig, Lattice};
use crate::protocol::{Direction, Method, ProtocolSchedule, WorkRecord};
use crate::rng::{derive_seed, rng_from_seed};

#[derive(Clone, Debug, PartialEq)]
pub struct SnfModel {
    pub flow: FlowModel,
    pub schedule: ProtocolSchedule,
}

impl SnfModel {
    pub fn new(flow: FlowModel, schedule: ProtocolSchedule) -> Self {
        SnfModel { flow, schedule }
    }

    pub fn n_stages(&self) -> usize {
        self.schedule.transitions()
    }

    /// Blocks acting in stage `j`; blocks are spread evenly over the stages.
    pub fn stage_blocks(&self, j: usize) -> Range<usize> {
        let (s, b) = (self.n_stages(), self.flow.n_blocks());
        j * b / s..(j + 1) * b / s
    }

    pub fn stage_layers(&self, j: usize) -> Range<usize> {
        self.flow.block_layers(self.stage_blocks(j))
    }

    /// Stage in which block `b` acts.
    pub fn block_stage(&self, b: usize) -> usize {
        (0..self.n_stages()).find(|&j| self.stage_blocks(j).contains(&b)).unwrap_or(0)
    }
}

pub(crate) fn check_inputs(lattice: &Lattice, window: &DefectWindow, flow: &FlowModel, field: &FieldConfig) -> Result<()> {
    lattice.check_field(field)?;
    if lattice.geometry() != window.geometry() {
        return Err(Error::Incompatible("window and lattice geometries differ".into()));
    }
    flow.check_geometry(lattice.geometry())?;
    if window.patch() != flow.spec().patch {
        return Err(Error::Incompatible("window patch differs from the model patch".into()));
    }
    Ok(())
}

/// One SNF evolution of a cut-l prior sample on the random stream `seed`.
pub fn snf_evolve(
    model: &SnfModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    field: FieldConfig,
    seed: u64,
) -> Result<(FieldConfig, WorkRecord)> {
    check_inputs(lattice, window, &model.flow, &field)?;
    let levels = model.schedule.levels();
    let mut state = ChainState::new(field, rng_from_seed(seed));
    let action_initial = lattice.action_unchecked(state.field.values(), params, Some(levels[0]));
    let (mut work, mut heat, mut log_jacobian) = (0.0, 0.0, 0.0);
    for j in 0..model.n_stages() {
        let (c0, c1) = (levels[j], levels[j + 1]);
        work += lattice.protocol_jump(state.field.values(), params, c0, c1);
        let (delta, log_j) = model.flow.stage_apply(model.stage_layers(j), window, params, c1, state.field.values_mut())?;
        work += delta - log_j;
        log_jacobian += log_j;
        if model.schedule.is_stochastic() {
            heat += sweep(&mut state, params, lattice, Some(c1))?;
        }
    }
    if !work.is_finite() {
        return Err(Error::Numerical("non-finite SNF work".into()));
    }
    let action_final = lattice.action_unchecked(state.field.values(), params, Some(levels[model.n_stages()]));
    let rec = WorkRecord {
        work,
        heat,
        log_jacobian,
        action_final,
        action_initial,
        direction: Direction::Forward,
        method: Method::Snf,
        seed,
    };
    Ok((state.field, rec))
}

/// SNF evolutions of given prior samples, each on `derive_seed(master, first + i)`.
#[allow(clippy::too_many_arguments)]
pub fn snf_evolve_all(
    model: &SnfModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    fields: Vec<FieldConfig>,
    master_seed: u64,
    first_index: u64,
) -> Result<Vec<WorkRecord>> {
    fields
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = derive_seed(master_seed, first_index + i as u64);
            snf_evolve(model, window, lattice, params, f, seed).map(|(_, r)| r)
        })
        .collect()
}

/// Pulls `batch` prior samples and evolves each with the SNF.
#[allow(clippy::too_many_arguments)]
pub fn snf_batch(
    priors: &mut PriorStream<'_>,
    model: &SnfModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    batch: usize,
    master_seed: u64,
    first_index: u64,
) -> Result<Vec<WorkRecord>> {
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let fields = (0..batch).map(|_| priors.next_sample()).collect::<Result<Vec<_>>>()?;
    snf_evolve_all(model, window, lattice, params, fields, master_seed, first_index)
}

/// Work record of the deterministic flow (no heat). `seed` only labels the
/// record.
pub fn nf_evolve(
    flow: &FlowModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    mut field: FieldConfig,
    seed: u64,
) -> Result<(FieldConfig, WorkRecord)> {
    check_inputs(lattice, window, flow, &field)?;
    let action_initial = lattice.action_unchecked(field.values(), params, Some(0.0));
    let (work, log_jacobian) = nf_work(flow, window, lattice, params, field.values_mut())?;
    if !work.is_finite() {
        return Err(Error::Numerical("non-finite flow work".into()));
    }
    let action_final = lattice.action_unchecked(field.values(), params, Some(1.0));
    let rec = WorkRecord {
        work,
        heat: 0.0,
        log_jacobian,
        action_final,
        action_initial,
        direction: Direction::Forward,
        method: Method::Nf,
        seed,
    };
    Ok((field, rec))
}

pub fn nf_evolve_all(
    flow: &FlowModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    fields: Vec<FieldConfig>,
    master_seed: u64,
    first_index: u64,
) -> Result<Vec<WorkRecord>> {
    fields
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = derive_seed(master_seed, first_index + i as u64);
            nf_evolve(flow, window, lattice, params, f, seed).map(|(_, r)| r)
        })
        .collect()
}
