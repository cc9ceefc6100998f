//! Non-equilibrium evolutions between cut l and cut l + 1 with Jarzynski
//! work accounting.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::heatbath::{sweep, ChainState, PriorStream};
use crate::lattice::{ActionParams, FieldConfig, Lattice};
use crate::rng::{derive_seed, rng_from_seed};

/// Interpolation levels c(0) = 0 ≤ c(1) ≤ … ≤ c(K) = 1.
///
/// With `n_step` stochastic steps there are `n_step` transitions, each
/// followed by one heatbath sweep. `n_step = 0` is the instantaneous switch:
/// a single transition 0 → 1 and no sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolSchedule {
    levels: Vec<f64>,
    stochastic: bool,
}

impl ProtocolSchedule {
    pub fn linear(n_step: usize) -> Self {
        if n_step == 0 {
            return Self::instantaneous();
        }
        let levels = (0..=n_step).map(|j| j as f64 / n_step as f64).collect();
        ProtocolSchedule { levels, stochastic: true }
    }

    pub fn instantaneous() -> Self {
        ProtocolSchedule { levels: vec![0.0, 1.0], stochastic: false }
    }

    /// Arbitrary monotone schedule with `levels.len() - 1` stochastic steps.
    pub fn from_levels(levels: Vec<f64>) -> Result<Self> {
        if levels.len() < 2 {
            return Err(invalid("a schedule needs at least two levels"));
        }
        if levels[0] != 0.0 || *levels.last().unwrap() != 1.0 {
            return Err(invalid("schedule must start at 0 and end at 1"));
        }
        if levels.windows(2).any(|w| w[1] < w[0]) || levels.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(invalid("schedule levels must be non-decreasing within [0, 1]"));
        }
        Ok(ProtocolSchedule { levels, stochastic: true })
    }

    pub fn n_step(&self) -> usize {
        if self.stochastic {
            self.levels.len() - 1
        } else {
            0
        }
    }

    pub fn transitions(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn is_stochastic(&self) -> bool {
        self.stochastic
    }

    /// Same transitions traversed from c = 1 back to c = 0.
    pub fn reversed(&self) -> Self {
        ProtocolSchedule { levels: self.levels.iter().rev().copied().collect(), stochastic: self.stochastic }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Nemc,
    Nf,
    Snf,
}

impl Method {
    pub fn tag(self) -> &'static str {
        match self {
            Method::Nemc => "NEMC",
            Method::Nf => "NF",
            Method::Snf => "SNF",
        }
    }
}

/// Per-evolution bookkeeping. `work` is the estimator input w with
/// ⟨e^{−w}⟩ = Z_final/Z_initial.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorkRecord {
    #[serde(rename = "W")]
    pub work: f64,
    #[serde(rename = "Q")]
    pub heat: f64,
    #[serde(rename = "logJ")]
    pub log_jacobian: f64,
    #[serde(rename = "S_f")]
    pub action_final: f64,
    #[serde(rename = "S_i")]
    pub action_initial: f64,
    #[serde(rename = "dir")]
    pub direction: Direction,
    #[serde(default)]
    pub method: Method,
    pub seed: u64,
}

impl WorkRecord {
    /// W − (S_f − S_i − Q − logJ); zero up to rounding.
    pub fn bookkeeping_residual(&self) -> f64 {
        self.work - (self.action_final - self.action_initial - self.heat - self.log_jacobian)
    }
}

fn check_prior_state(lattice: &Lattice, field: &FieldConfig) -> Result<()> {
    lattice.check_field(field)?;
    if lattice.geometry().cut >= lattice.geometry().extent_x {
        return Err(invalid("evolutions need cut < L_x"));
    }
    Ok(())
}

fn evolve(
    lattice: &Lattice,
    params: &ActionParams,
    schedule: &ProtocolSchedule,
    field: FieldConfig,
    seed: u64,
    direction: Direction,
) -> Result<(FieldConfig, WorkRecord)> {
    check_prior_state(lattice, &field)?;
    let levels = schedule.levels();
    let mut state = ChainState::new(field, rng_from_seed(seed));
    let action_initial = lattice.action_unchecked(state.field.values(), params, Some(levels[0]));
    let mut work = 0.0;
    let mut heat = 0.0;
    for j in 0..schedule.transitions() {
        work += lattice.protocol_jump(state.field.values(), params, levels[j], levels[j + 1]);
        if schedule.is_stochastic() {
            heat += sweep(&mut state, params, lattice, Some(levels[j + 1]))?;
        }
    }
    let action_final = lattice.action_unchecked(state.field.values(), params, Some(levels[schedule.transitions()]));
    let rec = WorkRecord {
        work,
        heat,
        log_jacobian: 0.0,
        action_final,
        action_initial,
        direction,
        method: Method::Nemc,
        seed,
    };
    Ok((state.field, rec))
}

/// Drives an equilibrium sample of the cut-l action towards cut l + 1.
pub fn evolve_forward(
    lattice: &Lattice,
    params: &ActionParams,
    schedule: &ProtocolSchedule,
    field: FieldConfig,
    seed: u64,
) -> Result<(FieldConfig, WorkRecord)> {
    evolve(lattice, params, schedule, field, seed, Direction::Forward)
}

/// Drives an equilibrium sample of the cut-(l+1) action back to cut l;
/// ⟨e^{−W}⟩ then estimates Z_l/Z_{l+1}.
pub fn evolve_reverse(
    lattice: &Lattice,
    params: &ActionParams,
    schedule: &ProtocolSchedule,
    field: FieldConfig,
    seed: u64,
) -> Result<(FieldConfig, WorkRecord)> {
    evolve(lattice, params, &schedule.reversed(), field, seed, Direction::Reverse)
}

/// Pulls `batch` samples from `priors` and evolves each on its own random
/// stream `derive_seed(master_seed, first_index + i)`.
#[allow(clippy::too_many_arguments)]
pub fn jarzynski_batch(
    priors: &mut PriorStream<'_>,
    lattice: &Lattice,
    params: &ActionParams,
    schedule: &ProtocolSchedule,
    direction: Direction,
    batch: usize,
    master_seed: u64,
    first_index: u64,
) -> Result<Vec<WorkRecord>> {
    if batch == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    let fields = (0..batch).map(|_| priors.next_sample()).collect::<Result<Vec<_>>>()?;
    evolve_all(lattice, params, schedule, direction, fields, master_seed, first_index)
}

/// Evolves given prior samples concurrently; the output order follows the input.
pub fn evolve_all(
    lattice: &Lattice,
    params: &ActionParams,
    schedule: &ProtocolSchedule,
    direction: Direction,
    fields: Vec<FieldConfig>,
    master_seed: u64,
    first_index: u64,
) -> Result<Vec<WorkRecord>> {
    fields
        .into_par_iter()
        .enumerate()
        .map(|(i, f)| {
            let seed = derive_seed(master_seed, first_index + i as u64);
            let out = match direction {
                Direction::Forward => evolve_forward(lattice, params, schedule, f, seed),
                Direction::Reverse => evolve_reverse(lattice, params, schedule, f, seed),
            };
            out.map(|(_, r)| r)
        })
        .collect()
}

/// One JSON object per line. Lines carrying a `meta` key are headers.
pub fn write_records<W: Write>(mut out: W, records: &[WorkRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::Format(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_records<R: BufRead>(input: R) -> Result<Vec<WorkRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        if v.get("meta").is_some() {
            continue;
        }
        out.push(serde_json::from_value(v).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heatbath::{generate_prior, PriorPlan};
    use crate::lattice::ReplicaGeometry;

    fn setup() -> (Lattice, ActionParams) {
        let g = ReplicaGeometry::new_2d(8, 6, 2, 2).unwrap();
        (Lattice::new(&g).unwrap(), ActionParams::new(0.2, 0.02).unwrap())
    }

    fn sample(lat: &Lattice, p: &ActionParams, level: Option<f64>) -> FieldConfig {
        let plan = PriorPlan { thermalization: 50, stride: 1, samples: 1, hot_start: false };
        generate_prior(plan, p, lat, level, 3).unwrap().next().unwrap().unwrap()
    }

    #[test]
    fn schedules() {
        assert_eq!(ProtocolSchedule::linear(4).levels(), &[0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(ProtocolSchedule::linear(0).n_step(), 0);
        assert_eq!(ProtocolSchedule::linear(3).reversed().levels()[0], 1.0);
        assert!(ProtocolSchedule::from_levels(vec![0.0, 0.7, 0.5, 1.0]).is_err());
        assert!(ProtocolSchedule::from_levels(vec![0.1, 1.0]).is_err());
        assert_eq!(ProtocolSchedule::from_levels(vec![0.0, 0.1, 1.0]).unwrap().n_step(), 2);
    }

    #[test]
    fn instantaneous_switch_is_reweighting() {
        let (lat, p) = setup();
        let g1 = lat.geometry().with_cut(3).unwrap();
        let lat1 = Lattice::new(&g1).unwrap();
        let f = sample(&lat, &p, None);
        let s_l = lat.action_at(&f, &p, None).unwrap();
        let s_l1 = lat1.action_at(&f, &p, None).unwrap();
        let (out, rec) = evolve_forward(&lat, &p, &ProtocolSchedule::instantaneous(), f.clone(), 1).unwrap();
        assert_eq!(out, f);
        assert_eq!(rec.heat, 0.0);
        assert!((rec.work - (s_l1 - s_l)).abs() < 1e-10);
        let (_, rev) = evolve_reverse(&lat, &p, &ProtocolSchedule::instantaneous(), f, 1).unwrap();
        assert!((rev.work - (s_l - s_l1)).abs() < 1e-10);
    }

    #[test]
    fn bookkeeping_identity_holds() {
        let (lat, p) = setup();
        let f = sample(&lat, &p, None);
        let (_, rec) = evolve_forward(&lat, &p, &ProtocolSchedule::linear(7), f, 9).unwrap();
        assert!(rec.bookkeeping_residual().abs() < 1e-8);
        let fb = sample(&lat, &p, Some(1.0));
        let (_, rev) = evolve_reverse(&lat, &p, &ProtocolSchedule::linear(7), fb, 9).unwrap();
        assert!(rev.bookkeeping_residual().abs() < 1e-8);
        assert_eq!(rev.direction, Direction::Reverse);
    }

    #[test]
    fn batches_are_deterministic() {
        let (lat, p) = setup();
        let plan = PriorPlan { thermalization: 20, stride: 2, samples: 100, hot_start: false };
        let run = || {
            let mut s = generate_prior(plan, &p, &lat, None, 5).unwrap();
            jarzynski_batch(&mut s, &lat, &p, &ProtocolSchedule::linear(3), Direction::Forward, 6, 77, 0).unwrap()
        };
        let a = run();
        assert_eq!(a.len(), 6);
        assert_eq!(a, run());
        let mut s = generate_prior(plan, &p, &lat, None, 5).unwrap();
        assert!(jarzynski_batch(&mut s, &lat, &p, &ProtocolSchedule::linear(3), Direction::Forward, 0, 1, 0).is_err());
    }

    #[test]
    fn jsonl_round_trip_skips_meta() {
        let (lat, p) = setup();
        let f = sample(&lat, &p, None);
        let (_, rec) = evolve_forward(&lat, &p, &ProtocolSchedule::linear(2), f, 4).unwrap();
        let mut buf = b"{\"meta\":{\"x\":1}}\n".to_vec();
        write_records(&mut buf, &[rec, rec]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("{\"W\":"));
        let back = read_records(&buf[..]).unwrap();
        assert_eq!(back, vec![rec, rec]);
        assert!(read_records(&b"{not json}\n"[..]).is_err());
    }
}
