//! Heatbath updates for the φ⁴ action and equilibrium prior streams.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::lattice::{site_delta, ActionParams, FieldConfig, Lattice};
use crate::rng::{rng_from_seed, Rng};

/// Upper bound on proposals for a single site before giving up.
pub const PROPOSAL_CAP: u64 = 1_000_000;

/// Draws φ from p(φ) ∝ exp(2κbφ − (1−2λ)φ² − λφ⁴).
///
/// Gaussian proposal with the quadratic part, accepted with probability
/// exp(−λφ⁴). Returns the sample and the number of proposals used.
#[inline]
pub fn conditional_sample(b: f64, params: &ActionParams, rng: &mut Rng) -> Result<(f64, u64)> {
    let m = params.mass_term();
    let mean = params.kappa * b / m;
    let sd = (0.5 / m).sqrt();
    let lambda = params.lambda;
    for n in 1..=PROPOSAL_CAP {
        let z: f64 = rng.sample(StandardNormal);
        let phi = mean + sd * z;
        if lambda == 0.0 {
            return Ok((phi, n));
        }
        let p2 = phi * phi;
        let x = lambda * p2 * p2;
        let u: f64 = rng.random();
        // exp(-x) >= 1 - x, so most proposals are accepted without the exp
        if u < 1.0 - x || u < (-x).exp() {
            return Ok((phi, n));
        }
    }
    Err(Error::SamplerCap(PROPOSAL_CAP))
}

/// One Markov chain: the field, its random stream and a few counters.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub field: FieldConfig,
    pub rng: Rng,
    pub sweeps: u64,
    pub proposals: u64,
    pub accepted: u64,
}

impl ChainState {
    pub fn new(field: FieldConfig, rng: Rng) -> Self {
        ChainState { field, rng, sweeps: 0, proposals: 0, accepted: 0 }
    }

    /// Fraction of Gaussian proposals accepted so far.
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            1.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }
}

/// Updates every site once in storage order and returns the accumulated
/// action change (the heat of the sweep).
pub fn sweep(state: &mut ChainState, params: &ActionParams, lattice: &Lattice, level: Option<f64>) -> Result<f64> {
    lattice.check_field(&state.field)?;
    lattice.check_level(level)?;
    let mut heat = 0.0;
    let phi = state.field.values_mut();
    for i in 0..phi.len() {
        let b = lattice.neighbor_sum(phi, i, level);
        let (new, tries) = conditional_sample(b, params, &mut state.rng)?;
        heat += site_delta(params, b, phi[i], new);
        phi[i] = new;
        state.proposals += tries;
        state.accepted += 1;
    }
    state.sweeps += 1;
    Ok(heat)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorPlan {
    pub thermalization: u64,
    pub stride: u64,
    pub samples: u64,
    pub hot_start: bool,
}

impl Default for PriorPlan {
    fn default() -> Self {
        PriorPlan { thermalization: 10_000, stride: 20, samples: 1000, hot_start: false }
    }
}

impl PriorPlan {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.samples == 0 {
            return Err(invalid("prior stride and sample count must be positive"));
        }
        Ok(())
    }
}

/// Iterator over equilibrium configurations of one chain.
pub struct PriorStream<'a> {
    lattice: &'a Lattice,
    params: ActionParams,
    level: Option<f64>,
    chain: ChainState,
    plan: PriorPlan,
    emitted: u64,
    thermalized: bool,
    failed: bool,
}

impl<'a> PriorStream<'a> {
    pub fn chain_state(&self) -> &ChainState {
        &self.chain
    }

    /// Advances the chain by `stride` sweeps and returns the new configuration,
    /// ignoring the sample budget. Used by persistent training chains.
    pub fn next_sample(&mut self) -> Result<FieldConfig> {
        if !self.thermalized {
            for _ in 0..self.plan.thermalization {
                sweep(&mut self.chain, &self.params, self.lattice, self.level)?;
            }
            self.thermalized = true;
        }
        for _ in 0..self.plan.stride {
            sweep(&mut self.chain, &self.params, self.lattice, self.level)?;
        }
        self.emitted += 1;
        Ok(self.chain.field.clone())
    }
}

impl Iterator for PriorStream<'_> {
    type Item = Result<FieldConfig>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.emitted >= self.plan.samples {
            return None;
        }
        let r = self.next_sample();
        self.failed = r.is_err();
        Some(r)
    }
}

/// Equilibrium samples of the lattice action (at `level`, if given) after
/// `thermalization` sweeps, one every `stride` sweeps.
pub fn generate_prior<'a>(
    plan: PriorPlan,
    params: &ActionParams,
    lattice: &'a Lattice,
    level: Option<f64>,
    seed: u64,
) -> Result<PriorStream<'a>> {
    plan.validate()?;
    params.validate()?;
    lattice.check_level(level)?;
    let mut rng = rng_from_seed(seed);
    let geom = lattice.geometry();
    let field = if plan.hot_start {
        let v = (0..geom.n_sites()).map(|_| rng.random_range(-1.0..1.0)).collect();
        FieldConfig::from_values(geom, v)?
    } else {
        FieldConfig::zeros(geom)
    };
    Ok(PriorStream {
        lattice,
        params: *params,
        level,
        chain: ChainState::new(field, rng),
        plan,
        emitted: 0,
        thermalized: false,
        failed: false,
    })
}
