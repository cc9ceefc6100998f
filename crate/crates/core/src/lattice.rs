//! Replica lattice geometry and the φ⁴ action.
//!
//! A configuration holds one real value per (replica, site). Sites are stored
//! replica-major, then τ, then x, then y (y fastest; D = 2 has no y axis):
//!
//! ```text
//! index = ((replica * T + tau) * Lx + x) * Ly + y
//! ```
//!
//! Every direction is periodic. The only links that leave a replica are the
//! temporal wrap links τ = T−1 → τ = 0 at spatial columns x < cut, which carry
//! replica r into replica (r + 1) mod n.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Spacetime axis index: 0 is τ, 1 is x, 2 is y (D = 3 only).
pub const TAU: usize = 0;
pub const X: usize = 1;
pub const Y: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Direction {
    pub axis: usize,
    pub forward: bool,
}

impl Direction {
    pub const fn plus(axis: usize) -> Self {
        Direction { axis, forward: true }
    }

    pub const fn minus(axis: usize) -> Self {
        Direction { axis, forward: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Site {
    pub tau: usize,
    pub x: usize,
    pub y: usize,
}

impl Site {
    pub const fn new(tau: usize, x: usize) -> Self {
        Site { tau, x, y: 0 }
    }

    pub const fn new_3d(tau: usize, x: usize, y: usize) -> Self {
        Site { tau, x, y }
    }
}

/// How many boundary points/lines of the subsystem enter the c-function
/// normalisation |∂A|.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryConvention {
    /// One cut endpoint: |∂A| = 1 in D = 2, L_y in D = 3.
    #[default]
    OneEndpoint,
    /// Both endpoints of the interval: |∂A| = 2 in D = 2, 2 L_y in D = 3.
    TwoEndpoints,
}

impl BoundaryConvention {
    pub fn tag(self) -> &'static str {
        match self {
            BoundaryConvention::OneEndpoint => "one_endpoint",
            BoundaryConvention::TwoEndpoints => "two_endpoints",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplicaGeometry {
    pub dim: usize,
    pub extent_t: usize,
    pub extent_x: usize,
    /// Transverse extent; 1 in D = 2.
    pub extent_y: usize,
    pub n_replicas: usize,
    pub cut: usize,
}

impl ReplicaGeometry {
    pub fn new(
        dim: usize,
        extent_t: usize,
        extent_x: usize,
        extent_y: usize,
        n_replicas: usize,
        cut: usize,
    ) -> Result<Self> {
        let g = ReplicaGeometry { dim, extent_t, extent_x, extent_y, n_replicas, cut };
        g.validate()?;
        Ok(g)
    }

    pub fn new_2d(extent_t: usize, extent_x: usize, n_replicas: usize, cut: usize) -> Result<Self> {
        Self::new(2, extent_t, extent_x, 1, n_replicas, cut)
    }

    /// Square transverse section L × L.
    pub fn new_3d(extent_t: usize, extent_l: usize, n_replicas: usize, cut: usize) -> Result<Self> {
        Self::new(3, extent_t, extent_l, extent_l, n_replicas, cut)
    }

    pub fn validate(&self) -> Result<()> {
        match self.dim {
            2 if self.extent_y != 1 => return Err(invalid("D = 2 requires extent_y = 1")),
            2 => {}
            3 if self.extent_y < 2 => return Err(invalid("D = 3 requires extent_y >= 2")),
            3 => {}
            d => return Err(invalid(format!("dimension must be 2 or 3, got {d}"))),
        }
        if self.extent_t < 2 || self.extent_x < 2 {
            return Err(invalid("every lattice extent must be at least 2"));
        }
        if self.n_replicas < 2 {
            return Err(invalid("at least two replicas are required"));
        }
        if self.cut > self.extent_x {
            return Err(invalid(format!(
                "cut length {} exceeds spatial extent {}",
                self.cut, self.extent_x
            )));
        }
        if self.n_sites() > u32::MAX as usize {
            return Err(invalid("lattice too large"));
        }
        Ok(())
    }

    pub fn with_cut(&self, cut: usize) -> Result<Self> {
        let mut g = self.clone();
        g.cut = cut;
        g.validate()?;
        Ok(g)
    }

    pub fn sites_per_replica(&self) -> usize {
        self.extent_t * self.extent_x * self.extent_y
    }

    pub fn n_sites(&self) -> usize {
        self.n_replicas * self.sites_per_replica()
    }

    pub fn extent(&self, axis: usize) -> usize {
        match axis {
            TAU => self.extent_t,
            X => self.extent_x,
            _ => self.extent_y,
        }
    }

    /// |∂A| under the given endpoint convention.
    pub fn boundary_size(&self, convention: BoundaryConvention) -> f64 {
        let line = if self.dim == 3 { self.extent_y as f64 } else { 1.0 };
        match convention {
            BoundaryConvention::OneEndpoint => line,
            BoundaryConvention::TwoEndpoints => 2.0 * line,
        }
    }

    fn check_site(&self, replica: usize, site: Site) -> Result<()> {
        if replica >= self.n_replicas
            || site.tau >= self.extent_t
            || site.x >= self.extent_x
            || site.y >= self.extent_y
        {
            return Err(invalid(format!("site r={replica} {site:?} outside the lattice")));
        }
        Ok(())
    }

    pub fn index(&self, replica: usize, site: Site) -> Result<usize> {
        self.check_site(replica, site)?;
        Ok(self.index_unchecked(replica, site))
    }

    #[inline]
    pub fn index_unchecked(&self, replica: usize, site: Site) -> usize {
        ((replica * self.extent_t + site.tau) * self.extent_x + site.x) * self.extent_y + site.y
    }

    pub fn coords(&self, index: usize) -> (usize, Site) {
        let y = index % self.extent_y;
        let rest = index / self.extent_y;
        let x = rest % self.extent_x;
        let rest = rest / self.extent_x;
        let tau = rest % self.extent_t;
        (rest / self.extent_t, Site { tau, x, y })
    }

    /// Resolves the neighbour of `site` in `replica` one step along `dir`.
    pub fn neighbor(&self, replica: usize, site: Site, dir: Direction) -> Result<(usize, Site)> {
        self.check_site(replica, site)?;
        if dir.axis >= self.dim {
            return Err(invalid(format!("axis {} out of range for D = {}", dir.axis, self.dim)));
        }
        let n = self.n_replicas;
        let mut out = site;
        let mut rep = replica;
        match (dir.axis, dir.forward) {
            (TAU, true) => {
                if site.tau + 1 == self.extent_t {
                    out.tau = 0;
                    if site.x < self.cut {
                        rep = (replica + 1) % n;
                    }
                } else {
                    out.tau += 1;
                }
            }
            (TAU, false) => {
                if site.tau == 0 {
                    out.tau = self.extent_t - 1;
                    if site.x < self.cut {
                        rep = (replica + n - 1) % n;
                    }
                } else {
                    out.tau -= 1;
                }
            }
            (X, fwd) => out.x = step(site.x, self.extent_x, fwd),
            (_, fwd) => out.y = step(site.y, self.extent_y, fwd),
        }
        Ok((rep, out))
    }
}

fn step(v: usize, extent: usize, forward: bool) -> usize {
    if forward {
        (v + 1) % extent
    } else {
        (v + extent - 1) % extent
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionParams {
    pub kappa: f64,
    pub lambda: f64,
}

impl ActionParams {
    pub fn new(kappa: f64, lambda: f64) -> Result<Self> {
        let p = ActionParams { kappa, lambda };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.kappa.is_finite() || self.kappa < 0.0 {
            return Err(invalid(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(invalid(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if 1.0 - 2.0 * self.lambda <= 0.0 {
            return Err(invalid("1 - 2 lambda must be positive"));
        }
        Ok(())
    }

    /// Coefficient of φ² in the on-site term.
    #[inline]
    pub fn mass_term(&self) -> f64 {
        1.0 - 2.0 * self.lambda
    }

    #[inline]
    pub fn onsite(&self, phi: f64) -> f64 {
        let p2 = phi * phi;
        self.mass_term() * p2 + self.lambda * p2 * p2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldConfig {
    values: Vec<f64>,
}

impl FieldConfig {
    pub fn zeros(geom: &ReplicaGeometry) -> Self {
        FieldConfig { values: vec![0.0; geom.n_sites()] }
    }

    pub fn from_values(geom: &ReplicaGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.n_sites() {
            return Err(Error::ShapeMismatch { expected: geom.n_sites(), got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("field contains non-finite values"));
        }
        Ok(FieldConfig { values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn negated(&self) -> Self {
        FieldConfig { values: self.values.iter().map(|v| -v).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// A temporal wrap link at column x = cut whose replica target changes when
/// the cut grows by one: `a` = (r, cut, T−1) couples to `old` = (r, cut, 0) at
/// the current cut and to `new` = (r+1, cut, 0) at cut + 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlipLink {
    pub a: u32,
    pub old: u32,
    pub new: u32,
}

#[derive(Clone, Copy, Debug)]
struct FlipSlot {
    slot: u8,
    old: u32,
    new: u32,
}

const NO_FLIP: u32 = u32::MAX;

/// Precomputed neighbour tables for one geometry.
///
/// Neighbour slot `2μ` holds the +μ neighbour, slot `2μ + 1` the −μ one. When
/// an interpolation level `c` is supplied, the wrap links at column `cut`
/// (see [`FlipLink`]) take weight `1 − c` on their current target and `c` on
/// their cut + 1 target.
#[derive(Clone, Debug)]
pub struct Lattice {
    geom: ReplicaGeometry,
    slots: usize,
    nb: Vec<u32>,
    flips: Vec<FlipLink>,
    flip_of: Vec<u32>,
    flip_slots: Vec<FlipSlot>,
}

impl Lattice {
    pub fn new(geom: &ReplicaGeometry) -> Result<Self> {
        geom.validate()?;
        let n = geom.n_sites();
        let slots = 2 * geom.dim;
        let mut nb = Vec::with_capacity(n * slots);
        for i in 0..n {
            let (r, s) = geom.coords(i);
            for axis in 0..geom.dim {
                for dir in [Direction::plus(axis), Direction::minus(axis)] {
                    let (rr, ss) = geom.neighbor(r, s, dir)?;
                    nb.push(geom.index_unchecked(rr, ss) as u32);
                }
            }
        }
        let mut flips = Vec::new();
        let mut flip_of = vec![NO_FLIP; n];
        let mut flip_slots = Vec::new();
        if geom.cut < geom.extent_x {
            let t_last = geom.extent_t - 1;
            let nr = geom.n_replicas;
            for r in 0..nr {
                for y in 0..geom.extent_y {
                    let a = geom.index_unchecked(r, Site::new_3d(t_last, geom.cut, y)) as u32;
                    let old = geom.index_unchecked(r, Site::new_3d(0, geom.cut, y)) as u32;
                    let new = geom.index_unchecked((r + 1) % nr, Site::new_3d(0, geom.cut, y)) as u32;
                    flips.push(FlipLink { a, old, new });
                    // `a` looks forward in τ, `old` looks backward to its own replica's a.
                    let prev = geom.index_unchecked((r + nr - 1) % nr, Site::new_3d(t_last, geom.cut, y)) as u32;
                    flip_of[a as usize] = flip_slots.len() as u32;
                    flip_slots.push(FlipSlot { slot: 0, old, new });
                    flip_of[old as usize] = flip_slots.len() as u32;
                    flip_slots.push(FlipSlot { slot: 1, old: a, new: prev });
                }
            }
        }
        Ok(Lattice { geom: geom.clone(), slots, nb, flips, flip_of, flip_slots })
    }

    pub fn geometry(&self) -> &ReplicaGeometry {
        &self.geom
    }

    pub fn n_sites(&self) -> usize {
        self.geom.n_sites()
    }

    /// Links whose replica target changes between this cut and cut + 1.
    pub fn flip_links(&self) -> &[FlipLink] {
        &self.flips
    }

    pub fn neighbors(&self, index: usize) -> &[u32] {
        &self.nb[index * self.slots..(index + 1) * self.slots]
    }

    pub(crate) fn check_field(&self, field: &FieldConfig) -> Result<()> {
        if field.len() != self.n_sites() {
            return Err(Error::ShapeMismatch { expected: self.n_sites(), got: field.len() });
        }
        Ok(())
    }

    pub(crate) fn check_level(&self, level: Option<f64>) -> Result<()> {
        if let Some(c) = level {
            if !(0.0..=1.0).contains(&c) {
                return Err(invalid(format!("interpolation level {c} outside [0, 1]")));
            }
            if self.geom.cut >= self.geom.extent_x {
                return Err(invalid("interpolation requires cut < L_x"));
            }
        }
        Ok(())
    }

    /// Sum of neighbour values of site `i`, the `b` of the local conditional.
    #[inline]
    pub fn neighbor_sum(&self, phi: &[f64], i: usize, level: Option<f64>) -> f64 {
        let nb = &self.nb[i * self.slots..(i + 1) * self.slots];
        if let Some(c) = level {
            let f = self.flip_of[i];
            if f != NO_FLIP {
                let fs = self.flip_slots[f as usize];
                let mut b = 0.0;
                for (k, &j) in nb.iter().enumerate() {
                    if k != fs.slot as usize {
                        b += phi[j as usize];
                    }
                }
                return b + (1.0 - c) * phi[fs.old as usize] + c * phi[fs.new as usize];
            }
        }
        nb.iter().map(|&j| phi[j as usize]).sum()
    }

    /// S at the lattice's own cut (`level = None`) or interpolated towards
    /// cut + 1 (`level = Some(c)`).
    pub fn action_at(&self, field: &FieldConfig, params: &ActionParams, level: Option<f64>) -> Result<f64> {
        self.check_field(field)?;
        self.check_level(level)?;
        Ok(self.action_unchecked(field.values(), params, level))
    }

    pub(crate) fn action_unchecked(&self, phi: &[f64], params: &ActionParams, level: Option<f64>) -> f64 {
        let mut onsite = 0.0;
        let mut hop = 0.0;
        for (i, &p) in phi.iter().enumerate() {
            onsite += params.onsite(p);
            let nb = &self.nb[i * self.slots..(i + 1) * self.slots];
            let mut fwd = 0.0;
            let mixed = match level {
                Some(c) if self.flip_of[i] != NO_FLIP => {
                    let fs = self.flip_slots[self.flip_of[i] as usize];
                    (fs.slot == 0).then_some((c, fs))
                }
                _ => None,
            };
            for axis in 0..self.geom.dim {
                let j = nb[2 * axis] as usize;
                if axis == TAU {
                    if let Some((c, fs)) = mixed {
                        fwd += (1.0 - c) * phi[fs.old as usize] + c * phi[fs.new as usize];
                        continue;
                    }
                }
                fwd += phi[j];
            }
            hop += p * fwd;
        }
        onsite - 2.0 * params.kappa * hop
    }

    /// Change of the action when site `i` takes `new_value`.
    pub fn local_action_delta(
        &self,
        field: &FieldConfig,
        params: &ActionParams,
        level: Option<f64>,
        index: usize,
        new_value: f64,
    ) -> Result<f64> {
        self.check_field(field)?;
        self.check_level(level)?;
        if index >= self.n_sites() {
            return Err(invalid(format!("site index {index} out of range")));
        }
        let phi = field.values();
        let b = self.neighbor_sum(phi, index, level);
        Ok(site_delta(params, b, phi[index], new_value))
    }

    /// S_{c_to}(φ) − S_{c_from}(φ): only the flip links contribute.
    pub fn protocol_jump(&self, phi: &[f64], params: &ActionParams, c_from: f64, c_to: f64) -> f64 {
        let mut acc = 0.0;
        for f in &self.flips {
            acc += phi[f.a as usize] * (phi[f.new as usize] - phi[f.old as usize]);
        }
        -2.0 * params.kappa * (c_to - c_from) * acc
    }
}

#[inline]
pub(crate) fn site_delta(params: &ActionParams, b: f64, old: f64, new: f64) -> f64 {
    params.onsite(new) - params.onsite(old) - 2.0 * params.kappa * b * (new - old)
}

/// S[φ] at the geometry's own cut.
pub fn action(field: &FieldConfig, params: &ActionParams, geom: &ReplicaGeometry) -> Result<f64> {
    Lattice::new(geom)?.action_at(field, params, None)
}

/// S_c[φ] interpolating the wrap links at column `cut` between cut and cut + 1.
pub fn interpolated_action(
    field: &FieldConfig,
    params: &ActionParams,
    geom: &ReplicaGeometry,
    c: f64,
) -> Result<f64> {
    Lattice::new(geom)?.action_at(field, params, Some(c))
}
