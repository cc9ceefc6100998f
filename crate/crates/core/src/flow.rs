//! Defect coupling layers and their composition.
//!
//! A coupling layer rewrites the patch of one replica around the cut endpoint,
//! conditioned on the matching patch of the other replicas:
//! `φ' = exp(−|s(φ_frozen)|)·φ + t(φ_frozen)` with `log J = −Σ|s|`.
//! Everything outside the patch is left untouched, so all the work happens on
//! a small [`DefectWindow`]: the patch slots of every replica plus the ring of
//! sites coupled to them.

use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lattice::{ActionParams, FieldConfig, Lattice, ReplicaGeometry, Site, TAU};
use crate::nnet::{GradientTape, NetSpec, OddNet};
use crate::rng::derive_seed;

/// Patch extent: `height` rows in τ straddling the temporal boundary and
/// `width` columns in x centred on the cut. In D = 3 the patch spans all y.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub height: usize,
    pub width: usize,
}

impl PatchSpec {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid("patch extents must be positive"));
        }
        Ok(PatchSpec { height, width })
    }

    /// Slots per replica, counting clipped columns.
    pub fn slots(&self, extent_y: usize) -> usize {
        self.height * self.width * extent_y
    }

    fn check(&self, geom: &ReplicaGeometry) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(invalid("patch extents must be positive"));
        }
        if self.height > geom.extent_t || self.width > geom.extent_x {
            return Err(invalid(format!(
                "patch {}x{} larger than the {}x{} lattice",
                self.height, self.width, geom.extent_t, geom.extent_x
            )));
        }
        Ok(())
    }

    /// τ rows: `height / 2` rows end at T − 1, the rest start at 0.
    pub fn rows(&self, extent_t: usize) -> Vec<usize> {
        (0..self.height).map(|a| (extent_t - self.height / 2 + a) % extent_t).collect()
    }

    /// x columns centred on `cut`; columns outside `[0, L_x)` are `None`.
    pub fn columns(&self, extent_x: usize, cut: usize) -> Vec<Option<usize>> {
        let first = cut as isize - ((self.width - 1) / 2) as isize;
        (0..self.width)
            .map(|b| {
                let x = first + b as isize;
                (0..extent_x as isize).contains(&x).then_some(x as usize)
            })
            .collect()
    }

    /// Site index of every slot of `replica`, ordered `(row, column, y)`.
    fn slot_sites(&self, geom: &ReplicaGeometry, replica: usize) -> Vec<Option<u32>> {
        let rows = self.rows(geom.extent_t);
        let cols = self.columns(geom.extent_x, geom.cut);
        let mut out = Vec::with_capacity(self.slots(geom.extent_y));
        for &tau in &rows {
            for col in &cols {
                for y in 0..geom.extent_y {
                    out.push(col.map(|x| geom.index_unchecked(replica, Site::new_3d(tau, x, y)) as u32));
                }
            }
        }
        out
    }
}

/// Active and frozen sites of one coupling layer, slot-aligned. Clipped slots
/// are `None`. For n > 2 the frozen list concatenates the other replicas in
/// cyclic order starting after `replica`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DefectMask {
    pub replica: usize,
    pub active: Vec<Option<u32>>,
    pub frozen: Vec<Option<u32>>,
}

impl DefectMask {
    pub fn active_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.active.iter().flatten().map(|&i| i as usize)
    }

    pub fn frozen_sites(&self) -> impl Iterator<Item = usize> + '_ {
        self.frozen.iter().flatten().map(|&i| i as usize)
    }
}

/// One mask per replica for the patch around the geometry's cut.
pub fn build_masks(geom: &ReplicaGeometry, patch: &PatchSpec) -> Result<Vec<DefectMask>> {
    geom.validate()?;
    patch.check(geom)?;
    let n = geom.n_replicas;
    let per: Vec<_> = (0..n).map(|r| patch.slot_sites(geom, r)).collect();
    Ok((0..n)
        .map(|k| DefectMask {
            replica: k,
            active: per[k].clone(),
            frozen: (1..n).flat_map(|o| per[(k + o) % n].iter().copied()).collect(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LinkWeight {
    Full,
    /// Flip link on its current target, weight 1 − c.
    Old,
    /// Flip link on its cut + 1 target, weight c.
    New,
}

#[derive(Clone, Copy, Debug)]
struct WindowLink {
    a: u32,
    b: u32,
    weight: LinkWeight,
}

/// The patch of every replica plus its coupled ring, with the part of the
/// action that depends on patch values.
///
/// Window vectors hold `n_replicas · slots` patch entries (replica-major,
/// clipped slots pinned to zero) followed by the ring sites.
#[derive(Clone, Debug)]
pub struct DefectWindow {
    geom: ReplicaGeometry,
    patch: PatchSpec,
    slots: usize,
    valid: Vec<bool>,
    sites: Vec<u32>,
    onsite: Vec<u32>,
    links: Vec<WindowLink>,
}

const CLIPPED: u32 = u32::MAX;

impl DefectWindow {
    pub fn new(lattice: &Lattice, patch: PatchSpec) -> Result<Self> {
        let geom = lattice.geometry().clone();
        if geom.cut >= geom.extent_x {
            return Err(invalid("a defect window needs cut < L_x"));
        }
        patch.check(&geom)?;
        let slots = patch.slots(geom.extent_y);
        let n = geom.n_replicas;
        let mut sites = Vec::with_capacity(n * slots);
        let mut pos = HashMap::new();
        for r in 0..n {
            for s in patch.slot_sites(&geom, r) {
                match s {
                    Some(i) => {
                        pos.insert(i, sites.len() as u32);
                        sites.push(i);
                    }
                    None => sites.push(CLIPPED),
                }
            }
        }
        let valid = sites[..slots].iter().map(|&i| i != CLIPPED).collect();
        let onsite = (0..sites.len() as u32).filter(|&k| sites[k as usize] != CLIPPED).collect();
        let n_patch = sites.len();

        let flips: HashMap<u32, (u32, u32)> = lattice.flip_links().iter().map(|f| (f.a, (f.old, f.new))).collect();
        let mut links = Vec::new();
        let mut push = |a: u32, b: u32, weight, sites: &mut Vec<u32>, pos: &mut HashMap<u32, u32>| {
            let in_patch = |i: &u32| pos.get(i).is_some_and(|&k| (k as usize) < n_patch);
            if !in_patch(&a) && !in_patch(&b) {
                return;
            }
            let mut at = |i: u32| {
                *pos.entry(i).or_insert_with(|| {
                    sites.push(i);
                    (sites.len() - 1) as u32
                })
            };
            let (a, b) = (at(a), at(b));
            links.push(WindowLink { a, b, weight });
        };
        for i in 0..lattice.n_sites() {
            let nb = lattice.neighbors(i);
            for axis in 0..geom.dim {
                let j = nb[2 * axis];
                match flips.get(&(i as u32)) {
                    Some(&(old, new)) if axis == TAU => {
                        push(i as u32, old, LinkWeight::Old, &mut sites, &mut pos);
                        push(i as u32, new, LinkWeight::New, &mut sites, &mut pos);
                    }
                    _ => push(i as u32, j, LinkWeight::Full, &mut sites, &mut pos),
                }
            }
        }
        debug_assert!(sites[..n_patch].iter().enumerate().all(|(k, &i)| i == CLIPPED || pos[&i] == k as u32));
        Ok(DefectWindow { geom, patch, slots, valid, sites, onsite, links })
    }

    pub fn geometry(&self) -> &ReplicaGeometry {
        &self.geom
    }

    pub fn patch(&self) -> PatchSpec {
        self.patch
    }

    /// Slots per replica (including clipped ones).
    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn n_patch(&self) -> usize {
        self.slots * self.geom.n_replicas
    }

    /// Whether slot `q` lies inside the lattice (same pattern in every replica).
    pub fn slot_valid(&self, q: usize) -> bool {
        self.valid[q]
    }

    pub fn gather(&self, phi: &[f64]) -> Vec<f64> {
        self.sites.iter().map(|&i| if i == CLIPPED { 0.0 } else { phi[i as usize] }).collect()
    }

    /// Writes the patch entries of `v` back into `phi`.
    pub fn scatter(&self, v: &[f64], phi: &mut [f64]) {
        for (k, &i) in self.sites[..self.n_patch()].iter().enumerate() {
            if i != CLIPPED {
                phi[i as usize] = v[k];
            }
        }
    }

    /// Patch-dependent part of S_c: on-site terms of the patch and every link
    /// touching it.
    pub fn local_action(&self, v: &[f64], params: &ActionParams, c: f64) -> f64 {
        let onsite: f64 = self.onsite.iter().map(|&k| params.onsite(v[k as usize])).sum();
        let (mut full, mut old, mut new) = (0.0, 0.0, 0.0);
        for l in &self.links {
            let p = v[l.a as usize] * v[l.b as usize];
            match l.weight {
                LinkWeight::Full => full += p,
                LinkWeight::Old => old += p,
                LinkWeight::New => new += p,
            }
        }
        onsite - 2.0 * params.kappa * (full + (1.0 - c) * old + c * new)
    }

    /// Adds ∂(local_action)/∂v to `grad`.
    pub fn local_action_grad(&self, v: &[f64], params: &ActionParams, c: f64, grad: &mut [f64]) {
        let (m, lam) = (params.mass_term(), params.lambda);
        for &k in &self.onsite {
            let x = v[k as usize];
            grad[k as usize] += 2.0 * m * x + 4.0 * lam * x * x * x;
        }
        for l in &self.links {
            let w = match l.weight {
                LinkWeight::Full => 1.0,
                LinkWeight::Old => 1.0 - c,
                LinkWeight::New => c,
            };
            let k2 = -2.0 * params.kappa * w;
            grad[l.a as usize] += k2 * v[l.b as usize];
            grad[l.b as usize] += k2 * v[l.a as usize];
        }
    }
}

/// Network family for the s, t producers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetKind {
    Dense { hidden: Vec<usize> },
    Conv { hidden: Vec<usize> },
}

impl NetKind {
    /// Linear map from frozen patch to (s, t).
    pub fn fcnn() -> Self {
        NetKind::Dense { hidden: vec![] }
    }

    /// Three hidden conv layers with eight kernels each.
    pub fn cnn() -> Self {
        NetKind::Conv { hidden: vec![8, 8, 8] }
    }

    fn net_spec(&self, patch: &PatchSpec, n_replicas: usize, extent_y: usize) -> NetSpec {
        let p = patch.slots(extent_y);
        match self {
            NetKind::Dense { hidden } => NetSpec::Dense { n_in: (n_replicas - 1) * p, n_out: p, hidden: hidden.clone() },
            NetKind::Conv { hidden } => {
                NetSpec::conv([patch.height, patch.width, extent_y], n_replicas - 1, hidden.clone())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub patch: PatchSpec,
    pub net: NetKind,
    pub n_blocks: usize,
}

/// One layer: which replica it transforms and its network.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer {
    pub replica: usize,
    pub net: OddNet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowDirection {
    Forward,
    Inverse,
}

/// Ordered blocks of coupling layers; block `b` holds layers
/// `b·n .. (b+1)·n`, one per replica in replica order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    spec: FlowSpec,
    dim: usize,
    n_replicas: usize,
    extent_y: usize,
    layers: Vec<CouplingLayer>,
}

/// Cached values of one layer for the reverse pass.
struct LayerTrace {
    active: Vec<f64>,
    heads: Vec<f64>,
    tape: GradientTape,
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl FlowModel {
    /// Fresh model; every final layer is zero so the flow is the identity.
    pub fn new(spec: FlowSpec, geom: &ReplicaGeometry, seed: u64) -> Result<Self> {
        geom.validate()?;
        spec.patch.check(geom)?;
        let n = geom.n_replicas;
        let net_spec = spec.net.net_spec(&spec.patch, n, geom.extent_y);
        let mut layers = Vec::with_capacity(spec.n_blocks * n);
        for k in 0..spec.n_blocks * n {
            layers.push(CouplingLayer { replica: k % n, net: OddNet::init(net_spec.clone(), derive_seed(seed, k as u64))? });
        }
        Ok(FlowModel { spec, dim: geom.dim, n_replicas: n, extent_y: geom.extent_y, layers })
    }

    /// Rebuilds a model from its spec and flat parameters.
    pub fn from_params(spec: FlowSpec, dim: usize, n_replicas: usize, extent_y: usize, params: &[f64]) -> Result<Self> {
        if n_replicas < 2 || spec.patch.height == 0 || spec.patch.width == 0 {
            return Err(invalid("flow needs two replicas and a non-empty patch"));
        }
        let net_spec = spec.net.net_spec(&spec.patch, n_replicas, extent_y);
        let per = net_spec.n_params();
        let n_layers = spec.n_blocks * n_replicas;
        if params.len() != per * n_layers {
            return Err(Error::ShapeMismatch { expected: per * n_layers, got: params.len() });
        }
        let layers = (0..n_layers)
            .map(|k| {
                let net = OddNet::from_params(net_spec.clone(), params[k * per..(k + 1) * per].to_vec())?;
                Ok(CouplingLayer { replica: k % n_replicas, net })
            })
            .collect::<Result<_>>()?;
        Ok(FlowModel { spec, dim, n_replicas, extent_y, layers })
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_replicas(&self) -> usize {
        self.n_replicas
    }

    pub fn extent_y(&self) -> usize {
        self.extent_y
    }

    pub fn layers(&self) -> &[CouplingLayer] {
        &self.layers
    }

    pub fn n_blocks(&self) -> usize {
        self.spec.n_blocks
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.net.params().len()).sum()
    }

    /// All weights, layer after layer.
    pub fn params(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.net.params().iter().copied()).collect()
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(Error::ShapeMismatch { expected: self.n_params(), got: params.len() });
        }
        let mut at = 0;
        for l in &mut self.layers {
            let n = l.net.params().len();
            l.net.params_mut().copy_from_slice(&params[at..at + n]);
            at += n;
        }
        Ok(())
    }

    /// Offsets of each layer's weights in the flat vector.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut at = 0;
        self.layers
            .iter()
            .map(|l| {
                let r = at..at + l.net.params().len();
                at = r.end;
                r
            })
            .collect()
    }

    /// Flat-vector range of block `b`.
    pub fn block_range(&self, b: usize) -> Range<usize> {
        let r = self.layer_ranges();
        r[b * self.n_replicas].start..r[(b + 1) * self.n_replicas - 1].end
    }

    /// Layers of block range `blocks`.
    pub fn block_layers(&self, blocks: Range<usize>) -> Range<usize> {
        blocks.start * self.n_replicas..blocks.end * self.n_replicas
    }

    /// Checks the model can act on `geom` without rebinding.
    pub fn check_geometry(&self, geom: &ReplicaGeometry) -> Result<()> {
        if geom.dim != self.dim || geom.n_replicas != self.n_replicas {
            return Err(Error::Incompatible(format!(
                "model is for D = {}, n = {}; geometry has D = {}, n = {}",
                self.dim, self.n_replicas, geom.dim, geom.n_replicas
            )));
        }
        if geom.extent_y != self.extent_y {
            return Err(Error::Incompatible(format!(
                "model patch spans L_y = {}, geometry has L_y = {}",
                self.extent_y, geom.extent_y
            )));
        }
        self.spec.patch.check(geom)
    }

    /// Same weights acting on another geometry. Conv nets rebind their
    /// transverse extent; dense nets only transfer when the input size is
    /// unchanged.
    pub fn rebind(&self, geom: &ReplicaGeometry) -> Result<Self> {
        if geom.dim != self.dim || geom.n_replicas != self.n_replicas {
            return self.check_geometry(geom).map(|_| self.clone());
        }
        self.spec.patch.check(geom)?;
        if geom.extent_y == self.extent_y {
            return Ok(self.clone());
        }
        if let NetKind::Dense { .. } = self.spec.net {
            return Err(Error::Incompatible(format!(
                "dense input size is fixed by L_y = {}; cannot transfer to L_y = {}",
                self.extent_y, geom.extent_y
            )));
        }
        let spec = self.spec.net.net_spec(&self.spec.patch, self.n_replicas, geom.extent_y);
        let layers = self
            .layers
            .iter()
            .map(|l| Ok(CouplingLayer { replica: l.replica, net: OddNet::from_params(spec.clone(), l.net.params().to_vec())? }))
            .collect::<Result<_>>()?;
        Ok(FlowModel { spec: self.spec.clone(), dim: self.dim, n_replicas: self.n_replicas, extent_y: geom.extent_y, layers })
    }

    fn check_window(&self, window: &DefectWindow) -> Result<()> {
        self.check_geometry(window.geometry())?;
        if window.patch() != self.spec.patch {
            return Err(Error::Incompatible("window patch differs from the model patch".into()));
        }
        Ok(())
    }

    fn frozen_input(&self, replica: usize, slots: usize, v: &[f64]) -> Vec<f64> {
        let n = self.n_replicas;
        let mut x = Vec::with_capacity((n - 1) * slots);
        for o in 1..n {
            let r = (replica + o) % n;
            x.extend_from_slice(&v[r * slots..(r + 1) * slots]);
        }
        x
    }

    fn layer_window(
        &self,
        k: usize,
        window: &DefectWindow,
        v: &mut [f64],
        dir: FlowDirection,
        keep: bool,
    ) -> Result<(f64, Option<LayerTrace>)> {
        let layer = &self.layers[k];
        let p = window.slots();
        let x = self.frozen_input(layer.replica, p, v);
        let (heads, tape) = layer.net.forward(&x)?;
        let base = layer.replica * p;
        let active = if keep { v[base..base + p].to_vec() } else { Vec::new() };
        let mut log_j = 0.0;
        for q in 0..p {
            if !window.slot_valid(q) {
                continue;
            }
            let (s, t) = (heads[q], heads[p + q]);
            let a = &mut v[base + q];
            match dir {
                FlowDirection::Forward => {
                    *a = (-s.abs()).exp() * *a + t;
                    log_j -= s.abs();
                }
                FlowDirection::Inverse => {
                    *a = (*a - t) * s.abs().exp();
                    log_j += s.abs();
                }
            }
        }
        Ok((log_j, keep.then_some(LayerTrace { active, heads, tape })))
    }

    /// Applies layers `layers` (or their inverses, in reverse order) to a
    /// window vector and returns the summed log-Jacobian.
    pub fn apply_window(&self, layers: Range<usize>, window: &DefectWindow, v: &mut [f64], dir: FlowDirection) -> Result<f64> {
        self.check_window(window)?;
        let mut log_j = 0.0;
        let order: Vec<usize> = match dir {
            FlowDirection::Forward => layers.collect(),
            FlowDirection::Inverse => layers.rev().collect(),
        };
        for k in order {
            log_j += self.layer_window(k, window, v, dir, false)?.0;
        }
        Ok(log_j)
    }

    /// Forward pass over `layers` followed by the reverse pass of
    /// `L = S_c(v_out) − S_c(v_in) − log J` with patch-local actions.
    /// Weight gradients are added to `grad` (full flat layout); returns
    /// `(S_c(v_out) − S_c(v_in), log J)` and leaves `v` transformed.
    pub(crate) fn stage_grad(
        &self,
        layers: Range<usize>,
        window: &DefectWindow,
        params: &ActionParams,
        c: f64,
        v: &mut [f64],
        grad: &mut [f64],
    ) -> Result<(f64, f64)> {
        let before = window.local_action(v, params, c);
        let mut log_j = 0.0;
        let mut traces = Vec::with_capacity(layers.len());
        for k in layers.clone() {
            let (lj, tr) = self.layer_window(k, window, v, FlowDirection::Forward, true)?;
            log_j += lj;
            traces.push(tr.expect("trace requested"));
        }
        let delta = window.local_action(v, params, c) - before;
        let mut g = vec![0.0; v.len()];
        window.local_action_grad(v, params, c, &mut g);
        let ranges = self.layer_ranges();
        let p = window.slots();
        let n = self.n_replicas;
        for (k, tr) in layers.zip(traces).rev() {
            let layer = &self.layers[k];
            let base = layer.replica * p;
            let mut cot = vec![0.0; 2 * p];
            for q in 0..p {
                if !window.slot_valid(q) {
                    continue;
                }
                let (s, a, ga) = (tr.heads[q], tr.active[q], g[base + q]);
                let e = (-s.abs()).exp();
                // d/ds of  ga·(e^{−|s|}a + t) + |s|, with d|s|/ds = 0 at s = 0.
                cot[q] = sign0(s) * (1.0 - ga * a * e);
                cot[p + q] = ga;
                g[base + q] = ga * e;
            }
            let (gw, gx) = layer.net.backward(&tr.tape, &cot)?;
            for (dst, src) in grad[ranges[k].clone()].iter_mut().zip(&gw) {
                *dst += src;
            }
            for o in 1..n {
                let r = (layer.replica + o) % n;
                for q in 0..p {
                    if window.slot_valid(q) {
                        g[r * p + q] += gx[(o - 1) * p + q];
                    }
                }
            }
        }
        Ok((delta, log_j))
    }

    /// Work contribution of `layers` applied to `phi` at action level `c`:
    /// returns `(S_c(after) − S_c(before), log J)` and updates `phi`.
    pub(crate) fn stage_apply(
        &self,
        layers: Range<usize>,
        window: &DefectWindow,
        params: &ActionParams,
        c: f64,
        phi: &mut [f64],
    ) -> Result<(f64, f64)> {
        if layers.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut v = window.gather(phi);
        let before = window.local_action(&v, params, c);
        let log_j = self.apply_window(layers, window, &mut v, FlowDirection::Forward)?;
        let delta = window.local_action(&v, params, c) - before;
        window.scatter(&v, phi);
        Ok((delta, log_j))
    }
}

/// Applies coupling layer `k` of `model` to a full configuration.
pub fn layer_apply(
    model: &FlowModel,
    k: usize,
    window: &DefectWindow,
    field: &FieldConfig,
    dir: FlowDirection,
) -> Result<(FieldConfig, f64)> {
    if k >= model.layers.len() {
        return Err(invalid(format!("layer {k} out of range")));
    }
    flow_range(model, k..k + 1, window, field, dir)
}

/// Applies the whole flow (forward, or inverse with layers reversed).
pub fn flow_apply(model: &FlowModel, window: &DefectWindow, field: &FieldConfig, dir: FlowDirection) -> Result<(FieldConfig, f64)> {
    flow_range(model, 0..model.layers.len(), window, field, dir)
}

fn flow_range(
    model: &FlowModel,
    layers: Range<usize>,
    window: &DefectWindow,
    field: &FieldConfig,
    dir: FlowDirection,
) -> Result<(FieldConfig, f64)> {
    if field.len() != window.geometry().n_sites() {
        return Err(Error::ShapeMismatch { expected: window.geometry().n_sites(), got: field.len() });
    }
    let mut v = window.gather(field.values());
    let log_j = model.apply_window(layers, window, &mut v, dir)?;
    let mut out = field.clone();
    window.scatter(&v, out.values_mut());
    if !out.is_finite() {
        return Err(Error::Numerical("flow produced a non-finite field".into()));
    }
    Ok((out, log_j))
}

/// Generalised work of the flow from cut l to cut l + 1:
/// `W = S_{l+1}(g(φ₀)) − S_l(φ₀) − log J`, booked as the protocol jump on
/// `φ₀` plus the patch-local action change at the target level.
pub(crate) fn nf_work(model: &FlowModel, window: &DefectWindow, lattice: &Lattice, params: &ActionParams, phi: &mut [f64]) -> Result<(f64, f64)> {
    let jump = lattice.protocol_jump(phi, params, 0.0, 1.0);
    let (delta, log_j) = model.stage_apply(0..model.layers.len(), window, params, 1.0, phi)?;
    let mut work = 0.0;
    work += jump;
    work += delta - log_j;
    Ok((work, log_j))
}

/// Transforms a cut-l prior sample and returns it with `log w̃ = −W`;
/// `⟨w̃⟩` estimates `Z_{l+1}/Z_l`.
pub fn nf_weight(
    model: &FlowModel,
    window: &DefectWindow,
    lattice: &Lattice,
    params: &ActionParams,
    field: &FieldConfig,
) -> Result<(FieldConfig, f64)> {
    lattice.check_field(field)?;
    model.check_window(window)?;
    if lattice.geometry() != window.geometry() {
        return Err(Error::Incompatible("window and lattice geometries differ".into()));
    }
    let mut out = field.clone();
    let (work, _) = nf_work(model, window, lattice, params, out.values_mut())?;
    if !work.is_finite() || !out.is_finite() {
        return Err(Error::Numerical("non-finite flow weight".into()));
    }
    Ok((out, -work))
}
