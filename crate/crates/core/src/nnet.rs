//! Small odd networks with hand-written reverse passes.
//!
//! Both architectures use tanh hidden activations, no biases and a linear
//! output layer, so `net(−x) = −net(x)` holds exactly. Outputs are laid out as
//! `[s; t]`, each of length `n_out`. Parameters live in one flat vector so the
//! optimizer and the checkpoint code can treat every net alike.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::rng_from_seed;

/// Architecture of one coupling-layer network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NetSpec {
    /// Fully connected: `n_in → hidden… → 2·n_out`.
    Dense { n_in: usize, n_out: usize, hidden: Vec<usize> },
    /// Convolutional over a `shape = [rows, cols, depth]` grid with
    /// `in_channels` inputs and two output channels (s and t).
    Conv { shape: [usize; 3], kernel: [usize; 3], in_channels: usize, hidden: Vec<usize> },
}

impl NetSpec {
    /// Conv spec with 3×3 kernels in two dimensions or 3×3×3 when `depth > 1`.
    pub fn conv(shape: [usize; 3], in_channels: usize, hidden: Vec<usize>) -> Self {
        let kernel = if shape[2] > 1 { [3, 3, 3] } else { [3, 3, 1] };
        NetSpec::Conv { shape, kernel, in_channels, hidden }
    }

    pub fn input_len(&self) -> usize {
        match self {
            NetSpec::Dense { n_in, .. } => *n_in,
            NetSpec::Conv { shape, in_channels, .. } => in_channels * shape.iter().product::<usize>(),
        }
    }

    /// Length of each of the s and t heads.
    pub fn head_len(&self) -> usize {
        match self {
            NetSpec::Dense { n_out, .. } => *n_out,
            NetSpec::Conv { shape, .. } => shape.iter().product(),
        }
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let (first, last, hidden) = match self {
            NetSpec::Dense { n_in, n_out, hidden } => (*n_in, 2 * n_out, hidden),
            NetSpec::Conv { in_channels, hidden, .. } => (*in_channels, 2, hidden),
        };
        let mut widths = vec![first];
        widths.extend(hidden.iter().copied());
        widths.push(last);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    fn taps(&self) -> usize {
        match self {
            NetSpec::Dense { .. } => 1,
            NetSpec::Conv { kernel, .. } => kernel.iter().product(),
        }
    }

    /// Number of trainable weights.
    pub fn n_params(&self) -> usize {
        let taps = self.taps();
        self.layer_dims().iter().map(|(i, o)| i * o * taps).sum()
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NetSpec::Dense { n_in, n_out, hidden } => {
                if *n_in == 0 || *n_out == 0 || hidden.contains(&0) {
                    return Err(invalid("dense layer widths must be positive"));
                }
            }
            NetSpec::Conv { shape, kernel, in_channels, hidden } => {
                if shape.contains(&0) || *in_channels == 0 || hidden.contains(&0) {
                    return Err(invalid("conv shape and channel counts must be positive"));
                }
                if kernel.iter().any(|k| k % 2 == 0) {
                    return Err(invalid("conv kernels must have odd extent"));
                }
            }
        }
        Ok(())
    }
}

/// Odd network: a spec plus its flat weight vector.
///
/// Dense layer `k` stores an `out × in` matrix row-major. Conv layer `k`
/// stores `[out][in][kr][kc][kd]`. Layers follow each other in order.
#[derive(Clone, Debug, PartialEq)]
pub struct OddNet {
    spec: NetSpec,
    params: Vec<f64>,
}

/// Activations cached by [`OddNet::forward`] for the reverse pass.
#[derive(Clone, Debug, Default)]
pub struct GradientTape {
    /// Input of each layer; entries past the first are tanh outputs.
    inputs: Vec<Vec<f64>>,
    n_params: usize,
}

impl OddNet {
    /// Hidden weights uniform in ±1/√fan_in, final layer zero.
    pub fn init(spec: NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let taps = spec.taps();
        let dims = spec.layer_dims();
        let mut params = Vec::with_capacity(spec.n_params());
        for (k, &(i, o)) in dims.iter().enumerate() {
            let n = i * o * taps;
            if k + 1 == dims.len() {
                params.extend(std::iter::repeat_n(0.0, n));
            } else {
                let bound = 1.0 / ((i * taps) as f64).sqrt();
                params.extend((0..n).map(|_| rng.random_range(-bound..bound)));
            }
        }
        Ok(OddNet { spec, params })
    }

    pub fn from_params(spec: NetSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.n_params() {
            return Err(Error::ShapeMismatch { expected: spec.n_params(), got: params.len() });
        }
        Ok(OddNet { spec, params })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Returns `[s; t]` and the tape for [`OddNet::backward`].
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, GradientTape)> {
        if input.len() != self.spec.input_len() {
            return Err(Error::ShapeMismatch { expected: self.spec.input_len(), got: input.len() });
        }
        let dims = self.spec.layer_dims();
        let mut tape = GradientTape { inputs: Vec::with_capacity(dims.len()), n_params: self.params.len() };
        let mut h = input.to_vec();
        let mut offset = 0;
        for (k, &(i, o)) in dims.iter().enumerate() {
            let w = &self.params[offset..offset + i * o * self.spec.taps()];
            offset += w.len();
            let mut z = self.layer(w, i, o, &h);
            if k + 1 < dims.len() {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            tape.inputs.push(std::mem::replace(&mut h, z));
        }
        Ok((h, tape))
    }

    /// Forward pass without a tape.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward(input).map(|(out, _)| out)
    }

    /// Gradients of `⟨cotangent, net(x)⟩` with respect to the weights and to `x`.
    pub fn backward(&self, tape: &GradientTape, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let dims = self.spec.layer_dims();
        if tape.inputs.len() != dims.len() || tape.n_params != self.params.len() {
            return Err(invalid("gradient tape does not belong to this network"));
        }
        let out_len = 2 * self.spec.head_len();
        if cotangent.len() != out_len {
            return Err(Error::ShapeMismatch { expected: out_len, got: cotangent.len() });
        }
        let taps = self.spec.taps();
        let mut grad = vec![0.0; self.params.len()];
        let mut g = cotangent.to_vec();
        let mut offset = self.params.len();
        for (k, &(i, o)) in dims.iter().enumerate().rev() {
            let n = i * o * taps;
            offset -= n;
            let w = &self.params[offset..offset + n];
            let x = &tape.inputs[k];
            let gx = self.layer_backward(w, i, o, x, &g, &mut grad[offset..offset + n]);
            g = if k > 0 {
                // x = tanh(z) for every layer input past the first.
                gx.iter().zip(x).map(|(g, h)| g * (1.0 - h * h)).collect()
            } else {
                gx
            };
        }
        Ok((grad, g))
    }

    fn layer(&self, w: &[f64], i: usize, o: usize, x: &[f64]) -> Vec<f64> {
        match &self.spec {
            NetSpec::Dense { .. } => (0..o).map(|r| dot(&w[r * i..(r + 1) * i], x)).collect(),
            NetSpec::Conv { shape, kernel, .. } => {
                let grid = Grid::new(*shape, *kernel);
                let mut out = vec![0.0; o * grid.cells];
                grid.conv(w, i, o, x, &mut out);
                out
            }
        }
    }

    fn layer_backward(&self, w: &[f64], i: usize, o: usize, x: &[f64], g: &[f64], gw: &mut [f64]) -> Vec<f64> {
        match &self.spec {
            NetSpec::Dense { .. } => {
                let mut gx = vec![0.0; i];
                for r in 0..o {
                    let gr = g[r];
                    if gr == 0.0 {
                        continue;
                    }
                    let row = &w[r * i..(r + 1) * i];
                    let grow = &mut gw[r * i..(r + 1) * i];
                    for c in 0..i {
                        grow[c] += gr * x[c];
                        gx[c] += gr * row[c];
                    }
                }
                gx
            }
            NetSpec::Conv { shape, kernel, .. } => {
                let grid = Grid::new(*shape, *kernel);
                let mut gx = vec![0.0; i * grid.cells];
                grid.conv_backward(w, i, o, x, g, gw, &mut gx);
                gx
            }
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Zero-padded, stride-1 convolution geometry.
struct Grid {
    shape: [usize; 3],
    kernel: [usize; 3],
    cells: usize,
    taps: usize,
}

impl Grid {
    fn new(shape: [usize; 3], kernel: [usize; 3]) -> Self {
        Grid { shape, kernel, cells: shape.iter().product(), taps: kernel.iter().product() }
    }

    /// Calls `f(cell, tap, source_cell)` for every in-bounds tap.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [nr, nc, nd] = self.shape;
        let [kr, kc, kd] = self.kernel;
        let (hr, hc, hd) = ((kr / 2) as isize, (kc / 2) as isize, (kd / 2) as isize);
        for r in 0..nr {
            for c in 0..nc {
                for d in 0..nd {
                    let cell = (r * nc + c) * nd + d;
                    for a in 0..kr {
                        let sr = r as isize + a as isize - hr;
                        if sr < 0 || sr >= nr as isize {
                            continue;
                        }
                        for b in 0..kc {
                            let sc = c as isize + b as isize - hc;
                            if sc < 0 || sc >= nc as isize {
                                continue;
                            }
                            for e in 0..kd {
                                let sd = d as isize + e as isize - hd;
                                if sd < 0 || sd >= nd as isize {
                                    continue;
                                }
                                let src = (sr as usize * nc + sc as usize) * nd + sd as usize;
                                f(cell, (a * kc + b) * kd + e, src);
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv(&self, w: &[f64], i: usize, o: usize, x: &[f64], out: &mut [f64]) {
        let (cells, taps) = (self.cells, self.taps);
        self.for_each_tap(|cell, tap, src| {
            for co in 0..o {
                let mut acc = 0.0;
                for ci in 0..i {
                    acc += w[(co * i + ci) * taps + tap] * x[ci * cells + src];
                }
                out[co * cells + cell] += acc;
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(&self, w: &[f64], i: usize, o: usize, x: &[f64], g: &[f64], gw: &mut [f64], gx: &mut [f64]) {
        let (cells, taps) = (self.cells, self.taps);
        self.for_each_tap(|cell, tap, src| {
            for co in 0..o {
                let gc = g[co * cells + cell];
                if gc == 0.0 {
                    continue;
                }
                for ci in 0..i {
                    let k = (co * i + ci) * taps + tap;
                    gw[k] += gc * x[ci * cells + src];
                    gx[ci * cells + src] += gc * w[k];
                }
            }
        });
    }
}
