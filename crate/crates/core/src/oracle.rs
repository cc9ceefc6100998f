//! Exact reference values: Gaussian determinants, brute-force quadrature on
//! tiny lattices, and the conformal prediction for the Rényi entropy.

use nalgebra::DMatrix;

use crate::error::{invalid, Error, Result};
use crate::lattice::{ActionParams, Lattice, ReplicaGeometry};

/// Quadratic form M with S = φᵀMφ at λ = 0.
#[derive(Clone, Debug)]
pub struct GaussianForm {
    pub matrix: DMatrix<f64>,
}

impl GaussianForm {
    pub fn new(geom: &ReplicaGeometry, kappa: f64) -> Result<Self> {
        let lat = Lattice::new(geom)?;
        let n = geom.n_sites();
        let mut m = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let nb = lat.neighbors(i);
            for axis in 0..geom.dim {
                let j = nb[2 * axis] as usize;
                m[(i, j)] -= kappa;
                m[(j, i)] -= kappa;
            }
        }
        Ok(GaussianForm { matrix: m })
    }

    pub fn log_det(&self) -> Result<f64> {
        let chol = self.matrix.clone().cholesky().ok_or_else(|| {
            Error::Numerical("coupling matrix is not positive definite (kappa out of stable range)".into())
        })?;
        Ok(2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
    }

    /// ⟨φφᵀ⟩ = (2M)⁻¹.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        let chol = self
            .matrix
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("coupling matrix is not positive definite".into()))?;
        Ok(chol.inverse() * 0.5)
    }
}

/// ln[Z(to)/Z(from)] for the free field, from ½(ln det M_from − ln det M_to).
pub fn gaussian_log_ratio(from: &ReplicaGeometry, to: &ReplicaGeometry, kappa: f64) -> Result<f64> {
    if from.n_sites() != to.n_sites() {
        return Err(invalid("geometries must have the same number of sites"));
    }
    let a = GaussianForm::new(from, kappa)?.log_det()?;
    let b = GaussianForm::new(to, kappa)?.log_det()?;
    Ok(0.5 * (a - b))
}

/// Gauss–Legendre nodes and weights on [−1, 1].
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2, "Gauss-Legendre rule needs at least two nodes");
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

struct Factor {
    vars: Vec<usize>,
    table: Vec<f64>,
}

/// ln ∫ e^{−S} over [−R, R]^N with `nodes` Gauss–Legendre points per site,
/// contracted by variable elimination over the site graph.
pub fn quadrature_log_z(geom: &ReplicaGeometry, params: &ActionParams, nodes: usize, radius: f64) -> Result<f64> {
    params.validate()?;
    let n = geom.n_sites();
    if n > 8 {
        return Err(invalid(format!("quadrature is limited to 8 sites, got {n}")));
    }
    let lat = Lattice::new(geom)?;
    let (gx, gw) = gauss_legendre(nodes);
    let xs: Vec<f64> = gx.iter().map(|x| x * radius).collect();
    let ws: Vec<f64> = gw.iter().map(|w| w * radius).collect();

    let mut factors: Vec<Factor> = (0..n)
        .map(|i| Factor {
            vars: vec![i],
            table: xs.iter().zip(&ws).map(|(&x, &w)| w * (-params.onsite(x)).exp()).collect(),
        })
        .collect();
    // Link multiplicities per unordered pair.
    let mut mult = vec![0u32; n * n];
    for i in 0..n {
        let nb = lat.neighbors(i);
        for axis in 0..geom.dim {
            let j = nb[2 * axis] as usize;
            mult[i.min(j) * n + i.max(j)] += 1;
        }
    }
    for i in 0..n {
        for j in i + 1..n {
            let m = mult[i * n + j];
            if m > 0 {
                let k = 2.0 * params.kappa * m as f64;
                let mut table = Vec::with_capacity(nodes * nodes);
                for &a in &xs {
                    for &b in &xs {
                        table.push((k * a * b).exp());
                    }
                }
                factors.push(Factor { vars: vec![i, j], table });
            }
        }
        if mult[i * n + i] > 0 {
            return Err(invalid("self-links are not supported"));
        }
    }

    let mut log_scale = 0.0;
    let mut remaining: Vec<usize> = (0..n).collect();
    while !remaining.is_empty() {
        // Greedy: eliminate the variable with the smallest neighbourhood.
        let (pos, _) = remaining
            .iter()
            .enumerate()
            .map(|(p, &v)| {
                let mut u: Vec<usize> = factors.iter().filter(|f| f.vars.contains(&v)).flat_map(|f| f.vars.clone()).collect();
                u.sort_unstable();
                u.dedup();
                (p, u.len())
            })
            .min_by_key(|&(_, s)| s)
            .unwrap();
        let v = remaining.remove(pos);
        let (with, without): (Vec<Factor>, Vec<Factor>) = factors.into_iter().partition(|f| f.vars.contains(&v));
        factors = without;
        let mut union: Vec<usize> = with.iter().flat_map(|f| f.vars.iter().copied()).filter(|&u| u != v).collect();
        union.sort_unstable();
        union.dedup();
        let size = nodes.pow(union.len() as u32);
        let mut out = vec![0.0; size];
        let mut assign = vec![0usize; n];
        for (flat, slot) in out.iter_mut().enumerate() {
            let mut rem = flat;
            for &u in union.iter().rev() {
                assign[u] = rem % nodes;
                rem /= nodes;
            }
            let mut acc = 0.0;
            for k in 0..nodes {
                assign[v] = k;
                let mut prod = 1.0;
                for f in &with {
                    let mut idx = 0;
                    for &fv in &f.vars {
                        idx = idx * nodes + assign[fv];
                    }
                    prod *= f.table[idx];
                }
                acc += prod;
            }
            *slot = acc;
        }
        let peak = out.iter().cloned().fold(0.0, f64::max);
        if !(peak > 0.0 && peak.is_finite()) {
            return Err(Error::Numerical("quadrature table under/overflow".into()));
        }
        for o in &mut out {
            *o /= peak;
        }
        log_scale += peak.ln();
        factors.push(Factor { vars: union, table: out });
    }
    let scalar: f64 = factors.iter().map(|f| f.table[0]).product();
    Ok(log_scale + scalar.ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureResult {
    /// ln[Z(cut + 1)/Z(cut)] at the finer resolution.
    pub value: f64,
    /// Same quantity at half the nodes and half the radius.
    pub coarse: f64,
    pub nodes: usize,
    pub radius: f64,
}

impl QuadratureResult {
    pub fn refinement_change(&self) -> f64 {
        (self.value - self.coarse).abs()
    }
}

pub fn default_radius(params: &ActionParams) -> f64 {
    6.0 / (2.0 * params.mass_term()).sqrt()
}

/// ln[Z(cut+1)/Z(cut)] by quadrature, certified by doubling node count and
/// radius together until two successive levels agree to `tol` (at most three
/// doublings from `nodes` and the default radius).
pub fn quadrature_log_ratio(geom: &ReplicaGeometry, params: &ActionParams, nodes: usize, tol: f64) -> Result<QuadratureResult> {
    if geom.cut >= geom.extent_x {
        return Err(invalid("the cut must be below L_x"));
    }
    let next = geom.with_cut(geom.cut + 1)?;
    let ratio = |m: usize, rad: f64| -> Result<f64> {
        Ok(quadrature_log_z(&next, params, m, rad)? - quadrature_log_z(geom, params, m, rad)?)
    };
    let (mut m, mut r) = (nodes, default_radius(params));
    let mut coarse = ratio(m, r)?;
    let mut last_change = f64::INFINITY;
    for _ in 0..3 {
        m *= 2;
        r *= 2.0;
        let value = ratio(m, r)?;
        let res = QuadratureResult { value, coarse, nodes: m, radius: r };
        last_change = res.refinement_change();
        if last_change <= tol {
            return Ok(res);
        }
        coarse = value;
    }
    Err(Error::Numerical(format!(
        "quadrature not converged: last refinement changed the result by {last_change:.3e}"
    )))
}

/// S_n(l) up to its additive constant: (c/6)(1 + 1/n) ln[(L/π) sin(πl/L)].
pub fn cft_entropy(l: f64, extent: f64, n: usize, central_charge: f64) -> f64 {
    let n = n as f64;
    central_charge / 6.0 * (1.0 + 1.0 / n) * ((extent / std::f64::consts::PI) * (std::f64::consts::PI * l / extent).sin()).ln()
}

/// Predicted ln[Z_n(l)/Z_n(l+1)] = (1 − n)[S_n(l) − S_n(l+1)].
pub fn cft_prediction(l: usize, extent: usize, n: usize, central_charge: f64) -> Result<f64> {
    if l == 0 || l + 1 >= extent {
        return Err(invalid(format!("CFT prediction needs 0 < l < l+1 < L, got l = {l}, L = {extent}")));
    }
    if n < 2 {
        return Err(invalid("Renyi index must be at least 2"));
    }
    let (lf, ef) = (l as f64, extent as f64);
    Ok((1.0 - n as f64) * (cft_entropy(lf, ef, n, central_charge) - cft_entropy(lf + 1.0, ef, n, central_charge)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentralChargeFit {
    pub central_charge: f64,
    pub sigma: f64,
    pub chi2_per_dof: f64,
}

/// Weighted least-squares fit of measured ln[Z(l)/Z(l+1)] to the CFT shape;
/// the prediction is linear in c so the fit is closed-form.
pub fn fit_central_charge(points: &[(usize, f64, f64)], extent: usize, n: usize) -> Result<CentralChargeFit> {
    if points.is_empty() {
        return Err(invalid("no points to fit"));
    }
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut shape = Vec::with_capacity(points.len());
    for &(l, y, s) in points {
        if s.is_nan() || s <= 0.0 {
            return Err(invalid("fit points need positive errors"));
        }
        let k = cft_prediction(l, extent, n, 1.0)?;
        sxy += k * y / (s * s);
        sxx += k * k / (s * s);
        shape.push(k);
    }
    let c = sxy / sxx;
    let chi2: f64 = points.iter().zip(&shape).map(|(&(_, y, s), &k)| ((y - c * k) / s).powi(2)).sum();
    let dof = (points.len().max(2) - 1) as f64;
    Ok(CentralChargeFit { central_charge: c, sigma: sxx.sqrt().recip(), chi2_per_dof: chi2 / dof })
}

/// C_n(l) of the CFT for |∂A| = 1: l·dS_n/dl = (c/6)(1 + 1/n)·x·cot x with
/// x = πl/L.
pub fn cft_c_function(l_eff: f64, extent: usize, n: usize, central_charge: f64) -> f64 {
    let x = std::f64::consts::PI * l_eff / extent as f64;
    central_charge / 6.0 * (1.0 + 1.0 / n as f64) * x / x.tan()
}

/// Weighted fit of measured (l_eff, C, σ) to [`cft_c_function`] with c free.
pub fn fit_c_function(points: &[(f64, f64, f64)], extent: usize, n: usize) -> Result<CentralChargeFit> {
    if points.is_empty() {
        return Err(invalid("no points to fit"));
    }
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for &(l, y, s) in points {
        if s.is_nan() || s <= 0.0 || l <= 0.0 || l >= extent as f64 {
            return Err(invalid("fit points need positive errors and 0 < l_eff < L"));
        }
        let k = cft_c_function(l, extent, n, 1.0);
        sxy += k * y / (s * s);
        sxx += k * k / (s * s);
    }
    let c = sxy / sxx;
    let chi2: f64 = points.iter().map(|&(l, y, s)| ((y - cft_c_function(l, extent, n, c)) / s).powi(2)).sum();
    let dof = (points.len().max(2) - 1) as f64;
    Ok(CentralChargeFit { central_charge: c, sigma: sxx.sqrt().recip(), chi2_per_dof: chi2 / dof })
}
