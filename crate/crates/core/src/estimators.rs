//! From work records to physics: ESS, log partition-function ratios with
//! errors, entropic c-function points and KL diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::lattice::{BoundaryConvention, ReplicaGeometry};
use crate::protocol::{Method, WorkRecord};

/// Default number of jackknife bins.
pub const JACKKNIFE_BINS: usize = 100;
/// Window-selection parameter S of the automatic windowing procedure.
pub const GAMMA_S: f64 = 1.5;

fn check_works(works: &[f64]) -> Result<f64> {
    if works.is_empty() {
        return Err(invalid("no work values"));
    }
    let mut lo = f64::INFINITY;
    for &w in works {
        if !w.is_finite() {
            return Err(invalid("non-finite work value"));
        }
        lo = lo.min(w);
    }
    Ok(lo)
}

/// ln⟨e^{−w}⟩ computed with a max-shift.
pub fn log_mean_exp_neg(works: &[f64]) -> Result<f64> {
    let lo = check_works(works)?;
    let s: f64 = works.iter().map(|w| (lo - w).exp()).sum();
    Ok(s.ln() - (works.len() as f64).ln() - lo)
}

/// ⟨e^{−w}⟩² / ⟨e^{−2w}⟩, invariant under shifting every w.
pub fn ess(works: &[f64]) -> Result<f64> {
    let lo = check_works(works)?;
    let (mut s1, mut s2) = (0.0, 0.0);
    for &w in works {
        let e = (lo - w).exp();
        s1 += e;
        s2 += e * e;
    }
    Ok(s1 * s1 / (works.len() as f64 * s2))
}

/// Fixed-accuracy cost proxy N·(1/ESS − 1).
pub fn cost_proxy(n: usize, ess: f64) -> f64 {
    n as f64 * (1.0 / ess - 1.0)
}

/// Leave-one-bin-out jackknife of `stat` over `n_bins` contiguous bins.
/// Returns the full-sample estimate and its standard error.
pub fn jackknife(data: &[f64], n_bins: usize, stat: impl Fn(&[f64]) -> f64) -> Result<(f64, f64)> {
    if data.len() < 2 {
        return Err(invalid("jackknife needs at least two values"));
    }
    let nb = n_bins.clamp(2, data.len());
    let full = stat(data);
    let bounds: Vec<usize> = (0..=nb).map(|b| b * data.len() / nb).collect();
    let mut rest = Vec::with_capacity(data.len());
    let mut loo = Vec::with_capacity(nb);
    for b in 0..nb {
        rest.clear();
        rest.extend_from_slice(&data[..bounds[b]]);
        rest.extend_from_slice(&data[bounds[b + 1]..]);
        loo.push(stat(&rest));
    }
    let mean = loo.iter().sum::<f64>() / nb as f64;
    let var = loo.iter().map(|v| (v - mean).powi(2)).sum::<f64>() * (nb - 1) as f64 / nb as f64;
    Ok((full, var.sqrt()))
}

/// Integrated autocorrelation analysis of one series.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TauInt {
    pub mean: f64,
    /// Error of the mean including the 2τ_int factor.
    pub sigma: f64,
    /// Error of the mean assuming independent samples.
    pub naive_sigma: f64,
    pub tau: f64,
    pub tau_sigma: f64,
    pub window: usize,
}

/// Autocorrelation function analysis with automatic windowing: the window W
/// is the first one where exp(−W/τ_W) − τ_W/√(WN) turns negative.
pub fn gamma_analysis(series: &[f64], s_tau: f64) -> Result<TauInt> {
    let n = series.len();
    if n < 16 {
        return Err(invalid(format!("series of length {n} too short for the autocorrelation analysis")));
    }
    if series.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in series"));
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = series.iter().map(|v| v - mean).collect();
    let gamma = |t: usize| d[..n - t].iter().zip(&d[t..]).map(|(a, b)| a * b).sum::<f64>() / (n - t) as f64;
    let g0 = gamma(0);
    let naive = (g0 / n as f64).sqrt();
    if g0 <= 0.0 {
        return Ok(TauInt { mean, sigma: 0.0, naive_sigma: 0.0, tau: 0.5, tau_sigma: 0.0, window: 0 });
    }
    let mut tau = 0.5;
    let mut sum_gamma = g0;
    let mut window = 0;
    let w_max = n / 2;
    for w in 1..=w_max {
        let gw = gamma(w);
        sum_gamma += 2.0 * gw;
        tau += gw / g0;
        window = w;
        let tau_w = if tau <= 0.5 { f64::MIN_POSITIVE } else { s_tau / ((2.0 * tau + 1.0) / (2.0 * tau - 1.0)).ln() };
        let g = (-(w as f64) / tau_w).exp() - tau_w / ((w * n) as f64).sqrt();
        if g < 0.0 {
            break;
        }
    }
    // Bias correction of the summed autocorrelation.
    let corr = 1.0 + (2 * window + 1) as f64 / n as f64;
    let tau = (tau * corr).max(0.5);
    let sum_gamma = (sum_gamma * corr).max(g0);
    let sigma = (sum_gamma / n as f64).sqrt();
    let tau_sigma = tau * ((4 * window + 2) as f64 / n as f64).sqrt();
    Ok(TauInt { mean, sigma, naive_sigma: naive, tau, tau_sigma, window })
}

/// Standard error of the mean of `series` including autocorrelations.
pub fn error_pipeline(series: &[f64]) -> Result<f64> {
    gamma_analysis(series, GAMMA_S).map(|t| t.sigma)
}

/// ln(Z/Z_i) = ln⟨e^{−w}⟩ with its errors and sampling-efficiency figures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub ln_ratio: f64,
    /// Jackknife error over bins.
    pub sigma: f64,
    /// Autocorrelation-corrected delta-method error, as a cross-check.
    pub sigma_gamma: f64,
    pub n: usize,
    pub ess: f64,
    pub ess_sigma: f64,
    pub method: Method,
    /// All works equal: the sample variance vanishes identically.
    pub degenerate: bool,
}

impl RatioEstimate {
    pub fn cost(&self) -> f64 {
        cost_proxy(self.n, self.ess)
    }

    /// Difference to `other` in units of the combined error.
    pub fn pull(&self, value: f64, value_sigma: f64) -> f64 {
        let s = (self.sigma * self.sigma + value_sigma * value_sigma).sqrt();
        if s == 0.0 {
            if self.ln_ratio == value {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            (self.ln_ratio - value) / s
        }
    }
}

/// Estimate from raw works.
pub fn log_ratio_from_works(works: &[f64], method: Method) -> Result<RatioEstimate> {
    let lo = check_works(works)?;
    let n = works.len();
    let ln_ratio = log_mean_exp_neg(works)?;
    let ess_full = ess(works)?;
    if works.iter().all(|&w| w == works[0]) {
        return Ok(RatioEstimate {
            ln_ratio,
            sigma: 0.0,
            sigma_gamma: 0.0,
            n,
            ess: 1.0,
            ess_sigma: 0.0,
            method,
            degenerate: true,
        });
    }
    if n < 2 {
        return Err(invalid("need at least two records for an error estimate"));
    }
    let (_, sigma) = jackknife(works, JACKKNIFE_BINS, |w| log_mean_exp_neg(w).unwrap_or(f64::NAN))?;
    let (_, ess_sigma) = jackknife(works, JACKKNIFE_BINS, |w| ess(w).unwrap_or(f64::NAN))?;
    let sigma_gamma = if n >= 16 {
        let x: Vec<f64> = works.iter().map(|w| (lo - w).exp()).collect();
        let t = gamma_analysis(&x, GAMMA_S)?;
        t.sigma / t.mean
    } else {
        f64::NAN
    };
    Ok(RatioEstimate { ln_ratio, sigma, sigma_gamma, n, ess: ess_full, ess_sigma, method, degenerate: false })
}

/// Estimate from records that share direction and method.
pub fn log_ratio(records: &[WorkRecord]) -> Result<RatioEstimate> {
    let first = records.first().ok_or_else(|| invalid("no work records"))?;
    if records.iter().any(|r| r.direction != first.direction || r.method != first.method) {
        return Err(invalid("records mix directions or methods"));
    }
    let w: Vec<f64> = records.iter().map(|r| r.work).collect();
    log_ratio_from_works(&w, first.method)
}

/// D_KL = ⟨W⟩ + ln(Z/Z_i), with `ln_ratio` = ln(Z_final/Z_initial).
pub fn kl_diagnostic(works: &[f64], ln_ratio: f64) -> Result<f64> {
    check_works(works)?;
    Ok(works.iter().sum::<f64>() / works.len() as f64 + ln_ratio)
}

/// Abscissa attached to the ratio l → l + 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Abscissa {
    /// l + 1/2.
    #[default]
    Midpoint,
    /// l.
    Left,
}

impl Abscissa {
    pub fn at(self, l: usize) -> f64 {
        match self {
            Abscissa::Midpoint => l as f64 + 0.5,
            Abscissa::Left => l as f64,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Abscissa::Midpoint => "midpoint",
            Abscissa::Left => "left",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CFunPoint {
    pub l: usize,
    pub l_eff: f64,
    pub value: f64,
    pub sigma: f64,
    pub n_renyi: usize,
    pub convention: BoundaryConvention,
    pub abscissa: Abscissa,
    pub ess: f64,
    pub samples: usize,
    pub method: Method,
}

/// C_n(l) = l_eff^{D−1}/|∂A| · 1/(n−1) · ln[Z_n(l)/Z_n(l+1)] for each forward
/// estimate of ln[Z_n(l+1)/Z_n(l)].
pub fn c_function(
    ratios: &[(usize, RatioEstimate)],
    geom: &ReplicaGeometry,
    convention: BoundaryConvention,
    abscissa: Abscissa,
) -> Result<Vec<CFunPoint>> {
    geom.validate()?;
    let n = geom.n_replicas;
    let boundary = geom.boundary_size(convention);
    ratios
        .iter()
        .map(|(l, r)| {
            if *l >= geom.extent_x {
                return Err(invalid(format!("cut {l} outside the geometry (L_x = {})", geom.extent_x)));
            }
            let l_eff = abscissa.at(*l);
            let scale = l_eff.powi(geom.dim as i32 - 1) / boundary / (n - 1) as f64;
            Ok(CFunPoint {
                l: *l,
                l_eff,
                value: -scale * r.ln_ratio,
                sigma: scale * r.sigma,
                n_renyi: n,
                convention,
                abscissa,
                ess: r.ess,
                samples: r.n,
                method: r.method,
            })
        })
        .collect()
}
