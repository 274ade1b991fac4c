//! Closed-form results for proportionally controlled separation.
//!
//! Conventions used throughout:
//!
//! - The finite-time leading Lyapunov exponent `λ₁(t)` has density
//!   `∝ exp(-t S₁(λ₁))` with `S₁(λ) ≈ S₁″ (λ - λ̄₁)² / 2` near the mean, so
//!   `Var λ₁ ≈ 1 / (t S₁″)`. For BK flow `λ̄₁ = d(d-1)D/2` and
//!   `S₁″ = 1/((d-1)D)`.
//! - Under `a = φ s` the stationary radial density of `|s|` decays as
//!   `s^-(1 + 2(φ - λ̄₁) S₁″)`.
//! - Values are expected *rewards*: the physicist value is `-(B(t) s² + C(t))`,
//!   the negation of the accumulated quadratic cost.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::flows::TangentState;

/// `log σ_max(W) / (t - t0)`, including the renormalisation carried in `log_scale`.
pub fn finite_time_lyapunov(tangent: &TangentState) -> Result<f64> {
    let window = tangent.t - tangent.t0;
    if !(window > 0.0) {
        return Err(Error::DegenerateWindow(window));
    }
    let sv = SVD::new(tangent.w.clone(), false, false).singular_values;
    let top = sv.iter().cloned().fold(0.0, f64::max);
    Ok((top.ln() + tangent.log_scale) / window)
}

/// Equal-width histogram.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let width = (hi - lo) / bins as f64;
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let mut counts = vec![0u64; bins];
        for &x in samples {
            if x >= lo && x <= hi && width > 0.0 {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        Self { edges, counts }
    }

    pub fn centers(&self) -> Vec<f64> {
        self.edges.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }

    /// Probability density per bin, normalised by `total`.
    pub fn density(&self, total: usize) -> Vec<f64> {
        self.edges
            .windows(2)
            .zip(&self.counts)
            .map(|(w, &c)| c as f64 / (total as f64 * (w[1] - w[0])))
            .collect()
    }
}

/// Empirical finite-time statistics of the leading Lyapunov exponent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CramerFit {
    pub lambda_bar: f64,
    /// Curvature `S₁″(λ̄₁)`, in time units.
    pub s1_curv: f64,
    pub t_window: f64,
    pub histogram: Histogram,
}

impl CramerFit {
    /// The exact BK statistics.
    pub fn bk(diffusivity: f64, dim: usize) -> Self {
        Self {
            lambda_bar: lambda_bar_bk(diffusivity, dim),
            s1_curv: s1_curv_bk(diffusivity, dim),
            t_window: f64::INFINITY,
            histogram: Histogram { edges: vec![], counts: vec![] },
        }
    }
}

pub const MIN_CRAMER_SAMPLES: usize = 1000;

/// Fits `λ̄₁` (sample mean) and `S₁″` from finite-time exponents measured over
/// `t_window`.
///
/// The curvature comes from a count-weighted least-squares quadratic fit of
/// `-ln p(λ) / t_window` over the central 80% of the samples.
pub fn fit_cramer(samples: &[f64], t_window: f64) -> Result<CramerFit> {
    if samples.len() < MIN_CRAMER_SAMPLES {
        return Err(Error::InsufficientSamples { needed: MIN_CRAMER_SAMPLES, got: samples.len() });
    }
    if !(t_window > 0.0) {
        return Err(Error::DegenerateWindow(t_window));
    }
    let n = samples.len();
    let lambda_bar = samples.iter().sum::<f64>() / n as f64;
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let (min, max) = (sorted[0], sorted[n - 1]);
    if !(max > min) {
        return Err(Error::DegenerateFit { lambda_bar, reason: "all samples identical".into() });
    }
    let quantile = |q: f64| sorted[((q * (n - 1) as f64).round() as usize).min(n - 1)];
    let (lo, hi) = (quantile(0.1), quantile(0.9));
    if !(hi > lo) {
        return Err(Error::DegenerateFit { lambda_bar, reason: "central region has zero width".into() });
    }

    let bins = ((n as f64).sqrt() / 2.0).clamp(10.0, 60.0) as usize;
    let central = Histogram::new(&sorted, lo, hi, bins);
    let full_bins = (bins as f64 * (max - min) / (hi - lo)).ceil().clamp(bins as f64, 400.0) as usize;
    let histogram = Histogram::new(&sorted, min, max, full_bins);

    // Weighted normal equations for y = c0 + c1 x + c2 x².
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    let mut used = 0;
    for ((x, p), &c) in central.centers().iter().zip(central.density(n)).zip(&central.counts) {
        if c == 0 {
            continue;
        }
        used += 1;
        let w = c as f64;
        let y = -p.ln() / t_window;
        let dx = x - lambda_bar;
        let basis = [1.0, dx, dx * dx];
        for i in 0..3 {
            aty[i] += w * basis[i] * y;
            for j in 0..3 {
                ata[i][j] += w * basis[i] * basis[j];
            }
        }
    }
    if used < 3 {
        return Err(Error::DegenerateFit { lambda_bar, reason: "fewer than three populated bins".into() });
    }
    let coef = solve3(ata, aty).ok_or_else(|| Error::DegenerateFit {
        lambda_bar,
        reason: "singular least-squares system".into(),
    })?;
    let s1_curv = 2.0 * coef[2];
    if !(s1_curv > 0.0) {
        return Err(Error::DegenerateFit { lambda_bar, reason: format!("non-convex fit, S'' = {s1_curv}") });
    }
    Ok(CramerFit { lambda_bar, s1_curv, t_window, histogram })
}

fn solve3(a: [[f64; 3]; 3], b: [f64; 3]) -> Option<[f64; 3]> {
    let m = nalgebra::Matrix3::from_fn(|i, j| a[i][j]);
    let x = m.lu().solve(&nalgebra::Vector3::from(b))?;
    Some([x[0], x[1], x[2]])
}

/// `λ̄₁ = d(d-1)D/2` for BK flow.
pub fn lambda_bar_bk(diffusivity: f64, dim: usize) -> f64 {
    let d = dim as f64;
    d * (d - 1.0) * diffusivity / 2.0
}

/// `S₁″ = 1/((d-1)D)` for BK flow.
pub fn s1_curv_bk(diffusivity: f64, dim: usize) -> f64 {
    1.0 / ((dim as f64 - 1.0) * diffusivity)
}

/// Eddy diffusivity `D̃ = D(d+2)(d-1)`.
pub fn d_tilde_from_bk(diffusivity: f64, dim: usize) -> f64 {
    let d = dim as f64;
    diffusivity * (d + 2.0) * (d - 1.0)
}

/// Eddy diffusivity estimated from a measured mean exponent, `D̃ = 2λ̄₁(1 + 2/d)`.
pub fn d_tilde_from_lyapunov(lambda_bar: f64, dim: usize) -> f64 {
    2.0 * lambda_bar * (1.0 + 2.0 / dim as f64)
}

/// Minimiser of the steady cost `(φ² + β)/(2φ - D̃)`: `(D̃ + √(4β + D̃²))/2`.
pub fn optimal_phi(d_tilde: f64, beta: f64) -> Result<f64> {
    if !(d_tilde >= 0.0 && beta >= 0.0) || (d_tilde == 0.0 && beta == 0.0) {
        return Err(Error::InvalidParameter(format!(
            "optimal_phi needs D~ >= 0, beta >= 0, not both zero (got {d_tilde}, {beta})"
        )));
    }
    Ok((d_tilde + (4.0 * beta + d_tilde * d_tilde).sqrt()) / 2.0)
}

/// Steady cost per unit time of proportional control, per unit `dκ`.
pub fn steady_cost_factor(phi: f64, d_tilde: f64, beta: f64) -> f64 {
    (phi * phi + beta) / (2.0 * phi - d_tilde)
}

/// Parameters of the closed-form proportional-control value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineParams {
    pub phi: f64,
    pub d_tilde: f64,
    pub beta: f64,
    /// Continuous discount rate.
    pub nu: f64,
    pub horizon: f64,
    pub kappa: f64,
    pub d: usize,
}

impl BaselineParams {
    pub fn new(phi: f64, d_tilde: f64, beta: f64, nu: f64, horizon: f64, kappa: f64, d: usize) -> Result<Self> {
        let p = Self { phi, d_tilde, beta, nu, horizon, kappa, d };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(2.0 * self.phi > self.d_tilde) {
            return Err(Error::UnstableRegime { two_phi: 2.0 * self.phi, d_tilde: self.d_tilde });
        }
        if !(self.nu > 0.0) {
            return Err(Error::InvalidParameter(format!("nu must be > 0, got {}", self.nu)));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidParameter(format!("horizon must be > 0, got {}", self.horizon)));
        }
        if !(self.kappa >= 0.0) || !(self.beta >= 0.0) {
            return Err(Error::InvalidParameter("kappa and beta must be >= 0".into()));
        }
        if !(self.d == 2 || self.d == 3) {
            return Err(Error::InvalidParameter(format!("d must be 2 or 3, got {}", self.d)));
        }
        Ok(())
    }

    /// Net contraction rate of `E s²`, `2φ - D̃`.
    fn contraction(&self) -> f64 {
        2.0 * self.phi - self.d_tilde
    }

    /// `B(t) = (β+φ²)(1 - e^{-(T-t)(ν+2φ-D̃)})/(ν+2φ-D̃)`.
    pub fn b_coef(&self, t: f64) -> f64 {
        let tau = (self.horizon - t).max(0.0);
        let rate = self.nu + self.contraction();
        (self.beta + self.phi * self.phi) * (-(-tau * rate).exp_m1()) / rate
    }

    /// `C(t) = dκ(β+φ²)(1 - e^{-ν(T-t)})/(ν(2φ-D̃)) - dκ B(t)/(2φ-D̃)`.
    pub fn c_coef(&self, t: f64) -> f64 {
        let tau = (self.horizon - t).max(0.0);
        let dk = self.d as f64 * self.kappa;
        let c = self.contraction();
        dk * (self.beta + self.phi * self.phi) * (-(-self.nu * tau).exp_m1()) / (self.nu * c) - dk * self.b_coef(t) / c
    }

    /// Expected discounted reward-to-go of `a = φ s` from `|s|² = s_sq` at time `t`.
    #[inline]
    pub fn value_sq(&self, s_sq: f64, t: f64) -> f64 {
        -(self.b_coef(t) * s_sq + self.c_coef(t))
    }

    /// Per-step discount `γ = e^{-ν dt}`.
    pub fn gamma(&self, dt: f64) -> f64 {
        (-self.nu * dt).exp()
    }
}

/// The physicist value `V_φ(t, s) = -(B(t) s² + C(t))`.
pub fn physicist_value(s: f64, t: f64, params: &BaselineParams) -> Result<f64> {
    params.validate()?;
    Ok(params.value_sq(s * s, t))
}

/// Stationary BK density of the separation vector under `a = φ s`:
/// `N⁻¹ (1 + (d-1)D s²/κ)^{-φ/((d-1)D)}`.
///
/// `N` normalises the radial density `Ω_s P` with
/// `Ω_s = π^{d/2} s^{d-1} / Γ(d/2 + 1)`. `D` is recovered from `d_tilde`.
pub fn stationary_density_bk(s: f64, params: &BaselineParams) -> Result<f64> {
    let k = StationaryBk::new(params)?;
    Ok(k.density(s))
}

/// Radial density `Ω_s P(s|φ)`; integrates to one over `s ∈ [0, ∞)`.
pub fn radial_density_bk(s: f64, params: &BaselineParams) -> Result<f64> {
    let k = StationaryBk::new(params)?;
    Ok(k.radial(s))
}

/// Precomputed constants of the BK stationary density.
#[derive(Clone, Copy, Debug)]
pub struct StationaryBk {
    /// `(d-1)D/κ`.
    inv_scale_sq: f64,
    /// `φ/((d-1)D)`.
    power: f64,
    ln_norm: f64,
    ln_omega: f64,
    d: usize,
}

impl StationaryBk {
    pub fn new(params: &BaselineParams) -> Result<Self> {
        let d = params.d as f64;
        let diffusivity = params.d_tilde / ((d + 2.0) * (d - 1.0));
        let threshold = lambda_bar_bk(diffusivity, params.d);
        if !(params.phi > threshold) || !(params.kappa > 0.0) || !(diffusivity > 0.0) {
            return Err(Error::UnboundedDistribution { phi: params.phi, threshold });
        }
        let g = (d - 1.0) * diffusivity;
        let power = params.phi / g;
        let ln_norm = (d / 2.0) * (PI * params.kappa / g).ln() + ln_gamma(power - d / 2.0) - d.ln() - ln_gamma(power);
        let ln_omega = (d / 2.0) * PI.ln() - ln_gamma(d / 2.0 + 1.0);
        Ok(Self { inv_scale_sq: g / params.kappa, power, ln_norm, ln_omega, d: params.d })
    }

    pub fn density(&self, s: f64) -> f64 {
        (-self.power * (self.inv_scale_sq * s * s).ln_1p() - self.ln_norm).exp()
    }

    pub fn radial(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return 0.0;
        }
        (self.ln_omega + (self.d as f64 - 1.0) * s.ln()).exp() * self.density(s)
    }

    /// Radius beyond which the radial mass is below `mass`, from the
    /// power-law bound `∫_S^∞ Ω_s P ds ≤ e^{ln Ω - ln N} c^{2p} S^{d-2p}/(2p-d)`.
    pub fn tail_cutoff(&self, mass: f64) -> f64 {
        let d = self.d as f64;
        let e = 2.0 * self.power - d;
        let ln_c2p = -self.power * self.inv_scale_sq.ln();
        let ln_pref = self.ln_omega - self.ln_norm + ln_c2p - e.ln();
        ((ln_pref - mass.ln()) / e).exp()
    }

    /// Asymptotic log-log slope of the radial density, `d - 1 - 2φ/((d-1)D)`.
    pub fn radial_slope(&self) -> f64 {
        self.d as f64 - 1.0 - 2.0 * self.power
    }
}

/// `E s² = dκ/(2φ - D̃)` in the stationary state.
pub fn stationary_second_moment(params: &BaselineParams) -> f64 {
    params.d as f64 * params.kappa / (2.0 * params.phi - params.d_tilde)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailPrediction {
    /// `2(φ - λ̄₁) S₁″`; the radial density decays as `s^-(1 + exponent)`.
    pub exponent: f64,
    /// Diffusive scale `√(κ/λ̄₁)`.
    pub s_d: f64,
}

impl TailPrediction {
    pub fn radial_slope(&self) -> f64 {
        -(1.0 + self.exponent)
    }
}

pub fn tail_exponent(phi: f64, fit: &CramerFit, kappa: f64) -> Result<TailPrediction> {
    if !(phi > fit.lambda_bar) {
        return Err(Error::NoStationaryState { phi, lambda_bar: fit.lambda_bar });
    }
    Ok(TailPrediction {
        exponent: 2.0 * (phi - fit.lambda_bar) * fit.s1_curv,
        s_d: (kappa / fit.lambda_bar).sqrt(),
    })
}

/// Adaptive Simpson quadrature with Richardson correction.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        m: f64,
        fm: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        recurse(f, a, fa, m, fm, lm, flm, left, tol / 2.0, depth - 1)
            + recurse(f, m, fm, b, fb, rm, frm, right, tol / 2.0, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(&f, a, fa, b, fb);
    recurse(&f, a, fa, b, fb, m, fm, whole, tol, 50)
}
