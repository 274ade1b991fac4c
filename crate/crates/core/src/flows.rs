//! Environment dynamics.
//!
//! Two flows drive the separation `s = s_active - s_passive`:
//!
//! - Batchelor–Kraichnan (BK): the velocity gradient is Gaussian and white in
//!   time. Over a step `dt` the gradient enters as a matrix increment `M`
//!   with `E[M_ij M_kl] = dt D (d+1) (δ_ik δ_jl - (δ_ij δ_kl + δ_jk δ_il)/(d+1))`.
//! - ABC: the steady Arnold–Beltrami–Childress field, integrated for both
//!   particles of the pair.
//!
//! Both use fixed-step Euler–Maruyama. The gradient increment is held
//! constant over the step and applied to the separation at the start of the
//! step (Itô reading).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::gaussian;

pub const MAX_DIM: usize = 3;

/// Separation vector between the active and the passive particle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SeparationState {
    comps: [f64; MAX_DIM],
    dim: usize,
}

impl SeparationState {
    pub fn new(comps: &[f64]) -> Result<Self> {
        check_dim(comps.len())?;
        let mut c = [0.0; MAX_DIM];
        c[..comps.len()].copy_from_slice(comps);
        Ok(Self { comps: c, dim: comps.len() })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { comps: [0.0; MAX_DIM], dim })
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.comps[..self.dim]
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.comps[..self.dim]
    }

    #[inline]
    pub fn norm_sq(&self) -> f64 {
        self.as_slice().iter().map(|x| x * x).sum()
    }

    #[inline]
    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.as_slice().iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, k: f64) -> Self {
        let mut out = *self;
        out.as_mut_slice().iter_mut().for_each(|x| *x *= k);
        out
    }
}

impl TryFrom<Vec<f64>> for SeparationState {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(&v)
    }
}

impl From<SeparationState> for Vec<f64> {
    fn from(s: SeparationState) -> Self {
        s.as_slice().to_vec()
    }
}

fn check_dim(dim: usize) -> Result<()> {
    if dim == 2 || dim == 3 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dimension must be 2 or 3, got {dim}")))
    }
}

/// Batchelor–Kraichnan flow: gradient strength `D`, dimension, noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BkFlowParams {
    /// `D`, in 1/time.
    pub diffusivity: f64,
    pub dim: usize,
    /// Variance rate of the separation noise.
    pub kappa: f64,
}

impl BkFlowParams {
    pub fn new(diffusivity: f64, dim: usize, kappa: f64) -> Result<Self> {
        let p = Self { diffusivity, dim, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_dim(self.dim)?;
        if !(self.diffusivity >= 0.0 && self.diffusivity.is_finite()) {
            return Err(Error::InvalidParameter(format!("D must be >= 0, got {}", self.diffusivity)));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

/// ABC flow amplitudes and the per-pair noise variance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AbcFlowParams {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub kappa: f64,
}

impl AbcFlowParams {
    /// Chaotic regime A = 1, B = 0.7, C = 0.43.
    pub fn chaotic(kappa: f64) -> Self {
        Self { a: 1.0, b: 0.7, c: 0.43, kappa }
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.a, self.b, self.c].iter().all(|x| x.is_finite()) {
            return Err(Error::InvalidParameter("ABC amplitudes must be finite".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidParameter(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FlowSpec {
    Bk(BkFlowParams),
    Abc(AbcFlowParams),
}

impl FlowSpec {
    pub fn dim(&self) -> usize {
        match self {
            FlowSpec::Bk(p) => p.dim,
            FlowSpec::Abc(_) => 3,
        }
    }

    pub fn kappa(&self) -> f64 {
        match self {
            FlowSpec::Bk(p) => p.kappa,
            FlowSpec::Abc(p) => p.kappa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            FlowSpec::Bk(p) => p.validate(),
            FlowSpec::Abc(p) => p.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Episodes abort once `|s|` exceeds this.
    pub max_sep: f64,
}

impl IntegratorConfig {
    pub fn new(dt: f64, max_sep: f64) -> Result<Self> {
        let c = Self { dt, max_sep };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.max_sep > 0.0) {
            return Err(Error::InvalidParameter(format!("max_sep must be > 0, got {}", self.max_sep)));
        }
        Ok(())
    }

    pub fn bk_default() -> Self {
        Self { dt: 1e-2, max_sep: 1e3 }
    }

    /// The linearised picture only holds for `s << 2π`.
    pub fn abc_default() -> Self {
        Self { dt: 1e-2, max_sep: 2.0 * std::f64::consts::PI }
    }
}

/// Covariance of one BK gradient increment per unit time, as a `d² × d²`
/// matrix indexed by `(i*d + j, k*d + l)`.
pub fn bk_covariance(params: &BkFlowParams) -> DMatrix<f64> {
    let d = params.dim;
    let df = d as f64;
    let kd = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
    DMatrix::from_fn(d * d, d * d, |p, q| {
        let (i, j) = (p / d, p % d);
        let (k, l) = (q / d, q % d);
        params.diffusivity
            * (df + 1.0)
            * (kd(j, l) * kd(i, k) - (kd(i, j) * kd(k, l) + kd(j, k) * kd(i, l)) / (df + 1.0))
    })
}

/// BK flow with a precomputed square-root factor of the gradient covariance.
#[derive(Clone, Debug)]
pub struct BkFlow {
    pub params: BkFlowParams,
    /// Row-major `d² × rank` factor `F` with `F Fᵀ = covariance`.
    factor: Vec<f64>,
    rank: usize,
}

impl BkFlow {
    pub fn new(params: BkFlowParams) -> Result<Self> {
        params.validate()?;
        let d2 = params.dim * params.dim;
        // The covariance is singular (the trace has zero variance), so a
        // plain Cholesky factorisation does not exist; use the eigenbasis.
        let eig = SymmetricEigen::new(bk_covariance(&params));
        let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
        let keep: Vec<usize> = (0..d2).filter(|&k| eig.eigenvalues[k] > 1e-12 * scale).collect();
        let rank = keep.len();
        let mut factor = vec![0.0; d2 * rank];
        for (c, &k) in keep.iter().enumerate() {
            let root = eig.eigenvalues[k].sqrt();
            for r in 0..d2 {
                factor[r * rank + c] = eig.eigenvectors[(r, k)] * root;
            }
        }
        Ok(Self { params, factor, rank })
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    /// Draws `M = ∫σ dt` over one step into `out` (row-major `d × d`).
    pub fn sample_gradient<R: Rng + ?Sized>(&self, dt: f64, rng: &mut R, out: &mut [f64]) {
        let d = self.params.dim;
        let d2 = d * d;
        debug_assert_eq!(out.len(), d2);
        let mut g = [0.0; MAX_DIM * MAX_DIM];
        for x in g[..self.rank].iter_mut() {
            *x = gaussian(rng);
        }
        let sq = dt.sqrt();
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.factor[r * self.rank..(r + 1) * self.rank];
            *o = sq * row.iter().zip(&g[..self.rank]).map(|(f, z)| f * z).sum::<f64>();
        }
        // Remove the rounding residue so the increment is exactly traceless.
        let tr = (0..d).map(|i| out[i * d + i]).sum::<f64>() / d as f64;
        for i in 0..d {
            out[i * d + i] -= tr;
        }
    }

    /// One Euler–Maruyama step `s' = s + M s - a dt + sqrt(κ dt) g`.
    pub fn step_separation<R: Rng + ?Sized>(
        &self,
        state: &SeparationState,
        action: &[f64],
        cfg: &IntegratorConfig,
        rng: &mut R,
    ) -> Result<SeparationState> {
        let d = self.params.dim;
        if action.len() != d {
            return Err(Error::ShapeMismatch { expected: d, got: action.len() });
        }
        let mut m = [0.0; MAX_DIM * MAX_DIM];
        if self.params.diffusivity > 0.0 {
            self.sample_gradient(cfg.dt, rng, &mut m[..d * d]);
        }
        let s = state.as_slice();
        let noise = (self.params.kappa * cfg.dt).sqrt();
        let mut next = *state;
        for (i, out) in next.as_mut_slice().iter_mut().enumerate() {
            let stretch: f64 = (0..d).map(|j| m[i * d + j] * s[j]).sum();
            let kick = if noise > 0.0 { noise * gaussian(rng) } else { 0.0 };
            *out = s[i] + stretch - action[i] * cfg.dt + kick;
        }
        check_overflow(&next, cfg)?;
        Ok(next)
    }
}

fn check_overflow(s: &SeparationState, cfg: &IntegratorConfig) -> Result<()> {
    let n = s.norm();
    if !n.is_finite() || n > cfg.max_sep {
        Err(Error::OverflowAbort { norm: n })
    } else {
        Ok(())
    }
}

/// Deterministic ABC velocity.
#[inline]
pub fn abc_velocity(p: &AbcFlowParams, pos: &[f64; 3]) -> [f64; 3] {
    let (x, y, z) = (pos[0], pos[1], pos[2]);
    [
        p.a * z.sin() + p.c * y.cos(),
        p.b * x.sin() + p.a * z.cos(),
        p.c * y.sin() + p.b * x.cos(),
    ]
}

/// Analytic Jacobian `J_ij = ∂v_i/∂x_j` of [`abc_velocity`].
#[inline]
pub fn abc_jacobian(p: &AbcFlowParams, pos: &[f64; 3]) -> [[f64; 3]; 3] {
    let (x, y, z) = (pos[0], pos[1], pos[2]);
    [
        [0.0, -p.c * y.sin(), p.a * z.cos()],
        [p.b * x.cos(), 0.0, -p.a * z.sin()],
        [-p.b * x.sin(), p.c * y.cos(), 0.0],
    ]
}

/// Advances the active (`pos1`) and passive (`pos2`) particles by one step.
///
/// Each particle gets independent noise of variance `κ/2 · dt` per
/// component, so the separation noise has variance `κ dt` as in the BK case.
pub fn step_pair_abc<R: Rng + ?Sized>(
    pos1: &[f64; 3],
    pos2: &[f64; 3],
    action: &[f64],
    params: &AbcFlowParams,
    cfg: &IntegratorConfig,
    rng: &mut R,
) -> Result<([f64; 3], [f64; 3])> {
    if action.len() != 3 {
        return Err(Error::ShapeMismatch { expected: 3, got: action.len() });
    }
    let v1 = abc_velocity(params, pos1);
    let v2 = abc_velocity(params, pos2);
    let noise = (0.5 * params.kappa * cfg.dt).sqrt();
    let mut n1 = [0.0; 3];
    let mut n2 = [0.0; 3];
    if noise > 0.0 {
        for i in 0..3 {
            n1[i] = noise * gaussian(rng);
            n2[i] = noise * gaussian(rng);
        }
    }
    let mut p1 = [0.0; 3];
    let mut p2 = [0.0; 3];
    for i in 0..3 {
        p1[i] = pos1[i] + v1[i] * cfg.dt - action[i] * cfg.dt + n1[i];
        p2[i] = pos2[i] + v2[i] * cfg.dt + n2[i];
    }
    let sep = SeparationState::new(&[p1[0] - p2[0], p1[1] - p2[1], p1[2] - p2[2]])?;
    check_overflow(&sep, cfg)?;
    Ok((p1, p2))
}

/// Tangent propagator `W(t; t0)` with a tracked log-normalisation.
///
/// The true propagator is `exp(log_scale) * w`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentState {
    pub w: DMatrix<f64>,
    pub t0: f64,
    pub t: f64,
    pub log_scale: f64,
}

impl TangentState {
    pub fn identity(dim: usize, t0: f64) -> Self {
        Self { w: DMatrix::identity(dim, dim), t0, t: t0, log_scale: 0.0 }
    }

    /// `W ← (I + σ dt) W`, `t ← t + dt`. `sigma_dt` is row-major `d × d`.
    pub fn evolve(&mut self, sigma_dt: &[f64], dt: f64) {
        let d = self.w.nrows();
        debug_assert_eq!(sigma_dt.len(), d * d);
        let inc = DMatrix::from_row_slice(d, d, sigma_dt);
        self.w += &inc * &self.w;
        self.t += dt;
        let n = self.w.norm();
        if n > 1e8 || (n < 1e-8 && n > 0.0) {
            self.w /= n;
            self.log_scale += n.ln();
        }
    }

    /// Growth of a unit vector `f` under the propagator, as `log|W f|`.
    pub fn log_stretch(&self, f: &[f64]) -> f64 {
        let v = &self.w * DVector::from_row_slice(f);
        v.norm().ln() + self.log_scale
    }
}

/// Functional form of [`TangentState::evolve`].
pub fn evolve_tangent(mut tangent: TangentState, sigma_dt: &[f64], dt: f64) -> TangentState {
    tangent.evolve(sigma_dt, dt);
    tangent
}
