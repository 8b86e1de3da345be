//! Operator-split time integration of the perturbative two-species system with
//! Maxwell fields, of its Poisson-closed limit, and of the expansion cascade.
//!
//! One step is composed of free streaming (T), the velocity-space force (F), collisions (C)
//! and the Maxwell rotation (M). Strang ordering is T F C M C F T with half steps.
//! Free streaming also deposits the longitudinal part of the time-integrated current into E,
//! so ∇·E equals the charge density to round-off along VMB runs.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::collision_kernel::{CollisionPropagator, CollisionQuadrature, LinearizedOperator};
use crate::em_fields::{
    longitudinal_impulse, longitudinal_part, maxwell_rotation_substep, poisson_field, zero_field, EMState, Field3,
};
use crate::error::{Result, VmbError};
use crate::phase_grid::{read_checkpoint, write_checkpoint, PairDistribution, SpatialGrid, VelocityGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Splitting {
    Lie,
    Strang,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CollisionMode {
    LinearizedOnly,
    FullBilinear,
}

/// Which form of the remainder system the cascade integrates.
///
/// `Consistent` is the exact re-partition of the full system. `Displayed` keeps three
/// transcription variants: the magnetic coupling to the lower levels without the species
/// charge, the Maxwell source without the factor ε, and the self-interaction Γ counted twice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemainderConvention {
    Displayed,
    Consistent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub dt: f64,
    pub t_end: f64,
    pub splitting: Splitting,
    pub collision_mode: CollisionMode,
    /// Integrate −L exactly through its spectral decomposition; otherwise explicit Heun.
    pub stiff_collision: bool,
    /// Record every this many steps.
    pub record_every: usize,
    /// Write a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub remainder_convention: RemainderConvention,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            dt: 0.05,
            t_end: 1.0,
            splitting: Splitting::Strang,
            collision_mode: CollisionMode::LinearizedOnly,
            stiff_collision: true,
            record_every: 1,
            checkpoint_every: 0,
            remainder_convention: RemainderConvention::Consistent,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(VmbError::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_end == 0.0 || self.t_end >= self.dt) || !self.t_end.is_finite() {
            return Err(VmbError::Config(format!("t_end = {} must be 0 or at least dt = {}", self.t_end, self.dt)));
        }
        if self.record_every == 0 {
            return Err(VmbError::Config("record_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of whole steps that fit in [0, t_end].
    pub fn n_steps(&self) -> u64 {
        (self.t_end / self.dt + 1e-9).floor() as u64
    }
}

/// Maxwellian-compatible skew-symmetric first derivative on one velocity axis.
///
/// D̃ = D + (r mᵀ − m rᵀ)/|m|² where D is the centered difference with zero exterior values,
/// m_k = e^{−v_k²/4} and r = −(v/2)∘m − Dm. D̃ is skew and D̃m = −(v/2)m holds exactly, which
/// makes the discrete force terms conserve charge and keeps the magnetic force norm-neutral.
#[derive(Clone, Debug)]
pub struct SkewDerivative {
    n: usize,
    dv: f64,
    m: Vec<f64>,
    r: Vec<f64>,
    mm: f64,
}

impl SkewDerivative {
    pub fn new(v: &VelocityGrid) -> Self {
        let n = v.n_v;
        let dv = v.dv;
        let m: Vec<f64> = v.axis.iter().map(|&x| (-x * x / 4.0).exp()).collect();
        let centered = |g: &[f64], k: usize| {
            let up = if k + 1 < n { g[k + 1] } else { 0.0 };
            let down = if k > 0 { g[k - 1] } else { 0.0 };
            (up - down) / (2.0 * dv)
        };
        let r: Vec<f64> = (0..n).map(|k| -0.5 * v.axis[k] * m[k] - centered(&m, k)).collect();
        let mm = m.iter().map(|x| x * x).sum();
        SkewDerivative { n, dv, m, r, mm }
    }

    /// D̃ applied to one line of `n` values.
    pub fn apply_line(&self, g: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mg: f64 = self.m.iter().zip(g).map(|(a, b)| a * b).sum();
        let rg: f64 = self.r.iter().zip(g).map(|(a, b)| a * b).sum();
        for k in 0..n {
            let up = if k + 1 < n { g[k + 1] } else { 0.0 };
            let down = if k > 0 { g[k - 1] } else { 0.0 };
            out[k] = (up - down) / (2.0 * self.dv) + (self.r[k] * mg - self.m[k] * rg) / self.mm;
        }
    }

    /// The n×n matrix of D̃.
    pub fn matrix(&self) -> Vec<Vec<f64>> {
        (0..self.n)
            .map(|row| {
                let mut out = vec![0.0; self.n];
                let mut e = vec![0.0; self.n];
                (0..self.n)
                    .map(|col| {
                        e.iter_mut().for_each(|x| *x = 0.0);
                        e[col] = 1.0;
                        self.apply_line(&e, &mut out);
                        out[row]
                    })
                    .collect()
            })
            .collect()
    }

    /// D̃ along `axis` of one velocity lattice of n³ values.
    pub fn apply(&self, g: &[f64], axis: usize, out: &mut [f64]) {
        let n = self.n;
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        let mut line = vec![0.0; n];
        let mut res = vec![0.0; n];
        for a in 0..n {
            for b in 0..n {
                let base = match axis {
                    0 => a * n + b,
                    1 => a * n * n + b,
                    _ => (a * n + b) * n,
                };
                for k in 0..n {
                    line[k] = g[base + k * stride];
                }
                self.apply_line(&line, &mut res);
                for k in 0..n {
                    out[base + k * stride] = res[k];
                }
            }
        }
    }
}

/// Grids, operators and cached collision propagators shared by all steppers.
pub struct SolverOps {
    pub x: SpatialGrid,
    pub v: VelocityGrid,
    pub op: LinearizedOperator,
    /// Bilinear collision quadrature; required for `CollisionMode::FullBilinear`.
    pub quad: Option<CollisionQuadrature>,
    pub skew: SkewDerivative,
    propagators: Mutex<HashMap<u64, Arc<CollisionPropagator>>>,
}

impl SolverOps {
    pub fn new(x: SpatialGrid, op: LinearizedOperator) -> Self {
        let v = op.grid.clone();
        let skew = SkewDerivative::new(&v);
        SolverOps { x, v, op, quad: None, skew, propagators: Mutex::new(HashMap::new()) }
    }

    /// Attach the bilinear quadrature built from the operator's grid and kernel.
    pub fn with_bilinear(mut self) -> Self {
        self.quad = Some(CollisionQuadrature::new(&self.v, &self.op.model));
        self
    }

    /// e^{−hL}, φ₁(−hL), φ₂(−hL), built once per distinct h.
    pub fn propagator(&self, h: f64) -> Arc<CollisionPropagator> {
        let mut cache = self.propagators.lock().expect("propagator cache poisoned");
        cache.entry(h.to_bits()).or_insert_with(|| Arc::new(self.op.propagator(h))).clone()
    }

    pub fn zeros(&self) -> PairDistribution {
        PairDistribution::zeros(self.x.len(), self.v.len())
    }

    fn check(&self, f: &PairDistribution) -> Result<()> {
        f.check_grids(&self.x, &self.v)
    }
}

/// Where a force term takes its field from.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FieldRef {
    /// The level's own electric field.
    OwnE,
    /// The level's own magnetic field.
    OwnB,
    /// Electric field of a lower level (0 is the leading term).
    LowerE(usize),
    Constant([f64; 3]),
}

/// Which distribution a term acts on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DistRef {
    Own,
    Lower(usize),
}

/// One summand of the velocity-space force right side.
#[derive(Clone, Debug, PartialEq)]
pub enum ForceTerm {
    /// weight · q₁ E·v μ^{1/2}
    Source { label: String, field: FieldRef, weight: f64 },
    /// weight · q₀ (½E·v g − E·∇_v g)
    Electric { label: String, field: FieldRef, dist: DistRef, weight: f64 },
    /// −weight · q₀ (v×B)·∇_v g, or without q₀ when `charge_signed` is false
    Magnetic { label: String, field: FieldRef, dist: DistRef, weight: f64, charge_signed: bool },
}

impl ForceTerm {
    pub fn label(&self) -> &str {
        match self {
            ForceTerm::Source { label, .. } | ForceTerm::Electric { label, .. } | ForceTerm::Magnetic { label, .. } => label,
        }
    }
}

/// weight · Γ(first, second).
#[derive(Clone, Debug, PartialEq)]
pub struct CollisionTerm {
    pub label: String,
    pub first: DistRef,
    pub second: DistRef,
    pub weight: f64,
}

/// Current source of the Maxwell rotation: own·j(f) + Σ lower[l]·j(f_l).
#[derive(Clone, Debug, PartialEq)]
pub struct MaxwellSource {
    pub own: f64,
    pub lower: Vec<f64>,
}

/// How the electric field follows free streaming.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FieldClosure {
    /// Longitudinal E absorbs the time-integrated current of the streaming substep.
    Impulse,
    /// E is recomputed from the charge density.
    Poisson,
}

/// Full right-hand-side description of one system.
#[derive(Clone, Debug, PartialEq)]
pub struct TermTable {
    pub force: Vec<ForceTerm>,
    pub collision: Vec<CollisionTerm>,
    pub closure: FieldClosure,
    pub maxwell: Option<MaxwellSource>,
}

fn src(label: &str, field: FieldRef, weight: f64) -> ForceTerm {
    ForceTerm::Source { label: label.into(), field, weight }
}

fn el(label: &str, field: FieldRef, dist: DistRef, weight: f64) -> ForceTerm {
    ForceTerm::Electric { label: label.into(), field, dist, weight }
}

fn mag(label: &str, field: FieldRef, dist: DistRef, weight: f64, charge_signed: bool) -> ForceTerm {
    ForceTerm::Magnetic { label: label.into(), field, dist, weight, charge_signed }
}

fn gam(label: &str, first: DistRef, second: DistRef, weight: f64) -> CollisionTerm {
    CollisionTerm { label: label.into(), first, second, weight }
}

/// Terms of the perturbative VMB system with background field 𝔅.
pub fn vmb_terms(epsilon: f64, background: [f64; 3], mode: CollisionMode) -> TermTable {
    let force = vec![
        src("E.v mu^1/2 q1", FieldRef::OwnE, 1.0),
        el("E on f", FieldRef::OwnE, DistRef::Own, 1.0),
        mag("eps v x B_bg on f", FieldRef::Constant(background), DistRef::Own, epsilon, true),
        mag("eps v x B~ on f", FieldRef::OwnB, DistRef::Own, epsilon, true),
    ];
    let collision = match mode {
        CollisionMode::FullBilinear => vec![gam("Gamma(f,f)", DistRef::Own, DistRef::Own, 1.0)],
        CollisionMode::LinearizedOnly => vec![],
    };
    TermTable { force, collision, closure: FieldClosure::Impulse, maxwell: Some(MaxwellSource { own: 1.0, lower: vec![] }) }
}

/// Terms of the Poisson-closed system with the constant field `b_eff` in the ε(v×B)·∇_v term.
pub fn vpb_terms(epsilon: f64, b_eff: [f64; 3], mode: CollisionMode) -> TermTable {
    let force = vec![
        src("E_P.v mu^1/2 q1", FieldRef::OwnE, 1.0),
        el("E_P on f_P", FieldRef::OwnE, DistRef::Own, 1.0),
        mag("eps v x B_eff on f_P", FieldRef::Constant(b_eff), DistRef::Own, epsilon, true),
    ];
    let collision = match mode {
        CollisionMode::FullBilinear => vec![gam("Gamma(f_P,f_P)", DistRef::Own, DistRef::Own, 1.0)],
        CollisionMode::LinearizedOnly => vec![],
    };
    TermTable { force, collision, closure: FieldClosure::Poisson, maxwell: None }
}

/// Terms of the linear corrector system of order `i` (1 ≤ i).
pub fn linear_terms(i: usize, epsilon: f64, b_eff: [f64; 3], mode: CollisionMode) -> TermTable {
    let mut force = vec![
        src("E_i.v mu^1/2 q1", FieldRef::OwnE, 1.0),
        el("E_i on f_P", FieldRef::OwnE, DistRef::Lower(0), 1.0),
        el("E_P on f_i", FieldRef::LowerE(0), DistRef::Own, 1.0),
    ];
    for j1 in 1..i {
        let j2 = i - j1;
        force.push(el(&format!("E_{j1} on f_{j2}"), FieldRef::LowerE(j1), DistRef::Lower(j2), 1.0));
    }
    force.push(mag("eps v x B_eff on f_i", FieldRef::Constant(b_eff), DistRef::Own, epsilon, true));
    let mut collision = vec![];
    if mode == CollisionMode::FullBilinear {
        collision.push(gam("Gamma(f_P,f_i)", DistRef::Lower(0), DistRef::Own, 1.0));
        collision.push(gam("Gamma(f_i,f_P)", DistRef::Own, DistRef::Lower(0), 1.0));
        for j1 in 1..i {
            let j2 = i - j1;
            collision.push(gam(&format!("Gamma(f_{j1},f_{j2})"), DistRef::Lower(j1), DistRef::Lower(j2), 1.0));
        }
    }
    TermTable { force, collision, closure: FieldClosure::Poisson, maxwell: None }
}

/// Terms of the remainder system of order `m` (m ≥ 1).
pub fn remainder_terms(
    m: usize,
    epsilon: f64,
    b_eff: [f64; 3],
    mode: CollisionMode,
    convention: RemainderConvention,
) -> TermTable {
    let displayed = convention == RemainderConvention::Displayed;
    let em = epsilon.powi(m as i32);
    let mut force = vec![
        src("E_m.v mu^1/2 q1", FieldRef::OwnE, 1.0),
        el("E_m on f_P", FieldRef::OwnE, DistRef::Lower(0), 1.0),
        el("E_P on f_m", FieldRef::LowerE(0), DistRef::Own, 1.0),
    ];
    for j in 1..m {
        let w = epsilon.powi(j as i32);
        force.push(el(&format!("eps^{j} E_{j} on f_m"), FieldRef::LowerE(j), DistRef::Own, w));
        force.push(el(&format!("eps^{j} E_m on f_{j}"), FieldRef::OwnE, DistRef::Lower(j), w));
    }
    for j1 in 1..m {
        for j2 in 1..m {
            if j1 + j2 >= m {
                let w = epsilon.powi((j1 + j2 - m) as i32);
                force.push(el(&format!("eps^{} E_{j1} on f_{j2}", j1 + j2 - m), FieldRef::LowerE(j1), DistRef::Lower(j2), w));
            }
        }
    }
    force.push(el("eps^m E_m on f_m", FieldRef::OwnE, DistRef::Own, em));
    force.push(mag("eps v x B_eff on f_m", FieldRef::Constant(b_eff), DistRef::Own, epsilon, true));
    force.push(mag("eps v x B_m on f_P", FieldRef::OwnB, DistRef::Lower(0), epsilon, !displayed));
    for j in 1..m {
        let w = epsilon.powi(j as i32 + 1);
        force.push(mag(&format!("eps^{} v x B_m on f_{j}", j + 1), FieldRef::OwnB, DistRef::Lower(j), w, !displayed));
    }
    force.push(mag("eps^(m+1) v x B_m on f_m", FieldRef::OwnB, DistRef::Own, epsilon * em, true));

    let mut collision = vec![];
    if mode == CollisionMode::FullBilinear {
        collision.push(gam("Gamma(f_m,f_P)", DistRef::Own, DistRef::Lower(0), 1.0));
        collision.push(gam("Gamma(f_P,f_m)", DistRef::Lower(0), DistRef::Own, 1.0));
        for j in 1..m {
            let w = epsilon.powi(j as i32);
            collision.push(gam(&format!("eps^{j} Gamma(f_m,f_{j})"), DistRef::Own, DistRef::Lower(j), w));
            collision.push(gam(&format!("eps^{j} Gamma(f_{j},f_m)"), DistRef::Lower(j), DistRef::Own, w));
        }
        for j1 in 1..m {
            for j2 in 1..m {
                if j1 + j2 >= m {
                    let w = epsilon.powi((j1 + j2 - m) as i32);
                    collision.push(gam(&format!("eps^{} Gamma(f_{j1},f_{j2})", j1 + j2 - m), DistRef::Lower(j1), DistRef::Lower(j2), w));
                }
            }
        }
        collision.push(gam("eps^m Gamma(f_m,f_m)", DistRef::Own, DistRef::Own, em));
        if displayed {
            collision.push(gam("eps^m Gamma(f_m,f_m) from the (m,m) pair", DistRef::Own, DistRef::Own, em));
        }
    }
    // ε^m E_m absorbs E − E_P − Σε^iE^i, so the lower currents enter with weight ε^{j−m}.
    let scale = if displayed { 1.0 / epsilon } else { 1.0 };
    let lower = (0..m).map(|j| scale * epsilon.powi(j as i32 - m as i32)).collect();
    TermTable { force, collision, closure: FieldClosure::Impulse, maxwell: Some(MaxwellSource { own: scale, lower }) }
}

/// Unknowns of one system: distribution, electric field and magnetic field (B̃ or B^m).
#[derive(Clone, Debug, PartialEq)]
pub struct LevelState {
    pub f: PairDistribution,
    pub e: Field3,
    pub b: Field3,
}

impl LevelState {
    pub fn zeros(nx: usize, nv: usize) -> Self {
        LevelState { f: PairDistribution::zeros(nx, nv), e: zero_field(nx), b: zero_field(nx) }
    }

    fn is_finite(&self) -> bool {
        self.f.is_finite() && self.e.iter().chain(&self.b).flatten().all(|x| x.is_finite())
    }
}

/// Values seen by higher cascade levels during one step of a level.
#[derive(Clone, Debug, Default)]
pub struct StepTrace {
    /// Electric field during each force substep.
    pub force_e: Vec<Field3>,
    /// Stage inputs of each force substep.
    pub force_stages: Vec<Vec<PairDistribution>>,
    /// Stage inputs of each collision substep.
    pub collision_stages: Vec<Vec<PairDistribution>>,
    /// Distribution at each Maxwell substep.
    pub maxwell_f: Vec<PairDistribution>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Substep {
    Transport(f64),
    Force(f64),
    Collision(f64),
    Maxwell(f64),
}

fn schedule(cfg: &SolverConfig) -> Vec<Substep> {
    let h = cfg.dt;
    match cfg.splitting {
        Splitting::Lie => vec![Substep::Transport(h), Substep::Force(h), Substep::Collision(h), Substep::Maxwell(h)],
        Splitting::Strang => vec![
            Substep::Transport(h / 2.0),
            Substep::Force(h / 2.0),
            Substep::Collision(h / 2.0),
            Substep::Maxwell(h),
            Substep::Collision(h / 2.0),
            Substep::Force(h / 2.0),
            Substep::Transport(h / 2.0),
        ],
    }
}

/// Exact free streaming ∂_t f = −v·∇_x f over τ per Fourier mode.
///
/// Returns the streamed distribution and the spectrum of the time-integrated current
/// ∫₀^τ Σ Δv³ v μ^{1/2}(f₊ − f₋) dt, whose divergence equals minus the charge change.
pub fn transport(ops: &SolverOps, f: &PairDistribution, tau: f64) -> Result<(PairDistribution, [Vec<Complex64>; 3])> {
    ops.check(f)?;
    let x = &ops.x;
    let v = &ops.v;
    let nx = x.len();
    let nv = v.len();
    let columns: Vec<(usize, usize)> = (0..2).flat_map(|s| (0..nv).map(move |k| (s, k))).collect();
    let results: Vec<(Vec<f64>, [Vec<Complex64>; 3])> = columns
        .par_iter()
        .map(|&(s, k)| {
            let data = f.component(s);
            let mut buf: Vec<Complex64> = (0..nx).map(|i| Complex64::new(data[i * nv + k], 0.0)).collect();
            x.forward(&mut buf);
            let node = v.nodes[k];
            let q = if s == 0 { 1.0 } else { -1.0 };
            let w = q * v.weight * v.sqrt_mu[k] * tau;
            let mut cur: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); nx]);
            for (mi, c) in buf.iter_mut().enumerate() {
                let xi = x.odd_wavenumbers[mi];
                let theta = 2.0 * PI * (xi[0] * node[0] + xi[1] * node[1] + xi[2] * node[2]) * tau;
                let avg = if theta == 0.0 {
                    Complex64::new(1.0, 0.0)
                } else {
                    let half = (0.5 * theta).sin();
                    Complex64::new(theta.sin() / theta, -2.0 * half * half / theta)
                };
                for a in 0..3 {
                    cur[a][mi] = *c * avg * (w * node[a]);
                }
                *c *= Complex64::from_polar(1.0, -theta);
            }
            x.inverse(&mut buf);
            (buf.into_iter().map(|c| c.re).collect(), cur)
        })
        .collect();
    let mut out = PairDistribution::zeros(nx, nv);
    let mut current: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); nx]);
    for (&(s, k), (col, cur)) in columns.iter().zip(&results) {
        let dst = out.component_mut(s);
        for i in 0..nx {
            dst[i * nv + k] = col[i];
        }
        for a in 0..3 {
            for (acc, c) in current[a].iter_mut().zip(&cur[a]) {
                *acc += c;
            }
        }
    }
    Ok((out, current))
}

/// Fields and distributions a term table reads at one stage.
struct StageInputs<'a> {
    own_e: &'a Field3,
    own_b: &'a Field3,
    lower_e: Vec<&'a Field3>,
    lower_f: Vec<&'a PairDistribution>,
}

impl StageInputs<'_> {
    fn field(&self, r: FieldRef, i: usize) -> [f64; 3] {
        match r {
            FieldRef::OwnE => [self.own_e[0][i], self.own_e[1][i], self.own_e[2][i]],
            FieldRef::OwnB => [self.own_b[0][i], self.own_b[1][i], self.own_b[2][i]],
            FieldRef::LowerE(l) => [self.lower_e[l][0][i], self.lower_e[l][1][i], self.lower_e[l][2][i]],
            FieldRef::Constant(c) => c,
        }
    }

    fn dist<'b>(&'b self, r: DistRef, own: &'b PairDistribution) -> &'b PairDistribution {
        match r {
            DistRef::Own => own,
            DistRef::Lower(l) => self.lower_f[l],
        }
    }
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Force right side Σ terms at every spatial point.
fn force_rhs(ops: &SolverOps, terms: &[ForceTerm], inputs: &StageInputs, own: &PairDistribution) -> PairDistribution {
    let nx = ops.x.len();
    let nv = ops.v.len();
    let v = &ops.v;
    let mut dists: Vec<DistRef> = Vec::new();
    for t in terms {
        if let ForceTerm::Electric { dist, .. } | ForceTerm::Magnetic { dist, .. } = t {
            if !dists.contains(dist) {
                dists.push(*dist);
            }
        }
    }
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..nx)
        .into_par_iter()
        .map(|i| {
            // D̃_a g for every distribution and species at this point
            let grads: Vec<[[Vec<f64>; 3]; 2]> = dists
                .iter()
                .map(|&d| {
                    let g = inputs.dist(d, own);
                    std::array::from_fn(|s| {
                        let line = &g.component(s)[i * nv..(i + 1) * nv];
                        std::array::from_fn(|a| {
                            let mut out = vec![0.0; nv];
                            ops.skew.apply(line, a, &mut out);
                            out
                        })
                    })
                })
                .collect();
            let mut out = [vec![0.0; nv], vec![0.0; nv]];
            for t in terms {
                match t {
                    ForceTerm::Source { field, weight, .. } => {
                        let e = inputs.field(*field, i);
                        for (s, o) in out.iter_mut().enumerate() {
                            let c = if s == 0 { *weight } else { -*weight };
                            for k in 0..nv {
                                let n = v.nodes[k];
                                o[k] += c * (e[0] * n[0] + e[1] * n[1] + e[2] * n[2]) * v.sqrt_mu[k];
                            }
                        }
                    }
                    ForceTerm::Electric { field, dist, weight, .. } => {
                        let e = inputs.field(*field, i);
                        let g = inputs.dist(*dist, own);
                        let di = dists.iter().position(|d| d == dist).expect("distribution registered");
                        for (s, o) in out.iter_mut().enumerate() {
                            let c = if s == 0 { *weight } else { -*weight };
                            let line = &g.component(s)[i * nv..(i + 1) * nv];
                            let gr = &grads[di][s];
                            for k in 0..nv {
                                let n = v.nodes[k];
                                let ev = e[0] * n[0] + e[1] * n[1] + e[2] * n[2];
                                let eg = e[0] * gr[0][k] + e[1] * gr[1][k] + e[2] * gr[2][k];
                                o[k] += c * (0.5 * ev * line[k] - eg);
                            }
                        }
                    }
                    ForceTerm::Magnetic { field, dist, weight, charge_signed, .. } => {
                        let b = inputs.field(*field, i);
                        let di = dists.iter().position(|d| d == dist).expect("distribution registered");
                        for (s, o) in out.iter_mut().enumerate() {
                            let c = if s == 0 || !charge_signed { *weight } else { -*weight };
                            let gr = &grads[di][s];
                            for k in 0..nv {
                                let f = cross(v.nodes[k], b);
                                o[k] -= c * (f[0] * gr[0][k] + f[1] * gr[1][k] + f[2] * gr[2][k]);
                            }
                        }
                    }
                }
            }
            let [p, m] = out;
            (p, m)
        })
        .collect();
    let mut res = PairDistribution::zeros(nx, nv);
    for (i, (p, m)) in rows.into_iter().enumerate() {
        res.plus[i * nv..(i + 1) * nv].copy_from_slice(&p);
        res.minus[i * nv..(i + 1) * nv].copy_from_slice(&m);
    }
    res
}

/// Δv / max|E + v×B| over the terms acting on the level's own distribution.
fn cfl_bound(ops: &SolverOps, terms: &[ForceTerm], inputs: &StageInputs) -> f64 {
    let v = &ops.v;
    let mut worst = 0.0f64;
    for i in 0..ops.x.len() {
        let mut e = [0.0; 3];
        let mut b = [0.0; 3];
        for t in terms {
            match t {
                ForceTerm::Electric { field, dist: DistRef::Own, weight, .. } => {
                    let f = inputs.field(*field, i);
                    for a in 0..3 {
                        e[a] += weight * f[a];
                    }
                }
                ForceTerm::Magnetic { field, dist: DistRef::Own, weight, .. } => {
                    let f = inputs.field(*field, i);
                    for a in 0..3 {
                        b[a] += weight * f[a];
                    }
                }
                _ => {}
            }
        }
        for node in &v.nodes {
            let c = cross(*node, b);
            let s = ((e[0] + c[0]).powi(2) + (e[1] + c[1]).powi(2) + (e[2] + c[2]).powi(2)).sqrt();
            worst = worst.max(s);
        }
    }
    if worst == 0.0 {
        f64::INFINITY
    } else {
        v.dv / worst
    }
}

fn combine(base: &PairDistribution, terms: &[(f64, &PairDistribution)]) -> PairDistribution {
    let mut out = base.clone();
    for (a, t) in terms {
        out.axpy(*a, t);
    }
    out
}

/// Bilinear right side Σ weight·Γ(first, second) at one stage, or None without terms.
fn collision_rhs(
    ops: &SolverOps,
    terms: &[CollisionTerm],
    lower: &[&PairDistribution],
    own: &PairDistribution,
) -> Result<Option<PairDistribution>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let quad = ops
        .quad
        .as_ref()
        .ok_or_else(|| VmbError::Config("full bilinear collisions need the collision quadrature".into()))?;
    let pick = |r: DistRef| match r {
        DistRef::Own => own,
        DistRef::Lower(l) => lower[l],
    };
    let mut acc = ops.zeros();
    for t in terms {
        let (g, _) = quad.gamma(pick(t.first), pick(t.second))?;
        acc.axpy(t.weight, &g);
    }
    Ok(Some(acc))
}

fn collision_substep(
    ops: &SolverOps,
    cfg: &SolverConfig,
    terms: &[CollisionTerm],
    h: f64,
    f: &PairDistribution,
    lower_stage: &dyn Fn(usize) -> Vec<PairDistribution>,
) -> Result<(PairDistribution, Vec<PairDistribution>)> {
    let lower0 = lower_stage(0);
    let l0: Vec<&PairDistribution> = lower0.iter().collect();
    let n1 = collision_rhs(ops, terms, &l0, f)?;
    if cfg.stiff_collision {
        let prop = ops.propagator(h);
        let ef = ops.op.apply_channels(&prop.exp, f)?;
        match n1 {
            None => Ok((ef, vec![f.clone()])),
            Some(n1) => {
                let a = combine(&ef, &[(h, &ops.op.apply_channels(&prop.phi1, &n1)?)]);
                let lower1 = lower_stage(1);
                let l1: Vec<&PairDistribution> = lower1.iter().collect();
                let n2 = collision_rhs(ops, terms, &l1, &a)?.expect("terms present");
                let diff = combine(&n2, &[(-1.0, &n1)]);
                let out = combine(&a, &[(h, &ops.op.apply_channels(&prop.phi2, &diff)?)]);
                Ok((out, vec![f.clone(), a]))
            }
        }
    } else {
        let rhs = |g: &PairDistribution, n: Option<PairDistribution>| -> Result<PairDistribution> {
            let mut r = ops.op.apply_l(g)?;
            r.scale(-1.0);
            if let Some(n) = n {
                r.axpy(1.0, &n);
            }
            Ok(r)
        };
        let k1 = rhs(f, n1)?;
        let star = combine(f, &[(h, &k1)]);
        let lower1 = lower_stage(1);
        let l1: Vec<&PairDistribution> = lower1.iter().collect();
        let n2 = collision_rhs(ops, terms, &l1, &star)?;
        let k2 = rhs(&star, n2)?;
        let out = combine(f, &[(0.5 * h, &k1), (0.5 * h, &k2)]);
        Ok((out, vec![f.clone(), star]))
    }
}

/// Advance one level by one step of the configured splitting.
fn split_step(
    ops: &SolverOps,
    cfg: &SolverConfig,
    table: &TermTable,
    epsilon: f64,
    lower: &[&StepTrace],
    state: &mut LevelState,
    step: u64,
    record: bool,
) -> Result<StepTrace> {
    ops.check(&state.f)?;
    let t = step as f64 * cfg.dt;
    let mut trace = StepTrace::default();
    let (mut fk, mut ck, mut mk) = (0usize, 0usize, 0usize);
    let missing = |what: &str| VmbError::OutOfOrder { level: lower.len(), detail: format!("lower trace lacks {what}") };
    for (idx, sub) in schedule(cfg).into_iter().enumerate() {
        match sub {
            Substep::Transport(tau) => {
                let (f, current) = transport(ops, &state.f, tau)?;
                state.f = f;
                match table.closure {
                    FieldClosure::Impulse => longitudinal_impulse(&mut state.e, &current, &ops.x)?,
                    FieldClosure::Poisson => state.e = poisson_field(&state.f.charge_density(&ops.v), &ops.x)?,
                }
            }
            Substep::Force(h) => {
                let mut lower_e = Vec::with_capacity(lower.len());
                for tr in lower {
                    lower_e.push(tr.force_e.get(fk).ok_or_else(|| missing("force fields"))?);
                }
                let stage_f = |s: usize| -> Result<Vec<&PairDistribution>> {
                    lower
                        .iter()
                        .map(|tr| tr.force_stages.get(fk).and_then(|st| st.get(s)).ok_or_else(|| missing("force stages")))
                        .collect()
                };
                let inputs = |s: usize| -> Result<StageInputs> {
                    Ok(StageInputs { own_e: &state.e, own_b: &state.b, lower_e: lower_e.clone(), lower_f: stage_f(s)? })
                };
                let bound = cfl_bound(ops, &table.force, &inputs(0)?);
                if cfg.dt > bound {
                    return Err(VmbError::Cfl { dt: cfg.dt, bound });
                }
                let f0 = &state.f;
                let k1 = force_rhs(ops, &table.force, &inputs(0)?, f0);
                let y2 = combine(f0, &[(0.5 * h, &k1)]);
                let k2 = force_rhs(ops, &table.force, &inputs(1)?, &y2);
                let y3 = combine(f0, &[(0.5 * h, &k2)]);
                let k3 = force_rhs(ops, &table.force, &inputs(2)?, &y3);
                let y4 = combine(f0, &[(h, &k3)]);
                let k4 = force_rhs(ops, &table.force, &inputs(3)?, &y4);
                let f1 = combine(f0, &[(h / 6.0, &k1), (h / 3.0, &k2), (h / 3.0, &k3), (h / 6.0, &k4)]);
                if record {
                    trace.force_e.push(state.e.clone());
                    trace.force_stages.push(vec![f0.clone(), y2, y3, y4]);
                }
                state.f = f1;
                fk += 1;
            }
            Substep::Collision(h) => {
                let lower_stage = |s: usize| -> Vec<PairDistribution> {
                    lower
                        .iter()
                        .map(|tr| tr.collision_stages.get(ck).and_then(|st| st.get(s)).cloned().unwrap_or_else(|| ops.zeros()))
                        .collect()
                };
                if !table.collision.is_empty() {
                    for tr in lower {
                        if tr.collision_stages.get(ck).map_or(true, |st| st.len() < 2) {
                            return Err(missing("collision stages"));
                        }
                    }
                }
                let (f1, stages) = collision_substep(ops, cfg, &table.collision, h, &state.f, &lower_stage)?;
                if record {
                    trace.collision_stages.push(stages);
                }
                state.f = f1;
                ck += 1;
            }
            Substep::Maxwell(h) => {
                if let Some(source) = &table.maxwell {
                    let mut j = state.f.current_density(&ops.v);
                    for c in j.iter_mut() {
                        c.iter_mut().for_each(|x| *x *= source.own);
                    }
                    for (l, w) in source.lower.iter().enumerate() {
                        let tr = lower.get(l).ok_or_else(|| missing("levels"))?;
                        let fl = tr.maxwell_f.get(mk).ok_or_else(|| missing("Maxwell distribution"))?;
                        let jl = fl.current_density(&ops.v);
                        for a in 0..3 {
                            for (x, y) in j[a].iter_mut().zip(&jl[a]) {
                                *x += w * y;
                            }
                        }
                    }
                    let em = EMState { e: state.e.clone(), b_tilde: state.b.clone(), b_background: [0.0; 3], epsilon };
                    let next = maxwell_rotation_substep(&em, &j, h, &ops.x)?;
                    state.e = next.e;
                    state.b = next.b_tilde;
                }
                if record {
                    trace.maxwell_f.push(state.f.clone());
                }
                mk += 1;
            }
        }
        if !state.is_finite() {
            return Err(VmbError::NonFinite { substep: idx, step, t });
        }
    }
    Ok(trace)
}

/// Unknowns of the perturbative VMB system.
#[derive(Clone, Debug, PartialEq)]
pub struct VMBState {
    pub f: PairDistribution,
    pub em: EMState,
    pub t: f64,
    pub step: u64,
}

impl VMBState {
    pub fn zeros(ops: &SolverOps, background: [f64; 3], epsilon: f64) -> Self {
        VMBState { f: ops.zeros(), em: EMState::zeros(ops.x.len(), background, epsilon), t: 0.0, step: 0 }
    }

    pub fn is_finite(&self) -> bool {
        self.f.is_finite() && self.em.is_finite()
    }

    /// Total charge ∫∫ μ^{1/2}(f₊ − f₋).
    pub fn total_charge(&self, ops: &SolverOps) -> f64 {
        ops.x.cell_volume() * self.f.charge_density(&ops.v).iter().sum::<f64>()
    }
}

/// One step of the perturbative VMB system.
pub fn step_vmb(state: &VMBState, ops: &SolverOps, cfg: &SolverConfig) -> Result<VMBState> {
    state.em.check_grid(&ops.x)?;
    let table = vmb_terms(state.em.epsilon, state.em.b_background, cfg.collision_mode);
    let mut level = LevelState { f: state.f.clone(), e: state.em.e.clone(), b: state.em.b_tilde.clone() };
    split_step(ops, cfg, &table, state.em.epsilon, &[], &mut level, state.step, false)?;
    let step = state.step + 1;
    Ok(VMBState {
        f: level.f,
        em: EMState { e: level.e, b_tilde: level.b, b_background: state.em.b_background, epsilon: state.em.epsilon },
        t: step as f64 * cfg.dt,
        step,
    })
}

/// Unknowns of the Poisson-closed limit system.
#[derive(Clone, Debug, PartialEq)]
pub struct VPBState {
    pub f: PairDistribution,
    pub e: Field3,
    pub epsilon: f64,
    pub t: f64,
    pub step: u64,
    /// ‖(E(t+dt) − E(t))/dt + j_∥‖ of the last step, with j_∥ from the average of the end distributions.
    pub ampere_residual: f64,
}

impl VPBState {
    /// State with E closed by the Poisson equation; fails on non-neutral data.
    pub fn new(f: PairDistribution, epsilon: f64, ops: &SolverOps) -> Result<Self> {
        ops.check(&f)?;
        let e = poisson_field(&f.charge_density(&ops.v), &ops.x)?;
        Ok(VPBState { f, e, epsilon, t: 0.0, step: 0, ampere_residual: 0.0 })
    }
}

/// One step of the Poisson-closed system with constant field `b_eff`.
pub fn step_vpb(state: &VPBState, b_eff: [f64; 3], ops: &SolverOps, cfg: &SolverConfig) -> Result<VPBState> {
    let table = vpb_terms(state.epsilon, b_eff, cfg.collision_mode);
    let mut level = LevelState { f: state.f.clone(), e: state.e.clone(), b: zero_field(ops.x.len()) };
    split_step(ops, cfg, &table, state.epsilon, &[], &mut level, state.step, false)?;
    let ampere_residual = ampere_defect(ops, &state.f, &state.e, &level.f, &level.e, cfg.dt)?;
    let step = state.step + 1;
    Ok(VPBState { f: level.f, e: level.e, epsilon: state.epsilon, t: step as f64 * cfg.dt, step, ampere_residual })
}

fn ampere_defect(
    ops: &SolverOps,
    f0: &PairDistribution,
    e0: &Field3,
    f1: &PairDistribution,
    e1: &Field3,
    dt: f64,
) -> Result<f64> {
    let mut avg = f0.clone();
    avg.axpy(1.0, f1);
    avg.scale(0.5);
    let j = longitudinal_part(&ops.x, &avg.current_density(&ops.v))?;
    let mut total = 0.0;
    for a in 0..3 {
        let r: Vec<f64> = (0..ops.x.len()).map(|i| (e1[a][i] - e0[a][i]) / dt + j[a][i]).collect();
        total += ops.x.norm_sq(&r);
    }
    Ok(total.sqrt())
}

/// Leading term, linear correctors and remainder of the expansion in powers of ε.
#[derive(Clone, Debug)]
pub struct CascadeState {
    pub m: usize,
    pub epsilon: f64,
    pub b_p: [f64; 3],
    /// Constant fields B^i, i = 1..m−1.
    pub b_i: Vec<[f64; 3]>,
    pub leader: LevelState,
    pub linear: Vec<LevelState>,
    pub remainder: LevelState,
    /// Completed steps per level: leader, linear levels, remainder.
    pub steps: Vec<u64>,
    traces: Vec<Option<StepTrace>>,
}

impl CascadeState {
    /// Builds the cascade; E of the leader and of the linear levels come from their charge densities.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ops: &SolverOps,
        m: usize,
        epsilon: f64,
        b_p: [f64; 3],
        b_i: Vec<[f64; 3]>,
        f_p: PairDistribution,
        f_linear: Vec<PairDistribution>,
        remainder: LevelState,
    ) -> Result<Self> {
        if m == 0 {
            return Err(VmbError::Config("expansion order m must be at least 1".into()));
        }
        if f_linear.len() != m - 1 || b_i.len() != m - 1 {
            return Err(VmbError::Config(format!("order m = {m} needs {} linear levels and constants", m - 1)));
        }
        if !(epsilon > 0.0) {
            return Err(VmbError::Config(format!("epsilon must be positive, got {epsilon}")));
        }
        let closed = |f: PairDistribution| -> Result<LevelState> {
            ops.check(&f)?;
            let e = poisson_field(&f.charge_density(&ops.v), &ops.x)?;
            Ok(LevelState { f, e, b: zero_field(ops.x.len()) })
        };
        ops.check(&remainder.f)?;
        let leader = closed(f_p)?;
        let linear = f_linear.into_iter().map(closed).collect::<Result<Vec<_>>>()?;
        Ok(CascadeState { m, epsilon, b_p, b_i, leader, linear, remainder, steps: vec![0; m + 1], traces: vec![None; m] })
    }

    /// B^P + Σ ε^i B^i.
    pub fn b_eff(&self) -> [f64; 3] {
        let mut b = self.b_p;
        for (i, bi) in self.b_i.iter().enumerate() {
            let w = self.epsilon.powi(i as i32 + 1);
            for a in 0..3 {
                b[a] += w * bi[a];
            }
        }
        b
    }

    pub fn level(&self, i: usize) -> &LevelState {
        if i == 0 {
            &self.leader
        } else if i < self.m {
            &self.linear[i - 1]
        } else {
            &self.remainder
        }
    }

    /// f^P + Σ ε^i f^i + ε^m f^m with the matching fields, as a VMB state over `background`.
    pub fn reassemble(&self, background: [f64; 3], dt: f64) -> VMBState {
        let nx = self.leader.f.nx;
        let mut f = self.leader.f.clone();
        let mut e = self.leader.e.clone();
        let mut b = zero_field(nx);
        let b_eff = self.b_eff();
        for a in 0..3 {
            b[a].iter_mut().for_each(|x| *x = b_eff[a] - background[a]);
        }
        for i in 1..=self.m {
            let w = self.epsilon.powi(i as i32);
            let lv = self.level(i);
            f.axpy(w, &lv.f);
            for a in 0..3 {
                for (x, y) in e[a].iter_mut().zip(&lv.e[a]) {
                    *x += w * y;
                }
                if i == self.m {
                    for (x, y) in b[a].iter_mut().zip(&lv.b[a]) {
                        *x += w * y;
                    }
                }
            }
        }
        let step = self.steps[0];
        VMBState { f, em: EMState { e, b_tilde: b, b_background: background, epsilon: self.epsilon }, t: step as f64 * dt, step }
    }
}

/// Advance the leading term; every level must have completed the previous step.
pub fn step_cascade_leader(cascade: &mut CascadeState, ops: &SolverOps, cfg: &SolverConfig) -> Result<()> {
    let s = cascade.steps[0];
    if let Some(l) = cascade.steps.iter().position(|&x| x != s) {
        return Err(VmbError::OutOfOrder { level: 0, detail: format!("level {l} has not completed step {s}") });
    }
    let table = vpb_terms(cascade.epsilon, cascade.b_eff(), cfg.collision_mode);
    let record = cascade.m > 0;
    let trace = split_step(ops, cfg, &table, cascade.epsilon, &[], &mut cascade.leader, s, record)?;
    cascade.traces[0] = Some(trace);
    cascade.steps[0] = s + 1;
    Ok(())
}

fn check_prerequisites(cascade: &CascadeState, level: usize) -> Result<u64> {
    let s = cascade.steps[level];
    for j in 0..level {
        if cascade.steps[j] != s + 1 || cascade.traces[j].is_none() {
            return Err(VmbError::OutOfOrder {
                level,
                detail: format!("level {j} is at step {} but level {level} needs it at step {}", cascade.steps[j], s + 1),
            });
        }
    }
    Ok(s)
}

/// Advance the linear corrector of order `i` (1 ≤ i ≤ m−1).
pub fn step_cascade_linear(i: usize, cascade: &mut CascadeState, ops: &SolverOps, cfg: &SolverConfig) -> Result<()> {
    if i == 0 || i >= cascade.m {
        return Err(VmbError::Invalid(format!("linear level {i} outside 1..{}", cascade.m)));
    }
    let s = check_prerequisites(cascade, i)?;
    let table = linear_terms(i, cascade.epsilon, cascade.b_eff(), cfg.collision_mode);
    let lower: Vec<StepTrace> = cascade.traces[..i].iter().map(|t| t.clone().expect("checked")).collect();
    let refs: Vec<&StepTrace> = lower.iter().collect();
    let trace = split_step(ops, cfg, &table, cascade.epsilon, &refs, &mut cascade.linear[i - 1], s, true)?;
    cascade.traces[i] = Some(trace);
    cascade.steps[i] = s + 1;
    Ok(())
}

/// Advance the remainder (f^m, E^m, B^m).
pub fn step_remainder(cascade: &mut CascadeState, ops: &SolverOps, cfg: &SolverConfig) -> Result<()> {
    let m = cascade.m;
    let s = check_prerequisites(cascade, m)?;
    let table = remainder_terms(m, cascade.epsilon, cascade.b_eff(), cfg.collision_mode, cfg.remainder_convention);
    let traces = std::mem::take(&mut cascade.traces);
    let refs: Vec<&StepTrace> = traces.iter().map(|t| t.as_ref().expect("checked")).collect();
    let res = split_step(ops, cfg, &table, cascade.epsilon, &refs, &mut cascade.remainder, s, false);
    cascade.traces = traces;
    res?;
    cascade.steps[m] = s + 1;
    Ok(())
}

/// One full cascade step: leader, linear levels in order, remainder.
pub fn step_cascade(cascade: &mut CascadeState, ops: &SolverOps, cfg: &SolverConfig) -> Result<()> {
    step_cascade_leader(cascade, ops, cfg)?;
    for i in 1..cascade.m {
        step_cascade_linear(i, cascade, ops, cfg)?;
    }
    step_remainder(cascade, ops, cfg)
}

/// Which system `run` integrates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum System {
    Vmb,
    /// Poisson-closed system with constant field `b_eff`; B̃ stays zero.
    Vpb { b_eff: [f64; 3] },
}

/// Receives the state at every recorded step.
pub trait Recorder {
    fn record(&mut self, state: &VMBState) -> Result<()>;
}

impl<F: FnMut(&VMBState) -> Result<()>> Recorder for F {
    fn record(&mut self, state: &VMBState) -> Result<()> {
        self(state)
    }
}

/// Outcome of `run`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub final_state: VMBState,
    pub recorded_steps: Vec<u64>,
}

fn step_system(state: &VMBState, system: System, ops: &SolverOps, cfg: &SolverConfig) -> Result<VMBState> {
    match system {
        System::Vmb => step_vmb(state, ops, cfg),
        System::Vpb { b_eff } => {
            let vpb = VPBState {
                f: state.f.clone(),
                e: state.em.e.clone(),
                epsilon: state.em.epsilon,
                t: state.t,
                step: state.step,
                ampere_residual: 0.0,
            };
            let next = step_vpb(&vpb, b_eff, ops, cfg)?;
            Ok(VMBState {
                f: next.f,
                em: EMState { e: next.e, b_tilde: state.em.b_tilde.clone(), b_background: state.em.b_background, epsilon: state.em.epsilon },
                t: next.t,
                step: next.step,
            })
        }
    }
}

/// Integrate to `cfg.t_end`, recording every `cfg.record_every` steps and writing
/// `state_<step>.ckpt` into `checkpoint_dir` every `cfg.checkpoint_every` steps.
///
/// A state whose `step` is nonzero (as loaded from a checkpoint) resumes from that step.
pub fn run(
    initial: &VMBState,
    system: System,
    ops: &SolverOps,
    cfg: &SolverConfig,
    recorder: &mut dyn Recorder,
    checkpoint_dir: Option<&Path>,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = cfg.n_steps();
    let mut state = initial.clone();
    let mut recorded_steps = Vec::new();
    if n == 0 {
        return Ok(Trajectory { final_state: state, recorded_steps });
    }
    let start = state.step;
    if start > n {
        return Err(VmbError::Config(format!("state is at step {start}, beyond the final step {n}")));
    }
    loop {
        let k = state.step;
        if k % cfg.record_every as u64 == 0 {
            recorder.record(&state)?;
            recorded_steps.push(k);
        }
        if let Some(dir) = checkpoint_dir {
            if cfg.checkpoint_every > 0 && k % cfg.checkpoint_every as u64 == 0 && k != start {
                save_checkpoint(&dir.join(format!("state_{k}.ckpt")), &state)?;
            }
        }
        if k == n {
            break;
        }
        state = step_system(&state, system, ops, cfg)?;
    }
    Ok(Trajectory { final_state: state, recorded_steps })
}

/// Write a VMB state in the binary checkpoint format.
pub fn save_checkpoint(path: &Path, state: &VMBState) -> Result<()> {
    let (nx, nv) = state.f.shape();
    let meta = serde_json::json!({
        "step": state.step,
        "t": state.t,
        "epsilon": state.em.epsilon,
        "b_background": state.em.b_background,
    });
    let mut arrays: Vec<(&str, Vec<usize>, &[f64])> =
        vec![("f_plus", vec![nx, nv], &state.f.plus), ("f_minus", vec![nx, nv], &state.f.minus)];
    let names_e = ["e1", "e2", "e3"];
    let names_b = ["b1", "b2", "b3"];
    for a in 0..3 {
        arrays.push((names_e[a], vec![nx], &state.em.e[a]));
    }
    for a in 0..3 {
        arrays.push((names_b[a], vec![nx], &state.em.b_tilde[a]));
    }
    write_checkpoint(path, meta, &arrays)
}

/// Read a VMB state written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<VMBState> {
    let (header, mut arrays) = read_checkpoint(path)?;
    if arrays.len() != 8 {
        return Err(VmbError::Invalid(format!("checkpoint holds {} arrays, expected 8", arrays.len())));
    }
    let shape = &header.arrays[0].1;
    if shape.len() != 2 {
        return Err(VmbError::Invalid("distribution array must be two-dimensional".into()));
    }
    let meta = &header.meta;
    let num = |k: &str| meta.get(k).and_then(|v| v.as_f64()).ok_or_else(|| VmbError::Invalid(format!("checkpoint meta lacks {k}")));
    let step = meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| VmbError::Invalid("checkpoint meta lacks step".into()))?;
    let bg: [f64; 3] = serde_json::from_value(meta.get("b_background").cloned().unwrap_or_default())?;
    let mut take = |i: usize| std::mem::take(&mut arrays[i]);
    let f = PairDistribution::from_parts(shape[0], shape[1], take(0), take(1))?;
    let e = [take(2), take(3), take(4)];
    let b = [take(5), take(6), take(7)];
    Ok(VMBState { f, em: EMState { e, b_tilde: b, b_background: bg, epsilon: num("epsilon")? }, t: num("t")?, step })
}
