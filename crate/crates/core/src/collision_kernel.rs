//! Cutoff Boltzmann collision machinery on the velocity lattice: the collision
//! integral Q, the collision frequency ν, the linearized operator L = ν − K and
//! the bilinear operator Γ.
//!
//! Collisions are discretized with a lattice-conforming discrete-velocity model:
//! a pair (v, u) may scatter only into pairs (v', u') that are again lattice
//! nodes, with the angular integral replaced by an equal-weight average over the
//! lattice points of the collision sphere. Mass, momentum and energy are then
//! conserved exactly and Q(μ, μ) vanishes to round-off.

use std::collections::HashMap;
use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use gauss_quad::legendre::GaussLegendre;
use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, VmbError};
use crate::phase_grid::{read_checkpoint, write_checkpoint, PairDistribution, VelocityGrid, VelocitySpec};

/// Angular part b(cos θ) of the collision kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AngularProfile {
    /// b(c) = |c| (hard spheres).
    AbsCos,
    /// b(c) = |c|^p.
    Power { p: f64 },
    /// b(c) = value. Violates the Grad bound near grazing angles; kept for fault injection.
    Constant { value: f64 },
}

impl AngularProfile {
    pub fn eval(&self, c: f64) -> f64 {
        match self {
            AngularProfile::AbsCos => c.abs(),
            AngularProfile::Power { p } => c.abs().powf(*p),
            AngularProfile::Constant { value } => *value,
        }
    }

    /// b(c)/c for c in (0, 1]; at c = 0 the limit when it is finite.
    fn over_c(&self, c: f64) -> Option<f64> {
        if c > 0.0 {
            return Some(self.eval(c) / c);
        }
        match self {
            AngularProfile::AbsCos => Some(1.0),
            AngularProfile::Power { p } if *p > 1.0 => Some(0.0),
            AngularProfile::Power { p } if *p == 1.0 => Some(1.0),
            _ => None,
        }
    }
}

/// Product rule on S²: Gauss–Legendre in cos θ on each hemisphere times the trapezoid rule in φ.
#[derive(Clone, Debug)]
pub struct SphereQuadrature {
    pub nodes: Vec<[f64; 3]>,
    pub weights: Vec<f64>,
}

impl SphereQuadrature {
    pub fn product(n_polar: usize, n_azimuth: usize) -> Result<Self> {
        if n_polar < 2 || n_azimuth < 1 {
            return Err(VmbError::Config("sphere quadrature needs n_polar >= 2 and n_azimuth >= 1".into()));
        }
        let half = NonZeroUsize::new(n_polar.div_ceil(2)).expect("nonzero");
        let gl = GaussLegendre::new(half);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let dphi = 2.0 * PI / n_azimuth as f64;
        for (lo, hi) in [(-1.0, 0.0), (0.0, 1.0)] {
            for &(x, w) in gl.as_node_weight_pairs() {
                let z = 0.5 * ((hi - lo) * x + hi + lo);
                let wz = 0.5 * (hi - lo) * w;
                let rho = (1.0 - z * z).max(0.0).sqrt();
                for k in 0..n_azimuth {
                    let phi = (k as f64 + 0.5) * dphi;
                    nodes.push([rho * phi.cos(), rho * phi.sin(), z]);
                    weights.push(wz * dphi);
                }
            }
        }
        Ok(SphereQuadrature { nodes, weights })
    }

    pub fn integrate(&self, f: impl Fn([f64; 3]) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(&n, &w)| w * f(n)).sum()
    }
}

/// Serializable kernel parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelSpec {
    pub gamma: f64,
    pub profile: AngularProfile,
    /// Constant C of the Grad bound b(c) ≤ C|c|.
    pub grad_c: f64,
    pub n_polar: usize,
    pub n_azimuth: usize,
    /// Prefactor (σ₊+σ₋)²/4.
    pub scale: f64,
    /// Entries with μ below this are zeroed before dividing by μ^{1/2}.
    pub mu_floor: f64,
    pub memory_budget_mb: usize,
    pub symmetry_tol: f64,
}

impl Default for KernelSpec {
    fn default() -> Self {
        KernelSpec {
            gamma: 1.0,
            profile: AngularProfile::AbsCos,
            grad_c: 1.0,
            n_polar: 32,
            n_azimuth: 32,
            scale: 1.0,
            mu_floor: 1e-280,
            memory_budget_mb: 2048,
            symmetry_tol: 1e-10,
        }
    }
}

/// Kernel model with its sphere quadrature.
#[derive(Clone, Debug)]
pub struct KernelModel {
    pub spec: KernelSpec,
    pub sphere: SphereQuadrature,
}

/// Outcome of the Grad-bound check at the sphere quadrature nodes.
#[derive(Clone, Debug, Serialize)]
pub struct GradCheck {
    pub passed: bool,
    pub max_violation: f64,
}

impl KernelModel {
    pub fn new(spec: KernelSpec) -> Result<Self> {
        if !(spec.gamma > -3.0 && spec.gamma <= 1.0) {
            return Err(VmbError::Divergent(spec.gamma));
        }
        if !(spec.scale > 0.0 && spec.grad_c > 0.0) {
            return Err(VmbError::Config("kernel scale and Grad constant must be positive".into()));
        }
        let sphere = SphereQuadrature::product(spec.n_polar, spec.n_azimuth)?;
        Ok(KernelModel { spec, sphere })
    }

    pub fn hard_sphere() -> Self {
        KernelModel::new(KernelSpec::default()).expect("default kernel is valid")
    }

    /// Checks 0 ≤ b(ω·û) ≤ C|ω·û| at every sphere node (û along the third axis).
    pub fn check_grad_bound(&self) -> GradCheck {
        let c = self.spec.grad_c;
        let mut worst: f64 = 0.0;
        for n in &self.sphere.nodes {
            let cos = n[2];
            let b = self.spec.profile.eval(cos);
            worst = worst.max(-b).max(b - c * cos.abs());
        }
        GradCheck { passed: worst <= 1e-14, max_violation: worst }
    }

    /// ∫_{S²} b(ω·û) dω by sphere quadrature.
    pub fn angular_integral(&self) -> f64 {
        self.sphere.integrate(|n| self.spec.profile.eval(n[2]))
    }
}

/// `∫ |v−u|^γ μ(u) du` as a function of s = |v|, by radial Gauss–Legendre quadrature.
fn radial_moment(s: f64, gamma: f64) -> f64 {
    let gl = GaussLegendre::new(NonZeroUsize::new(20).expect("nonzero"));
    let pref = (2.0 * PI).powf(-1.5) * 2.0 * PI;
    let integrand = |r: f64| -> f64 {
        if r <= 0.0 {
            return 0.0;
        }
        let ang = if s * r < 1e-8 {
            2.0 * r * (-(r * r + s * s) / 2.0).exp()
        } else {
            (-(r - s) * (r - s) / 2.0).exp() * (-(-2.0 * r * s).exp_m1()) / s
        };
        pref * r.powf(gamma + 1.0) * ang
    };
    let top = s + 14.0;
    let mut total = 0.0;
    let mut lo = 0.5f64.powi(60);
    let mut hi = 2.0 * lo;
    while hi < 0.5 {
        total += gl.integrate(lo, hi, integrand);
        lo = hi;
        hi *= 2.0;
    }
    let mut a = lo;
    while a < top {
        let b = (a + 0.5).min(top);
        total += gl.integrate(a, b, integrand);
        a = b;
    }
    total
}

/// ν(v) = 2∫∫|v−u|^γ b(ω·(v−u)/|v−u|) μ(u) dω du, evaluated off the lattice by quadrature.
pub fn collision_frequency(v: [f64; 3], model: &KernelModel) -> Result<f64> {
    if !(model.spec.gamma > -3.0) {
        return Err(VmbError::Divergent(model.spec.gamma));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(VmbError::Invalid("velocity must be finite".into()));
    }
    let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    Ok(2.0 * model.spec.scale * model.angular_integral() * radial_moment(s, model.spec.gamma))
}

/// Lattice-conforming collision table: for every index difference w, the admissible
/// post-collision differences w' with their weights.
#[derive(Clone, Debug)]
pub struct CollisionTable {
    pub n_v: usize,
    side: usize,
    offsets: Vec<usize>,
    entries: Vec<([i32; 3], f64)>,
    /// Number of stored (w, w') candidates.
    pub total_candidates: usize,
}

impl CollisionTable {
    pub fn new(grid: &VelocityGrid, model: &KernelModel) -> Self {
        let n = grid.n_v as i32;
        let span = n - 1;
        let reach = ((3.0f64).sqrt() * span as f64).ceil() as i32;
        let mut classes: HashMap<(i32, u8), Vec<[i32; 3]>> = HashMap::new();
        for a in -reach..=reach {
            for b in -reach..=reach {
                for c in -reach..=reach {
                    let r2 = a * a + b * b + c * c;
                    if r2 > 3 * span * span {
                        continue;
                    }
                    classes.entry((r2, parity(&[a, b, c]))).or_default().push([a, b, c]);
                }
            }
        }
        let side = (2 * span + 1) as usize;
        let mut offsets = Vec::with_capacity(side * side * side + 1);
        let mut entries = Vec::new();
        offsets.push(0);
        let dv = grid.dv;
        let spec = &model.spec;
        for a in -span..=span {
            for b in -span..=span {
                for c in -span..=span {
                    let w = [a, b, c];
                    let r2 = a * a + b * b + c * c;
                    if r2 > 0 {
                        let class = &classes[&(r2, parity(&w))];
                        let count = class.len() as f64;
                        let len = (r2 as f64).sqrt();
                        let base = spec.scale * (dv * len).powf(spec.gamma) * 2.0 * PI / count;
                        for wp in class {
                            if wp.iter().any(|x| x.abs() > span) {
                                continue;
                            }
                            let cos_ws = (w[0] * wp[0] + w[1] * wp[1] + w[2] * wp[2]) as f64 / r2 as f64;
                            let cc = ((1.0 - cos_ws) / 2.0).max(0.0).sqrt();
                            let cc = if *wp == w { 0.0 } else { cc };
                            if let Some(ratio) = spec.profile.over_c(cc) {
                                if ratio != 0.0 {
                                    entries.push((*wp, base * ratio));
                                }
                            }
                        }
                    }
                    offsets.push(entries.len());
                }
            }
        }
        let total_candidates = entries.len();
        CollisionTable { n_v: grid.n_v, side, offsets, entries, total_candidates }
    }

    fn slot(&self, w: [i32; 3]) -> usize {
        let span = self.n_v as i32 - 1;
        let s = self.side;
        ((w[0] + span) as usize * s + (w[1] + span) as usize) * s + (w[2] + span) as usize
    }

    /// Calls `visit(q, p', q', W)` for every kept collision of the pair (p, q), q over the lattice.
    /// W excludes the Δv³ quadrature weight.
    #[inline]
    pub fn for_each_collision<F: FnMut(usize, usize, usize, f64)>(&self, p: usize, mut visit: F) {
        let n = self.n_v as i32;
        let pi = unflatten(p, self.n_v);
        let hi = 2 * (n - 1);
        for q in 0..self.n_v.pow(3) {
            let qi = unflatten(q, self.n_v);
            let w = [pi[0] - qi[0], pi[1] - qi[1], pi[2] - qi[2]];
            if w == [0, 0, 0] {
                continue;
            }
            let c2 = [pi[0] + qi[0], pi[1] + qi[1], pi[2] + qi[2]];
            let lim = [c2[0].min(hi - c2[0]), c2[1].min(hi - c2[1]), c2[2].min(hi - c2[2])];
            let slot = self.slot(w);
            for &(wp, weight) in &self.entries[self.offsets[slot]..self.offsets[slot + 1]] {
                if wp[0].abs() > lim[0] || wp[1].abs() > lim[1] || wp[2].abs() > lim[2] {
                    continue;
                }
                let pp = [(c2[0] + wp[0]) / 2, (c2[1] + wp[1]) / 2, (c2[2] + wp[2]) / 2];
                let qp = [(c2[0] - wp[0]) / 2, (c2[1] - wp[1]) / 2, (c2[2] - wp[2]) / 2];
                visit(q, flatten(pp, self.n_v), flatten(qp, self.n_v), weight);
            }
        }
    }
}

fn parity(w: &[i32; 3]) -> u8 {
    ((w[0] & 1) | ((w[1] & 1) << 1) | ((w[2] & 1) << 2)) as u8
}

fn unflatten(idx: usize, n: usize) -> [i32; 3] {
    [(idx / (n * n)) as i32, ((idx / n) % n) as i32, (idx % n) as i32]
}

fn flatten(p: [i32; 3], n: usize) -> usize {
    (p[0] as usize * n + p[1] as usize) * n + p[2] as usize
}

/// Batched collision integral on the lattice.
#[derive(Clone, Debug)]
pub struct CollisionQuadrature {
    pub grid: VelocityGrid,
    pub model: KernelModel,
    pub table: CollisionTable,
}

impl CollisionQuadrature {
    pub fn new(grid: &VelocityGrid, model: &KernelModel) -> Self {
        CollisionQuadrature { grid: grid.clone(), model: model.clone(), table: CollisionTable::new(grid, model) }
    }

    /// Q(F_b, G_b) for a batch of column pairs stored `[v][b]` row-major with `batch` columns.
    pub fn q_batch(&self, f: &[f64], g: &[f64], batch: usize) -> Result<Vec<f64>> {
        let nv = self.grid.len();
        if f.len() != nv * batch || g.len() != nv * batch {
            return Err(VmbError::GridMismatch(format!(
                "collision arguments of length {}/{} do not match lattice {nv} × batch {batch}",
                f.len(),
                g.len()
            )));
        }
        let dw = self.grid.weight;
        let mut out = vec![0.0; nv * batch];
        out.par_chunks_mut(batch).enumerate().for_each(|(p, row)| {
            let mut loss = vec![0.0; nv];
            self.table.for_each_collision(p, |q, pp, qp, w| {
                loss[q] += w;
                let fp = &f[pp * batch..(pp + 1) * batch];
                let gq = &g[qp * batch..(qp + 1) * batch];
                for ((o, a), b) in row.iter_mut().zip(fp).zip(gq) {
                    *o += w * a * b;
                }
            });
            let fv = &f[p * batch..(p + 1) * batch];
            for (q, &s) in loss.iter().enumerate() {
                if s == 0.0 {
                    continue;
                }
                let gu = &g[q * batch..(q + 1) * batch];
                for ((o, a), b) in row.iter_mut().zip(fv).zip(gu) {
                    *o -= s * a * b;
                }
            }
            for o in row.iter_mut() {
                *o *= dw;
            }
        });
        Ok(out)
    }

    /// Q(F, G) for a single pair of lattice functions.
    pub fn q(&self, f: &[f64], g: &[f64]) -> Result<Vec<f64>> {
        self.q_batch(f, g, 1)
    }

    /// Lattice collision frequency ν_d(v) = 2 Σ_u Δv³ Σ_C W μ(u) over the kept collisions.
    pub fn lattice_frequency(&self, p: usize) -> f64 {
        let mu = &self.grid.mu;
        let mut acc = 0.0;
        self.table.for_each_collision(p, |q, _, _, w| acc += w * mu[q]);
        2.0 * self.grid.weight * acc
    }

    /// Γ±(g, h) = μ^{-1/2} Q(μ^{1/2} g±, μ^{1/2}(h₊ + h₋)), pointwise in x.
    /// Returns the result and the number of entries zeroed by the μ floor.
    pub fn gamma(&self, g: &PairDistribution, h: &PairDistribution) -> Result<(PairDistribution, usize)> {
        g.check_same(h)?;
        let nv = self.grid.len();
        if g.nv != nv {
            return Err(VmbError::GridMismatch("distribution lattice differs from collision lattice".into()));
        }
        let nx = g.nx;
        let batch = 2 * nx;
        let sm = &self.grid.sqrt_mu;
        let mut fa = vec![0.0; nv * batch];
        let mut ga = vec![0.0; nv * batch];
        for x in 0..nx {
            for v in 0..nv {
                let hs = h.plus[x * nv + v] + h.minus[x * nv + v];
                fa[v * batch + x] = sm[v] * g.plus[x * nv + v];
                fa[v * batch + nx + x] = sm[v] * g.minus[x * nv + v];
                ga[v * batch + x] = sm[v] * hs;
                ga[v * batch + nx + x] = sm[v] * hs;
            }
        }
        let q = self.q_batch(&fa, &ga, batch)?;
        let mut out = PairDistribution::zeros(nx, nv);
        let mut floored = 0;
        for v in 0..nv {
            let keep = self.grid.mu[v] >= self.model.spec.mu_floor;
            if !keep {
                floored += batch;
            }
            for x in 0..nx {
                if keep {
                    out.plus[x * nv + v] = q[v * batch + x] / sm[v];
                    out.minus[x * nv + v] = q[v * batch + nx + x] / sm[v];
                }
            }
        }
        Ok((out, floored))
    }
}

/// Gain-minus-loss quadrature of Q(F, G) on the lattice.
pub fn boltzmann_q(f: &[f64], g: &[f64], grid: &VelocityGrid, model: &KernelModel) -> Result<Vec<f64>> {
    CollisionQuadrature::new(grid, model).q(f, g)
}

/// Γ(g, h) for two-species perturbations.
pub fn gamma_bilinear(
    g: &PairDistribution,
    h: &PairDistribution,
    grid: &VelocityGrid,
    model: &KernelModel,
) -> Result<(PairDistribution, usize)> {
    CollisionQuadrature::new(grid, model).gamma(g, h)
}

/// Reflection symmetry v_i ↦ −v_i of the midpoint lattice. Every orbit has eight
/// members, so lattice functions split into eight parity classes χ.
#[derive(Clone, Debug)]
pub struct OctantSymmetry {
    pub n_v: usize,
    /// Representative nodes (all indices in the upper half).
    pub reps: Vec<usize>,
    /// orbit[r][s] = node obtained from reps[r] by flipping the axes in bitmask s.
    pub orbit: Vec<[usize; 8]>,
}

fn char_sign(chi: usize, s: usize) -> f64 {
    if (chi & s).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

impl OctantSymmetry {
    pub fn new(n_v: usize) -> Self {
        let h = n_v / 2;
        let mut reps = Vec::new();
        let mut orbit = Vec::new();
        for i in h..n_v {
            for j in h..n_v {
                for k in h..n_v {
                    let r = (i * n_v + j) * n_v + k;
                    reps.push(r);
                    let mut o = [0usize; 8];
                    for (s, slot) in o.iter_mut().enumerate() {
                        let ii = if s & 1 != 0 { n_v - 1 - i } else { i };
                        let jj = if s & 2 != 0 { n_v - 1 - j } else { j };
                        let kk = if s & 4 != 0 { n_v - 1 - k } else { k };
                        *slot = (ii * n_v + jj) * n_v + kk;
                    }
                    orbit.push(o);
                }
            }
        }
        OctantSymmetry { n_v, reps, orbit }
    }

    pub fn block_size(&self) -> usize {
        self.reps.len()
    }

    /// Split `ncols` lattice functions (row `c` of `data` is `data[c*nv..(c+1)*nv]`)
    /// into eight class blocks of shape (block_size × ncols).
    pub fn split(&self, data: &[f64], ncols: usize) -> Vec<DMatrix<f64>> {
        let nv = self.n_v.pow(3);
        let m = self.block_size();
        let norm = 1.0 / 8f64.sqrt();
        let mut out = vec![DMatrix::zeros(m, ncols); 8];
        for c in 0..ncols {
            let row = &data[c * nv..(c + 1) * nv];
            for (r, o) in self.orbit.iter().enumerate() {
                let vals: [f64; 8] = std::array::from_fn(|s| row[o[s]]);
                for (chi, blk) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for (s, v) in vals.iter().enumerate() {
                        acc += char_sign(chi, s) * v;
                    }
                    blk[(r, c)] = norm * acc;
                }
            }
        }
        out
    }

    /// Inverse of [`split`](Self::split).
    pub fn merge(&self, blocks: &[DMatrix<f64>], data: &mut [f64]) {
        let nv = self.n_v.pow(3);
        let ncols = blocks[0].ncols();
        let norm = 1.0 / 8f64.sqrt();
        for c in 0..ncols {
            let row = &mut data[c * nv..(c + 1) * nv];
            for (r, o) in self.orbit.iter().enumerate() {
                let ys: [f64; 8] = std::array::from_fn(|chi| blocks[chi][(r, c)]);
                for s in 0..8 {
                    let mut acc = 0.0;
                    for (chi, y) in ys.iter().enumerate() {
                        acc += char_sign(chi, s) * y;
                    }
                    row[o[s]] = norm * acc;
                }
            }
        }
    }
}

/// A symmetric operator stored as its eight parity blocks.
#[derive(Clone, Debug)]
pub struct BlockOperator {
    pub blocks: Vec<DMatrix<f64>>,
}

impl BlockOperator {
    /// Apply to `ncols` lattice functions in place.
    pub fn apply(&self, sym: &OctantSymmetry, data: &mut [f64], ncols: usize) {
        if ncols == 0 {
            return;
        }
        let parts = sym.split(data, ncols);
        let out: Vec<DMatrix<f64>> = parts.iter().zip(&self.blocks).map(|(y, b)| b * y).collect();
        sym.merge(&out, data);
    }
}

/// Eigen-decomposition of one channel of L, block by block.
#[derive(Clone, Debug)]
pub struct ChannelSpectrum {
    pub values: Vec<Vec<f64>>,
    pub vectors: Vec<DMatrix<f64>>,
    /// Largest magnitude among the eigenvalues identified as the null space and set to 0.
    pub null_residual: f64,
}

impl ChannelSpectrum {
    fn function(&self, map: impl Fn(f64) -> f64) -> BlockOperator {
        let blocks = self
            .values
            .iter()
            .zip(&self.vectors)
            .map(|(vals, vecs)| {
                let mut scaled = vecs.clone();
                for (j, &l) in vals.iter().enumerate() {
                    let f = map(l);
                    scaled.column_mut(j).scale_mut(f);
                }
                &scaled * vecs.transpose()
            })
            .collect();
        BlockOperator { blocks }
    }

    /// Smallest nonzero eigenvalue over all blocks.
    pub fn gap(&self) -> f64 {
        self.values.iter().flatten().copied().filter(|&l| l != 0.0).fold(f64::INFINITY, f64::min)
    }
}

/// φ₁(z) = (e^z − 1)/z.
pub fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-5 {
        1.0 + z / 2.0 + z * z / 6.0 + z * z * z / 24.0
    } else {
        z.exp_m1() / z
    }
}

/// φ₂(z) = (e^z − 1 − z)/z².
pub fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 6.0 + z * z / 24.0 + z * z * z / 120.0 + z.powi(4) / 720.0
    } else {
        (z.exp_m1() - z) / (z * z)
    }
}

/// Channel functions of L for a collision substep of length h.
#[derive(Clone, Debug)]
pub struct CollisionPropagator {
    pub h: f64,
    /// e^{−hL}, φ₁(−hL), φ₂(−hL) for the sum (index 0) and difference (index 1) channels.
    pub exp: [BlockOperator; 2],
    pub phi1: [BlockOperator; 2],
    pub phi2: [BlockOperator; 2],
}

/// Coercivity measurement: min of ⟨f, Lf⟩ / ‖f‖²_ν over microscopic f.
#[derive(Clone, Debug, Serialize)]
pub struct CoercivityReport {
    pub sigma0: f64,
    pub sigma_sum_channel: f64,
    pub sigma_diff_channel: f64,
    /// Smallest nonzero eigenvalue of L itself (plain lattice inner product).
    pub spectral_gap: f64,
}

/// L = ν − K on the velocity lattice for the two-species system.
///
/// K acts as (Kg)± = K_same g± + K_cross g∓. The operator commutes with the
/// lattice reflections, so only the rows of one octant are stored; the sum
/// channel g₊+g₋ uses K_same + K_cross and the difference channel uses K_same − K_cross.
#[derive(Clone, Debug)]
pub struct LinearizedOperator {
    pub grid: VelocityGrid,
    pub model: KernelModel,
    pub nu: Vec<f64>,
    pub sym: OctantSymmetry,
    /// Octant rows of K_same and K_cross (block_size × nv, row-major).
    pub rows_same: Vec<f64>,
    pub rows_cross: Vec<f64>,
    /// Relative symmetry defect of the assembled L.
    pub symmetry_defect: f64,
    /// Parity blocks of L per channel.
    pub channels: [BlockOperator; 2],
    pub spectra: [ChannelSpectrum; 2],
    pub hash: String,
}

/// Null-space dimension of each parity class: sum channel then difference channel.
fn null_counts(channel: usize, chi: usize) -> usize {
    match (channel, chi) {
        (0, 0) => 2,
        (0, 1) | (0, 2) | (0, 4) => 1,
        (1, 0) => 1,
        _ => 0,
    }
}

/// Content hash of the operator parameters.
pub fn operator_hash(grid: &VelocitySpec, model: &KernelSpec) -> String {
    let text = serde_json::json!({ "format": 1, "grid": grid, "model": model }).to_string();
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl LinearizedOperator {
    /// Bytes held by the assembled operator.
    pub fn required_bytes(n_v: usize) -> usize {
        let nv = n_v.pow(3);
        let m = nv / 8;
        // octant rows, parity blocks and eigenvectors for both channels, plus working copies
        8 * (2 * m * nv + 2 * 8 * m * m * 3)
    }

    pub fn build(grid: &VelocityGrid, model: &KernelModel) -> Result<Self> {
        let needed = Self::required_bytes(grid.n_v);
        let budget = model.spec.memory_budget_mb * 1024 * 1024;
        if needed > budget {
            return Err(VmbError::MemoryBudget { needed, budget });
        }
        let table = CollisionTable::new(grid, model);
        let sym = OctantSymmetry::new(grid.n_v);
        let nv = grid.len();
        let m = sym.block_size();
        let dw = grid.weight;
        let sm = &grid.sqrt_mu;
        let mu = &grid.mu;
        let rows: Vec<(Vec<f64>, Vec<f64>, f64)> = sym
            .reps
            .par_iter()
            .map(|&p| {
                let mut gain = vec![0.0; nv];
                let mut all = vec![0.0; nv];
                let mut loss = vec![0.0; nv];
                table.for_each_collision(p, |q, pp, qp, w| {
                    loss[q] += w;
                    gain[pp] += 2.0 * dw * w * sm[q] * sm[qp];
                    all[qp] += dw * w * sm[q] * sm[pp];
                });
                let mut nu = 0.0;
                for q in 0..nv {
                    if loss[q] != 0.0 {
                        all[q] -= dw * loss[q] * sm[q] * sm[p];
                        nu += 2.0 * dw * loss[q] * mu[q];
                    }
                }
                let same: Vec<f64> = gain.iter().zip(&all).map(|(a, b)| a + b).collect();
                (same, all, nu)
            })
            .collect();
        let mut rows_same = Vec::with_capacity(m * nv);
        let mut rows_cross = Vec::with_capacity(m * nv);
        let mut nu = vec![0.0; nv];
        for (r, (same, cross, n)) in rows.into_iter().enumerate() {
            rows_same.extend(same);
            rows_cross.extend(cross);
            for &node in &sym.orbit[r] {
                nu[node] = n;
            }
        }
        let mut op = LinearizedOperator {
            grid: grid.clone(),
            model: model.clone(),
            nu,
            sym,
            rows_same,
            rows_cross,
            symmetry_defect: 0.0,
            channels: [BlockOperator { blocks: vec![] }, BlockOperator { blocks: vec![] }],
            spectra: [
                ChannelSpectrum { values: vec![], vectors: vec![], null_residual: 0.0 },
                ChannelSpectrum { values: vec![], vectors: vec![], null_residual: 0.0 },
            ],
            hash: operator_hash(&grid.spec(), &model.spec),
        };
        op.symmetry_defect = op.measure_symmetry();
        if !(op.symmetry_defect <= model.spec.symmetry_tol) {
            return Err(VmbError::Asymmetric { defect: op.symmetry_defect });
        }
        op.channels = [op.channel_blocks(0), op.channel_blocks(1)];
        op.spectra = [op.decompose(0), op.decompose(1)];
        Ok(op)
    }

    /// Build, or load from `dir` when a cache file with the matching content hash exists.
    pub fn build_cached(grid: &VelocityGrid, model: &KernelModel, dir: &Path) -> Result<Self> {
        let hash = operator_hash(&grid.spec(), &model.spec);
        let path = Self::cache_path(dir, &hash);
        if path.exists() {
            if let Ok(op) = Self::load(&path, grid, model) {
                return Ok(op);
            }
        }
        let op = Self::build(grid, model)?;
        std::fs::create_dir_all(dir)?;
        op.save(&path)?;
        Ok(op)
    }

    pub fn cache_path(dir: &Path, hash: &str) -> PathBuf {
        dir.join(format!("operator_{}.ckpt", &hash[..16]))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let m = self.sym.block_size();
        let nv = self.grid.len();
        let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = vec![
            ("nu".into(), vec![nv], self.nu.clone()),
            ("rows_same".into(), vec![m, nv], self.rows_same.clone()),
            ("rows_cross".into(), vec![m, nv], self.rows_cross.clone()),
        ];
        for (c, spec) in self.spectra.iter().enumerate() {
            for chi in 0..8 {
                arrays.push((format!("values_{c}_{chi}"), vec![m], spec.values[chi].clone()));
                arrays.push((format!("vectors_{c}_{chi}"), vec![m, m], spec.vectors[chi].as_slice().to_vec()));
            }
        }
        let refs: Vec<(&str, Vec<usize>, &[f64])> =
            arrays.iter().map(|(n, s, d)| (n.as_str(), s.clone(), d.as_slice())).collect();
        let meta = serde_json::json!({
            "hash": self.hash,
            "symmetry_defect": self.symmetry_defect,
            "null_residual": [self.spectra[0].null_residual, self.spectra[1].null_residual],
        });
        write_checkpoint(path, meta, &refs)
    }

    pub fn load(path: &Path, grid: &VelocityGrid, model: &KernelModel) -> Result<Self> {
        let (header, arrays) = read_checkpoint(path)?;
        let hash = operator_hash(&grid.spec(), &model.spec);
        if header.meta["hash"] != serde_json::Value::String(hash.clone()) {
            return Err(VmbError::Invalid("operator cache hash mismatch".into()));
        }
        let sym = OctantSymmetry::new(grid.n_v);
        let m = sym.block_size();
        let mut it = arrays.into_iter();
        let mut next = || it.next().ok_or_else(|| VmbError::Invalid("truncated operator cache".into()));
        let nu = next()?;
        let rows_same = next()?;
        let rows_cross = next()?;
        let mut spectra = Vec::new();
        for c in 0..2 {
            let mut values = Vec::new();
            let mut vectors = Vec::new();
            for _ in 0..8 {
                values.push(next()?);
                vectors.push(DMatrix::from_vec(m, m, next()?));
            }
            let null_residual = header.meta["null_residual"][c].as_f64().unwrap_or(0.0);
            spectra.push(ChannelSpectrum { values, vectors, null_residual });
        }
        let symmetry_defect = header.meta["symmetry_defect"].as_f64().unwrap_or(0.0);
        let mut op = LinearizedOperator {
            grid: grid.clone(),
            model: model.clone(),
            nu,
            sym,
            rows_same,
            rows_cross,
            symmetry_defect,
            channels: [BlockOperator { blocks: vec![] }, BlockOperator { blocks: vec![] }],
            spectra: [spectra.remove(0), spectra.remove(0)],
            hash,
        };
        op.channels = [op.channel_blocks(0), op.channel_blocks(1)];
        Ok(op)
    }

    fn locate(&self, node: usize) -> (usize, usize) {
        // representative row and the reflection mapping it to `node`
        let n = self.grid.n_v;
        let h = n / 2;
        let [i, j, k] = self.grid.axis_indices(node);
        let mut s = 0;
        let fold = |x: usize, bit: usize, s: &mut usize| {
            if x < h {
                *s |= bit;
                n - 1 - x
            } else {
                x
            }
        };
        let (ii, jj, kk) = (fold(i, 1, &mut s), fold(j, 2, &mut s), fold(k, 4, &mut s));
        let r = ((ii - h) * h + (jj - h)) * h + (kk - h);
        (r, s)
    }

    fn reflect(&self, node: usize, s: usize) -> usize {
        let n = self.grid.n_v;
        let [mut i, mut j, mut k] = self.grid.axis_indices(node);
        if s & 1 != 0 {
            i = n - 1 - i;
        }
        if s & 2 != 0 {
            j = n - 1 - j;
        }
        if s & 4 != 0 {
            k = n - 1 - k;
        }
        (i * n + j) * n + k
    }

    /// Entry K_same[a][b].
    pub fn k_same(&self, a: usize, b: usize) -> f64 {
        let (r, s) = self.locate(a);
        self.rows_same[r * self.grid.len() + self.reflect(b, s)]
    }

    /// Entry K_cross[a][b].
    pub fn k_cross(&self, a: usize, b: usize) -> f64 {
        let (r, s) = self.locate(a);
        self.rows_cross[r * self.grid.len() + self.reflect(b, s)]
    }

    fn dense_check(&self) -> Result<()> {
        let nv = self.grid.len();
        let needed = 8 * nv * nv;
        let budget = self.model.spec.memory_budget_mb * 1024 * 1024;
        if needed > budget {
            return Err(VmbError::MemoryBudget { needed, budget });
        }
        Ok(())
    }

    /// Dense K_same (nv × nv).
    pub fn k_same_dense(&self) -> Result<Array2<f64>> {
        self.dense_check()?;
        let nv = self.grid.len();
        Ok(Array2::from_shape_fn((nv, nv), |(a, b)| self.k_same(a, b)))
    }

    /// Dense K_cross (nv × nv).
    pub fn k_cross_dense(&self) -> Result<Array2<f64>> {
        self.dense_check()?;
        let nv = self.grid.len();
        Ok(Array2::from_shape_fn((nv, nv), |(a, b)| self.k_cross(a, b)))
    }

    fn measure_symmetry(&self) -> f64 {
        let nv = self.grid.len();
        let m = self.sym.block_size();
        let mut defect: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for r in 0..m {
            let a = self.sym.reps[r];
            for b in 0..nv {
                let same = self.rows_same[r * nv + b];
                let cross = self.rows_cross[r * nv + b];
                defect = defect.max((same - self.k_same(b, a)).abs()).max((cross - self.k_cross(b, a)).abs());
                scale = scale.max(same.abs()).max(cross.abs());
            }
        }
        let nu_max = self.nu.iter().fold(0.0f64, |x, &y| x.max(y));
        defect / scale.max(nu_max)
    }

    fn channel_blocks(&self, channel: usize) -> BlockOperator {
        let nv = self.grid.len();
        let m = self.sym.block_size();
        let sign = if channel == 0 { 1.0 } else { -1.0 };
        let blocks = (0..8)
            .map(|chi| {
                let mut b = DMatrix::zeros(m, m);
                for r in 0..m {
                    let row_s = &self.rows_same[r * nv..(r + 1) * nv];
                    let row_c = &self.rows_cross[r * nv..(r + 1) * nv];
                    for rp in 0..m {
                        let mut acc = 0.0;
                        for (s, &node) in self.sym.orbit[rp].iter().enumerate() {
                            acc += char_sign(chi, s) * (row_s[node] + sign * row_c[node]);
                        }
                        b[(r, rp)] = -acc;
                    }
                    b[(r, r)] += self.nu[self.sym.reps[r]];
                }
                // remove round-off asymmetry before the symmetric eigen-solve
                let bt = b.transpose();
                (b + bt) * 0.5
            })
            .collect();
        BlockOperator { blocks }
    }

    fn decompose(&self, channel: usize) -> ChannelSpectrum {
        let mut values = Vec::with_capacity(8);
        let mut vectors = Vec::with_capacity(8);
        let mut null_residual: f64 = 0.0;
        for chi in 0..8 {
            let eig = SymmetricEigen::new(self.channels[channel].blocks[chi].clone());
            let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[a].abs().total_cmp(&vals[b].abs()));
            for &k in order.iter().take(null_counts(channel, chi)) {
                null_residual = null_residual.max(vals[k].abs());
                vals[k] = 0.0;
            }
            values.push(vals);
            vectors.push(eig.eigenvectors);
        }
        ChannelSpectrum { values, vectors, null_residual }
    }

    /// Relative size of the eigenvalues identified as the null space.
    pub fn null_residual(&self) -> f64 {
        let nu_max = self.nu.iter().fold(0.0f64, |x, &y| x.max(y));
        self.spectra[0].null_residual.max(self.spectra[1].null_residual) / nu_max
    }

    fn check(&self, f: &PairDistribution) -> Result<()> {
        if f.nv != self.grid.len() {
            return Err(VmbError::GridMismatch(format!(
                "distribution lattice has {} nodes, operator has {}",
                f.nv,
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// Apply a pair of channel operators (sum, difference) pointwise in x.
    pub fn apply_channels(&self, ops: &[BlockOperator; 2], f: &PairDistribution) -> Result<PairDistribution> {
        self.check(f)?;
        let (mut s, mut d) = f.sum_diff();
        ops[0].apply(&self.sym, &mut s, f.nx);
        ops[1].apply(&self.sym, &mut d, f.nx);
        Ok(PairDistribution::from_sum_diff(f.nx, f.nv, &s, &d))
    }

    /// Two-species L applied at every spatial point.
    pub fn apply_l(&self, f: &PairDistribution) -> Result<PairDistribution> {
        self.apply_channels(&self.channels, f)
    }

    /// ν f − K f using the stored rows directly (no parity blocks).
    pub fn apply_l_rows(&self, f: &PairDistribution) -> Result<PairDistribution> {
        self.check(f)?;
        let nv = self.grid.len();
        let mut out = PairDistribution::zeros(f.nx, nv);
        for x in 0..f.nx {
            let gp = &f.plus[x * nv..(x + 1) * nv];
            let gm = &f.minus[x * nv..(x + 1) * nv];
            for a in 0..nv {
                let (r, s) = self.locate(a);
                let row_s = &self.rows_same[r * nv..(r + 1) * nv];
                let row_c = &self.rows_cross[r * nv..(r + 1) * nv];
                let (mut kp, mut km) = (0.0, 0.0);
                for b in 0..nv {
                    let bb = self.reflect(b, s);
                    kp += row_s[bb] * gp[b] + row_c[bb] * gm[b];
                    km += row_s[bb] * gm[b] + row_c[bb] * gp[b];
                }
                out.plus[x * nv + a] = self.nu[a] * gp[a] - kp;
                out.minus[x * nv + a] = self.nu[a] * gm[a] - km;
            }
        }
        Ok(out)
    }

    /// e^{−hL}, φ₁(−hL), φ₂(−hL) per channel.
    pub fn propagator(&self, h: f64) -> CollisionPropagator {
        let make = |map: &dyn Fn(f64) -> f64| -> [BlockOperator; 2] {
            [self.spectra[0].function(map), self.spectra[1].function(map)]
        };
        CollisionPropagator {
            h,
            exp: make(&|l| (-h * l).exp()),
            phi1: make(&|l| phi1(-h * l)),
            phi2: make(&|l| phi2(-h * l)),
        }
    }

    /// Coercivity constant min ⟨f, Lf⟩/‖f‖²_ν over f orthogonal to the null space.
    pub fn coercivity(&self) -> CoercivityReport {
        let nv = self.grid.len();
        let m = self.sym.block_size();
        let sm = &self.grid.sqrt_mu;
        let inv_sqrt_nu: Vec<f64> = self.sym.reps.iter().map(|&r| 1.0 / self.nu[r].sqrt()).collect();
        let mut sigma = [f64::INFINITY; 2];
        for (channel, slot) in sigma.iter_mut().enumerate() {
            // null basis of the channel as lattice functions
            let mut basis: Vec<Vec<f64>> = vec![sm.clone()];
            if channel == 0 {
                for a in 0..3 {
                    basis.push((0..nv).map(|k| self.grid.nodes[k][a] * sm[k]).collect());
                }
                basis.push((0..nv).map(|k| self.grid.speed_sq(k) * sm[k]).collect());
            }
            let flat: Vec<f64> = basis.concat();
            let split = self.sym.split(&flat, basis.len());
            for chi in 0..8 {
                let b = &self.channels[channel].blocks[chi];
                let mut mat = DMatrix::zeros(m, m);
                for i in 0..m {
                    for j in 0..m {
                        mat[(i, j)] = inv_sqrt_nu[i] * b[(i, j)] * inv_sqrt_nu[j];
                    }
                }
                // constraint directions ν^{-1/2} e_k in this class, orthonormalized
                let mut q: Vec<nalgebra::DVector<f64>> = Vec::new();
                for k in 0..basis.len() {
                    let mut y = nalgebra::DVector::from_fn(m, |i, _| split[chi][(i, k)] * inv_sqrt_nu[i]);
                    for u in &q {
                        let c = u.dot(&y);
                        y.axpy(-c, u, 1.0);
                    }
                    let n = y.norm();
                    if n > 1e-8 {
                        q.push(y / n);
                    }
                }
                let mut proj = DMatrix::identity(m, m);
                for u in &q {
                    proj -= u * u.transpose();
                }
                let mut a = &proj * &mat * &proj;
                for u in &q {
                    a += u * u.transpose() * 10.0;
                }
                let at = a.transpose();
                let a = (a + at) * 0.5;
                let eig = SymmetricEigen::new(a);
                let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
                *slot = slot.min(min);
            }
        }
        CoercivityReport {
            sigma0: sigma[0].min(sigma[1]),
            sigma_sum_channel: sigma[0],
            sigma_diff_channel: sigma[1],
            spectral_gap: self.spectra[0].gap().min(self.spectra[1].gap()),
        }
    }
}

/// Two-species L applied at every spatial point.
pub fn apply_l(f: &PairDistribution, op: &LinearizedOperator) -> Result<PairDistribution> {
    op.apply_l(f)
}

/// Assemble L for a lattice and kernel.
pub fn build_linearized(grid: &VelocityGrid, model: &KernelModel) -> Result<LinearizedOperator> {
    LinearizedOperator::build(grid, model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> VelocityGrid {
        VelocityGrid::new(&VelocitySpec { n_v: 8, v_max: 5.0 }).unwrap()
    }

    #[test]
    fn sphere_rule_moments() {
        let s = SphereQuadrature::product(32, 32).unwrap();
        assert!((s.integrate(|_| 1.0) - 4.0 * PI).abs() < 1e-10);
        assert!((s.integrate(|n| n[2].abs()) - 2.0 * PI).abs() < 1e-8);
    }

    #[test]
    fn grad_bound_detects_constant_profile() {
        assert!(KernelModel::hard_sphere().check_grad_bound().passed);
        let bad = KernelModel::new(KernelSpec { profile: AngularProfile::Constant { value: 1.0 }, ..Default::default() })
            .unwrap();
        let check = bad.check_grad_bound();
        assert!(!check.passed && check.max_violation > 0.9);
    }

    #[test]
    fn rejects_divergent_gamma() {
        assert!(matches!(
            KernelModel::new(KernelSpec { gamma: -3.0, ..Default::default() }),
            Err(VmbError::Divergent(_))
        ));
    }

    #[test]
    fn phi_functions_match_closed_forms() {
        for &z in &[-3.0f64, -0.5, -1e-2, -1e-4, -1e-7, 0.0] {
            let p1 = if z == 0.0 { 1.0 } else { z.exp_m1() / z };
            assert!((phi1(z) - p1).abs() < 1e-12, "phi1 {z}");
            if z.abs() > 1e-3 {
                assert!((phi2(z) - (z.exp_m1() - z) / (z * z)).abs() < 1e-12, "phi2 {z}");
            }
        }
        assert!((phi2(0.0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn symmetry_split_roundtrip() {
        let sym = OctantSymmetry::new(4);
        let data: Vec<f64> = (0..128).map(|k| (k as f64 * 0.37).sin()).collect();
        let blocks = sym.split(&data, 2);
        let mut back = vec![0.0; 128];
        sym.merge(&blocks, &mut back);
        for (a, b) in data.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn block_apply_matches_rows() {
        let g = small();
        let op = LinearizedOperator::build(&g, &KernelModel::hard_sphere()).unwrap();
        let nv = g.len();
        let plus: Vec<f64> = (0..2 * nv).map(|k| ((k * 7919) % 101) as f64 / 50.0 - 1.0).collect();
        let minus: Vec<f64> = (0..2 * nv).map(|k| ((k * 104729) % 97) as f64 / 48.0 - 1.0).collect();
        let f = PairDistribution::from_parts(2, nv, plus, minus).unwrap();
        let a = op.apply_l(&f).unwrap();
        let b = op.apply_l_rows(&f).unwrap();
        let scale = b.plus.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        for (x, y) in a.plus.iter().chain(&a.minus).zip(b.plus.iter().chain(&b.minus)) {
            assert!((x - y).abs() <= 1e-12 * scale);
        }
    }
}
