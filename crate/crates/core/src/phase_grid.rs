//! Discrete phase space: a periodic spatial grid with spectral derivatives, a
//! truncated midpoint velocity lattice with quadrature and cached Maxwellian
//! values, and the two-species distribution container.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmbError};

/// Highest derivative order used by the energy functionals.
pub const MAX_DERIVATIVE_ORDER: usize = 3;

/// The global Maxwellian `(2π)^{-3/2} exp(-|v|²/2)`.
pub fn maxwellian(v: [f64; 3]) -> f64 {
    let r2 = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    (2.0 * PI).powf(-1.5) * (-0.5 * r2).exp()
}

/// Serializable description of a spatial grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpatialSpec {
    pub dim: usize,
    pub lengths: Vec<f64>,
    pub n_per_axis: Vec<usize>,
}

impl Default for SpatialSpec {
    fn default() -> Self {
        SpatialSpec { dim: 1, lengths: vec![2.0 * PI], n_per_axis: vec![32] }
    }
}

#[derive(Clone)]
struct AxisPlan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

/// Periodic box with `dim` active axes. Inactive axes carry one point and unit length.
#[derive(Clone)]
pub struct SpatialGrid {
    pub dim: usize,
    pub lengths: [f64; 3],
    pub n: [usize; 3],
    /// Mode frequencies ξ for the convention `exp(2πi x·ξ)`, in FFT storage order.
    pub wavenumbers: Vec<[f64; 3]>,
    /// Frequencies used by odd-order operators; the Nyquist component is zero.
    pub odd_wavenumbers: Vec<[f64; 3]>,
    plans: Vec<Option<AxisPlan>>,
}

impl fmt::Debug for SpatialGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SpatialGrid")
            .field("dim", &self.dim)
            .field("lengths", &self.lengths)
            .field("n", &self.n)
            .finish()
    }
}

fn axis_frequency(k: usize, n: usize, length: f64) -> (f64, f64) {
    if n == 1 {
        return (0.0, 0.0);
    }
    let signed = if k < n / 2 {
        k as f64
    } else if k == n / 2 {
        (n / 2) as f64
    } else {
        k as f64 - n as f64
    };
    let xi = signed / length;
    let odd = if k == n / 2 { 0.0 } else { xi };
    (xi, odd)
}

impl SpatialGrid {
    pub fn new(spec: &SpatialSpec) -> Result<Self> {
        let dim = spec.dim;
        if !(1..=3).contains(&dim) {
            return Err(VmbError::Config(format!("spatial dim must be 1, 2 or 3, got {dim}")));
        }
        if spec.lengths.len() != dim || spec.n_per_axis.len() != dim {
            return Err(VmbError::Config("lengths and n_per_axis must list one entry per active axis".into()));
        }
        let mut lengths = [1.0; 3];
        let mut n = [1usize; 3];
        for a in 0..dim {
            let (l, na) = (spec.lengths[a], spec.n_per_axis[a]);
            if !(l.is_finite() && l > 0.0) {
                return Err(VmbError::Config(format!("axis {a} length must be positive, got {l}")));
            }
            if na < 4 || na % 2 != 0 {
                return Err(VmbError::Config(format!("axis {a} needs an even point count >= 4, got {na}")));
            }
            lengths[a] = l;
            n[a] = na;
        }
        let mut planner = FftPlanner::new();
        let plans = (0..3)
            .map(|a| {
                (n[a] > 1).then(|| AxisPlan {
                    forward: planner.plan_fft_forward(n[a]),
                    inverse: planner.plan_fft_inverse(n[a]),
                })
            })
            .collect();
        let total = n[0] * n[1] * n[2];
        let mut wavenumbers = Vec::with_capacity(total);
        let mut odd_wavenumbers = Vec::with_capacity(total);
        for i in 0..n[0] {
            for j in 0..n[1] {
                for k in 0..n[2] {
                    let (x0, o0) = axis_frequency(i, n[0], lengths[0]);
                    let (x1, o1) = axis_frequency(j, n[1], lengths[1]);
                    let (x2, o2) = axis_frequency(k, n[2], lengths[2]);
                    wavenumbers.push([x0, x1, x2]);
                    odd_wavenumbers.push([o0, o1, o2]);
                }
            }
        }
        Ok(SpatialGrid { dim, lengths, n, wavenumbers, odd_wavenumbers, plans })
    }

    pub fn spec(&self) -> SpatialSpec {
        SpatialSpec {
            dim: self.dim,
            lengths: self.lengths[..self.dim].to_vec(),
            n_per_axis: self.n[..self.dim].to_vec(),
        }
    }

    /// Number of grid points.
    pub fn len(&self) -> usize {
        self.n[0] * self.n[1] * self.n[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        self.lengths[axis] / self.n[axis] as f64
    }

    pub fn cell_volume(&self) -> f64 {
        (0..3).map(|a| self.spacing(a)).product()
    }

    /// Physical domain volume (inactive axes count with unit length).
    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn coords(&self, idx: usize) -> [f64; 3] {
        let k = idx % self.n[2];
        let j = (idx / self.n[2]) % self.n[1];
        let i = idx / (self.n[1] * self.n[2]);
        [i as f64 * self.spacing(0), j as f64 * self.spacing(1), k as f64 * self.spacing(2)]
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim {
            return Err(VmbError::InactiveAxis { axis, dim: self.dim });
        }
        Ok(())
    }

    fn transform_axis(&self, buf: &mut [Complex64], axis: usize, inverse: bool, line: &mut Vec<Complex64>) {
        let Some(plan) = &self.plans[axis] else { return };
        let n = self.n;
        let stride = match axis {
            0 => n[1] * n[2],
            1 => n[2],
            _ => 1,
        };
        let len = n[axis];
        line.resize(len, Complex64::new(0.0, 0.0));
        let fft = if inverse { &plan.inverse } else { &plan.forward };
        let outer = match axis {
            0 => 1,
            1 => n[0],
            _ => n[0] * n[1],
        };
        let inner = stride;
        for o in 0..outer {
            for s in 0..inner {
                let base = o * len * stride + s;
                for (t, c) in line.iter_mut().enumerate() {
                    *c = buf[base + t * stride];
                }
                fft.process(line);
                for (t, c) in line.iter().enumerate() {
                    buf[base + t * stride] = *c;
                }
            }
        }
    }

    /// Unnormalized forward transform over all active axes.
    pub fn forward(&self, buf: &mut [Complex64]) {
        let mut line = Vec::new();
        for a in 0..3 {
            self.transform_axis(buf, a, false, &mut line);
        }
    }

    /// Inverse transform including the `1/N` normalization.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        let mut line = Vec::new();
        for a in 0..3 {
            self.transform_axis(buf, a, true, &mut line);
        }
        let scale = 1.0 / self.len() as f64;
        for c in buf.iter_mut() {
            *c *= scale;
        }
    }

    pub fn to_spectrum(&self, g: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = g.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    pub fn from_spectrum(&self, mut buf: Vec<Complex64>) -> Vec<f64> {
        self.inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// Spectral multiplier `(2πiξ_axis)^order` for mode `m`.
    pub fn derivative_symbol(&self, m: usize, axis: usize, order: usize) -> Complex64 {
        if order == 0 {
            return Complex64::new(1.0, 0.0);
        }
        let xi = if order % 2 == 1 { self.odd_wavenumbers[m][axis] } else { self.wavenumbers[m][axis] };
        Complex64::new(0.0, 2.0 * PI * xi).powu(order as u32)
    }

    /// `∂^order g / ∂x_axis^order` computed spectrally.
    pub fn spectral_x_derivative(&self, g: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
        self.check_axis(axis)?;
        if order > MAX_DERIVATIVE_ORDER {
            return Err(VmbError::DerivativeOrder { order, max: MAX_DERIVATIVE_ORDER });
        }
        self.check_len(g.len())?;
        if order == 0 {
            return Ok(g.to_vec());
        }
        let mut spec = self.to_spectrum(g);
        for (m, c) in spec.iter_mut().enumerate() {
            *c *= self.derivative_symbol(m, axis, order);
        }
        Ok(self.from_spectrum(spec))
    }

    /// Mixed spatial derivative `∂^α g` for a multi-index over the three axes.
    pub fn mixed_derivative(&self, g: &[f64], alpha: [usize; 3]) -> Result<Vec<f64>> {
        let total: usize = alpha.iter().sum();
        if total > MAX_DERIVATIVE_ORDER {
            return Err(VmbError::DerivativeOrder { order: total, max: MAX_DERIVATIVE_ORDER });
        }
        for (a, &o) in alpha.iter().enumerate() {
            if o > 0 {
                self.check_axis(a)?;
            }
        }
        self.check_len(g.len())?;
        if total == 0 {
            return Ok(g.to_vec());
        }
        let mut spec = self.to_spectrum(g);
        for (m, c) in spec.iter_mut().enumerate() {
            for (a, &o) in alpha.iter().enumerate() {
                *c *= self.derivative_symbol(m, a, o);
            }
        }
        Ok(self.from_spectrum(spec))
    }

    pub fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(VmbError::GridMismatch(format!(
                "spatial field has {len} entries, grid has {}",
                self.len()
            )));
        }
        Ok(())
    }

    /// `‖g‖² = ΔV Σ g²` over the torus.
    pub fn norm_sq(&self, g: &[f64]) -> f64 {
        self.cell_volume() * g.iter().map(|x| x * x).sum::<f64>()
    }

    /// Same norm evaluated from an unnormalized spectrum.
    pub fn spectral_norm_sq(&self, spec: &[Complex64]) -> f64 {
        self.cell_volume() / self.len() as f64 * spec.iter().map(|c| c.norm_sqr()).sum::<f64>()
    }

    pub fn mean(&self, g: &[f64]) -> f64 {
        g.iter().sum::<f64>() / g.len() as f64
    }

    /// Active multi-indices α with |α| ≤ n (inactive axes never differentiated).
    pub fn multi_indices(&self, max_order: usize) -> Vec<[usize; 3]> {
        let mut out = Vec::new();
        for total in 0..=max_order {
            for a0 in 0..=total {
                for a1 in 0..=(total - a0) {
                    let a2 = total - a0 - a1;
                    let alpha = [a0, a1, a2];
                    if (0..3).all(|a| alpha[a] == 0 || a < self.dim) {
                        out.push(alpha);
                    }
                }
            }
        }
        out
    }

    /// Apply `op` to the spectrum of every column of an `[x][col]` row-major array.
    pub fn map_columns_spectral<F>(&self, data: &mut [f64], ncol: usize, mut op: F)
    where
        F: FnMut(usize, &mut [Complex64]),
    {
        let nx = self.len();
        debug_assert_eq!(data.len(), nx * ncol);
        let mut buf = vec![Complex64::new(0.0, 0.0); nx];
        for c in 0..ncol {
            for (x, b) in buf.iter_mut().enumerate() {
                *b = Complex64::new(data[x * ncol + c], 0.0);
            }
            self.forward(&mut buf);
            op(c, &mut buf);
            self.inverse(&mut buf);
            for (x, b) in buf.iter().enumerate() {
                data[x * ncol + c] = b.re;
            }
        }
    }
}

/// Serializable description of the velocity lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VelocitySpec {
    pub n_v: usize,
    pub v_max: f64,
}

impl Default for VelocitySpec {
    fn default() -> Self {
        VelocitySpec { n_v: 16, v_max: 6.0 }
    }
}

/// Finite-difference stencil for one node: first index and weights.
#[derive(Clone, Debug)]
struct Stencil {
    start: usize,
    weights: Vec<f64>,
}

/// Fornberg's recursion: weights for derivatives 0..=max_order at `x0` on nodes `xs`.
pub fn fornberg_weights(x0: f64, xs: &[f64], max_order: usize) -> Vec<Vec<f64>> {
    let n = xs.len();
    let mut c = vec![vec![0.0; n]; max_order + 1];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mn = i.min(max_order);
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                for k in (1..=mn).rev() {
                    c[k][i] = c1 * (k as f64 * c[k - 1][i - 1] - c5 * c[k][i - 1]) / c2;
                }
                c[0][i] = -c1 * c5 * c[0][i - 1] / c2;
            }
            for k in (1..=mn).rev() {
                c[k][j] = (c4 * c[k][j] - k as f64 * c[k - 1][j]) / c3;
            }
            c[0][j] = c4 * c[0][j] / c3;
        }
        c1 = c2;
    }
    c
}

fn build_stencils(n: usize, h: f64, order: usize) -> Vec<Stencil> {
    let half = order.div_ceil(2);
    let one_sided = order + 2;
    (0..n)
        .map(|i| {
            let (start, len) = if i >= half && i + half < n {
                (i - half, 2 * half + 1)
            } else {
                let len = one_sided.min(n);
                let start = if i < half { 0 } else { n - len };
                (start, len)
            };
            let xs: Vec<f64> = (start..start + len).map(|j| j as f64).collect();
            let w = fornberg_weights(i as f64, &xs, order);
            let scale = h.powi(order as i32);
            Stencil { start, weights: w[order].iter().map(|x| x / scale).collect() }
        })
        .collect()
}

/// Velocity test functions for moments.
#[derive(Clone, Debug)]
pub enum VelocityTest {
    One,
    V(usize),
    VSquared,
    Custom(Vec<f64>),
}

/// Midpoint lattice on `[-v_max, v_max]³` with `n_v` nodes per axis (origin excluded).
#[derive(Clone, Debug)]
pub struct VelocityGrid {
    pub n_v: usize,
    pub v_max: f64,
    pub dv: f64,
    /// One-dimensional node coordinates along each axis.
    pub axis: Vec<f64>,
    pub nodes: Vec<[f64; 3]>,
    /// Uniform quadrature weight Δv³.
    pub weight: f64,
    pub mu: Vec<f64>,
    pub sqrt_mu: Vec<f64>,
    stencils: Vec<Vec<Stencil>>,
}

impl VelocityGrid {
    pub fn new(spec: &VelocitySpec) -> Result<Self> {
        let (n_v, v_max) = (spec.n_v, spec.v_max);
        if n_v < 2 || n_v % 2 != 0 {
            return Err(VmbError::Config(format!("n_v must be even and >= 2, got {n_v}")));
        }
        if !(v_max.is_finite() && v_max > 0.0) {
            return Err(VmbError::Config(format!("v_max must be positive, got {v_max}")));
        }
        let dv = 2.0 * v_max / n_v as f64;
        let axis: Vec<f64> = (0..n_v).map(|k| -v_max + (k as f64 + 0.5) * dv).collect();
        let mut nodes = Vec::with_capacity(n_v * n_v * n_v);
        for &a in &axis {
            for &b in &axis {
                for &c in &axis {
                    nodes.push([a, b, c]);
                }
            }
        }
        let mu: Vec<f64> = nodes.iter().map(|&v| maxwellian(v)).collect();
        let sqrt_mu = mu.iter().map(|m| m.sqrt()).collect();
        let stencils = (1..=MAX_DERIVATIVE_ORDER).map(|p| build_stencils(n_v, dv, p)).collect();
        Ok(VelocityGrid { n_v, v_max, dv, axis, nodes, weight: dv * dv * dv, mu, sqrt_mu, stencils })
    }

    pub fn spec(&self) -> VelocitySpec {
        VelocitySpec { n_v: self.n_v, v_max: self.v_max }
    }

    /// Number of lattice nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.n_v + j) * self.n_v + k
    }

    pub fn axis_indices(&self, idx: usize) -> [usize; 3] {
        let n = self.n_v;
        [idx / (n * n), (idx / n) % n, idx % n]
    }

    /// Lattice index of `-v`.
    pub fn mirror(&self, idx: usize) -> usize {
        let [i, j, k] = self.axis_indices(idx);
        let m = self.n_v - 1;
        self.index(m - i, m - j, m - k)
    }

    pub fn speed_sq(&self, idx: usize) -> f64 {
        let v = self.nodes[idx];
        v[0] * v[0] + v[1] * v[1] + v[2] * v[2]
    }

    /// Quadrature of the Maxwellian, `Σ Δv³ μ`.
    pub fn mass(&self) -> f64 {
        self.weight * self.mu.iter().sum::<f64>()
    }

    pub fn test_values(&self, test: &VelocityTest) -> Result<Vec<f64>> {
        Ok(match test {
            VelocityTest::One => vec![1.0; self.len()],
            VelocityTest::V(i) => {
                if *i > 2 {
                    return Err(VmbError::Invalid(format!("velocity component {i} out of range")));
                }
                self.nodes.iter().map(|v| v[*i]).collect()
            }
            VelocityTest::VSquared => (0..self.len()).map(|k| self.speed_sq(k)).collect(),
            VelocityTest::Custom(vals) => {
                if vals.len() != self.len() {
                    return Err(VmbError::GridMismatch(format!(
                        "custom test has {} values, lattice has {}",
                        vals.len(),
                        self.len()
                    )));
                }
                vals.clone()
            }
        })
    }

    /// `Σ Δv³ test(v) f(x, v)` at every spatial point of an `[x][v]` array.
    pub fn velocity_moment(&self, f: &[f64], test: &VelocityTest) -> Result<Vec<f64>> {
        let nv = self.len();
        if f.len() % nv != 0 {
            return Err(VmbError::GridMismatch(format!(
                "array of length {} is not a multiple of the lattice size {nv}",
                f.len()
            )));
        }
        let t = self.test_values(test)?;
        Ok(f.chunks(nv)
            .map(|row| self.weight * row.iter().zip(&t).map(|(a, b)| a * b).sum::<f64>())
            .collect())
    }

    /// Plain lattice inner product `Σ Δv³ g h` of two lattice functions.
    pub fn dot(&self, g: &[f64], h: &[f64]) -> f64 {
        self.weight * g.iter().zip(h).map(|(a, b)| a * b).sum::<f64>()
    }

    /// Finite-difference derivative of a lattice function along one velocity axis.
    pub fn velocity_derivative(&self, g: &[f64], axis: usize, order: usize) -> Result<Vec<f64>> {
        if !(1..=MAX_DERIVATIVE_ORDER).contains(&order) {
            return Err(VmbError::DerivativeOrder { order, max: MAX_DERIVATIVE_ORDER });
        }
        if axis > 2 {
            return Err(VmbError::Invalid(format!("velocity axis {axis} out of range")));
        }
        if g.len() % self.len() != 0 {
            return Err(VmbError::GridMismatch("array is not a whole number of lattices".into()));
        }
        let mut out = vec![0.0; g.len()];
        for (src, dst) in g.chunks(self.len()).zip(out.chunks_mut(self.len())) {
            self.derivative_into(src, dst, axis, order);
        }
        Ok(out)
    }

    fn derivative_into(&self, g: &[f64], out: &mut [f64], axis: usize, order: usize) {
        let n = self.n_v;
        let st = &self.stencils[order - 1];
        let stride = match axis {
            0 => n * n,
            1 => n,
            _ => 1,
        };
        for idx in 0..self.len() {
            let pos = self.axis_indices(idx)[axis];
            let base = idx - pos * stride;
            let s = &st[pos];
            let mut acc = 0.0;
            for (t, w) in s.weights.iter().enumerate() {
                acc += w * g[base + (s.start + t) * stride];
            }
            out[idx] = acc;
        }
    }

    /// Mixed velocity derivative `∂_β` of an `[x][v]` array (axis by axis).
    pub fn mixed_velocity_derivative(&self, g: &[f64], beta: [usize; 3]) -> Result<Vec<f64>> {
        let total: usize = beta.iter().sum();
        if total > MAX_DERIVATIVE_ORDER {
            return Err(VmbError::DerivativeOrder { order: total, max: MAX_DERIVATIVE_ORDER });
        }
        let mut cur = g.to_vec();
        for (axis, &o) in beta.iter().enumerate() {
            if o > 0 {
                cur = self.velocity_derivative(&cur, axis, o)?;
            }
        }
        Ok(cur)
    }
}

/// Both species of a perturbation on `(spatial grid) × (velocity lattice)`, stored `[x][v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDistribution {
    pub nx: usize,
    pub nv: usize,
    pub plus: Vec<f64>,
    pub minus: Vec<f64>,
}

impl PairDistribution {
    pub fn zeros(nx: usize, nv: usize) -> Self {
        PairDistribution { nx, nv, plus: vec![0.0; nx * nv], minus: vec![0.0; nx * nv] }
    }

    pub fn from_parts(nx: usize, nv: usize, plus: Vec<f64>, minus: Vec<f64>) -> Result<Self> {
        if plus.len() != nx * nv || minus.len() != nx * nv {
            return Err(VmbError::GridMismatch(format!(
                "components of length {}/{} do not match {nx}×{nv}",
                plus.len(),
                minus.len()
            )));
        }
        Ok(PairDistribution { nx, nv, plus, minus })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.nx, self.nv)
    }

    pub fn check_same(&self, other: &PairDistribution) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(VmbError::GridMismatch(format!(
                "distribution shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn check_grids(&self, x: &SpatialGrid, v: &VelocityGrid) -> Result<()> {
        if self.nx != x.len() || self.nv != v.len() {
            return Err(VmbError::GridMismatch(format!(
                "distribution is {}×{}, grids are {}×{}",
                self.nx,
                self.nv,
                x.len(),
                v.len()
            )));
        }
        Ok(())
    }

    pub fn component(&self, s: usize) -> &[f64] {
        if s == 0 {
            &self.plus
        } else {
            &self.minus
        }
    }

    pub fn component_mut(&mut self, s: usize) -> &mut Vec<f64> {
        if s == 0 {
            &mut self.plus
        } else {
            &mut self.minus
        }
    }

    pub fn is_finite(&self) -> bool {
        self.plus.iter().chain(&self.minus).all(|x| x.is_finite())
    }

    /// `self += a * other`.
    pub fn axpy(&mut self, a: f64, other: &PairDistribution) {
        for (x, y) in self.plus.iter_mut().zip(&other.plus) {
            *x += a * y;
        }
        for (x, y) in self.minus.iter_mut().zip(&other.minus) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in self.plus.iter_mut().chain(self.minus.iter_mut()) {
            *x *= a;
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    /// Species exchange `[f₊, f₋] ↦ [f₋, f₊]`.
    pub fn swapped(&self) -> Self {
        PairDistribution { nx: self.nx, nv: self.nv, plus: self.minus.clone(), minus: self.plus.clone() }
    }

    /// Sum `f₊ + f₋` and difference `f₊ − f₋`.
    pub fn sum_diff(&self) -> (Vec<f64>, Vec<f64>) {
        let s = self.plus.iter().zip(&self.minus).map(|(a, b)| a + b).collect();
        let d = self.plus.iter().zip(&self.minus).map(|(a, b)| a - b).collect();
        (s, d)
    }

    /// Rebuild from sum and difference channels.
    pub fn from_sum_diff(nx: usize, nv: usize, s: &[f64], d: &[f64]) -> Self {
        let plus = s.iter().zip(d).map(|(a, b)| 0.5 * (a + b)).collect();
        let minus = s.iter().zip(d).map(|(a, b)| 0.5 * (a - b)).collect();
        PairDistribution { nx, nv, plus, minus }
    }

    /// Phase-space norm `ΔV Δv³ Σ (f₊² + f₋²)`.
    pub fn norm_sq(&self, x: &SpatialGrid, v: &VelocityGrid) -> f64 {
        x.cell_volume() * v.weight * self.plus.iter().chain(&self.minus).map(|a| a * a).sum::<f64>()
    }

    pub fn inner(&self, other: &PairDistribution, x: &SpatialGrid, v: &VelocityGrid) -> f64 {
        let s: f64 = self.plus.iter().zip(&other.plus).map(|(a, b)| a * b).sum::<f64>()
            + self.minus.iter().zip(&other.minus).map(|(a, b)| a * b).sum::<f64>();
        x.cell_volume() * v.weight * s
    }

    /// Charge density `Σ Δv³ μ^{1/2}(f₊ − f₋)`.
    pub fn charge_density(&self, v: &VelocityGrid) -> Vec<f64> {
        (0..self.nx)
            .map(|x| {
                let r = x * self.nv..(x + 1) * self.nv;
                let s: f64 = self.plus[r.clone()]
                    .iter()
                    .zip(&self.minus[r])
                    .zip(&v.sqrt_mu)
                    .map(|((a, b), m)| m * (a - b))
                    .sum();
                v.weight * s
            })
            .collect()
    }

    /// Current density `Σ Δv³ v μ^{1/2}(f₊ − f₋)` as three spatial fields.
    pub fn current_density(&self, v: &VelocityGrid) -> [Vec<f64>; 3] {
        let mut j = [vec![0.0; self.nx], vec![0.0; self.nx], vec![0.0; self.nx]];
        for x in 0..self.nx {
            let mut acc = [0.0; 3];
            let off = x * self.nv;
            for k in 0..self.nv {
                let d = v.sqrt_mu[k] * (self.plus[off + k] - self.minus[off + k]);
                let node = v.nodes[k];
                acc[0] += node[0] * d;
                acc[1] += node[1] * d;
                acc[2] += node[2] * d;
            }
            for a in 0..3 {
                j[a][x] = v.weight * acc[a];
            }
        }
        j
    }
}

/// Bundle of the two grids.
#[derive(Clone, Debug)]
pub struct PhaseSpace {
    pub x: SpatialGrid,
    pub v: VelocityGrid,
}

impl PhaseSpace {
    pub fn new(x: &SpatialSpec, v: &VelocitySpec) -> Result<Self> {
        Ok(PhaseSpace { x: SpatialGrid::new(x)?, v: VelocityGrid::new(v)? })
    }

    pub fn zeros(&self) -> PairDistribution {
        PairDistribution::zeros(self.x.len(), self.v.len())
    }
}

/// Header line of the binary checkpoint format.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format: String,
    /// Named arrays in payload order with their shapes.
    pub arrays: Vec<(String, Vec<usize>)>,
    /// Free-form metadata (grid parameters, time, step).
    pub meta: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "vmb-f64le-v1";

/// Write a JSON header line followed by little-endian f64 arrays in row-major order.
pub fn write_checkpoint(path: &Path, meta: serde_json::Value, arrays: &[(&str, Vec<usize>, &[f64])]) -> Result<()> {
    for (name, shape, data) in arrays {
        if shape.iter().product::<usize>() != data.len() {
            return Err(VmbError::Invalid(format!("array {name} does not match its shape {shape:?}")));
        }
    }
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        arrays: arrays.iter().map(|(n, s, _)| (n.to_string(), s.clone())).collect(),
        meta,
    };
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for (_, _, data) in arrays {
        for x in data.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<(CheckpointHeader, Vec<Vec<f64>>)> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(VmbError::Invalid(format!("unknown checkpoint format {}", header.format)));
    }
    let mut out = Vec::with_capacity(header.arrays.len());
    let mut bytes = [0u8; 8];
    for (_, shape) in &header.arrays {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut bytes)?;
            data.push(f64::from_le_bytes(bytes));
        }
        out.push(data);
    }
    Ok((header, out))
}
