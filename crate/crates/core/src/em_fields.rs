//! Electromagnetic state and dynamics: exact per-mode Maxwell integration, the
//! Poisson field of the limit system, Gauss-law monitoring and compatibility
//! correction of initial data.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VmbError};
use crate::phase_grid::{PairDistribution, SpatialGrid, VelocityGrid};

/// Spatial field with three components.
pub type Field3 = [Vec<f64>; 3];

pub fn zero_field(nx: usize) -> Field3 {
    [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]]
}

/// Electric field, magnetic perturbation, constant background field and ε = 1/c.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EMState {
    pub e: Field3,
    pub b_tilde: Field3,
    pub b_background: [f64; 3],
    pub epsilon: f64,
}

impl EMState {
    pub fn zeros(nx: usize, b_background: [f64; 3], epsilon: f64) -> Self {
        EMState { e: zero_field(nx), b_tilde: zero_field(nx), b_background, epsilon }
    }

    pub fn len(&self) -> usize {
        self.e[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_finite(&self) -> bool {
        self.e.iter().chain(&self.b_tilde).flatten().all(|x| x.is_finite())
    }

    /// ‖E‖² + ‖B̃‖².
    pub fn energy(&self, x: &SpatialGrid) -> f64 {
        self.e.iter().chain(&self.b_tilde).map(|c| x.norm_sq(c)).sum()
    }

    /// Total magnetic field 𝔅 + B̃ at spatial point i.
    pub fn b_total_at(&self, i: usize) -> [f64; 3] {
        std::array::from_fn(|a| self.b_background[a] + self.b_tilde[a][i])
    }

    pub fn check_grid(&self, x: &SpatialGrid) -> Result<()> {
        for c in self.e.iter().chain(&self.b_tilde) {
            x.check_len(c.len())?;
        }
        Ok(())
    }
}

fn spectra(x: &SpatialGrid, f: &Field3) -> [Vec<Complex64>; 3] {
    std::array::from_fn(|a| x.to_spectrum(&f[a]))
}

fn fields(x: &SpatialGrid, s: [Vec<Complex64>; 3]) -> Field3 {
    s.map(|c| x.from_spectrum(c))
}

/// 2π times the odd-order wavenumber of mode m.
fn odd_k(x: &SpatialGrid, m: usize) -> [f64; 3] {
    x.odd_wavenumbers[m].map(|v| 2.0 * PI * v)
}

fn cross_c(a: [f64; 3], b: [Complex64; 3]) -> [Complex64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn dot_c(a: [f64; 3], b: [Complex64; 3]) -> Complex64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// ∇·F computed spectrally.
pub fn divergence(x: &SpatialGrid, f: &Field3) -> Result<Vec<f64>> {
    for c in f {
        x.check_len(c.len())?;
    }
    let s = spectra(x, f);
    let out: Vec<Complex64> = (0..x.len())
        .map(|m| {
            let k = odd_k(x, m);
            Complex64::new(0.0, 1.0) * dot_c(k, [s[0][m], s[1][m], s[2][m]])
        })
        .collect();
    Ok(x.from_spectrum(out))
}

/// ∇×F computed spectrally.
pub fn curl(x: &SpatialGrid, f: &Field3) -> Result<Field3> {
    for c in f {
        x.check_len(c.len())?;
    }
    let s = spectra(x, f);
    let mut out: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); x.len()]);
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let c = cross_c(k, [s[0][m], s[1][m], s[2][m]]);
        for a in 0..3 {
            out[a][m] = Complex64::new(0.0, 1.0) * c[a];
        }
    }
    Ok(fields(x, out))
}

/// ∇g computed spectrally; components along inactive axes are zero.
pub fn gradient(x: &SpatialGrid, g: &[f64]) -> Result<Field3> {
    x.check_len(g.len())?;
    let s = x.to_spectrum(g);
    let out: [Vec<Complex64>; 3] = std::array::from_fn(|a| {
        (0..x.len()).map(|m| Complex64::new(0.0, odd_k(x, m)[a]) * s[m]).collect()
    });
    Ok(fields(x, out))
}

/// Per-mode Maxwell update of (Ê, B̂) over `dt` with a frozen source ĵ.
/// With `longitudinal = false` the source acts only on the transverse part of modes with k ≠ 0.
fn maxwell_mode(
    k: [f64; 3],
    eps: f64,
    dt: f64,
    e: [Complex64; 3],
    b: [Complex64; 3],
    j: [Complex64; 3],
    longitudinal: bool,
) -> ([Complex64; 3], [Complex64; 3]) {
    let kn = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
    if kn == 0.0 {
        let e_new = std::array::from_fn(|a| e[a] - j[a] * dt);
        return (e_new, b);
    }
    let n = k.map(|v| v / kn);
    let omega = kn / eps;
    let (s, c) = (omega * dt).sin_cos();
    let split = |f: [Complex64; 3]| {
        let par = dot_c(n, f);
        let perp: [Complex64; 3] = std::array::from_fn(|a| f[a] - n[a] * par);
        (par, perp)
    };
    let (e_par, e_perp) = split(e);
    let (b_par, b_perp) = split(b);
    let (mut j_par, j_perp) = split(j);
    if !longitudinal {
        j_par = Complex64::new(0.0, 0.0);
    }
    let i = Complex64::new(0.0, 1.0);
    let cb = cross_c(n, b_perp);
    let ce = cross_c(n, e_perp);
    let cj = cross_c(n, j_perp);
    let one_minus_c = 2.0 * (0.5 * omega * dt).sin().powi(2);
    let mut e_new = [Complex64::new(0.0, 0.0); 3];
    let mut b_new = [Complex64::new(0.0, 0.0); 3];
    for a in 0..3 {
        let x_t = c * e_perp[a] + i * s * cb[a] - (s / omega) * j_perp[a];
        let y_t = c * b_perp[a] - i * s * ce[a] + i * (one_minus_c / omega) * cj[a];
        e_new[a] = x_t + n[a] * (e_par - j_par * dt);
        b_new[a] = y_t + n[a] * b_par;
    }
    (e_new, b_new)
}

/// Advance ε∂_tE − ∇×B̃ = −εj, ε∂_tB̃ + ∇×E = 0 exactly per mode over `dt` with `j` frozen.
pub fn maxwell_substep(em: &EMState, current: &Field3, dt: f64, x: &SpatialGrid) -> Result<EMState> {
    maxwell_update(em, current, dt, x, true)
}

/// As [`maxwell_substep`] but without the longitudinal source on modes with k ≠ 0.
///
/// The kinetic solver deposits the longitudinal current during free streaming instead
/// (see [`longitudinal_impulse`]), which keeps ∇·E equal to the charge density exactly.
pub fn maxwell_rotation_substep(em: &EMState, current: &Field3, dt: f64, x: &SpatialGrid) -> Result<EMState> {
    maxwell_update(em, current, dt, x, false)
}

fn maxwell_update(em: &EMState, current: &Field3, dt: f64, x: &SpatialGrid, longitudinal: bool) -> Result<EMState> {
    if !(dt > 0.0) {
        return Err(VmbError::Invalid(format!("Maxwell substep needs dt > 0, got {dt}")));
    }
    em.check_grid(x)?;
    for c in current {
        x.check_len(c.len())?;
    }
    let se = spectra(x, &em.e);
    let sb = spectra(x, &em.b_tilde);
    let sj = spectra(x, current);
    let mut oe: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); x.len()]);
    let mut ob = oe.clone();
    for m in 0..x.len() {
        let (e_new, b_new) = maxwell_mode(
            odd_k(x, m),
            em.epsilon,
            dt,
            [se[0][m], se[1][m], se[2][m]],
            [sb[0][m], sb[1][m], sb[2][m]],
            [sj[0][m], sj[1][m], sj[2][m]],
            longitudinal,
        );
        for a in 0..3 {
            oe[a][m] = e_new[a];
            ob[a][m] = b_new[a];
        }
    }
    Ok(EMState { e: fields(x, oe), b_tilde: fields(x, ob), b_background: em.b_background, epsilon: em.epsilon })
}

/// The 6×6 homogeneous update of (Ê, B̂) for one wave vector 2πξ.
pub fn maxwell_mode_matrix(k: [f64; 3], eps: f64, dt: f64) -> [[Complex64; 6]; 6] {
    let zero = [Complex64::new(0.0, 0.0); 3];
    let mut out = [[Complex64::new(0.0, 0.0); 6]; 6];
    for col in 0..6 {
        let mut e = zero;
        let mut b = zero;
        if col < 3 {
            e[col] = Complex64::new(1.0, 0.0);
        } else {
            b[col - 3] = Complex64::new(1.0, 0.0);
        }
        let (en, bn) = maxwell_mode(k, eps, dt, e, b, zero, true);
        for r in 0..3 {
            out[r][col] = en[r];
            out[r + 3][col] = bn[r];
        }
    }
    out
}

/// Subtract the longitudinal part of a time-integrated current from E on modes with k ≠ 0.
pub fn longitudinal_impulse(e: &mut Field3, integrated: &[Vec<Complex64>; 3], x: &SpatialGrid) -> Result<()> {
    for c in e.iter() {
        x.check_len(c.len())?;
    }
    for c in integrated {
        if c.len() != x.len() {
            return Err(VmbError::GridMismatch(format!("spectrum length {} vs grid {}", c.len(), x.len())));
        }
    }
    let mut se = spectra(x, e);
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let kn = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
        if kn == 0.0 {
            continue;
        }
        let n = k.map(|c| c / kn);
        let par = dot_c(n, [integrated[0][m], integrated[1][m], integrated[2][m]]);
        for a in 0..3 {
            se[a][m] -= n[a] * par;
        }
    }
    *e = fields(x, se);
    Ok(())
}

/// Longitudinal part of a field: the projection onto k̂(k̂·F̂) on modes with k ≠ 0.
pub fn longitudinal_part(x: &SpatialGrid, f: &Field3) -> Result<Field3> {
    for c in f {
        x.check_len(c.len())?;
    }
    let s = spectra(x, f);
    let mut out: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); x.len()]);
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let kn = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
        if kn == 0.0 {
            continue;
        }
        let n = k.map(|c| c / kn);
        let par = dot_c(n, [s[0][m], s[1][m], s[2][m]]);
        for a in 0..3 {
            out[a][m] = n[a] * par;
        }
    }
    Ok(fields(x, out))
}

/// Divergence-free B with ∇×B equal to the transverse part of `j` on modes with k ≠ 0.
pub fn magnetostatic_field(x: &SpatialGrid, j: &Field3) -> Result<Field3> {
    for c in j {
        x.check_len(c.len())?;
    }
    let s = spectra(x, j);
    let mut out: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); x.len()]);
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            continue;
        }
        let c = cross_c(k, [s[0][m], s[1][m], s[2][m]]);
        for a in 0..3 {
            out[a][m] = Complex64::new(0.0, 1.0) * c[a] / k2;
        }
    }
    Ok(fields(x, out))
}

fn check_neutral(x: &SpatialGrid, rho: &[f64]) -> Result<()> {
    let mean = x.mean(rho);
    let scale = rho.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if mean.abs() > 1e-12 * scale {
        return Err(VmbError::NonNeutral { mean });
    }
    Ok(())
}

/// E = ∇φ with Δφ = ρ, so that ∇×E = 0 and ∇·E = ρ.
pub fn poisson_field(rho: &[f64], x: &SpatialGrid) -> Result<Field3> {
    x.check_len(rho.len())?;
    check_neutral(x, rho)?;
    let s = x.to_spectrum(rho);
    let mut out: [Vec<Complex64>; 3] = std::array::from_fn(|_| vec![Complex64::new(0.0, 0.0); x.len()]);
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let k2 = k[0] * k[0] + k[1] * k[1] + k[2] * k[2];
        if k2 == 0.0 {
            continue;
        }
        let phi = -s[m] / k2;
        for a in 0..3 {
            out[a][m] = Complex64::new(0.0, k[a]) * phi;
        }
    }
    Ok(fields(x, out))
}

/// ‖∇·E − ρ‖ / max(‖ρ‖, floor).
pub fn gauss_residual(em: &EMState, rho: &[f64], x: &SpatialGrid) -> Result<f64> {
    let div = divergence(x, &em.e)?;
    x.check_len(rho.len())?;
    let r: Vec<f64> = div.iter().zip(rho).map(|(a, b)| a - b).collect();
    let floor = 1e-30;
    Ok(x.norm_sq(&r).sqrt() / x.norm_sq(rho).sqrt().max(floor))
}

/// Replace the longitudinal part of E₀ by the Poisson field of the charge density of f₀ and
/// remove any divergence from B̃₀. Transverse E₀, solenoidal B̃₀ and zero modes pass through.
pub fn enforce_compatibility(
    f0: &PairDistribution,
    e0: &Field3,
    b0: &Field3,
    x: &SpatialGrid,
    v: &VelocityGrid,
) -> Result<(Field3, Field3)> {
    f0.check_grids(x, v)?;
    let rho = f0.charge_density(v);
    let poisson = poisson_field(&rho, x)?;
    let se = spectra(x, e0);
    let sp = spectra(x, &poisson);
    let sb = spectra(x, b0);
    let mut oe = se.clone();
    let mut ob = sb.clone();
    for m in 0..x.len() {
        let k = odd_k(x, m);
        let kn = (k[0] * k[0] + k[1] * k[1] + k[2] * k[2]).sqrt();
        if kn == 0.0 {
            continue;
        }
        let n = k.map(|c| c / kn);
        let e_par = dot_c(n, [se[0][m], se[1][m], se[2][m]]);
        let p_par = dot_c(n, [sp[0][m], sp[1][m], sp[2][m]]);
        let b_par = dot_c(n, [sb[0][m], sb[1][m], sb[2][m]]);
        for a in 0..3 {
            oe[a][m] += n[a] * (p_par - e_par);
            ob[a][m] -= n[a] * b_par;
        }
    }
    Ok((fields(x, oe), fields(x, ob)))
}
