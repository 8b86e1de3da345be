//! Projection onto the null space of L, macroscopic coefficients (a±, b, c), the
//! moment functionals A, B, G, residuals of the macroscopic balance laws and the
//! micro identity.

use nalgebra::{Matrix6, Vector6};

use crate::collision_kernel::{CollisionQuadrature, LinearizedOperator};
use crate::em_fields::EMState;
use crate::error::{Result, VmbError};
use crate::phase_grid::{PairDistribution, SpatialGrid, VelocityGrid};

pub use crate::em_fields::Field3;

/// Macroscopic coefficients of Pg.
#[derive(Clone, Debug, PartialEq)]
pub struct MacroState {
    pub a_plus: Vec<f64>,
    pub a_minus: Vec<f64>,
    pub b: Field3,
    pub c: Vec<f64>,
}

impl MacroState {
    pub fn zeros(nx: usize) -> Self {
        MacroState {
            a_plus: vec![0.0; nx],
            a_minus: vec![0.0; nx],
            b: [vec![0.0; nx], vec![0.0; nx], vec![0.0; nx]],
            c: vec![0.0; nx],
        }
    }

    pub fn len(&self) -> usize {
        self.c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c.is_empty()
    }

    /// CSV with columns x, a_plus, a_minus, b1, b2, b3, c (x is the first coordinate).
    pub fn to_csv(&self, grid: &SpatialGrid) -> String {
        let mut out = String::from("x,a_plus,a_minus,b1,b2,b3,c\n");
        for i in 0..self.len() {
            let x = grid.coords(i)[0];
            out.push_str(&format!(
                "{x:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                self.a_plus[i], self.a_minus[i], self.b[0][i], self.b[1][i], self.b[2][i], self.c[i]
            ));
        }
        out
    }
}

/// Projection P with the lattice Gram correction.
#[derive(Clone, Debug)]
pub struct Projector {
    pub grid: VelocityGrid,
    /// Basis functions φ_k(v) so that e₁ = [φ₀, 0], e₂ = [0, φ₀], e_{3+i} = [φ_{1+i}, φ_{1+i}], e₆ = [φ₄, φ₄].
    basis: [Vec<f64>; 5],
    gram_inv: Matrix6<f64>,
}

impl Projector {
    pub fn new(grid: &VelocityGrid) -> Result<Self> {
        let sm = &grid.sqrt_mu;
        let nv = grid.len();
        let basis: [Vec<f64>; 5] = [
            sm.clone(),
            (0..nv).map(|k| grid.nodes[k][0] * sm[k]).collect(),
            (0..nv).map(|k| grid.nodes[k][1] * sm[k]).collect(),
            (0..nv).map(|k| grid.nodes[k][2] * sm[k]).collect(),
            (0..nv).map(|k| (grid.speed_sq(k) - 3.0) * sm[k]).collect(),
        ];
        let mut gram = Matrix6::zeros();
        for k in 0..6 {
            for l in 0..6 {
                gram[(k, l)] = pair_basis_dot(grid, &basis, k, l);
            }
        }
        let gram_inv = gram
            .try_inverse()
            .ok_or_else(|| VmbError::Invalid("singular Gram matrix of the null-space basis".into()))?;
        Ok(Projector { grid: grid.clone(), basis, gram_inv })
    }

    /// Species weights and lattice function of the k-th pair basis vector.
    fn pair(&self, k: usize) -> (f64, f64, &Vec<f64>) {
        pair_parts(&self.basis, k)
    }

    fn check(&self, g: &PairDistribution) -> Result<()> {
        if g.nv != self.grid.len() {
            return Err(VmbError::GridMismatch(format!(
                "distribution lattice has {} nodes, projector has {}",
                g.nv,
                self.grid.len()
            )));
        }
        Ok(())
    }

    /// Raw moments ⟨e_k, g⟩ at spatial point x.
    fn raw_moments(&self, g: &PairDistribution, x: usize) -> Vector6<f64> {
        let nv = g.nv;
        let gp = &g.plus[x * nv..(x + 1) * nv];
        let gm = &g.minus[x * nv..(x + 1) * nv];
        let w = self.grid.weight;
        let mut m = Vector6::zeros();
        for k in 0..6 {
            let (sp, sm, phi) = self.pair(k);
            let mut acc = 0.0;
            for v in 0..nv {
                acc += phi[v] * (sp * gp[v] + sm * gm[v]);
            }
            m[k] = w * acc;
        }
        m
    }

    /// Coefficients (a₊, a₋, b, c) of the orthogonal projection.
    pub fn coefficients(&self, g: &PairDistribution) -> Result<MacroState> {
        self.check(g)?;
        let mut out = MacroState::zeros(g.nx);
        for x in 0..g.nx {
            let c = self.gram_inv * self.raw_moments(g, x);
            out.a_plus[x] = c[0];
            out.a_minus[x] = c[1];
            for i in 0..3 {
                out.b[i][x] = c[2 + i];
            }
            out.c[x] = c[5];
        }
        Ok(out)
    }

    /// Pg from coefficients.
    pub fn reconstruct(&self, m: &MacroState) -> PairDistribution {
        let nx = m.len();
        let nv = self.grid.len();
        let mut out = PairDistribution::zeros(nx, nv);
        for x in 0..nx {
            let coef = [m.a_plus[x], m.a_minus[x], m.b[0][x], m.b[1][x], m.b[2][x], m.c[x]];
            for (k, &ck) in coef.iter().enumerate() {
                if ck == 0.0 {
                    continue;
                }
                let (sp, sm, phi) = self.pair(k);
                for v in 0..nv {
                    out.plus[x * nv + v] += ck * sp * phi[v];
                    out.minus[x * nv + v] += ck * sm * phi[v];
                }
            }
        }
        out
    }

    pub fn project(&self, g: &PairDistribution) -> Result<PairDistribution> {
        Ok(self.reconstruct(&self.coefficients(g)?))
    }

    /// {I − P}g.
    pub fn micro(&self, g: &PairDistribution) -> Result<PairDistribution> {
        let mut out = g.clone();
        out.axpy(-1.0, &self.project(g)?);
        Ok(out)
    }

    /// Analytic ∇_v of Pg along `axis`: [b_axis + 2c v_axis − (v_axis/2)(a± + b·v + c(|v|²−3))] μ^{1/2}.
    pub fn grad_v_of_projection(&self, m: &MacroState, axis: usize) -> PairDistribution {
        let nx = m.len();
        let nv = self.grid.len();
        let mut out = PairDistribution::zeros(nx, nv);
        for x in 0..nx {
            let b = [m.b[0][x], m.b[1][x], m.b[2][x]];
            for k in 0..nv {
                let v = self.grid.nodes[k];
                let sm = self.grid.sqrt_mu[k];
                let common = b[0] * v[0] + b[1] * v[1] + b[2] * v[2] + m.c[x] * (self.grid.speed_sq(k) - 3.0);
                let lead = b[axis] + 2.0 * m.c[x] * v[axis];
                out.plus[x * nv + k] = (lead - 0.5 * v[axis] * (m.a_plus[x] + common)) * sm;
                out.minus[x * nv + k] = (lead - 0.5 * v[axis] * (m.a_minus[x] + common)) * sm;
            }
        }
        out
    }
}

fn pair_parts(basis: &[Vec<f64>; 5], k: usize) -> (f64, f64, &Vec<f64>) {
    match k {
        0 => (1.0, 0.0, &basis[0]),
        1 => (0.0, 1.0, &basis[0]),
        2..=4 => (1.0, 1.0, &basis[k - 1]),
        _ => (1.0, 1.0, &basis[4]),
    }
}

fn pair_basis_dot(grid: &VelocityGrid, basis: &[Vec<f64>; 5], k: usize, l: usize) -> f64 {
    let (kp, km, fk) = pair_parts(basis, k);
    let (lp, lm, fl) = pair_parts(basis, l);
    (kp * lp + km * lm) * grid.dot(fk, fl)
}

/// Coefficients of the orthogonal projection of g.
pub fn macro_coefficients(g: &PairDistribution, grid: &VelocityGrid) -> Result<MacroState> {
    Projector::new(grid)?.coefficients(g)
}

/// Pg.
pub fn project_p(g: &PairDistribution, grid: &VelocityGrid) -> Result<PairDistribution> {
    Projector::new(grid)?.project(g)
}

fn check_single(g: &[f64], grid: &VelocityGrid) -> Result<usize> {
    let nv = grid.len();
    if g.len() % nv != 0 {
        return Err(VmbError::GridMismatch(format!("array of length {} is not a multiple of {nv}", g.len())));
    }
    Ok(g.len() / nv)
}

/// A_mj(g) = ∫(v_m v_j − δ_mj) μ^{1/2} g dv for a single-species `[x][v]` array.
pub fn moment_a(g: &[f64], grid: &VelocityGrid) -> Result<[[Vec<f64>; 3]; 3]> {
    let nx = check_single(g, grid)?;
    let nv = grid.len();
    let mut out: [[Vec<f64>; 3]; 3] = Default::default();
    for (m, row) in out.iter_mut().enumerate() {
        for (j, slot) in row.iter_mut().enumerate() {
            let delta = if m == j { 1.0 } else { 0.0 };
            let test: Vec<f64> =
                (0..nv).map(|k| (grid.nodes[k][m] * grid.nodes[k][j] - delta) * grid.sqrt_mu[k]).collect();
            *slot = (0..nx).map(|x| grid.dot(&test, &g[x * nv..(x + 1) * nv])).collect();
        }
    }
    Ok(out)
}

/// B_j(g) = (1/10)∫(|v|² − 5) v_j μ^{1/2} g dv.
pub fn moment_b(g: &[f64], grid: &VelocityGrid) -> Result<Field3> {
    let nx = check_single(g, grid)?;
    let nv = grid.len();
    let mut out: Field3 = Default::default();
    for (j, slot) in out.iter_mut().enumerate() {
        let test: Vec<f64> =
            (0..nv).map(|k| 0.1 * (grid.speed_sq(k) - 5.0) * grid.nodes[k][j] * grid.sqrt_mu[k]).collect();
        *slot = (0..nx).map(|x| grid.dot(&test, &g[x * nv..(x + 1) * nv])).collect();
    }
    Ok(out)
}

/// G = ⟨v μ^{1/2}, ({I−P}f)₊ − ({I−P}f)₋⟩.
pub fn moment_g(f: &PairDistribution, proj: &Projector) -> Result<Field3> {
    let micro = proj.micro(f)?;
    let (_, d) = micro.sum_diff();
    velocity_flux(&d, &proj.grid)
}

/// ⟨v μ^{1/2}, g⟩ for a single-species `[x][v]` array.
pub fn velocity_flux(g: &[f64], grid: &VelocityGrid) -> Result<Field3> {
    let nx = check_single(g, grid)?;
    let nv = grid.len();
    let mut out: Field3 = Default::default();
    for (j, slot) in out.iter_mut().enumerate() {
        let test: Vec<f64> = (0..nv).map(|k| grid.nodes[k][j] * grid.sqrt_mu[k]).collect();
        *slot = (0..nx).map(|x| grid.dot(&test, &g[x * nv..(x + 1) * nv])).collect();
    }
    Ok(out)
}

/// ⟨μ^{1/2}, g⟩ for a single-species `[x][v]` array.
pub fn density_moment(g: &[f64], grid: &VelocityGrid) -> Result<Vec<f64>> {
    let nx = check_single(g, grid)?;
    let nv = grid.len();
    Ok((0..nx).map(|x| grid.dot(&grid.sqrt_mu, &g[x * nv..(x + 1) * nv])).collect())
}

/// One time level of the state used by the balance-law residuals.
#[derive(Clone, Copy, Debug)]
pub struct Snapshot<'a> {
    pub f: &'a PairDistribution,
    pub em: &'a EMState,
}

/// L² residuals of the macroscopic balance laws at the middle snapshot.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct MacroResiduals {
    /// ∂_t (a₊+a₋)/2 + ∇·b.
    pub continuity: f64,
    /// Momentum equation for b.
    pub momentum: f64,
    /// Energy equation for c.
    pub energy: f64,
    /// ∂_t (a₊−a₋) + ∇·G.
    pub charge: f64,
    /// Equation for G.
    pub current: f64,
}

fn divergence(x: &SpatialGrid, field: &Field3) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    for (a, comp) in field.iter().enumerate().take(x.dim) {
        let d = x.spectral_x_derivative(comp, a, 1)?;
        for (o, v) in out.iter_mut().zip(d) {
            *o += v;
        }
    }
    Ok(out)
}

fn gradient_component(x: &SpatialGrid, g: &[f64], axis: usize) -> Result<Vec<f64>> {
    if axis < x.dim {
        x.spectral_x_derivative(g, axis, 1)
    } else {
        Ok(vec![0.0; g.len()])
    }
}

fn cross_at(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Evaluates the five macroscopic balance laws at the middle of three snapshots
/// spaced `dt` apart, with centered time differences.
pub fn macro_residuals(
    snaps: &[Snapshot<'_>],
    dt: f64,
    x: &SpatialGrid,
    proj: &Projector,
    op: &LinearizedOperator,
    collision: Option<&CollisionQuadrature>,
) -> Result<MacroResiduals> {
    if snaps.len() < 3 {
        return Err(VmbError::MissingSnapshot(format!(
            "balance-law residuals need three consecutive snapshots, got {}",
            snaps.len()
        )));
    }
    if !(dt > 0.0) {
        return Err(VmbError::Invalid("snapshot spacing must be positive".into()));
    }
    let (prev, cur, next) = (snaps[0], snaps[1], snaps[2]);
    let nx = x.len();
    let vg = &proj.grid;
    let mp = proj.coefficients(prev.f)?;
    let mc = proj.coefficients(cur.f)?;
    let mn = proj.coefficients(next.f)?;
    let gp = moment_g(prev.f, proj)?;
    let gc = moment_g(cur.f, proj)?;
    let gn = moment_g(next.f, proj)?;
    let dtc = |a: &[f64], b: &[f64], i: usize| (b[i] - a[i]) / (2.0 * dt);

    let micro = proj.micro(cur.f)?;
    let (ms, md) = micro.sum_diff();
    let a_s = moment_a(&ms, vg)?;
    let a_d = moment_a(&md, vg)?;
    let b_s = moment_b(&ms, vg)?;

    let e = &cur.em.e;
    let eps = cur.em.epsilon;
    let btot: Field3 = std::array::from_fn(|k| cur.em.b_tilde[k].iter().map(|b| b + cur.em.b_background[k]).collect());

    // collision moment ⟨[v, −v] μ^{1/2}, −Lf + Γ(f, f)⟩
    let lf = op.apply_l(cur.f)?;
    let (_, ld) = lf.sum_diff();
    let mut coll = velocity_flux(&ld, vg)?;
    for c in coll.iter_mut() {
        for v in c.iter_mut() {
            *v = -*v;
        }
    }
    if let Some(q) = collision {
        let (gam, _) = q.gamma(cur.f, cur.f)?;
        let (_, gd) = gam.sum_diff();
        let gflux = velocity_flux(&gd, vg)?;
        for k in 0..3 {
            for (c, g) in coll[k].iter_mut().zip(&gflux[k]) {
                *c += g;
            }
        }
    }

    // continuity and charge from the lattice moments the scheme conserves exactly;
    // they coincide with the coefficient form when the lattice quadrature is exact
    let norm = vg.dot(&vg.sqrt_mu, &vg.sqrt_mu);
    let raw_a = |f: &PairDistribution| -> Result<(Vec<f64>, Vec<f64>)> {
        let (s, d) = f.sum_diff();
        Ok((density_moment(&s, vg)?, density_moment(&d, vg)?))
    };
    let (sum_p, diff_p) = raw_a(prev.f)?;
    let (sum_n, diff_n) = raw_a(next.f)?;
    let (fs, _) = cur.f.sum_diff();
    let flux_s = velocity_flux(&fs, vg)?;
    let div_b = divergence(x, &mc.b)?;
    let div_bs_raw = divergence(x, &flux_s)?;
    let div_g = divergence(x, &gc)?;
    let mut cont = vec![0.0; nx];
    let mut charge = vec![0.0; nx];
    for i in 0..nx {
        cont[i] = ((sum_n[i] - sum_p[i]) / (4.0 * dt) + 0.5 * div_bs_raw[i]) / norm;
        charge[i] = ((diff_n[i] - diff_p[i]) / (2.0 * dt) + div_g[i]) / norm;
    }

    // momentum equation for b, component by component
    let pressure: Vec<f64> = (0..nx).map(|i| 0.5 * (mc.a_plus[i] + mc.a_minus[i]) + 2.0 * mc.c[i]).collect();
    let mut mom_sq = 0.0;
    let mut cur_sq = 0.0;
    for comp in 0..3 {
        let grad_p = gradient_component(x, &pressure, comp)?;
        let mut div_a = vec![0.0; nx];
        let mut div_ad = vec![0.0; nx];
        for j in 0..x.dim {
            let d1 = x.spectral_x_derivative(&a_s[comp][j], j, 1)?;
            let d2 = x.spectral_x_derivative(&a_d[comp][j], j, 1)?;
            for i in 0..nx {
                div_a[i] += d1[i];
                div_ad[i] += d2[i];
            }
        }
        let charge_field: Vec<f64> = (0..nx).map(|i| mc.a_plus[i] - mc.a_minus[i]).collect();
        let grad_q = gradient_component(x, &charge_field, comp)?;
        let mut r_b = vec![0.0; nx];
        let mut r_g = vec![0.0; nx];
        for i in 0..nx {
            let bt = [btot[0][i], btot[1][i], btot[2][i]];
            let g_cross = cross_at([gc[0][i], gc[1][i], gc[2][i]], bt);
            let b_cross = cross_at([mc.b[0][i], mc.b[1][i], mc.b[2][i]], bt);
            r_b[i] = dtc(&mp.b[comp], &mn.b[comp], i) + grad_p[i] + 0.5 * div_a[i]
                - 0.5 * (mc.a_plus[i] - mc.a_minus[i]) * e[comp][i]
                - 0.5 * eps * g_cross[comp];
            r_g[i] = dtc(&gp[comp], &gn[comp], i) + grad_q[i] - 2.0 * e[comp][i] + div_ad[i]
                - e[comp][i] * (mc.a_plus[i] + mc.a_minus[i])
                - 2.0 * eps * b_cross[comp]
                - coll[comp][i];
        }
        mom_sq += x.norm_sq(&r_b);
        cur_sq += x.norm_sq(&r_g);
    }

    // energy equation for c
    let div_bs = divergence(x, &b_s)?;
    let mut r_c = vec![0.0; nx];
    for i in 0..nx {
        let eg = e[0][i] * gc[0][i] + e[1][i] * gc[1][i] + e[2][i] * gc[2][i];
        r_c[i] = dtc(&mp.c, &mn.c, i) + div_b[i] / 3.0 + 5.0 / 6.0 * div_bs[i] - eg / 6.0;
    }

    Ok(MacroResiduals {
        continuity: x.norm_sq(&cont).sqrt(),
        momentum: mom_sq.sqrt(),
        energy: x.norm_sq(&r_c).sqrt(),
        charge: x.norm_sq(&charge).sqrt(),
        current: cur_sq.sqrt(),
    })
}

/// Relative defect of {I−P}{E·vμ^{1/2}q₁ − q₀ε(v×𝔅)·∇_v Pf} = {E + εb^f×𝔅}·vμ^{1/2}q₁.
pub fn verify_micro_identity(
    f: &PairDistribution,
    e: &Field3,
    b_const: [f64; 3],
    epsilon: f64,
    proj: &Projector,
) -> Result<f64> {
    let nx = f.nx;
    let nv = f.nv;
    for comp in e {
        if comp.len() != nx {
            return Err(VmbError::GridMismatch("electric field does not match the distribution".into()));
        }
    }
    let vg = &proj.grid;
    let m = proj.coefficients(f)?;
    let grads: Vec<PairDistribution> = (0..3).map(|a| proj.grad_v_of_projection(&m, a)).collect();
    let mut lhs = PairDistribution::zeros(nx, nv);
    let mut rhs = PairDistribution::zeros(nx, nv);
    for x in 0..nx {
        let ex = [e[0][x], e[1][x], e[2][x]];
        let bx = [m.b[0][x], m.b[1][x], m.b[2][x]];
        let shift = cross_at(bx, b_const);
        for k in 0..nv {
            let v = vg.nodes[k];
            let sm = vg.sqrt_mu[k];
            let ev = (ex[0] * v[0] + ex[1] * v[1] + ex[2] * v[2]) * sm;
            let vxb = cross_at(v, b_const);
            let idx = x * nv + k;
            let mag_p: f64 = (0..3).map(|a| vxb[a] * grads[a].plus[idx]).sum();
            let mag_m: f64 = (0..3).map(|a| vxb[a] * grads[a].minus[idx]).sum();
            lhs.plus[idx] = ev - epsilon * mag_p;
            lhs.minus[idx] = -ev + epsilon * mag_m;
            let s = (0..3).map(|a| (ex[a] + epsilon * shift[a]) * v[a]).sum::<f64>() * sm;
            rhs.plus[idx] = s;
            rhs.minus[idx] = -s;
        }
    }
    let lhs = proj.micro(&lhs)?;
    let mut diff = lhs.clone();
    diff.axpy(-1.0, &rhs);
    let num: f64 = diff.plus.iter().chain(&diff.minus).map(|a| a * a).sum::<f64>().sqrt();
    let den: f64 = rhs.plus.iter().chain(&rhs.minus).map(|a| a * a).sum::<f64>().sqrt();
    Ok(num / den.max(f64::MIN_POSITIVE))
}
