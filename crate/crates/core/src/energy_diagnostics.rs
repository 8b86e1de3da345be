//! Energy and dissipation functionals, time-velocity weighted norms, negative-order
//! Sobolev norms and the shifted electric field, evaluated on solver states.
//!
//! Functionals that are defined only up to equivalence are realized with unit constants.

use serde::{Deserialize, Serialize};

use crate::em_fields::{gauss_residual, EMState, Field3};
use crate::error::{Result, VmbError};
use crate::kinetic_solver::{Recorder, SolverOps, VMBState};
use crate::macro_micro::{MacroState, Projector};
use crate::phase_grid::{PairDistribution, SpatialGrid, VelocityGrid, MAX_DERIVATIVE_ORDER};

/// ⟨v⟩ = (1 + |v|²)^{1/2}.
pub fn japanese(v: [f64; 3]) -> f64 {
    (1.0 + v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Parameters of w_{ℓ−|β|,κ}(t, v) = ⟨v⟩^{κ(ℓ−|β|)} e^{q⟨v⟩²/(1+t)^ϑ}.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightSpec {
    pub ell: f64,
    pub kappa: f64,
    pub q: f64,
    pub vartheta: f64,
}

impl Default for WeightSpec {
    fn default() -> Self {
        WeightSpec { ell: 2.0, kappa: 1.0, q: 0.05, vartheta: 0.25 }
    }
}

impl WeightSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.ell >= 0.0) || !(0.0..1.0).contains(&self.q) || !(self.vartheta > 0.0) || !self.kappa.is_finite() {
            return Err(VmbError::Config(format!("invalid weight parameters {self:?}")));
        }
        Ok(())
    }

    /// w_{ℓ−|β|,κ}(t, v); requires ℓ ≥ |β|.
    pub fn weight(&self, t: f64, v: [f64; 3], beta_order: usize) -> Result<f64> {
        let shift = self.ell - beta_order as f64;
        if shift < 0.0 {
            return Err(VmbError::Invalid(format!("weight order {} is below |beta| = {beta_order}", self.ell)));
        }
        let jv = japanese(v);
        Ok(jv.powf(self.kappa * shift) * (self.q * jv * jv / (1.0 + t).powf(self.vartheta)).exp())
    }
}

/// Extra velocity factor of a weighted norm.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightVariant {
    Plain,
    /// ν(v)^{1/2} inside the norm.
    Nu,
    /// ⟨v⟩^{1/2} inside the norm.
    VAugmented,
}

/// One configured weighted-norm column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightedEntry {
    pub label: String,
    pub spec: WeightSpec,
    #[serde(default)]
    pub alpha: [usize; 3],
    #[serde(default)]
    pub beta: [usize; 3],
    #[serde(default = "plain")]
    pub variant: WeightVariant,
}

fn plain() -> WeightVariant {
    WeightVariant::Plain
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Orders ϱ of the negative Sobolev columns.
    pub varrho: Vec<f64>,
    pub weighted: Vec<WeightedEntry>,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            varrho: vec![0.5, 1.0],
            weighted: vec![WeightedEntry {
                label: "w_l2_k1".into(),
                spec: WeightSpec::default(),
                alpha: [0; 3],
                beta: [0; 3],
                variant: WeightVariant::Plain,
            }],
        }
    }
}

/// Grids, projection and collision frequency needed by the functionals.
pub struct Diagnostics {
    pub x: SpatialGrid,
    pub v: VelocityGrid,
    pub proj: Projector,
    pub nu: Vec<f64>,
    pub cfg: DiagnosticsConfig,
}

/// Velocity multi-indices β with |β| ≤ n.
pub fn velocity_multi_indices(n: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=n {
        for b0 in (0..=total).rev() {
            for b1 in (0..=(total - b0)).rev() {
                out.push([b0, b1, total - b0 - b1]);
            }
        }
    }
    out
}

fn order(a: [usize; 3]) -> usize {
    a.iter().sum()
}

fn check_order(n: usize) -> Result<()> {
    if n > MAX_DERIVATIVE_ORDER {
        return Err(VmbError::DerivativeOrder { order: n, max: MAX_DERIVATIVE_ORDER });
    }
    Ok(())
}

/// ∂^α of an `[x][col]` array, spectrally per column.
pub fn phase_x_derivative(x: &SpatialGrid, data: &[f64], ncol: usize, alpha: [usize; 3]) -> Result<Vec<f64>> {
    for (a, &o) in alpha.iter().enumerate() {
        if o > 0 {
            x.check_axis(a)?;
        }
    }
    let mut out = data.to_vec();
    if order(alpha) == 0 {
        return Ok(out);
    }
    x.map_columns_spectral(&mut out, ncol, |_, spec| {
        for (m, c) in spec.iter_mut().enumerate() {
            for (a, &o) in alpha.iter().enumerate() {
                *c *= x.derivative_symbol(m, a, o);
            }
        }
    });
    Ok(out)
}

/// ∂^α_β of both species.
pub fn phase_derivative(
    f: &PairDistribution,
    x: &SpatialGrid,
    v: &VelocityGrid,
    alpha: [usize; 3],
    beta: [usize; 3],
) -> Result<PairDistribution> {
    check_order(order(alpha) + order(beta))?;
    let mut parts = Vec::with_capacity(2);
    for s in 0..2 {
        let dx = phase_x_derivative(x, f.component(s), f.nv, alpha)?;
        parts.push(if order(beta) == 0 { dx } else { v.mixed_velocity_derivative(&dx, beta)? });
    }
    let minus = parts.pop().expect("two species");
    let plus = parts.pop().expect("two species");
    PairDistribution::from_parts(f.nx, f.nv, plus, minus)
}

/// Σ over both species of ΔV Δv³ Σ factor(v)·g².
fn weighted_sq(f: &PairDistribution, x: &SpatialGrid, v: &VelocityGrid, factor: Option<&[f64]>) -> f64 {
    let nv = f.nv;
    let mut acc = 0.0;
    for comp in [&f.plus, &f.minus] {
        for (idx, g) in comp.iter().enumerate() {
            let w = factor.map_or(1.0, |fac| fac[idx % nv]);
            acc += w * g * g;
        }
    }
    x.cell_volume() * v.weight * acc
}

fn field_sq(x: &SpatialGrid, f: &Field3) -> f64 {
    f.iter().map(|c| x.norm_sq(c)).sum()
}

/// Σ_{|α|≤n} ‖∂^α F‖² for a spatial vector field.
fn field_hn_sq(x: &SpatialGrid, f: &Field3, n: usize) -> Result<f64> {
    let mut total = 0.0;
    for alpha in x.multi_indices(n) {
        for c in f {
            total += x.norm_sq(&x.mixed_derivative(c, alpha)?);
        }
    }
    Ok(total)
}

/// Per-order sums S_k = Σ_{|α|+|β|=k} ‖∂^α_β g‖²_factor for k = 0..=n.
fn derivative_sums(
    g: &PairDistribution,
    x: &SpatialGrid,
    v: &VelocityGrid,
    n: usize,
    factor: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; n + 1];
    for alpha in x.multi_indices(n) {
        let ga = phase_derivative(g, x, v, alpha, [0; 3])?;
        for beta in velocity_multi_indices(n - order(alpha)) {
            let d = if order(beta) == 0 { ga.clone() } else { phase_derivative(&ga, x, v, [0; 3], beta)? };
            sums[order(alpha) + order(beta)] += weighted_sq(&d, x, v, factor);
        }
    }
    Ok(sums)
}

fn prefix(sums: &[f64]) -> Vec<f64> {
    sums.iter()
        .scan(0.0, |acc, s| {
            *acc += s;
            Some(*acc)
        })
        .collect()
}

impl Diagnostics {
    pub fn new(ops: &SolverOps, cfg: DiagnosticsConfig) -> Result<Self> {
        for w in &cfg.weighted {
            w.spec.validate()?;
        }
        for &r in &cfg.varrho {
            if !(0.0..1.5).contains(&r) {
                return Err(VmbError::Config(format!("varrho = {r} outside [0, 3/2)")));
            }
        }
        Ok(Diagnostics { x: ops.x.clone(), v: ops.v.clone(), proj: Projector::new(&ops.v)?, nu: ops.op.nu.clone(), cfg })
    }

    /// E_k for k = 0..=n.
    pub fn energy_levels(&self, state: &VMBState, n: usize) -> Result<Vec<f64>> {
        check_order(n)?;
        state.f.check_grids(&self.x, &self.v)?;
        let fs = prefix(&derivative_sums(&state.f, &self.x, &self.v, n, None)?);
        (0..=n)
            .map(|k| Ok(fs[k] + field_hn_sq(&self.x, &state.em.e, k)? + field_hn_sq(&self.x, &state.em.b_tilde, k)?))
            .collect()
    }

    /// D_k for k = 0..=n.
    pub fn dissipation_levels(&self, state: &VMBState, n: usize) -> Result<Vec<f64>> {
        check_order(n)?;
        state.f.check_grids(&self.x, &self.v)?;
        let x = &self.x;
        let mac = self.proj.coefficients(&state.f)?;
        let micro = self.proj.micro(&state.f)?;
        let ms = prefix(&derivative_sums(&micro, x, &self.v, n, Some(&self.nu))?);
        let eps = state.em.epsilon;
        let diff: Vec<f64> = mac.a_plus.iter().zip(&mac.a_minus).map(|(a, b)| a - b).collect();
        let shifted = shifted_field_norm(&state.em, &mac, x)?;
        let macro_fields: Vec<&Vec<f64>> =
            [&mac.a_plus, &mac.a_minus, &mac.b[0], &mac.b[1], &mac.b[2], &mac.c].into_iter().collect();
        let mut out = Vec::with_capacity(n + 1);
        for k in 0..=n {
            let mut macro_grad = 0.0;
            for alpha in x.multi_indices(k) {
                if order(alpha) == 0 {
                    continue;
                }
                for g in &macro_fields {
                    macro_grad += x.norm_sq(&x.mixed_derivative(g, alpha)?);
                }
            }
            // ‖∇_x[E, B̃]‖²_{H^{k−2}}, with H^s read as L² for s < 0
            let hs = k.saturating_sub(2);
            let mut field_grad = 0.0;
            for alpha in x.multi_indices(hs + 1) {
                if order(alpha) == 0 {
                    continue;
                }
                for c in state.em.e.iter().chain(&state.em.b_tilde) {
                    field_grad += x.norm_sq(&x.mixed_derivative(c, alpha)?);
                }
            }
            out.push(macro_grad + ms[k] + x.norm_sq(&diff) + eps * eps * shifted * shifted + eps * eps * field_grad);
        }
        Ok(out)
    }

    pub fn report(&self, state: &VMBState) -> Result<EnergyReport> {
        let energy = self.energy_levels(state, 3)?;
        let dissipation = self.dissipation_levels(state, 3)?;
        let rho = state.f.charge_density(&self.v);
        let gauss = gauss_residual(&state.em, &rho, &self.x)?;
        let mac = self.proj.coefficients(&state.f)?;
        let shifted = shifted_field_norm(&state.em, &mac, &self.x)?;
        let centered = remove_spatial_mean(&state.f);
        let mut neg = Vec::new();
        for &r in &self.cfg.varrho {
            let p = negative_sobolev_norm(&centered.plus, centered.nv, self.v.weight, r, &self.x)?;
            let m = negative_sobolev_norm(&centered.minus, centered.nv, self.v.weight, r, &self.x)?;
            neg.push((r, (p * p + m * m).sqrt()));
        }
        let mut weighted = Vec::new();
        for w in &self.cfg.weighted {
            let val = weighted_norm(&state.f, &w.spec, state.t, w.alpha, w.beta, w.variant, self)?;
            weighted.push((w.label.clone(), val));
        }
        let mut e = [0.0; 4];
        let mut d = [0.0; 4];
        e.copy_from_slice(&energy);
        d.copy_from_slice(&dissipation);
        Ok(EnergyReport {
            t: state.t,
            energy: e,
            dissipation: d,
            gauss_residual: gauss,
            shifted_field: shifted,
            neg_sobolev: neg,
            weighted,
        })
    }

    /// CSV header: t, E0..E3, D0..D3, gauss_residual, shifted_field, neg_sobolev_<ϱ>, weighted labels.
    pub fn csv_header(&self) -> String {
        let mut cols: Vec<String> = vec!["t".into()];
        cols.extend((0..4).map(|k| format!("E{k}")));
        cols.extend((0..4).map(|k| format!("D{k}")));
        cols.push("gauss_residual".into());
        cols.push("shifted_field".into());
        cols.extend(self.cfg.varrho.iter().map(|r| format!("neg_sobolev_{r}")));
        cols.extend(self.cfg.weighted.iter().map(|w| w.label.clone()));
        cols.join(",")
    }
}

/// Energy functional E_n = Σ_{|α|+|β|≤n} ‖∂^α_β f‖² + Σ_{|α|≤n} ‖∂^α[E, B̃]‖².
pub fn energy_functional(state: &VMBState, n: usize, diag: &Diagnostics) -> Result<f64> {
    Ok(diag.energy_levels(state, n)?[n])
}

/// Dissipation functional D_n with unit constants.
pub fn dissipation_functional(state: &VMBState, n: usize, diag: &Diagnostics) -> Result<f64> {
    Ok(diag.dissipation_levels(state, n)?[n])
}

/// ‖w_{ℓ−|β|,κ}(t,·) ∂^α_β f‖ with an optional ν^{1/2} or ⟨v⟩^{1/2} factor.
pub fn weighted_norm(
    f: &PairDistribution,
    spec: &WeightSpec,
    t: f64,
    alpha: [usize; 3],
    beta: [usize; 3],
    variant: WeightVariant,
    diag: &Diagnostics,
) -> Result<f64> {
    let v = &diag.v;
    let w: Vec<f64> = (0..v.len())
        .map(|k| {
            let base = spec.weight(t, v.nodes[k], order(beta))?;
            let extra = match variant {
                WeightVariant::Plain => 1.0,
                WeightVariant::Nu => diag.nu[k],
                WeightVariant::VAugmented => japanese(v.nodes[k]),
            };
            Ok(base * base * extra)
        })
        .collect::<Result<_>>()?;
    let d = phase_derivative(f, &diag.x, v, alpha, beta)?;
    Ok(weighted_sq(&d, &diag.x, v, Some(&w)).sqrt())
}

/// f minus its spatial mean at every velocity node.
pub fn remove_spatial_mean(f: &PairDistribution) -> PairDistribution {
    let mut out = f.clone();
    let (nx, nv) = f.shape();
    for s in 0..2 {
        let c = out.component_mut(s);
        for k in 0..nv {
            let mean = (0..nx).map(|i| c[i * nv + k]).sum::<f64>() / nx as f64;
            for i in 0..nx {
                c[i * nv + k] -= mean;
            }
        }
    }
    out
}

/// Λ^s g = |ξ|^s ĝ on nonzero modes of each column of an `[x][col]` array; g must have zero mean.
pub fn lambda_power(g: &[f64], ncol: usize, s: f64, x: &SpatialGrid) -> Result<Vec<f64>> {
    if g.len() != x.len() * ncol {
        return Err(VmbError::GridMismatch(format!("array of {} entries is not {} x {ncol}", g.len(), x.len())));
    }
    let scale = g.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for c in 0..ncol {
        let mean = (0..x.len()).map(|i| g[i * ncol + c]).sum::<f64>() / x.len() as f64;
        if mean.abs() > 1e-12 * scale {
            return Err(VmbError::NonNeutral { mean });
        }
    }
    let mut out = g.to_vec();
    x.map_columns_spectral(&mut out, ncol, |_, spec| {
        for (m, c) in spec.iter_mut().enumerate() {
            let xi = x.wavenumbers[m];
            let k = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
            if k == 0.0 {
                *c = 0.0.into();
            } else {
                *c *= k.powf(s);
            }
        }
    });
    Ok(out)
}

/// ‖Λ^{−ϱ} g‖ with column weight `col_weight` (Δv³ for phase fields, 1 for spatial fields).
pub fn negative_sobolev_norm(g: &[f64], ncol: usize, col_weight: f64, varrho: f64, x: &SpatialGrid) -> Result<f64> {
    let h = lambda_power(g, ncol, -varrho, x)?;
    Ok((col_weight * x.norm_sq(&h)).sqrt())
}

/// ‖E + ε b×𝔅‖ with b from the macroscopic coefficients.
pub fn shifted_field_norm(em: &EMState, mac: &MacroState, x: &SpatialGrid) -> Result<f64> {
    em.check_grid(x)?;
    x.check_len(mac.len())?;
    let bb = em.b_background;
    let eps = em.epsilon;
    let mut total = 0.0;
    for i in 0..x.len() {
        let b = [mac.b[0][i], mac.b[1][i], mac.b[2][i]];
        let c = [b[1] * bb[2] - b[2] * bb[1], b[2] * bb[0] - b[0] * bb[2], b[0] * bb[1] - b[1] * bb[0]];
        for a in 0..3 {
            let s = em.e[a][i] + eps * c[a];
            total += s * s;
        }
    }
    Ok((x.cell_volume() * total).sqrt())
}

/// ‖E‖² + ‖B̃‖², the n = 0 field part of E_n.
pub fn field_energy(em: &EMState, x: &SpatialGrid) -> f64 {
    field_sq(x, &em.e) + field_sq(x, &em.b_tilde)
}

/// Diagnostics of one recorded state.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub t: f64,
    pub energy: [f64; 4],
    pub dissipation: [f64; 4],
    pub gauss_residual: f64,
    pub shifted_field: f64,
    pub neg_sobolev: Vec<(f64, f64)>,
    pub weighted: Vec<(String, f64)>,
}

impl EnergyReport {
    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = vec![format!("{:e}", self.t)];
        cols.extend(self.energy.iter().map(|x| format!("{x:e}")));
        cols.extend(self.dissipation.iter().map(|x| format!("{x:e}")));
        cols.push(format!("{:e}", self.gauss_residual));
        cols.push(format!("{:e}", self.shifted_field));
        cols.extend(self.neg_sobolev.iter().map(|(_, x)| format!("{x:e}")));
        cols.extend(self.weighted.iter().map(|(_, x)| format!("{x:e}")));
        cols.join(",")
    }

    pub fn all_finite_nonnegative(&self) -> bool {
        self.energy
            .iter()
            .chain(&self.dissipation)
            .chain([&self.gauss_residual, &self.shifted_field])
            .chain(self.neg_sobolev.iter().map(|(_, x)| x))
            .chain(self.weighted.iter().map(|(_, x)| x))
            .all(|x| x.is_finite() && *x >= 0.0)
    }
}

/// Trapezoidal ∫₀^t D_n over a recorded series.
pub fn cumulative_dissipation(reports: &[EnergyReport], n: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(reports.len());
    let mut acc = 0.0;
    for (i, r) in reports.iter().enumerate() {
        if i > 0 {
            let p = &reports[i - 1];
            acc += 0.5 * (r.t - p.t) * (r.dissipation[n] + p.dissipation[n]);
        }
        out.push(acc);
    }
    out
}

/// Recorder collecting one report per recorded state.
pub struct SeriesRecorder<'a> {
    pub diag: &'a Diagnostics,
    pub reports: Vec<EnergyReport>,
}

impl<'a> SeriesRecorder<'a> {
    pub fn new(diag: &'a Diagnostics) -> Self {
        SeriesRecorder { diag, reports: Vec::new() }
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.diag.csv_header();
        out.push('\n');
        for r in &self.reports {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

impl Recorder for SeriesRecorder<'_> {
    fn record(&mut self, state: &VMBState) -> Result<()> {
        self.reports.push(self.diag.report(state)?);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_closed_forms() {
        let w = WeightSpec { ell: 2.0, kappa: 1.0, q: 0.1, vartheta: 0.5 };
        assert!((w.weight(0.0, [0.0; 3], 0).unwrap() - 0.1f64.exp()).abs() < 1e-15);
        assert!((w.weight(1e12, [0.0; 3], 0).unwrap() - 1.0).abs() < 1e-6);
        assert!(w.weight(0.0, [0.0; 3], 3).is_err());
        assert!(w.weight(1.0, [1.0, 2.0, 0.5], 1).unwrap() <= w.weight(0.0, [1.0, 2.0, 0.5], 1).unwrap());
    }

    #[test]
    fn multi_index_count() {
        assert_eq!(velocity_multi_indices(3).len(), 20);
        assert_eq!(velocity_multi_indices(0), vec![[0, 0, 0]]);
    }
}
