use std::f64::consts::PI;
use std::sync::OnceLock;

use approx::assert_relative_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmb_core::collision_kernel::{
    apply_l, boltzmann_q, collision_frequency, gamma_bilinear, AngularProfile, CollisionQuadrature, KernelModel,
    KernelSpec, LinearizedOperator,
};
use vmb_core::macro_micro::Projector;
use vmb_core::phase_grid::{PairDistribution, VelocityGrid, VelocitySpec};
use vmb_core::VmbError;

fn lattice(n_v: usize) -> VelocityGrid {
    VelocityGrid::new(&VelocitySpec { n_v, v_max: 6.0 }).unwrap()
}

fn op8() -> &'static (VelocityGrid, LinearizedOperator) {
    static OP: OnceLock<(VelocityGrid, LinearizedOperator)> = OnceLock::new();
    OP.get_or_init(|| {
        let v = lattice(8);
        let op = LinearizedOperator::build(&v, &KernelModel::hard_sphere()).unwrap();
        (v, op)
    })
}

fn random_pair(rng: &mut ChaCha8Rng, nx: usize, v: &VelocityGrid) -> PairDistribution {
    let n = nx * v.len();
    let mut f = PairDistribution::zeros(nx, v.len());
    for i in 0..n {
        let k = i % v.len();
        f.plus[i] = rng.gen_range(-1.0..1.0) * v.sqrt_mu[k].sqrt();
        f.minus[i] = rng.gen_range(-1.0..1.0) * v.sqrt_mu[k].sqrt();
    }
    f
}

fn norm(f: &PairDistribution, v: &VelocityGrid) -> f64 {
    (v.dot(&f.plus, &f.plus) + v.dot(&f.minus, &f.minus)).sqrt()
}

fn dot(f: &PairDistribution, g: &PairDistribution, v: &VelocityGrid) -> f64 {
    v.dot(&f.plus, &g.plus) + v.dot(&f.minus, &g.minus)
}

#[test]
fn sphere_quadrature_moments() {
    let m = KernelModel::hard_sphere();
    assert!((m.sphere.integrate(|_| 1.0) - 4.0 * PI).abs() <= 1e-10);
    assert!((m.sphere.integrate(|n| n[2].abs()) - 2.0 * PI).abs() <= 1e-8);
}

#[test]
fn collision_frequency_closed_forms() {
    let m = KernelModel::hard_sphere();
    let at0 = collision_frequency([0.0; 3], &m).unwrap();
    assert_relative_eq!(at0, 8.0 * PI * (2.0 / PI).sqrt(), max_relative = 1e-4);
    assert_relative_eq!(at0, 20.0531, max_relative = 1e-4);
    let erf = statrs::function::erf::erf(2.0f64.sqrt());
    let want = 4.0 * PI * ((2.0 / PI).sqrt() * (-2.0f64).exp() + 2.5 * erf);
    let at2 = collision_frequency([0.0, 2.0, 0.0], &m).unwrap();
    assert_relative_eq!(at2, want, max_relative = 1e-4);
}

#[test]
fn collision_frequency_rejects_divergent_exponent() {
    let spec = KernelSpec { gamma: -3.0, ..KernelSpec::default() };
    assert!(matches!(KernelModel::new(spec), Err(VmbError::Divergent(_))));
}

#[test]
fn collision_frequency_grows_like_one_plus_speed() {
    let (v, op) = op8();
    let ratios: Vec<f64> = (0..v.len()).map(|k| op.nu[k] / (1.0 + v.speed_sq(k).sqrt())).collect();
    let lo = ratios.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = ratios.iter().copied().fold(0.0, f64::max);
    assert!(lo > 0.0 && hi / lo < 10.0, "ratio range [{lo}, {hi}]");
}

#[test]
fn grad_bound_and_fault_injection() {
    assert!(KernelModel::hard_sphere().check_grad_bound().passed);
    let broken = KernelModel::new(KernelSpec { profile: AngularProfile::Constant { value: 1.0 }, ..KernelSpec::default() })
        .unwrap();
    assert!(!broken.check_grad_bound().passed);
}

#[test]
fn q_of_maxwellians_vanishes() {
    let v = lattice(8);
    let m = KernelModel::hard_sphere();
    let quad = CollisionQuadrature::new(&v, &m);
    let q = quad.q(&v.mu, &v.mu).unwrap();
    let nu_mu: f64 = (0..v.len()).map(|k| (quad.lattice_frequency(k) * v.mu[k]).powi(2)).sum::<f64>().sqrt();
    let qn: f64 = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(qn <= 1e-6 * nu_mu, "{qn:e} vs {nu_mu:e}");
}

#[test]
fn q_conserves_mass_momentum_energy() {
    let v = lattice(8);
    let m = KernelModel::hard_sphere();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..5 {
        let f: Vec<f64> = (0..v.len()).map(|k| v.mu[k] * rng.gen_range(0.2..2.0)).collect();
        let q = boltzmann_q(&f, &f, &v, &m).unwrap();
        let d = vmb_core::limit_harness::conservation_defects(&q, &v);
        assert!(d[0] <= 1e-8 && d[1] <= 1e-6 && d[2] <= 1e-6, "{d:?}");
    }
}

#[test]
fn q_rejects_mismatched_lattice() {
    let v = lattice(8);
    assert!(boltzmann_q(&v.mu[..10], &v.mu, &v, &KernelModel::hard_sphere()).is_err());
}

#[test]
fn null_space_of_l() {
    let (v, op) = op8();
    let numax = op.nu.iter().copied().fold(0.0, f64::max);
    for e in vmb_core::limit_harness::null_basis(v) {
        let le = apply_l(&e, op).unwrap();
        assert!(norm(&le, v) <= 1e-10 * numax * norm(&e, v));
    }
    assert!(op.null_residual() <= 1e-10);
}

#[test]
fn l_is_symmetric_nonnegative_and_coercive() {
    let (v, op) = op8();
    assert!(op.symmetry_defect <= 1e-10);
    let proj = Projector::new(v).unwrap();
    let report = op.coercivity();
    assert!(report.sigma0 > 1e-3, "sigma0 {}", report.sigma0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let f = random_pair(&mut rng, 1, v);
        let g = random_pair(&mut rng, 1, v);
        let (lf, lg) = (apply_l(&f, op).unwrap(), apply_l(&g, op).unwrap());
        assert!((dot(&lf, &g, v) - dot(&f, &lg, v)).abs() <= 1e-10 * norm(&f, v) * norm(&g, v) * op.nu[0] * 10.0);
        let micro = proj.micro(&f).unwrap();
        let lm = apply_l(&micro, op).unwrap();
        let quad = dot(&micro, &lm, v);
        let nu_norm: f64 = (0..v.len())
            .map(|k| op.nu[k] * (micro.plus[k].powi(2) + micro.minus[k].powi(2)))
            .sum::<f64>()
            * v.weight;
        assert!(quad >= (1.0 - 1e-10) * report.sigma0 * nu_norm, "Rayleigh quotient below sigma0");
    }
}

#[test]
fn l_output_is_microscopic_and_linear() {
    let (v, op) = op8();
    let proj = Projector::new(v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random_pair(&mut rng, 2, v);
    let g = random_pair(&mut rng, 2, v);
    let lf = apply_l(&proj.micro(&f).unwrap(), op).unwrap();
    let plf = proj.project(&lf).unwrap();
    assert!(norm(&plf, v) <= 1e-10 * norm(&lf, v));
    let mut comb = f.scaled(1.5);
    comb.axpy(-0.25, &g);
    let lhs = apply_l(&comb, op).unwrap();
    let mut rhs = apply_l(&f, op).unwrap().scaled(1.5);
    rhs.axpy(-0.25, &apply_l(&g, op).unwrap());
    let mut d = lhs.clone();
    d.axpy(-1.0, &rhs);
    assert!(norm(&d, v) <= 1e-12 * norm(&lhs, v));
}

#[test]
fn l_commutes_with_species_exchange() {
    let (v, op) = op8();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = random_pair(&mut rng, 1, v);
    let a = apply_l(&f.swapped(), op).unwrap();
    let b = apply_l(&f, op).unwrap().swapped();
    let mut d = a.clone();
    d.axpy(-1.0, &b);
    assert!(norm(&d, v) <= 1e-12 * norm(&a, v));
}

#[test]
fn l_equals_nu_minus_k_entrywise() {
    let (v, op) = op8();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let f = random_pair(&mut rng, 1, v);
    let ks = op.k_same_dense().unwrap();
    let kc = op.k_cross_dense().unwrap();
    let nv = v.len();
    let lf = apply_l(&f, op).unwrap();
    for a in 0..nv {
        let mut kp = 0.0f64;
        let mut km = 0.0f64;
        for b in 0..nv {
            kp += ks[(a, b)] * f.plus[b] + kc[(a, b)] * f.minus[b];
            km += ks[(a, b)] * f.minus[b] + kc[(a, b)] * f.plus[b];
        }
        let scale = op.nu[a] * (f.plus[a].abs() + f.minus[a].abs()) + kp.abs() + km.abs() + 1e-300;
        assert!((lf.plus[a] - (op.nu[a] * f.plus[a] - kp)).abs() <= 1e-12 * scale.max(1.0));
        assert!((lf.minus[a] - (op.nu[a] * f.minus[a] - km)).abs() <= 1e-12 * scale.max(1.0));
    }
}

/// Brute-force lattice Q: every pair (p, q) scatters into every lattice pair (p', q') with the same
/// momentum and energy whose relative velocity shares the parity class of p − q, with weight
/// scale·(Δv|w|)^γ·2π/N·b(c)/c, N the number of integer vectors on that sphere in that class.
fn brute_q(f: &[f64], g: &[f64], v: &VelocityGrid, spec: &KernelSpec) -> Vec<f64> {
    let n = v.n_v as i32;
    let idx = |p: [i32; 3]| ((p[0] * n + p[1]) * n + p[2]) as usize;
    let inside = |p: [i32; 3]| p.iter().all(|&c| (0..n).contains(&c));
    let class_size = |r2: i32, par: [i32; 3]| {
        let r = (r2 as f64).sqrt().ceil() as i32;
        let mut count = 0;
        for a in -r..=r {
            for b in -r..=r {
                for c in -r..=r {
                    if a * a + b * b + c * c == r2 && [a, b, c].iter().zip(&par).all(|(x, y)| (x - y).rem_euclid(2) == 0) {
                        count += 1;
                    }
                }
            }
        }
        count as f64
    };
    let mut out = vec![0.0; v.len()];
    for p0 in 0..n {
        for p1 in 0..n {
            for p2 in 0..n {
                let p = [p0, p1, p2];
                let mut acc = 0.0;
                for q0 in 0..n {
                    for q1 in 0..n {
                        for q2 in 0..n {
                            let q = [q0, q1, q2];
                            let w = [p0 - q0, p1 - q1, p2 - q2];
                            let r2 = w[0] * w[0] + w[1] * w[1] + w[2] * w[2];
                            if r2 == 0 {
                                continue;
                            }
                            let count = class_size(r2, w);
                            let base = spec.scale * (v.dv * (r2 as f64).sqrt()).powf(spec.gamma) * 2.0 * PI / count;
                            let r = (r2 as f64).sqrt().ceil() as i32;
                            for a in -r..=r {
                                for b in -r..=r {
                                    for c in -r..=r {
                                        let wp = [a, b, c];
                                        if a * a + b * b + c * c != r2
                                            || !wp.iter().zip(&w).all(|(x, y)| (x - y).rem_euclid(2) == 0)
                                        {
                                            continue;
                                        }
                                        let s = [p0 + q0, p1 + q1, p2 + q2];
                                        let pp = [(s[0] + a) / 2, (s[1] + b) / 2, (s[2] + c) / 2];
                                        let qp = [(s[0] - a) / 2, (s[1] - b) / 2, (s[2] - c) / 2];
                                        if !inside(pp) || !inside(qp) {
                                            continue;
                                        }
                                        let cos = (w[0] * a + w[1] * b + w[2] * c) as f64 / r2 as f64;
                                        // |cos θ| of the deflection; for b(c) = |c| the ratio b(c)/c is 1
                                        let cc = ((1.0 - cos) / 2.0).max(0.0).sqrt();
                                        let ratio = if cc > 0.0 { spec.profile.eval(cc) / cc } else { 1.0 };
                                        let wt = base * ratio;
                                        acc += wt * (f[idx(pp)] * g[idx(qp)] - f[idx(p)] * g[idx(q)]);
                                    }
                                }
                            }
                        }
                    }
                }
                out[idx(p)] = v.weight * acc;
            }
        }
    }
    out
}

#[test]
fn small_lattice_l_matches_brute_force_linearization() {
    let v = lattice(4);
    let model = KernelModel::hard_sphere();
    let op = LinearizedOperator::build(&v, &model).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let f = random_pair(&mut rng, 1, &v);
    let nv = v.len();
    let sm = &v.sqrt_mu;
    let tilt = |g: &[f64]| -> Vec<f64> { (0..nv).map(|k| sm[k] * g[k]).collect() };
    let (fp, fm) = (tilt(&f.plus), tilt(&f.minus));
    let sum: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| a + b).collect();
    // L±f = −μ^{−1/2}{Q(μ, μ^{1/2}(f± + f∓)) + 2 Q(μ^{1/2} f±, μ)}
    let lin = |own: &[f64]| -> Vec<f64> {
        let a = brute_q(&v.mu, &sum, &v, &model.spec);
        let b = brute_q(own, &v.mu, &v, &model.spec);
        (0..nv).map(|k| -(a[k] + 2.0 * b[k]) / sm[k]).collect()
    };
    let want_p = lin(&fp);
    let want_m = lin(&fm);
    let got = apply_l(&f, &op).unwrap();
    let scale = want_p.iter().chain(&want_m).fold(0.0f64, |m, x| m.max(x.abs()));
    for k in 0..nv {
        assert!((got.plus[k] - want_p[k]).abs() <= 1e-10 * scale, "plus {k}: {} vs {}", got.plus[k], want_p[k]);
        assert!((got.minus[k] - want_m[k]).abs() <= 1e-10 * scale, "minus {k}");
    }
}

#[test]
fn gamma_properties() {
    let v = lattice(6);
    let model = KernelModel::hard_sphere();
    let m = PairDistribution::from_parts(1, v.len(), v.sqrt_mu.clone(), v.sqrt_mu.clone()).unwrap();
    let (g0, floored) = gamma_bilinear(&m, &m, &v, &model).unwrap();
    assert_eq!(floored, 0);
    assert!(norm(&g0, &v) <= 1e-12 * norm(&m, &v));
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let g = random_pair(&mut rng, 1, &v);
    let h = random_pair(&mut rng, 1, &v);
    let (gg, _) = gamma_bilinear(&g, &g, &v, &model).unwrap();
    let scale = gg.plus.iter().chain(&gg.minus).map(|x| x.abs()).sum::<f64>() * v.weight;
    for s in 0..2 {
        let mass = v.dot(&v.sqrt_mu, gg.component(s));
        assert!(mass.abs() <= 1e-6 * scale);
    }
    // bilinearity in the second slot and exchange symmetry
    let mut lin = h.scaled(-0.7);
    lin.axpy(1.0, &g);
    let (a, _) = gamma_bilinear(&g, &lin, &v, &model).unwrap();
    let (b1, _) = gamma_bilinear(&g, &g, &v, &model).unwrap();
    let (b2, _) = gamma_bilinear(&g, &h, &v, &model).unwrap();
    let mut d = a.clone();
    d.axpy(-1.0, &b1);
    d.axpy(0.7, &b2);
    assert!(norm(&d, &v) <= 1e-12 * norm(&a, &v));
    let (s1, _) = gamma_bilinear(&g.swapped(), &h.swapped(), &v, &model).unwrap();
    let mut d = s1.clone();
    d.axpy(-1.0, &b2.swapped());
    assert!(norm(&d, &v) <= 1e-12 * norm(&s1, &v));
}

#[test]
fn memory_budget_is_enforced() {
    let v = lattice(8);
    let model = KernelModel::new(KernelSpec { memory_budget_mb: 0, ..KernelSpec::default() }).unwrap();
    assert!(matches!(LinearizedOperator::build(&v, &model), Err(VmbError::MemoryBudget { .. })));
}

#[test]
fn operator_cache_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let v = lattice(6);
    let model = KernelModel::hard_sphere();
    let a = LinearizedOperator::build_cached(&v, &model, dir.path()).unwrap();
    let b = LinearizedOperator::build_cached(&v, &model, dir.path()).unwrap();
    assert_eq!(a.hash, b.hash);
    assert_eq!(a.nu, b.nu);
    assert_eq!(a.rows_same, b.rows_same);
    assert_eq!(a.rows_cross, b.rows_cross);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quadratic_form_is_nonnegative(seed in any::<u64>()) {
        let (v, op) = op8();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random_pair(&mut rng, 1, v);
        let lf = apply_l(&f, op).unwrap();
        prop_assert!(dot(&f, &lf, v) >= -1e-12 * norm(&f, v).powi(2) * op.nu[0]);
    }

    #[test]
    fn l_annihilates_null_space_combinations(c in prop::collection::vec(-2.0f64..2.0, 6)) {
        let (v, op) = op8();
        let basis = vmb_core::limit_harness::null_basis(v);
        let mut f = PairDistribution::zeros(1, v.len());
        for (ci, e) in c.iter().zip(&basis) {
            f.axpy(*ci, e);
        }
        let lf = apply_l(&f, op).unwrap();
        let numax = op.nu.iter().copied().fold(0.0, f64::max);
        prop_assert!(norm(&lf, v) <= 1e-10 * numax * norm(&f, v).max(1e-300));
    }
}
