mod common;

use common::{diff, inner, l2, lattice, random_pair, small_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmb_core::limit_harness::{build_ops, macro_balance_refinement};
use vmb_core::macro_micro::{
    density_moment, moment_a, moment_b, moment_g, velocity_flux, verify_micro_identity, MacroState, Projector,
};
use vmb_core::phase_grid::{PairDistribution, SpatialGrid, SpatialSpec};

#[test]
fn coefficients_of_reconstruction_roundtrip() {
    let v = lattice(8);
    let proj = Projector::new(&v).unwrap();
    let mut m = MacroState::zeros(3);
    for i in 0..3 {
        m.a_plus[i] = 0.3 * i as f64 - 0.1;
        m.a_minus[i] = 0.2;
        m.b[0][i] = -0.4;
        m.b[1][i] = 0.05 * i as f64;
        m.b[2][i] = 1.0;
        m.c[i] = 0.7 - 0.2 * i as f64;
    }
    let g = proj.reconstruct(&m);
    let back = proj.coefficients(&g).unwrap();
    for i in 0..3 {
        assert!((back.a_plus[i] - m.a_plus[i]).abs() <= 1e-12);
        assert!((back.a_minus[i] - m.a_minus[i]).abs() <= 1e-12);
        assert!((back.c[i] - m.c[i]).abs() <= 1e-12);
        for a in 0..3 {
            assert!((back.b[a][i] - m.b[a][i]).abs() <= 1e-12);
        }
    }
    let pg = proj.project(&g).unwrap();
    assert!(l2(&diff(&pg, &g), &v) <= 1e-12 * l2(&g, &v));
}

#[test]
fn macro_state_csv_layout() {
    let x = SpatialGrid::new(&SpatialSpec { dim: 1, lengths: vec![1.0], n_per_axis: vec![4] }).unwrap();
    let csv = MacroState::zeros(4).to_csv(&x);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "x,a_plus,a_minus,b1,b2,b3,c");
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[1].split(',').count(), 7);
}

#[test]
fn moments_of_maxwellian_modes() {
    let v = lattice(16);
    let nv = v.len();
    let sm = &v.sqrt_mu;
    // A₁₂ of v₁v₂μ^{1/2} is ∫v₁²v₂²μ = 1
    let g: Vec<f64> = (0..nv).map(|k| v.nodes[k][0] * v.nodes[k][1] * sm[k]).collect();
    let a = moment_a(&g, &v).unwrap();
    assert!((a[0][1][0] - 1.0).abs() <= 1e-5);
    assert!(a[0][0][0].abs() <= 1e-12);
    // A and B vanish on the macroscopic modes
    let a = moment_a(sm, &v).unwrap();
    for row in &a {
        for s in row {
            assert!(s[0].abs() <= 1e-5);
        }
    }
    let g: Vec<f64> = (0..nv).map(|k| v.nodes[k][2] * sm[k]).collect();
    let b = moment_b(&g, &v).unwrap();
    assert!(b[2][0].abs() <= 1e-5 && b[0][0].abs() <= 1e-14);
    let flux = velocity_flux(&g, &v).unwrap();
    assert!((flux[2][0] - 1.0).abs() <= 1e-5);
    let rho = density_moment(sm, &v).unwrap();
    assert!((rho[0] - 1.0).abs() <= 1e-5);
    assert!(moment_a(&g[..nv - 1], &v).is_err());
}

#[test]
fn moment_g_sees_only_the_micro_part() {
    let v = lattice(8);
    let proj = Projector::new(&v).unwrap();
    let f = random_pair(4, 2, &v);
    let micro = proj.micro(&f).unwrap();
    let a = moment_g(&f, &proj).unwrap();
    let b = moment_g(&micro, &proj).unwrap();
    for c in 0..3 {
        for i in 0..2 {
            assert!((a[c][i] - b[c][i]).abs() <= 1e-12);
        }
    }
}

#[test]
fn micro_identity_holds_for_random_data() {
    let v = lattice(8);
    let proj = Projector::new(&v).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..10 {
        let nx = 3;
        let f = random_pair(100 + trial, nx, &v);
        let e: [Vec<f64>; 3] = std::array::from_fn(|_| (0..nx).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let b = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let eps = [1.0, 0.1, 0.01][trial as usize % 3];
        let defect = verify_micro_identity(&f, &e, b, eps, &proj).unwrap();
        assert!(defect <= 1e-10, "defect {defect:e}");
    }
}

#[test]
fn micro_identity_rejects_mismatched_field() {
    let v = lattice(6);
    let proj = Projector::new(&v).unwrap();
    let f = PairDistribution::zeros(2, v.len());
    let e = [vec![0.0; 3], vec![0.0; 3], vec![0.0; 3]];
    assert!(verify_micro_identity(&f, &e, [0.0; 3], 1.0, &proj).is_err());
}

#[test]
fn continuity_and_charge_residuals_converge_at_second_order() {
    let mut cfg = small_config(8, 6);
    cfg.epsilons = vec![0.5];
    let ops = build_ops(&cfg).unwrap();
    let (coarse, fine) = macro_balance_refinement(&cfg, &ops, 0.05).unwrap();
    for (name, c, f) in [("continuity", coarse[0], fine[0]), ("charge", coarse[1], fine[1])] {
        let ratio = c / f;
        assert!((3.5..=4.5).contains(&ratio), "{name}: {c:e} / {f:e} = {ratio}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn projection_is_an_orthogonal_projector(seed in any::<u64>()) {
        let v = lattice(8);
        let proj = Projector::new(&v).unwrap();
        let f = random_pair(seed, 2, &v);
        let g = random_pair(seed ^ 0x5555, 2, &v);
        let pf = proj.project(&f).unwrap();
        let ppf = proj.project(&pf).unwrap();
        prop_assert!(l2(&diff(&ppf, &pf), &v) <= 1e-10 * l2(&f, &v));
        let pg = proj.project(&g).unwrap();
        prop_assert!((inner(&pf, &g, &v) - inner(&f, &pg, &v)).abs() <= 1e-10 * l2(&f, &v) * l2(&g, &v));
        let micro = proj.micro(&f).unwrap();
        let split = l2(&pf, &v).powi(2) + l2(&micro, &v).powi(2);
        prop_assert!((split - l2(&f, &v).powi(2)).abs() <= 1e-10 * l2(&f, &v).powi(2));
    }

    #[test]
    fn micro_part_has_no_conserved_moments(seed in any::<u64>()) {
        let v = lattice(8);
        let proj = Projector::new(&v).unwrap();
        let micro = proj.micro(&random_pair(seed, 1, &v)).unwrap();
        let m = proj.coefficients(&micro).unwrap();
        prop_assert!(m.a_plus[0].abs() <= 1e-12 && m.a_minus[0].abs() <= 1e-12 && m.c[0].abs() <= 1e-12);
        for a in 0..3 {
            prop_assert!(m.b[a][0].abs() <= 1e-12);
        }
    }
}
