mod common;

use std::f64::consts::PI;

use common::{lattice, max_abs};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmb_core::em_fields::{
    curl, divergence, enforce_compatibility, gauss_residual, longitudinal_part, magnetostatic_field,
    maxwell_mode_matrix, maxwell_substep, poisson_field, zero_field, EMState, Field3,
};
use vmb_core::phase_grid::{SpatialGrid, SpatialSpec};
use vmb_core::VmbError;

fn line(n: usize) -> SpatialGrid {
    SpatialGrid::new(&SpatialSpec { dim: 1, lengths: vec![2.0 * PI], n_per_axis: vec![n] }).unwrap()
}

fn plane(n: usize) -> SpatialGrid {
    SpatialGrid::new(&SpatialSpec { dim: 2, lengths: vec![2.0 * PI, 4.0], n_per_axis: vec![n, n] }).unwrap()
}

/// Random band-limited field (modes strictly below Nyquist).
fn smooth_field(x: &SpatialGrid, rng: &mut ChaCha8Rng) -> Field3 {
    let coef: Vec<[f64; 4]> = (0..3).map(|_| std::array::from_fn(|_| rng.gen_range(-1.0..1.0))).collect();
    std::array::from_fn(|a| {
        (0..x.len())
            .map(|i| {
                let p = x.coords(i);
                let t = 2.0 * PI * p[0] / x.lengths[0];
                let s = if x.dim > 1 { 2.0 * PI * p[1] / x.lengths[1] } else { 0.0 };
                let c = coef[a];
                c[0] * t.cos() + c[1] * (2.0 * t).sin() + c[2] * (t + s).cos() + c[3] * (3.0 * s - t).sin()
            })
            .collect()
    })
}

#[test]
fn transverse_plane_wave_travels_at_light_speed() {
    let x = line(32);
    for eps in [1.0, 0.1] {
        let mut em = EMState::zeros(x.len(), [0.0; 3], eps);
        for i in 0..x.len() {
            let c = (2.0 * x.coords(i)[0]).cos();
            em.e[1][i] = c;
            em.b_tilde[2][i] = c;
        }
        let zero = zero_field(x.len());
        let dt = 0.01;
        for _ in 0..25 {
            em = maxwell_substep(&em, &zero, dt, &x).unwrap();
        }
        let t = 25.0 * dt;
        for i in 0..x.len() {
            let want = (2.0 * (x.coords(i)[0] - t / eps)).cos();
            assert!((em.e[1][i] - want).abs() <= 1e-12, "eps {eps}");
            assert!((em.b_tilde[2][i] - want).abs() <= 1e-12);
            assert!(em.e[0][i].abs() <= 1e-14);
        }
    }
}

#[test]
fn longitudinal_vacuum_field_is_stationary() {
    let x = line(16);
    let mut em = EMState::zeros(16, [0.0, 0.0, 1.0], 0.05);
    for i in 0..16 {
        em.e[0][i] = x.coords(i)[0].sin();
    }
    let out = maxwell_substep(&em, &zero_field(16), 0.3, &x).unwrap();
    for i in 0..16 {
        assert!((out.e[0][i] - em.e[0][i]).abs() <= 1e-14);
    }
    assert_eq!(out.b_background, [0.0, 0.0, 1.0]);
}

#[test]
fn longitudinal_current_drains_the_field() {
    let x = line(16);
    let em = EMState::zeros(16, [0.0; 3], 0.1);
    let j = [(0..16).map(|i| x.coords(i)[0].sin()).collect(), vec![0.0; 16], vec![0.0; 16]];
    let out = maxwell_substep(&em, &j, 0.2, &x).unwrap();
    for i in 0..16 {
        assert!((out.e[0][i] + 0.2 * j[0][i]).abs() <= 1e-14);
    }
}

#[test]
fn uniform_current_is_minus_j_dt() {
    let x = line(8);
    let em = EMState::zeros(8, [0.0; 3], 0.01);
    let j = [vec![1.0; 8], vec![-2.0; 8], vec![0.0; 8]];
    let out = maxwell_substep(&em, &j, 0.1, &x).unwrap();
    assert!(out.e[0].iter().all(|e| (e + 0.1).abs() <= 1e-14));
    assert!(out.e[1].iter().all(|e| (e - 0.2).abs() <= 1e-14));
}

#[test]
fn maxwell_rejects_bad_step_and_grid() {
    let x = line(8);
    let em = EMState::zeros(8, [0.0; 3], 1.0);
    assert!(matches!(maxwell_substep(&em, &zero_field(8), -1.0, &x), Err(VmbError::Invalid(_))));
    assert!(maxwell_substep(&em, &zero_field(6), 0.1, &x).is_err());
}

#[test]
fn vacuum_energy_is_conserved_per_step() {
    let x = plane(8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for eps in [1.0, 0.1, 0.01] {
        let mut em = EMState::zeros(x.len(), [0.0; 3], eps);
        em.e = smooth_field(&x, &mut rng);
        em.b_tilde = smooth_field(&x, &mut rng);
        let zero = zero_field(x.len());
        let e0 = em.energy(&x);
        let mut prev = e0;
        for _ in 0..100 {
            em = maxwell_substep(&em, &zero, 0.05, &x).unwrap();
            let now = em.energy(&x);
            assert!((now - prev).abs() <= 1e-12 * e0, "eps {eps}");
            prev = now;
        }
    }
}

#[test]
fn mode_matrix_is_unitary() {
    for eps in [1.0, 0.1, 0.01] {
        for k in [[1.0, 0.0, 0.0], [0.5, -2.0, 0.0], [0.0, 0.0, 0.0]] {
            let m = maxwell_mode_matrix(k, eps, 0.07);
            for i in 0..6 {
                for j in 0..6 {
                    let acc: rustfft::num_complex::Complex64 = (0..6).map(|r| m[r][i].conj() * m[r][j]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    assert!((acc.re - want).abs() <= 1e-14 && acc.im.abs() <= 1e-14);
                }
            }
        }
    }
}

#[test]
fn poisson_field_closed_form_and_gauss_law() {
    let x = line(16);
    let rho: Vec<f64> = (0..16).map(|i| (3.0 * x.coords(i)[0]).cos()).collect();
    let e = poisson_field(&rho, &x).unwrap();
    for i in 0..16 {
        assert!((e[0][i] - (3.0 * x.coords(i)[0]).sin() / 3.0).abs() <= 1e-13);
    }
    let x = plane(8);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let f = smooth_field(&x, &mut rng);
    let mut rho = f[0].clone();
    let mean = x.mean(&rho);
    rho.iter_mut().for_each(|r| *r -= mean);
    let e = poisson_field(&rho, &x).unwrap();
    let em = EMState { e: e.clone(), b_tilde: zero_field(x.len()), b_background: [0.0; 3], epsilon: 1.0 };
    assert!(gauss_residual(&em, &rho, &x).unwrap() <= 1e-12);
    assert!(curl(&x, &e).unwrap().iter().all(|c| max_abs(c) <= 1e-12));
    assert!(matches!(poisson_field(&vec![0.5; x.len()], &x), Err(VmbError::NonNeutral { .. })));
}

#[test]
fn compatibility_correction() {
    let x = line(8);
    let v = lattice(6);
    let nv = v.len();
    let mut f = vmb_core::phase_grid::PairDistribution::zeros(8, nv);
    for i in 0..8 {
        let t = x.coords(i)[0];
        for k in 0..nv {
            f.plus[i * nv + k] = v.sqrt_mu[k] * (1.0 + 0.3 * t.cos() + 0.2 * (2.0 * t).sin());
            f.minus[i * nv + k] = v.sqrt_mu[k] * (1.0 - 0.1 * t.cos());
        }
    }
    let rho = f.charge_density(&v);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e0 = smooth_field(&x, &mut rng);
    let b0 = smooth_field(&x, &mut rng);
    let (e, b) = enforce_compatibility(&f, &e0, &b0, &x, &v).unwrap();
    let em = EMState { e: e.clone(), b_tilde: b.clone(), b_background: [0.0; 3], epsilon: 1.0 };
    assert!(gauss_residual(&em, &rho, &x).unwrap() <= 1e-12);
    assert!(max_abs(&divergence(&x, &b).unwrap()) <= 1e-12);
    // transverse components pass through untouched
    for a in 1..3 {
        for i in 0..8 {
            assert!((e[a][i] - e0[a][i]).abs() <= 1e-13 && (b[a][i] - b0[a][i]).abs() <= 1e-13);
        }
    }
    let (e2, b2) = enforce_compatibility(&f, &e, &b, &x, &v).unwrap();
    for a in 0..3 {
        assert!(max_abs(&e2[a].iter().zip(&e[a]).map(|(p, q)| p - q).collect::<Vec<_>>()) <= 1e-13);
        assert!(max_abs(&b2[a].iter().zip(&b[a]).map(|(p, q)| p - q).collect::<Vec<_>>()) <= 1e-13);
    }
}

#[test]
fn magnetostatic_field_inverts_the_curl() {
    let x = plane(8);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let j = smooth_field(&x, &mut rng);
    let mut jt = j.clone();
    let jl = longitudinal_part(&x, &j).unwrap();
    for a in 0..3 {
        let mean = x.mean(&j[a]);
        for i in 0..x.len() {
            jt[a][i] -= jl[a][i] + mean;
        }
    }
    let b = magnetostatic_field(&x, &j).unwrap();
    let c = curl(&x, &b).unwrap();
    for a in 0..3 {
        for i in 0..x.len() {
            assert!((c[a][i] - jt[a][i]).abs() <= 1e-12);
        }
    }
    assert!(max_abs(&divergence(&x, &b).unwrap()) <= 1e-12);
    let b_par = magnetostatic_field(&x, &jl).unwrap();
    assert!(b_par.iter().all(|c| max_abs(c) <= 1e-13));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn divergence_of_curl_vanishes(seed in any::<u64>()) {
        let x = plane(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = smooth_field(&x, &mut rng);
        let d = divergence(&x, &curl(&x, &f).unwrap()).unwrap();
        prop_assert!(max_abs(&d) <= 1e-11);
    }

    #[test]
    fn sourceless_step_preserves_gauss_law(seed in any::<u64>(), eps in 0.01f64..1.0) {
        let x = plane(8);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut em = EMState::zeros(x.len(), [0.0; 3], eps);
        em.e = smooth_field(&x, &mut rng);
        em.b_tilde = smooth_field(&x, &mut rng);
        let rho = divergence(&x, &em.e).unwrap();
        let zero = zero_field(x.len());
        for _ in 0..10 {
            em = maxwell_substep(&em, &zero, 0.1, &x).unwrap();
        }
        let r = gauss_residual(&em, &rho, &x).unwrap();
        prop_assert!(r <= 1e-10);
    }
}
