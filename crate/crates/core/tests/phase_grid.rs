use std::f64::consts::PI;

use approx::assert_relative_eq;
use proptest::prelude::*;
use vmb_core::phase_grid::{
    maxwellian, read_checkpoint, write_checkpoint, PairDistribution, SpatialGrid, SpatialSpec, VelocityGrid,
    VelocitySpec, VelocityTest,
};
use vmb_core::VmbError;

fn line(n: usize) -> SpatialGrid {
    SpatialGrid::new(&SpatialSpec { dim: 1, lengths: vec![2.0 * PI], n_per_axis: vec![n] }).unwrap()
}

fn lattice(n_v: usize, v_max: f64) -> VelocityGrid {
    VelocityGrid::new(&VelocitySpec { n_v, v_max }).unwrap()
}

#[test]
fn maxwellian_closed_forms() {
    let c = (2.0 * PI).powf(-1.5);
    assert_relative_eq!(maxwellian([0.0; 3]), c, max_relative = 1e-15);
    assert_relative_eq!(maxwellian([0.0; 3]), 0.0634936, max_relative = 1e-6);
    assert_relative_eq!(maxwellian([1.0, 0.0, 0.0]), c * (-0.5f64).exp(), max_relative = 1e-15);
}

#[test]
fn maxwellian_mass_on_fine_lattice() {
    let v = lattice(32, 8.0);
    assert!((v.mass() - 1.0).abs() <= 1e-10, "mass {}", v.mass());
}

#[test]
fn lattice_invariants() {
    let v = lattice(16, 6.0);
    for k in 0..v.len() {
        let m = v.mirror(k);
        for a in 0..3 {
            assert_eq!(v.nodes[m][a], -v.nodes[k][a]);
        }
        assert!(v.speed_sq(k) > 0.0, "origin must be excluded");
        assert_relative_eq!(v.mu[k], maxwellian(v.nodes[k]), max_relative = 1e-15);
        assert!(v.mu[k] > 0.0);
    }
    assert!(v.weight > 0.0);
    let m = v.mass();
    assert!(m <= 1.0 && m > 1.0 - 1e-6, "mass {m}");
}

#[test]
fn velocity_moments_of_the_maxwellian() {
    let v = lattice(16, 6.0);
    let nx = 3;
    let f: Vec<f64> = (0..nx).flat_map(|_| v.mu.clone()).collect();
    for m in v.velocity_moment(&f, &VelocityTest::One).unwrap() {
        assert!((m - 1.0).abs() < 1e-6);
    }
    for axis in 0..3 {
        for m in v.velocity_moment(&f, &VelocityTest::V(axis)).unwrap() {
            assert!(m.abs() <= 1e-14);
        }
    }
    for m in v.velocity_moment(&f, &VelocityTest::VSquared).unwrap() {
        assert!((m - 3.0).abs() < 1e-5, "second moment {m}");
    }
}

#[test]
fn second_moment_error_shrinks_under_refinement() {
    let err = |n| {
        let v = lattice(n, 6.0);
        (v.velocity_moment(&v.mu, &VelocityTest::VSquared).unwrap()[0] - 3.0).abs()
    };
    let (coarse, fine) = (err(8), err(16));
    assert!(fine <= 0.5 * coarse || fine < 1e-12, "coarse {coarse:e}, fine {fine:e}");
}

#[test]
fn moment_rejects_mismatched_lattice() {
    let v = lattice(8, 6.0);
    assert!(matches!(v.velocity_moment(&[1.0; 7], &VelocityTest::One), Err(VmbError::GridMismatch(_))));
}

#[test]
fn spectral_derivative_single_mode() {
    let x = line(32);
    let l = 2.0 * PI;
    let g: Vec<f64> = (0..x.len()).map(|i| (2.0 * PI * x.coords(i)[0] / l).cos()).collect();
    let d = x.spectral_x_derivative(&g, 0, 1).unwrap();
    for i in 0..x.len() {
        let want = -(2.0 * PI / l) * (2.0 * PI * x.coords(i)[0] / l).sin();
        assert!((d[i] - want).abs() <= 1e-12);
    }
    let c = vec![3.5; x.len()];
    for order in 1..=3 {
        assert!(x.spectral_x_derivative(&c, 0, order).unwrap().iter().all(|v| v.abs() <= 1e-12));
    }
}

#[test]
fn spectral_derivative_rejects_inactive_axis_and_high_order() {
    let x = line(16);
    let g = vec![0.0; 16];
    assert!(matches!(x.spectral_x_derivative(&g, 1, 1), Err(VmbError::InactiveAxis { .. })));
    assert!(matches!(x.spectral_x_derivative(&g, 0, 4), Err(VmbError::DerivativeOrder { .. })));
}

#[test]
fn spectral_second_derivative_is_composition() {
    let x = line(32);
    // band-limited: modes below the Nyquist frequency
    let g: Vec<f64> = (0..x.len())
        .map(|i| {
            let t = x.coords(i)[0];
            0.3 * t.sin() + 0.7 * (3.0 * t).cos() - 0.2 * (7.0 * t + 0.4).sin()
        })
        .collect();
    let d2 = x.spectral_x_derivative(&g, 0, 2).unwrap();
    let dd = x.spectral_x_derivative(&x.spectral_x_derivative(&g, 0, 1).unwrap(), 0, 1).unwrap();
    for (a, b) in d2.iter().zip(&dd) {
        assert!((a - b).abs() <= 1e-10);
    }
}

#[test]
fn velocity_derivatives() {
    let v = lattice(16, 6.0);
    let n = v.n_v;
    let g: Vec<f64> = v.nodes.iter().map(|p| p[0]).collect();
    let d = v.velocity_derivative(&g, 0, 1).unwrap();
    for (k, val) in d.iter().enumerate() {
        let i = v.axis_indices(k)[0];
        if i > 0 && i + 1 < n {
            assert!((val - 1.0).abs() <= 1e-12);
        }
    }
    let c = vec![2.0; v.len()];
    for order in 1..=3 {
        assert!(v.velocity_derivative(&c, 1, order).unwrap().iter().all(|x| x.abs() <= 1e-12));
    }
    // ∂_{v₁} μ^{1/2} = −(v₁/2) μ^{1/2} within O(Δv²)
    let d = v.velocity_derivative(&v.sqrt_mu, 0, 1).unwrap();
    let err = (0..v.len()).map(|k| (d[k] + 0.5 * v.nodes[k][0] * v.sqrt_mu[k]).abs()).fold(0.0, f64::max);
    let dv = v.dv;
    assert!(err <= 0.05 * dv * dv, "error {err:e}, dv {dv}");
    let coarse = {
        let v8 = lattice(8, 6.0);
        let d = v8.velocity_derivative(&v8.sqrt_mu, 0, 1).unwrap();
        (0..v8.len()).map(|k| (d[k] + 0.5 * v8.nodes[k][0] * v8.sqrt_mu[k]).abs()).fold(0.0, f64::max)
    };
    assert!(err < coarse, "refinement must reduce the error: {err:e} vs {coarse:e}");
}

#[test]
fn velocity_derivative_rejects_order_zero() {
    let v = lattice(8, 6.0);
    assert!(v.velocity_derivative(&v.mu, 0, 0).is_err());
}

#[test]
fn spatial_grid_rejects_odd_or_small() {
    assert!(SpatialGrid::new(&SpatialSpec { dim: 1, lengths: vec![1.0], n_per_axis: vec![7] }).is_err());
    assert!(SpatialGrid::new(&SpatialSpec { dim: 1, lengths: vec![1.0], n_per_axis: vec![2] }).is_err());
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    let data = vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, 0.1 + 0.2];
    write_checkpoint(&path, serde_json::json!({"t": 0.5}), &[("d", vec![5], &data)]).unwrap();
    let (header, arrays) = read_checkpoint(&path).unwrap();
    assert_eq!(header.arrays[0].0, "d");
    assert_eq!(header.meta["t"], 0.5);
    for (a, b) in arrays[0].iter().zip(&data) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn pair_distribution_shape_checks() {
    assert!(PairDistribution::from_parts(2, 3, vec![0.0; 6], vec![0.0; 5]).is_err());
    let f = PairDistribution::from_parts(2, 3, vec![1.0; 6], vec![2.0; 6]).unwrap();
    let s = f.swapped();
    assert_eq!(s.plus, f.minus);
    assert!(f.is_finite());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn transform_roundtrip_and_parseval(vals in prop::collection::vec(-1.0f64..1.0, 16)) {
        let x = line(16);
        let spec = x.to_spectrum(&vals);
        let back = x.from_spectrum(spec.clone());
        let scale = vals.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
        for (a, b) in back.iter().zip(&vals) {
            prop_assert!((a - b).abs() <= 1e-12 * scale);
        }
        let direct = x.norm_sq(&vals);
        prop_assert!((x.spectral_norm_sq(&spec) - direct).abs() <= 1e-12 * direct.max(1e-300));
    }

    #[test]
    fn even_functions_have_vanishing_odd_moments(vals in prop::collection::vec(-1.0f64..1.0, 512), axis in 0usize..3) {
        let v = lattice(8, 6.0);
        // symmetrize under v -> -v
        let even: Vec<f64> = (0..v.len()).map(|k| 0.5 * (vals[k] + vals[v.mirror(k)])).collect();
        let m = v.velocity_moment(&even, &VelocityTest::V(axis)).unwrap()[0];
        prop_assert!(m.abs() <= 1e-13);
    }

    #[test]
    fn wavenumbers_closed_under_negation(half in 2usize..12) {
        let x = line(2 * half);
        for xi in &x.wavenumbers {
            let neg = [-xi[0], -xi[1], -xi[2]];
            let nyquist = (xi[0].abs() - half as f64 / (2.0 * PI)).abs() < 1e-12;
            prop_assert!(nyquist || x.wavenumbers.iter().any(|w| (0..3).all(|a| (w[a] - neg[a]).abs() < 1e-12)));
        }
    }
}
