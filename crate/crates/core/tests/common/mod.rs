#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vmb_core::limit_harness::RunConfig;
use vmb_core::phase_grid::{PairDistribution, SpatialSpec, VelocityGrid, VelocitySpec};

pub fn lattice(n_v: usize) -> VelocityGrid {
    VelocityGrid::new(&VelocitySpec { n_v, v_max: 6.0 }).unwrap()
}

/// Default configuration shrunk to an nx-point line and an n_v³ lattice.
pub fn small_config(nx: usize, n_v: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.grid.spatial = SpatialSpec { dim: 1, lengths: vec![2.0 * std::f64::consts::PI], n_per_axis: vec![nx] };
    cfg.grid.velocity = VelocitySpec { n_v, v_max: 6.0 };
    cfg
}

/// Random pair distribution with Gaussian-decaying velocity profile.
pub fn random_pair(seed: u64, nx: usize, v: &VelocityGrid) -> PairDistribution {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = v.len();
    let mut f = PairDistribution::zeros(nx, nv);
    for i in 0..nx * nv {
        let s = v.sqrt_mu[i % nv].sqrt();
        f.plus[i] = rng.gen_range(-1.0..1.0) * s;
        f.minus[i] = rng.gen_range(-1.0..1.0) * s;
    }
    f
}

pub fn l2(f: &PairDistribution, v: &VelocityGrid) -> f64 {
    (v.dot(&f.plus, &f.plus) + v.dot(&f.minus, &f.minus)).sqrt()
}

pub fn inner(f: &PairDistribution, g: &PairDistribution, v: &VelocityGrid) -> f64 {
    v.dot(&f.plus, &g.plus) + v.dot(&f.minus, &g.minus)
}

pub fn diff(a: &PairDistribution, b: &PairDistribution) -> PairDistribution {
    let mut d = a.clone();
    d.axpy(-1.0, b);
    d
}

pub fn max_abs(xs: &[f64]) -> f64 {
    xs.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}
