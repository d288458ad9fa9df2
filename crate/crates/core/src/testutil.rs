use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::system::{build_operators, check_controllable, CostWeights, LinearSystem};

pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.7..0.7));
    &a * a.transpose()
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

/// Controllable time-varying system with `N·m ≥ n`.
pub fn random_system(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize) -> LinearSystem<f64> {
    assert!(horizon * m >= n);
    loop {
        let a = (0..horizon).map(|_| DMatrix::identity(n, n) + DMatrix::from_fn(n, n, |_, _| rng.gen_range(-0.4..0.4))).collect();
        let b = (0..horizon).map(|_| DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))).collect();
        let sys = LinearSystem::new(a, b).unwrap();
        let ops = build_operators(&sys);
        if check_controllable(&ops, 1e-4) {
            return sys;
        }
    }
}

pub fn random_weights(rng: &mut ChaCha8Rng, n: usize, m: usize, horizon: usize, with_q: bool) -> CostWeights<f64> {
    let q = (0..=horizon).map(|_| if with_q { random_psd(rng, n) } else { DMatrix::zeros(n, n) }).collect();
    let r = (0..horizon).map(|_| random_spd(rng, m, 0.3)).collect();
    let x_ref = (0..=horizon).map(|_| if with_q { random_vec(rng, n, 1.0) } else { DVector::zeros(n) }).collect();
    CostWeights::new(q, r, x_ref).unwrap()
}
