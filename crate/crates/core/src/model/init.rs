use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::numerics::{Matrix, ParamId, ParamStore, Real};

/// Registers parameters with seeded initial values. Values are drawn in
/// double precision and cast, so `f32` and `f64` models built from the same
/// seed agree.
pub struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<'a, T: Real> Init<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, seed: u64) -> Self {
        Self { store, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn build(&mut self, name: String, rows: usize, cols: usize, f: impl Fn(&mut ChaCha8Rng) -> f64) -> ParamId {
        let data = (0..rows * cols).map(|_| T::lit(f(&mut self.rng))).collect();
        self.store.add(name, Matrix::from_vec(rows, cols, data).unwrap())
    }

    /// Uniform in `±√(6 / (rows + cols))`.
    pub fn xavier(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        self.build(name.into(), rows, cols, |r| r.gen_range(-bound..bound))
    }

    pub fn normal(&mut self, name: impl Into<String>, rows: usize, cols: usize, std: f64) -> ParamId {
        self.build(name.into(), rows, cols, |r| {
            let z: f64 = StandardNormal.sample(r);
            z * std
        })
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, value: f64) -> ParamId {
        self.store.add(name.into(), Matrix::filled(rows, cols, T::lit(value)))
    }
}
