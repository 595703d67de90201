//! Brownian increments keyed by `(seed, path, step)`.
//!
//! Each path owns a ChaCha8 stream selected by its index, so the draws of path
//! `i` never depend on how many paths exist or which thread generated them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

/// `[path x step x d]` array of `N(0, h)` increments.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianIncrements {
    n_paths: usize,
    n_steps: usize,
    noise_dim: usize,
    step: f64,
    seed: u64,
    data: Vec<f64>,
}

impl BrownianIncrements {
    pub fn generate(seed: u64, n_paths: usize, n_steps: usize, noise_dim: usize, step: f64) -> Self {
        let per_path = n_steps * noise_dim;
        let sqrt_h = step.sqrt();
        let mut data = vec![0.0; n_paths * per_path];
        if per_path > 0 {
            data.par_chunks_mut(per_path)
                .enumerate()
                .for_each(|(path, chunk)| {
                    let mut rng = path_stream(seed, path as u64);
                    for x in chunk.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        *x = sqrt_h * z;
                    }
                });
        }
        Self {
            n_paths,
            n_steps,
            noise_dim,
            step,
            seed,
            data,
        }
    }

    /// All-zero increments (deterministic runs that still need the array shape).
    pub fn zeros(n_paths: usize, n_steps: usize, noise_dim: usize, step: f64) -> Self {
        Self {
            n_paths,
            n_steps,
            noise_dim,
            step,
            seed: 0,
            data: vec![0.0; n_paths * n_steps * noise_dim],
        }
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `dW` of `path` over forward step `step`.
    #[inline]
    pub fn get(&self, path: usize, step: usize) -> &[f64] {
        let off = (path * self.n_steps + step) * self.noise_dim;
        &self.data[off..off + self.noise_dim]
    }

    pub fn path(&self, path: usize) -> &[f64] {
        let per = self.n_steps * self.noise_dim;
        &self.data[path * per..(path + 1) * per]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Increments of forward steps `from..from + len` for every path.
    pub fn window(&self, from: usize, len: usize) -> Self {
        let d = self.noise_dim;
        let mut data = Vec::with_capacity(self.n_paths * len * d);
        for p in 0..self.n_paths {
            let base = (p * self.n_steps + from) * d;
            data.extend_from_slice(&self.data[base..base + len * d]);
        }
        Self {
            n_paths: self.n_paths,
            n_steps: len,
            noise_dim: d,
            step: self.step,
            seed: self.seed,
            data,
        }
    }
}

fn path_stream(seed: u64, path: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path);
    rng
}

/// splitmix64 finaliser, used to derive child seeds (e.g. one per outer path).
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_streams_do_not_depend_on_ensemble_size() {
        let small = BrownianIncrements::generate(7, 3, 20, 2, 0.01);
        let large = BrownianIncrements::generate(7, 50, 20, 2, 0.01);
        for p in 0..3 {
            assert_eq!(small.path(p), large.path(p));
        }
    }

    #[test]
    fn thread_count_does_not_matter() {
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| BrownianIncrements::generate(11, 64, 30, 1, 0.1));
        let b = four.install(|| BrownianIncrements::generate(11, 64, 30, 1, 0.1));
        assert_eq!(a, b);
    }

    #[test]
    fn increments_have_variance_h() {
        let h = 0.04;
        let inc = BrownianIncrements::generate(3, 2000, 50, 1, h);
        let n = inc.as_slice().len() as f64;
        let mean = inc.as_slice().iter().sum::<f64>() / n;
        let var = inc.as_slice().iter().map(|x| x * x).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * (h / n).sqrt());
        assert!((var / h - 1.0).abs() < 0.02);
    }

    #[test]
    fn window_slices_steps() {
        let inc = BrownianIncrements::generate(1, 2, 5, 1, 1.0);
        let w = inc.window(2, 2);
        assert_eq!(w.get(1, 0), inc.get(1, 2));
        assert_eq!(w.get(0, 1), inc.get(0, 3));
        assert_ne!(derive_seed(1, 2), derive_seed(1, 3));
    }
}
