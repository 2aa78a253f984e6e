use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::parallel;
use crate::problem::TimeGrid;

/// Brownian increments `ΔW[path][step][component]`, each `N(0, Δt)`.
///
/// Path `i` draws from its own ChaCha8 stream (stream id `i`, key derived
/// from the seed), so batches are reproducible bit-for-bit whatever the
/// number of worker threads.
#[derive(Debug, Clone, PartialEq)]
pub struct BrownianBatch {
    seed: u64,
    paths: usize,
    steps: usize,
    dim: usize,
    dt: f64,
    increments: Vec<f64>,
}

impl BrownianBatch {
    pub fn sample(grid: &TimeGrid, dim: usize, paths: usize, seed: u64) -> BrownianBatch {
        let steps = grid.steps();
        let dt = grid.dt();
        let scale = dt.sqrt();
        let mut increments = vec![0.0; paths * steps * dim];
        parallel::for_each_slot(&mut increments, steps * dim, |path, slot| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(path as u64);
            for v in slot.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v = scale * z;
            }
        });
        BrownianBatch {
            seed,
            paths,
            steps,
            dim,
            dt,
            increments,
        }
    }

    /// Wraps explicit increments laid out as `[path][step][component]`.
    pub fn from_increments(grid: &TimeGrid, dim: usize, paths: usize, increments: Vec<f64>) -> BrownianBatch {
        assert_eq!(increments.len(), paths * grid.steps() * dim, "increment array size");
        BrownianBatch {
            seed: 0,
            paths,
            steps: grid.steps(),
            dim,
            dt: grid.dt(),
            increments,
        }
    }

    /// Every path of the binomial tree with increments `±√Δt`: `2^(N·d)`
    /// equally likely paths, so plain averages are exact expectations of the
    /// tree model.
    pub fn binomial_tree(grid: &TimeGrid, dim: usize) -> BrownianBatch {
        let draws = grid.steps() * dim;
        assert!(draws < 24, "binomial tree too large");
        let paths = 1usize << draws;
        let h = grid.dt().sqrt();
        let mut increments = Vec::with_capacity(paths * draws);
        for path in 0..paths {
            for bit in 0..draws {
                // First draw is the most significant bit so that paths are
                // ordered lexicographically by their increment signs.
                let up = (path >> (draws - 1 - bit)) & 1 == 1;
                increments.push(if up { h } else { -h });
            }
        }
        Self::from_increments(grid, dim, paths, increments)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn increment(&self, path: usize, step: usize) -> &[f64] {
        let start = (path * self.steps + step) * self.dim;
        &self.increments[start..start + self.dim]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        let len = self.steps * self.dim;
        &self.increments[path * len..(path + 1) * len]
    }

    /// Cumulative values `W[node][component]` of one path, `W[0] = 0`.
    pub fn cumulative(&self, path: usize) -> Vec<f64> {
        let mut w = vec![0.0; (self.steps + 1) * self.dim];
        let inc = self.path_increments(path);
        for k in 0..self.steps {
            for j in 0..self.dim {
                w[(k + 1) * self.dim + j] = w[k * self.dim + j] + inc[k * self.dim + j];
            }
        }
        w
    }

    /// Cumulative value of one component at one node.
    pub fn w(&self, path: usize, node: usize, component: usize) -> f64 {
        (0..node).map(|k| self.increment(path, k)[component]).sum()
    }

    /// Same increments restricted to the first `paths` paths.
    pub fn truncated(&self, paths: usize) -> BrownianBatch {
        let paths = paths.min(self.paths);
        BrownianBatch {
            seed: self.seed,
            paths,
            steps: self.steps,
            dim: self.dim,
            dt: self.dt,
            increments: self.increments[..paths * self.steps * self.dim].to_vec(),
        }
    }
}
