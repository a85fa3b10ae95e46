//! Random block sets `S(i)` and `V(i+1)`.
//!
//! Draws come from a counter-based generator: ChaCha keyed by the seed and
//! stream id, positioned by iteration and redraw attempt. A draw is a pure
//! function of `(seed, stream_id, iteration)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const ATTEMPT_SHIFT: u32 = 20;
const ITERATION_SHIFT: u32 = 40;
const MAX_ATTEMPTS: u64 = 1 << (ITERATION_SHIFT - ATTEMPT_SHIFT);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SamplingMode {
    Full,
    /// Block `j` included independently with probability `π_j`; empty draws are redrawn.
    Bernoulli,
    /// Uniformly random subset of fixed size.
    FixedCount(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingPlan {
    mode: SamplingMode,
    probabilities: Vec<f64>,
    seed: u64,
    stream_id: u64,
}

impl SamplingPlan {
    pub fn full(n_blocks: usize) -> Self {
        SamplingPlan { mode: SamplingMode::Full, probabilities: vec![1.0; n_blocks], seed: 0, stream_id: 0 }
    }

    pub fn bernoulli(probabilities: Vec<f64>, seed: u64, stream_id: u64) -> Result<Self> {
        if probabilities.is_empty() {
            return Err(Error::Config("sampling needs at least one block".into()));
        }
        if let Some((j, p)) =
            probabilities.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p <= 1.0))
        {
            return Err(Error::Config(format!("probability of block {j} is {p}, must lie in (0, 1]")));
        }
        if (probabilities.len() as u64) >= 1 << (ATTEMPT_SHIFT - 1) {
            return Err(Error::Config("too many blocks for Bernoulli sampling".into()));
        }
        Ok(SamplingPlan { mode: SamplingMode::Bernoulli, probabilities, seed, stream_id })
    }

    pub fn fixed_count(n_blocks: usize, count: usize, seed: u64, stream_id: u64) -> Result<Self> {
        if count == 0 || count > n_blocks {
            return Err(Error::Config(format!(
                "fixed-count sampling of {count} out of {n_blocks} blocks"
            )));
        }
        let p = count as f64 / n_blocks as f64;
        Ok(SamplingPlan {
            mode: SamplingMode::FixedCount(count),
            probabilities: vec![p; n_blocks],
            seed,
            stream_id,
        })
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn n_blocks(&self) -> usize {
        self.probabilities.len()
    }

    pub fn is_full(&self) -> bool {
        self.mode == SamplingMode::Full
    }

    /// Nominal per-block probabilities before conditioning on non-empty draws.
    pub fn nominal_probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    /// Inclusion probabilities of the sets actually returned by [`draw`](Self::draw).
    pub fn effective_probabilities(&self) -> Vec<f64> {
        match self.mode {
            SamplingMode::Full | SamplingMode::FixedCount(_) => self.probabilities.clone(),
            SamplingMode::Bernoulli => {
                let empty: f64 = self.probabilities.iter().map(|p| 1.0 - p).product();
                self.probabilities.iter().map(|p| p / (1.0 - empty)).collect()
            }
        }
    }

    fn rng_at(&self, iteration: u64, attempt: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        let pos = ((iteration as u128) << ITERATION_SHIFT) | ((attempt as u128) << ATTEMPT_SHIFT);
        rng.set_word_pos(pos);
        rng
    }

    /// The sorted block set for `iteration`.
    pub fn draw(&self, iteration: u64) -> Vec<usize> {
        let n = self.probabilities.len();
        match self.mode {
            SamplingMode::Full => (0..n).collect(),
            SamplingMode::FixedCount(k) => {
                let mut rng = self.rng_at(iteration, 0);
                let mut v = rand::seq::index::sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            SamplingMode::Bernoulli => {
                for attempt in 0..MAX_ATTEMPTS {
                    let mut rng = self.rng_at(iteration, attempt);
                    let set: Vec<usize> = self
                        .probabilities
                        .iter()
                        .enumerate()
                        .filter_map(|(j, &p)| {
                            let u = (rng.random::<u64>() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                            (u < p).then_some(j)
                        })
                        .collect();
                    if !set.is_empty() {
                        return set;
                    }
                }
                log::warn!("no block drawn after {MAX_ATTEMPTS} attempts at iteration {iteration}");
                vec![]
            }
        }
    }
}

/// Free-function form of [`SamplingPlan::draw`].
pub fn draw_blocks(plan: &SamplingPlan, iteration: u64, n_blocks: usize) -> Result<Vec<usize>> {
    if n_blocks != plan.n_blocks() {
        return Err(Error::Structure(format!(
            "plan has {} blocks, asked for {n_blocks}",
            plan.n_blocks()
        )));
    }
    Ok(plan.draw(iteration))
}
