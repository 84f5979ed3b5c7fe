//! Genetic-algorithm search over kernel parameters.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::kernel::KernelParams;
use crate::error::{Error, Result};

/// Candidate values per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneBounds {
    pub rows_per_task: Vec<usize>,
    pub tile_cols: Vec<usize>,
    pub threads: Vec<usize>,
}

impl TuneBounds {
    pub fn single(p: KernelParams) -> Self {
        Self { rows_per_task: vec![p.rows_per_task], tile_cols: vec![p.tile_cols], threads: vec![p.threads] }
    }

    /// Powers of two for tiling, the given thread counts.
    pub fn standard(threads: &[usize]) -> Self {
        Self {
            rows_per_task: vec![1, 2, 4, 8, 16, 32, 64],
            tile_cols: vec![8, 16, 32, 64, 128, 256, 512],
            threads: threads.to_vec(),
        }
    }

    fn genes(&self) -> [usize; 3] {
        [self.rows_per_task.len(), self.tile_cols.len(), self.threads.len()]
    }

    fn decode(&self, g: &[usize; 3]) -> KernelParams {
        KernelParams {
            rows_per_task: self.rows_per_task[g[0]],
            tile_cols: self.tile_cols[g[1]],
            threads: self.threads[g[2]],
        }
    }

    pub fn contains(&self, p: &KernelParams) -> bool {
        self.rows_per_task.contains(&p.rows_per_task)
            && self.tile_cols.contains(&p.tile_cols)
            && self.threads.contains(&p.threads)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    pub mutation: f64,
    pub crossover: f64,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self { population: 16, generations: 12, mutation: 0.2, crossover: 0.9, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuneResult {
    pub best: KernelParams,
    pub best_latency: f64,
    pub default_latency: f64,
    /// Best latency after each generation.
    pub trace: Vec<f64>,
    pub evaluations: usize,
}

/// Minimizes `fitness` (a latency) over `bounds`. The default config is
/// evaluated first and returned unless something strictly better is found.
pub fn autotune(
    bounds: &TuneBounds,
    default: KernelParams,
    cfg: &GaConfig,
    mut fitness: impl FnMut(&KernelParams) -> f64,
) -> Result<TuneResult> {
    if cfg.population < 4 {
        return Err(Error::InvalidArgument(format!("population {} must be >= 4", cfg.population)));
    }
    let sizes = bounds.genes();
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("every tuning dimension needs a candidate".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut cache: HashMap<[usize; 3], f64> = HashMap::new();
    let default_latency = fitness(&default);
    let mut eval = |g: &[usize; 3], cache: &mut HashMap<[usize; 3], f64>| -> f64 {
        *cache.entry(*g).or_insert_with(|| fitness(&bounds.decode(g)))
    };
    let random = |rng: &mut ChaCha8Rng| -> [usize; 3] { std::array::from_fn(|i| rng.gen_range(0..sizes[i])) };

    let mut pop: Vec<[usize; 3]> = (0..cfg.population).map(|_| random(&mut rng)).collect();
    let mut trace = Vec::with_capacity(cfg.generations + 1);
    let mut scored: Vec<([usize; 3], f64)> = pop.iter().map(|g| (*g, eval(g, &mut cache))).collect();
    for _ in 0..cfg.generations {
        scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        trace.push(scored[0].1);
        let mut next = vec![scored[0].0];
        while next.len() < cfg.population {
            let a = tournament(&scored, &mut rng);
            let b = tournament(&scored, &mut rng);
            let mut child = a;
            if rng.gen_bool(cfg.crossover.clamp(0.0, 1.0)) {
                let cut = rng.gen_range(1..3);
                child[cut..].copy_from_slice(&b[cut..]);
            }
            for (i, gene) in child.iter_mut().enumerate() {
                if rng.gen_bool(cfg.mutation.clamp(0.0, 1.0)) {
                    // Candidates are ordered, so half the mutations step to a neighbour.
                    *gene = if rng.gen_bool(0.5) {
                        match rng.gen_bool(0.5) {
                            true => (*gene + 1).min(sizes[i] - 1),
                            false => gene.saturating_sub(1),
                        }
                    } else {
                        rng.gen_range(0..sizes[i])
                    };
                }
            }
            next.push(child);
        }
        pop = next;
        scored = pop.iter().map(|g| (*g, eval(g, &mut cache))).collect();
    }
    scored.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    trace.push(scored[0].1);
    let (best_g, best_latency) = scored[0];
    let (best, best_latency) = if best_latency < default_latency {
        (bounds.decode(&best_g), best_latency)
    } else {
        (default, default_latency)
    };
    Ok(TuneResult { best, best_latency, default_latency, trace, evaluations: cache.len() + 1 })
}

fn tournament(scored: &[([usize; 3], f64)], rng: &mut ChaCha8Rng) -> [usize; 3] {
    let a = &scored[rng.gen_range(0..scored.len())];
    let b = &scored[rng.gen_range(0..scored.len())];
    if b.1 < a.1 {
        b.0
    } else {
        a.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_point_space() {
        let p = KernelParams { rows_per_task: 8, tile_cols: 32, threads: 2 };
        let r = autotune(&TuneBounds::single(p), KernelParams::default(), &GaConfig::default(), |q| {
            if *q == p {
                1.0
            } else {
                2.0
            }
        })
        .unwrap();
        assert_eq!(r.best, p);
    }

    #[test]
    fn never_regresses() {
        let r = autotune(&TuneBounds::standard(&[1]), KernelParams::default(), &GaConfig::default(), |_| 5.0).unwrap();
        assert_eq!(r.best, KernelParams::default());
        assert!(autotune(
            &TuneBounds::standard(&[1]),
            KernelParams::default(),
            &GaConfig { population: 3, ..Default::default() },
            |_| 1.0
        )
        .is_err());
    }
}
