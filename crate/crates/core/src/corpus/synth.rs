//! Synthetic stand-in for a parallel corpus plus QE triplets.
//!
//! Sources are uniform random symbols. The reference translation maps each
//! source symbol through a fixed permutation and then reverses the sentence,
//! so the target depends on source order. MT output is the reference with
//! independent substitution, deletion and insertion noise.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{ParallelPair, TripletExample};
use crate::error::{Error, Result};
use crate::ter;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub vocab_size: usize,
    pub n_parallel: usize,
    pub n_triplets: usize,
    pub p_sub: f64,
    pub p_del: f64,
    pub p_ins: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            n_parallel: 2000,
            n_triplets: 900,
            p_sub: 0.15,
            p_del: 0.05,
            p_ins: 0.05,
            min_len: 4,
            max_len: 10,
            seed: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("p_sub", self.p_sub), ("p_del", self.p_del), ("p_ins", self.p_ins)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} must lie in [0, 1)")));
            }
        }
        if self.vocab_size < 8 {
            return Err(Error::Config(format!("vocab_size = {} must be at least 8", self.vocab_size)));
        }
        if self.min_len == 0 || self.min_len > self.max_len || self.max_len > 70 {
            return Err(Error::Config(format!(
                "sentence lengths {}..={} must satisfy 1 <= min <= max <= 70",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub parallel: Vec<ParallelPair>,
    pub triplets: Vec<TripletExample>,
}

pub fn source_token(i: usize) -> String {
    format!("s{i}")
}

pub fn target_token(i: usize) -> String {
    format!("t{i}")
}

struct Generator {
    cfg: SynthConfig,
    rng: ChaCha8Rng,
    mapping: Vec<usize>,
}

impl Generator {
    fn source(&mut self) -> Vec<usize> {
        let len = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        (0..len).map(|_| self.rng.random_range(0..self.cfg.vocab_size)).collect()
    }

    fn translate(&self, src: &[usize]) -> Vec<usize> {
        src.iter().rev().map(|&s| self.mapping[s]).collect()
    }

    fn substitute(&mut self, original: usize, reference: &HashSet<usize>) -> usize {
        let v = self.cfg.vocab_size;
        if reference.len() < v {
            let pool: Vec<usize> = (0..v).filter(|s| !reference.contains(s)).collect();
            pool[self.rng.random_range(0..pool.len())]
        } else {
            let s = self.rng.random_range(0..v - 1);
            if s >= original {
                s + 1
            } else {
                s
            }
        }
    }

    fn corrupt(&mut self, reference: &[usize]) -> Vec<usize> {
        let present: HashSet<usize> = reference.iter().copied().collect();
        loop {
            let mut out = Vec::with_capacity(reference.len() + 2);
            for &tok in reference {
                if self.rng.random::<f64>() < self.cfg.p_ins {
                    out.push(self.rng.random_range(0..self.cfg.vocab_size));
                }
                if self.rng.random::<f64>() < self.cfg.p_del {
                    continue;
                }
                if self.rng.random::<f64>() < self.cfg.p_sub {
                    out.push(self.substitute(tok, &present));
                } else {
                    out.push(tok);
                }
            }
            if self.rng.random::<f64>() < self.cfg.p_ins {
                out.push(self.rng.random_range(0..self.cfg.vocab_size));
            }
            if !out.is_empty() {
                return out;
            }
        }
    }
}

fn words(ids: &[usize], f: fn(usize) -> String) -> Vec<String> {
    ids.iter().map(|&i| f(i)).collect()
}

/// Generates `n_parallel` clean pairs and `n_triplets` labelled QE triplets.
/// Fully determined by `cfg.seed`.
pub fn generate_synthetic_task(cfg: &SynthConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mapping: Vec<usize> = (0..cfg.vocab_size).collect();
    mapping.shuffle(&mut rng);
    let mut g = Generator {
        cfg: cfg.clone(),
        rng,
        mapping,
    };

    let mut parallel = Vec::with_capacity(cfg.n_parallel);
    for _ in 0..cfg.n_parallel {
        let s = g.source();
        let t = g.translate(&s);
        parallel.push(ParallelPair {
            src: words(&s, source_token),
            tgt: words(&t, target_token),
        });
    }

    let mut triplets = Vec::with_capacity(cfg.n_triplets);
    for _ in 0..cfg.n_triplets {
        let s = g.source();
        let t = g.translate(&s);
        let m = g.corrupt(&t);
        let labels = ter::label(&m, &t)?;
        triplets.push(TripletExample {
            src: words(&s, source_token),
            mt: words(&m, target_token),
            pe: words(&t, target_token),
            labels,
        });
    }
    Ok(SyntheticTask { parallel, triplets })
}
