use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ExpertModel;
use crate::corpus::BLANK;
use crate::error::{Error, Result};
use crate::numerics::{Adam, AdamConfig, Gradients, ParamSet, Tape};

/// Encoded `(source ids, target ids)` pair.
pub type ExpertExample = (Vec<usize>, Vec<usize>);

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear learning-rate warmup length in steps.
    pub warmup_steps: usize,
    pub clip_norm: f64,
    /// Stops early once this many steps have run.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Worker threads for per-example gradients. Results do not depend on it.
    pub threads: usize,
}

impl Default for ExpertTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            warmup_steps: 100,
            clip_norm: 5.0,
            max_steps: None,
            seed: 1,
            threads: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    /// Loss of the very first minibatch, before any update.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

struct Item {
    src: Vec<usize>,
    tgt: Vec<usize>,
    gaps: Option<Vec<usize>>,
    noise_seed: u64,
}

fn example_grads(model: &ExpertModel, it: &Item) -> Result<(Gradients, f64)> {
    let mut tape = Tape::new(model.params());
    let mut noise = ChaCha8Rng::seed_from_u64(it.noise_seed);
    let (loss, _) = model
        .net()
        .loss(&mut tape, &it.src, &it.tgt, it.gaps.as_deref(), Some(&mut noise))?;
    let value = tape.value(loss).item();
    Ok((tape.backward(loss)?, value))
}

/// Per-example gradients in input order, spread over `threads` workers.
fn batch_grads(model: &ExpertModel, items: &[Item], threads: usize) -> Result<Vec<(Gradients, f64)>> {
    if threads <= 1 || items.len() < 2 {
        return items.iter().map(|it| example_grads(model, it)).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|it| example_grads(model, it)).collect::<Result<Vec<_>>>()))
            .collect();
        let mut out = Vec::with_capacity(items.len());
        for h in handles {
            out.extend(h.join().expect("gradient worker panicked")?);
        }
        Ok(out)
    })
}

fn apply(params: &mut ParamSet, grads: &[(Gradients, f64)]) -> f64 {
    params.zero_grad();
    let scale = 1.0 / grads.len() as f64;
    let mut loss = 0.0;
    for (g, l) in grads {
        params.accumulate(g, scale);
        loss += l * scale;
    }
    loss
}

fn run<F, H>(model: &mut ExpertModel, n: usize, cfg: &ExpertTrainConfig, mut make: F, mut hook: H) -> Result<TrainReport>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>, Option<Vec<usize>>),
    H: FnMut(usize, &ExpertModel, f64) -> Result<()>,
{
    if n == 0 {
        return Err(Error::Config("expert training corpus is empty".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig {
        learning_rate: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport {
        steps: 0,
        initial_loss: f64::NAN,
        epoch_losses: Vec::new(),
    };
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.steps >= m) {
                if batches > 0 {
                    report.epoch_losses.push(sum / batches as f64);
                }
                break 'epochs;
            }
            let items: Vec<Item> = chunk
                .iter()
                .map(|&i| {
                    let (src, tgt, gaps) = make(i, &mut rng);
                    Item {
                        src,
                        tgt,
                        gaps,
                        noise_seed: rng.random(),
                    }
                })
                .collect();
            let grads = batch_grads(model, &items, cfg.threads)?;
            let (_, params) = model.parts_mut();
            let loss = apply(params, &grads);
            if !loss.is_finite() || !params.grad_norm().is_finite() {
                return Err(Error::Diverged {
                    step: report.steps,
                    loss,
                });
            }
            params.clip_grad_norm(cfg.clip_norm);
            let warm = ((report.steps + 1) as f64 / cfg.warmup_steps.max(1) as f64).min(1.0);
            adam.step_with_lr(params, cfg.lr * warm)?;
            if report.steps == 0 {
                report.initial_loss = loss;
            }
            report.steps += 1;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches.max(1) as f64;
        log::info!("expert epoch {} loss {:.4}", epoch + 1, mean);
        report.epoch_losses.push(mean);
        hook(epoch, model, mean)?;
    }
    Ok(report)
}

/// Minibatch Adam training with gradient clipping. `hook` runs after every
/// epoch with the epoch index and mean loss, e.g. to write a checkpoint.
pub fn train_expert<H>(model: &mut ExpertModel, data: &[ExpertExample], cfg: &ExpertTrainConfig, hook: H) -> Result<TrainReport>
where
    H: FnMut(usize, &ExpertModel, f64) -> Result<()>,
{
    run(model, data.len(), cfg, |i, _| (data[i].0.clone(), data[i].1.clone(), None), hook)
}

/// Deletes each token with probability `p_del`. Returns the shortened
/// sequence and per-gap targets: the deleted token at its boundary, BLANK
/// elsewhere. When consecutive tokens are deleted the first one is the
/// target. Never returns an empty sequence.
pub fn delete_for_gaps<R: Rng>(tgt: &[usize], p_del: f64, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    loop {
        let mut kept = Vec::with_capacity(tgt.len());
        let mut gaps = vec![BLANK];
        for &tok in tgt {
            if rng.random::<f64>() < p_del {
                let g = gaps.last_mut().expect("gaps is never empty");
                if *g == BLANK {
                    *g = tok;
                }
            } else {
                kept.push(tok);
                gaps.push(BLANK);
            }
        }
        if !kept.is_empty() {
            return (kept, gaps);
        }
    }
}

/// Trains the gap-head variant on deletion-corrupted targets, redrawn every
/// time an example is visited.
pub fn train_gap_expert<H>(
    model: &mut ExpertModel,
    data: &[ExpertExample],
    p_del: f64,
    cfg: &ExpertTrainConfig,
    hook: H,
) -> Result<TrainReport>
where
    H: FnMut(usize, &ExpertModel, f64) -> Result<()>,
{
    if !(0.0..=0.5).contains(&p_del) {
        return Err(Error::Config(format!("p_del {p_del} must lie in [0, 0.5]")));
    }
    if !model.config().gap_head {
        return Err(Error::Config("gap training needs a model with gap_head = true".into()));
    }
    run(
        model,
        data.len(),
        cfg,
        |i, rng| {
            let (input, gaps) = delete_for_gaps(&data[i].1, p_del, rng);
            (data[i].0.clone(), input, Some(gaps))
        },
        hook,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<f64>, usize);

    impl rand::RngCore for Fixed {
        fn next_u32(&mut self) -> u32 {
            self.next_u64() as u32
        }
        fn next_u64(&mut self) -> u64 {
            // Encodes the wanted uniform draw in the top 53 bits.
            let v = self.0[self.1 % self.0.len()];
            self.1 += 1;
            ((v * (1u64 << 53) as f64) as u64) << 11
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            rand::rand_core::impls::fill_bytes_via_next(self, dst)
        }
    }

    #[test]
    fn deletion_targets() {
        // Delete only the middle token of [a, b, c].
        let mut rng = Fixed(vec![0.9, 0.0, 0.9], 0);
        let (input, gaps) = delete_for_gaps(&[10, 11, 12], 0.5, &mut rng);
        assert_eq!(input, vec![10, 12]);
        assert_eq!(gaps, vec![BLANK, 11, BLANK]);
    }

    #[test]
    fn no_deletion_gives_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (input, gaps) = delete_for_gaps(&[7, 8, 9], 0.0, &mut rng);
        assert_eq!(input, vec![7, 8, 9]);
        assert_eq!(gaps, vec![BLANK; 4]);
    }

    #[test]
    fn deletion_never_empties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let (input, gaps) = delete_for_gaps(&[7], 0.5, &mut rng);
            assert_eq!(input, vec![7]);
            assert_eq!(gaps.len(), 2);
        }
    }
}
