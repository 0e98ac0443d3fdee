mod common;

use std::sync::OnceLock;

use bilex_core::corpus::{ParallelPair, BLANK};
use bilex_core::expert::{train_expert, train_gap_expert, ExpertModel, ExpertTrainConfig};
use common::{encode, task, threads, untrained, Encoded};

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn quick(epochs: usize, threads: usize) -> ExpertTrainConfig {
    ExpertTrainConfig {
        epochs,
        lr: 2e-3,
        warmup_steps: 20,
        threads,
        ..ExpertTrainConfig::default()
    }
}

fn first_500() -> Encoded {
    encode(&task(3).parallel[..500])
}

#[test]
fn untrained_nll_is_near_uniform() {
    let e = first_500();
    let m = untrained(&e, 1);
    let v = e.tgt_vocab.len() as f64;
    let (mut nll, mut n) = (0.0, 0);
    for (s, t) in &e.data[..100] {
        nll -= m.log_likelihood(s, t).unwrap();
        n += t.len();
    }
    let per_token = nll / n as f64;
    assert!((per_token - v.ln()).abs() < 0.1 * v.ln(), "{per_token} vs ln V = {}", v.ln());
}

#[test]
fn two_hundred_steps_reduce_loss() {
    let e = first_500();
    let mut m = untrained(&e, 2);
    let before = m.loss(&e.data).unwrap();
    let cfg = ExpertTrainConfig {
        epochs: 100,
        max_steps: Some(200),
        ..quick(0, threads())
    };
    let rep = train_expert(&mut m, &e.data, &cfg, |_, _, _| Ok(())).unwrap();
    assert_eq!(rep.steps, 200);
    let after = m.loss(&e.data).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn two_epochs_train_deterministically_for_any_thread_count() {
    let e = first_500();
    let run = |threads: usize| {
        let mut m = untrained(&e, 4);
        let rep = train_expert(&mut m, &e.data, &quick(2, threads), |_, _, _| Ok(())).unwrap();
        (rep, m.logits(&e.data[0].0, &e.data[0].1).unwrap())
    };
    let (a, la) = run(1);
    assert!(a.final_loss() < a.initial_loss, "{a:?}");
    let (b, lb) = run(1);
    let (c, lc) = run(3);
    assert_eq!(a, b);
    assert_eq!(a, c);
    assert_eq!(la, lb);
    assert_eq!(la, lc);
}

struct Trained {
    model: ExpertModel,
    enc: Encoded,
    held_out: Vec<(Vec<usize>, Vec<usize>, Vec<usize>)>,
}

/// One expert trained on the synthetic parallel data, shared by the
/// learnability and source-dependence checks.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let t = task(1);
        let enc = encode(&t.parallel);
        let mut model = untrained(&enc, 1);
        train_expert(&mut model, &enc.data, &quick(6, threads()), |_, _, _| Ok(())).unwrap();
        let held_out = t
            .triplets
            .iter()
            .filter(|x| x.mt != x.pe)
            .map(|x| (enc.src_vocab.encode(&x.src), enc.tgt_vocab.encode(&x.mt), enc.tgt_vocab.encode(&x.pe)))
            .collect();
        Trained { model, enc, held_out }
    })
}

#[test]
fn prefers_post_edit_over_corrupted_mt() {
    let t = trained();
    let wins = t
        .held_out
        .iter()
        .filter(|(s, mt, pe)| t.model.log_likelihood(s, pe).unwrap() > t.model.log_likelihood(s, mt).unwrap())
        .count();
    let rate = wins as f64 / t.held_out.len() as f64;
    assert!(rate >= 0.9, "post-edit preferred on {wins}/{}", t.held_out.len());
}

#[test]
fn mismatched_source_degrades_likelihood() {
    let t = trained();
    let probe = &t.enc.data[..200];
    let nll = |pairs: &mut dyn Iterator<Item = (&Vec<usize>, &Vec<usize>)>| -> f64 {
        pairs.map(|(s, tg)| -t.model.log_likelihood(s, tg).unwrap()).sum()
    };
    let aligned = nll(&mut probe.iter().map(|(s, tg)| (s, tg)));
    // Pair each target with the next sentence's source.
    let shifted = nll(&mut probe.iter().zip(probe.iter().cycle().skip(1)).map(|((_, tg), (s, _))| (s, tg)));
    assert!(shifted > 2.0 * aligned, "shifted {shifted} vs aligned {aligned}");
}

#[test]
fn gap_expert_learns_blanks_and_recovers_deletions() {
    let t = task(2);
    let pairs: Vec<ParallelPair> = t.parallel.clone();
    let enc = encode(&pairs);
    let mut model = ExpertModel::new(common::desk_config(&enc, true), 5).unwrap();
    // Recovering deletions takes far longer to learn than predicting BLANK.
    let cfg = ExpertTrainConfig {
        batch_size: 16,
        ..quick(36, threads())
    };
    let rep = train_gap_expert(&mut model, &enc.data, 0.2, &cfg, |_, _, _| Ok(())).unwrap();
    assert!(rep.final_loss() < rep.epoch_losses[0], "{:?}", rep.epoch_losses);

    let probe: Vec<(Vec<usize>, Vec<usize>)> = t
        .triplets
        .iter()
        .take(150)
        .map(|x| (enc.src_vocab.encode(&x.src), enc.tgt_vocab.encode(&x.pe)))
        .collect();
    let (mut blank, mut gaps) = (0, 0);
    let (mut hit, mut probes) = (0, 0);
    for (s, tg) in &probe {
        let g = model.gap_logits(s, tg).unwrap();
        assert_eq!(g.shape(), &[tg.len() + 1, enc.tgt_vocab.len()]);
        for k in 0..g.shape()[0] {
            gaps += 1;
            blank += usize::from(argmax(g.row(k)) == BLANK);
        }
        for k in 0..tg.len() {
            if tg.len() < 2 {
                continue;
            }
            let mut cut = tg.clone();
            let removed = cut.remove(k);
            let g = model.gap_logits(s, &cut).unwrap();
            probes += 1;
            hit += usize::from(argmax(g.row(k)) == removed);
        }
    }
    assert!(blank as f64 > 0.95 * gaps as f64, "BLANK at {blank}/{gaps} gaps");
    assert!(2 * hit > probes, "deleted token recovered in {hit}/{probes} probes");
}
