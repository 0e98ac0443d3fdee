#![allow(dead_code)]

use bilex_core::corpus::{generate_synthetic_task, ParallelPair, SynthConfig, SyntheticTask, Vocab};
use bilex_core::expert::{ExpertConfig, ExpertExample, ExpertModel};

pub fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get()).min(8)
}

pub fn task(seed: u64) -> SyntheticTask {
    generate_synthetic_task(&SynthConfig { seed, ..SynthConfig::default() }).unwrap()
}

pub struct Encoded {
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    pub data: Vec<ExpertExample>,
}

pub fn encode(pairs: &[ParallelPair]) -> Encoded {
    let src_vocab = Vocab::build(pairs.iter().map(|p| &p.src), None);
    let tgt_vocab = Vocab::build(pairs.iter().map(|p| &p.tgt), None);
    let data = pairs
        .iter()
        .map(|p| (src_vocab.encode(&p.src), tgt_vocab.encode(&p.tgt)))
        .collect();
    Encoded { src_vocab, tgt_vocab, data }
}

pub fn desk_config(e: &Encoded, gap_head: bool) -> ExpertConfig {
    ExpertConfig {
        d_model: 32,
        n_layers: 2,
        d_ff: 64,
        n_heads: 4,
        src_vocab_size: e.src_vocab.len(),
        tgt_vocab_size: e.tgt_vocab.len(),
        gap_head,
        ..ExpertConfig::default()
    }
}

pub fn untrained(e: &Encoded, seed: u64) -> ExpertModel {
    ExpertModel::new(desk_config(e, false), seed).unwrap()
}
