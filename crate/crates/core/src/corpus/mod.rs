//! Corpus handling: vocabularies, BPE, segmentation pooling, text files and
//! the synthetic task.

pub mod bpe;
pub mod io;
mod segmentation;
mod synth;
mod vocab;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ter::QeLabels;

pub use bpe::{apply_bpe, learn_bpe, BpeMerges};
pub use segmentation::{pool_features, SegmentationMatrix};
pub use synth::{generate_synthetic_task, source_token, target_token, SynthConfig, SyntheticTask};
pub use vocab::{Vocab, BLANK, BOS, EOS, PAD, RESERVED, UNK};

/// Longest sentence kept by [`filter_pair`].
pub const MAX_FILTER_LEN: usize = 70;
/// Number of times QE pairs are repeated in the pretraining corpus.
pub const QE_COPIES: usize = 10;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ParallelPair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

/// A QE training record: source, MT output, post-edit and derived labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletExample {
    pub src: Vec<String>,
    pub mt: Vec<String>,
    pub pe: Vec<String>,
    pub labels: QeLabels,
}

/// Length and length-ratio filter for pretraining pairs.
pub fn filter_pair(src: &[String], tgt: &[String]) -> bool {
    if src.is_empty() || tgt.is_empty() {
        log::debug!("dropping pair with an empty side");
        return false;
    }
    let (s, t) = (src.len(), tgt.len());
    s <= MAX_FILTER_LEN && t <= MAX_FILTER_LEN && s <= 3 * t && t <= 3 * s
}

/// Parallel corpus plus ten copies of the QE (src, pe) pairs, shuffled.
pub fn combine_training_corpus(
    parallel: &[ParallelPair],
    qe_pairs: &[ParallelPair],
    seed: u64,
) -> Vec<ParallelPair> {
    let mut out = Vec::with_capacity(parallel.len() + QE_COPIES * qe_pairs.len());
    out.extend_from_slice(parallel);
    for _ in 0..QE_COPIES {
        out.extend_from_slice(qe_pairs);
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}
