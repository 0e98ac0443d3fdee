//! Per-token QE features from a frozen expert.
//!
//! For MT token `k` the feature row is
//! `[z_fwd_k; z_bwd_k; e(m_{k-1}); e(m_{k+1}); mismatch_k]`, where `e` is the
//! expert's target embedding (BOS/EOS at the edges) and the last four
//! entries compare the expert's logits with the MT token.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::corpus::{apply_bpe, pool_features, SegmentationMatrix, BOS, EOS, UNK};
use crate::error::{Error, Result};
use crate::expert::{ExpertCheckpoint, ExpertModel};
use crate::numerics::Tensor;

pub const MISMATCH_WIDTH: usize = 4;
pub const FEATURE_MAGIC: &[u8; 5] = b"QEFT1";

/// Above this share of out-of-vocabulary MT tokens the dataset is taken to
/// belong to a different checkpoint.
pub const MAX_OOV_RATE: f64 = 0.5;

/// `[l[m_k], max l, l[m_k] - max l, 1{m_k != argmax}]`, argmax ties going
/// to the lowest index.
pub fn extract_mismatch(logits: &[f64], m_k: usize) -> Result<[f64; MISMATCH_WIDTH]> {
    if m_k >= logits.len() {
        return Err(Error::Index {
            op: "extract_mismatch",
            index: m_k,
            size: logits.len(),
        });
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    let own = logits[m_k];
    let max = logits[best];
    Ok([own, max, own - max, if best != m_k { 1.0 } else { 0.0 }])
}

/// Width of the model-derived slice for a given expert width.
pub fn model_derived_width(d_model: usize) -> usize {
    4 * d_model
}

pub fn feature_width(d_model: usize) -> usize {
    model_derived_width(d_model) + MISMATCH_WIDTH
}

/// Model-derived and mismatch features for one encoded sentence,
/// `[T x (4 d_model + 4)]`. Noise is off.
pub fn sentence_features(model: &ExpertModel, src: &[usize], mt: &[usize]) -> Result<Tensor> {
    if mt.is_empty() {
        return Err(Error::Contract("cannot extract features for an empty MT sentence".into()));
    }
    let (latent, logits) = model.infer(src, mt)?;
    let t = latent.z_fwd.rows();
    let d = model.config().d_model;
    let width = feature_width(d);
    let mut out = Vec::with_capacity(t * width);
    for k in 0..t {
        out.extend_from_slice(latent.z_fwd.row(k));
        out.extend_from_slice(latent.z_bwd.row(k));
        let prev = if k == 0 { BOS } else { mt[k - 1] };
        let next = if k + 1 == t { EOS } else { mt[k + 1] };
        out.extend_from_slice(model.target_embedding(prev));
        out.extend_from_slice(model.target_embedding(next));
        out.extend_from_slice(&extract_mismatch(logits.row(k), mt[k])?);
    }
    Tensor::new(vec![t, width], out)
}

/// Features of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub id: u64,
    /// `[T x width]`.
    pub features: Tensor,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// Units and word segmentation for one side, honouring the checkpoint's
/// BPE rules if any.
fn segment(words: &[String], bpe: Option<&crate::corpus::BpeMerges>) -> Result<(Vec<String>, Option<SegmentationMatrix>)> {
    match bpe {
        Some(m) => {
            let (units, seg) = apply_bpe(words, m)?;
            Ok((units, Some(seg)))
        }
        None => Ok((words.to_vec(), None)),
    }
}

fn extract_one(ck: &ExpertCheckpoint, id: u64, src: &[String], mt: &[String]) -> Result<(FeatureSequence, usize, usize)> {
    let (src_units, _) = segment(src, ck.src_bpe.as_ref())?;
    let (mt_units, seg) = segment(mt, ck.tgt_bpe.as_ref())?;
    let s = ck.src_vocab.encode(&src_units);
    let m = ck.tgt_vocab.encode(&mt_units);
    let oov = m.iter().filter(|&&i| i == UNK).count();
    let mut f = sentence_features(&ck.model, &s, &m).map_err(|e| match e {
        Error::Contract(d) => Error::LengthMismatch { id: id as usize, detail: d },
        other => other,
    })?;
    if let Some(seg) = seg {
        f = pool_features(&f, &seg)?;
    }
    Ok((FeatureSequence { id, features: f }, oov, m.len()))
}

/// Features for every `(source words, MT words)` pair, ids `0..n`. In BPE
/// mode subword features are averaged back to words, so row count always
/// equals the MT word count.
pub fn extract_features(ck: &ExpertCheckpoint, data: &[(Vec<String>, Vec<String>)], threads: usize) -> Result<Vec<FeatureSequence>> {
    let run = |offset: usize, chunk: &[(Vec<String>, Vec<String>)]| -> Result<Vec<(FeatureSequence, usize, usize)>> {
        chunk
            .iter()
            .enumerate()
            .map(|(i, (s, m))| extract_one(ck, (offset + i) as u64, s, m))
            .collect()
    };
    let results = if threads <= 1 || data.len() < 2 {
        run(0, data)?
    } else {
        let size = data.len().div_ceil(threads);
        std::thread::scope(|sc| {
            let handles: Vec<_> = data
                .chunks(size)
                .enumerate()
                .map(|(c, chunk)| sc.spawn(move || run(c * size, chunk)))
                .collect();
            let mut out = Vec::with_capacity(data.len());
            for h in handles {
                out.extend(h.join().expect("extraction worker panicked")?);
            }
            Ok::<_, Error>(out)
        })?
    };
    let (oov, total) = results.iter().fold((0, 0), |(a, b), r| (a + r.1, b + r.2));
    if total > 0 && oov as f64 / total as f64 > MAX_OOV_RATE {
        return Err(Error::VocabMismatch {
            checkpoint: ck.origin.clone(),
            detail: format!("{oov} of {total} MT tokens are unknown to the checkpoint vocabulary"),
        });
    }
    Ok(results.into_iter().map(|r| r.0).collect())
}

pub fn write_features(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(FEATURE_MAGIC)?;
    for s in seqs {
        put(&s.id.to_le_bytes())?;
        put(&(s.len() as u32).to_le_bytes())?;
        put(&(s.width() as u32).to_le_bytes())?;
        for v in s.features.data() {
            put(&v.to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    const W: &str = "feature file";
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 5 || &bytes[..5] != FEATURE_MAGIC {
        return Err(Error::format(W, "bad magic, expected QEFT1"));
    }
    let mut pos = 5;
    let mut take = |n: usize| -> Result<&[u8]> {
        if bytes.len() - pos < n {
            return Err(Error::format(W, "unexpected end of file"));
        }
        pos += n;
        Ok(&bytes[pos - n..pos])
    };
    let mut out = Vec::new();
    let mut width = None;
    loop {
        let head = match take(8) {
            Ok(h) => h,
            Err(_) => break,
        };
        let id = u64::from_le_bytes(head.try_into().unwrap());
        let t = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        if *width.get_or_insert(w) != w {
            return Err(Error::format(W, format!("record {id} has width {w}, expected {}", width.unwrap())));
        }
        let data = take(t * w * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push(FeatureSequence {
            id,
            features: Tensor::new(vec![t, w], data).map_err(|e| Error::format(W, e.to_string()))?,
        });
    }
    if pos != bytes.len() {
        return Err(Error::format(W, "truncated record"));
    }
    Ok(out)
}
