use std::path::Path;

use super::{ExpertConfig, ExpertModel};
use crate::container::Container;
use crate::corpus::{BpeMerges, Vocab};
use crate::error::{Error, Result};

pub const EXPERT_MAGIC: &[u8; 5] = b"BLEX1";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainMeta {
    pub step: usize,
    pub loss: f64,
}

/// A trained expert with everything needed to encode new text.
#[derive(Clone, Debug)]
pub struct ExpertCheckpoint {
    pub model: ExpertModel,
    pub src_vocab: Vocab,
    pub tgt_vocab: Vocab,
    /// Merge rules when the model was trained on subword units.
    pub src_bpe: Option<BpeMerges>,
    pub tgt_bpe: Option<BpeMerges>,
    pub meta: TrainMeta,
    /// Where the checkpoint came from, for diagnostics. Not serialized.
    pub origin: String,
}

const WHAT: &str = "expert checkpoint";
const IN_MEMORY: &str = "<in memory>";

impl ExpertCheckpoint {
    pub fn to_container(&self) -> Container {
        let mut meta = self.model.config().to_pairs();
        meta.push(("step".into(), self.meta.step.to_string()));
        meta.push(("loss".into(), self.meta.loss.to_string()));
        let mut lists = vec![
            ("src_vocab".to_string(), self.src_vocab.tokens().to_vec()),
            ("tgt_vocab".to_string(), self.tgt_vocab.tokens().to_vec()),
        ];
        if let Some(b) = &self.src_bpe {
            lists.push(("src_bpe".into(), b.to_lines()));
        }
        if let Some(b) = &self.tgt_bpe {
            lists.push(("tgt_bpe".into(), b.to_lines()));
        }
        let tensors = self
            .model
            .params()
            .named_values()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        Container { meta, lists, tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let config = ExpertConfig::from_container(&c)?;
        let vocab = |name: &str| -> Result<Vocab> {
            let toks = c
                .list(name)
                .ok_or_else(|| Error::format(WHAT, format!("missing `{name}` section")))?;
            Vocab::from_tokens(toks.to_vec())
        };
        let src_vocab = vocab("src_vocab")?;
        let tgt_vocab = vocab("tgt_vocab")?;
        for (v, n, side) in [
            (&src_vocab, config.src_vocab_size, "source"),
            (&tgt_vocab, config.tgt_vocab_size, "target"),
        ] {
            if v.len() != n {
                return Err(Error::VocabMismatch {
                    checkpoint: IN_MEMORY.into(),
                    detail: format!("{side} vocabulary has {} tokens, config says {n}", v.len()),
                });
            }
        }
        let src_bpe = c.list("src_bpe").map(BpeMerges::from_lines).transpose()?;
        let tgt_bpe = c.list("tgt_bpe").map(BpeMerges::from_lines).transpose()?;
        let meta = TrainMeta {
            step: c.parse("step", WHAT)?,
            loss: c.parse("loss", WHAT)?,
        };
        let model = ExpertModel::from_named(config, c.tensors)?;
        Ok(Self {
            model,
            src_vocab,
            tgt_vocab,
            src_bpe,
            tgt_bpe,
            meta,
            origin: IN_MEMORY.into(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path, EXPERT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::load(path, EXPERT_MAGIC, WHAT)?;
        let mut ck = Self::from_container(c).map_err(|e| match e {
            Error::VocabMismatch { detail, .. } => Error::VocabMismatch {
                checkpoint: path.display().to_string(),
                detail,
            },
            other => other,
        })?;
        ck.origin = path.display().to_string();
        Ok(ck)
    }
}
