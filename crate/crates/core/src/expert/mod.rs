//! The bilingual expert: a conditional language model that predicts every
//! target token from the source and both sides of its target context.
//!
//! A transformer encoder reads the source. Two target streams attend to it:
//! the forward stream sees `t_{<k}` through a causal mask over right-shifted
//! inputs, the backward stream sees `t_{>k}` through an anti-causal mask over
//! left-shifted inputs. Their outputs are the latent means, and the token
//! reconstructor maps the concatenated latents to vocabulary logits.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{ExpertCheckpoint, TrainMeta, EXPERT_MAGIC};
pub use model::{ExpertModel, ExpertNet, ExpertVars, LatentStates};
pub use train::{
    delete_for_gaps, train_expert, train_gap_expert, ExpertExample, ExpertTrainConfig, TrainReport,
};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ExpertConfig {
    pub d_model: usize,
    /// Blocks per module (encoder, forward stream, backward stream).
    pub n_layers: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Std of the additive latent noise during training.
    pub sigma: f64,
    pub kl_weight: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    /// Longer inputs are truncated.
    pub max_len: usize,
    /// Adds the gap-token prediction head.
    pub gap_head: bool,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            d_ff: 512,
            n_heads: 8,
            sigma: 0.1,
            kl_weight: 1e-3,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            max_len: 128,
            gap_head: false,
        }
    }
}

impl ExpertConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.max_len == 0 {
            return fail("n_layers, d_ff and max_len must be positive".into());
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return fail(format!("sigma {} must be finite and non-negative", self.sigma));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return fail(format!("kl_weight {} must be finite and non-negative", self.kl_weight));
        }
        if self.src_vocab_size <= crate::corpus::BLANK || self.tgt_vocab_size <= crate::corpus::BLANK {
            return fail("vocabularies must contain the reserved tokens".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("d_model", self.d_model.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("sigma", self.sigma.to_string()),
            ("kl_weight", self.kl_weight.to_string()),
            ("src_vocab_size", self.src_vocab_size.to_string()),
            ("tgt_vocab_size", self.tgt_vocab_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("gap_head", self.gap_head.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub(crate) fn from_container(c: &crate::container::Container) -> Result<Self> {
        const W: &str = "expert checkpoint";
        let cfg = Self {
            d_model: c.parse("d_model", W)?,
            n_layers: c.parse("n_layers", W)?,
            d_ff: c.parse("d_ff", W)?,
            n_heads: c.parse("n_heads", W)?,
            sigma: c.parse("sigma", W)?,
            kl_weight: c.parse("kl_weight", W)?,
            src_vocab_size: c.parse("src_vocab_size", W)?,
            tgt_vocab_size: c.parse("tgt_vocab_size", W)?,
            max_len: c.parse("max_len", W)?,
            gap_head: c.parse("gap_head", W)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
