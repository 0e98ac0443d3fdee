use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::ExpertConfig;
use crate::corpus::{BOS, EOS};
use crate::error::{Error, Result};
use crate::numerics::{xavier_uniform, AttnMask, ParamId, ParamSet, Tape, Tensor, Var};

/// Output heads start at half the usual init scale so an untrained model
/// predicts close to uniformly.
const HEAD_INIT_SCALE: f64 = 0.5;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Copy, Debug)]
struct FeedForward {
    inner: Linear,
    outer: Linear,
}

#[derive(Clone, Copy, Debug)]
struct EncoderBlock {
    attn: Attention,
    ln_attn: Norm,
    ffn: FeedForward,
    ln_ffn: Norm,
}

#[derive(Clone, Copy, Debug)]
struct StreamBlock {
    attn: Attention,
    ln_attn: Norm,
    cross: Attention,
    ln_cross: Norm,
    ffn: FeedForward,
    ln_ffn: Norm,
}

struct Builder<'a> {
    params: &'a mut ParamSet,
    rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, scale: f64) -> Linear {
        let mut w = xavier_uniform(&mut self.rng, fan_in, fan_out);
        w.data_mut().iter_mut().for_each(|x| *x *= scale);
        Linear {
            w: self.params.add(format!("{name}.w"), w),
            b: self.params.add(format!("{name}.b"), Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.params.add(format!("{name}.gain"), Tensor::full(&[d], 1.0)),
            bias: self.params.add(format!("{name}.bias"), Tensor::zeros(&[d])),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> Attention {
        Attention {
            q: self.linear(&format!("{name}.q"), d, d, 1.0),
            k: self.linear(&format!("{name}.k"), d, d, 1.0),
            v: self.linear(&format!("{name}.v"), d, d, 1.0),
            o: self.linear(&format!("{name}.o"), d, d, 1.0),
        }
    }

    fn ffn(&mut self, name: &str, d: usize, d_ff: usize) -> FeedForward {
        FeedForward {
            inner: self.linear(&format!("{name}.inner"), d, d_ff, 1.0),
            outer: self.linear(&format!("{name}.outer"), d_ff, d, 1.0),
        }
    }

    fn stream_block(&mut self, name: &str, cfg: &ExpertConfig) -> StreamBlock {
        let d = cfg.d_model;
        StreamBlock {
            attn: self.attention(&format!("{name}.self"), d),
            ln_attn: self.norm(&format!("{name}.ln_self"), d),
            cross: self.attention(&format!("{name}.cross"), d),
            ln_cross: self.norm(&format!("{name}.ln_cross"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, cfg.d_ff),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), d),
        }
    }
}

/// Architecture: configuration plus handles into a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct ExpertNet {
    config: ExpertConfig,
    src_emb: ParamId,
    tgt_emb: ParamId,
    encoder: Vec<EncoderBlock>,
    forward: Vec<StreamBlock>,
    backward: Vec<StreamBlock>,
    out: Linear,
    gap: Option<Linear>,
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ExpertVars {
    pub memory: Var,
    pub mu_fwd: Var,
    pub mu_bwd: Var,
    pub z_fwd: Var,
    pub z_bwd: Var,
    pub logits: Var,
    pub gap_logits: Option<Var>,
}

/// Per-position latent states, `[T x d_model]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentStates {
    pub z_fwd: Tensor,
    pub z_bwd: Tensor,
    pub mu_fwd: Tensor,
    pub mu_bwd: Tensor,
}

fn sinusoid(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = pos as f64 / rate;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    t
}

fn check_ids(ids: &[usize], vocab: usize, what: &'static str) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Contract(format!("{what} sequence is empty")));
    }
    match ids.iter().find(|&&i| i >= vocab) {
        Some(&i) => Err(Error::Index {
            op: what,
            index: i,
            size: vocab,
        }),
        None => Ok(()),
    }
}

impl ExpertNet {
    /// Registers all parameters in a fixed order.
    pub fn register(config: ExpertConfig, params: &mut ParamSet, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut b = Builder {
            params,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let src_emb = xavier_uniform(&mut b.rng, config.src_vocab_size, d);
        let src_emb = b.params.add("src_emb", src_emb);
        let tgt_emb = xavier_uniform(&mut b.rng, config.tgt_vocab_size, d);
        let tgt_emb = b.params.add("tgt_emb", tgt_emb);
        let encoder = (0..config.n_layers)
            .map(|l| EncoderBlock {
                attn: b.attention(&format!("enc.{l}.self"), d),
                ln_attn: b.norm(&format!("enc.{l}.ln_self"), d),
                ffn: b.ffn(&format!("enc.{l}.ffn"), d, config.d_ff),
                ln_ffn: b.norm(&format!("enc.{l}.ln_ffn"), d),
            })
            .collect();
        let forward = (0..config.n_layers)
            .map(|l| b.stream_block(&format!("fwd.{l}"), &config))
            .collect();
        let backward = (0..config.n_layers)
            .map(|l| b.stream_block(&format!("bwd.{l}"), &config))
            .collect();
        let out = b.linear("out", 2 * d, config.tgt_vocab_size, HEAD_INIT_SCALE);
        let gap = config
            .gap_head
            .then(|| b.linear("gap", 4 * d, config.tgt_vocab_size, HEAD_INIT_SCALE));
        Ok(Self {
            config,
            src_emb,
            tgt_emb,
            encoder,
            forward,
            backward,
            out,
            gap,
        })
    }

    pub fn config(&self) -> &ExpertConfig {
        &self.config
    }

    pub fn target_embeddings(&self) -> ParamId {
        self.tgt_emb
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    fn norm(&self, tape: &mut Tape<'_>, x: Var, n: Norm) -> Result<Var> {
        let g = tape.param(n.gain);
        let b = tape.param(n.bias);
        tape.layer_norm(x, g, b)
    }

    fn attend(&self, tape: &mut Tape<'_>, x: Var, mem: Var, a: Attention, mask: AttnMask) -> Result<Var> {
        let q = self.linear(tape, x, a.q)?;
        let k = self.linear(tape, mem, a.k)?;
        let v = self.linear(tape, mem, a.v)?;
        let h = tape.attention(q, k, v, self.config.n_heads, mask)?;
        self.linear(tape, h, a.o)
    }

    fn feed_forward(&self, tape: &mut Tape<'_>, x: Var, f: FeedForward) -> Result<Var> {
        let h = self.linear(tape, x, f.inner)?;
        let h = tape.relu(h);
        self.linear(tape, h, f.outer)
    }

    /// `LN(x + sublayer(x))`.
    fn residual(&self, tape: &mut Tape<'_>, x: Var, y: Var, n: Norm) -> Result<Var> {
        let s = tape.add(x, y)?;
        self.norm(tape, s, n)
    }

    fn embed(&self, tape: &mut Tape<'_>, table: ParamId, ids: &[usize]) -> Result<Var> {
        let d = self.config.d_model;
        let t = tape.param(table);
        let e = tape.gather(t, ids)?;
        let e = tape.scale(e, (d as f64).sqrt());
        let pe = tape.constant(sinusoid(ids.len(), d));
        tape.add(e, pe)
    }

    fn truncate<'a>(&self, ids: &'a [usize], what: &str) -> &'a [usize] {
        if ids.len() > self.config.max_len {
            log::warn!("{what} of length {} truncated to {}", ids.len(), self.config.max_len);
            &ids[..self.config.max_len]
        } else {
            ids
        }
    }

    /// Source memory `[|s| x d_model]`.
    pub fn encode_source(&self, tape: &mut Tape<'_>, src: &[usize]) -> Result<Var> {
        let src = self.truncate(src, "source");
        check_ids(src, self.config.src_vocab_size, "source")?;
        let mut x = self.embed(tape, self.src_emb, src)?;
        for blk in &self.encoder {
            let a = self.attend(tape, x, x, blk.attn, AttnMask::Full)?;
            x = self.residual(tape, x, a, blk.ln_attn)?;
            let f = self.feed_forward(tape, x, blk.ffn)?;
            x = self.residual(tape, x, f, blk.ln_ffn)?;
        }
        Ok(x)
    }

    fn stream(&self, tape: &mut Tape<'_>, inputs: &[usize], mem: Var, blocks: &[StreamBlock], mask: AttnMask) -> Result<Var> {
        let mut x = self.embed(tape, self.tgt_emb, inputs)?;
        for blk in blocks {
            let a = self.attend(tape, x, x, blk.attn, mask.clone())?;
            x = self.residual(tape, x, a, blk.ln_attn)?;
            let c = self.attend(tape, x, mem, blk.cross, AttnMask::Full)?;
            x = self.residual(tape, x, c, blk.ln_cross)?;
            let f = self.feed_forward(tape, x, blk.ffn)?;
            x = self.residual(tape, x, f, blk.ln_ffn)?;
        }
        Ok(x)
    }

    /// Full forward pass. With `noise`, latents are `mu + sigma * eta`.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        src: &[usize],
        tgt: &[usize],
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<ExpertVars> {
        let tgt = self.truncate(tgt, "target");
        check_ids(tgt, self.config.tgt_vocab_size, "target")?;
        let memory = self.encode_source(tape, src)?;
        let n = tgt.len();

        let mut fwd_in = Vec::with_capacity(n);
        fwd_in.push(BOS);
        fwd_in.extend_from_slice(&tgt[..n - 1]);
        let mut bwd_in = tgt[1..].to_vec();
        bwd_in.push(EOS);

        let mu_fwd = self.stream(tape, &fwd_in, memory, &self.forward, AttnMask::Causal)?;
        let mu_bwd = self.stream(tape, &bwd_in, memory, &self.backward, AttnMask::AntiCausal)?;

        let (z_fwd, z_bwd) = match noise {
            Some(rng) if self.config.sigma > 0.0 => {
                let mut draw = |tape: &mut Tape<'_>| {
                    let d = self.config.d_model;
                    let data = (0..n * d)
                        .map(|_| self.config.sigma * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>();
                    tape.constant(Tensor::new(vec![n, d], data).expect("noise shape"))
                };
                let ef = draw(tape);
                let eb = draw(tape);
                (tape.add(mu_fwd, ef)?, tape.add(mu_bwd, eb)?)
            }
            _ => (mu_fwd, mu_bwd),
        };

        let z = tape.concat_cols(&[z_fwd, z_bwd])?;
        let logits = self.linear(tape, z, self.out)?;
        let gap_logits = match self.gap {
            Some(head) => {
                let zero = tape.constant(Tensor::zeros(&[1, 2 * self.config.d_model]));
                let left = tape.concat_rows(&[zero, z])?;
                let right = tape.concat_rows(&[z, zero])?;
                let pairs = tape.concat_cols(&[left, right])?;
                Some(self.linear(tape, pairs, head)?)
            }
            None => None,
        };
        Ok(ExpertVars {
            memory,
            mu_fwd,
            mu_bwd,
            z_fwd,
            z_bwd,
            logits,
            gap_logits,
        })
    }

    /// Token logits from precomputed latents, `affine([z_fwd; z_bwd])`.
    pub fn reconstruct(&self, tape: &mut Tape<'_>, z_fwd: Var, z_bwd: Var) -> Result<Var> {
        let z = tape.concat_cols(&[z_fwd, z_bwd])?;
        self.linear(tape, z, self.out)
    }

    /// Scalar training objective for one pair: mean token NLL, plus the
    /// latent penalty `kl_weight * 0.5 * mean ||mu||^2` over all `2T` latent
    /// vectors, plus mean gap NLL when `gap_targets` is given.
    /// Returns the loss and the token NLL.
    pub fn loss(
        &self,
        tape: &mut Tape<'_>,
        src: &[usize],
        tgt: &[usize],
        gap_targets: Option<&[usize]>,
        noise: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, Var)> {
        let tgt = self.truncate(tgt, "target");
        let v = self.forward(tape, src, tgt, noise)?;
        let nll = tape.cross_entropy(v.logits, tgt)?;
        let mut loss = nll;
        if self.config.kl_weight > 0.0 {
            let mu = tape.concat_rows(&[v.mu_fwd, v.mu_bwd])?;
            let sq = tape.mul(mu, mu)?;
            let s = tape.sum(sq);
            let penalty = tape.scale(s, self.config.kl_weight * 0.5 / (2 * tgt.len()) as f64);
            loss = tape.add(loss, penalty)?;
        }
        if let Some(g) = gap_targets {
            let logits = v
                .gap_logits
                .ok_or_else(|| Error::Config("gap targets given but the model has no gap head".into()))?;
            if g.len() != tgt.len() + 1 {
                return Err(Error::Shape {
                    op: "gap targets",
                    left: vec![tgt.len() + 1],
                    right: vec![g.len()],
                });
            }
            let gap_nll = tape.cross_entropy(logits, g)?;
            loss = tape.add(loss, gap_nll)?;
        }
        Ok((loss, nll))
    }
}

/// Expert parameters together with their architecture.
#[derive(Clone, Debug)]
pub struct ExpertModel {
    net: ExpertNet,
    params: ParamSet,
}

impl ExpertModel {
    pub fn new(config: ExpertConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let net = ExpertNet::register(config, &mut params, seed)?;
        Ok(Self { net, params })
    }

    /// Rebuilds a model from named tensors, checking names and shapes.
    pub fn from_named(config: ExpertConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut m = Self::new(config, 0)?;
        m.params.load_from(named)?;
        Ok(m)
    }

    pub fn config(&self) -> &ExpertConfig {
        self.net.config()
    }

    pub fn net(&self) -> &ExpertNet {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parts_mut(&mut self) -> (&ExpertNet, &mut ParamSet) {
        (&self.net, &mut self.params)
    }

    pub fn encode_source(&self, src: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let m = self.net.encode_source(&mut tape, src)?;
        Ok(tape.value(m).clone())
    }

    pub fn latent_states(&self, src: &[usize], tgt: &[usize], noise: Option<&mut ChaCha8Rng>) -> Result<LatentStates> {
        let mut tape = Tape::new(&self.params);
        let v = self.net.forward(&mut tape, src, tgt, noise)?;
        Ok(LatentStates {
            z_fwd: tape.value(v.z_fwd).clone(),
            z_bwd: tape.value(v.z_bwd).clone(),
            mu_fwd: tape.value(v.mu_fwd).clone(),
            mu_bwd: tape.value(v.mu_bwd).clone(),
        })
    }

    pub fn reconstruct_logits(&self, latent: &LatentStates) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let f = tape.constant(latent.z_fwd.clone());
        let b = tape.constant(latent.z_bwd.clone());
        let l = self.net.reconstruct(&mut tape, f, b)?;
        Ok(tape.value(l).clone())
    }

    /// Latent means and token logits with noise off.
    pub fn infer(&self, src: &[usize], tgt: &[usize]) -> Result<(LatentStates, Tensor)> {
        let mut tape = Tape::new(&self.params);
        let v = self.net.forward(&mut tape, src, tgt, None)?;
        let latent = LatentStates {
            z_fwd: tape.value(v.z_fwd).clone(),
            z_bwd: tape.value(v.z_bwd).clone(),
            mu_fwd: tape.value(v.mu_fwd).clone(),
            mu_bwd: tape.value(v.mu_bwd).clone(),
        };
        Ok((latent, tape.value(v.logits).clone()))
    }

    pub fn logits(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        Ok(self.infer(src, tgt)?.1)
    }

    pub fn gap_logits(&self, src: &[usize], tgt: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.params);
        let v = self.net.forward(&mut tape, src, tgt, None)?;
        let g = v
            .gap_logits
            .ok_or_else(|| Error::Config("model has no gap head".into()))?;
        Ok(tape.value(g).clone())
    }

    /// Sum over positions of `log p(t_k | s, t_{<k}, t_{>k})`, noise off.
    pub fn log_likelihood(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let v = self.net.forward(&mut tape, src, tgt, None)?;
        let nll = tape.cross_entropy(v.logits, tgt)?;
        Ok(-tape.value(nll).item() * tgt.len() as f64)
    }

    /// Mean per-pair objective with noise off.
    pub fn loss(&self, pairs: &[(Vec<usize>, Vec<usize>)]) -> Result<f64> {
        let mut total = 0.0;
        for (s, t) in pairs {
            let mut tape = Tape::new(&self.params);
            let (loss, _) = self.net.loss(&mut tape, s, t, None, None)?;
            total += tape.value(loss).item();
        }
        Ok(total / pairs.len().max(1) as f64)
    }

    /// Row `id` of the target embedding table.
    pub fn target_embedding(&self, id: usize) -> &[f64] {
        self.params.value(self.net.tgt_emb).row(id)
    }
}
