use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{FeatureSet, Prediction, QeConfig, QeTargets};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::features::{FeatureSequence, MISMATCH_WIDTH};
use crate::numerics::{xavier_uniform, Adam, AdamConfig, Gradients, ParamId, ParamSet, Tape, Tensor, Var};

pub const QE_MAGIC: &[u8; 5] = b"QEBL1";

/// Probabilities are kept this far away from 0 and 1.
const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
}

/// Bi-LSTM with sentence, word and gap heads.
#[derive(Clone, Debug)]
pub struct QeNet {
    hidden: usize,
    input_width: usize,
    fwd: Lstm,
    bwd: Lstm,
    sent: Linear,
    word: Linear,
    gap: Linear,
}

/// Tape handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct QeVars {
    /// `[T x H]` each, in time order.
    pub h_fwd: Var,
    pub h_bwd: Var,
    /// `[1 x 1]`, after the sigmoid.
    pub hter: Var,
    /// `[T x 2]`, class 1 = BAD.
    pub word_logits: Var,
    /// `[(T+1) x 2]`.
    pub gap_logits: Var,
}

impl QeNet {
    pub fn register(params: &mut ParamSet, input_width: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm = |params: &mut ParamSet, name: &str, rng: &mut ChaCha8Rng| {
            let mut b = Tensor::zeros(&[4 * hidden]);
            // Gate order is input, forget, candidate, output.
            b.data_mut()[hidden..2 * hidden].fill(1.0);
            Lstm {
                wx: params.add(format!("{name}.wx"), xavier_uniform(rng, input_width, 4 * hidden)),
                wh: params.add(format!("{name}.wh"), xavier_uniform(rng, hidden, 4 * hidden)),
                b: params.add(format!("{name}.b"), b),
            }
        };
        let fwd = lstm(params, "lstm_fwd", &mut rng);
        let bwd = lstm(params, "lstm_bwd", &mut rng);
        let mut linear = |params: &mut ParamSet, name: &str, i: usize, o: usize| Linear {
            w: params.add(format!("{name}.w"), xavier_uniform(&mut rng, i, o)),
            b: params.add(format!("{name}.b"), Tensor::zeros(&[o])),
        };
        let sent = linear(params, "sent", 2 * hidden, 1);
        let word = linear(params, "word", 2 * hidden, 2);
        let gap = linear(params, "gap", 4 * hidden, 2);
        Self {
            hidden,
            input_width,
            fwd,
            bwd,
            sent,
            word,
            gap,
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_width(&self) -> usize {
        self.input_width
    }

    fn linear(&self, tape: &mut Tape<'_>, x: Var, l: Linear) -> Result<Var> {
        let w = tape.param(l.w);
        let b = tape.param(l.b);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    /// One direction; returns states in time order.
    fn run(&self, tape: &mut Tape<'_>, x: Var, cell: Lstm, reverse: bool) -> Result<Var> {
        let h = self.hidden;
        let t_len = tape.value(x).rows();
        let wx = tape.param(cell.wx);
        let wh = tape.param(cell.wh);
        let b = tape.param(cell.b);
        let xw = tape.matmul(x, wx)?;
        let xw = tape.add_row(xw, b)?;
        let mut states = Vec::with_capacity(t_len);
        let mut prev: Option<(Var, Var)> = None;
        for step in 0..t_len {
            let t = if reverse { t_len - 1 - step } else { step };
            let mut gates = tape.slice_rows(xw, t, 1)?;
            if let Some((h_prev, _)) = prev {
                let rec = tape.matmul(h_prev, wh)?;
                gates = tape.add(gates, rec)?;
            }
            let i = tape.slice_cols(gates, 0, h)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h, h)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let mut c = tape.mul(i, g)?;
            if let Some((_, c_prev)) = prev {
                let keep = tape.mul(f, c_prev)?;
                c = tape.add(c, keep)?;
            }
            let tc = tape.tanh(c);
            let h_t = tape.mul(o, tc)?;
            states.push(h_t);
            prev = Some((h_t, c));
        }
        if reverse {
            states.reverse();
        }
        tape.concat_rows(&states)
    }

    /// `x` is the standardized `[T x input_width]` feature matrix.
    pub fn forward(&self, tape: &mut Tape<'_>, x: &Tensor) -> Result<QeVars> {
        if x.cols() != self.input_width {
            return Err(Error::Shape {
                op: "qe input",
                left: vec![x.rows(), self.input_width],
                right: x.shape().to_vec(),
            });
        }
        let t_len = x.rows();
        let xv = tape.constant(x.clone());
        let h_fwd = self.run(tape, xv, self.fwd, false)?;
        let h_bwd = self.run(tape, xv, self.bwd, true)?;

        let last_fwd = tape.slice_rows(h_fwd, t_len - 1, 1)?;
        let last_bwd = tape.slice_rows(h_bwd, 0, 1)?;
        let summary = tape.concat_cols(&[last_fwd, last_bwd])?;
        let s = self.linear(tape, summary, self.sent)?;
        let hter = tape.sigmoid(s);

        let both = tape.concat_cols(&[h_fwd, h_bwd])?;
        let word_logits = self.linear(tape, both, self.word)?;

        let zero = tape.constant(Tensor::zeros(&[1, 2 * self.hidden]));
        let left = tape.concat_rows(&[zero, both])?;
        let right = tape.concat_rows(&[both, zero])?;
        let pairs = tape.concat_cols(&[left, right])?;
        let gap_logits = self.linear(tape, pairs, self.gap)?;
        Ok(QeVars {
            h_fwd,
            h_bwd,
            hter,
            word_logits,
            gap_logits,
        })
    }

    /// Weighted multi-task loss: squared HTER error, mean word
    /// cross-entropy and mean gap cross-entropy.
    pub fn loss(&self, tape: &mut Tape<'_>, x: &Tensor, targets: &QeTargets, weights: [f64; 3]) -> Result<Var> {
        let v = self.forward(tape, x)?;
        let mut terms = Vec::new();
        if let (Some(h), true) = (targets.hter, weights[0] > 0.0) {
            let target = tape.constant(Tensor::full(&[1, 1], h));
            let d = tape.sub(v.hter, target)?;
            let sq = tape.mul(d, d)?;
            let sq = tape.sum(sq);
            terms.push(tape.scale(sq, weights[0]));
        }
        if let (Some(w), true) = (&targets.word, weights[1] > 0.0) {
            let ids: Vec<usize> = w.iter().map(|t| t.class()).collect();
            let ce = tape.cross_entropy(v.word_logits, &ids)?;
            terms.push(tape.scale(ce, weights[1]));
        }
        if let (Some(g), true) = (&targets.gap, weights[2] > 0.0) {
            let ids: Vec<usize> = g.iter().map(|t| t.class()).collect();
            let ce = tape.cross_entropy(v.gap_logits, &ids)?;
            terms.push(tape.scale(ce, weights[2]));
        }
        let mut it = terms.into_iter();
        let first = it
            .next()
            .ok_or_else(|| Error::Config("no QE task has both a positive weight and labels".into()))?;
        it.try_fold(first, |acc, t| tape.add(acc, t))
    }
}

/// Per-column affine standardization fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&Tensor]) -> Self {
        let w = rows.first().map(|t| t.cols()).unwrap_or(0);
        let mut sum = vec![0.0; w];
        let mut n = 0usize;
        for t in rows {
            for r in 0..t.rows() {
                for (s, v) in sum.iter_mut().zip(t.row(r)) {
                    *s += v;
                }
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n.max(1) as f64).collect();
        let mut var = vec![0.0; w];
        for t in rows {
            for r in 0..t.rows() {
                for ((acc, v), m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                    *acc += (v - m) * (v - m);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n.max(1) as f64).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        let w = x.cols();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % w;
            *v = (*v - self.mean[c]) / self.std[c];
        }
        out
    }
}

/// A trained QE model: network, parameters, feature selection and
/// standardization.
#[derive(Clone, Debug)]
pub struct QeModel {
    config: QeConfig,
    /// Width of the full feature rows this model accepts.
    feature_width: usize,
    net: QeNet,
    params: ParamSet,
    norm: Standardizer,
}

fn select(x: &Tensor, set: FeatureSet) -> Result<Tensor> {
    let w = x.cols();
    if w <= MISMATCH_WIDTH {
        return Err(Error::Shape {
            op: "feature selection",
            left: vec![MISMATCH_WIDTH + 1],
            right: x.shape().to_vec(),
        });
    }
    let (start, len) = match set {
        FeatureSet::All => return Ok(x.clone()),
        FeatureSet::ModelDerived => (0, w - MISMATCH_WIDTH),
        FeatureSet::Mismatch => (w - MISMATCH_WIDTH, MISMATCH_WIDTH),
    };
    let mut data = Vec::with_capacity(x.rows() * len);
    for r in 0..x.rows() {
        data.extend_from_slice(&x.row(r)[start..start + len]);
    }
    Tensor::new(vec![x.rows(), len], data)
}

fn check_lengths(seq: &FeatureSequence, t: &QeTargets) -> Result<()> {
    let n = seq.len();
    let mismatch = |what: &str, got: usize, want: usize| Error::LengthMismatch {
        id: seq.id as usize,
        detail: format!("{got} {what} for {n} feature rows (expected {want})"),
    };
    if let Some(w) = &t.word {
        if w.len() != n {
            return Err(mismatch("word tags", w.len(), n));
        }
    }
    if let Some(g) = &t.gap {
        if g.len() != n + 1 {
            return Err(mismatch("gap tags", g.len(), n + 1));
        }
    }
    if n == 0 {
        return Err(mismatch("feature rows", 0, 1));
    }
    Ok(())
}

/// Per-epoch mean training loss.
#[derive(Clone, Debug, PartialEq)]
pub struct QeTrainReport {
    pub epoch_losses: Vec<f64>,
}

impl QeModel {
    pub fn new(config: QeConfig, feature_width: usize) -> Result<Self> {
        config.validate()?;
        let probe = Tensor::zeros(&[1, feature_width]);
        let input_width = select(&probe, config.features)?.cols();
        let mut params = ParamSet::new();
        let net = QeNet::register(&mut params, input_width, config.lstm_hidden, config.seed);
        Ok(Self {
            config,
            feature_width,
            net,
            params,
            norm: Standardizer {
                mean: vec![0.0; input_width],
                std: vec![1.0; input_width],
            },
        })
    }

    pub fn config(&self) -> &QeConfig {
        &self.config
    }

    pub fn feature_width(&self) -> usize {
        self.feature_width
    }

    pub fn net(&self) -> &QeNet {
        &self.net
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn parts_mut(&mut self) -> (&QeNet, &mut ParamSet) {
        (&self.net, &mut self.params)
    }

    pub fn standardizer(&self) -> &Standardizer {
        &self.norm
    }

    /// Selected and standardized network input.
    pub fn prepare(&self, features: &Tensor) -> Result<Tensor> {
        if features.cols() != self.feature_width {
            return Err(Error::Shape {
                op: "qe features",
                left: vec![features.rows(), self.feature_width],
                right: features.shape().to_vec(),
            });
        }
        Ok(self.norm.apply(&select(features, self.config.features)?))
    }

    pub fn predict(&self, features: &Tensor) -> Result<Prediction> {
        let x = self.prepare(features)?;
        let mut tape = Tape::new(&self.params);
        let v = self.net.forward(&mut tape, &x)?;
        let clamp = |p: f64| p.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let bad = |l: &Tensor| -> Vec<f64> {
            (0..l.rows())
                .map(|r| clamp(crate::numerics::sigmoid(l.get(r, 1) - l.get(r, 0))))
                .collect()
        };
        Ok(Prediction {
            hter: clamp(tape.value(v.hter).item()),
            word_bad: bad(tape.value(v.word_logits)),
            gap_bad: bad(tape.value(v.gap_logits)),
        })
    }

    /// Multi-task training with Adam and gradient clipping, deterministic
    /// per `config.seed`.
    pub fn train(&mut self, data: &[FeatureSequence], targets: &[QeTargets]) -> Result<QeTrainReport> {
        if data.len() != targets.len() {
            return Err(Error::Shape {
                op: "qe training data",
                left: vec![data.len()],
                right: vec![targets.len()],
            });
        }
        if data.is_empty() {
            return Err(Error::Config("QE training set is empty".into()));
        }
        for (s, t) in data.iter().zip(targets) {
            check_lengths(s, t)?;
        }
        let selected = data
            .iter()
            .map(|s| {
                if s.width() != self.feature_width {
                    return Err(Error::Shape {
                        op: "qe features",
                        left: vec![s.len(), self.feature_width],
                        right: s.features.shape().to_vec(),
                    });
                }
                select(&s.features, self.config.features)
            })
            .collect::<Result<Vec<_>>>()?;
        self.norm = Standardizer::fit(&selected.iter().collect::<Vec<_>>());
        let inputs: Vec<Tensor> = selected.iter().map(|x| self.norm.apply(x)).collect();
        let weights = [self.config.lambda_sent, self.config.lambda_word, self.config.lambda_gap];

        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
        let mut adam = Adam::new(AdamConfig {
            learning_rate: cfg.lr,
            ..AdamConfig::default()
        });
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut report = QeTrainReport { epoch_losses: Vec::new() };
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut sum, mut batches) = (0.0, 0);
            for chunk in order.chunks(cfg.batch_size) {
                let grads = self.batch_grads(chunk, &inputs, targets, weights)?;
                self.params.zero_grad();
                let scale = 1.0 / grads.len() as f64;
                let mut loss = 0.0;
                for (g, l) in &grads {
                    self.params.accumulate(g, scale);
                    loss += l * scale;
                }
                if !loss.is_finite() {
                    return Err(Error::Diverged {
                        step: epoch,
                        loss,
                    });
                }
                self.params.clip_grad_norm(cfg.clip_norm);
                adam.step(&mut self.params)?;
                sum += loss;
                batches += 1;
            }
            let mean = sum / batches as f64;
            log::debug!("qe epoch {} loss {:.4}", epoch + 1, mean);
            report.epoch_losses.push(mean);
        }
        Ok(report)
    }

    fn batch_grads(&self, idx: &[usize], inputs: &[Tensor], targets: &[QeTargets], weights: [f64; 3]) -> Result<Vec<(Gradients, f64)>> {
        let one = |i: usize| -> Result<(Gradients, f64)> {
            let mut tape = Tape::new(&self.params);
            let loss = self.net.loss(&mut tape, &inputs[i], &targets[i], weights)?;
            let v = tape.value(loss).item();
            Ok((tape.backward(loss)?, v))
        };
        let threads = self.config.threads;
        if threads <= 1 || idx.len() < 2 {
            return idx.iter().map(|&i| one(i)).collect();
        }
        let size = idx.len().div_ceil(threads);
        std::thread::scope(|s| {
            let handles: Vec<_> = idx
                .chunks(size)
                .map(|c| s.spawn(move || c.iter().map(|&i| one(i)).collect::<Result<Vec<_>>>()))
                .collect();
            let mut out = Vec::with_capacity(idx.len());
            for h in handles {
                out.extend(h.join().expect("qe worker panicked")?);
            }
            Ok(out)
        })
    }

    pub fn to_container(&self) -> Container {
        let mut meta = self.config.to_pairs();
        meta.push(("feature_width".into(), self.feature_width.to_string()));
        let mut tensors: Vec<(String, Tensor)> = self
            .params
            .named_values()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        tensors.push(("norm.mean".into(), Tensor::vector(self.norm.mean.clone())));
        tensors.push(("norm.std".into(), Tensor::vector(self.norm.std.clone())));
        Container {
            meta,
            lists: Vec::new(),
            tensors,
        }
    }

    pub fn from_container(mut c: Container) -> Result<Self> {
        const W: &str = "QE model";
        let config = QeConfig::from_container(&c)?;
        let width: usize = c.parse("feature_width", W)?;
        let mut m = Self::new(config, width)?;
        let mut take = |name: &str| -> Result<Vec<f64>> {
            let pos = c
                .tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::format(W, format!("missing tensor `{name}`")))?;
            Ok(c.tensors.remove(pos).1.into_data())
        };
        let mean = take("norm.mean")?;
        let std = take("norm.std")?;
        if mean.len() != m.net.input_width || std.len() != m.net.input_width {
            return Err(Error::format(W, "standardizer width does not match the network"));
        }
        m.norm = Standardizer { mean, std };
        m.params.load_from(c.tensors)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path, QE_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, QE_MAGIC, "QE model")?)
    }
}
