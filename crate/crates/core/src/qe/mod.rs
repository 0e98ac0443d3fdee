//! Bi-LSTM quality estimation over expert features: sentence HTER, word
//! tags and gap tags, with threshold tuning and ensembling.

mod model;

pub use model::{QeModel, QeNet, QeTrainReport, QeVars, Standardizer, QE_MAGIC};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::corpus::io::{write_hter, write_tags};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::metrics::f1_multi;
use crate::ter::{QeLabels, Tag};

/// Which feature columns the QE model reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FeatureSet {
    /// Model-derived and mismatch features.
    #[default]
    All,
    /// Latents and neighbour embeddings only.
    ModelDerived,
    /// The four mismatch features only.
    Mismatch,
}

impl fmt::Display for FeatureSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureSet::All => "all",
            FeatureSet::ModelDerived => "md",
            FeatureSet::Mismatch => "mm",
        })
    }
}

impl FromStr for FeatureSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(FeatureSet::All),
            "md" => Ok(FeatureSet::ModelDerived),
            "mm" => Ok(FeatureSet::Mismatch),
            _ => Err(Error::Config(format!("unknown feature set `{s}` (all, md, mm)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct QeConfig {
    pub lstm_hidden: usize,
    /// Bi-LSTM depth; only 1 is supported.
    pub layers: usize,
    pub lambda_sent: f64,
    pub lambda_word: f64,
    pub lambda_gap: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub features: FeatureSet,
    pub seed: u64,
    pub threads: usize,
}

impl Default for QeConfig {
    fn default() -> Self {
        Self {
            lstm_hidden: 128,
            layers: 1,
            lambda_sent: 1.0,
            lambda_word: 1.0,
            lambda_gap: 1.0,
            epochs: 20,
            batch_size: 16,
            lr: 1e-3,
            clip_norm: 5.0,
            features: FeatureSet::All,
            seed: 1,
            threads: 1,
        }
    }
}

impl QeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers != 1 {
            return Err(Error::Config(format!("layers = {}; only a single Bi-LSTM layer is supported", self.layers)));
        }
        let w = [self.lambda_sent, self.lambda_word, self.lambda_gap];
        if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().all(|x| *x == 0.0) {
            return Err(Error::Config("task weights must be non-negative and not all zero".into()));
        }
        if self.lstm_hidden == 0 || self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("lstm_hidden, batch_size and lr must be positive".into()));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("lstm_hidden", self.lstm_hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("lambda_sent", self.lambda_sent.to_string()),
            ("lambda_word", self.lambda_word.to_string()),
            ("lambda_gap", self.lambda_gap.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("clip_norm", self.clip_norm.to_string()),
            ("features", self.features.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub(crate) fn from_container(c: &crate::container::Container) -> Result<Self> {
        const W: &str = "QE model";
        Ok(Self {
            lstm_hidden: c.parse("lstm_hidden", W)?,
            layers: c.parse("layers", W)?,
            lambda_sent: c.parse("lambda_sent", W)?,
            lambda_word: c.parse("lambda_word", W)?,
            lambda_gap: c.parse("lambda_gap", W)?,
            epochs: c.parse("epochs", W)?,
            batch_size: c.parse("batch_size", W)?,
            lr: c.parse("lr", W)?,
            clip_norm: c.parse("clip_norm", W)?,
            features: c.parse::<String>("features", W)?.parse()?,
            seed: c.parse("seed", W)?,
            threads: 1,
        })
    }
}

/// Training labels for one sentence; absent tasks are skipped.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct QeTargets {
    pub hter: Option<f64>,
    pub word: Option<Vec<Tag>>,
    pub gap: Option<Vec<Tag>>,
}

impl From<&QeLabels> for QeTargets {
    fn from(l: &QeLabels) -> Self {
        Self {
            hter: Some(l.hter),
            word: Some(l.word_tags.clone()),
            gap: Some(l.gap_tags.clone()),
        }
    }
}

/// Model output for one sentence. All values lie strictly inside (0, 1).
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub hter: f64,
    pub word_bad: Vec<f64>,
    pub gap_bad: Vec<f64>,
}

/// BAD iff `prob >= theta`.
pub fn apply_threshold(probs: &[f64], theta: f64) -> Vec<Tag> {
    probs
        .iter()
        .map(|&p| if p >= theta { Tag::Bad } else { Tag::Ok })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecisionThreshold {
    pub word: f64,
    pub gap: f64,
}

impl Default for DecisionThreshold {
    fn default() -> Self {
        Self { word: 0.5, gap: 0.5 }
    }
}

/// Grid points `0.01, 0.02, ..., 0.99`.
pub fn threshold_grid() -> impl Iterator<Item = f64> {
    (1..=99).map(|i| i as f64 / 100.0)
}

/// Grid threshold maximising F1-Multi on development data, ties going to
/// the lower threshold. Falls back to 0.5 when the gold tags hold a single
/// class.
pub fn tune_threshold(probs: &[Vec<f64>], truth: &[Vec<Tag>]) -> Result<f64> {
    let flat_p: Vec<f64> = probs.concat();
    let flat_t: Vec<Tag> = truth.concat();
    if flat_p.len() != flat_t.len() || probs.len() != truth.len() {
        return Err(Error::Shape {
            op: "tune_threshold",
            left: vec![flat_p.len()],
            right: vec![flat_t.len()],
        });
    }
    let bad = flat_t.iter().filter(|t| t.is_bad()).count();
    if bad == 0 || bad == flat_t.len() {
        log::warn!("development tags hold a single class; using threshold 0.5");
        return Ok(0.5);
    }
    let mut best = (f64::NEG_INFINITY, 0.5);
    for theta in threshold_grid() {
        let score = f1_multi(&apply_threshold(&flat_p, theta), &flat_t)?.f1_multi;
        if score > best.0 {
            best = (score, theta);
        }
    }
    Ok(best.1)
}

/// Averages member predictions.
#[derive(Clone, Debug)]
pub struct Ensemble {
    members: Vec<QeModel>,
}

impl Ensemble {
    pub fn new(members: Vec<QeModel>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("an ensemble needs at least one model".into()))?;
        let w = first.feature_width();
        if let Some(m) = members.iter().find(|m| m.feature_width() != w) {
            return Err(Error::Shape {
                op: "ensemble",
                left: vec![w],
                right: vec![m.feature_width()],
            });
        }
        Ok(Self { members })
    }

    pub fn members(&self) -> &[QeModel] {
        &self.members
    }

    pub fn predict(&self, features: &FeatureSequence) -> Result<Prediction> {
        let preds = self
            .members
            .iter()
            .map(|m| m.predict(&features.features))
            .collect::<Result<Vec<_>>>()?;
        let n = preds.len() as f64;
        let mean = |get: &dyn Fn(&Prediction) -> &[f64]| -> Vec<f64> {
            let mut acc = vec![0.0; get(&preds[0]).len()];
            for p in &preds {
                for (a, v) in acc.iter_mut().zip(get(p)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / n).collect()
        };
        Ok(Prediction {
            hter: preds.iter().map(|p| p.hter).sum::<f64>() / n,
            word_bad: mean(&|p| &p.word_bad),
            gap_bad: mean(&|p| &p.gap_bad),
        })
    }

    pub fn predict_all(&self, data: &[FeatureSequence]) -> Result<Vec<Prediction>> {
        data.iter().map(|f| self.predict(f)).collect()
    }
}

/// Writes `<stem>.hter`, `<stem>.tags` and `<stem>.gap_tags` under `dir`.
pub fn write_predictions(dir: &Path, stem: &str, preds: &[Prediction], theta: DecisionThreshold) -> Result<()> {
    let hter: Vec<f64> = preds.iter().map(|p| p.hter).collect();
    let word: Vec<Vec<Tag>> = preds.iter().map(|p| apply_threshold(&p.word_bad, theta.word)).collect();
    let gap: Vec<Vec<Tag>> = preds.iter().map(|p| apply_threshold(&p.gap_bad, theta.gap)).collect();
    write_hter(&dir.join(format!("{stem}.hter")), &hter)?;
    write_tags(&dir.join(format!("{stem}.tags")), &word)?;
    write_tags(&dir.join(format!("{stem}.gap_tags")), &gap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_check, Tape, Tensor, FD_STEP};
    use proptest::prelude::*;

    fn small(hidden: usize) -> QeConfig {
        QeConfig {
            lstm_hidden: hidden,
            epochs: 3,
            batch_size: 2,
            ..QeConfig::default()
        }
    }

    fn seq(id: u64, t: usize, w: usize) -> FeatureSequence {
        let data = (0..t * w).map(|i| ((i * 7 + id as usize) % 11) as f64 / 5.0 - 1.0).collect();
        FeatureSequence {
            id,
            features: Tensor::new(vec![t, w], data).unwrap(),
        }
    }

    #[test]
    fn output_shapes_and_ranges() {
        let m = QeModel::new(small(4), 9).unwrap();
        let p = m.predict(&seq(0, 3, 9).features).unwrap();
        assert_eq!(p.word_bad.len(), 3);
        assert_eq!(p.gap_bad.len(), 4);
        assert!(p.word_bad.iter().chain(&p.gap_bad).chain([&p.hter]).all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_sentence_weights_predict_half() {
        let mut m = QeModel::new(small(4), 9).unwrap();
        let (_, params) = m.parts_mut();
        for name in ["sent.w", "sent.b"] {
            let id = params.find(name).unwrap();
            params.value_mut(id).data_mut().fill(0.0);
        }
        assert_eq!(m.predict(&seq(0, 2, 9).features).unwrap().hter, 0.5);
    }

    #[test]
    fn recurrence_boundaries() {
        let m = QeModel::new(small(3), 6).unwrap();
        let a = seq(0, 4, 6).features;
        let mut b = a.clone();
        // Change every token but the first: h_fwd_1 must not move.
        for v in &mut b.data_mut()[6..] {
            *v += 0.3;
        }
        let x = |t: &Tensor| m.prepare(t).unwrap();
        let mut tape = Tape::new(m.params());
        let va = m.net().forward(&mut tape, &x(&a)).unwrap();
        let vb = m.net().forward(&mut tape, &x(&b)).unwrap();
        assert_eq!(tape.value(va.h_fwd).row(0), tape.value(vb.h_fwd).row(0));
        assert_ne!(tape.value(va.h_bwd).row(3), tape.value(vb.h_bwd).row(3));
        assert_eq!(tape.value(va.h_fwd).shape(), &[4, 3]);
    }

    #[test]
    fn full_gradient_check() {
        let mut m = QeModel::new(small(3), 7).unwrap();
        let x = seq(1, 4, 7).features;
        let targets = QeTargets {
            hter: Some(0.4),
            word: Some(vec![Tag::Ok, Tag::Bad, Tag::Ok, Tag::Bad]),
            gap: Some(vec![Tag::Ok, Tag::Ok, Tag::Bad, Tag::Ok, Tag::Ok]),
        };
        let (net, params) = m.parts_mut();
        let net = net.clone();
        let err = finite_difference_check(params, |tape| net.loss(tape, &x, &targets, [1.0, 0.7, 0.3]), FD_STEP).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let data: Vec<_> = (0..12).map(|i| seq(i, 2 + (i as usize % 4), 6)).collect();
        let targets: Vec<_> = data
            .iter()
            .map(|s| QeTargets {
                hter: Some(s.features.get(0, 0).abs().min(1.0)),
                word: Some((0..s.len()).map(|r| if s.features.get(r, 1) > 0.0 { Tag::Bad } else { Tag::Ok }).collect()),
                gap: Some(vec![Tag::Ok; s.len() + 1]),
            })
            .collect();
        let cfg = QeConfig {
            epochs: 30,
            lr: 1e-2,
            ..small(8)
        };
        let mut a = QeModel::new(cfg.clone(), 6).unwrap();
        let ra = a.train(&data, &targets).unwrap();
        assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0]);
        let mut b = QeModel::new(cfg, 6).unwrap();
        let rb = b.train(&data, &targets).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn sentence_only_training_runs() {
        let data: Vec<_> = (0..4).map(|i| seq(i, 3, 6)).collect();
        let targets: Vec<_> = (0..4)
            .map(|i| QeTargets {
                hter: Some(i as f64 / 4.0),
                ..Default::default()
            })
            .collect();
        let cfg = QeConfig {
            lambda_word: 0.0,
            lambda_gap: 0.0,
            ..small(4)
        };
        QeModel::new(cfg, 6).unwrap().train(&data, &targets).unwrap();
    }

    #[test]
    fn length_mismatch_names_sentence() {
        let data = vec![seq(42, 3, 6)];
        let targets = vec![QeTargets {
            word: Some(vec![Tag::Ok; 2]),
            ..Default::default()
        }];
        match QeModel::new(small(4), 6).unwrap().train(&data, &targets) {
            Err(Error::LengthMismatch { id, .. }) => assert_eq!(id, 42),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn file_round_trip() {
        let mut cfg = small(4);
        cfg.features = FeatureSet::Mismatch;
        let mut m = QeModel::new(cfg, 10).unwrap();
        let data = vec![seq(0, 3, 10), seq(1, 2, 10)];
        let t: Vec<_> = data.iter().map(|s| QeTargets { hter: Some(0.2), word: Some(vec![Tag::Ok; s.len()]), gap: None }).collect();
        m.train(&data, &t).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.qebl");
        m.save(&p).unwrap();
        let back = QeModel::load(&p).unwrap();
        assert_eq!(back.predict(&data[0].features).unwrap(), m.predict(&data[0].features).unwrap());
        assert_eq!(back.config().features, FeatureSet::Mismatch);
    }

    #[test]
    fn threshold_extremes() {
        let p = [0.2, 0.7, 0.999];
        assert!(apply_threshold(&p, 1.0).iter().all(|t| !t.is_bad()));
        assert!(apply_threshold(&p, 0.0).iter().all(|t| t.is_bad()));
    }

    #[test]
    fn separated_probs_pick_lowest_separating_point() {
        let probs = vec![vec![0.1, 0.2, 0.63, 0.9]];
        let truth = vec![vec![Tag::Ok, Tag::Ok, Tag::Bad, Tag::Bad]];
        assert_eq!(tune_threshold(&probs, &truth).unwrap(), 0.21);
        let one = vec![vec![Tag::Ok; 4]];
        assert_eq!(tune_threshold(&probs, &one).unwrap(), 0.5);
    }

    #[test]
    fn ensemble_identity_and_average() {
        let m = QeModel::new(small(4), 6).unwrap();
        let s = seq(0, 3, 6);
        let single = Ensemble::new(vec![m.clone()]).unwrap();
        assert_eq!(single.predict(&s).unwrap(), m.predict(&s.features).unwrap());
        let twice = Ensemble::new(vec![m.clone(), m.clone()]).unwrap();
        assert_eq!(twice.predict(&s).unwrap(), m.predict(&s.features).unwrap());
        let other = QeModel::new(small(4), 7).unwrap();
        assert!(Ensemble::new(vec![m, other]).is_err());
        assert!(Ensemble::new(vec![]).is_err());
    }

    proptest! {
        #[test]
        fn tuned_threshold_is_grid_argmax(
            rows in prop::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)
        ) {
            let probs = vec![rows.iter().map(|r| r.0).collect::<Vec<_>>()];
            let truth = vec![rows.iter().map(|r| if r.1 { Tag::Bad } else { Tag::Ok }).collect::<Vec<_>>()];
            let theta = tune_threshold(&probs, &truth).unwrap();
            let score = |t: f64| f1_multi(&apply_threshold(&probs[0], t), &truth[0]).unwrap().f1_multi;
            let classes = truth[0].iter().filter(|t| t.is_bad()).count();
            if classes > 0 && classes < truth[0].len() {
                let best = threshold_grid().map(score).fold(f64::MIN, f64::max);
                prop_assert_eq!(score(theta), best);
                prop_assert!(score(theta) >= score(0.5));
                for t in threshold_grid().take_while(|&t| t < theta) {
                    prop_assert!(score(t) < best);
                }
            }
        }

        #[test]
        fn raising_threshold_never_adds_bad(p in prop::collection::vec(0.0f64..1.0, 1..20), a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let count = |t| apply_threshold(&p, t).iter().filter(|x| x.is_bad()).count();
            prop_assert!(count(hi) <= count(lo));
        }
    }
}
