//! End-to-end orchestration: synthesis, corpus combination, expert
//! pretraining, feature extraction, QE training, prediction and evaluation.
//!
//! Every stage writes its artifacts under the run's output directory and a
//! stamp recording a content key plus the hash of each artifact. A stage
//! whose stamp matches is reused instead of recomputed.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

pub use config::{RunConfig, Tasks, Tokenization};

use crate::corpus::io::{read_hter, read_sentences, read_tags, write_hter, write_sentences, write_tags};
use crate::corpus::{
    apply_bpe, combine_training_corpus, filter_pair, generate_synthetic_task, learn_bpe, BpeMerges, ParallelPair,
    Vocab,
};
use crate::error::{Error, Result};
use crate::expert::{train_expert, ExpertCheckpoint, ExpertConfig, ExpertExample, ExpertModel, TrainMeta};
use crate::features::{extract_features, read_features, write_features, FeatureSequence};
use crate::metrics::{MetricReport, SentenceScores, TagScores};
use crate::qe::{tune_threshold, write_predictions, DecisionThreshold, Ensemble, QeModel, QeTargets};
use crate::ter::{self, Tag};

pub const SPLITS: [&str; 3] = ["train", "dev", "test"];

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn key_of(parts: &[String]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn pairs_key(pairs: &[(String, String)]) -> String {
    pairs.iter().map(|(k, v)| format!("{k}={v};")).collect()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(p) = path.parent() {
        ensure_dir(p)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn stage_err(stage: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage,
            source: Box::new(e),
        },
    }
}

/// Summary of a `synth` run.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSummary {
    pub parallel: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Generates a synthetic task and writes `parallel.{src,tgt}` plus
/// `{train,dev,test}.{src,mt,pe,hter,tags,gap_tags}` into the data directory.
pub fn cmd_synth(cfg: &RunConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    let synth = cfg.synth_config();
    if synth.n_triplets <= cfg.n_train + cfg.n_dev {
        return Err(Error::Config(format!(
            "synth.n_triplets = {} leaves no test data after {} train and {} dev",
            synth.n_triplets, cfg.n_train, cfg.n_dev
        )));
    }
    let task = generate_synthetic_task(&synth)?;
    let dir = cfg.data_dir();
    ensure_dir(&dir)?;
    let src: Vec<_> = task.parallel.iter().map(|p| p.src.clone()).collect();
    let tgt: Vec<_> = task.parallel.iter().map(|p| p.tgt.clone()).collect();
    write_sentences(&dir.join("parallel.src"), &src)?;
    write_sentences(&dir.join("parallel.tgt"), &tgt)?;
    let bounds = [0, cfg.n_train, cfg.n_train + cfg.n_dev, task.triplets.len()];
    for (i, split) in SPLITS.iter().enumerate() {
        let part = &task.triplets[bounds[i]..bounds[i + 1]];
        let stem = dir.join(split);
        let col = |f: &dyn Fn(&crate::corpus::TripletExample) -> Vec<String>| part.iter().map(f).collect::<Vec<_>>();
        write_sentences(&stem.with_extension("src"), &col(&|t| t.src.clone()))?;
        write_sentences(&stem.with_extension("mt"), &col(&|t| t.mt.clone()))?;
        write_sentences(&stem.with_extension("pe"), &col(&|t| t.pe.clone()))?;
        write_labels(&stem, &part.iter().map(|t| t.labels.clone()).collect::<Vec<_>>())?;
    }
    Ok(SynthSummary {
        parallel: task.parallel.len(),
        train: cfg.n_train,
        dev: cfg.n_dev,
        test: task.triplets.len() - cfg.n_train - cfg.n_dev,
    })
}

fn write_labels(stem: &Path, labels: &[ter::QeLabels]) -> Result<()> {
    write_hter(&stem.with_extension("hter"), &labels.iter().map(|l| l.hter).collect::<Vec<_>>())?;
    write_tags(&stem.with_extension("tags"), &labels.iter().map(|l| l.word_tags.clone()).collect::<Vec<_>>())?;
    write_tags(&stem.with_extension("gap_tags"), &labels.iter().map(|l| l.gap_tags.clone()).collect::<Vec<_>>())
}

/// Derives `<stem>.hter`, `<stem>.tags` and `<stem>.gap_tags` from MT and
/// post-edit files. Returns the number of sentences.
pub fn cmd_label(mt: &Path, pe: &Path, out_stem: &Path) -> Result<usize> {
    let mt_s = read_sentences(mt)?;
    let pe_s = read_sentences(pe)?;
    if mt_s.len() != pe_s.len() {
        return Err(Error::Config(format!(
            "{} has {} lines but {} has {}",
            mt.display(),
            mt_s.len(),
            pe.display(),
            pe_s.len()
        )));
    }
    let labels = mt_s
        .iter()
        .zip(&pe_s)
        .enumerate()
        .map(|(i, (m, p))| {
            ter::label(m, p).map_err(|e| Error::LengthMismatch { id: i, detail: e.to_string() })
        })
        .collect::<Result<Vec<_>>>()?;
    write_labels(out_stem, &labels)?;
    Ok(labels.len())
}

/// Scores prediction files `<pred>.{hter,tags,gap_tags}` against gold files
/// with the same extensions. Only enabled levels are read.
pub fn cmd_eval(pred: &Path, gold: &Path, tasks: Tasks) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    if tasks.sentence {
        let p = read_hter(&pred.with_extension("hter"))?;
        let g = read_hter(&gold.with_extension("hter"))?;
        report.sentence = Some(SentenceScores::compute(&p, &g)?);
    }
    let tags = |ext: &str| -> Result<Option<TagScores>> {
        let p = read_tags(&pred.with_extension(ext))?;
        let g = read_tags(&gold.with_extension(ext))?;
        TagScores::compute(&p, &g).map(Some)
    };
    if tasks.word {
        report.word = tags("tags")?;
    }
    if tasks.gap {
        report.gap = tags("gap_tags")?;
    }
    Ok(report)
}

pub fn write_thresholds(path: &Path, t: DecisionThreshold) -> Result<()> {
    write_text(path, &format!("word={}\ngap={}\n", t.word, t.gap))
}

pub fn read_thresholds(path: &Path) -> Result<DecisionThreshold> {
    let mut t = DecisionThreshold::default();
    for line in read_text(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("threshold file", format!("line `{line}` lacks `=`")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::format("threshold file", format!("bad value in `{line}`")))?;
        match k.trim() {
            "word" => t.word = v,
            "gap" => t.gap = v,
            other => return Err(Error::format("threshold file", format!("unknown key `{other}`"))),
        }
    }
    Ok(t)
}

/// Inputs for reference-free prediction.
#[derive(Clone, Debug, Default)]
pub struct PredictRequest {
    pub expert: PathBuf,
    pub qe_models: Vec<PathBuf>,
    /// Tuned decision thresholds; 0.5 when absent.
    pub thresholds: Option<PathBuf>,
    pub src: PathBuf,
    pub mt: PathBuf,
    pub out_dir: PathBuf,
    pub stem: String,
    pub threads: usize,
    /// Always refused. Present so callers that pass post-edits get an error
    /// instead of silent leakage.
    pub reference: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PredictOutcome {
    pub sentences: usize,
    /// Every file read, with its SHA-256, in read order.
    pub inputs: Vec<(PathBuf, String)>,
}

const LABEL_EXTENSIONS: [&str; 4] = ["pe", "hter", "tags", "gap_tags"];

/// Predicts HTER, word tags and gap tags for `src`/`mt` without any
/// post-edit. Writes `<stem>.{hter,tags,gap_tags}` under `out_dir`.
pub fn cmd_predict(req: &PredictRequest) -> Result<PredictOutcome> {
    if let Some(r) = &req.reference {
        return Err(Error::Config(format!(
            "predict does not accept references ({}); use eval to score predictions",
            r.display()
        )));
    }
    for p in [&req.src, &req.mt] {
        if let Some(ext) = p.extension().and_then(|e| e.to_str()) {
            if LABEL_EXTENSIONS.contains(&ext) {
                return Err(Error::Config(format!(
                    "{} looks like a post-edit or label file; predict reads only source and MT",
                    p.display()
                )));
            }
        }
    }
    if req.qe_models.is_empty() {
        return Err(Error::Config("predict needs at least one QE model".into()));
    }
    let mut inputs = Vec::new();
    let mut track = |p: &Path| -> Result<()> {
        inputs.push((p.to_path_buf(), file_sha256(p)?));
        Ok(())
    };
    track(&req.expert)?;
    let ck = ExpertCheckpoint::load(&req.expert)?;
    let mut members = Vec::new();
    for m in &req.qe_models {
        track(m)?;
        members.push(QeModel::load(m)?);
    }
    let ensemble = Ensemble::new(members)?;
    let theta = match &req.thresholds {
        Some(t) => {
            track(t)?;
            read_thresholds(t)?
        }
        None => DecisionThreshold::default(),
    };
    track(&req.src)?;
    track(&req.mt)?;
    let src = read_sentences(&req.src)?;
    let mt = read_sentences(&req.mt)?;
    if src.len() != mt.len() {
        return Err(Error::Config(format!(
            "{} has {} lines but {} has {}",
            req.src.display(),
            src.len(),
            req.mt.display(),
            mt.len()
        )));
    }
    let data: Vec<_> = src.into_iter().zip(mt).collect();
    let feats = extract_features(&ck, &data, req.threads.max(1))?;
    let preds = ensemble.predict_all(&feats)?;
    ensure_dir(&req.out_dir)?;
    write_predictions(&req.out_dir, &req.stem, &preds, theta)?;
    Ok(PredictOutcome {
        sentences: preds.len(),
        inputs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageStatus {
    Ran,
    /// Artifacts from an earlier run matched and were reused.
    Cached,
    /// Not needed because a later stage was cached.
    Skipped,
}

impl std::fmt::Display for StageStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::Skipped => "skipped",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageRecord {
    pub name: &'static str,
    pub status: StageStatus,
    pub seconds: f64,
    pub notes: Vec<(String, String)>,
}

/// Everything needed to audit or repeat a run.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentManifest {
    pub config: Vec<(String, String)>,
    /// Input file name and SHA-256.
    pub inputs: Vec<(String, String)>,
    pub stages: Vec<StageRecord>,
    pub metrics: MetricReport,
}

impl ExperimentManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            s += &format!("config.{k}={v}\n");
        }
        for (k, v) in &self.inputs {
            s += &format!("input.{k}={v}\n");
        }
        for r in &self.stages {
            s += &format!("stage.{}.status={}\n", r.name, r.status);
            s += &format!("stage.{}.seconds={:.3}\n", r.name, r.seconds);
            for (k, v) in &r.notes {
                s += &format!("stage.{}.{k}={v}\n", r.name);
            }
        }
        for (k, v) in self.metrics.to_key_values() {
            s += &format!("metric.{k}={v}\n");
        }
        s
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|r| r.name == name)
    }
}

const COMBINE: &str = "combine";
const PRETRAIN: &str = "pretrain";
const EXTRACT: &str = "extract";
const TRAIN_QE: &str = "train-qe";
const PREDICT: &str = "predict";
const EVAL: &str = "eval";

/// Artifact locations under a run's output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunLayout {
    out_dir: PathBuf,
    ensemble: usize,
}

impl RunLayout {
    pub fn new(cfg: &RunConfig) -> Self {
        Self {
            out_dir: cfg.out_dir.clone(),
            ensemble: cfg.ensemble,
        }
    }

    fn out(&self, rel: &str) -> PathBuf {
        self.out_dir.join(rel)
    }

    pub fn expert_path(&self) -> PathBuf {
        self.out("models/expert.blex")
    }

    pub fn qe_model_paths(&self) -> Vec<PathBuf> {
        (0..self.ensemble).map(|i| self.out(&format!("models/qe.{i}.qebl"))).collect()
    }

    pub fn thresholds_path(&self) -> PathBuf {
        self.out("models/thresholds.txt")
    }

    pub fn features_path(&self, split: &str) -> PathBuf {
        self.out(&format!("features/{split}.qeft"))
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.out("predictions")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.out("metrics.txt")
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.out("manifest.txt")
    }

    pub fn corpus_paths(&self) -> [PathBuf; 2] {
        [self.out("work/corpus.src"), self.out("work/corpus.tgt")]
    }
}

/// A configured run over one output directory. Stage methods may be called
/// one at a time; [`Pipeline::run`] chains them and reuses fresh artifacts.
pub struct Pipeline {
    cfg: RunConfig,
    layout: RunLayout,
    inputs: Vec<(String, String)>,
}

impl Pipeline {
    /// Validates the configuration and hashes every input file.
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let dir = cfg.data_dir();
        let mut names = vec!["parallel.src".to_string(), "parallel.tgt".to_string()];
        for split in SPLITS {
            for ext in ["src", "mt", "pe", "hter", "tags", "gap_tags"] {
                if ext == "pe" && split != "train" {
                    continue;
                }
                names.push(format!("{split}.{ext}"));
            }
        }
        let mut inputs = Vec::new();
        for n in names {
            let p = dir.join(&n);
            if !p.is_file() {
                return Err(Error::Config(format!("input file {} does not exist", p.display())));
            }
            inputs.push((n, file_sha256(&p)?));
        }
        Ok(Self {
            layout: RunLayout::new(&cfg),
            cfg,
            inputs,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn inputs(&self) -> &[(String, String)] {
        &self.inputs
    }

    fn input_hash(&self, name: &str) -> String {
        self.inputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, h)| h.clone())
            .unwrap_or_default()
    }

    fn data(&self, name: &str) -> PathBuf {
        self.cfg.data_dir().join(name)
    }

    pub fn layout(&self) -> &RunLayout {
        &self.layout
    }

    fn key(&self, stage: &str) -> String {
        let c = &self.cfg;
        let mut parts = vec![stage.to_string()];
        match stage {
            COMBINE => {
                for n in ["parallel.src", "parallel.tgt", "train.src", "train.pe"] {
                    parts.push(self.input_hash(n));
                }
                parts.push(c.seed.to_string());
            }
            PRETRAIN => {
                parts.push(self.key(COMBINE));
                parts.push(pairs_key(&c.expert.to_pairs()));
                let t = c.expert_train_config();
                // Thread count does not change results, so it stays out of the key.
                parts.push(format!(
                    "{} {} {} {} {} {:?} {}",
                    t.epochs, t.batch_size, t.lr, t.warmup_steps, t.clip_norm, t.max_steps, t.seed
                ));
                parts.push(format!("{} {}", c.tokenization, c.bpe_merges));
            }
            EXTRACT => {
                parts.push(self.key(PRETRAIN));
                for split in SPLITS {
                    parts.push(self.input_hash(&format!("{split}.src")));
                    parts.push(self.input_hash(&format!("{split}.mt")));
                }
            }
            TRAIN_QE => {
                parts.push(self.key(EXTRACT));
                for i in 0..c.ensemble {
                    let mut q = c.qe_config(i).to_pairs();
                    q.retain(|(k, _)| k != "threads");
                    parts.push(pairs_key(&q));
                }
                parts.push(format!("{:?}", c.tasks));
                for split in ["train", "dev"] {
                    for ext in ["hter", "tags", "gap_tags"] {
                        parts.push(self.input_hash(&format!("{split}.{ext}")));
                    }
                }
            }
            _ => unreachable!("no key for stage {stage}"),
        }
        key_of(&parts)
    }

    fn artifacts(&self, stage: &str) -> Vec<PathBuf> {
        match stage {
            COMBINE => self.layout.corpus_paths().to_vec(),
            PRETRAIN => vec![self.layout.expert_path()],
            EXTRACT => SPLITS.iter().map(|s| self.layout.features_path(s)).collect(),
            TRAIN_QE => {
                let mut v = self.layout.qe_model_paths();
                v.push(self.layout.thresholds_path());
                v
            }
            _ => Vec::new(),
        }
    }

    fn stamp_path(&self, stage: &str) -> PathBuf {
        self.layout.out(&format!("stamps/{stage}.stamp"))
    }

    /// True when the stage's stamp matches the current key and every
    /// artifact still has the recorded hash.
    pub fn is_fresh(&self, stage: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.stamp_path(stage)) else {
            return false;
        };
        let mut lines = text.lines();
        if lines.next() != Some(&format!("key={}", self.key(stage))) {
            return false;
        }
        let recorded: Vec<_> = lines.filter_map(|l| l.split_once('=')).collect();
        let expected = self.artifacts(stage);
        recorded.len() == expected.len()
            && expected.iter().zip(&recorded).all(|(p, (name, hash))| {
                p.to_string_lossy() == *name && file_sha256(p).is_ok_and(|h| h == *hash)
            })
    }

    fn write_stamp(&self, stage: &str) -> Result<()> {
        let mut text = format!("key={}\n", self.key(stage));
        for p in self.artifacts(stage) {
            text += &format!("{}={}\n", p.display(), file_sha256(&p)?);
        }
        write_text(&self.stamp_path(stage), &text)
    }

    fn require_fresh(&self, stage: &'static str, by: &'static str) -> Result<()> {
        if self.is_fresh(stage) {
            Ok(())
        } else {
            Err(Error::Stage {
                stage: by,
                source: Box::new(Error::Config(format!(
                    "artifacts of `{stage}` are missing or stale; run `{stage}` first"
                ))),
            })
        }
    }

    /// Reuses the stage's artifacts when fresh, otherwise checks that
    /// `upstream` is fresh and runs `f`.
    fn timed<F>(&self, stage: &'static str, upstream: Option<&'static str>, f: F) -> Result<StageRecord>
    where
        F: FnOnce() -> Result<Vec<(String, String)>>,
    {
        if self.is_fresh(stage) {
            log::info!("{stage}: reusing artifacts");
            return Ok(StageRecord {
                name: stage,
                status: StageStatus::Cached,
                seconds: 0.0,
                notes: Vec::new(),
            });
        }
        if let Some(up) = upstream {
            self.require_fresh(up, stage)?;
        }
        log::info!("{stage}: running");
        let start = Instant::now();
        let notes = f().map_err(stage_err(stage))?;
        self.write_stamp(stage).map_err(stage_err(stage))?;
        Ok(StageRecord {
            name: stage,
            status: StageStatus::Ran,
            seconds: start.elapsed().as_secs_f64(),
            notes,
        })
    }

    /// Step 1: parallel corpus plus repeated QE `(src, pe)` pairs.
    pub fn combine(&self) -> Result<StageRecord> {
        self.timed(COMBINE, None, || {
            let read_pairs = |a: &str, b: &str| -> Result<Vec<ParallelPair>> {
                let s = read_sentences(&self.data(a))?;
                let t = read_sentences(&self.data(b))?;
                if s.len() != t.len() {
                    return Err(Error::Config(format!("{a} and {b} have different line counts")));
                }
                Ok(s.into_iter()
                    .zip(t)
                    .filter(|(s, t)| filter_pair(s, t))
                    .map(|(src, tgt)| ParallelPair { src, tgt })
                    .collect())
            };
            let parallel = read_pairs("parallel.src", "parallel.tgt")?;
            let qe = read_pairs("train.src", "train.pe")?;
            let corpus = combine_training_corpus(&parallel, &qe, self.cfg.seed);
            let [ps, pt] = self.layout.corpus_paths();
            ensure_dir(ps.parent().expect("corpus path has a parent"))?;
            write_sentences(&ps, &corpus.iter().map(|p| p.src.clone()).collect::<Vec<_>>())?;
            write_sentences(&pt, &corpus.iter().map(|p| p.tgt.clone()).collect::<Vec<_>>())?;
            Ok(vec![("pairs".into(), corpus.len().to_string())])
        })
    }

    /// Step 2: trains the expert on the combined corpus.
    pub fn pretrain(&self) -> Result<StageRecord> {
        self.timed(PRETRAIN, Some(COMBINE), || {
            let [ps, pt] = self.layout.corpus_paths();
            let src = read_sentences(&ps)?;
            let tgt = read_sentences(&pt)?;
            let (src_bpe, tgt_bpe) = match self.cfg.tokenization {
                Tokenization::Word => (None, None),
                Tokenization::Bpe => (
                    Some(learn_bpe(&src, self.cfg.bpe_merges)),
                    Some(learn_bpe(&tgt, self.cfg.bpe_merges)),
                ),
            };
            let units = |side: &[Vec<String>], bpe: &Option<BpeMerges>| -> Result<Vec<Vec<String>>> {
                match bpe {
                    None => Ok(side.to_vec()),
                    Some(m) => side.iter().map(|s| apply_bpe(s, m).map(|r| r.0)).collect(),
                }
            };
            let src_u = units(&src, &src_bpe)?;
            let tgt_u = units(&tgt, &tgt_bpe)?;
            let src_vocab = Vocab::build(&src_u, None);
            let tgt_vocab = Vocab::build(&tgt_u, None);
            let data: Vec<ExpertExample> = src_u
                .iter()
                .zip(&tgt_u)
                .map(|(s, t)| (src_vocab.encode(s), tgt_vocab.encode(t)))
                .collect();
            let config = ExpertConfig {
                src_vocab_size: src_vocab.len(),
                tgt_vocab_size: tgt_vocab.len(),
                ..self.cfg.expert.clone()
            };
            let mut model = ExpertModel::new(config, self.cfg.seed)?;
            let report = train_expert(&mut model, &data, &self.cfg.expert_train_config(), |epoch, _, loss| {
                log::info!("pretrain: epoch {} loss {loss:.4}", epoch + 1);
                Ok(())
            })?;
            let ck = ExpertCheckpoint {
                model,
                src_vocab,
                tgt_vocab,
                src_bpe,
                tgt_bpe,
                meta: TrainMeta {
                    step: report.steps,
                    loss: report.final_loss(),
                },
                origin: String::new(),
            };
            let path = self.layout.expert_path();
            ensure_dir(path.parent().expect("model path has a parent"))?;
            ck.save(&path)?;
            Ok(vec![
                ("steps".into(), report.steps.to_string()),
                ("final_loss".into(), format!("{:.6}", report.final_loss())),
            ])
        })
    }

    /// Step 3: features for the train, dev and test MT.
    pub fn extract(&self) -> Result<StageRecord> {
        self.timed(EXTRACT, Some(PRETRAIN), || {
            let ck = ExpertCheckpoint::load(&self.layout.expert_path())?;
            let mut notes = Vec::new();
            for split in SPLITS {
                let src = read_sentences(&self.data(&format!("{split}.src")))?;
                let mt = read_sentences(&self.data(&format!("{split}.mt")))?;
                if src.len() != mt.len() {
                    return Err(Error::Config(format!("{split}.src and {split}.mt have different line counts")));
                }
                let data: Vec<_> = src.into_iter().zip(mt).collect();
                let feats = extract_features(&ck, &data, self.cfg.threads)?;
                let path = self.layout.features_path(split);
                ensure_dir(path.parent().expect("feature path has a parent"))?;
                write_features(&path, &feats)?;
                notes.push((format!("{split}_sentences"), feats.len().to_string()));
            }
            Ok(notes)
        })
    }

    fn targets(&self, split: &str) -> Result<Vec<QeTargets>> {
        let t = self.cfg.tasks;
        let hter = read_hter(&self.data(&format!("{split}.hter")))?;
        let word = read_tags(&self.data(&format!("{split}.tags")))?;
        let gap = read_tags(&self.data(&format!("{split}.gap_tags")))?;
        if word.len() != hter.len() || gap.len() != hter.len() {
            return Err(Error::Config(format!("label files for `{split}` have different line counts")));
        }
        Ok(hter
            .into_iter()
            .zip(word)
            .zip(gap)
            .map(|((h, w), g)| QeTargets {
                hter: t.sentence.then_some(h),
                word: t.word.then_some(w),
                gap: t.gap.then_some(g),
            })
            .collect())
    }

    fn load_ensemble(&self) -> Result<Ensemble> {
        Ensemble::new(self.layout.qe_model_paths().iter().map(|p| QeModel::load(p)).collect::<Result<_>>()?)
    }

    /// Step 4: trains the QE ensemble and tunes thresholds on dev.
    pub fn train_qe(&self) -> Result<StageRecord> {
        self.timed(TRAIN_QE, Some(EXTRACT), || {
            let train = read_features(&self.layout.features_path("train"))?;
            let targets = self.targets("train")?;
            if train.len() != targets.len() {
                return Err(Error::Config(format!(
                    "{} training feature sequences but {} label lines",
                    train.len(),
                    targets.len()
                )));
            }
            let width = train.first().map_or(0, FeatureSequence::width);
            let mut notes = Vec::new();
            let mut members = Vec::new();
            for (i, path) in self.layout.qe_model_paths().iter().enumerate() {
                let mut m = QeModel::new(self.cfg.qe_config(i), width)?;
                let rep = m.train(&train, &targets)?;
                let last = rep.epoch_losses.last().copied().unwrap_or(f64::NAN);
                log::info!("train-qe: member {i} final loss {last:.4}");
                notes.push((format!("member{i}.final_loss"), format!("{last:.6}")));
                ensure_dir(path.parent().expect("model path has a parent"))?;
                m.save(path)?;
                members.push(m);
            }
            let ensemble = Ensemble::new(members)?;
            let dev = read_features(&self.layout.features_path("dev"))?;
            let preds = ensemble.predict_all(&dev)?;
            let gold = self.targets("dev")?;
            let mut theta = DecisionThreshold::default();
            let tags = |get: fn(&QeTargets) -> &Option<Vec<Tag>>| -> Vec<Vec<Tag>> {
                gold.iter().map(|g| get(g).clone().unwrap_or_default()).collect()
            };
            if self.cfg.tasks.word {
                let p: Vec<_> = preds.iter().map(|p| p.word_bad.clone()).collect();
                theta.word = tune_threshold(&p, &tags(|g| &g.word))?;
            }
            if self.cfg.tasks.gap {
                let p: Vec<_> = preds.iter().map(|p| p.gap_bad.clone()).collect();
                theta.gap = tune_threshold(&p, &tags(|g| &g.gap))?;
            }
            write_thresholds(&self.layout.thresholds_path(), theta)?;
            notes.push(("theta_word".into(), theta.word.to_string()));
            notes.push(("theta_gap".into(), theta.gap.to_string()));
            Ok(notes)
        })
    }

    /// Step 5: predictions for the test split from cached features.
    pub fn predict(&self) -> Result<StageRecord> {
        self.require_fresh(EXTRACT, PREDICT)?;
        self.require_fresh(TRAIN_QE, PREDICT)?;
        let start = Instant::now();
        let run = || -> Result<usize> {
            let ensemble = self.load_ensemble()?;
            let theta = read_thresholds(&self.layout.thresholds_path())?;
            let preds = ensemble.predict_all(&read_features(&self.layout.features_path("test"))?)?;
            ensure_dir(&self.layout.predictions_dir())?;
            write_predictions(&self.layout.predictions_dir(), "test", &preds, theta)?;
            Ok(preds.len())
        };
        let n = run().map_err(stage_err(PREDICT))?;
        Ok(StageRecord {
            name: PREDICT,
            status: StageStatus::Ran,
            seconds: start.elapsed().as_secs_f64(),
            notes: vec![("sentences".into(), n.to_string())],
        })
    }

    /// Scores test predictions and writes `metrics.txt`.
    pub fn eval(&self) -> Result<(StageRecord, MetricReport)> {
        let start = Instant::now();
        let run = || -> Result<MetricReport> {
            let report = cmd_eval(&self.layout.predictions_dir().join("test"), &self.data("test"), self.cfg.tasks)?;
            write_text(&self.layout.metrics_path(), &report.key_value_text())?;
            Ok(report)
        };
        let report = run().map_err(stage_err(EVAL))?;
        let rec = StageRecord {
            name: EVAL,
            status: StageStatus::Ran,
            seconds: start.elapsed().as_secs_f64(),
            notes: Vec::new(),
        };
        Ok((rec, report))
    }

    /// Runs every stage in order, skipping upstream stages whose output is
    /// only needed by fresh downstream artifacts. Writes `manifest.txt`.
    pub fn run(&self) -> Result<ExperimentManifest> {
        let need_extract = !self.is_fresh(EXTRACT);
        let need_pretrain = need_extract && !self.is_fresh(PRETRAIN);
        let need_combine = need_pretrain && !self.is_fresh(COMBINE);
        let skipped = |name: &'static str| StageRecord {
            name,
            status: if self.is_fresh(name) { StageStatus::Cached } else { StageStatus::Skipped },
            seconds: 0.0,
            notes: Vec::new(),
        };
        let mut stages = Vec::new();
        stages.push(if need_combine || need_pretrain { self.combine()? } else { skipped(COMBINE) });
        stages.push(if need_extract { self.pretrain()? } else { skipped(PRETRAIN) });
        stages.push(self.extract()?);
        stages.push(self.train_qe()?);
        stages.push(self.predict()?);
        let (rec, metrics) = self.eval()?;
        stages.push(rec);
        let manifest = ExperimentManifest {
            config: self.cfg.to_pairs(),
            inputs: self.inputs.clone(),
            stages,
            metrics,
        };
        write_text(&self.layout.manifest_path(), &manifest.to_text())?;
        Ok(manifest)
    }
}

/// Full run over the data in `cfg.data_dir()`.
pub fn cmd_pipeline(cfg: &RunConfig) -> Result<ExperimentManifest> {
    Pipeline::new(cfg.clone())?.run()
}
