use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::expert::{ExpertConfig, ExpertTrainConfig};
use crate::qe::QeConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Tokenization {
    #[default]
    Word,
    /// Subword units with features pooled back to words.
    Bpe,
}

impl fmt::Display for Tokenization {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tokenization::Word => "word",
            Tokenization::Bpe => "bpe",
        })
    }
}

impl FromStr for Tokenization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Tokenization::Word),
            "bpe" => Ok(Tokenization::Bpe),
            _ => Err(Error::Config(format!("unknown tokenization `{s}` (expected word or bpe)"))),
        }
    }
}

/// Which QE levels are trained and evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tasks {
    pub sentence: bool,
    pub word: bool,
    pub gap: bool,
}

impl Default for Tasks {
    fn default() -> Self {
        Self {
            sentence: true,
            word: true,
            gap: true,
        }
    }
}

/// Settings for a full run. Read from a `key = value` file; `#` starts a
/// comment. The single `seed` and `threads` values feed every component.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/data`.
    pub data_dir: Option<PathBuf>,
    pub seed: u64,
    pub threads: usize,
    pub tokenization: Tokenization,
    pub bpe_merges: usize,
    pub synth: SynthConfig,
    /// QE triplets used for training and threshold tuning; the rest is test.
    pub n_train: usize,
    pub n_dev: usize,
    pub expert: ExpertConfig,
    pub expert_train: ExpertTrainConfig,
    pub qe: QeConfig,
    pub ensemble: usize,
    pub tasks: Tasks,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            data_dir: None,
            seed: 1,
            threads: 1,
            tokenization: Tokenization::Word,
            bpe_merges: 100,
            synth: SynthConfig::default(),
            n_train: 500,
            n_dev: 200,
            expert: ExpertConfig {
                d_model: 32,
                n_layers: 2,
                d_ff: 64,
                n_heads: 4,
                ..ExpertConfig::default()
            },
            expert_train: ExpertTrainConfig {
                epochs: 6,
                lr: 2e-3,
                warmup_steps: 200,
                ..ExpertTrainConfig::default()
            },
            qe: QeConfig {
                lstm_hidden: 64,
                ..QeConfig::default()
            },
            ensemble: 1,
            tasks: Tasks::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_opt(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out_dir.join("data"))
    }

    /// Overrides one setting by key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let k = key;
        match key {
            "out_dir" => self.out_dir = PathBuf::from(v),
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "seed" => self.seed = parse(k, v)?,
            "threads" => self.threads = parse(k, v)?,
            "tokenization" => self.tokenization = v.parse()?,
            "bpe.merges" => self.bpe_merges = parse(k, v)?,
            "synth.vocab_size" => self.synth.vocab_size = parse(k, v)?,
            "synth.n_parallel" => self.synth.n_parallel = parse(k, v)?,
            "synth.n_triplets" => self.synth.n_triplets = parse(k, v)?,
            "synth.p_sub" => self.synth.p_sub = parse(k, v)?,
            "synth.p_del" => self.synth.p_del = parse(k, v)?,
            "synth.p_ins" => self.synth.p_ins = parse(k, v)?,
            "synth.min_len" => self.synth.min_len = parse(k, v)?,
            "synth.max_len" => self.synth.max_len = parse(k, v)?,
            "split.train" => self.n_train = parse(k, v)?,
            "split.dev" => self.n_dev = parse(k, v)?,
            "expert.d_model" => self.expert.d_model = parse(k, v)?,
            "expert.n_layers" => self.expert.n_layers = parse(k, v)?,
            "expert.d_ff" => self.expert.d_ff = parse(k, v)?,
            "expert.n_heads" => self.expert.n_heads = parse(k, v)?,
            "expert.sigma" => self.expert.sigma = parse(k, v)?,
            "expert.kl_weight" => self.expert.kl_weight = parse(k, v)?,
            "expert.max_len" => self.expert.max_len = parse(k, v)?,
            "expert.epochs" => self.expert_train.epochs = parse(k, v)?,
            "expert.batch_size" => self.expert_train.batch_size = parse(k, v)?,
            "expert.lr" => self.expert_train.lr = parse(k, v)?,
            "expert.warmup_steps" => self.expert_train.warmup_steps = parse(k, v)?,
            "expert.clip_norm" => self.expert_train.clip_norm = parse(k, v)?,
            "expert.max_steps" => self.expert_train.max_steps = parse_opt(k, v)?,
            "qe.lstm_hidden" => self.qe.lstm_hidden = parse(k, v)?,
            "qe.epochs" => self.qe.epochs = parse(k, v)?,
            "qe.batch_size" => self.qe.batch_size = parse(k, v)?,
            "qe.lr" => self.qe.lr = parse(k, v)?,
            "qe.clip_norm" => self.qe.clip_norm = parse(k, v)?,
            "qe.lambda_sent" => self.qe.lambda_sent = parse(k, v)?,
            "qe.lambda_word" => self.qe.lambda_word = parse(k, v)?,
            "qe.lambda_gap" => self.qe.lambda_gap = parse(k, v)?,
            "qe.features" => self.qe.features = v.parse()?,
            "qe.ensemble" => self.ensemble = parse(k, v)?,
            "task.sentence" => self.tasks.sentence = parse(k, v)?,
            "task.word" => self.tasks.word = parse(k, v)?,
            "task.gap" => self.tasks.gap = parse(k, v)?,
            _ => return Err(Error::Config(format!("unknown setting `{key}`"))),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order. Feeding these back
    /// through [`RunConfig::set`] reproduces the configuration.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let opt = |v: Option<usize>| v.map_or("none".to_string(), |v| v.to_string());
        let mut out = vec![("out_dir", self.out_dir.display().to_string())];
        if let Some(d) = &self.data_dir {
            out.push(("data_dir", d.display().to_string()));
        }
        out.extend([
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("tokenization", self.tokenization.to_string()),
            ("bpe.merges", self.bpe_merges.to_string()),
            ("synth.vocab_size", self.synth.vocab_size.to_string()),
            ("synth.n_parallel", self.synth.n_parallel.to_string()),
            ("synth.n_triplets", self.synth.n_triplets.to_string()),
            ("synth.p_sub", self.synth.p_sub.to_string()),
            ("synth.p_del", self.synth.p_del.to_string()),
            ("synth.p_ins", self.synth.p_ins.to_string()),
            ("synth.min_len", self.synth.min_len.to_string()),
            ("synth.max_len", self.synth.max_len.to_string()),
            ("split.train", self.n_train.to_string()),
            ("split.dev", self.n_dev.to_string()),
            ("expert.d_model", self.expert.d_model.to_string()),
            ("expert.n_layers", self.expert.n_layers.to_string()),
            ("expert.d_ff", self.expert.d_ff.to_string()),
            ("expert.n_heads", self.expert.n_heads.to_string()),
            ("expert.sigma", self.expert.sigma.to_string()),
            ("expert.kl_weight", self.expert.kl_weight.to_string()),
            ("expert.max_len", self.expert.max_len.to_string()),
            ("expert.epochs", self.expert_train.epochs.to_string()),
            ("expert.batch_size", self.expert_train.batch_size.to_string()),
            ("expert.lr", self.expert_train.lr.to_string()),
            ("expert.warmup_steps", self.expert_train.warmup_steps.to_string()),
            ("expert.clip_norm", self.expert_train.clip_norm.to_string()),
            ("expert.max_steps", opt(self.expert_train.max_steps)),
            ("qe.lstm_hidden", self.qe.lstm_hidden.to_string()),
            ("qe.epochs", self.qe.epochs.to_string()),
            ("qe.batch_size", self.qe.batch_size.to_string()),
            ("qe.lr", self.qe.lr.to_string()),
            ("qe.clip_norm", self.qe.clip_norm.to_string()),
            ("qe.lambda_sent", self.qe.lambda_sent.to_string()),
            ("qe.lambda_word", self.qe.lambda_word.to_string()),
            ("qe.lambda_gap", self.qe.lambda_gap.to_string()),
            ("qe.features", self.qe.features.to_string()),
            ("qe.ensemble", self.ensemble.to_string()),
            ("task.sentence", self.tasks.sentence.to_string()),
            ("task.word", self.tasks.word.to_string()),
            ("task.gap", self.tasks.gap.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn to_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Synthesis settings with the run seed applied.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone()
        }
    }

    pub fn expert_train_config(&self) -> ExpertTrainConfig {
        ExpertTrainConfig {
            seed: self.seed,
            threads: self.threads,
            ..self.expert_train.clone()
        }
    }

    /// QE settings for ensemble member `member`.
    pub fn qe_config(&self, member: usize) -> QeConfig {
        QeConfig {
            seed: self.seed.wrapping_add(member as u64),
            threads: self.threads,
            lambda_sent: if self.tasks.sentence { self.qe.lambda_sent } else { 0.0 },
            lambda_word: if self.tasks.word { self.qe.lambda_word } else { 0.0 },
            lambda_gap: if self.tasks.gap { self.qe.lambda_gap } else { 0.0 },
            ..self.qe.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.threads == 0 {
            return fail("threads must be at least 1".into());
        }
        if self.ensemble == 0 {
            return fail("qe.ensemble must be at least 1".into());
        }
        if !(self.tasks.sentence || self.tasks.word || self.tasks.gap) {
            return fail("at least one of task.sentence, task.word, task.gap must be enabled".into());
        }
        if self.n_train == 0 || self.n_dev == 0 {
            return fail("split.train and split.dev must be positive".into());
        }
        if self.tokenization == Tokenization::Bpe && self.bpe_merges == 0 {
            return fail("bpe.merges must be positive in bpe mode".into());
        }
        self.synth_config().validate()?;
        self.qe_config(0).validate()?;
        // Vocabulary sizes are only known after reading the corpus.
        ExpertConfig {
            src_vocab_size: crate::corpus::BLANK + 1,
            tgt_vocab_size: crate::corpus::BLANK + 1,
            ..self.expert.clone()
        }
        .validate()?;
        if self.expert_train.epochs == 0 || self.expert_train.batch_size == 0 {
            return fail("expert.epochs and expert.batch_size must be positive".into());
        }
        Ok(())
    }
}
