//! Sentence-level correlation/error metrics and tag-level F1 scores.

use std::fmt;

use crate::error::{Error, Result};
use crate::ter::Tag;

fn check_pair(op: &'static str, x: &[f64], y: &[f64], min: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op,
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < min {
        return Err(Error::Contract(format!("{op} needs at least {min} values, got {}", x.len())));
    }
    Ok(())
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("pearson", x, y, 2)?;
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("correlation undefined for constant input".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the average of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("spearman", x, y, 2)?;
    pearson(&average_ranks(x), &average_ranks(y))
}

pub fn mae(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("mae", x, y, 1)?;
    Ok(x.iter().zip(y).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.len() as f64)
}

pub fn rmse(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair("rmse", x, y, 1)?;
    Ok((x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64).sqrt())
}

/// Quantile ranking metric.
///
/// Sentences are sorted by predicted score, highest first (stable). For each
/// quantile count `q` in `2..=n/2`, with `b = n / q` items per quantile,
/// `Δ_q` averages `mean(truth of first k·b items) − mean(truth)` over
/// `k = 1..q-1`. The result is the mean of `Δ_q`. A prediction that ranks
/// high-truth sentences first scores highest.
pub fn delta_avg(scores: &[f64], truth: &[f64]) -> Result<f64> {
    check_pair("delta_avg", scores, truth, 4)?;
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    // Offsets from one reference value leave the result unchanged and make
    // constant truth give exactly zero.
    let reference = truth[0];
    let sorted: Vec<f64> = order.iter().map(|&i| truth[i] - reference).collect();
    let mut prefix = vec![0.0; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + sorted[i];
    }
    let overall = prefix[n] / n as f64;
    let mut total = 0.0;
    let qs = 2..=n / 2;
    let count = qs.clone().count();
    for q in qs {
        let b = n / q;
        let mut dq = 0.0;
        for k in 1..q {
            let m = k * b;
            dq += prefix[m] / m as f64 - overall;
        }
        total += dq / (q - 1) as f64;
    }
    Ok(total / count as f64)
}

/// Per-class F1 scores for OK/BAD tagging.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct F1Scores {
    pub f1_ok: f64,
    pub f1_bad: f64,
    pub f1_multi: f64,
    /// Set when a class is absent from both prediction and truth.
    pub degenerate: bool,
}

fn f1(tp: usize, fp: usize, fn_: usize) -> Option<f64> {
    let denom = 2 * tp + fp + fn_;
    (denom > 0).then(|| 2.0 * tp as f64 / denom as f64)
}

/// F1 for each class and their product over flattened tag sequences.
pub fn f1_multi(pred: &[Tag], truth: &[Tag]) -> Result<F1Scores> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "f1_multi",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    let mut c = [[0usize; 2]; 2];
    for (p, t) in pred.iter().zip(truth) {
        c[t.class()][p.class()] += 1;
    }
    let ok = f1(c[0][0], c[1][0], c[0][1]);
    let bad = f1(c[1][1], c[0][1], c[1][0]);
    let degenerate = ok.is_none() || bad.is_none();
    if degenerate {
        log::warn!("f1: a tag class is absent from both prediction and truth; its F1 is set to 0");
    }
    let (f1_ok, f1_bad) = (ok.unwrap_or(0.0), bad.unwrap_or(0.0));
    Ok(F1Scores {
        f1_ok,
        f1_bad,
        f1_multi: f1_ok * f1_bad,
        degenerate,
    })
}

/// Convenience wrapper flattening per-sentence tag sequences.
pub fn f1_multi_nested(pred: &[Vec<Tag>], truth: &[Vec<Tag>]) -> Result<F1Scores> {
    if pred.len() != truth.len() {
        return Err(Error::Shape {
            op: "f1_multi",
            left: vec![pred.len()],
            right: vec![truth.len()],
        });
    }
    for (i, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::LengthMismatch {
                id: i,
                detail: format!("{} predicted tags vs {} gold tags", p.len(), t.len()),
            });
        }
    }
    f1_multi(&pred.concat(), &truth.concat())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SentenceScores {
    pub pearson: f64,
    pub spearman: f64,
    pub mae: f64,
    pub rmse: f64,
    pub delta_avg: f64,
    pub count: usize,
}

impl SentenceScores {
    pub fn compute(pred: &[f64], truth: &[f64]) -> Result<Self> {
        Ok(Self {
            pearson: pearson(pred, truth)?,
            spearman: spearman(pred, truth)?,
            mae: mae(pred, truth)?,
            rmse: rmse(pred, truth)?,
            delta_avg: delta_avg(pred, truth)?,
            count: pred.len(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TagScores {
    pub f1: F1Scores,
    pub count: usize,
}

impl TagScores {
    pub fn compute(pred: &[Vec<Tag>], truth: &[Vec<Tag>]) -> Result<Self> {
        Ok(Self {
            f1: f1_multi_nested(pred, truth)?,
            count: truth.iter().map(Vec::len).sum(),
        })
    }
}

/// Everything `eval` reports. Absent levels are skipped in output.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub sentence: Option<SentenceScores>,
    pub word: Option<TagScores>,
    pub gap: Option<TagScores>,
}

impl MetricReport {
    /// Machine-readable `key=value` lines.
    pub fn to_key_values(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        if let Some(s) = &self.sentence {
            for (k, v) in [
                ("pearson", s.pearson),
                ("spearman", s.spearman),
                ("mae", s.mae),
                ("rmse", s.rmse),
                ("delta_avg", s.delta_avg),
            ] {
                out.push((format!("sentence.{k}"), format!("{v:.6}")));
            }
            out.push(("sentence.count".into(), s.count.to_string()));
        }
        for (level, t) in [("word", &self.word), ("gap", &self.gap)] {
            if let Some(t) = t {
                out.push((format!("{level}.f1_ok"), format!("{:.6}", t.f1.f1_ok)));
                out.push((format!("{level}.f1_bad"), format!("{:.6}", t.f1.f1_bad)));
                out.push((format!("{level}.f1_multi"), format!("{:.6}", t.f1.f1_multi)));
                out.push((format!("{level}.count"), t.count.to_string()));
            }
        }
        out
    }

    pub fn key_value_text(&self) -> String {
        self.to_key_values()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

impl fmt::Display for MetricReport {
    /// Aligned plain-text table.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kv = self.to_key_values();
        let width = kv.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        for (k, v) in kv {
            writeln!(f, "{k:<width$}  {v:>10}")?;
        }
        Ok(())
    }
}
