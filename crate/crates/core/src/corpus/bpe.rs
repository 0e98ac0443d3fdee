//! Byte-pair encoding: greedy merge learning and deterministic application.
//!
//! Words start as characters with the end-of-word marker glued to the last
//! one (`"low"` -> `l o w</w>`), so word boundaries survive segmentation
//! and [`decode`] can rebuild the original words.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use crate::corpus::SegmentationMatrix;
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BpeMerges {
    rules: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeMerges {
    pub fn from_rules(rules: Vec<(String, String)>) -> Self {
        let ranks = rules
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i))
            .collect();
        Self { rules, ranks }
    }

    pub fn rules(&self) -> &[(String, String)] {
        &self.rules
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }

    /// One rule per line, `left right`.
    pub fn to_lines(&self) -> Vec<String> {
        self.rules.iter().map(|(l, r)| format!("{l} {r}")).collect()
    }

    pub fn from_lines<S: AsRef<str>>(lines: &[S]) -> Result<Self> {
        let mut rules = Vec::with_capacity(lines.len());
        for (n, line) in lines.iter().enumerate() {
            let line = line.as_ref().trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            match (it.next(), it.next(), it.next()) {
                (Some(l), Some(r), None) => rules.push((l.to_string(), r.to_string())),
                _ => {
                    return Err(Error::format(
                        "BPE merges",
                        format!("line {}: expected `left right`, got `{line}`", n + 1),
                    ))
                }
            }
        }
        Ok(Self::from_rules(rules))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_lines().join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text.lines().collect::<Vec<_>>())
    }

    /// Segments one word into subword units.
    pub fn encode_word(&self, word: &str) -> Vec<String> {
        let mut symbols = initial_symbols(word);
        loop {
            let best = symbols
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0].clone(), w[1].clone())).copied())
                .min();
            let Some(rank) = best else { break };
            let (l, r) = &self.rules[rank];
            symbols = merge_pair(&symbols, l, r);
        }
        symbols
    }
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut out: Vec<String> = word.chars().map(String::from).collect();
    if let Some(last) = out.last_mut() {
        last.push_str(END_OF_WORD);
    }
    out
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

/// Learns up to `num_merges` rules by repeatedly merging the most frequent
/// adjacent symbol pair; ties go to the lexicographically smallest pair.
pub fn learn_bpe<S: AsRef<[String]>>(corpus: &[S], num_merges: usize) -> BpeMerges {
    let mut freq: BTreeMap<&str, usize> = BTreeMap::new();
    for s in corpus {
        for w in s.as_ref() {
            *freq.entry(w.as_str()).or_default() += 1;
        }
    }
    let mut words: Vec<(Vec<String>, usize)> = freq
        .into_iter()
        .map(|(w, c)| (initial_symbols(w), c))
        .collect();

    let mut rules = Vec::with_capacity(num_merges);
    for _ in 0..num_merges {
        let mut pairs: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for (syms, c) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_str(), w[1].as_str())).or_default() += c;
            }
        }
        // BTreeMap iterates pairs in lexicographic order, so keeping the
        // first maximum implements the tie-break.
        let mut best: Option<((&str, &str), usize)> = None;
        for (p, c) in pairs {
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((p, c));
            }
        }
        let Some(((l, r), _)) = best else { break };
        let (l, r) = (l.to_string(), r.to_string());
        for (syms, _) in &mut words {
            *syms = merge_pair(syms, &l, &r);
        }
        rules.push((l, r));
    }
    BpeMerges::from_rules(rules)
}

/// Segments a word sequence and returns the units together with the
/// word-by-unit segmentation matrix.
pub fn apply_bpe(words: &[String], merges: &BpeMerges) -> Result<(Vec<String>, SegmentationMatrix)> {
    let mut units = Vec::new();
    let mut lengths = Vec::with_capacity(words.len());
    for w in words {
        let pieces = merges.encode_word(w);
        lengths.push(pieces.len());
        units.extend(pieces);
    }
    let seg = SegmentationMatrix::from_word_lengths(&lengths)?;
    Ok((units, seg))
}

/// Inverse of [`apply_bpe`]: concatenates units and splits at end markers.
pub fn decode(units: &[String]) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for u in units {
        match u.strip_suffix(END_OF_WORD) {
            Some(head) => {
                cur.push_str(head);
                words.push(std::mem::take(&mut cur));
            }
            None => cur.push_str(u),
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}
