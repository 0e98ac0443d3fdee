//! QE ground truth from (MT, post-edit) pairs: HTER, word tags and gap tags.
//!
//! Alignment is plain unit-cost Levenshtein (substitution, deletion,
//! insertion). There is no shift operation; word-order errors surface as
//! deletions plus insertions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tag {
    Ok,
    Bad,
}

impl Tag {
    pub fn is_bad(self) -> bool {
        self == Tag::Bad
    }

    /// Class index used by the classifiers: OK = 0, BAD = 1.
    pub fn class(self) -> usize {
        match self {
            Tag::Ok => 0,
            Tag::Bad => 1,
        }
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tag::Ok => "OK",
            Tag::Bad => "BAD",
        })
    }
}

impl FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "OK" => Ok(Tag::Ok),
            "BAD" => Ok(Tag::Bad),
            other => Err(Error::format("tag", format!("expected OK or BAD, got `{other}`"))),
        }
    }
}

/// One alignment step. Positions index into the MT sequence (`mt`) and the
/// post-edit / reference sequence (`pe`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EditOp {
    Match { mt: usize, pe: usize },
    Sub { mt: usize, pe: usize },
    /// MT token deleted.
    Del { mt: usize },
    /// Reference token inserted.
    Ins { pe: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EditScript {
    ops: Vec<EditOp>,
    mt_len: usize,
    pe_len: usize,
}

impl EditScript {
    pub fn ops(&self) -> &[EditOp] {
        &self.ops
    }

    pub fn mt_len(&self) -> usize {
        self.mt_len
    }

    pub fn pe_len(&self) -> usize {
        self.pe_len
    }

    pub fn cost(&self) -> usize {
        self.ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count()
    }

    pub fn count_sub(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, EditOp::Sub { .. })).count()
    }

    pub fn count_del(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, EditOp::Del { .. })).count()
    }

    pub fn count_ins(&self) -> usize {
        self.ops.iter().filter(|op| matches!(op, EditOp::Ins { .. })).count()
    }

    /// Distinct MT boundaries (0..=mt_len) at which at least one insertion
    /// happens. Boundary `k` sits before MT token `k`.
    pub fn insertion_boundaries(&self) -> Vec<usize> {
        let mut consumed = 0;
        let mut out: Vec<usize> = Vec::new();
        for op in &self.ops {
            match op {
                EditOp::Ins { .. } => {
                    if out.last() != Some(&consumed) {
                        out.push(consumed);
                    }
                }
                _ => consumed += 1,
            }
        }
        out
    }
}

/// Minimal-cost alignment of `mt` to `pe`.
///
/// Backtrace tie-breaking on equal cost: diagonal (match/substitution),
/// then deletion, then insertion.
pub fn align<T: PartialEq>(mt: &[T], pe: &[T]) -> EditScript {
    let (n, m) = (mt.len(), pe.len());
    let w = m + 1;
    let mut dp = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        dp[i * w] = i;
    }
    for j in 0..=m {
        dp[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[(i - 1) * w + j - 1] + usize::from(mt[i - 1] != pe[j - 1]);
            let del = dp[(i - 1) * w + j] + 1;
            let ins = dp[i * w + j - 1] + 1;
            dp[i * w + j] = sub.min(del).min(ins);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = dp[i * w + j];
        if i > 0 && j > 0 {
            let same = mt[i - 1] == pe[j - 1];
            if dp[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push(if same {
                    EditOp::Match { mt: i - 1, pe: j - 1 }
                } else {
                    EditOp::Sub { mt: i - 1, pe: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Del { mt: i - 1 });
            i -= 1;
        } else {
            ops.push(EditOp::Ins { pe: j - 1 });
            j -= 1;
        }
    }
    ops.reverse();
    EditScript {
        ops,
        mt_len: n,
        pe_len: m,
    }
}

/// Edit cost divided by reference length, clipped to `[0, 1]`.
pub fn hter(script: &EditScript, t_len: usize) -> Result<f64> {
    if t_len != script.pe_len {
        return Err(Error::Contract(format!(
            "hter reference length {t_len} differs from aligned length {}",
            script.pe_len
        )));
    }
    let cost = script.cost();
    if t_len == 0 {
        if script.mt_len > 0 {
            log::warn!("empty reference with non-empty MT; HTER set to 1.0");
            return Ok(1.0);
        }
        return Ok(0.0);
    }
    Ok((cost as f64 / t_len as f64).min(1.0))
}

fn check_covers(script: &EditScript, m_len: usize) -> Result<()> {
    if script.mt_len != m_len {
        return Err(Error::Contract(format!(
            "edit script covers {} MT tokens, expected {m_len}",
            script.mt_len
        )));
    }
    Ok(())
}

/// MT token is OK iff it is matched; substituted or deleted tokens are BAD.
pub fn word_tags(script: &EditScript, m_len: usize) -> Result<Vec<Tag>> {
    check_covers(script, m_len)?;
    let mut tags = vec![Tag::Bad; m_len];
    for op in &script.ops {
        if let EditOp::Match { mt, .. } = op {
            tags[*mt] = Tag::Ok;
        }
    }
    Ok(tags)
}

/// Gap `k` (before MT token `k`, gap 0 = sentence start, gap `m_len` =
/// sentence end) is BAD iff something is inserted there.
pub fn gap_tags(script: &EditScript, m_len: usize) -> Result<Vec<Tag>> {
    check_covers(script, m_len)?;
    let mut tags = vec![Tag::Ok; m_len + 1];
    for k in script.insertion_boundaries() {
        tags[k] = Tag::Bad;
    }
    Ok(tags)
}

#[derive(Clone, Debug, PartialEq)]
pub struct QeLabels {
    pub hter: f64,
    pub word_tags: Vec<Tag>,
    pub gap_tags: Vec<Tag>,
}

pub fn label<T: PartialEq>(mt: &[T], pe: &[T]) -> Result<QeLabels> {
    let script = align(mt, pe);
    Ok(QeLabels {
        hter: hter(&script, pe.len())?,
        word_tags: word_tags(&script, mt.len())?,
        gap_tags: gap_tags(&script, mt.len())?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::{HashMap, VecDeque};
    use Tag::{Bad, Ok as Good};

    fn s(x: &str) -> Vec<char> {
        x.chars().collect()
    }

    #[test]
    fn identical_sequences_align_with_matches() {
        let sc = align(&s("abc"), &s("abc"));
        assert_eq!(sc.cost(), 0);
        assert!(sc.ops().iter().all(|op| matches!(op, EditOp::Match { .. })));
        assert_eq!(sc.ops().len(), 3);
    }

    #[test]
    fn substitution_in_the_middle() {
        let sc = align(&s("axc"), &s("abc"));
        assert_eq!(
            sc.ops(),
            &[
                EditOp::Match { mt: 0, pe: 0 },
                EditOp::Sub { mt: 1, pe: 1 },
                EditOp::Match { mt: 2, pe: 2 }
            ]
        );
        assert_eq!(sc.cost(), 1);
    }

    #[test]
    fn hter_values() {
        assert_eq!(hter(&align(&s("abc"), &s("abc")), 3).unwrap(), 0.0);
        let one = hter(&align(&s("axc"), &s("abc")), 3).unwrap();
        assert!((one - 1.0 / 3.0).abs() < 1e-12);
        // 5 edits against a 3-token reference clips to 1.
        let sc = align(&s("vwxyz"), &s("abc"));
        assert_eq!(sc.cost(), 5);
        assert_eq!(hter(&sc, 3).unwrap(), 1.0);
        assert_eq!(hter(&align(&s("ab"), &s("")), 0).unwrap(), 1.0);
        assert!(hter(&sc, 4).is_err());
    }

    #[test]
    fn word_tag_examples() {
        let sc = align(&s("abc"), &s("abc"));
        assert_eq!(word_tags(&sc, 3).unwrap(), vec![Good; 3]);
        let sc = align(&s("axc"), &s("abc"));
        assert_eq!(word_tags(&sc, 3).unwrap(), vec![Good, Bad, Good]);
        let sc = align(&s("abcd"), &s("abc"));
        assert_eq!(word_tags(&sc, 4).unwrap(), vec![Good, Good, Good, Bad]);
    }

    #[test]
    fn gap_tag_examples() {
        let sc = align(&s("abc"), &s("abc"));
        assert_eq!(gap_tags(&sc, 3).unwrap(), vec![Good; 4]);
        let sc = align(&s("ac"), &s("abc"));
        assert_eq!(gap_tags(&sc, 2).unwrap(), vec![Good, Bad, Good]);
        let sc = align(&s(""), &s("a"));
        assert_eq!(gap_tags(&sc, 0).unwrap(), vec![Bad]);
    }

    #[test]
    fn multiple_insertions_collapse_to_one_gap() {
        let sc = align(&s("a"), &s("axyz"));
        assert_eq!(sc.count_ins(), 3);
        assert_eq!(gap_tags(&sc, 1).unwrap(), vec![Good, Bad]);
    }

    #[test]
    fn label_composition() {
        let l = label(&s("abc"), &s("abc")).unwrap();
        assert_eq!(l.hter, 0.0);
        assert_eq!(l.word_tags, vec![Good; 3]);
        assert_eq!(l.gap_tags, vec![Good; 4]);

        let l = label(&s("axc"), &s("abc")).unwrap();
        assert!((l.hter - 0.3333).abs() < 1e-4);
        assert_eq!(l.word_tags, vec![Good, Bad, Good]);
        assert_eq!(l.gap_tags, vec![Good; 4]);

        let l = label(&s("ac"), &s("abc")).unwrap();
        assert!((l.hter - 0.3333).abs() < 1e-4);
        assert_eq!(l.word_tags, vec![Good, Good]);
        assert_eq!(l.gap_tags, vec![Good, Bad, Good]);
    }

    #[test]
    fn tag_parse_round_trip() {
        assert_eq!("OK".parse::<Tag>().unwrap(), Good);
        assert_eq!("BAD".parse::<Tag>().unwrap(), Bad);
        assert!("bad".parse::<Tag>().is_err());
        assert_eq!(Bad.to_string(), "BAD");
    }

    /// Shortest path over single-token edits between strings of length <= 4
    /// over a 3-symbol alphabet (breadth-first search).
    fn bfs_distances(from: &[u8], max_len: usize, alpha: u8) -> HashMap<Vec<u8>, usize> {
        let mut dist = HashMap::new();
        let mut q = VecDeque::new();
        dist.insert(from.to_vec(), 0);
        q.push_back(from.to_vec());
        while let Some(cur) = q.pop_front() {
            let d = dist[&cur];
            let mut next = Vec::new();
            for i in 0..cur.len() {
                for a in 0..alpha {
                    if a != cur[i] {
                        let mut x = cur.clone();
                        x[i] = a;
                        next.push(x);
                    }
                }
                let mut x = cur.clone();
                x.remove(i);
                next.push(x);
            }
            if cur.len() < max_len {
                for i in 0..=cur.len() {
                    for a in 0..alpha {
                        let mut x = cur.clone();
                        x.insert(i, a);
                        next.push(x);
                    }
                }
            }
            for x in next {
                if !dist.contains_key(&x) {
                    dist.insert(x.clone(), d + 1);
                    q.push_back(x);
                }
            }
        }
        dist
    }

    fn all_strings(max_len: usize, alpha: u8) -> Vec<Vec<u8>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut nf = Vec::new();
            for s in &frontier {
                for a in 0..alpha {
                    let mut x: Vec<u8> = s.clone();
                    x.push(a);
                    nf.push(x);
                }
            }
            out.extend(nf.iter().cloned());
            frontier = nf;
        }
        out
    }

    #[test]
    fn dp_cost_matches_bfs_on_small_alphabet() {
        let strings = all_strings(4, 3);
        for m in &strings {
            let dist = bfs_distances(m, 4, 3);
            for t in &strings {
                let sc = align(m, t);
                assert_eq!(sc.cost(), dist[t], "m={m:?} t={t:?}");
            }
        }
    }

    proptest! {
        #[test]
        fn tag_counts_follow_script(m in prop::collection::vec(0u8..4, 0..8), t in prop::collection::vec(0u8..4, 0..8)) {
            let sc = align(&m, &t);
            let again = align(&m, &t);
            prop_assert_eq!(&sc, &again);
            let wt = word_tags(&sc, m.len()).unwrap();
            let gt = gap_tags(&sc, m.len()).unwrap();
            prop_assert_eq!(wt.len(), m.len());
            prop_assert_eq!(gt.len(), m.len() + 1);
            let bad_words = wt.iter().filter(|t| t.is_bad()).count();
            prop_assert_eq!(bad_words, sc.count_sub() + sc.count_del());
            let bad_gaps = gt.iter().filter(|t| t.is_bad()).count();
            prop_assert_eq!(bad_gaps, sc.insertion_boundaries().len());
            prop_assert!(bad_words + bad_gaps <= sc.cost());
            let h = hter(&sc, t.len()).unwrap();
            prop_assert!((0.0..=1.0).contains(&h));
            prop_assert_eq!(h == 0.0, m == t || (t.is_empty() && m.is_empty()));
            if h == 0.0 {
                prop_assert!(wt.iter().chain(&gt).all(|t| !t.is_bad()));
            }
        }
    }
}
