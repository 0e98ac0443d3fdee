use std::collections::HashMap;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
/// Gap-prediction target meaning "nothing to insert here".
pub const BLANK: usize = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<blank>"];

/// Token <-> id map with five reserved ids at the front.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary ordered by descending frequency, ties broken
    /// lexicographically. `max_size` caps the non-reserved entries.
    pub fn build<'a, I, S>(sentences: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for tok in s.as_ref() {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut entries: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !RESERVED.contains(t))
            .collect();
        entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        if let Some(cap) = max_size {
            entries.truncate(cap);
        }
        let tokens = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(entries.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("built vocabulary is well formed")
    }

    /// Restores a vocabulary from its full token list (reserved entries
    /// included), e.g. as stored in a checkpoint.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::format("vocabulary", "reserved tokens missing or out of order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(RESERVED[UNK])
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sent(s: &str) -> Vec<String> {
        s.split_whitespace().map(String::from).collect()
    }

    #[test]
    fn reserved_ids_and_order() {
        let data = vec![sent("b a b c"), sent("b c")];
        let v = Vocab::build(&data, None);
        assert_eq!(v.id("<blank>"), BLANK);
        assert_eq!(v.tokens()[5..], ["b", "c", "a"]);
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn round_trip_in_vocabulary() {
        let data = vec![sent("das ist gut"), sent("ist das gut ?")];
        let v = Vocab::build(&data, None);
        for s in &data {
            assert_eq!(&v.decode(&v.encode(s)), s);
        }
    }

    #[test]
    fn from_tokens_validates() {
        assert!(Vocab::from_tokens(vec!["x".into()]).is_err());
        let mut toks: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        toks.push("a".into());
        toks.push("a".into());
        assert!(Vocab::from_tokens(toks).is_err());
    }
}
