use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Token inventory. The mask token is an ordinary index that data never uses.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    mask_id: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize, mask_id: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary needs at least one data token and the mask, got size {size}"
            )));
        }
        if mask_id >= size {
            return Err(Error::InvalidArgument(format!(
                "mask id {mask_id} outside vocabulary of size {size}"
            )));
        }
        Ok(Vocab {
            size,
            mask_id,
            labels: None,
        })
    }

    /// `data_tokens` ordinary tokens followed by the mask.
    pub fn with_mask_last(data_tokens: usize) -> Result<Self> {
        Self::new(data_tokens + 1, data_tokens)
    }

    /// Labelled vocabulary; the mask is appended after `labels` and shown as `[M]`.
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Result<Self> {
        let mut all: Vec<String> = labels.iter().map(|s| s.as_ref().to_string()).collect();
        all.push("[M]".to_string());
        let mut seen = std::collections::HashSet::new();
        for l in &all {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate token label {l:?}")));
            }
        }
        let mut v = Self::with_mask_last(labels.len())?;
        v.labels = Some(all);
        Ok(v)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    /// Number of tokens excluding the mask.
    pub fn data_size(&self) -> usize {
        self.size - 1
    }

    /// Indices of every token except the mask.
    pub fn data_tokens(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.size).filter(move |&t| t != self.mask_id)
    }

    pub fn labels(&self) -> Option<&[String]> {
        self.labels.as_deref()
    }

    pub fn label(&self, token: usize) -> String {
        match &self.labels {
            Some(l) => l[token].clone(),
            None if token == self.mask_id => "[M]".to_string(),
            None => token.to_string(),
        }
    }

    pub fn token_of(&self, label: &str) -> Option<usize> {
        self.labels.as_ref()?.iter().position(|l| l == label)
    }

    /// Parses whitespace-separated labels (or indices when unlabelled).
    pub fn parse(&self, text: &str) -> Result<TokenString> {
        let tokens = text
            .split_whitespace()
            .map(|w| {
                self.token_of(w)
                    .or_else(|| w.parse::<usize>().ok())
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown token {w:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenString::new(tokens, self)
    }

    pub fn render(&self, x: &TokenString) -> String {
        x.tokens()
            .iter()
            .map(|&t| self.label(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// A fixed-length string of token indices, possibly containing masks.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TokenString {
    tokens: Vec<usize>,
    mask_id: usize,
}

impl TokenString {
    pub fn new(tokens: Vec<usize>, vocab: &Vocab) -> Result<Self> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab.size()) {
            return Err(Error::InvalidArgument(format!(
                "token {bad} outside vocabulary of size {}",
                vocab.size()
            )));
        }
        Ok(TokenString {
            tokens,
            mask_id: vocab.mask_id(),
        })
    }

    pub fn all_masked(len: usize, vocab: &Vocab) -> Self {
        TokenString {
            tokens: vec![vocab.mask_id(); len],
            mask_id: vocab.mask_id(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn get(&self, i: usize) -> usize {
        self.tokens[i]
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.tokens[i] == self.mask_id
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.mask_id).count()
    }

    pub fn is_complete(&self) -> bool {
        self.mask_count() == 0
    }

    /// Returns a copy with `token` written at masked position `i`.
    pub fn splice(&self, i: usize, token: usize) -> Result<TokenString> {
        if i >= self.len() {
            return Err(Error::InvalidArgument(format!(
                "position {i} outside string of length {}",
                self.len()
            )));
        }
        if !self.is_masked(i) {
            return Err(Error::NotMasked(i));
        }
        if token == self.mask_id {
            return Err(Error::InvalidArgument("cannot splice the mask token".into()));
        }
        let mut out = self.clone();
        out.tokens[i] = token;
        Ok(out)
    }
}

impl fmt::Display for TokenString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &t) in self.tokens.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            if t == self.mask_id {
                f.write_str("_")?;
            } else {
                write!(f, "{t}")?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masked_positions_are_exactly_the_mask_indices() {
        let v = Vocab::with_mask_last(3).unwrap();
        let x = TokenString::new(vec![3, 0, 3, 2], &v).unwrap();
        assert_eq!(x.masked_positions(), vec![0, 2]);
        assert_eq!(x.mask_count(), 2);
    }

    #[test]
    fn splice_requires_a_masked_slot() {
        let v = Vocab::with_mask_last(3).unwrap();
        let x = TokenString::all_masked(3, &v);
        let y = x.splice(1, 2).unwrap();
        assert_eq!(y.tokens(), &[3, 2, 3]);
        assert!(matches!(y.splice(1, 0), Err(Error::NotMasked(1))));
        assert!(y.splice(0, 3).is_err());
    }

    #[test]
    fn rejects_out_of_range_tokens_and_duplicate_labels() {
        let v = Vocab::with_mask_last(2).unwrap();
        assert!(TokenString::new(vec![0, 3], &v).is_err());
        assert!(Vocab::new(4, 4).is_err());
        assert!(Vocab::from_labels(&["a", "a"]).is_err());
    }

    #[test]
    fn labels_round_trip_through_parse() {
        let v = Vocab::from_labels(&["the", "cat"]).unwrap();
        let x = v.parse("the [M] cat").unwrap();
        assert_eq!(x.tokens(), &[0, 2, 1]);
        assert_eq!(v.render(&x), "the [M] cat");
    }
}
