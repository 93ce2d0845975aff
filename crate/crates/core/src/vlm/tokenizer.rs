//! Byte-level tokenizer with four special ids.

use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const PAD: usize = 258;
pub const IMG: usize = 259;
pub const VOCAB: usize = 260;

pub fn tokenize(s: &str) -> Vec<usize> {
    s.bytes().map(usize::from).collect()
}

/// Concatenates byte ids, skipping specials; invalid UTF-8 is replaced.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Token ids plus the positions graded by the caption loss.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|m| **m).count()
    }
}

/// `[BOS] [IMG]×n_vis question answer [EOS]`, with the loss mask set on the
/// answer bytes and EOS. Without an answer the sequence ends after the
/// question and nothing is masked.
pub fn assemble_prompt(n_vis: usize, question: &str, answer: Option<&str>, max_seq: usize) -> Result<TokenSequence> {
    let q = tokenize(question);
    let a = answer.map(tokenize);
    let len = 1 + n_vis + q.len() + a.as_ref().map_or(0, |a| a.len() + 1);
    if len > max_seq {
        return Err(Error::TooLong {
            what: "prompt length",
            got: len,
            limit: max_seq,
        });
    }
    let mut ids = Vec::with_capacity(len);
    ids.push(BOS);
    ids.extend(std::iter::repeat(IMG).take(n_vis));
    ids.extend(&q);
    let mut loss_mask = vec![false; ids.len()];
    if let Some(a) = a {
        ids.extend(&a);
        ids.push(EOS);
        loss_mask.resize(ids.len(), true);
    }
    Ok(TokenSequence { ids, loss_mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_layout() {
        let s = assemble_prompt(4, "Q?", Some("ab"), 64).unwrap();
        assert_eq!(s.ids, vec![BOS, IMG, IMG, IMG, IMG, b'Q' as usize, b'?' as usize, 97, 98, EOS]);
        assert_eq!(s.masked_count(), 3);
        assert_eq!(detokenize(&s.ids), "Q?ab");
        let g = assemble_prompt(4, "Q?", None, 64).unwrap();
        assert_eq!(g.len(), 7);
        assert_eq!(g.masked_count(), 0);
        assert!(matches!(
            assemble_prompt(60, "Q?", Some("ab"), 64),
            Err(Error::TooLong { got: 66, .. })
        ));
    }

    #[test]
    fn multibyte_round_trip() {
        let s = "größe · 尺寸 🎯";
        assert_eq!(detokenize(&tokenize(s)), s);
    }
}
