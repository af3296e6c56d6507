//! Byte corpora as token streams and deterministic prompt slicing.

use crate::error::{Error, Result};
use crate::model::TokenId;

pub fn tokens(bytes: &[u8]) -> Vec<TokenId> {
    bytes.iter().map(|b| *b as TokenId).collect()
}

/// `count` prompts of `prompt_len` bytes at evenly spaced offsets.
pub fn prompts(corpus: &[u8], prompt_len: usize, count: usize) -> Result<Vec<Vec<TokenId>>> {
    if corpus.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    if prompt_len == 0 || count == 0 {
        return Err(Error::InvalidConfig(
            "prompt_len and prompt count must be non-zero".into(),
        ));
    }
    if corpus.len() < prompt_len {
        return Err(Error::InvalidConfig(format!(
            "corpus of {} bytes is shorter than prompt_len {prompt_len}",
            corpus.len()
        )));
    }
    let span = corpus.len() - prompt_len;
    Ok((0..count)
        .map(|i| {
            let start = i * span / count;
            tokens(&corpus[start..start + prompt_len])
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompts_are_evenly_spaced() {
        let corpus: Vec<u8> = (0..100u8).collect();
        let p = prompts(&corpus, 10, 3).unwrap();
        assert_eq!(p[0][0], 0);
        assert_eq!(p[1][0], 30);
        assert_eq!(p[2][0], 60);
        assert!(p.iter().all(|x| x.len() == 10));
    }

    #[test]
    fn prompt_errors() {
        assert!(matches!(prompts(&[], 4, 1), Err(Error::Empty(_))));
        assert!(prompts(b"abc", 4, 1).is_err());
        assert!(prompts(b"abcd", 4, 0).is_err());
    }
}
