use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Equal-length token-id sequences. With the byte-level tokenizer the id of
/// a token is its byte value (`V = 256`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<u32>>,
}

// Filler vocabulary for the synthetic corpus, most frequent first.
const WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "was", "for", "on", "as", "with", "by", "that",
    "it", "from", "at", "his", "an", "were", "are", "which", "this", "be", "or", "has", "had",
    "first", "after", "its", "new", "but", "who", "not", "they", "have", "one", "their", "two",
    "been", "her", "also", "during", "time", "into", "other", "would", "when", "there", "all",
    "season", "year", "city", "game", "music", "river", "album", "war", "team", "school", "film",
    "state", "series", "world",
];

impl CalibrationSet {
    pub fn new(sequences: Vec<Vec<u32>>) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::Data("calibration set is empty".into()))?
            .len();
        if first < 2 {
            return Err(Error::Data(format!(
                "sequences need at least 2 tokens, got {first}"
            )));
        }
        if let Some(i) = sequences.iter().position(|s| s.len() != first) {
            return Err(Error::Data(format!(
                "sequence {i} has length {}, expected {first}",
                sequences[i].len()
            )));
        }
        Ok(Self { sequences })
    }

    /// Cuts `bytes` into `n` consecutive non-overlapping windows of `seq_len`.
    pub fn from_bytes(bytes: &[u8], n: usize, seq_len: usize) -> Result<Self> {
        Self::from_ids(&bytes.iter().map(|&b| b as u32).collect::<Vec<_>>(), n, seq_len)
    }

    pub fn from_ids(ids: &[u32], n: usize, seq_len: usize) -> Result<Self> {
        let need = n
            .checked_mul(seq_len)
            .ok_or_else(|| Error::Data("calibration size overflows".into()))?;
        if ids.len() < need {
            return Err(Error::Data(format!(
                "need {need} tokens for {n} x {seq_len}, source has {}",
                ids.len()
            )));
        }
        Self::new(ids[..need].chunks(seq_len).map(<[u32]>::to_vec).collect())
    }

    /// Whitespace-separated decimal token ids.
    pub fn parse_id_stream(text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|e| Error::Data(format!("bad token id {t:?}: {e}")))
            })
            .collect()
    }

    /// Deterministic English-like byte text: words drawn with Zipf weights,
    /// grouped into capitalized sentences.
    pub fn synthetic_text(len: usize, seed: u64) -> Vec<u8> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights: Vec<f64> = (0..WORDS.len()).map(|r| 1.0 / (r as f64 + 1.0)).collect();
        let total: f64 = weights.iter().sum();
        let mut out = Vec::with_capacity(len + 16);
        while out.len() < len {
            let words = rng.gen_range(4..13);
            for w in 0..words {
                let mut pick = rng.gen_range(0.0..total);
                let mut idx = 0;
                while pick >= weights[idx] && idx + 1 < WORDS.len() {
                    pick -= weights[idx];
                    idx += 1;
                }
                let word = WORDS[idx].as_bytes();
                if w == 0 {
                    out.push(word[0].to_ascii_uppercase());
                    out.extend_from_slice(&word[1..]);
                } else {
                    out.push(b' ');
                    out.extend_from_slice(word);
                }
                if w + 1 < words && rng.gen_bool(0.08) {
                    out.push(b',');
                }
            }
            out.extend_from_slice(if rng.gen_bool(0.15) { b".\n" } else { b". " });
        }
        out.truncate(len);
        out
    }

    pub fn synthetic(n: usize, seq_len: usize, seed: u64) -> Result<Self> {
        Self::from_bytes(&Self::synthetic_text(n * seq_len, seed), n, seq_len)
    }

    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }

    /// The first `n` sequences.
    pub fn take(&self, n: usize) -> Result<Self> {
        if n == 0 || n > self.len() {
            return Err(Error::Data(format!(
                "cannot take {n} of {} sequences",
                self.len()
            )));
        }
        Ok(Self {
            sequences: self.sequences[..n].to_vec(),
        })
    }

    pub fn check_vocab(&self, vocab: usize) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::Data(format!(
                    "token id {bad} in sequence {i} is outside vocabulary of {vocab}"
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the shape and token ids.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.len() as u64).to_le_bytes());
        h.update((self.seq_len() as u64).to_le_bytes());
        for seq in &self.sequences {
            for t in seq {
                h.update(t.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_and_short() {
        assert!(CalibrationSet::new(vec![]).is_err());
        assert!(CalibrationSet::new(vec![vec![1]]).is_err());
        assert!(CalibrationSet::new(vec![vec![1, 2], vec![1, 2, 3]]).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_ascii() {
        let a = CalibrationSet::synthetic_text(4096, 9);
        assert_eq!(a, CalibrationSet::synthetic_text(4096, 9));
        assert_ne!(a, CalibrationSet::synthetic_text(4096, 10));
        assert_eq!(a.len(), 4096);
        assert!(a.iter().all(|b| b.is_ascii()));
        let c = CalibrationSet::synthetic(8, 32, 9).unwrap();
        assert_eq!((c.len(), c.seq_len()), (8, 32));
        c.check_vocab(256).unwrap();
        assert!(c.check_vocab(64).is_err());
    }

    #[test]
    fn windows_and_ids() {
        let c = CalibrationSet::from_bytes(b"abcdefg", 3, 2).unwrap();
        assert_eq!(c.sequences()[2], vec![b'e' as u32, b'f' as u32]);
        assert!(CalibrationSet::from_bytes(b"abc", 2, 2).is_err());
        let ids = CalibrationSet::parse_id_stream("1 2\n3 4").unwrap();
        assert_eq!(ids, vec![1, 2, 3, 4]);
        assert!(CalibrationSet::parse_id_stream("1 x").is_err());
    }
}
