// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level BPE in the GPT-2 format (`vocab.json` + `merges.txt`).

use std::collections::HashMap;
use std::path::Path;
use std::sync::OnceLock;

use fancy_regex::Regex;

use crate::error::{MifinError, Result};

/// Pre-tokenization pattern used by GPT-2.
const SPLIT_PATTERN: &str =
    r"'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+";

static GPT2_VOCAB: &[u8] = include_bytes!("../../assets/gpt2/vocab.json");
static GPT2_MERGES: &[u8] = include_bytes!("../../assets/gpt2/merges.txt");

#[derive(Clone)]
pub struct Tokenizer {
    encoder: HashMap<String, u32>,
    decoder: Vec<Option<String>>,
    ranks: HashMap<(String, String), usize>,
    byte_encoder: [char; 256],
    byte_decoder: HashMap<char, u8>,
    splitter: Regex,
    vocab_bytes: Vec<u8>,
    merges_bytes: Vec<u8>,
}

impl std::fmt::Debug for Tokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tokenizer")
            .field("vocab", &self.encoder.len())
            .field("merges", &self.ranks.len())
            .finish()
    }
}

/// The reversible byte → printable-char table of GPT-2.
fn bytes_to_unicode() -> [char; 256] {
    let printable: Vec<u32> = ('!' as u32..='~' as u32)
        .chain('¡' as u32..='¬' as u32)
        .chain('®' as u32..='ÿ' as u32)
        .collect();
    let mut table = ['\0'; 256];
    for &b in &printable {
        table[b as usize] = char::from_u32(b).unwrap();
    }
    let mut n = 0;
    for b in 0..256u32 {
        if !printable.contains(&b) {
            table[b as usize] = char::from_u32(256 + n).unwrap();
            n += 1;
        }
    }
    table
}

impl Tokenizer {
    /// The GPT-2 vocabulary and merge table shipped with the crate.
    pub fn gpt2() -> Self {
        static CACHE: OnceLock<Tokenizer> = OnceLock::new();
        CACHE
            .get_or_init(|| {
                Self::from_bytes(GPT2_VOCAB.to_vec(), GPT2_MERGES.to_vec())
                    .expect("bundled GPT-2 tokenizer tables are valid")
            })
            .clone()
    }

    pub fn gpt2_vocab_bytes() -> &'static [u8] {
        GPT2_VOCAB
    }

    pub fn gpt2_merges_bytes() -> &'static [u8] {
        GPT2_MERGES
    }

    pub fn from_files(vocab: &Path, merges: &Path) -> Result<Self> {
        let v = std::fs::read(vocab).map_err(|e| MifinError::load(vocab, e))?;
        let m = std::fs::read(merges).map_err(|e| MifinError::load(merges, e))?;
        Self::from_bytes(v, m)
    }

    pub fn from_bytes(vocab_bytes: Vec<u8>, merges_bytes: Vec<u8>) -> Result<Self> {
        let encoder: HashMap<String, u32> = serde_json::from_slice(&vocab_bytes)?;
        let size = encoder.values().copied().max().map_or(0, |m| m as usize + 1);
        let mut decoder = vec![None; size];
        for (tok, &id) in &encoder {
            decoder[id as usize] = Some(tok.clone());
        }
        let merges_text = std::str::from_utf8(&merges_bytes)
            .map_err(|e| MifinError::load("merges.txt", e))?;
        let mut ranks = HashMap::new();
        for (i, line) in merges_text
            .lines()
            .filter(|l| !l.starts_with("#version") && !l.trim().is_empty())
            .enumerate()
        {
            let (a, b) = line.split_once(' ').ok_or_else(|| MifinError::Record {
                line: i + 1,
                reason: format!("merge line {line:?} lacks a space"),
            })?;
            ranks.insert((a.to_string(), b.to_string()), i);
        }
        let byte_encoder = bytes_to_unicode();
        let byte_decoder = byte_encoder
            .iter()
            .enumerate()
            .map(|(b, &c)| (c, b as u8))
            .collect();
        Ok(Self {
            encoder,
            decoder,
            ranks,
            byte_encoder,
            byte_decoder,
            splitter: Regex::new(SPLIT_PATTERN).expect("static pattern"),
            vocab_bytes,
            merges_bytes,
        })
    }

    /// Number of ids addressed by the vocabulary (max id + 1).
    pub fn vocab_size(&self) -> usize {
        self.decoder.len()
    }

    pub fn raw_vocab(&self) -> &[u8] {
        &self.vocab_bytes
    }

    pub fn raw_merges(&self) -> &[u8] {
        &self.merges_bytes
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for piece in self.splitter.find_iter(text) {
            // The pattern always matches; a failure here would be a
            // backtrack-limit error, which the pattern cannot trigger.
            let piece = match piece {
                Ok(m) => m.as_str(),
                Err(_) => continue,
            };
            let symbols: String = piece.bytes().map(|b| self.byte_encoder[b as usize]).collect();
            for tok in self.bpe(&symbols) {
                match self.encoder.get(&tok) {
                    Some(&id) => ids.push(id),
                    // Unmergeable symbols fall back to single characters,
                    // all of which are in a byte-level vocabulary.
                    None => ids.extend(
                        tok.chars()
                            .filter_map(|c| self.encoder.get(&c.to_string()).copied()),
                    ),
                }
            }
        }
        ids
    }

    fn bpe(&self, word: &str) -> Vec<String> {
        let mut parts: Vec<String> = word.chars().map(|c| c.to_string()).collect();
        if parts.len() < 2 {
            return parts;
        }
        loop {
            let mut best: Option<(usize, usize)> = None;
            for i in 0..parts.len() - 1 {
                if let Some(&rank) = self.ranks.get(&(parts[i].clone(), parts[i + 1].clone())) {
                    if best.is_none_or(|(r, _)| rank < r) {
                        best = Some((rank, i));
                    }
                }
            }
            let Some((_, first)) = best else {
                return parts;
            };
            let (a, b) = (parts[first].clone(), parts[first + 1].clone());
            let mut merged = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == a && parts[i + 1] == b {
                    merged.push(format!("{a}{b}"));
                    i += 2;
                } else {
                    merged.push(std::mem::take(&mut parts[i]));
                    i += 1;
                }
            }
            parts = merged;
            if parts.len() == 1 {
                return parts;
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            let tok = self
                .decoder
                .get(id as usize)
                .and_then(Option::as_ref)
                .ok_or(MifinError::TokenId(id))?;
            out.extend(tok.chars().filter_map(|c| self.byte_decoder.get(&c)));
        }
        Ok(out)
    }

    /// Decode ids to text; byte sequences that are not valid UTF-8 (a token
    /// boundary inside a multi-byte character) are replaced lossily.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Human-readable rendering of a single token.
    pub fn token_text(&self, id: u32) -> Result<String> {
        self.decode(&[id])
    }

    pub fn token_id(&self, token: &str) -> Option<u32> {
        self.encoder.get(token).copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_table_is_a_bijection() {
        let t = bytes_to_unicode();
        let mut seen: Vec<char> = t.to_vec();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 256);
        assert_eq!(t[b' ' as usize], 'Ġ');
    }

    #[test]
    fn empty_text_round_trips() {
        let tok = Tokenizer::gpt2();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]).unwrap(), "");
    }

    #[test]
    fn unknown_id_is_rejected() {
        let tok = Tokenizer::gpt2();
        assert!(matches!(tok.decode(&[60_000]), Err(MifinError::TokenId(60_000))));
    }

    #[test]
    fn earnings_prompt_matches_reference_ids() {
        // Produced once by the reference GPT-2 tokenizer (transformers).
        let tok = Tokenizer::gpt2();
        let ids = tok.encode("With good earnings the stock price of company will likely");
        assert_eq!(ids, vec![3152, 922, 12042, 262, 4283, 2756, 286, 1664, 481, 1884]);
    }
}
