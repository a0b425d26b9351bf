//! Byte-level BPE with the four reserved ids used by the conditioning layout.
//!
//! Ids `0..256` are raw bytes, merges follow in rank order, and BOS, SEP, EOS
//! and PAD take the last four ids. Text is pre-split into chunks that start at
//! each space, so a word carries its leading space as a marker and decoding is
//! plain concatenation.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const BYTE_SYMBOLS: usize = 256;
const SPECIALS: [&str; 4] = ["bos", "sep", "eos", "pad"];
const HEADER: &str = "mantis-bpe 1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    merges: Vec<(Vec<u8>, Vec<u8>)>,
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    ranks: HashMap<(u32, u32), u32>,
    pub bos_id: u32,
    pub sep_id: u32,
    pub eos_id: u32,
    pub pad_id: u32,
}

/// Splits text into chunks, each starting at a space (except possibly the first).
fn chunks(text: &str) -> Vec<&[u8]> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..bytes.len() {
        if bytes[i] == b' ' {
            out.push(&bytes[start..i]);
            start = i;
        }
    }
    if start < bytes.len() {
        out.push(&bytes[start..]);
    }
    out
}

impl Vocab {
    fn from_merges(merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self> {
        let mut tokens: Vec<Vec<u8>> = (0..BYTE_SYMBOLS).map(|b| vec![b as u8]).collect();
        let mut token_to_id: HashMap<Vec<u8>, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut ranks = HashMap::new();
        for (rank, (a, b)) in merges.iter().enumerate() {
            let ia = *token_to_id.get(a).ok_or_else(|| Error::Tokenizer(format!("merge {} uses unknown symbol {:?}", rank, a)))?;
            let ib = *token_to_id.get(b).ok_or_else(|| Error::Tokenizer(format!("merge {} uses unknown symbol {:?}", rank, b)))?;
            let mut joined = a.clone();
            joined.extend_from_slice(b);
            if token_to_id.contains_key(&joined) {
                return Err(Error::Tokenizer(format!("merge {} duplicates token {:?}", rank, joined)));
            }
            let id = tokens.len() as u32;
            token_to_id.insert(joined.clone(), id);
            tokens.push(joined);
            ranks.insert((ia, ib), rank as u32);
        }
        let base = tokens.len() as u32;
        Ok(Self {
            merges,
            tokens,
            token_to_id,
            ranks,
            bos_id: base,
            sep_id: base + 1,
            eos_id: base + 2,
            pad_id: base + 3,
        })
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.tokens.len() + SPECIALS.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn merges(&self) -> &[(Vec<u8>, Vec<u8>)] {
        &self.merges
    }

    pub fn is_special(&self, id: u32) -> bool {
        id >= self.bos_id && (id as usize) < self.len()
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(|t| t.as_slice())
    }

    pub fn id_of(&self, bytes: &[u8]) -> Option<u32> {
        self.token_to_id.get(bytes).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in chunks(text) {
            self.encode_chunk(chunk, &mut out);
        }
        out
    }

    fn encode_chunk(&self, chunk: &[u8], out: &mut Vec<u32>) {
        let mut parts: Vec<u32> = chunk.iter().map(|b| *b as u32).collect();
        loop {
            let best = parts
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (*r, w[0], w[1])))
                .min();
            let Some((rank, ia, ib)) = best else { break };
            // merge ids are assigned in rank order right after the bytes
            let merged = BYTE_SYMBOLS as u32 + rank;
            let mut next = Vec::with_capacity(parts.len());
            let mut i = 0;
            while i < parts.len() {
                if i + 1 < parts.len() && parts[i] == ia && parts[i + 1] == ib {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(parts[i]);
                    i += 1;
                }
            }
            parts = next;
        }
        out.extend(parts);
    }

    /// Concatenates token bytes; special ids are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::new();
        for &id in ids {
            if self.is_special(id) {
                continue;
            }
            let t = self.tokens.get(id as usize).ok_or(Error::Index { op: "decode", id: id as usize, bound: self.len() })?;
            bytes.extend_from_slice(t);
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Text form: a header line, one merge per line in rank order (each symbol
    /// hex-encoded), then the special-token table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{}", HEADER).unwrap();
        writeln!(s, "merges {}", self.merges.len()).unwrap();
        for (a, b) in &self.merges {
            writeln!(s, "{} {}", hex(a), hex(b)).unwrap();
        }
        writeln!(s, "specials").unwrap();
        for (name, id) in SPECIALS.iter().zip([self.bos_id, self.sep_id, self.eos_id, self.pad_id]) {
            writeln!(s, "{} {}", name, id).unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, what: &str| Error::Tokenizer(format!("vocab line {}: {}", line + 1, what));
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(bad(0, "missing header")),
        }
        let (ln, count_line) = lines.next().ok_or_else(|| bad(1, "missing merge count"))?;
        let count: usize = count_line
            .strip_prefix("merges ")
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad(ln, "expected `merges <count>`"))?;
        let mut merges = Vec::with_capacity(count);
        for _ in 0..count {
            let (ln, line) = lines.next().ok_or_else(|| bad(ln, "truncated merge list"))?;
            let (a, b) = line.split_once(' ').ok_or_else(|| bad(ln, "expected two symbols"))?;
            merges.push((unhex(a).ok_or_else(|| bad(ln, "bad hex"))?, unhex(b).ok_or_else(|| bad(ln, "bad hex"))?));
        }
        match lines.next() {
            Some((_, "specials")) => {}
            Some((ln, _)) => return Err(bad(ln, "expected `specials`")),
            None => return Err(bad(count + 2, "missing specials")),
        }
        let vocab = Self::from_merges(merges)?;
        let expected = [vocab.bos_id, vocab.sep_id, vocab.eos_id, vocab.pad_id];
        for (name, want) in SPECIALS.iter().zip(expected) {
            let (ln, line) = lines.next().ok_or_else(|| bad(count + 3, "truncated specials"))?;
            let ok = line.split_once(' ').map(|(n, id)| n == *name && id.parse::<u32>().ok() == Some(want)).unwrap_or(false);
            if !ok {
                return Err(bad(ln, &format!("expected `{} {}`", name, want)));
            }
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Short content hash of the serialized vocabulary.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        hex(&digest[..8])
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{:02x}", b)).collect()
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return None;
    }
    (0..s.len()).step_by(2).map(|i| u8::from_str_radix(&s[i..i + 2], 16).ok()).collect()
}

/// Trains byte-level BPE: each round merges the most frequent adjacent pair,
/// ties going to the lexicographically smallest pair of byte strings.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], target_vocab: usize) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::Tokenizer("empty corpus".into()));
    }
    let min = BYTE_SYMBOLS + SPECIALS.len();
    if target_vocab < min {
        return Err(Error::Tokenizer(format!("target vocab {} is below the {} base symbols", target_vocab, min)));
    }
    let mut word_counts: HashMap<Vec<u8>, u64> = HashMap::new();
    for line in corpus {
        for c in chunks(line.as_ref()) {
            *word_counts.entry(c.to_vec()).or_insert(0) += 1;
        }
    }
    // sorted so that every pass visits words in the same order
    let mut words: Vec<(Vec<Vec<u8>>, u64)> =
        word_counts.into_iter().map(|(w, c)| (w.iter().map(|b| vec![*b]).collect(), c)).collect();
    words.sort();

    let mut merges = Vec::new();
    while merges.len() < target_vocab - min {
        let mut pairs: HashMap<(&[u8], &[u8]), u64> = HashMap::new();
        for (syms, count) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0].as_slice(), w[1].as_slice())).or_insert(0) += count;
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some(((a, b), _)) = best else { break };
        let (a, b) = (a.to_vec(), b.to_vec());
        let mut joined = a.clone();
        joined.extend_from_slice(&b);
        for (syms, _) in words.iter_mut() {
            let mut next = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == a && syms[i + 1] == b {
                    next.push(joined.clone());
                    i += 2;
                } else {
                    next.push(std::mem::take(&mut syms[i]));
                    i += 1;
                }
            }
            *syms = next;
        }
        merges.push((a, b));
    }
    Vocab::from_merges(merges)
}

/// Pair counts over the chunked corpus, before any merge.
pub fn pair_counts<S: AsRef<str>>(corpus: &[S]) -> HashMap<(u8, u8), u64> {
    let mut counts = HashMap::new();
    for line in corpus {
        for c in chunks(line.as_ref()) {
            for w in c.windows(2) {
                *counts.entry((w[0], w[1])).or_insert(0) += 1;
            }
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Vocab {
        train_bpe(&["low low low", "lower lower"], 256 + 4 + 3).unwrap()
    }

    #[test]
    fn first_merge_is_l_o_with_count_five() {
        let counts = pair_counts(&["low low low", "lower lower"]);
        assert_eq!(counts[&(b'l', b'o')], 5);
        assert_eq!(counts[&(b'o', b'w')], 5);
        let v = toy();
        assert_eq!(v.merges()[0], (b"l".to_vec(), b"o".to_vec()));
        assert_eq!(v.merges()[1], (b"lo".to_vec(), b"w".to_vec()));
    }

    #[test]
    fn low_is_one_token() {
        let v = toy();
        let ids = v.encode("low");
        assert_eq!(ids, vec![v.id_of(b"low").unwrap()]);
        assert_eq!(v.decode(&ids).unwrap(), "low");
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let v = train_bpe(&["hello world"], 260).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), 260);
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["the quick brown fox", "jumps over the lazy dog", "the dog"];
        assert_eq!(train_bpe(&corpus, 300).unwrap(), train_bpe(&corpus, 300).unwrap());
    }

    #[test]
    fn errors() {
        let empty: [&str; 0] = [];
        assert!(train_bpe(&empty, 300).is_err());
        assert!(train_bpe(&["a"], 259).is_err());
        let v = toy();
        assert!(matches!(v.decode(&[9999]), Err(Error::Index { .. })));
    }

    #[test]
    fn specials_are_dropped_and_distinct() {
        let v = toy();
        assert_eq!(v.decode(&[v.bos_id]).unwrap(), "");
        assert_eq!(v.encode(""), Vec::<u32>::new());
        let ids = [v.bos_id, v.sep_id, v.eos_id, v.pad_id];
        assert_eq!(ids, [259, 260, 261, 262]);
        assert_eq!(v.len(), 263);
    }

    #[test]
    fn text_round_trip() {
        let v = train_bpe(&["red cotton shirt", "blue denim shirt"], 280).unwrap();
        let back = Vocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
        assert!(Vocab::from_text("nonsense").is_err());
        let truncated: String = v.to_text().lines().take(4).map(|l| format!("{l}\n")).collect();
        assert!(Vocab::from_text(&truncated).is_err());
    }

    #[test]
    fn held_out_ascii_round_trips() {
        let v = train_bpe(&["a small striped square on womens silk"], 300).unwrap();
        for s in ["  leading spaces", "trailing  ", "Mixed CASE, punctuation!?", "tabs\tand\nnewlines", "ünïcödé ✓"] {
            assert_eq!(v.decode(&v.encode(s)).unwrap(), s);
        }
    }

    proptest! {
        #[test]
        fn round_trip_and_no_specials(s in "\\PC{0,40}") {
            let v = train_bpe(&["low low low", "lower lower", "newest widest"], 280).unwrap();
            let ids = v.encode(&s);
            prop_assert!(ids.iter().all(|id| !v.is_special(*id)));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
