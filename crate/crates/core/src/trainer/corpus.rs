//! Byte-level corpora: loading, windowing and a synthetic generator.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

pub const DEFAULT_WINDOW: usize = 256;
pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub tokens: Vec<usize>,
}

impl Corpus {
    pub fn from_text(text: &str) -> Self {
        Self {
            tokens: text.bytes().map(usize::from).collect(),
        }
    }

    /// JSON lines, each an object with a string `text` field. Records are
    /// joined with a newline.
    pub fn from_jsonl(src: &str) -> Result<Self> {
        let mut out = String::new();
        for (i, line) in src.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let v: serde_json::Value =
                serde_json::from_str(line).map_err(|e| Error::Input(format!("corpus line {}: {e}", i + 1)))?;
            let text = v
                .get("text")
                .and_then(|t| t.as_str())
                .ok_or_else(|| Error::Input(format!("corpus line {}: missing string field \"text\"", i + 1)))?;
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(text);
        }
        Ok(Self::from_text(&out))
    }

    /// Reads `path` as JSON lines when the extension is `jsonl` or the first
    /// non-blank line is an object, otherwise as UTF-8 text.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Input(format!("cannot read corpus {}: {e}", path.display())))?;
        let text = String::from_utf8(bytes)
            .map_err(|e| Error::Input(format!("corpus {} is not UTF-8: {e}", path.display())))?;
        let jsonl = path.extension().is_some_and(|e| e == "jsonl")
            || text
                .lines()
                .find(|l| !l.trim().is_empty())
                .is_some_and(|l| l.trim_start().starts_with('{'));
        let c = if jsonl {
            Self::from_jsonl(&text)?
        } else {
            Self::from_text(&text)
        };
        if c.tokens.is_empty() {
            return Err(Error::Input(format!("corpus {} is empty", path.display())));
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Non-overlapping windows of `len + 1` tokens (inputs plus the shifted
    /// labels), advancing by `len`.
    pub fn windows(&self, len: usize) -> Vec<Vec<usize>> {
        if len == 0 || self.tokens.len() < len + 1 {
            return Vec::new();
        }
        (0..=(self.tokens.len() - len - 1) / len)
            .map(|w| self.tokens[w * len..w * len + len + 1].to_vec())
            .collect()
    }
}

/// Splits off every `k`-th window as held-out data, `k = round(1/frac)`.
pub fn split_holdout(windows: Vec<Vec<usize>>, frac: f64) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    if !(frac > 0.0) {
        return (windows, Vec::new());
    }
    let k = (1.0 / frac).round().max(2.0) as usize;
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, w) in windows.into_iter().enumerate() {
        if i % k == k - 1 {
            held.push(w);
        } else {
            train.push(w);
        }
    }
    (train, held)
}

const WORDS: &[&str] = &[
    "the", "a", "of", "and", "to", "in", "was", "that", "with", "for", "on", "at", "from", "by", "river", "stone",
    "market", "winter", "garden", "letter", "bridge", "lamp", "road", "house", "old", "small", "quiet", "bright",
    "long", "cold", "green", "early", "open", "heavy", "walked", "found", "kept", "carried", "opened", "watched",
    "built", "sold", "wrote", "saw",
];

fn name<R: Rng>(rng: &mut R) -> String {
    const C: &[u8] = b"bdfgklmnprstvz";
    const V: &[u8] = b"aeiou";
    let syll = rng.random_range(2..4);
    let mut s = String::new();
    for i in 0..syll {
        let c = C[rng.random_range(0..C.len())] as char;
        s.push(if i == 0 { c.to_ascii_uppercase() } else { c });
        s.push(V[rng.random_range(0..V.len())] as char);
    }
    s
}

/// Deterministic English-like prose of at least `bytes` bytes. Each
/// paragraph introduces a few invented names and reuses them, so some
/// earlier tokens carry information needed much later.
pub fn synthetic_text(bytes: usize, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::with_capacity(bytes + 512);
    while out.len() < bytes {
        let cast: Vec<String> = (0..rng.random_range(2..5)).map(|_| name(&mut rng)).collect();
        let place = name(&mut rng);
        out.push_str(&format!("In {place} lived {}.", cast.join(" and ")));
        for _ in 0..rng.random_range(4..9) {
            let who = cast.choose(&mut rng).expect("cast is non-empty");
            out.push(' ');
            out.push_str(who);
            for _ in 0..rng.random_range(3..9) {
                out.push(' ');
                out.push_str(WORDS.choose(&mut rng).expect("word list is non-empty"));
            }
            if rng.random_bool(0.4) {
                out.push_str(&format!(" in {place}"));
            }
            out.push('.');
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_cover_with_shift() {
        let c = Corpus::from_text("abcdefghij");
        let w = c.windows(3);
        assert_eq!(w.len(), 3);
        assert_eq!(w[0], vec![97, 98, 99, 100]);
        assert_eq!(w[2], vec![103, 104, 105, 106]);
        assert!(c.windows(10).is_empty());
        assert_eq!(c.windows(9).len(), 1);
    }

    #[test]
    fn jsonl_records_join() {
        let c = Corpus::from_jsonl("{\"text\": \"ab\"}\n\n{\"text\": \"c\", \"id\": 2}\n").unwrap();
        assert_eq!(c.tokens, vec![97, 98, 10, 99]);
        assert!(Corpus::from_jsonl("{\"body\": \"x\"}").is_err());
        assert!(Corpus::from_jsonl("not json").is_err());
    }

    #[test]
    fn load_detects_format() {
        let dir = tempfile::tempdir().unwrap();
        let txt = dir.path().join("a.txt");
        std::fs::write(&txt, "hello").unwrap();
        assert_eq!(Corpus::load(&txt).unwrap().len(), 5);
        let js = dir.path().join("b.data");
        std::fs::write(&js, "{\"text\": \"hi\"}\n").unwrap();
        assert_eq!(Corpus::load(&js).unwrap().len(), 2);
        let empty = dir.path().join("c.txt");
        std::fs::write(&empty, "").unwrap();
        assert!(Corpus::load(&empty).is_err());
        assert!(Corpus::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn holdout_split() {
        let w: Vec<Vec<usize>> = (0..20).map(|i| vec![i]).collect();
        let (t, h) = split_holdout(w, 0.1);
        assert_eq!(h, vec![vec![9], vec![19]]);
        assert_eq!(t.len(), 18);
    }

    #[test]
    fn synthetic_is_deterministic_ascii() {
        let a = synthetic_text(5000, 3);
        assert!(a.len() >= 5000 && a.is_ascii());
        assert_eq!(a, synthetic_text(5000, 3));
        assert_ne!(a, synthetic_text(5000, 4));
    }
}
