//! Subword vocabulary: pair-frequency merge training, greedy longest-match encoding.
//!
//! Words are split on whitespace and every Unicode punctuation character
//! becomes its own word. Word-internal pieces carry the `##` prefix.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const MASK: u32 = 3;
pub const UNK: u32 = 4;

pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];
const CONT: &str = "##";

/// Default vocabulary size for desk-scale runs.
pub const DEFAULT_VOCAB_SIZE: usize = 2_000;
/// Vocabulary size of the full-scale bilingual configuration.
pub const FULL_VOCAB_SIZE: usize = 57_226;

/// Ordered token list; the position of a token is its id.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    lowercase: bool,
    max_token_chars: usize,
}

/// Encoded sentence padded to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub attention_mask: Vec<u8>,
}

impl TokenSeq {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m == 1).count()
    }
}

fn is_split_char(c: char) -> bool {
    c.is_ascii_punctuation()
        || (!c.is_alphanumeric() && !c.is_whitespace() && !c.is_control() && c as u32 > 0x7F)
}

/// NFC-normalize and split text into words; punctuation characters stand alone.
pub fn pre_tokenize(text: &str, lowercase: bool) -> Vec<String> {
    let normalized: String = if lowercase {
        text.nfc().flat_map(char::to_lowercase).collect()
    } else {
        text.nfc().collect()
    };
    let mut words = Vec::new();
    for chunk in normalized.split_whitespace() {
        let mut cur = String::new();
        for c in chunk.chars() {
            if c.is_control() {
                continue;
            }
            if is_split_char(c) {
                if !cur.is_empty() {
                    words.push(std::mem::take(&mut cur));
                }
                words.push(c.to_string());
            } else {
                cur.push(c);
            }
        }
        if !cur.is_empty() {
            words.push(cur);
        }
    }
    words
}

impl Vocab {
    /// Build from an ordered token list whose first entries are the special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        for (i, sp) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*sp) {
                return Err(Error::Data(format!("vocabulary id {i} must be {sp}")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        let mut max_token_chars = 1;
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!(
                    "vocabulary line {}: invalid token {t:?}",
                    i + 1
                )));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!(
                    "vocabulary line {}: duplicate token {t:?}",
                    i + 1
                )));
            }
            max_token_chars = max_token_chars.max(t.trim_start_matches(CONT).chars().count());
        }
        Ok(Vocab {
            tokens,
            index,
            lowercase: false,
            max_token_chars,
        })
    }

    pub fn with_lowercase(mut self, lowercase: bool) -> Self {
        self.lowercase = lowercase;
        self
    }

    pub fn lowercase(&self) -> bool {
        self.lowercase
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIAL_TOKENS.len()
    }

    /// Learn a vocabulary of at most `target_size` entries from a corpus.
    ///
    /// The alphabet (every character seen, in word-initial and `##` form)
    /// is always included; then the most frequent adjacent piece pair is
    /// merged repeatedly, ties going to the pair that occurs first in the
    /// corpus. Merging stops at `target_size` or when the best pair occurs
    /// fewer than `min_freq` times.
    pub fn train<I, S>(
        corpus: I,
        target_size: usize,
        min_freq: usize,
        lowercase: bool,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_ids: HashMap<String, usize> = HashMap::new();
        let mut words: Vec<(Vec<String>, usize)> = Vec::new();
        for line in corpus {
            for w in pre_tokenize(line.as_ref(), lowercase) {
                match word_ids.get(&w) {
                    Some(&i) => words[i].1 += 1,
                    None => {
                        let pieces = w
                            .chars()
                            .enumerate()
                            .map(|(i, c)| {
                                if i == 0 {
                                    c.to_string()
                                } else {
                                    format!("{CONT}{c}")
                                }
                            })
                            .collect();
                        word_ids.insert(w, words.len());
                        words.push((pieces, 1));
                    }
                }
            }
        }
        if words.is_empty() {
            return Err(Error::Data(
                "cannot train a vocabulary on an empty corpus".into(),
            ));
        }

        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut alphabet: Vec<String> = words.iter().flat_map(|(p, _)| p.iter().cloned()).collect();
        alphabet.sort();
        alphabet.dedup();
        if target_size <= tokens.len() + alphabet.len() {
            return Err(Error::Parameter(format!(
                "target size {target_size} must exceed {} specials + {} alphabet symbols",
                tokens.len(),
                alphabet.len()
            )));
        }
        tokens.extend(alphabet);
        let mut known: std::collections::HashSet<String> = tokens.iter().cloned().collect();

        while tokens.len() < target_size {
            // (count, first occurrence) per adjacent pair
            let mut stats: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
            let mut order = 0usize;
            for (pieces, count) in &words {
                for pair in pieces.windows(2) {
                    let e = stats
                        .entry((pair[0].as_str(), pair[1].as_str()))
                        .or_insert((0, order));
                    e.0 += count;
                    order += 1;
                }
            }
            let best = stats
                .iter()
                .filter(|(_, &(c, _))| c >= min_freq.max(1))
                .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
                .map(|(&(l, r), _)| (l.to_string(), r.to_string()));
            let Some((left, right)) = best else { break };
            let merged = format!("{left}{}", right.trim_start_matches(CONT));
            for (pieces, _) in words.iter_mut() {
                let mut i = 0;
                while i + 1 < pieces.len() {
                    if pieces[i] == left && pieces[i + 1] == right {
                        pieces[i] = merged.clone();
                        pieces.remove(i + 1);
                    }
                    i += 1;
                }
            }
            if known.insert(merged.clone()) {
                tokens.push(merged);
            }
        }
        Ok(Self::from_tokens(tokens)?.with_lowercase(lowercase))
    }

    /// Union of two vocabularies: specials, then `a`'s tokens, then `b`'s unseen tokens.
    pub fn merge(a: &Vocab, b: &Vocab) -> Vocab {
        let mut tokens = a.tokens.clone();
        let mut seen: std::collections::HashSet<&str> =
            a.tokens.iter().map(String::as_str).collect();
        for t in &b.tokens {
            if seen.insert(t.as_str()) {
                tokens.push(t.clone());
            }
        }
        Self::from_tokens(tokens)
            .expect("union of valid vocabularies is valid")
            .with_lowercase(a.lowercase || b.lowercase)
    }

    fn encode_word(&self, word: &str, out: &mut Vec<u32>) {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let mut end = chars.len().min(start + self.max_token_chars);
            let mut found = None;
            while end > start {
                let body: String = chars[start..end].iter().collect();
                let candidate = if start == 0 {
                    body
                } else {
                    format!("{CONT}{body}")
                };
                if let Some(id) = self.id(&candidate) {
                    found = Some(id);
                    break;
                }
                end -= 1;
            }
            match found {
                Some(id) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }

    /// Token ids for `text` without specials or padding.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        for w in pre_tokenize(text, self.lowercase) {
            self.encode_word(&w, &mut ids);
        }
        ids
    }

    /// `[CLS] pieces… [SEP]` padded with `[PAD]` to `max_len`; overlong input is truncated.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSeq> {
        if max_len < 3 {
            return Err(Error::Parameter(format!(
                "max_len must be at least 3, got {max_len}"
            )));
        }
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        ids.extend(self.tokenize(text));
        ids.truncate(max_len - 1);
        ids.push(SEP);
        let real = ids.len();
        ids.resize(max_len, PAD);
        let attention_mask = (0..max_len).map(|i| u8::from(i < real)).collect();
        Ok(TokenSeq {
            ids,
            attention_mask,
        })
    }

    /// Reassemble text from ids, gluing `##` pieces and skipping padding and markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if matches!(id, PAD | CLS | SEP) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            if let Some(rest) = tok.strip_prefix(CONT) {
                out.push_str(rest);
            } else {
                if !out.is_empty() {
                    out.push(' ');
                }
                out.push_str(tok);
            }
        }
        out
    }

    /// One token per line; line number is the id.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let tokens = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_tokens(tokens)
    }
}
