use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessOptions {
    pub min_words: usize,
    pub max_words: usize,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        PreprocessOptions {
            min_words: 3,
            max_words: 64,
        }
    }
}

const KEPT_PUNCTUATION: &str = ".,;:!?'\"()-…";
const SENTENCE_END: &str = ".!?…";

/// Drop control and special characters and collapse runs of whitespace.
pub fn clean_text(text: &str) -> String {
    let kept: String = text
        .chars()
        .map(|c| if c.is_whitespace() { ' ' } else { c })
        .filter(|&c| c == ' ' || c.is_alphanumeric() || KEPT_PUNCTUATION.contains(c))
        .collect();
    kept.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Split after sentence-final punctuation that is followed by whitespace and an uppercase letter.
pub fn split_sentences(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        if SENTENCE_END.contains(chars[i]) {
            let mut j = i + 1;
            while j < chars.len() && chars[j].is_whitespace() {
                j += 1;
            }
            if j > i + 1 && j < chars.len() && chars[j].is_uppercase() {
                let s: String = chars[start..=i].iter().collect();
                out.push(s.trim().to_string());
                start = j;
                i = j;
                continue;
            }
        }
        i += 1;
    }
    let rest: String = chars[start..].iter().collect();
    if !rest.trim().is_empty() {
        out.push(rest.trim().to_string());
    }
    out.retain(|s| !s.is_empty());
    out
}

/// Clean, split into sentences, filter by whitespace word count and drop
/// exact duplicates, keeping first occurrences in order.
pub fn preprocess_corpus<S: AsRef<str>>(lines: &[S], opts: PreprocessOptions) -> Vec<String> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in lines {
        for s in split_sentences(&clean_text(line.as_ref())) {
            let words = s.split_whitespace().count();
            if words < opts.min_words || words > opts.max_words {
                continue;
            }
            if seen.insert(s.clone()) {
                out.push(s);
            }
        }
    }
    out
}
