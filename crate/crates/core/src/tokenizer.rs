//! Closed word-level vocabulary with byte fallback.

use std::collections::HashMap;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const VOCAB_SIZE: usize = 512;
const BYTE_BASE: u32 = (VOCAB_SIZE - 256) as u32;

const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Every word the synthetic grammars can emit.
pub const WORDS: &[&str] = &[
    // captions
    "a", "an", "at", "row", "column", "empty", "canvas", ",", ".",
    "red", "green", "blue", "yellow", "purple", "orange", "black", "cyan",
    "circle", "square", "triangle",
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9",
    // questions and prompts
    "what", "color", "is", "the", "?", "how", "many", "shapes", "are", "there",
    "left", "right", "above", "below", "or", "of", "describe", "image",
    "user", "assistant", ":", "answer", "photo", "with",
    // language-only sentences
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
    "nineteen", "twenty", "plus", "minus", "equals",
    "cat", "dog", "bird", "fish", "tree", "house", "car", "ball",
    "sees", "likes", "chases", "finds", "big", "small", "happy", "old",
];

#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::new()
    }
}

impl Tokenizer {
    pub fn new() -> Self {
        let mut vocab: Vec<String> = SPECIALS.iter().chain(WORDS).map(|s| s.to_string()).collect();
        let mut k = 0;
        while vocab.len() < BYTE_BASE as usize {
            vocab.push(format!("<reserved_{k}>"));
            k += 1;
        }
        vocab.extend((0..=255u8).map(|b| format!("<0x{b:02X}>")));
        let index = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        Tokenizer { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    /// Whitespace-split encoding; unknown words fall back to their UTF-8
    /// bytes.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            match self.index.get(word) {
                Some(&id) => out.push(id),
                _ => out.extend(word.bytes().map(|b| BYTE_BASE + b as u32)),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut words: Vec<String> = Vec::new();
        let mut bytes: Vec<u8> = Vec::new();
        let flush = |bytes: &mut Vec<u8>, words: &mut Vec<String>| {
            if !bytes.is_empty() {
                words.push(String::from_utf8_lossy(bytes).into_owned());
                bytes.clear();
            }
        };
        for &id in ids {
            if id >= BYTE_BASE && (id as usize) < VOCAB_SIZE {
                bytes.push((id - BYTE_BASE) as u8);
                continue;
            }
            flush(&mut bytes, &mut words);
            if id == PAD || id == BOS || id == EOS {
                continue;
            }
            words.push(self.token(id).unwrap_or("<unk>").to_string());
        }
        flush(&mut bytes, &mut words);
        words.join(" ")
    }

    /// Whether `text` encodes without byte fallback.
    pub fn covers(&self, text: &str) -> bool {
        text.split_whitespace().all(|w| self.index.contains_key(w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_is_fixed_size_and_unique() {
        let t = Tokenizer::new();
        assert_eq!(t.vocab_size(), VOCAB_SIZE);
        assert_eq!(t.index.len(), VOCAB_SIZE);
    }

    #[test]
    fn round_trips_known_and_unknown_words() {
        let t = Tokenizer::new();
        let s = "a red circle at row 0 column 1 , zebra";
        let ids = t.encode(s);
        assert_eq!(ids.len(), 9 + 5);
        assert_eq!(t.decode(&ids), s);
        assert!(!t.covers(s));
        assert!(t.covers("two plus three equals five"));
    }
}
