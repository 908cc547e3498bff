//! Word-level tokenization, vocabulary and length capping.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Strategy};
use crate::error::{Error, Result};
use crate::hash::fnv1a64_hex;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const CLS: u32 = 4;
pub const SEP_USER: u32 = 5;
pub const SEP_SYSTEM: u32 = 6;
/// First of the eight strategy token ids, in strategy-id order.
pub const STRATEGY_BASE: u32 = 7;
pub const RESERVED: usize = STRATEGY_BASE as usize + Strategy::COUNT;

pub const USER_MARKER: &str = "User:";
pub const SYSTEM_MARKER: &str = "System:";

pub fn strategy_token(strategy: Strategy) -> u32 {
    STRATEGY_BASE + strategy.id() as u32
}

pub fn token_strategy(id: u32) -> Option<Strategy> {
    id.checked_sub(STRATEGY_BASE)
        .and_then(|i| Strategy::from_id(i as usize))
}

fn reserved_tokens() -> Vec<String> {
    let mut t: Vec<String> = ["<pad>", "<bos>", "<eos>", "<unk>", "<cls>", USER_MARKER, SYSTEM_MARKER]
        .iter()
        .map(|s| s.to_string())
        .collect();
    t.extend(Strategy::ALL.iter().map(|s| s.bracketed()));
    t
}

/// Splits text into lowercased words and single punctuation marks. Speaker
/// markers and bracketed strategy names survive as single tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '[' {
            if let Some(len) = chars[i + 1..].iter().position(|&c| c == ']') {
                let inner: String = chars[i + 1..i + 1 + len].iter().collect();
                if let Ok(s) = Strategy::parse(&inner) {
                    out.push(s.bracketed());
                    i += len + 2;
                    continue;
                }
            }
        }
        if c.is_alphanumeric() {
            let start = i;
            while i < chars.len()
                && (chars[i].is_alphanumeric()
                    || (chars[i] == '\''
                        && i + 1 < chars.len()
                        && chars[i + 1].is_alphanumeric()
                        && i > start))
            {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            if i < chars.len() && chars[i] == ':' && (word == "User" || word == "System") {
                out.push(format!("{word}:"));
                i += 1;
            } else {
                out.push(word.to_lowercase());
            }
            continue;
        }
        out.push(c.to_string());
        i += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let reserved = reserved_tokens();
        if tokens.len() < reserved.len() || tokens[..reserved.len()] != reserved[..] {
            return Err(Error::Parse {
                context: "vocabulary".into(),
                message: "reserved tokens missing or out of order".into(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Parse {
                    context: "vocabulary".into(),
                    message: format!("duplicate token {t:?}"),
                });
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Identifies the exact id assignment; checkpoints store it.
    pub fn hash(&self) -> String {
        fnv1a64_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::corpus::write_json(
            path.as_ref(),
            &VocabFile {
                tokens: self.tokens.clone(),
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabFile = serde_json::from_str(&json).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
        Vocabulary::from_tokens(file.tokens)
    }
}

/// Accumulates token counts from arbitrary texts before freezing ids.
#[derive(Debug, Default)]
pub struct VocabBuilder {
    counts: BTreeMap<String, usize>,
    texts: usize,
}

impl VocabBuilder {
    pub fn add_text(&mut self, text: &str) {
        self.texts += 1;
        for t in tokenize(text) {
            *self.counts.entry(t).or_default() += 1;
        }
    }

    pub fn add_dialogues(&mut self, dialogues: &[Dialogue]) {
        for d in dialogues {
            if !d.persona.is_empty() {
                self.add_text(&d.persona);
            }
            for turn in &d.turns {
                self.add_text(&turn.text);
            }
        }
    }

    /// Ids after the reserved block are ordered by descending count, then
    /// lexicographically.
    pub fn build(self, min_count: usize) -> Result<Vocabulary> {
        if min_count == 0 {
            return Err(Error::Config("min_count must be at least 1".into()));
        }
        if self.texts == 0 {
            return Err(Error::EmptyCorpus);
        }
        let mut tokens = reserved_tokens();
        let mut kept: Vec<(String, usize)> = self
            .counts
            .into_iter()
            .filter(|(t, c)| *c >= min_count && !tokens.contains(t))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Vocabulary::from_tokens(tokens)
    }
}

pub fn build_vocab(train: &[Dialogue], min_count: usize) -> Result<Vocabulary> {
    let mut builder = VocabBuilder::default();
    builder.add_dialogues(train);
    builder.build(min_count)
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Which end survives when a sequence exceeds its cap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Truncation {
    /// Drop from the right; used for demonstrations and cognitive states.
    KeepEarliest,
    /// Drop from the left; used for dialogue context.
    KeepLatest,
}

pub fn encode(text: &str, vocab: &Vocabulary, cap: usize) -> TokenSeq {
    encode_with(text, vocab, cap, Truncation::KeepEarliest)
}

pub fn encode_with(text: &str, vocab: &Vocabulary, cap: usize, truncation: Truncation) -> TokenSeq {
    assert!(cap >= 1, "encode cap must be at least 1");
    let mut ids: Vec<u32> = tokenize(text).iter().map(|t| vocab.id(t)).collect();
    truncate(&mut ids, cap, truncation);
    TokenSeq { ids }
}

pub(crate) fn truncate(ids: &mut Vec<u32>, cap: usize, truncation: Truncation) {
    if ids.len() > cap {
        match truncation {
            Truncation::KeepEarliest => ids.truncate(cap),
            Truncation::KeepLatest => {
                ids.drain(..ids.len() - cap);
            }
        }
    }
}

pub fn decode(seq: &TokenSeq, vocab: &Vocabulary) -> Result<String> {
    decode_ids(&seq.ids, vocab)
}

pub fn decode_ids(ids: &[u32], vocab: &Vocabulary) -> Result<String> {
    let mut words = Vec::with_capacity(ids.len());
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::InvalidTokenId(id))?;
        if !matches!(id, PAD | BOS | EOS) {
            words.push(token);
        }
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use proptest::prelude::*;
    use crate::corpus::Strategy;

    fn one(text: &str) -> Vec<Dialogue> {
        vec![Dialogue {
            id: "d".into(),
            persona: String::new(),
            situation: String::new(),
            turns: vec![Turn::seeker(text)],
        }]
    }

    #[test]
    fn min_count_filters() {
        let v = build_vocab(&one("hello hello world"), 2).unwrap();
        assert!(v.contains("hello"));
        assert!(!v.contains("world"));
        assert_eq!(v.id("world"), UNK);
    }

    #[test]
    fn reserved_block_is_stable() {
        let v = build_vocab(&one("x"), 1).unwrap();
        for s in Strategy::ALL {
            assert_eq!(v.id(&s.bracketed()), strategy_token(s));
            assert_eq!(token_strategy(strategy_token(s)), Some(s));
        }
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id(USER_MARKER), SEP_USER);
        assert_eq!(v.id(SYSTEM_MARKER), SEP_SYSTEM);
        assert_eq!(token_strategy(EOS), None);
        assert_eq!(v.len(), RESERVED + 1);
    }

    #[test]
    fn deterministic_ids() {
        let a = build_vocab(&one("b a c a b a"), 1).unwrap();
        let b = build_vocab(&one("b a c a b a"), 1).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.id("a"), RESERVED as u32);
        assert_eq!(a.id("b"), RESERVED as u32 + 1);
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn empty_corpus_and_zero_min_count() {
        assert!(matches!(build_vocab(&[], 1), Err(Error::EmptyCorpus)));
        assert!(build_vocab(&one("x"), 0).is_err());
    }

    #[test]
    fn tokenizer_keeps_markers_and_strategies() {
        assert_eq!(
            tokenize("User: Help me! System: [question] Why?"),
            vec!["User:", "help", "me", "!", "System:", "[Question]", "why", "?"]
        );
        assert_eq!(tokenize("don't [hug] x"), vec!["don't", "[", "hug", "]", "x"]);
    }

    #[test]
    fn encode_known_and_unknown() {
        let v = build_vocab(&one("hello world"), 1).unwrap();
        let s = encode("hello world", &v, 512);
        assert_eq!(s.len(), 2);
        assert!(s.ids.iter().all(|&i| i != UNK));
        assert_eq!(encode("zebra", &v, 512).ids, vec![UNK]);
    }

    #[test]
    fn encode_caps_length() {
        let text = vec!["w"; 600].join(" ");
        let v = build_vocab(&one("w"), 1).unwrap();
        assert_eq!(encode(&text, &v, 512).len(), 512);
        let text: String = (0..600).map(|i| format!("t{i} ")).collect();
        let v = build_vocab(&one(&text), 1).unwrap();
        let early = encode_with(&text, &v, 5, Truncation::KeepEarliest);
        let late = encode_with(&text, &v, 5, Truncation::KeepLatest);
        assert_eq!(decode(&early, &v).unwrap(), "t0 t1 t2 t3 t4");
        assert_eq!(decode(&late, &v).unwrap(), "t595 t596 t597 t598 t599");
    }

    #[test]
    fn decode_strips_control_tokens() {
        let v = build_vocab(&one("hi"), 1).unwrap();
        let hi = v.id("hi");
        assert_eq!(decode(&TokenSeq::new(vec![BOS, hi, EOS]), &v).unwrap(), "hi");
        assert_eq!(decode(&TokenSeq::default(), &v).unwrap(), "");
        assert!(matches!(
            decode(&TokenSeq::new(vec![9999]), &v),
            Err(Error::InvalidTokenId(9999))
        ));
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&one("alpha beta"), 1).unwrap();
        let p = dir.path().join("vocab.json");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }

    proptest! {
        #[test]
        fn round_trip_in_vocab(words in prop::collection::vec("[a-z]{1,6}", 1..30)) {
            let text = words.join("  ");
            let v = build_vocab(&one(&text), 1).unwrap();
            let ids = encode(&text, &v, 1000);
            prop_assert_eq!(decode(&ids, &v).unwrap(), words.join(" "));
        }

        #[test]
        fn prefix_encodes_to_prefix(words in prop::collection::vec("[a-z]{1,6}", 1..30), cut in 0usize..30, cap in 1usize..40) {
            let cut = cut.min(words.len());
            let v = build_vocab(&one(&words.join(" ")), 1).unwrap();
            let full = encode(&words.join(" "), &v, 1000);
            let prefix = encode(&words[..cut].join(" "), &v, 1000);
            prop_assert_eq!(&full.ids[..cut], &prefix.ids[..]);
            prop_assert!(encode(&words.join(" "), &v, cap).len() <= cap);
        }
    }
}
