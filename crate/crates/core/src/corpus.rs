//! Dialogue corpus ingestion, splitting and the strategy-response retrieval base.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// The eight supporter response strategies, in their fixed id order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Strategy {
    Question,
    RestatementOrParaphrasing,
    ReflectionOfFeelings,
    SelfDisclosure,
    AffirmationAndReassurance,
    ProvidingSuggestions,
    Information,
    Others,
}

impl Strategy {
    pub const COUNT: usize = 8;

    pub const ALL: [Strategy; Strategy::COUNT] = [
        Strategy::Question,
        Strategy::RestatementOrParaphrasing,
        Strategy::ReflectionOfFeelings,
        Strategy::SelfDisclosure,
        Strategy::AffirmationAndReassurance,
        Strategy::ProvidingSuggestions,
        Strategy::Information,
        Strategy::Others,
    ];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn from_id(id: usize) -> Option<Strategy> {
        Strategy::ALL.get(id).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Question => "Question",
            Strategy::RestatementOrParaphrasing => "Restatement or Paraphrasing",
            Strategy::ReflectionOfFeelings => "Reflection of Feelings",
            Strategy::SelfDisclosure => "Self-disclosure",
            Strategy::AffirmationAndReassurance => "Affirmation and Reassurance",
            Strategy::ProvidingSuggestions => "Providing Suggestions",
            Strategy::Information => "Information",
            Strategy::Others => "Others",
        }
    }

    /// Bracketed form used as a passage prefix and as a decoder token.
    pub fn bracketed(self) -> String {
        format!("[{}]", self.name())
    }

    /// Case-insensitive lookup after trimming; anything else is rejected.
    pub fn parse(name: &str) -> Result<Strategy> {
        let wanted = name.trim();
        Strategy::ALL
            .iter()
            .copied()
            .find(|s| s.name().eq_ignore_ascii_case(wanted))
            .ok_or_else(|| Error::UnknownStrategy(name.to_string()))
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        Strategy::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Seeker,
    Supporter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
}

impl Turn {
    pub fn seeker(text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Seeker,
            text: text.into(),
            strategy: None,
        }
    }

    pub fn supporter(strategy: Strategy, text: impl Into<String>) -> Self {
        Turn {
            speaker: Speaker::Supporter,
            text: text.into(),
            strategy: Some(strategy),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    #[serde(default)]
    pub persona: String,
    #[serde(default)]
    pub situation: String,
    pub turns: Vec<Turn>,
}

/// One supporter response together with everything that precedes it.
#[derive(Debug, Clone, Copy)]
pub struct Exchange<'a> {
    pub dialogue: &'a Dialogue,
    /// Index of the supporter turn inside `dialogue.turns`.
    pub turn_index: usize,
}

impl<'a> Exchange<'a> {
    /// The seeker post answered by this response.
    pub fn post(&self) -> &'a str {
        &self.dialogue.turns[self.turn_index - 1].text
    }

    /// Turns strictly before the post.
    pub fn history(&self) -> &'a [Turn] {
        &self.dialogue.turns[..self.turn_index - 1]
    }

    pub fn response(&self) -> &'a Turn {
        &self.dialogue.turns[self.turn_index]
    }

    pub fn strategy(&self) -> Strategy {
        self.response()
            .strategy
            .expect("supporter turns always carry a strategy")
    }
}

impl Dialogue {
    /// Supporter turns that directly follow a seeker post.
    pub fn exchanges(&self) -> impl Iterator<Item = Exchange<'_>> {
        (1..self.turns.len())
            .filter(move |&i| {
                self.turns[i].speaker == Speaker::Supporter
                    && self.turns[i - 1].speaker == Speaker::Seeker
            })
            .map(move |turn_index| Exchange {
                dialogue: self,
                turn_index,
            })
    }

    fn validate(&self, record: usize) -> Result<()> {
        let ctx = || format!("record {record} (id {:?})", self.id);
        if self.turns.is_empty() {
            return Err(Error::Parse {
                context: ctx(),
                message: "dialogue has no turns".into(),
            });
        }
        for (i, turn) in self.turns.iter().enumerate() {
            match (turn.speaker, turn.strategy) {
                (Speaker::Supporter, None) => {
                    return Err(Error::Parse {
                        context: ctx(),
                        message: format!("supporter turn {i} has no strategy"),
                    })
                }
                (Speaker::Seeker, Some(_)) => {
                    return Err(Error::Parse {
                        context: ctx(),
                        message: format!("seeker turn {i} carries a strategy"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Collapses runs of same-speaker turns into one turn joined by a single
    /// space. A merged supporter turn keeps the first strategy of the run.
    fn merge_consecutive(&mut self) {
        let mut merged: Vec<Turn> = Vec::with_capacity(self.turns.len());
        for turn in self.turns.drain(..) {
            match merged.last_mut() {
                Some(last) if last.speaker == turn.speaker => {
                    last.text.push(' ');
                    last.text.push_str(&turn.text);
                }
                _ => merged.push(turn),
            }
        }
        self.turns = merged;
    }
}

/// Parses corpus JSON already held in memory.
pub fn parse_corpus(json: &str, source: &str) -> Result<Vec<Dialogue>> {
    let mut dialogues: Vec<Dialogue> = serde_json::from_str(json).map_err(|e| Error::Parse {
        context: format!("{source} line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    for (record, dialogue) in dialogues.iter_mut().enumerate() {
        dialogue.validate(record)?;
        dialogue.merge_consecutive();
    }
    Ok(dialogues)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Dialogue>> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&json, &path.display().to_string())
}

pub fn save_corpus(path: impl AsRef<Path>, dialogues: &[Dialogue]) -> Result<()> {
    write_json(path.as_ref(), dialogues)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value).map_err(|e| Error::Parse {
        context: path.display().to_string(),
        message: e.to_string(),
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub valid_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.8,
            valid_fraction: 0.1,
            test_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Vec<Dialogue>,
    pub valid: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
}

pub const MIN_SPLIT_DIALOGUES: usize = 10;

/// Shuffles at dialogue granularity. Valid and test sizes are floored and the
/// remainder goes to train. Each split keeps the input order of its members.
pub fn split_corpus(dialogues: &[Dialogue], spec: &SplitSpec) -> Result<Splits> {
    let sum = spec.train_fraction + spec.valid_fraction + spec.test_fraction;
    if (sum - 1.0).abs() > 1e-9
        || [spec.train_fraction, spec.valid_fraction, spec.test_fraction]
            .iter()
            .any(|f| *f < 0.0)
    {
        return Err(Error::Config(format!(
            "split fractions must be non-negative and sum to 1, got {sum}"
        )));
    }
    let n = dialogues.len();
    if n < MIN_SPLIT_DIALOGUES {
        return Err(Error::TooFewDialogues {
            needed: MIN_SPLIT_DIALOGUES,
            got: n,
        });
    }
    let n_valid = (n as f64 * spec.valid_fraction).floor() as usize;
    let n_test = (n as f64 * spec.test_fraction).floor() as usize;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut valid_idx = order[..n_valid].to_vec();
    let mut test_idx = order[n_valid..n_valid + n_test].to_vec();
    let mut train_idx = order[n_valid + n_test..].to_vec();
    let pick = |idx: &mut Vec<usize>| {
        idx.sort_unstable();
        idx.iter().map(|&i| dialogues[i].clone()).collect::<Vec<_>>()
    };
    Ok(Splits {
        train: pick(&mut train_idx),
        valid: pick(&mut valid_idx),
        test: pick(&mut test_idx),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPassage {
    pub passage_id: usize,
    pub strategy_text: String,
    pub response_text: String,
    pub query_text: String,
    pub source_dialogue_id: String,
    /// Turn index of the response inside its source dialogue.
    pub source_turn: usize,
}

impl RetrievalPassage {
    pub fn passage_text(&self) -> String {
        format!("{} {}", self.strategy_text, self.response_text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalBase {
    pub passages: Vec<RetrievalPassage>,
    /// Supporter turns dropped because no seeker post preceded them.
    pub skipped: usize,
}

impl RetrievalBase {
    /// The passage built from a given response, used for self-exclusion.
    pub fn passage_for(&self, dialogue_id: &str, turn_index: usize) -> Option<usize> {
        self.passages
            .iter()
            .find(|p| p.source_dialogue_id == dialogue_id && p.source_turn == turn_index)
            .map(|p| p.passage_id)
    }
}

pub fn build_retrieval_base(train: &[Dialogue]) -> RetrievalBase {
    let mut passages = Vec::new();
    let mut skipped = 0;
    for dialogue in train {
        let supporter_turns = dialogue
            .turns
            .iter()
            .filter(|t| t.speaker == Speaker::Supporter)
            .count();
        let mut used = 0;
        for ex in dialogue.exchanges() {
            used += 1;
            passages.push(RetrievalPassage {
                passage_id: passages.len(),
                strategy_text: ex.strategy().bracketed(),
                response_text: ex.response().text.clone(),
                query_text: ex.post().to_string(),
                source_dialogue_id: dialogue.id.clone(),
                source_turn: ex.turn_index,
            });
        }
        skipped += supporter_turns - used;
    }
    if skipped > 0 {
        log::info!("retrieval base: skipped {skipped} supporter turns without a preceding post");
    }
    RetrievalBase { passages, skipped }
}

pub fn save_retrieval_base(path: impl AsRef<Path>, base: &RetrievalBase) -> Result<()> {
    write_json(path.as_ref(), &base.passages)
}

pub fn load_retrieval_base(path: impl AsRef<Path>) -> Result<RetrievalBase> {
    let path = path.as_ref();
    let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let passages: Vec<RetrievalPassage> =
        serde_json::from_str(&json).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            message: e.to_string(),
        })?;
    Ok(RetrievalBase {
        passages,
        skipped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dialogue(id: &str, turns: Vec<Turn>) -> Dialogue {
        Dialogue {
            id: id.into(),
            persona: String::new(),
            situation: String::new(),
            turns,
        }
    }

    #[test]
    fn strategy_ids_and_names_are_bijective() {
        for (i, s) in Strategy::ALL.iter().enumerate() {
            assert_eq!(s.id(), i);
            assert_eq!(Strategy::from_id(i), Some(*s));
            assert_eq!(Strategy::parse(s.name()).unwrap(), *s);
        }
        assert_eq!(Strategy::from_id(8), None);
    }

    #[test]
    fn strategy_parse_trims_and_ignores_case() {
        assert_eq!(Strategy::parse("  question ").unwrap(), Strategy::Question);
        assert_eq!(
            Strategy::parse("SELF-DISCLOSURE").unwrap(),
            Strategy::SelfDisclosure
        );
        assert!(matches!(
            Strategy::parse("Questions"),
            Err(Error::UnknownStrategy(_))
        ));
    }

    #[test]
    fn parse_one_dialogue_four_turns() {
        let json = r#"[{"id":"d0","persona":"p","situation":"s","turns":[
            {"speaker":"seeker","text":"hi"},
            {"speaker":"supporter","text":"hello","strategy":"Question"},
            {"speaker":"seeker","text":"sad"},
            {"speaker":"supporter","text":"sorry","strategy":"reflection of feelings"}]}]"#;
        let d = parse_corpus(json, "inline").unwrap();
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].turns.len(), 4);
        assert_eq!(d[0].turns[1].strategy, Some(Strategy::Question));
        assert_eq!(d[0].turns[1].strategy.unwrap().id(), 0);
    }

    #[test]
    fn consecutive_turns_merge_with_one_space() {
        let json = r#"[{"id":"d0","turns":[
            {"speaker":"seeker","text":"a"},
            {"speaker":"seeker","text":"b"},
            {"speaker":"supporter","text":"c","strategy":"Others"}]}]"#;
        let d = parse_corpus(json, "inline").unwrap();
        assert_eq!(d[0].turns.len(), 2);
        assert_eq!(d[0].turns[0].text, "a b");
        assert_eq!(d[0].persona, "");
    }

    #[test]
    fn unknown_strategy_is_an_error() {
        let json = r#"[{"id":"d0","turns":[{"speaker":"supporter","text":"c","strategy":"Hug"}]}]"#;
        let err = parse_corpus(json, "inline").unwrap_err();
        assert!(err.to_string().contains("Hug"), "{err}");
    }

    #[test]
    fn malformed_json_reports_line() {
        let err = parse_corpus("[\n{\"id\": 3}", "inline").unwrap_err();
        match err {
            Error::Parse { context, .. } => assert!(context.contains("line 2"), "{context}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn supporter_without_strategy_is_rejected() {
        let json = r#"[{"id":"d0","turns":[{"speaker":"supporter","text":"c"}]}]"#;
        assert!(parse_corpus(json, "inline").is_err());
    }

    #[test]
    fn split_sizes() {
        let make = |n: usize| {
            (0..n)
                .map(|i| dialogue(&format!("d{i}"), vec![Turn::seeker("x")]))
                .collect::<Vec<_>>()
        };
        let spec = SplitSpec::default();
        let s = split_corpus(&make(10), &spec).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let s = split_corpus(&make(13), &spec).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (11, 1, 1));
        assert!(matches!(
            split_corpus(&make(9), &spec),
            Err(Error::TooFewDialogues { got: 9, .. })
        ));
        assert_eq!(
            split_corpus(&make(25), &spec).unwrap(),
            split_corpus(&make(25), &spec).unwrap()
        );
    }

    #[test]
    fn retrieval_base_template() {
        let d = dialogue(
            "d0",
            vec![
                Turn::seeker("I lost my job"),
                Turn::supporter(Strategy::Question, "What happened?"),
            ],
        );
        let base = build_retrieval_base(&[d]);
        assert_eq!(base.passages.len(), 1);
        let p = &base.passages[0];
        assert_eq!(p.strategy_text, "[Question]");
        assert_eq!(p.response_text, "What happened?");
        assert_eq!(p.query_text, "I lost my job");
        assert_eq!(p.passage_text(), "[Question] What happened?");
    }

    #[test]
    fn opening_supporter_turn_is_skipped() {
        let d = dialogue(
            "d0",
            vec![
                Turn::supporter(Strategy::Question, "How are you?"),
                Turn::seeker("bad"),
                Turn::supporter(Strategy::Others, "oh"),
            ],
        );
        let base = build_retrieval_base(&[d]);
        assert_eq!(base.passages.len(), 1);
        assert_eq!(base.skipped, 1);
        assert_eq!(base.passages[0].source_turn, 2);
        assert_eq!(base.passage_for("d0", 2), Some(0));
    }
}
