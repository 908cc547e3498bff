//! Cognitive-state generation and the encoder → refiner → selector stack
//! that turns those states into cognition-aware context features.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::hash::fnv1a64_hex;
use crate::nn::{EncoderStack, Fwd, Init, Linear};
use crate::text::tokenize;

pub const STATES_PER_RELATION: usize = 5;

/// Processing order is fixed: intent, need, effect, want.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CognitiveRelation {
    Intent,
    Need,
    Effect,
    Want,
}

impl CognitiveRelation {
    pub const ALL: [CognitiveRelation; 4] = [
        CognitiveRelation::Intent,
        CognitiveRelation::Need,
        CognitiveRelation::Effect,
        CognitiveRelation::Want,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CognitiveRelation::Intent => "intent",
            CognitiveRelation::Need => "need",
            CognitiveRelation::Effect => "effect",
            CognitiveRelation::Want => "want",
        }
    }
}

impl fmt::Display for CognitiveRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognitiveBundle {
    states: BTreeMap<CognitiveRelation, Vec<String>>,
}

impl CognitiveBundle {
    pub fn new(states: BTreeMap<CognitiveRelation, Vec<String>>) -> Result<Self> {
        for relation in CognitiveRelation::ALL {
            let list = states
                .get(&relation)
                .ok_or_else(|| Error::Generation(format!("relation {relation} missing")))?;
            if list.len() != STATES_PER_RELATION {
                return Err(Error::Generation(format!(
                    "relation {relation} has {} states, expected {STATES_PER_RELATION}",
                    list.len()
                )));
            }
            if list.iter().any(|s| s.trim().is_empty()) {
                return Err(Error::Generation(format!("relation {relation} has an empty state")));
            }
        }
        if states.len() != CognitiveRelation::ALL.len() {
            return Err(Error::Generation("unexpected extra relations".into()));
        }
        Ok(CognitiveBundle { states })
    }

    pub fn states(&self, relation: CognitiveRelation) -> &[String] {
        &self.states[&relation]
    }

    /// `COM^r`: the five states joined by blanks.
    pub fn sequence(&self, relation: CognitiveRelation) -> String {
        self.states(relation).join(" ")
    }

    pub fn relations(&self) -> impl Iterator<Item = CognitiveRelation> + '_ {
        self.states.keys().copied()
    }
}

/// Source of textual cognitive states for a seeker post.
pub trait CognitiveStateProvider: Send + Sync {
    fn generate(&self, post: &str) -> Result<CognitiveBundle>;
}

pub fn generate_states(provider: &dyn CognitiveStateProvider, post: &str) -> Result<CognitiveBundle> {
    if post.trim().is_empty() {
        return Err(Error::EmptyPost);
    }
    provider.generate(post)
}

const STOPWORDS: &[&str] = &[
    "a", "about", "am", "an", "and", "are", "as", "at", "be", "been", "but", "by", "can", "do",
    "for", "from", "had", "has", "have", "he", "her", "him", "his", "how", "i", "i'm", "if", "in",
    "is", "it", "it's", "just", "me", "my", "no", "not", "of", "on", "or", "she", "so", "that",
    "the", "their", "them", "then", "there", "they", "this", "to", "too", "up", "very", "was",
    "we", "were", "what", "when", "with", "you", "your", "feel", "feeling", "really", "all",
    "will", "would", "im", "don't", "get", "got",
];

const TEMPLATES: [(CognitiveRelation, [&str; STATES_PER_RELATION]); 4] = [
    (
        CognitiveRelation::Intent,
        [
            "seeker intends to talk about {a}",
            "seeker intends to share {b}",
            "seeker intends to vent about {a} and {b}",
            "seeker intends to understand {c}",
            "seeker intends to get past {a}",
        ],
    ),
    (
        CognitiveRelation::Need,
        [
            "seeker needs support with {a}",
            "seeker needs to cope with {b}",
            "seeker needs advice about {c}",
            "seeker needs someone to listen about {a}",
            "seeker needs time after {b}",
        ],
    ),
    (
        CognitiveRelation::Effect,
        [
            "seeker feels upset about {a}",
            "seeker feels stressed by {b}",
            "seeker feels worried about {c}",
            "seeker feels tired of {a}",
            "seeker feels hurt by {b}",
        ],
    ),
    (
        CognitiveRelation::Want,
        [
            "seeker wants to fix {a}",
            "seeker wants comfort about {b}",
            "seeker wants to move on from {c}",
            "seeker wants answers about {a}",
            "seeker wants to feel okay about {b}",
        ],
    ),
];

/// Deterministic stand-in for a generative commonsense model: the most
/// frequent content words of the post are slotted into five relation-specific
/// templates per relation.
#[derive(Debug, Clone, Default)]
pub struct TemplateProvider;

impl TemplateProvider {
    /// Content words ranked by frequency, ties by first occurrence.
    pub fn keywords(post: &str, k: usize) -> Vec<String> {
        let mut counts: HashMap<String, (usize, usize)> = HashMap::new();
        for (pos, token) in tokenize(post).into_iter().enumerate() {
            if !token.chars().any(char::is_alphanumeric) || STOPWORDS.contains(&token.as_str()) {
                continue;
            }
            counts.entry(token).or_insert((0, pos)).0 += 1;
        }
        let mut ranked: Vec<(String, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.into_iter().take(k).map(|(t, _)| t).collect()
    }

    /// Words every template may emit, for vocabulary construction.
    pub fn template_text() -> String {
        TEMPLATES
            .iter()
            .flat_map(|(_, t)| t.iter())
            .map(|t| t.replace("{a}", "").replace("{b}", "").replace("{c}", ""))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl CognitiveStateProvider for TemplateProvider {
    fn generate(&self, post: &str) -> Result<CognitiveBundle> {
        let mut words = TemplateProvider::keywords(post, 3);
        if words.is_empty() {
            words.push("things".to_string());
        }
        let slot = |i: usize| words[i % words.len()].as_str();
        let states = TEMPLATES
            .iter()
            .map(|(relation, templates)| {
                let filled = templates
                    .iter()
                    .map(|t| {
                        t.replace("{a}", slot(0))
                            .replace("{b}", slot(1))
                            .replace("{c}", slot(2))
                    })
                    .collect();
                (*relation, filled)
            })
            .collect();
        CognitiveBundle::new(states)
    }
}

/// Key used by precomputed-state files: FNV-1a of the trimmed post, hex.
pub fn post_hash(post: &str) -> String {
    fnv1a64_hex(post.trim().as_bytes())
}

/// Precomputed states keyed by [`post_hash`].
#[derive(Debug, Clone, Default)]
pub struct FileProvider {
    entries: HashMap<String, CognitiveBundle>,
}

impl FileProvider {
    pub fn from_json(json: &str) -> Result<Self> {
        let raw: HashMap<String, BTreeMap<CognitiveRelation, Vec<String>>> =
            serde_json::from_str(json).map_err(|e| Error::Parse {
                context: "precomputed cognitive states".into(),
                message: e.to_string(),
            })?;
        let entries = raw
            .into_iter()
            .map(|(k, v)| Ok((k, CognitiveBundle::new(v)?)))
            .collect::<Result<_>>()?;
        Ok(FileProvider { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let json = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FileProvider::from_json(&json)
    }

    pub fn insert(&mut self, post: &str, bundle: CognitiveBundle) {
        self.entries.insert(post_hash(post), bundle);
    }

    pub fn to_json(&self) -> String {
        let sorted: BTreeMap<&String, &BTreeMap<CognitiveRelation, Vec<String>>> =
            self.entries.iter().map(|(k, v)| (k, &v.states)).collect();
        serde_json::to_string_pretty(&sorted).expect("bundles always serialize")
    }
}

impl CognitiveStateProvider for FileProvider {
    fn generate(&self, post: &str) -> Result<CognitiveBundle> {
        self.entries
            .get(&post_hash(post))
            .cloned()
            .ok_or_else(|| Error::Generation(format!("no precomputed states for post {post:?}")))
    }
}

/// Cognitive encoder (`d` wide, with a learned CLS row), refiner (`2d` wide)
/// and selector (sigmoid gate followed by a one-hidden-layer ReLU MLP).
#[derive(Debug, Clone)]
pub struct CognitionStack {
    pub width: usize,
    pub cls: crate::autograd::ParamId,
    pub encoder: EncoderStack,
    pub refiner: EncoderStack,
    pub mlp_hidden: Linear,
    pub mlp_out: Linear,
}

impl CognitionStack {
    pub fn new(
        init: &mut Init,
        width: usize,
        heads: usize,
        encoder_layers: usize,
        refiner_layers: usize,
        ff_mult: usize,
    ) -> Self {
        let wide = 2 * width;
        CognitionStack {
            width,
            cls: init.normal("cog.cls".into(), 1, width, 0.02),
            encoder: EncoderStack::new(init, "cog.enc", encoder_layers, width, heads, ff_mult * width),
            refiner: EncoderStack::new(init, "cog.ref", refiner_layers, wide, heads, ff_mult * wide),
            mlp_hidden: Linear::new(init, "cog.sel.hidden", wide, wide),
            mlp_out: Linear::new(init, "cog.sel.out", wide, width),
        }
    }

    /// Prepends the CLS row to `E_C` and encodes; returns the full output and
    /// its first row.
    pub fn cognitive_encode(&self, f: &mut Fwd, states: Var, states_valid: &[bool]) -> Result<(Var, Var)> {
        let (rows, width) = f.g.shape(states);
        if width != self.width || rows != states_valid.len() {
            return Err(Error::DimensionMismatch(format!(
                "cognitive states are {rows}x{width}, expected {}x{}",
                states_valid.len(),
                self.width
            )));
        }
        let cls = f.p(self.cls);
        let with_cls = f.g.concat_rows(&[cls, states]);
        let mut valid = Vec::with_capacity(rows + 1);
        valid.push(true);
        valid.extend_from_slice(states_valid);
        let encoded = self.encoder.forward(f, with_cls, &valid);
        let summary = f.g.rows(encoded, 0, 1);
        Ok((encoded, summary))
    }

    /// Token-level merge: `h_enc` is broadcast onto every context row and
    /// concatenated along the feature axis, then refined at width `2d`.
    pub fn cognitive_refine(&self, f: &mut Fwd, context: Var, summary: Var, context_valid: &[bool]) -> Result<Var> {
        let (rows, width) = f.g.shape(context);
        if width != self.width || f.g.shape(summary) != (1, self.width) || rows != context_valid.len() {
            return Err(Error::DimensionMismatch(format!(
                "context {rows}x{width} and summary {:?} do not fit width {}",
                f.g.shape(summary),
                self.width
            )));
        }
        let merged = self.merge(f, context, summary);
        Ok(self.refiner.forward(f, merged, context_valid))
    }

    pub(crate) fn merge(&self, f: &mut Fwd, context: Var, summary: Var) -> Var {
        let rows = f.g.shape(context).0;
        let spread = f.g.broadcast_rows(summary, rows);
        f.g.concat_cols(&[context, spread])
    }

    /// Returns `(H_sel, H_C)`.
    pub fn cognitive_select(&self, f: &mut Fwd, refined: Var) -> (Var, Var) {
        let gate = f.g.sigmoid(refined);
        let selected = f.g.mul(gate, refined);
        let hidden = self.mlp_hidden.forward(f, selected);
        let hidden = f.g.relu(hidden);
        let out = self.mlp_out.forward(f, hidden);
        (selected, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Mat, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn template_bundle_shape_and_determinism() {
        let p = TemplateProvider;
        let post = "I lost my job and my job was everything to me";
        let a = generate_states(&p, post).unwrap();
        assert_eq!(a, generate_states(&p, post).unwrap());
        let relations: Vec<_> = a.relations().collect();
        assert_eq!(relations, CognitiveRelation::ALL.to_vec());
        for r in CognitiveRelation::ALL {
            assert_eq!(a.states(r).len(), 5);
        }
        assert!(a.states(CognitiveRelation::Intent)[0].contains("job"));
        assert!(matches!(generate_states(&p, " "), Err(Error::EmptyPost)));
        let sparse = generate_states(&p, "I am so so").unwrap();
        assert!(sparse.states(CognitiveRelation::Want)[0].ends_with("things"));
    }

    #[test]
    fn keywords_rank_by_count_then_position() {
        assert_eq!(
            TemplateProvider::keywords("exam stress exam family stress exam", 2),
            vec!["exam", "stress"]
        );
    }

    #[test]
    fn bundle_validation() {
        let mut m = BTreeMap::new();
        for r in CognitiveRelation::ALL {
            m.insert(r, vec!["x".to_string(); 5]);
        }
        assert!(CognitiveBundle::new(m.clone()).is_ok());
        m.get_mut(&CognitiveRelation::Need).unwrap()[2] = " ".into();
        assert!(CognitiveBundle::new(m.clone()).is_err());
        m.remove(&CognitiveRelation::Need);
        assert!(CognitiveBundle::new(m).is_err());
    }

    #[test]
    fn file_provider_round_trip() {
        let bundle = TemplateProvider.generate("my cat died").unwrap();
        let mut fp = FileProvider::default();
        fp.insert("my cat died", bundle.clone());
        let reloaded = FileProvider::from_json(&fp.to_json()).unwrap();
        assert_eq!(reloaded.generate("  my cat died ").unwrap(), bundle);
        assert!(matches!(reloaded.generate("other"), Err(Error::Generation(_))));
    }

    fn stack(d: usize) -> (ParamStore, CognitionStack) {
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(3),
        };
        let s = CognitionStack::new(&mut init, d, 2, 1, 1, 2);
        (store, s)
    }

    #[test]
    fn shapes_through_the_stack() {
        let (store, s) = stack(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut f = Fwd::new(&store);
        let states = f.g.input(Mat::from_shape_fn((12, 8), |_| rng.gen_range(-1.0..1.0)));
        let (enc, summary) = s.cognitive_encode(&mut f, states, &[true; 12]).unwrap();
        assert_eq!(f.g.shape(enc), (13, 8));
        assert_eq!(f.value(summary).row(0), f.value(enc).row(0));
        let ctx = f.g.input(Mat::from_shape_fn((10, 8), |_| rng.gen_range(-1.0..1.0)));
        let refined = s.cognitive_refine(&mut f, ctx, summary, &[true; 10]).unwrap();
        assert_eq!(f.g.shape(refined), (10, 16));
        let (sel, out) = s.cognitive_select(&mut f, refined);
        assert_eq!(f.g.shape(sel), (10, 16));
        assert_eq!(f.g.shape(out), (10, 8));
        let bad = f.g.input(Mat::zeros((10, 7)));
        assert!(s.cognitive_refine(&mut f, bad, summary, &[true; 10]).is_err());
    }

    #[test]
    fn zero_summary_leaves_right_half_zero() {
        let (store, s) = stack(4);
        let mut f = Fwd::new(&store);
        let ctx = f.g.input(Mat::from_shape_fn((3, 4), |(r, c)| (r * 4 + c) as f64));
        let zero = f.g.input(Mat::zeros((1, 4)));
        let u = s.merge(&mut f, ctx, zero);
        let u = f.value(u);
        assert_eq!(u.dim(), (3, 8));
        assert!(u.slice(ndarray::s![.., 4..]).iter().all(|x| *x == 0.0));
        assert_eq!(u[[2, 3]], 11.0);
    }

    #[test]
    fn merge_commutes_with_row_permutation() {
        let (store, s) = stack(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ctx = Mat::from_shape_fn((5, 4), |_| rng.gen_range(-1.0..1.0));
        let h = Mat::from_shape_fn((1, 4), |_| rng.gen_range(-1.0..1.0));
        let perm = [3, 0, 4, 1, 2];
        let permuted = Mat::from_shape_fn((5, 4), |(r, c)| ctx[[perm[r], c]]);
        let mut f = Fwd::new(&store);
        let a = f.g.input(ctx);
        let b = f.g.input(permuted);
        let hv = f.g.input(h);
        let ua = s.merge(&mut f, a, hv);
        let ub = s.merge(&mut f, b, hv);
        for (r, &src) in perm.iter().enumerate() {
            assert_eq!(f.value(ub).row(r), f.value(ua).row(src));
        }
    }

    #[test]
    fn gate_shrinks_magnitudes() {
        let (store, s) = stack(4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut m = Mat::from_shape_fn((6, 8), |_| rng.gen_range(-5.0..5.0));
        m[[0, 0]] = 0.0;
        let mut f = Fwd::new(&store);
        let x = f.g.input(m.clone());
        let (sel, _) = s.cognitive_select(&mut f, x);
        let sel = f.value(sel);
        assert_eq!(sel[[0, 0]], 0.0);
        for (a, b) in sel.iter().zip(m.iter()) {
            if *b != 0.0 {
                assert!(a.abs() < b.abs());
            }
            assert_eq!(*a, crate::autograd::sigmoid(*b) * b);
        }
    }
}
