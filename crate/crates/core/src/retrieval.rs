//! Dynamic demonstration selection: dense inner-product retrieval over the
//! strategy-response base and demonstration assembly.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{RetrievalBase, RetrievalPassage};
use crate::error::{Error, Result};
use crate::hash::fnv1a64;
use crate::text::{tokenize, SYSTEM_MARKER, USER_MARKER};

pub const DEFAULT_TOP_S: usize = 3;
pub const DEFAULT_EMBED_DIM: usize = 256;
pub const DEMONSTRATION_CAP: usize = 512;

/// Query and passage encoders scored by inner product.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_query(&self, query: &str) -> Vec<f64>;
    fn embed_passage(&self, passage: &str) -> Vec<f64>;
    /// Short identifier written into index files.
    fn name(&self) -> String;
}

/// Feature-hashed, term-frequency weighted bag of words, L2-normalized.
/// Queries and passages share one encoder.
#[derive(Debug, Clone)]
pub struct HashingEmbedder {
    dim: usize,
}

impl HashingEmbedder {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashingEmbedder { dim }
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for token in tokenize(text) {
            let h = fnv1a64(token.as_bytes());
            let bucket = (h % self.dim as u64) as usize;
            let sign = if (h >> 63) == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl Default for HashingEmbedder {
    fn default() -> Self {
        HashingEmbedder::new(DEFAULT_EMBED_DIM)
    }
}

impl EmbeddingProvider for HashingEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }
    fn embed_query(&self, query: &str) -> Vec<f64> {
        self.embed(query)
    }
    fn embed_passage(&self, passage: &str) -> Vec<f64> {
        self.embed(passage)
    }
    fn name(&self) -> String {
        format!("hashing-bow-{}", self.dim)
    }
}

/// `q = [p, per]`, joined by a blank; an empty persona leaves the post alone.
pub fn compose_query(post: &str, persona: &str) -> Result<String> {
    if post.trim().is_empty() {
        return Err(Error::EmptyPost);
    }
    if persona.trim().is_empty() {
        Ok(post.to_string())
    } else {
        Ok(format!("{post} {persona}"))
    }
}

pub fn similarity(query: &[f64], passage: &[f64]) -> Result<f64> {
    if query.len() != passage.len() {
        return Err(Error::DimensionMismatch(format!(
            "query has {} dims, passage has {}",
            query.len(),
            passage.len()
        )));
    }
    Ok(dot(query, passage))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Passage vectors in passage-id order plus their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    dim: usize,
    vectors: Vec<f64>,
    passages: Vec<RetrievalPassage>,
    provider: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub text: String,
    pub passage_id: usize,
    pub score: f64,
}

impl RetrievalIndex {
    pub fn build(base: &RetrievalBase, provider: &dyn EmbeddingProvider) -> Self {
        let dim = provider.dim();
        let mut vectors = Vec::with_capacity(dim * base.passages.len());
        for p in &base.passages {
            vectors.extend(provider.embed_passage(&p.passage_text()));
        }
        RetrievalIndex {
            dim,
            vectors,
            passages: base.passages.clone(),
            provider: provider.name(),
        }
    }

    /// Builds from precomputed passage vectors, one per passage.
    pub fn from_vectors(
        vectors: Vec<Vec<f64>>,
        passages: Vec<RetrievalPassage>,
        provider: impl Into<String>,
    ) -> Result<Self> {
        if vectors.len() != passages.len() {
            return Err(Error::LengthMismatch(format!(
                "{} vectors for {} passages",
                vectors.len(),
                passages.len()
            )));
        }
        let dim = vectors.first().map_or(0, Vec::len);
        if vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch("ragged passage vectors".into()));
        }
        Ok(RetrievalIndex {
            dim,
            vectors: vectors.into_iter().flatten().collect(),
            passages,
            provider: provider.into(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[RetrievalPassage] {
        &self.passages
    }

    pub fn provider(&self) -> &str {
        &self.provider
    }

    pub fn row(&self, passage_id: usize) -> &[f64] {
        &self.vectors[passage_id * self.dim..(passage_id + 1) * self.dim]
    }

    /// Scores every passage; highest first, ties to the lower id.
    pub fn search(
        &self,
        query_vec: &[f64],
        s: usize,
        exclude: &BTreeSet<usize>,
    ) -> Result<Vec<(usize, f64)>> {
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        if s == 0 {
            return Err(Error::Config("top-s must be at least 1".into()));
        }
        if query_vec.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query has {} dims, index has {}",
                query_vec.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|id| !exclude.contains(id))
            .map(|id| (id, dot(query_vec, self.row(id))))
            .collect();
        if s > scored.len() {
            log::warn!(
                "top-s {s} exceeds the {} available passages; returning all",
                scored.len()
            );
        }
        let rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
            b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
        };
        if s < scored.len() {
            scored.select_nth_unstable_by(s - 1, rank);
            scored.truncate(s);
        }
        scored.sort_by(rank);
        Ok(scored)
    }

    pub fn retrieve_top_s(
        &self,
        provider: &dyn EmbeddingProvider,
        query: &str,
        s: usize,
        exclude: &BTreeSet<usize>,
    ) -> Result<Vec<Demonstration>> {
        let q = provider.embed_query(query);
        Ok(self
            .search(&q, s, exclude)?
            .into_iter()
            .map(|(id, score)| {
                let p = &self.passages[id];
                Demonstration {
                    text: demonstration_text(&p.query_text, &p.passage_text()),
                    passage_id: id,
                    score,
                }
            })
            .collect())
    }
}

const INDEX_MAGIC: &[u8; 8] = b"ESCIDX\x00\x01";

#[derive(Serialize, Deserialize)]
struct IndexMeta {
    provider: String,
    passages: Vec<RetrievalPassage>,
}

impl RetrievalIndex {
    /// Layout: magic, `u32` dim, `u32` count, row-major little-endian `f64`
    /// matrix, `u64` metadata length, metadata JSON.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.len() as u32).to_le_bytes())?;
        for x in &self.vectors {
            w.write_all(&x.to_le_bytes())?;
        }
        let meta = serde_json::to_vec(&IndexMeta {
            provider: self.provider.clone(),
            passages: self.passages.clone(),
        })
        .map_err(std::io::Error::other)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::IndexFormat(m.to_string());
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::IndexFormat(e.to_string()))?;
        let mut cur = Cursor { buf: &buf, pos: 0 };
        if cur.take(8).ok_or_else(|| bad("truncated header"))? != INDEX_MAGIC {
            return Err(bad("bad magic or unsupported version"));
        }
        let dim = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let count = cur.u32().ok_or_else(|| bad("truncated header"))? as usize;
        let mut vectors = Vec::with_capacity(dim * count);
        for _ in 0..dim * count {
            vectors.push(cur.f64().ok_or_else(|| bad("truncated matrix"))?);
        }
        let meta_len = cur.u64().ok_or_else(|| bad("truncated metadata"))? as usize;
        let meta: IndexMeta =
            serde_json::from_slice(cur.take(meta_len).ok_or_else(|| bad("truncated metadata"))?)
                .map_err(|e| Error::IndexFormat(e.to_string()))?;
        if meta.passages.len() != count {
            return Err(bad("passage count does not match header"));
        }
        Ok(RetrievalIndex {
            dim,
            vectors,
            passages: meta.passages,
            provider: meta.provider,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        self.write_to(&mut bytes).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        RetrievalIndex::read_from(std::io::BufReader::new(file))
    }
}

pub(crate) struct Cursor<'a> {
    pub buf: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Cursor { buf, pos: 0 }
    }
    pub fn is_empty(&self) -> bool {
        self.pos >= self.buf.len()
    }
    pub fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let out = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(out)
    }
    pub fn u32(&mut self) -> Option<u32> {
        Some(u32::from_le_bytes(self.take(4)?.try_into().ok()?))
    }
    pub fn u64(&mut self) -> Option<u64> {
        Some(u64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
    pub fn f64(&mut self) -> Option<f64> {
        Some(f64::from_le_bytes(self.take(8)?.try_into().ok()?))
    }
}

/// `d_i = User: q_i System: pas_i`.
pub fn demonstration_text(query: &str, passage: &str) -> String {
    format!("{USER_MARKER} {query} {SYSTEM_MARKER} {passage}")
}

/// Joins demonstrations (best first) with single spaces. Whole trailing
/// demonstrations are dropped until the token count fits `cap`; a lone
/// demonstration that still overflows is cut to its first `cap` tokens.
pub fn assemble_demonstrations(demos: &[Demonstration], cap: usize) -> String {
    let mut kept: Vec<&str> = demos.iter().map(|d| d.text.as_str()).collect();
    let mut lengths: Vec<usize> = kept.iter().map(|t| tokenize(t).len()).collect();
    while kept.len() > 1 && lengths.iter().sum::<usize>() > cap {
        kept.pop();
        lengths.pop();
    }
    let joined = kept.join(" ");
    if lengths.iter().sum::<usize>() > cap {
        let tokens = tokenize(&joined);
        return tokens[..cap].join(" ");
    }
    joined
}

#[cfg(test)]
mod tests {
    use super::*;

    fn passage(id: usize) -> RetrievalPassage {
        RetrievalPassage {
            passage_id: id,
            strategy_text: "[Question]".into(),
            response_text: format!("response {id}"),
            query_text: format!("query {id}"),
            source_dialogue_id: "d".into(),
            source_turn: id,
        }
    }

    fn one_hot_index() -> RetrievalIndex {
        let vecs = (0..3)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[i] = 1.0;
                v
            })
            .collect();
        RetrievalIndex::from_vectors(vecs, (0..3).map(passage).collect(), "one-hot").unwrap()
    }

    #[test]
    fn query_composition() {
        assert_eq!(
            compose_query("I feel sad", "I love dogs").unwrap(),
            "I feel sad I love dogs"
        );
        assert_eq!(compose_query("I feel sad", "").unwrap(), "I feel sad");
        assert!(matches!(compose_query("  ", "x"), Err(Error::EmptyPost)));
        let persona = "My family is taking care of me while I am on crutches";
        let q = compose_query("I broke my leg", persona).unwrap();
        assert!(q.starts_with("I broke my leg") && q.ends_with(persona));
    }

    #[test]
    fn similarity_values() {
        assert_eq!(similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(similarity(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 11.0);
        let v = [0.3, -1.2, 2.5];
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        assert!((similarity(&v, &v).unwrap() - norm2).abs() < 1e-12);
        assert!(matches!(
            similarity(&[1.0], &[1.0, 2.0]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn argmax_and_exclusion() {
        let index = one_hot_index();
        let none = BTreeSet::new();
        let hits = index.search(&[0.0, 1.0, 0.0], 1, &none).unwrap();
        assert_eq!(hits, vec![(1, 1.0)]);
        let excl: BTreeSet<usize> = [1].into();
        let hits = index.search(&[0.0, 1.0, 0.0], 1, &excl).unwrap();
        assert_eq!(hits[0].0, 0, "tie between 0 and 2 goes to the lower id");
        let all = index.search(&[0.0, 1.0, 0.0], 10, &none).unwrap();
        assert_eq!(all.iter().map(|h| h.0).collect::<Vec<_>>(), vec![1, 0, 2]);
    }

    #[test]
    fn hashing_embedder_is_deterministic_and_normalized() {
        let e = HashingEmbedder::default();
        let a = e.embed_query("I lost my job today");
        assert_eq!(a, e.embed_query("I lost my job today"));
        assert_eq!(a.len(), DEFAULT_EMBED_DIM);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert!((n - 1.0).abs() < 1e-12);
        assert!(e.embed_query("").iter().all(|x| *x == 0.0));
    }

    #[test]
    fn demonstration_templates() {
        let d = Demonstration {
            text: demonstration_text("help", "[Question] why?"),
            passage_id: 0,
            score: 1.0,
        };
        assert_eq!(d.text, "User: help System: [Question] why?");
        assert_eq!(assemble_demonstrations(&[d], 512), "User: help System: [Question] why?");
        assert_eq!(assemble_demonstrations(&[], 512), "");
    }

    #[test]
    fn assembly_respects_cap() {
        let long = |n: usize| Demonstration {
            text: demonstration_text(&vec!["w"; n].join(" "), "[Others] ok"),
            passage_id: 0,
            score: 0.0,
        };
        let demos = vec![long(230), long(230), long(230)];
        let total: usize = demos.iter().map(|d| tokenize(&d.text).len()).sum();
        assert!(total > 690);
        let out = assemble_demonstrations(&demos, 512);
        assert!(tokenize(&out).len() <= 512);
        assert_eq!(tokenize(&out).len(), 2 * 234, "third demonstration dropped whole");
        let out = assemble_demonstrations(&[long(600)], 512);
        assert_eq!(tokenize(&out).len(), 512);
    }

    #[test]
    fn index_file_round_trip() {
        let index = one_hot_index();
        let mut bytes = Vec::new();
        index.write_to(&mut bytes).unwrap();
        assert_eq!(RetrievalIndex::read_from(&bytes[..]).unwrap(), index);
        bytes[7] = 9;
        assert!(RetrievalIndex::read_from(&bytes[..]).is_err());
        assert!(RetrievalIndex::read_from(&bytes[..10]).is_err());
    }
}
