//! Automatic evaluation: BLEU-n, Distinct-n, ROUGE-L, strategy accuracy,
//! perplexity, and the min-max normalized aggregate across methods.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Strategy;
use crate::error::{Error, Result};

pub const ROUGE_BETA: f64 = 1.2;

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts
                .entry(w.iter().map(|t| t.as_ref()).collect())
                .or_insert(0) += 1;
        }
    }
    counts
}

/// Clipped matches and total candidate n-grams for one sentence.
fn modified_counts<T: AsRef<str>>(candidate: &[T], references: &[Vec<T>], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
    for r in references {
        for (g, c) in ngram_counts(r, n) {
            let e = max_ref.entry(g).or_insert(0);
            *e = (*e).max(c);
        }
    }
    let matched = cand
        .iter()
        .map(|(g, c)| (*c).min(max_ref.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Corpus BLEU-n as a percentage: clipped n-gram precisions pooled over the
/// corpus, geometric mean over orders `1..=n`, brevity penalty against the
/// closest reference length. Orders ≥ 2 with zero matches use add-one
/// smoothing.
pub fn corpus_bleu<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<Vec<T>>)], n: usize) -> f64 {
    corpus_bleu_with(pairs, n, true)
}

pub fn corpus_bleu_with<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<Vec<T>>)], n: usize, smoothing: bool) -> f64 {
    assert!((1..=4).contains(&n), "BLEU order must be 1..=4");
    let mut matched = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;
    for (cand, refs) in pairs {
        if refs.is_empty() {
            continue;
        }
        cand_len += cand.len();
        ref_len += refs
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| ((r as i64 - cand.len() as i64).abs(), r))
            .unwrap_or(0);
        for k in 1..=n {
            let (m, t) = modified_counts(cand, refs, k);
            matched[k - 1] += m;
            totals[k - 1] += t;
        }
    }
    if cand_len == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for k in 0..n {
        let p = if matched[k] > 0 {
            matched[k] as f64 / totals[k] as f64
        } else if smoothing && k >= 1 {
            1.0 / (totals[k] as f64 + 1.0)
        } else {
            return 0.0;
        };
        log_sum += p.ln();
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    100.0 * bp * (log_sum / n as f64).exp()
}

/// BLEU-n of a single candidate against its references.
pub fn bleu_n<T: AsRef<str> + Clone>(candidate: &[T], references: &[Vec<T>], n: usize) -> f64 {
    corpus_bleu(&[(candidate.to_vec(), references.to_vec())], n)
}

/// Unique over total n-grams across all responses, as a percentage.
pub fn distinct_n<T: AsRef<str>>(responses: &[Vec<T>], n: usize) -> f64 {
    let mut unique: HashMap<Vec<&str>, ()> = HashMap::new();
    let mut total = 0usize;
    for r in responses {
        for (g, c) in ngram_counts(r, n) {
            unique.insert(g, ());
            total += c;
        }
    }
    if total == 0 {
        0.0
    } else {
        100.0 * unique.len() as f64 / total as f64
    }
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with recall weighted by β = 1.2, as a percentage.
pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> f64 {
    if reference.is_empty() || candidate.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(candidate, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    100.0 * (1.0 + b2) * p * r / (r + b2 * p)
}

pub fn mean_rouge_l<T: PartialEq>(pairs: &[(Vec<T>, Vec<T>)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(c, r)| rouge_l(c, r)).sum::<f64>() / pairs.len() as f64
}

/// Share of examples whose gold strategy is within the top `n` predictions.
pub fn strategy_acc(predictions: &[Vec<Strategy>], gold: &[Strategy], n: usize) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::LengthMismatch(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.iter().take(n).any(|s| s == *g))
        .count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub acc_top_n: BTreeMap<usize, f64>,
    pub ppl: f64,
    pub bleu: BTreeMap<usize, f64>,
    pub distinct: BTreeMap<usize, f64>,
    pub rouge_l: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_norm: Option<f64>,
}

impl MetricReport {
    /// The nine headline columns in table order.
    pub fn columns(&self) -> [(&'static str, f64); 9] {
        [
            ("ACC", self.acc),
            ("PPL", self.ppl),
            ("B-1", self.bleu[&1]),
            ("B-2", self.bleu[&2]),
            ("B-3", self.bleu[&3]),
            ("B-4", self.bleu[&4]),
            ("D-1", self.distinct[&1]),
            ("D-2", self.distinct[&2]),
            ("R-L", self.rouge_l),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

/// Method rows of partially filled metric values; column order is kept.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricTable {
    pub metrics: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl MetricTable {
    /// CSV with a header `method,<metric>...`; blank or `-` cells are missing.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let bad = |e: csv::Error| Error::Parse {
            context: "metric table".into(),
            message: e.to_string(),
        };
        let headers = reader.headers().map_err(bad)?.clone();
        let metrics: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(bad)?;
            let name = record.get(0).unwrap_or_default().to_string();
            let values = (1..=metrics.len())
                .map(|i| parse_cell(record.get(i).unwrap_or("")))
                .collect::<Result<Vec<_>>>()?;
            rows.push((name, values));
        }
        Ok(MetricTable { metrics, rows })
    }

    /// JSON object `{"metrics": [...], "rows": [[name, [v|null...]]...]}`.
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "metric table".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if path.extension().is_some_and(|e| e == "json") {
            MetricTable::from_json(&text)
        } else {
            MetricTable::from_csv(&text)
        }
    }
}

fn parse_cell(cell: &str) -> Result<Option<f64>> {
    let cell = cell.trim();
    if cell.is_empty() || cell == "-" {
        return Ok(None);
    }
    cell.parse().map(Some).map_err(|_| Error::Parse {
        context: "metric table".into(),
        message: format!("not a number: {cell:?}"),
    })
}

/// Known metric orientation: perplexity is the only lower-is-better column.
pub fn default_direction(metric: &str) -> Direction {
    if metric.eq_ignore_ascii_case("ppl") {
        Direction::LowerBetter
    } else {
        Direction::HigherBetter
    }
}

/// Contribution of a metric whose best and worst values coincide.
pub const DEGENERATE_SCORE: f64 = 0.5;

/// Per metric, `(s − worst)/(best − worst)`; per method, the mean over the
/// metrics it reports.
pub fn s_norm(table: &MetricTable, directions: &BTreeMap<String, Direction>) -> Result<Vec<(String, f64)>> {
    if table.rows.len() < 2 {
        return Err(Error::MetricTable("need at least two methods".into()));
    }
    let mut per_metric = Vec::with_capacity(table.metrics.len());
    for (j, metric) in table.metrics.iter().enumerate() {
        let present: Vec<f64> = table.rows.iter().filter_map(|(_, v)| v[j]).collect();
        if present.len() < 2 {
            return Err(Error::MetricTable(format!(
                "metric {metric} has fewer than two values"
            )));
        }
        let hi = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lo = present.iter().copied().fold(f64::INFINITY, f64::min);
        let direction = directions
            .get(metric)
            .copied()
            .unwrap_or_else(|| default_direction(metric));
        let (best, worst) = match direction {
            Direction::HigherBetter => (hi, lo),
            Direction::LowerBetter => (lo, hi),
        };
        per_metric.push((best, worst));
    }
    Ok(table
        .rows
        .iter()
        .map(|(name, values)| {
            let scores: Vec<f64> = values
                .iter()
                .zip(&per_metric)
                .filter_map(|(v, (best, worst))| {
                    v.map(|s| {
                        if best == worst {
                            DEGENERATE_SCORE
                        } else {
                            (s - worst) / (best - worst)
                        }
                    })
                })
                .collect();
            let mean = if scores.is_empty() {
                0.0
            } else {
                scores.iter().sum::<f64>() / scores.len() as f64
            };
            (name.clone(), mean)
        })
        .collect())
}

/// Aligned text table; missing cells print as `-`.
pub fn format_table(metrics: &[String], rows: &[(String, Vec<Option<f64>>)]) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<name_w$}", "Method");
    for m in metrics {
        let _ = write!(out, " {m:>8}");
    }
    out.push('\n');
    for (name, values) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for v in values {
            match v {
                Some(v) => {
                    let _ = write!(out, " {v:>8.2}");
                }
                None => {
                    let _ = write!(out, " {:>8}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
