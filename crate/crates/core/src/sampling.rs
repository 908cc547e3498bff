//! Top-k / nucleus sampling with a repetition penalty.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Strategy;
use crate::error::{Error, Result};
use crate::model::{softmax, FusedKnowledge, Model};
use crate::text::{strategy_token, token_strategy, TokenSeq, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            top_k: 10,
            top_p: 0.9,
            repetition_penalty: 1.03,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy() -> Self {
        SamplerConfig {
            top_k: 1,
            ..SamplerConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Config(format!("top_p {} outside (0, 1]", self.top_p)));
        }
        if self.repetition_penalty < 1.0 {
            return Err(Error::Config("repetition_penalty must be at least 1".into()));
        }
        Ok(())
    }
}

/// Penalizes every token already generated: positive logits are divided by
/// the penalty, negative ones multiplied.
pub fn apply_repetition_penalty(logits: &mut [f64], generated: &[u32], penalty: f64) {
    let mut seen = vec![false; logits.len()];
    for &id in generated {
        if let Some(s) = seen.get_mut(id as usize) {
            *s = true;
        }
    }
    for (logit, seen) in logits.iter_mut().zip(seen) {
        if seen {
            if *logit > 0.0 {
                *logit /= penalty;
            } else {
                *logit *= penalty;
            }
        }
    }
}

/// The `k` highest logits, descending, ties to the lower id.
pub fn top_k(logits: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut ranked: Vec<(usize, f64)> = logits
        .iter()
        .copied()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k.max(1));
    ranked
}

/// Keeps the shortest prefix of a descending distribution whose mass
/// reaches `top_p`, renormalized.
pub fn nucleus(sorted: &[(usize, f64)], top_p: f64) -> Vec<(usize, f64)> {
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &(id, p) in sorted {
        kept.push((id, p));
        mass += p;
        if mass >= top_p {
            break;
        }
    }
    kept.into_iter().map(|(id, p)| (id, p / mass)).collect()
}

/// Candidate set for the next token after penalty, top-k and top-p.
pub fn filtered_distribution(logits: &[f64], generated: &[u32], cfg: &SamplerConfig) -> Vec<(usize, f64)> {
    let mut logits = logits.to_vec();
    apply_repetition_penalty(&mut logits, generated, cfg.repetition_penalty);
    let kept = top_k(&logits, cfg.top_k);
    let probs = softmax(&kept.iter().map(|(_, l)| *l).collect::<Vec<_>>());
    let sorted: Vec<(usize, f64)> = kept.iter().map(|(id, _)| *id).zip(probs).collect();
    nucleus(&sorted, cfg.top_p)
}

/// Autoregressive sampling until EOS or `max_dec_len` tokens. The first
/// token is restricted to the strategy tokens.
pub struct Sampler {
    cfg: SamplerConfig,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledResponse {
    pub tokens: TokenSeq,
    pub strategy: Option<Strategy>,
}

impl Sampler {
    pub fn new(cfg: SamplerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Sampler {
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn pick(&mut self, candidates: &[(usize, f64)]) -> usize {
        if candidates.len() == 1 {
            return candidates[0].0;
        }
        let dist = WeightedIndex::new(candidates.iter().map(|(_, p)| *p))
            .expect("renormalized candidate weights are positive");
        candidates[dist.sample(&mut self.rng)].0
    }

    pub fn sample_response(&mut self, model: &Model, fused: &FusedKnowledge) -> Result<SampledResponse> {
        let max = model.config.max_dec_len;
        let mut generated: Vec<u32> = Vec::new();
        while generated.len() < max {
            let mut logits = model.next_logits(fused, &generated)?;
            if generated.is_empty() {
                restrict_to_strategies(&mut logits);
            }
            let candidates = filtered_distribution(&logits, &generated, &self.cfg);
            let next = self.pick(&candidates) as u32;
            generated.push(next);
            if next == EOS {
                break;
            }
        }
        let strategy = generated.first().and_then(|&t| token_strategy(t));
        Ok(SampledResponse {
            tokens: TokenSeq::new(generated),
            strategy,
        })
    }
}

pub fn restrict_to_strategies(logits: &mut [f64]) {
    let allowed: Vec<usize> = Strategy::ALL
        .iter()
        .map(|s| strategy_token(*s) as usize)
        .collect();
    for (i, l) in logits.iter_mut().enumerate() {
        if !allowed.contains(&i) {
            *l = f64::NEG_INFINITY;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nucleus_keeps_minimal_prefix() {
        let d = [(0, 0.5), (1, 0.3), (2, 0.2)];
        assert_eq!(nucleus(&d, 0.9).len(), 3, "0.8 < 0.9 so all three stay");
        let kept = nucleus(&d, 0.8);
        assert_eq!(kept.iter().map(|k| k.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!((kept[0].1 - 0.625).abs() < 1e-12);
        assert_eq!(nucleus(&d, 0.4).len(), 1);
    }

    #[test]
    fn repetition_penalty_direction() {
        let mut logits = vec![2.06, -1.0, 3.0];
        apply_repetition_penalty(&mut logits, &[0, 1, 1], 1.03);
        assert!((logits[0] - 2.0).abs() < 1e-12);
        assert!((logits[1] + 1.03).abs() < 1e-12);
        assert_eq!(logits[2], 3.0);
    }

    #[test]
    fn top_k_one_is_greedy() {
        let cfg = SamplerConfig::greedy();
        let c = filtered_distribution(&[0.1, 2.0, 1.9], &[], &cfg);
        assert_eq!(c, vec![(1, 1.0)]);
        let ranked = top_k(&[1.0, 1.0, f64::NEG_INFINITY], 5);
        assert_eq!(ranked.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig::default().validate().is_ok());
        assert!(SamplerConfig { top_k: 0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { top_p: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplerConfig { repetition_penalty: 0.9, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn strategy_restriction() {
        let mut logits = vec![5.0; crate::text::RESERVED + 3];
        restrict_to_strategies(&mut logits);
        let finite: Vec<usize> = (0..logits.len()).filter(|&i| logits[i].is_finite()).collect();
        assert_eq!(finite, (7..15).collect::<Vec<_>>());
    }
}
