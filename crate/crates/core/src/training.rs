//! Example preparation, the NLL objective, Adam, and the epoch loop with
//! best-validation-perplexity checkpoint selection.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Grads, Mat, ParamStore};
use crate::cognition::{generate_states, CognitiveRelation, CognitiveStateProvider};
use crate::corpus::{Dialogue, Speaker, Strategy, Turn};
use crate::error::{Error, Result};
use crate::model::{Model, ModelInput, Stage, FUSION_TERMS};
use crate::nn::Fwd;
use crate::retrieval::{
    assemble_demonstrations, compose_query, Demonstration, EmbeddingProvider, RetrievalIndex,
    DEMONSTRATION_CAP,
};
use crate::text::{
    encode_with, strategy_token, truncate, TokenSeq, Truncation, Vocabulary, EOS, PAD,
    SYSTEM_MARKER, USER_MARKER,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_train: usize,
    pub batch_valid: usize,
    pub max_epochs: usize,
    pub checkpoint_min_epoch: usize,
    /// Stops after this many optimizer steps even mid-epoch.
    pub max_steps: Option<usize>,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Write `ckpt-epoch<k>.bin` after every epoch.
    pub checkpoint_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::toy()
    }
}

impl TrainConfig {
    /// From-scratch profile for desk-scale runs.
    pub fn toy() -> Self {
        TrainConfig {
            lr: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch_train: 4,
            batch_valid: 16,
            max_epochs: 10,
            checkpoint_min_epoch: 6,
            max_steps: None,
            grad_clip: Some(1.0),
            checkpoint_every_epoch: true,
            seed: 0,
        }
    }

    /// Hyperparameters used when fine-tuning a pretrained backbone.
    pub fn fine_tune() -> Self {
        TrainConfig {
            lr: 1.5e-5,
            ..TrainConfig::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        if self.batch_train == 0 || self.batch_valid == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if self.checkpoint_min_epoch > self.max_epochs {
            return Err(Error::Config(format!(
                "checkpoint_min_epoch {} exceeds max_epochs {}",
                self.checkpoint_min_epoch, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// One supporter turn, fully tokenized, with retrieval and cognitive states
/// already resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub input: ModelInput,
    /// `[strategy] ⧺ response ⧺ EOS`, at most `max_dec_len` tokens.
    pub target: TokenSeq,
    pub strategy: Strategy,
    pub demonstrations: Vec<Demonstration>,
}

impl TrainingExample {
    /// Response tokens without the strategy prefix and EOS.
    pub fn response_ids(&self) -> &[u32] {
        let ids = &self.target.ids;
        let end = if ids.last() == Some(&EOS) { ids.len() - 1 } else { ids.len() };
        &ids[1.min(end)..end]
    }
}

/// Everything needed to turn dialogue turns into model inputs.
pub struct ExampleBuilder<'a> {
    pub vocab: &'a Vocabulary,
    pub index: &'a RetrievalIndex,
    pub embedder: &'a dyn EmbeddingProvider,
    pub cognition: &'a dyn CognitiveStateProvider,
    pub top_s: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    pub cog_len: usize,
}

/// Flattens turns into `User: … System: [strategy] …` text.
pub fn context_text(history: &[Turn], post: &str) -> String {
    let mut parts: Vec<String> = history
        .iter()
        .map(|t| match (t.speaker, t.strategy) {
            (Speaker::Seeker, _) => format!("{USER_MARKER} {}", t.text),
            (Speaker::Supporter, Some(s)) => format!("{SYSTEM_MARKER} {} {}", s.bracketed(), t.text),
            (Speaker::Supporter, None) => format!("{SYSTEM_MARKER} {}", t.text),
        })
        .collect();
    parts.push(format!("{USER_MARKER} {post}"));
    parts.join(" ")
}

impl ExampleBuilder<'_> {
    /// Model input for a post given its history. `exclude` removes passages
    /// from retrieval.
    pub fn build_input(
        &self,
        history: &[Turn],
        post: &str,
        persona: &str,
        exclude: &BTreeSet<usize>,
    ) -> Result<(ModelInput, Vec<Demonstration>)> {
        let query = compose_query(post, persona)?;
        let demos = if self.index.is_empty() {
            Vec::new()
        } else {
            self.index
                .retrieve_top_s(self.embedder, &query, self.top_s, exclude)?
        };
        let demo_text = assemble_demonstrations(&demos, DEMONSTRATION_CAP.min(self.max_enc_len));
        let bundle = generate_states(self.cognition, post)?;
        let cognitive = CognitiveRelation::ALL.map(|r| {
            encode_with(&bundle.sequence(r), self.vocab, self.cog_len, Truncation::KeepEarliest)
        });
        let input = ModelInput {
            context: encode_with(
                &context_text(history, post),
                self.vocab,
                self.max_enc_len,
                Truncation::KeepLatest,
            ),
            demonstrations: encode_with(&demo_text, self.vocab, self.max_enc_len, Truncation::KeepEarliest),
            cognitive,
        };
        Ok((input, demos))
    }

    pub fn target(&self, strategy: Strategy, response: &str) -> TokenSeq {
        let body_cap = self.max_dec_len.saturating_sub(2).max(1);
        let mut body =
            encode_with(response, self.vocab, body_cap, Truncation::KeepEarliest).ids;
        truncate(&mut body, body_cap, Truncation::KeepEarliest);
        let mut ids = Vec::with_capacity(body.len() + 2);
        ids.push(strategy_token(strategy));
        ids.extend(body);
        ids.push(EOS);
        ids.truncate(self.max_dec_len);
        TokenSeq::new(ids)
    }

    /// One example per supporter turn that follows a seeker post. With
    /// `exclude_self` the passage built from the gold response is hidden
    /// from its own retrieval.
    pub fn build(&self, dialogues: &[Dialogue], exclude_self: bool) -> Result<Vec<TrainingExample>> {
        let mut out = Vec::new();
        for dialogue in dialogues {
            for ex in dialogue.exchanges() {
                let mut exclude = BTreeSet::new();
                if exclude_self {
                    exclude.extend(self.index.passages().iter().filter_map(|p| {
                        (p.source_dialogue_id == dialogue.id && p.source_turn == ex.turn_index)
                            .then_some(p.passage_id)
                    }));
                }
                let (input, demonstrations) =
                    self.build_input(ex.history(), ex.post(), &dialogue.persona, &exclude)?;
                out.push(TrainingExample {
                    dialogue_id: dialogue.id.clone(),
                    turn_index: ex.turn_index,
                    input,
                    target: self.target(ex.strategy(), &ex.response().text),
                    strategy: ex.strategy(),
                    demonstrations,
                });
            }
        }
        Ok(out)
    }
}

/// `−(1/n) Σ log P(r_t)`, skipping PAD targets in both sum and count.
pub fn nll_loss(log_probs: &Mat, target: &TokenSeq) -> Result<f64> {
    let (sum, n) = nll_sum(log_probs, target)?;
    if n == 0 {
        return Err(Error::LengthMismatch("target has no non-PAD tokens".into()));
    }
    Ok(sum / n as f64)
}

fn nll_sum(log_probs: &Mat, target: &TokenSeq) -> Result<(f64, usize)> {
    if log_probs.nrows() != target.len() {
        return Err(Error::LengthMismatch(format!(
            "{} distributions for {} targets",
            log_probs.nrows(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0;
    for (t, &id) in target.ids.iter().enumerate() {
        if id == PAD {
            continue;
        }
        sum -= log_probs[[t, id as usize]];
        n += 1;
    }
    Ok((sum, n))
}

fn picks(target: &TokenSeq) -> Vec<(usize, usize)> {
    target
        .ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id != PAD)
        .map(|(t, &id)| (t, id as usize))
        .collect()
}

/// Teacher-forced loss and parameter gradients for one example.
pub fn example_loss_and_grads(model: &Model, ex: &TrainingExample, stages: &mut Vec<Stage>) -> Result<(f64, Grads, usize)> {
    let mut f = Fwd::new(&model.store);
    let lp = model.target_log_probs(&mut f, &ex.input, &ex.target, stages)?;
    stages.push(Stage::Nll);
    let picks = picks(&ex.target);
    let n = picks.len();
    let loss = f.g.neg_mean_pick(lp, picks, n as f64);
    let value = f.value(loss)[[0, 0]];
    let grads = f.g.backward(loss, &model.store);
    Ok((value, grads, n))
}

/// Summed NLL and token count, teacher-forced.
pub fn nll_totals(model: &Model, examples: &[TrainingExample]) -> Result<(f64, usize)> {
    let mut total = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let mut f = Fwd::new(&model.store);
        let lp = model.target_log_probs(&mut f, &ex.input, &ex.target, &mut Vec::new())?;
        let (s, n) = nll_sum(f.value(lp), &ex.target)?;
        total += s;
        tokens += n;
    }
    Ok((total, tokens))
}

/// `exp` of the token-weighted mean NLL.
pub fn validation_ppl(model: &Model, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let (total, tokens) = nll_totals(model, examples)?;
    Ok((total / tokens as f64).exp())
}

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.values().iter().map(|p| Mat::zeros(p.dim())).collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.m[id.0];
            let v = &mut self.v[id.0];
            let p = store.value_mut(id);
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
                });
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda: [f64; FUSION_TERMS],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Present for epochs at or after `checkpoint_min_epoch`.
    pub valid_ppl: Option<f64>,
}

/// Hooks into the training loop; every method defaults to a no-op.
pub trait TrainObserver {
    fn on_stage(&mut self, _stage: Stage) {}
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model) -> Result<()> {
        Ok(())
    }
}

pub struct NoopObserver;
impl TrainObserver for NoopObserver {}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation perplexity.
    pub best: Model,
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub last: Model,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

pub fn train(
    mut model: Model,
    train_set: &[TrainingExample],
    valid_set: &[TrainingExample],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if valid_set.is_empty() {
        return Err(Error::EmptySplit("validation".into()));
    }
    let mut adam = Adam::new(&model.store, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut steps = Vec::new();
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Model)> = None;
    let mut step = 0usize;
    let mut stages = Vec::new();

    'epochs: for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch in order.chunks(cfg.batch_train) {
            let mut acc = Grads::zeros_like(&model.store);
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train_set[i];
                stages.push(Stage::Dds);
                stages.push(Stage::CognitiveStates);
                let (loss, grads, _) = example_loss_and_grads(&model, ex, &mut stages)?;
                for s in stages.drain(..) {
                    observer.on_stage(s);
                }
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        step,
                        epoch,
                        detail: format!(
                            "example {}#{} loss {loss}; lambda {:?}; grad norm {}",
                            ex.dialogue_id,
                            ex.turn_index,
                            model.lambda(),
                            grads.global_norm()
                        ),
                    });
                }
                batch_loss += loss;
                acc.accumulate(&grads);
            }
            let n = batch.len() as f64;
            acc.scale(1.0 / n);
            if let Some(clip) = cfg.grad_clip {
                let norm = acc.global_norm();
                if norm > clip {
                    acc.scale(clip / norm);
                }
            }
            adam.update(&mut model.store, &acc, cfg.lr);
            observer.on_stage(Stage::GradientStep);
            step += 1;
            let record = StepRecord {
                step,
                epoch,
                loss: batch_loss / n,
                lr: cfg.lr,
                lambda: model.lambda(),
            };
            observer.on_step(&record);
            steps.push(record);
            epoch_loss += batch_loss / n;
            epoch_batches += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                finish_epoch(&model, valid_set, cfg, epoch, epoch_loss / epoch_batches as f64, &mut best, &mut epochs, observer)?;
                break 'epochs;
            }
        }
        finish_epoch(&model, valid_set, cfg, epoch, epoch_loss / epoch_batches as f64, &mut best, &mut epochs, observer)?;
    }

    let (best_epoch, best_valid_ppl, best_model) = match best {
        Some(b) => b,
        None => {
            // Stopped before the selection window opened.
            let ppl = validation_ppl(&model, valid_set)?;
            (epochs.len(), ppl, model.clone())
        }
    };
    Ok(TrainOutcome {
        best: best_model,
        best_epoch,
        best_valid_ppl,
        last: model,
        steps,
        epochs,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish_epoch(
    model: &Model,
    valid_set: &[TrainingExample],
    cfg: &TrainConfig,
    epoch: usize,
    mean_loss: f64,
    best: &mut Option<(usize, f64, Model)>,
    epochs: &mut Vec<EpochRecord>,
    observer: &mut dyn TrainObserver,
) -> Result<()> {
    let valid_ppl = if epoch >= cfg.checkpoint_min_epoch {
        let ppl = validation_ppl(model, valid_set)?;
        if best.as_ref().is_none_or(|b| ppl < b.1) {
            *best = Some((epoch, ppl, model.clone()));
        }
        Some(ppl)
    } else {
        None
    };
    let record = EpochRecord {
        epoch,
        mean_loss,
        valid_ppl,
    };
    observer.on_epoch(&record, model)?;
    epochs.push(record);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn nll_edge_cases() {
        let certain = array![[f64::NEG_INFINITY, 0.0], [f64::NEG_INFINITY, 0.0]];
        assert_eq!(nll_loss(&certain, &TokenSeq::new(vec![1, 1])).unwrap(), 0.0);
        // PAD rows are skipped even when their log-probability is -inf.
        assert_eq!(nll_loss(&certain, &TokenSeq::new(vec![PAD, 1])).unwrap(), 0.0);
        assert!(nll_loss(&certain, &TokenSeq::new(vec![PAD, PAD])).is_err());
        let v = 7usize;
        let uniform = Mat::from_elem((3, v), -(v as f64).ln());
        let l = nll_loss(&uniform, &TokenSeq::new(vec![3, 4, 5])).unwrap();
        assert!((l - (v as f64).ln()).abs() < 1e-12);
        assert!(nll_loss(&uniform, &TokenSeq::new(vec![3])).is_err());
    }

    #[test]
    fn nll_hand_table() {
        let probs = array![[0.5, 0.25, 0.25], [0.1, 0.6, 0.3], [0.2, 0.2, 0.6]];
        let lp = probs.mapv(f64::ln);
        let got = nll_loss(&lp, &TokenSeq::new(vec![1, 1, 2])).unwrap();
        let want = -(0.25f64.ln() + 0.6f64.ln() + 0.6f64.ln()) / 3.0;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut store = ParamStore::default();
        let id = store.add("p", array![[0.5, -2.0, 0.0]]);
        let mut grads = Grads::zeros_like(&store);
        grads.grads[0] = Some(array![[0.3, -4.0, 1e-3]]);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, &grads, 0.01);
        let expect = |p: f64, g: f64| p - 0.01 * g / (g.abs() + 1e-8);
        let got = store.value(id);
        for (i, (p, g)) in [(0.5, 0.3), (-2.0, -4.0), (0.0, 1e-3)].into_iter().enumerate() {
            assert!((got[[0, i]] - expect(p, g)).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_lr_leaves_params_bitwise() {
        let mut store = ParamStore::default();
        store.add("p", array![[0.123456789, -9.87654321]]);
        let before = store.values()[0].clone();
        let mut grads = Grads::zeros_like(&store);
        grads.grads[0] = Some(array![[5.0, -3.0]]);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, &grads, 0.0);
        for (a, b) in store.values()[0].iter().zip(before.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::toy().validate().is_ok());
        assert_eq!(TrainConfig::fine_tune().lr, 1.5e-5);
        let bad = TrainConfig {
            checkpoint_min_epoch: 11,
            ..TrainConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn context_flattening() {
        let h = vec![Turn::seeker("hi"), Turn::supporter(Strategy::Question, "why?")];
        assert_eq!(
            context_text(&h, "sad"),
            "User: hi System: [Question] why? User: sad"
        );
    }
}
