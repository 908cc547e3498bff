//! Encoder-decoder with multi-knowledge fusion.
//!
//! The dialogue context, the retrieved demonstrations and the cognitive
//! state sequences are encoded by one (optionally untied) transformer
//! encoder. Cognitive features go through [`CognitionStack`]. Both knowledge
//! sources are then aligned with the context by raw dot-product
//! cross-attention in both directions, mixed with softmax weights, layer
//! normalized, and handed to the decoder as its cross-attention memory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Mat, ParamId, ParamStore, Var};
use crate::cognition::CognitionStack;
use crate::corpus::Strategy;
use crate::error::{Error, Result};
use crate::nn::{
    attention_mask, sinusoidal_positions, DecoderBlock, EncoderStack, Fwd, Init, LayerNorm, Linear,
};
use crate::text::{strategy_token, TokenSeq, BOS, CLS, PAD};

pub const FUSION_TERMS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    #[default]
    Base,
    /// Each aggregation term is layer normalized before the weighted sum.
    WithNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub cog_enc_layers: usize,
    pub cog_ref_layers: usize,
    pub ff_mult: usize,
    pub vocab_size: usize,
    pub max_enc_len: usize,
    pub max_dec_len: usize,
    /// Per-relation cognitive sequence length `l_r`.
    pub cog_len: usize,
    pub variant: FusionVariant,
    pub tie_encoders: bool,
    /// Learned Q/K/V projections in the four co-attention operations.
    pub projected_cross_attention: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            cog_enc_layers: 1,
            cog_ref_layers: 1,
            ff_mult: 4,
            vocab_size: 0,
            max_enc_len: 512,
            max_dec_len: 50,
            cog_len: 32,
            variant: FusionVariant::Base,
            tie_encoders: true,
            projected_cross_attention: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return fail(format!("d={} must be a positive multiple of heads={}", self.d, self.heads));
        }
        if self.max_enc_len == 0 || self.max_dec_len == 0 || self.cog_len == 0 {
            return fail("sequence caps must be positive".into());
        }
        if self.vocab_size < crate::text::RESERVED {
            return fail(format!("vocab_size {} below the reserved block", self.vocab_size));
        }
        if self.dec_layers == 0 || self.cog_enc_layers == 0 || self.cog_ref_layers == 0 {
            return fail("decoder and cognition stacks need at least one layer".into());
        }
        Ok(())
    }
}

/// Algorithm stages, in the order one training example passes through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Dds,
    CognitiveStates,
    EncodeDemonstrations,
    EncodeContext,
    EncodeCognitiveStates,
    CognitiveEncoder,
    CognitiveRefiner,
    CognitiveSelector,
    DualCrossAttention,
    WeightedFusion,
    FusionLayerNorm,
    Decode,
    Nll,
    GradientStep,
}

/// Token inputs for one turn. Context may contain a PAD tail; PAD positions
/// are masked everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInput {
    pub context: TokenSeq,
    pub demonstrations: TokenSeq,
    /// Intent, need, effect, want.
    pub cognitive: [TokenSeq; 4],
}

#[derive(Debug, Clone)]
struct CoProjection {
    query: Linear,
    key: Linear,
    value: Linear,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    embedding: ParamId,
    encoders: Vec<EncoderStack>,
    pub cognition: CognitionStack,
    coattn: Option<[CoProjection; 4]>,
    ln_pd: LayerNorm,
    ln_cd: LayerNorm,
    ln_dp: LayerNorm,
    ln_dc: LayerNorm,
    pre_norms: Option<Vec<LayerNorm>>,
    pub fusion_weights: ParamId,
    ln_fin: LayerNorm,
    decoder: Vec<DecoderBlock>,
    output: Linear,
}

/// Handles to every intermediate of one fused forward pass.
#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub context: Var,
    pub context_valid: Vec<bool>,
    pub demonstrations: Var,
    pub cognitive_states: Var,
    pub cognitive_encoded: Var,
    pub cognitive_summary: Var,
    pub refined: Var,
    pub selected: Var,
    /// `H_C`
    pub cognition: Var,
    pub z_demo: Var,
    pub z_cog: Var,
    /// `H̃_P_D, H̃_C_D, H̃_D_P, H̃_D_C`, all context-length.
    pub aligned: [Var; 4],
    pub weights: Var,
    pub lambda: Var,
    pub fused: Var,
    pub fused_norm: Var,
}

/// The decoder memory for one turn, detached from any graph.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedKnowledge {
    pub hidden: Mat,
    pub valid: Vec<bool>,
    pub lambda: [f64; FUSION_TERMS],
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::default();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        };
        let d = config.d;
        let ff = config.ff_mult * d;
        let embedding = init.normal("embedding".into(), config.vocab_size, d, 1.0);
        let n_encoders = if config.tie_encoders { 1 } else { 3 };
        let encoders = (0..n_encoders)
            .map(|i| EncoderStack::new(&mut init, &format!("enc{i}"), config.enc_layers, d, config.heads, ff))
            .collect();
        let cognition = CognitionStack::new(
            &mut init,
            d,
            config.heads,
            config.cog_enc_layers,
            config.cog_ref_layers,
            config.ff_mult,
        );
        let coattn = config.projected_cross_attention.then(|| {
            ["pd", "cd", "dp", "dc"].map(|n| CoProjection {
                query: Linear::new(&mut init, &format!("coattn.{n}.q"), d, d),
                key: Linear::new(&mut init, &format!("coattn.{n}.k"), d, d),
                value: Linear::new(&mut init, &format!("coattn.{n}.v"), d, d),
            })
        });
        let ln_pd = LayerNorm::new(&mut init, "fusion.ln_pd", d);
        let ln_cd = LayerNorm::new(&mut init, "fusion.ln_cd", d);
        let ln_dp = LayerNorm::new(&mut init, "fusion.ln_dp", d);
        let ln_dc = LayerNorm::new(&mut init, "fusion.ln_dc", d);
        let pre_norms = (config.variant == FusionVariant::WithNorm).then(|| {
            (0..FUSION_TERMS)
                .map(|i| LayerNorm::new(&mut init, &format!("fusion.pre{i}"), d))
                .collect()
        });
        let fusion_weights = init.constant("fusion.w".into(), 1, FUSION_TERMS, 0.0);
        let ln_fin = LayerNorm::new(&mut init, "fusion.ln_fin", d);
        let decoder = (0..config.dec_layers)
            .map(|i| DecoderBlock::new(&mut init, &format!("dec{i}"), d, config.heads, ff))
            .collect();
        let output = Linear::new(&mut init, "out", d, config.vocab_size);
        Ok(Model {
            config,
            store,
            embedding,
            encoders,
            cognition,
            coattn,
            ln_pd,
            ln_cd,
            ln_dp,
            ln_dc,
            pre_norms,
            fusion_weights,
            ln_fin,
            decoder,
            output,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Current mixture weights `λ = softmax(w)`.
    pub fn lambda(&self) -> [f64; FUSION_TERMS] {
        softmax5(self.store.value(self.fusion_weights))
    }

    fn encoder(&self, role: usize) -> &EncoderStack {
        &self.encoders[role.min(self.encoders.len() - 1)]
    }

    fn embed(&self, f: &mut Fwd, ids: &[u32]) -> Result<Var> {
        if let Some(&bad) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(Error::InvalidTokenId(bad));
        }
        let table = f.p(self.embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let tokens = f.g.gather(table, &idx);
        let pos = f.g.input(sinusoidal_positions(ids.len(), self.config.d));
        Ok(f.g.add(tokens, pos))
    }

    /// Embeds and encodes; PAD positions are masked as keys.
    fn encode_ids(&self, f: &mut Fwd, role: usize, ids: &[u32]) -> Result<(Var, Vec<bool>)> {
        let ids: &[u32] = if ids.is_empty() { &[CLS] } else { ids };
        let mut valid: Vec<bool> = ids.iter().map(|&i| i != PAD).collect();
        if valid.iter().all(|v| !v) {
            valid[0] = true;
        }
        let x = self.embed(f, ids)?;
        Ok((self.encoder(role).forward(f, x, &valid), valid))
    }

    /// `H_CTX`; sequences over `max_enc_len` keep their latest tokens.
    pub fn encode_context(&self, f: &mut Fwd, context: &TokenSeq) -> Result<(Var, Vec<bool>)> {
        let start = context.len().saturating_sub(self.config.max_enc_len);
        self.encode_ids(f, 0, &context.ids[start..])
    }

    /// `H_P`; demonstrations over `max_enc_len` keep their earliest tokens.
    pub fn encode_demonstrations(&self, f: &mut Fwd, demos: &TokenSeq) -> Result<(Var, Vec<bool>)> {
        let end = demos.len().min(self.config.max_enc_len);
        self.encode_ids(f, 1, &demos.ids[..end])
    }

    /// `E_C`: each relation sequence is cut or PAD-filled to exactly `l_r`
    /// tokens, encoded, and the four results stacked along the sequence axis.
    pub fn encode_states(&self, f: &mut Fwd, cognitive: &[TokenSeq; 4]) -> Result<(Var, Vec<bool>)> {
        let l_r = self.config.cog_len;
        let mut parts = Vec::with_capacity(4);
        let mut valid = Vec::with_capacity(4 * l_r);
        for seq in cognitive {
            let mut ids: Vec<u32> = seq.ids.iter().copied().take(l_r).collect();
            ids.resize(l_r, PAD);
            let (encoded, v) = self.encode_ids(f, 2, &ids)?;
            parts.push(encoded);
            valid.extend(v);
        }
        Ok((f.g.concat_rows(&parts), valid))
    }

    /// `softmax(A·Bᵀ)·B` with invalid rows of `B` masked out.
    pub fn cross_attend(&self, f: &mut Fwd, a: Var, b: Var, b_valid: &[bool], proj: Option<usize>) -> Result<Var> {
        let (la, wa) = f.g.shape(a);
        let (lb, wb) = f.g.shape(b);
        if wa != wb || lb != b_valid.len() {
            return Err(Error::DimensionMismatch(format!(
                "cross-attention between {la}x{wa} and {lb}x{wb} with {} mask entries",
                b_valid.len()
            )));
        }
        let (q, k, v) = match (proj, &self.coattn) {
            (Some(i), Some(p)) => (
                p[i].query.forward(f, a),
                p[i].key.forward(f, b),
                p[i].value.forward(f, b),
            ),
            _ => (a, b, b),
        };
        let scores = f.g.matmul_t(q, k);
        let mask = attention_mask(la, b_valid, false);
        let probs = f.attention_probs(scores, mask.as_ref());
        Ok(f.g.matmul(probs, v))
    }

    /// Returns `(H̃_P_D, H̃_C_D, H̃_D_P, H̃_D_C, Z_P, Z_C)`. The knowledge-side
    /// terms are pooled back onto the context positions by a second
    /// cross-attention with `H_CTX` as queries.
    #[allow(clippy::too_many_arguments)]
    pub fn align(
        &self,
        f: &mut Fwd,
        context: Var,
        context_valid: &[bool],
        demos: Var,
        demos_valid: &[bool],
        cognition: Var,
        cognition_valid: &[bool],
    ) -> Result<([Var; 4], Var, Var)> {
        let z_p = self.cross_attend(f, context, demos, demos_valid, Some(0))?;
        let z_c = self.cross_attend(f, context, cognition, cognition_valid, Some(1))?;
        let sum = f.g.add(context, z_p);
        let pd = self.ln_pd.forward(f, sum);
        let sum = f.g.add(context, z_c);
        let cd = self.ln_cd.forward(f, sum);

        let back_p = self.cross_attend(f, demos, context, context_valid, Some(2))?;
        let sum = f.g.add(demos, back_p);
        let dp_native = self.ln_dp.forward(f, sum);
        let dp = self.cross_attend(f, context, dp_native, demos_valid, None)?;

        let back_c = self.cross_attend(f, cognition, context, context_valid, Some(3))?;
        let sum = f.g.add(cognition, back_c);
        let dc_native = self.ln_dc.forward(f, sum);
        let dc = self.cross_attend(f, context, dc_native, cognition_valid, None)?;
        Ok(([pd, cd, dp, dc], z_p, z_c))
    }

    /// `λ = softmax(w)`, `H_fin = Σ λ_i·T_i`, `Ĥ_fin = LayerNorm(H_fin)`.
    /// Returns `(λ, H_fin, Ĥ_fin)`.
    pub fn fuse(&self, f: &mut Fwd, terms: [Var; FUSION_TERMS], weights: Var) -> Result<(Var, Var, Var)> {
        let (lambda, fused) = self.weighted_sum(f, terms, weights)?;
        let normed = self.ln_fin.forward(f, fused);
        Ok((lambda, fused, normed))
    }

    fn weighted_sum(&self, f: &mut Fwd, terms: [Var; FUSION_TERMS], weights: Var) -> Result<(Var, Var)> {
        let shape = f.g.shape(terms[0]);
        if terms.iter().any(|t| f.g.shape(*t) != shape) {
            return Err(Error::DimensionMismatch("fusion terms differ in shape".into()));
        }
        if f.g.shape(weights) != (1, FUSION_TERMS) {
            return Err(Error::DimensionMismatch("fusion weights must be 1x5".into()));
        }
        let lambda = f.g.softmax_rows(weights);
        let mut fused: Option<Var> = None;
        for (i, term) in terms.into_iter().enumerate() {
            let term = match &self.pre_norms {
                Some(norms) => norms[i].forward(f, term),
                None => term,
            };
            let scaled = f.g.scale_by(term, lambda, i);
            fused = Some(match fused {
                Some(acc) => f.g.add(acc, scaled),
                None => scaled,
            });
        }
        Ok((lambda, fused.expect("five terms")))
    }

    /// Everything up to and including `Ĥ_fin`.
    pub fn forward_fused(&self, f: &mut Fwd, input: &ModelInput, stages: &mut Vec<Stage>) -> Result<FusionTrace> {
        let d = self.config.d;
        stages.push(Stage::EncodeDemonstrations);
        let (h_p, p_valid) = self.encode_demonstrations(f, &input.demonstrations)?;
        stages.push(Stage::EncodeContext);
        let (h_ctx, ctx_valid) = self.encode_context(f, &input.context)?;
        let l = ctx_valid.len();
        stages.push(Stage::EncodeCognitiveStates);
        let (e_c, e_valid) = self.encode_states(f, &input.cognitive)?;
        debug_assert_eq!(f.g.shape(e_c), (4 * self.config.cog_len, d));

        stages.push(Stage::CognitiveEncoder);
        let (h_enc, h_summary) = self.cognition.cognitive_encode(f, e_c, &e_valid)?;
        stages.push(Stage::CognitiveRefiner);
        let h_ref = self.cognition.cognitive_refine(f, h_ctx, h_summary, &ctx_valid)?;
        debug_assert_eq!(f.g.shape(h_ref), (l, 2 * d));
        stages.push(Stage::CognitiveSelector);
        let (h_sel, h_c) = self.cognition.cognitive_select(f, h_ref);
        debug_assert_eq!(f.g.shape(h_c), (l, d));

        stages.push(Stage::DualCrossAttention);
        let (aligned, z_p, z_c) = self.align(f, h_ctx, &ctx_valid, h_p, &p_valid, h_c, &ctx_valid)?;
        stages.push(Stage::WeightedFusion);
        let w = f.p(self.fusion_weights);
        let terms = [h_ctx, aligned[0], aligned[1], aligned[2], aligned[3]];
        let (lambda, h_fin) = self.weighted_sum(f, terms, w)?;
        stages.push(Stage::FusionLayerNorm);
        let h_fin_norm = self.ln_fin.forward(f, h_fin);
        debug_assert_eq!(f.g.shape(h_fin_norm), (l, d));
        Ok(FusionTrace {
            context: h_ctx,
            context_valid: ctx_valid,
            demonstrations: h_p,
            cognitive_states: e_c,
            cognitive_encoded: h_enc,
            cognitive_summary: h_summary,
            refined: h_ref,
            selected: h_sel,
            cognition: h_c,
            z_demo: z_p,
            z_cog: z_c,
            aligned,
            weights: w,
            lambda,
            fused: h_fin,
            fused_norm: h_fin_norm,
        })
    }

    /// Decoder logits `[len(prefix)+1 × V]` for input `[BOS] ⧺ prefix`.
    pub fn decode(&self, f: &mut Fwd, memory: Var, memory_valid: &[bool], prefix: &[u32]) -> Result<Var> {
        if prefix.len() >= self.config.max_dec_len {
            return Err(Error::DecodeOverflow {
                len: prefix.len(),
                max: self.config.max_dec_len,
            });
        }
        let mut ids = Vec::with_capacity(prefix.len() + 1);
        ids.push(BOS);
        ids.extend_from_slice(prefix);
        let mut x = self.embed(f, &ids)?;
        for block in &self.decoder {
            x = block.forward(f, x, memory, memory_valid);
        }
        Ok(self.output.forward(f, x))
    }

    /// Teacher-forced log-probabilities for every target position, `[n × V]`.
    pub fn target_log_probs(&self, f: &mut Fwd, input: &ModelInput, target: &TokenSeq, stages: &mut Vec<Stage>) -> Result<Var> {
        if target.is_empty() {
            return Err(Error::LengthMismatch("empty target".into()));
        }
        let trace = self.forward_fused(f, input, stages)?;
        stages.push(Stage::Decode);
        let logits = self.decode(f, trace.fused_norm, &trace.context_valid, &target.ids[..target.len() - 1])?;
        Ok(f.g.log_softmax_rows(logits))
    }

    /// Runs the encoder side and detaches `Ĥ_fin` for decoding.
    pub fn fuse_knowledge(&self, input: &ModelInput) -> Result<FusedKnowledge> {
        let mut f = Fwd::new(&self.store);
        let trace = self.forward_fused(&mut f, input, &mut Vec::new())?;
        Ok(FusedKnowledge {
            hidden: f.value(trace.fused_norm).clone(),
            valid: trace.context_valid,
            lambda: softmax5(f.value(trace.weights)),
        })
    }

    /// Next-token logits after `prefix`.
    pub fn next_logits(&self, fused: &FusedKnowledge, prefix: &[u32]) -> Result<Vec<f64>> {
        let mut f = Fwd::new(&self.store);
        let memory = f.g.input(fused.hidden.clone());
        let logits = self.decode(&mut f, memory, &fused.valid, prefix)?;
        let m = f.value(logits);
        Ok(m.row(m.nrows() - 1).to_vec())
    }

    /// `P(r_t | r_<t, C)` as a normalized distribution over the vocabulary.
    pub fn decode_step(&self, fused: &FusedKnowledge, prefix: &TokenSeq) -> Result<Vec<f64>> {
        Ok(softmax(&self.next_logits(fused, &prefix.ids)?))
    }

    /// Strategies ranked by their probability as the first decoded token,
    /// restricted to the eight strategy tokens; ties go to the lower id.
    pub fn predict_strategy(&self, fused: &FusedKnowledge, n: usize) -> Result<Vec<Strategy>> {
        let logits = self.next_logits(fused, &[])?;
        Ok(rank_strategies(&logits, n))
    }
}

/// Ranks strategies by their logits at position zero.
pub fn rank_strategies(logits: &[f64], n: usize) -> Vec<Strategy> {
    let restricted: Vec<f64> = Strategy::ALL
        .iter()
        .map(|s| logits[strategy_token(*s) as usize])
        .collect();
    let probs = softmax(&restricted);
    let mut order: Vec<usize> = (0..Strategy::COUNT).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(n.min(Strategy::COUNT))
        .map(|i| Strategy::ALL[i])
        .collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn softmax5(w: &Mat) -> [f64; FUSION_TERMS] {
    let p = softmax(w.as_slice().expect("contiguous"));
    let mut out = [0.0; FUSION_TERMS];
    out.copy_from_slice(&p);
    out
}
