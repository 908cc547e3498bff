//! Shows the repetition penalty, top-k and nucleus filters on a toy logit
//! vector, then samples strategy-first responses from an untrained model.
//!
//! cargo run --release --example sampling

use esc_fusion::cognition::TemplateProvider;
use esc_fusion::model::{Model, ModelConfig, ModelInput};
use esc_fusion::pipeline::build_training_vocab;
use esc_fusion::sampling::{filtered_distribution, Sampler, SamplerConfig};
use esc_fusion::synthetic::synthetic_corpus;
use esc_fusion::text::{decode, encode, TokenSeq};

fn main() -> esc_fusion::Result<()> {
    let cfg = SamplerConfig::default();
    let logits = [2.0, 1.8, 1.5, 0.3, -0.5, -1.0, 0.9, 1.2, 0.1, 0.0, -2.0, 0.7];
    println!("no history:   {:?}", filtered_distribution(&logits, &[], &cfg));
    println!("after 0 and 1: {:?}", filtered_distribution(&logits, &[0, 1], &cfg));

    let dialogues = synthetic_corpus(10, 2, 9);
    let vocab = build_training_vocab(&dialogues, &TemplateProvider, 1)?;
    let model = Model::new(ModelConfig {
        d: 16,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        cog_len: 8,
        max_dec_len: 12,
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })?;
    let input = ModelInput {
        context: encode("User: i lost my job today", &vocab, 64),
        demonstrations: TokenSeq::new(vec![]),
        cognitive: std::array::from_fn(|_| encode("seeker needs support with job", &vocab, 8)),
    };
    let fused = model.fuse_knowledge(&input)?;
    for seed in 0..3 {
        let mut sampler = Sampler::new(SamplerConfig { seed, ..cfg })?;
        let out = sampler.sample_response(&model, &fused)?;
        println!("seed {seed}: {:?} | {}", out.strategy.map(|s| s.name()), decode(&out.tokens, &vocab)?);
    }
    Ok(())
}
