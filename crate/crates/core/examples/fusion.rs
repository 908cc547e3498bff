//! Runs one untrained forward pass and prints the stage order, the shape
//! of every intermediate and the fusion weights, for both variants.
//!
//! cargo run --release --example fusion

use std::collections::BTreeSet;

use esc_fusion::cognition::TemplateProvider;
use esc_fusion::corpus::build_retrieval_base;
use esc_fusion::model::{FusionVariant, Model, ModelConfig};
use esc_fusion::nn::Fwd;
use esc_fusion::pipeline::build_training_vocab;
use esc_fusion::retrieval::{HashingEmbedder, RetrievalIndex};
use esc_fusion::synthetic::synthetic_corpus;
use esc_fusion::training::ExampleBuilder;

fn main() -> esc_fusion::Result<()> {
    let dialogues = synthetic_corpus(30, 3, 4);
    let vocab = build_training_vocab(&dialogues, &TemplateProvider, 1)?;
    let embedder = HashingEmbedder::new(256);
    let index = RetrievalIndex::build(&build_retrieval_base(&dialogues), &embedder);
    let builder = ExampleBuilder {
        vocab: &vocab,
        index: &index,
        embedder: &embedder,
        cognition: &TemplateProvider,
        top_s: 3,
        max_enc_len: 128,
        max_dec_len: 50,
        cog_len: 16,
    };
    let d0 = &dialogues[0];
    let ex = d0.exchanges().next().expect("dialogue has an exchange");
    let (input, demos) = builder.build_input(ex.history(), ex.post(), &d0.persona, &BTreeSet::new())?;
    println!("post: {}", ex.post());
    for d in &demos {
        println!("demo {} score {:.3}", d.passage_id, d.score);
    }

    for variant in [FusionVariant::Base, FusionVariant::WithNorm] {
        let model = Model::new(ModelConfig {
            d: 32,
            heads: 4,
            enc_layers: 1,
            dec_layers: 1,
            cog_len: 16,
            max_enc_len: 128,
            vocab_size: vocab.len(),
            variant,
            ..ModelConfig::default()
        })?;
        let mut f = Fwd::new(&model.store);
        let mut stages = Vec::new();
        let t = model.forward_fused(&mut f, &input, &mut stages)?;
        println!("\n{variant:?}: {} parameters", model.parameter_count());
        println!("stages: {stages:?}");
        let shapes = [
            ("H_CTX", t.context),
            ("H_P", t.demonstrations),
            ("E_C", t.cognitive_states),
            ("H_enc", t.cognitive_encoded),
            ("H_ref", t.refined),
            ("H_C", t.cognition),
            ("H_fin", t.fused_norm),
        ];
        for (name, v) in shapes {
            println!("  {name:<6} {:?}", f.g.shape(v));
        }
        println!("  lambda {:?}", model.lambda());
    }
    Ok(())
}
