//! Builds a retrieval index over a synthetic corpus and prints the top-s
//! demonstrations for a query, with and without self-exclusion.
//!
//! cargo run --example retrieval -- "i am stressed about my exams" 3

use std::collections::BTreeSet;

use esc_fusion::corpus::build_retrieval_base;
use esc_fusion::retrieval::{compose_query, HashingEmbedder, RetrievalIndex};
use esc_fusion::synthetic::synthetic_corpus;

fn main() -> esc_fusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let post = args.next().unwrap_or_else(|| "i am stressed about my exams".into());
    let s: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(3);

    let base = build_retrieval_base(&synthetic_corpus(60, 3, 7));
    let embedder = HashingEmbedder::new(256);
    let index = RetrievalIndex::build(&base, &embedder);
    println!("{} passages, dim {}", index.len(), index.dim());

    let query = compose_query(&post, "")?;
    let hits = index.retrieve_top_s(&embedder, &query, s, &BTreeSet::new())?;
    for d in &hits {
        println!("{:>5} {:.4}  {}", d.passage_id, d.score, d.text);
    }

    // Excluding the best hit promotes the runner-up.
    let exclude: BTreeSet<usize> = hits.iter().take(1).map(|d| d.passage_id).collect();
    let rest = index.retrieve_top_s(&embedder, &query, s, &exclude)?;
    println!("without passage {:?}:", exclude);
    for d in &rest {
        println!("{:>5} {:.4}", d.passage_id, d.score);
    }
    Ok(())
}
