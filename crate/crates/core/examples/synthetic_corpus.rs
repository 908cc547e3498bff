//! Writes a deterministic synthetic corpus in the ingest JSON format.
//!
//! cargo run --example synthetic_corpus -- corpus.json [dialogues] [seed]

use esc_fusion::corpus::save_corpus;
use esc_fusion::synthetic::synthetic_corpus;

fn main() -> esc_fusion::Result<()> {
    let mut args = std::env::args().skip(1);
    let path = args.next().unwrap_or_else(|| "corpus.json".into());
    let n: usize = args.next().and_then(|v| v.parse().ok()).unwrap_or(60);
    let seed: u64 = args.next().and_then(|v| v.parse().ok()).unwrap_or(0);
    let dialogues = synthetic_corpus(n, 3, seed);
    save_corpus(&path, &dialogues)?;
    println!("wrote {} dialogues to {path}", dialogues.len());
    Ok(())
}
