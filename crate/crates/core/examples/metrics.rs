//! Scores a few hand-written responses with BLEU, ROUGE-L and Distinct-n,
//! then computes the normalized mean score of a metric table.
//!
//! cargo run --example metrics [table.csv]

use esc_fusion::metrics::{corpus_bleu, distinct_n, mean_rouge_l, MetricTable};
use esc_fusion::pipeline::{cmd_s_norm, s_norm_table};
use esc_fusion::text::tokenize;

fn main() -> esc_fusion::Result<()> {
    let pairs = [
        ("that sounds really hard .", "that sounds so hard for you ."),
        ("have you talked to your manager ?", "have you spoken with your manager about it ?"),
        ("i understand .", "i can understand why you feel that way ."),
    ];
    let tok: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|(h, r)| (tokenize(h), tokenize(r))).collect();
    let bleu_pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = tok.iter().map(|(h, r)| (h.clone(), vec![r.clone()])).collect();
    for n in 1..=4 {
        println!("B-{n}  {:.2}", corpus_bleu(&bleu_pairs, n));
    }
    let hyps: Vec<Vec<String>> = tok.iter().map(|(h, _)| h.clone()).collect();
    println!("D-1  {:.2}", distinct_n(&hyps, 1));
    println!("D-2  {:.2}", distinct_n(&hyps, 2));
    println!("R-L  {:.2}", mean_rouge_l(&tok));

    let path = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/table1.csv").into());
    let table = MetricTable::load(&path)?;
    let scores = cmd_s_norm(&table)?;
    print!("{}", s_norm_table(&table, &scores));
    Ok(())
}
