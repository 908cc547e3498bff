//! Memorizes the eight-dialogue fixture end to end: ingest, train for 300
//! steps, then score the training split.
//!
//! cargo run --release --example overfit [work-dir]

use std::time::Instant;

use esc_fusion::pipeline::{cmd_ingest, evaluate_run, overfit_setup, report_table, train_run};
use esc_fusion::training::NoopObserver;

fn main() -> esc_fusion::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("esc-overfit"));
    let cfg = overfit_setup(&dir)?;
    let start = Instant::now();
    let ingest = cmd_ingest(&cfg)?;
    println!("ingest: {ingest:?}");
    let (outcome, summary) = train_run(&cfg, &mut NoopObserver)?;
    println!(
        "trained {} steps in {:.1}s; best epoch {} valid ppl {:.3}; train ppl {:.4}",
        summary.steps,
        start.elapsed().as_secs_f64(),
        summary.best_epoch,
        summary.best_valid_ppl,
        summary.train_ppl
    );
    println!("lambda {:?}", outcome.best.lambda());
    let (report, samples) = evaluate_run(&cfg, &cfg.outputs().best_checkpoint(), "train")?;
    print!("{}", report_table(&[("train".into(), Some(&report))]));
    for s in samples.iter().take(3) {
        println!("{} | {}", s.response, s.reference);
    }
    println!("total {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
