//! Trains the memorization fixture briefly and runs a scripted chat
//! session through the same loop the `esc chat` command uses.
//!
//! cargo run --release --example chat [work-dir]

use std::io::Cursor;

use esc_fusion::pipeline::{cmd_ingest, overfit_setup, run_chat, train_run, Resources};
use esc_fusion::training::NoopObserver;

fn main() -> esc_fusion::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("esc-chat"));
    let mut cfg = overfit_setup(&dir)?;
    cfg.train.max_epochs = 40;
    cmd_ingest(&cfg)?;
    let (outcome, _) = train_run(&cfg, &mut NoopObserver)?;
    let resources = Resources::load(&cfg)?;
    let script = "i failed my driving test again .\n/show-lambda\n/reset\nmy friends ignore my messages .\n/quit\n";
    run_chat(&outcome.best, &resources, &cfg, Cursor::new(script), std::io::stdout().lock())
}
