use std::fs;
use std::path::Path;

use esc_fusion::checkpoint;
use esc_fusion::corpus::save_corpus;
use esc_fusion::pipeline::{self, Resources, RunConfig};
use esc_fusion::synthetic::synthetic_corpus;
use esc_fusion::training::{nll_totals, validation_ppl, NoopObserver};
use esc_fusion::Error;

fn tiny_config(dir: &Path) -> RunConfig {
    let corpus = dir.join("corpus.json");
    save_corpus(&corpus, &synthetic_corpus(20, 3, 5)).unwrap();
    let mut cfg = RunConfig {
        corpus: Some(corpus),
        out_dir: dir.join("run"),
        ..RunConfig::default()
    };
    cfg.model.d = 8;
    cfg.model.heads = 2;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 1;
    cfg.model.ff_mult = 1;
    cfg.model.cog_len = 8;
    cfg.model.max_enc_len = 64;
    cfg.train.max_epochs = 1;
    cfg.train.checkpoint_min_epoch = 1;
    cfg.eval.max_examples = Some(3);
    cfg.set_seed(2);
    cfg
}

#[test]
fn sweep_keeps_input_order_and_survives_failures() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::cmd_ingest(&cfg).unwrap();
    let rows = pipeline::cmd_sweep_top_s(&cfg, &[3, 0, 1]);
    assert_eq!(rows.iter().map(|r| r.top_s).collect::<Vec<_>>(), vec![3, 0, 1]);
    assert!(rows[0].report.is_some() && rows[0].error.is_none());
    assert!(rows[1].report.is_none() && rows[1].error.as_deref().unwrap().contains("top_s"));
    assert!(rows[2].report.is_some());
    assert!(cfg.out_dir.join("sweep/s3/checkpoints/best.bin").exists());
    assert!(cfg.out_dir.join("sweep/s1/checkpoints/best.bin").exists());
    let table = pipeline::sweep_table(&rows);
    let header = table.lines().next().unwrap();
    for column in ["ACC", "PPL", "B-1", "B-2", "B-3", "B-4", "D-1", "D-2", "R-L"] {
        assert!(header.contains(column), "{header}");
    }
}

#[test]
fn split_perplexity_is_token_weighted_and_order_free() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::cmd_ingest(&cfg).unwrap();
    pipeline::train_run(&cfg, &mut NoopObserver).unwrap();
    let res = Resources::load(&cfg).unwrap();
    let ckpt = checkpoint::load(cfg.outputs().best_checkpoint(), Some(&res.vocab.hash())).unwrap();
    let dialogues = cfg.artifacts().load_split("train").unwrap();
    let examples = res.builder(&cfg).build(&dialogues, true).unwrap();
    let whole = validation_ppl(&ckpt.model, &examples).unwrap();

    let mut reversed = examples.clone();
    reversed.reverse();
    assert!((validation_ppl(&ckpt.model, &reversed).unwrap() - whole).abs() <= 1e-9 * whole);

    let (a, b) = examples.split_at(examples.len() / 3);
    let (na, ta) = nll_totals(&ckpt.model, a).unwrap();
    let (nb, tb) = nll_totals(&ckpt.model, b).unwrap();
    let merged = ((na + nb) / (ta + tb) as f64).exp();
    assert!((merged - whole).abs() <= 1e-9 * whole);
}

#[test]
fn evaluation_is_deterministic_for_fixed_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::cmd_ingest(&cfg).unwrap();
    pipeline::cmd_train(&cfg).unwrap();
    let ckpt = cfg.outputs().best_checkpoint();
    let (r1, s1) = pipeline::evaluate_run(&cfg, &ckpt, "test").unwrap();
    let (r2, s2) = pipeline::evaluate_run(&cfg, &ckpt, "test").unwrap();
    assert_eq!(r1, r2);
    assert_eq!(s1, s2);
    assert!(r1.ppl.is_finite() && r1.ppl >= 1.0);
    let written: serde_json::Value = serde_json::from_str(&fs::read_to_string(cfg.outputs().eval_report("test")).unwrap()).unwrap();
    assert!(written.get("report").or(written.get("ppl")).is_some());
}

#[test]
fn checkpoint_rejects_foreign_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    pipeline::cmd_ingest(&cfg).unwrap();
    pipeline::cmd_train(&cfg).unwrap();
    let err = checkpoint::load(cfg.outputs().best_checkpoint(), Some("0000")).unwrap_err();
    assert!(matches!(err, Error::VocabMismatch { .. }), "{err}");
}

#[test]
fn config_file_inputs_resolve_against_its_directory() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("conf");
    fs::create_dir_all(&sub).unwrap();
    let path = sub.join("run.json");
    fs::write(&path, r#"{"corpus": "data/c.json", "out_dir": "out", "train": {"max_epochs": 7}}"#).unwrap();
    let cfg = RunConfig::resolve(Some(&path), &["train.lr=0.01".to_string()], Some(9), None).unwrap();
    assert_eq!(cfg.corpus.as_deref(), Some(sub.join("data/c.json").as_path()));
    assert_eq!(cfg.out_dir, Path::new("out"));
    assert_eq!(cfg.train.max_epochs, 7);
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.seed, 9);
    assert_eq!(cfg.train.seed, 9);
}
