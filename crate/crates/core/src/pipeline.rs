//! Artifact-producing commands: ingest, index building, training,
//! evaluation, retrieval, the top-s sweep, normalized scoring and the chat
//! REPL. Each command reads a [`RunConfig`] and writes only inside its
//! output directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{self, epoch_checkpoint_name, write_atomic, BEST_CHECKPOINT};
use crate::cognition::{generate_states, CognitiveRelation, CognitiveStateProvider, FileProvider, TemplateProvider};
use crate::corpus::{
    build_retrieval_base, load_corpus, load_retrieval_base, split_corpus, Dialogue, RetrievalBase,
    SplitSpec, Splits, Turn,
};
use crate::error::{Error, Result};
use crate::metrics::{
    corpus_bleu, default_direction, distinct_n, format_table, mean_rouge_l, s_norm, strategy_acc,
    MetricReport, MetricTable,
};
use crate::model::{Model, ModelConfig};
use crate::retrieval::{compose_query, Demonstration, EmbeddingProvider, HashingEmbedder, RetrievalIndex};
use crate::sampling::{Sampler, SamplerConfig};
use crate::text::{decode_ids, token_strategy, TokenSeq, VocabBuilder, Vocabulary, EOS};
use crate::training::{
    train, validation_ppl, EpochRecord, ExampleBuilder, StepRecord, TrainConfig, TrainObserver,
    TrainOutcome, TrainingExample,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub dim: usize,
    pub top_s: usize,
    pub provider: String,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig {
            dim: crate::retrieval::DEFAULT_EMBED_DIM,
            top_s: crate::retrieval::DEFAULT_TOP_S,
            provider: "hashing".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CognitionSource {
    #[default]
    Template,
    /// Precomputed states keyed by post hash.
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CognitionConfig {
    pub provider: CognitionSource,
    pub path: Option<PathBuf>,
}

/// Explicit split files, used instead of splitting `corpus`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PresplitPaths {
    pub train: PathBuf,
    pub valid: PathBuf,
    #[serde(default)]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Greedy decoding instead of the configured sampler.
    pub greedy: bool,
    pub acc_top_n: Vec<usize>,
    pub max_examples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            greedy: false,
            acc_top_n: vec![1, 2, 3, 5],
            max_examples: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub presplit: Option<PresplitPaths>,
    /// Where ingest artifacts are read from; defaults to `out_dir`.
    pub artifacts_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub split: SplitSpec,
    pub vocab_min_count: usize,
    pub retrieval: RetrievalConfig,
    pub cognition: CognitionConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            corpus: None,
            presplit: None,
            artifacts_dir: None,
            out_dir: PathBuf::from("runs/default"),
            seed: 0,
            split: SplitSpec::default(),
            vocab_min_count: 1,
            retrieval: RetrievalConfig::default(),
            cognition: CognitionConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// Sets a dotted key in a JSON tree. The value is parsed as JSON when it
/// parses, otherwise taken as a string. Unknown keys are rejected when the
/// tree is deserialized.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override {assignment:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let obj = node
            .as_object_mut()
            .ok_or_else(|| config_err(format!("{key}: {part} is not inside an object")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            context: "run config".into(),
            message: e.to_string(),
        })
    }

    /// File (or defaults), then `--set` overrides, then `--seed` and `--out`.
    pub fn resolve(
        path: Option<&Path>,
        overrides: &[String],
        seed: Option<u64>,
        out: Option<PathBuf>,
    ) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                let mut cfg = RunConfig::from_json(&text)?;
                let base = p.parent().unwrap_or(Path::new(""));
                cfg.rebase_paths(base);
                cfg
            }
            None => RunConfig::default(),
        };
        if !overrides.is_empty() {
            let mut tree = serde_json::to_value(&cfg).expect("config serializes");
            for o in overrides {
                apply_override(&mut tree, o)?;
            }
            cfg = serde_json::from_value(tree).map_err(|e| Error::Parse {
                context: "config overrides".into(),
                message: e.to_string(),
            })?;
        }
        if let Some(seed) = seed {
            cfg.set_seed(seed);
        }
        if let Some(out) = out {
            cfg.out_dir = out;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative input paths in a config file are resolved against its
    /// directory; `out_dir` and `artifacts_dir` stay relative to the cwd.
    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(p) = self.corpus.as_mut() {
            fix(p);
        }
        if let Some(ps) = self.presplit.as_mut() {
            fix(&mut ps.train);
            fix(&mut ps.valid);
            if let Some(t) = ps.test.as_mut() {
                fix(t);
            }
        }
        if let Some(p) = self.cognition.path.as_mut() {
            fix(p);
        }
    }

    /// Propagates one seed to splitting, initialization, shuffling and
    /// sampling.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.split.seed = seed;
        self.model.seed = seed;
        self.train.seed = seed;
        self.sampler.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.top_s == 0 {
            return Err(config_err("retrieval.top_s must be at least 1"));
        }
        if self.retrieval.dim == 0 {
            return Err(config_err("retrieval.dim must be positive"));
        }
        if self.retrieval.provider != "hashing" {
            return Err(config_err(format!(
                "unknown embedding provider {:?}",
                self.retrieval.provider
            )));
        }
        if self.cognition.provider == CognitionSource::File && self.cognition.path.is_none() {
            return Err(config_err("cognition.provider = file needs cognition.path"));
        }
        self.train.validate()?;
        self.sampler.validate()
    }

    pub fn artifacts(&self) -> Artifacts {
        Artifacts {
            root: self.artifacts_dir.clone().unwrap_or_else(|| self.out_dir.clone()),
        }
    }

    pub fn outputs(&self) -> Artifacts {
        Artifacts {
            root: self.out_dir.clone(),
        }
    }

    pub fn embedder(&self) -> HashingEmbedder {
        HashingEmbedder::new(self.retrieval.dim)
    }

    pub fn cognition_provider(&self) -> Result<Box<dyn CognitiveStateProvider>> {
        Ok(match self.cognition.provider {
            CognitionSource::Template => Box::new(TemplateProvider),
            CognitionSource::File => {
                let path = self.cognition.path.as_ref().expect("validated");
                Box::new(FileProvider::load(path)?)
            }
        })
    }
}

/// File layout of one run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifacts {
    pub root: PathBuf,
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "valid", "test"];

impl Artifacts {
    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join("splits").join(format!("{name}.json"))
    }
    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }
    pub fn retrieval_base(&self) -> PathBuf {
        self.root.join("retrieval_base.json")
    }
    pub fn index(&self) -> PathBuf {
        self.root.join("index.bin")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.checkpoints().join(BEST_CHECKPOINT)
    }
    pub fn train_log(&self) -> PathBuf {
        self.root.join("train_log.jsonl")
    }
    pub fn train_summary(&self) -> PathBuf {
        self.root.join("train_summary.json")
    }
    pub fn eval_report(&self, split: &str) -> PathBuf {
        self.root.join(format!("eval-{split}.json"))
    }

    fn require(path: PathBuf) -> Result<PathBuf> {
        if path.exists() {
            Ok(path)
        } else {
            Err(Error::MissingArtifact(path))
        }
    }

    pub fn load_split(&self, name: &str) -> Result<Vec<Dialogue>> {
        load_corpus(Self::require(self.split(name))?)
    }
    pub fn load_vocab(&self) -> Result<Vocabulary> {
        Vocabulary::load(Self::require(self.vocab())?)
    }
    pub fn load_index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::load(Self::require(self.index())?)
    }
    pub fn load_base(&self) -> Result<RetrievalBase> {
        load_retrieval_base(Self::require(self.retrieval_base())?)
    }
}

fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub train_dialogues: usize,
    pub valid_dialogues: usize,
    pub test_dialogues: usize,
    pub vocab_size: usize,
    pub passages: usize,
    pub skipped_turns: usize,
}

/// Vocabulary over training dialogues plus the cognitive states of every
/// training post.
pub fn build_training_vocab(
    train: &[Dialogue],
    provider: &dyn CognitiveStateProvider,
    min_count: usize,
) -> Result<Vocabulary> {
    let mut builder = VocabBuilder::default();
    builder.add_dialogues(train);
    for d in train {
        for ex in d.exchanges() {
            let bundle = generate_states(provider, ex.post())?;
            for r in CognitiveRelation::ALL {
                builder.add_text(&bundle.sequence(r));
            }
        }
    }
    builder.build(min_count)
}

fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match (&cfg.presplit, &cfg.corpus) {
        (Some(p), _) => {
            let valid = load_corpus(&p.valid)?;
            let test = match &p.test {
                Some(t) => load_corpus(t)?,
                None => valid.clone(),
            };
            Ok(Splits {
                train: load_corpus(&p.train)?,
                valid,
                test,
            })
        }
        (None, Some(corpus)) => split_corpus(&load_corpus(corpus)?, &cfg.split),
        (None, None) => Err(config_err("ingest needs `corpus` or `presplit`")),
    }
}

/// Splits, vocabulary, retrieval base and index. Everything is computed
/// before the first file is written, and each file is replaced atomically.
pub fn cmd_ingest(cfg: &RunConfig) -> Result<IngestSummary> {
    let splits = load_splits(cfg)?;
    let provider = cfg.cognition_provider()?;
    let vocab = build_training_vocab(&splits.train, provider.as_ref(), cfg.vocab_min_count)?;
    let base = build_retrieval_base(&splits.train);
    let index = RetrievalIndex::build(&base, &cfg.embedder());
    let mut index_bytes = Vec::new();
    index
        .write_to(&mut index_bytes)
        .map_err(|e| Error::io(cfg.out_dir.join("index.bin"), e))?;

    let out = cfg.outputs();
    let files: Vec<(PathBuf, Vec<u8>)> = vec![
        (out.split("train"), to_json_bytes(&splits.train)),
        (out.split("valid"), to_json_bytes(&splits.valid)),
        (out.split("test"), to_json_bytes(&splits.test)),
        (out.vocab(), to_json_bytes(&serde_json::json!({ "tokens": vocab.tokens() }))),
        (out.retrieval_base(), to_json_bytes(&base.passages)),
        (out.index(), index_bytes),
    ];
    for (path, bytes) in &files {
        write_atomic(path, bytes)?;
    }
    let summary = IngestSummary {
        train_dialogues: splits.train.len(),
        valid_dialogues: splits.valid.len(),
        test_dialogues: splits.test.len(),
        vocab_size: vocab.len(),
        passages: base.passages.len(),
        skipped_turns: base.skipped,
    };
    log::info!("ingested {summary:?}");
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexSummary {
    pub passages: usize,
    pub dim: usize,
    pub provider: String,
}

/// Re-embeds the retrieval base with the configured provider.
pub fn cmd_build_index(cfg: &RunConfig) -> Result<IndexSummary> {
    let base = cfg.artifacts().load_base()?;
    let embedder = cfg.embedder();
    let index = RetrievalIndex::build(&base, &embedder);
    index.save(cfg.outputs().index())?;
    Ok(IndexSummary {
        passages: index.len(),
        dim: index.dim(),
        provider: embedder.name().to_string(),
    })
}

/// Loaded vocabulary, index and providers: everything needed to build
/// model inputs.
pub struct Resources {
    pub vocab: Vocabulary,
    pub index: RetrievalIndex,
    pub embedder: HashingEmbedder,
    pub cognition: Box<dyn CognitiveStateProvider>,
}

impl Resources {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let artifacts = cfg.artifacts();
        let vocab = artifacts.load_vocab()?;
        let index = artifacts.load_index()?;
        if index.dim() != cfg.retrieval.dim {
            return Err(Error::DimensionMismatch(format!(
                "index has dimension {}, config expects {}",
                index.dim(),
                cfg.retrieval.dim
            )));
        }
        Ok(Resources {
            vocab,
            index,
            embedder: cfg.embedder(),
            cognition: cfg.cognition_provider()?,
        })
    }

    pub fn builder<'a>(&'a self, cfg: &RunConfig) -> ExampleBuilder<'a> {
        ExampleBuilder {
            vocab: &self.vocab,
            index: &self.index,
            embedder: &self.embedder,
            cognition: self.cognition.as_ref(),
            top_s: cfg.retrieval.top_s,
            max_enc_len: cfg.model.max_enc_len,
            max_dec_len: cfg.model.max_dec_len,
            cog_len: cfg.model.cog_len,
        }
    }

    pub fn model_config(&self, cfg: &RunConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            ..cfg.model.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub best_epoch: usize,
    pub best_valid_ppl: f64,
    pub train_ppl: f64,
    pub steps: usize,
    pub parameters: usize,
    pub lambda: [f64; crate::model::FUSION_TERMS],
}

/// Streams step records as JSON lines and writes per-epoch checkpoints.
struct RunObserver<'a> {
    log: Vec<u8>,
    checkpoints: Option<(PathBuf, &'a str)>,
    inner: &'a mut dyn TrainObserver,
}

impl TrainObserver for RunObserver<'_> {
    fn on_stage(&mut self, stage: crate::model::Stage) {
        self.inner.on_stage(stage);
    }

    fn on_step(&mut self, record: &StepRecord) {
        serde_json::to_writer(&mut self.log, record).expect("record serializes");
        self.log.push(b'\n');
        self.inner.on_step(record);
    }

    fn on_epoch(&mut self, record: &EpochRecord, model: &Model) -> Result<()> {
        log::info!("epoch {} mean loss {:.4} valid ppl {:?}", record.epoch, record.mean_loss, record.valid_ppl);
        if let Some((dir, hash)) = &self.checkpoints {
            checkpoint::save(dir.join(epoch_checkpoint_name(record.epoch)), model, hash, Some(record.epoch))?;
        }
        self.inner.on_epoch(record, model)
    }
}

/// Trains from ingest artifacts and writes the best checkpoint, the step
/// log and a summary.
pub fn train_run(cfg: &RunConfig, observer: &mut dyn TrainObserver) -> Result<(TrainOutcome, TrainSummary)> {
    let artifacts = cfg.artifacts();
    let train_dialogues = artifacts.load_split("train")?;
    let valid_dialogues = artifacts.load_split("valid")?;
    let res = Resources::load(cfg)?;
    let builder = res.builder(cfg);
    let train_set = builder.build(&train_dialogues, true)?;
    let valid_set = builder.build(&valid_dialogues, true)?;
    let model = Model::new(res.model_config(cfg))?;
    let out = cfg.outputs();
    let hash = res.vocab.hash();
    let mut run_observer = RunObserver {
        log: Vec::new(),
        checkpoints: cfg.train.checkpoint_every_epoch.then(|| (out.checkpoints(), hash.as_str())),
        inner: observer,
    };
    let result = train(model, &train_set, &valid_set, &cfg.train, &mut run_observer);
    write_atomic(&out.train_log(), &run_observer.log)?;
    let outcome = result?;
    checkpoint::save(out.best_checkpoint(), &outcome.best, &hash, Some(outcome.best_epoch))?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        best_valid_ppl: outcome.best_valid_ppl,
        train_ppl: validation_ppl(&outcome.best, &train_set)?,
        steps: outcome.steps.len(),
        parameters: outcome.best.parameter_count(),
        lambda: outcome.best.lambda(),
    };
    write_atomic(&out.train_summary(), &to_json_bytes(&summary))?;
    Ok((outcome, summary))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    Ok(train_run(cfg, &mut crate::training::NoopObserver)?.1)
}

/// One generated response next to its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub dialogue_id: String,
    pub turn_index: usize,
    pub gold_strategy: String,
    pub predicted_strategies: Vec<String>,
    pub response: String,
    pub reference: String,
}

fn token_strings(ids: &[u32], vocab: &Vocabulary) -> Result<Vec<String>> {
    ids.iter()
        .map(|&id| vocab.token(id).map(str::to_string).ok_or(Error::InvalidTokenId(id)))
        .collect()
}

/// Response body of a sampled sequence: after the strategy token, before EOS.
pub fn response_body(tokens: &[u32]) -> &[u32] {
    let start = usize::from(tokens.first().is_some_and(|&t| token_strategy(t).is_some()));
    let end = tokens.iter().position(|&t| t == EOS).unwrap_or(tokens.len());
    &tokens[start.min(end)..end]
}

/// Teacher-forced PPL, top-n strategy accuracy and generation metrics.
pub fn evaluate_examples(
    model: &Model,
    vocab: &Vocabulary,
    examples: &[TrainingExample],
    sampler: SamplerConfig,
    acc_top_n: &[usize],
) -> Result<(MetricReport, Vec<GeneratedSample>)> {
    if examples.is_empty() {
        return Err(Error::EmptySplit("evaluation split has no examples".into()));
    }
    let ppl = validation_ppl(model, examples)?;
    let mut sampler = Sampler::new(sampler)?;
    let max_n = acc_top_n.iter().copied().max().unwrap_or(1).max(1);
    let mut predictions = Vec::with_capacity(examples.len());
    let mut gold = Vec::with_capacity(examples.len());
    let mut bleu_pairs = Vec::with_capacity(examples.len());
    let mut rouge_pairs = Vec::with_capacity(examples.len());
    let mut hyps = Vec::with_capacity(examples.len());
    let mut samples = Vec::with_capacity(examples.len());
    for ex in examples {
        let fused = model.fuse_knowledge(&ex.input)?;
        let ranked = model.predict_strategy(&fused, max_n)?;
        let sampled = sampler.sample_response(model, &fused)?;
        let hyp = token_strings(response_body(&sampled.tokens.ids), vocab)?;
        let reference = token_strings(ex.response_ids(), vocab)?;
        samples.push(GeneratedSample {
            dialogue_id: ex.dialogue_id.clone(),
            turn_index: ex.turn_index,
            gold_strategy: ex.strategy.name().to_string(),
            predicted_strategies: ranked.iter().map(|s| s.name().to_string()).collect(),
            response: decode_ids(&sampled.tokens.ids, vocab)?,
            reference: reference.join(" "),
        });
        bleu_pairs.push((hyp.clone(), vec![reference.clone()]));
        rouge_pairs.push((hyp.clone(), reference));
        hyps.push(hyp);
        predictions.push(ranked);
        gold.push(ex.strategy);
    }
    let mut acc_map = BTreeMap::new();
    for &n in acc_top_n.iter().chain([1].iter()) {
        acc_map.insert(n, strategy_acc(&predictions, &gold, n)?);
    }
    let report = MetricReport {
        acc: acc_map[&1],
        acc_top_n: acc_map,
        ppl,
        bleu: (1..=4).map(|n| (n, corpus_bleu(&bleu_pairs, n))).collect(),
        distinct: (1..=2).map(|n| (n, distinct_n(&hyps, n))).collect(),
        rouge_l: mean_rouge_l(&rouge_pairs),
        s_norm: None,
    };
    Ok((report, samples))
}

/// Loads a checkpoint against the run's vocabulary and scores one split.
pub fn evaluate_run(cfg: &RunConfig, checkpoint_path: &Path, split: &str) -> Result<(MetricReport, Vec<GeneratedSample>)> {
    if !SPLIT_NAMES.contains(&split) {
        return Err(config_err(format!("unknown split {split:?}")));
    }
    let res = Resources::load(cfg)?;
    let ckpt = checkpoint::load(checkpoint_path, Some(&res.vocab.hash()))?;
    let mut dialogues = cfg.artifacts().load_split(split)?;
    let mut examples = res.builder(cfg).build(&dialogues, true)?;
    if let Some(max) = cfg.eval.max_examples {
        examples.truncate(max);
    }
    dialogues.clear();
    let sampler = if cfg.eval.greedy {
        SamplerConfig {
            seed: cfg.sampler.seed,
            ..SamplerConfig::greedy()
        }
    } else {
        cfg.sampler
    };
    let (report, samples) = evaluate_examples(&ckpt.model, &res.vocab, &examples, sampler, &cfg.eval.acc_top_n)?;
    write_atomic(&cfg.outputs().eval_report(split), &to_json_bytes(&serde_json::json!({
        "split": split,
        "report": report,
        "samples": samples,
    })))?;
    Ok((report, samples))
}

pub fn cmd_evaluate(cfg: &RunConfig, checkpoint_path: &Path, split: &str) -> Result<MetricReport> {
    Ok(evaluate_run(cfg, checkpoint_path, split)?.0)
}

/// Nine-column aligned table for one or more reports.
pub fn report_table(rows: &[(String, Option<&MetricReport>)]) -> String {
    let metrics: Vec<String> = ["ACC", "PPL", "B-1", "B-2", "B-3", "B-4", "D-1", "D-2", "R-L"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows: Vec<(String, Vec<Option<f64>>)> = rows
        .iter()
        .map(|(name, r)| {
            let values = match r {
                Some(r) => r.columns().iter().map(|c| Some(c.1)).collect(),
                None => vec![None; metrics.len()],
            };
            (name.clone(), values)
        })
        .collect();
    format_table(&metrics, &rows)
}

pub fn cmd_retrieve(cfg: &RunConfig, index_path: &Path, query: &str, top_s: usize) -> Result<Vec<Demonstration>> {
    if !index_path.exists() {
        return Err(Error::MissingArtifact(index_path.to_path_buf()));
    }
    let index = RetrievalIndex::load(index_path)?;
    let query = compose_query(query, "")?;
    let embedder = HashingEmbedder::new(index.dim());
    if embedder.name() != index.provider() {
        return Err(config_err(format!(
            "index built with {}, only {} is available",
            index.provider(),
            embedder.name()
        )));
    }
    let _ = cfg;
    index.retrieve_top_s(&embedder, &query, top_s, &BTreeSet::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub top_s: usize,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// Trains and evaluates one run per `s`, in the given order, each under
/// `out_dir/sweep/s<k>`. A failing run is recorded and the sweep continues.
pub fn cmd_sweep_top_s(cfg: &RunConfig, values: &[usize]) -> Vec<SweepRow> {
    values
        .iter()
        .map(|&s| {
            let mut sub = cfg.clone();
            sub.retrieval.top_s = s;
            sub.artifacts_dir = Some(cfg.artifacts().root);
            sub.out_dir = cfg.out_dir.join("sweep").join(format!("s{s}"));
            let result = sub.validate().and_then(|_| {
                train_run(&sub, &mut crate::training::NoopObserver)?;
                cmd_evaluate(&sub, &sub.outputs().best_checkpoint(), "test")
            });
            match result {
                Ok(report) => SweepRow {
                    top_s: s,
                    report: Some(report),
                    error: None,
                },
                Err(e) => {
                    log::error!("sweep run s={s} failed: {e}");
                    SweepRow {
                        top_s: s,
                        report: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let named: Vec<(String, Option<&MetricReport>)> = rows
        .iter()
        .map(|r| (format!("s = {}", r.top_s), r.report.as_ref()))
        .collect();
    report_table(&named)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SNormRow {
    pub method: String,
    pub s_norm: f64,
}

/// Normalized mean score per method, with `PPL` lower-is-better and every
/// other column higher-is-better.
pub fn cmd_s_norm(table: &MetricTable) -> Result<Vec<SNormRow>> {
    let directions = table
        .metrics
        .iter()
        .map(|m| (m.clone(), default_direction(m)))
        .collect();
    Ok(s_norm(table, &directions)?
        .into_iter()
        .map(|(method, s_norm)| SNormRow { method, s_norm })
        .collect())
}

/// The input table with an appended normalized-score column.
pub fn s_norm_table(table: &MetricTable, scores: &[SNormRow]) -> String {
    let mut metrics = table.metrics.clone();
    metrics.push("s_norm".into());
    let rows: Vec<(String, Vec<Option<f64>>)> = table
        .rows
        .iter()
        .zip(scores)
        .map(|((name, values), s)| {
            let mut v = values.clone();
            v.push(Some(s.s_norm));
            (name.clone(), v)
        })
        .collect();
    format_table(&metrics, &rows)
}

/// Interactive session state.
pub struct ChatSession<'a> {
    pub model: &'a Model,
    pub resources: &'a Resources,
    pub cfg: &'a RunConfig,
    pub history: Vec<Turn>,
    sampler: Sampler,
}

/// What the model did with one seeker utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct ChatReply {
    pub demonstrations: Vec<Demonstration>,
    pub predicted: crate::corpus::Strategy,
    pub tokens: TokenSeq,
    pub text: String,
    pub lambda: [f64; crate::model::FUSION_TERMS],
}

impl<'a> ChatSession<'a> {
    pub fn new(model: &'a Model, resources: &'a Resources, cfg: &'a RunConfig) -> Result<Self> {
        Ok(ChatSession {
            model,
            resources,
            cfg,
            history: Vec::new(),
            sampler: Sampler::new(cfg.sampler)?,
        })
    }

    pub fn respond(&mut self, post: &str) -> Result<ChatReply> {
        let builder = self.resources.builder(self.cfg);
        let (input, demonstrations) = builder.build_input(&self.history, post, "", &BTreeSet::new())?;
        let fused = self.model.fuse_knowledge(&input)?;
        let predicted = self.model.predict_strategy(&fused, 1)?[0];
        let sampled = self.sampler.sample_response(self.model, &fused)?;
        let strategy = sampled.strategy.unwrap_or(predicted);
        let body = decode_ids(response_body(&sampled.tokens.ids), &self.resources.vocab)?;
        let text = format!("{} {body}", strategy.bracketed()).trim_end().to_string();
        self.history.push(Turn::seeker(post));
        self.history.push(Turn::supporter(strategy, body));
        Ok(ChatReply {
            demonstrations,
            predicted,
            tokens: sampled.tokens,
            text,
            lambda: fused.lambda,
        })
    }
}

/// Line-oriented REPL. `/reset` clears the context, `/show-lambda` prints
/// the fusion weights, `/quit` or end of input ends the session.
pub fn run_chat(
    model: &Model,
    resources: &Resources,
    cfg: &RunConfig,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<()> {
    let io_err = |e| Error::io("<stdout>", e);
    let mut session = ChatSession::new(model, resources, cfg)?;
    writeln!(output, "type a message; /reset, /show-lambda, /quit").map_err(io_err)?;
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        let line = line.trim();
        match line {
            "" => continue,
            "/quit" => break,
            "/reset" => {
                session.history.clear();
                writeln!(output, "context cleared").map_err(io_err)?;
            }
            "/show-lambda" => {
                let lambda = model.lambda();
                let sum: f64 = lambda.iter().sum();
                let shown: Vec<String> = lambda.iter().map(|l| format!("{l:.6}")).collect();
                writeln!(output, "lambda = [{}] sum = {sum:.6}", shown.join(", ")).map_err(io_err)?;
            }
            post => match session.respond(post) {
                Ok(reply) => {
                    for (i, d) in reply.demonstrations.iter().enumerate() {
                        writeln!(output, "demo {} (passage {}, score {:.3}): {}", i + 1, d.passage_id, d.score, d.text)
                            .map_err(io_err)?;
                    }
                    writeln!(output, "top strategy: {}", reply.predicted.name()).map_err(io_err)?;
                    writeln!(output, "System: {}", reply.text).map_err(io_err)?;
                }
                Err(e) => writeln!(output, "error: {e}").map_err(io_err)?,
            },
        }
        output.flush().map_err(io_err)?;
    }
    Ok(())
}

/// Writes the eight-dialogue memorization fixture under `dir` and returns
/// a config that trains a d=64 model on it for 300 steps.
pub fn overfit_setup(dir: &Path) -> Result<RunConfig> {
    let data = dir.join("data");
    crate::corpus::save_corpus(data.join("train.json"), &crate::synthetic::overfit_corpus())?;
    crate::corpus::save_corpus(data.join("valid.json"), &crate::synthetic::overfit_validation())?;
    let mut cfg = RunConfig {
        presplit: Some(PresplitPaths {
            train: data.join("train.json"),
            valid: data.join("valid.json"),
            test: None,
        }),
        out_dir: dir.join("run"),
        ..RunConfig::default()
    };
    cfg.model.d = 64;
    cfg.model.heads = 4;
    cfg.model.enc_layers = 1;
    cfg.model.dec_layers = 1;
    cfg.train.max_epochs = 150;
    cfg.train.checkpoint_every_epoch = false;
    cfg.eval.greedy = true;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_walk_dotted_keys() {
        let mut tree = serde_json::to_value(RunConfig::default()).unwrap();
        apply_override(&mut tree, "train.lr=0.5").unwrap();
        apply_override(&mut tree, "retrieval.top_s=5").unwrap();
        apply_override(&mut tree, "out_dir=/tmp/x").unwrap();
        apply_override(&mut tree, "model.variant=with_norm").unwrap();
        let cfg: RunConfig = serde_json::from_value(tree.clone()).unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.retrieval.top_s, 5);
        assert_eq!(cfg.out_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.model.variant, crate::model::FusionVariant::WithNorm);
        assert!(apply_override(&mut tree, "novalue").is_err());
        apply_override(&mut tree, "presplit.train=a.json").unwrap();
        apply_override(&mut tree, "presplit.valid=b.json").unwrap();
        let cfg: RunConfig = serde_json::from_value(tree).unwrap();
        assert_eq!(cfg.presplit.unwrap().train, PathBuf::from("a.json"));
    }

    #[test]
    fn resolve_applies_seed_and_validates() {
        let cfg = RunConfig::resolve(None, &["retrieval.top_s=2".into()], Some(9), Some("o".into())).unwrap();
        assert_eq!((cfg.split.seed, cfg.model.seed, cfg.sampler.seed), (9, 9, 9));
        assert_eq!(cfg.out_dir, PathBuf::from("o"));
        assert!(RunConfig::resolve(None, &["retrieval.top_s=0".into()], None, None).is_err());
        assert!(RunConfig::resolve(None, &["train.nope=1".into()], None, None).is_err());
    }

    #[test]
    fn response_body_strips_strategy_and_eos() {
        let s = crate::text::STRATEGY_BASE;
        assert_eq!(response_body(&[s, 20, 21, EOS, 22]), &[20, 21]);
        assert_eq!(response_body(&[20, 21]), &[20, 21]);
        assert_eq!(response_body(&[s]), &[] as &[u32]);
    }
}
