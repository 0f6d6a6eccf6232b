//! End-to-end orchestration: annotate → build-graphs → pretrain → finetune
//! → train-generator → generate → evaluate, inside one run directory.
//!
//! Every stage has a configuration hash chained from its upstream stages.
//! A finished stage leaves `stamps/<stage>.json`; checkpoints carry the same
//! hash in their manifest. A stage whose stamp matches is skipped, a stamp
//! with a different hash is a hard error.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::coherence::{self, CoherenceConfig, FusionMode};
use crate::corpus::{annotate_all, annotator_from_env, fixture_corpus, load_corpus, save_corpus, Dialogue};
use crate::generator::{
    self, generate_batch, load_generator, read_generations, write_generations, Conditioner,
    GenerationRequest, GeneratorConfig,
};
use crate::graphbuild::{
    build_pair, load_graphs, prune_for_balance, save_graphs, EmbeddingProvider, GraphPair, HashingEmbedder, HttpEmbedder, EMBED_ENDPOINT_ENV,
};
use crate::metrics::{evaluate, EvalInput, EvalReport, HttpNli, Metric, NliAdapter};
use crate::nn::checkpoint;
use crate::pretrain::{self, PretrainConfig};

type BoxError = Box<dyn std::error::Error + Send + Sync>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid run configuration: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: BoxError,
    },
    #[error("stage {stage} has not been run: {path} is missing")]
    Missing { stage: Stage, path: PathBuf },
    #[error("stage {stage} was produced with config hash {found}, current config gives {expected}")]
    HashMismatch { stage: Stage, expected: String, found: String },
    #[error("run directory {0} is locked by another process (remove run.lock if stale)")]
    Locked(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Annotate,
    BuildGraphs,
    Pretrain,
    Finetune,
    TrainGenerator,
    Generate,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Annotate,
        Stage::BuildGraphs,
        Stage::Pretrain,
        Stage::Finetune,
        Stage::TrainGenerator,
        Stage::Generate,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Annotate => "annotate",
            Stage::BuildGraphs => "build-graphs",
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
            Stage::TrainGenerator => "train-generator",
            Stage::Generate => "generate",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown stage {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// JSONL corpus; the bundled fixture when absent.
    pub path: Option<PathBuf>,
    pub limit: Option<usize>,
}


/// Source of utterance embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbedProvider {
    /// Seeded hashing embedder, no network.
    #[default]
    Fallback,
    /// HTTP sentence encoder at `MUDI_EMBED_ENDPOINT`.
    Adapter,
}

impl FromStr for EmbedProvider {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fallback" => Ok(EmbedProvider::Fallback),
            "adapter" => Ok(EmbedProvider::Adapter),
            _ => Err(PipelineError::Config(format!("unknown embedding provider {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphsSection {
    pub provider: EmbedProvider,
    pub embed_dim: usize,
    pub embed_seed: u64,
    /// Order window: order edges join utterances less than `d` apart.
    pub d: usize,
    pub prune: bool,
    pub keep_prob: f64,
    pub high_freq_quantile: f64,
    pub prune_seed: u64,
}

impl Default for GraphsSection {
    fn default() -> Self {
        Self {
            provider: EmbedProvider::Fallback,
            embed_dim: 64,
            embed_seed: 42,
            d: 3,
            prune: true,
            keep_prob: 0.3,
            high_freq_quantile: 0.75,
            prune_seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub fusion_mode: FusionMode,
    /// Seed of the `random` fusion mode.
    pub seed: u64,
}

impl Default for MemorySection {
    fn default() -> Self {
        Self {
            fusion_mode: FusionMode::Attention,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub metrics: Vec<Metric>,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self {
            metrics: Metric::DEFAULT.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub modes: Vec<FusionMode>,
    /// Generator epochs per mode; the generator setting when absent.
    pub epochs: Option<usize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            modes: FusionMode::ALL.to_vec(),
            epochs: None,
        }
    }
}

/// Every stage parameter of a run. Loaded from TOML; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Overrides the seed of every stage when set.
    pub seed: Option<u64>,
    pub run_dir: PathBuf,
    pub corpus: CorpusSection,
    pub graphs: GraphsSection,
    pub pretrain: PretrainConfig,
    pub coherence: CoherenceConfig,
    pub generator: GeneratorConfig,
    pub memory: MemorySection,
    pub evaluate: EvaluateSection,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            graphs: GraphsSection::default(),
            pretrain: PretrainConfig::default(),
            coherence: CoherenceConfig::default(),
            generator: GeneratorConfig::default(),
            memory: MemorySection::default(),
            evaluate: EvaluateSection::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    /// Copies the global seed, when set, into every stage.
    pub fn resolved(mut self) -> Self {
        if let Some(s) = self.seed {
            self.graphs.embed_seed = s;
            self.graphs.prune_seed = s;
            self.pretrain.seed = s;
            self.coherence.seed = s;
            self.generator.seed = s;
            self.memory.seed = s;
        }
        self
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let cfg = |e: &dyn fmt::Display| PipelineError::Config(e.to_string());
        self.pretrain.validate().map_err(|e| cfg(&e))?;
        self.coherence.validate().map_err(|e| cfg(&e))?;
        self.generator.validate().map_err(|e| cfg(&e))?;
        let g = &self.graphs;
        if g.embed_dim == 0 || g.d == 0 {
            return Err(cfg(&"graphs.embed_dim and graphs.d must be positive"));
        }
        if !(0.0..=1.0).contains(&g.keep_prob) || !(g.high_freq_quantile > 0.0 && g.high_freq_quantile < 1.0) {
            return Err(cfg(&"graphs.keep_prob must lie in [0, 1] and high_freq_quantile in (0, 1)"));
        }
        if self.coherence.context_gat.in_dim != g.embed_dim || self.coherence.persona_gat.in_dim != g.embed_dim {
            return Err(cfg(&"coherence encoders must take graphs.embed_dim inputs"));
        }
        if g.provider == EmbedProvider::Adapter {
            self.embedder()?;
        }
        if self.evaluate.metrics.is_empty() {
            return Err(cfg(&"evaluate.metrics is empty"));
        }
        if self.ablation.epochs == Some(0) {
            return Err(cfg(&"ablation.epochs must be positive"));
        }
        Ok(())
    }

    /// Encoder configuration used during pre-training: the context encoder
    /// without relation embeddings, which pre-training has no labels for.
    pub fn pretrain_gat(&self) -> crate::dialoguegat::GatConfig {
        let mut g = self.coherence.context_gat.clone();
        g.use_relations = false;
        g
    }

    pub fn embedder(&self) -> Result<Box<dyn EmbeddingProvider + Send>, PipelineError> {
        match self.graphs.provider {
            EmbedProvider::Fallback => Ok(Box::new(HashingEmbedder::new(self.graphs.embed_dim, self.graphs.embed_seed))),
            EmbedProvider::Adapter => match HttpEmbedder::from_env(self.graphs.embed_dim) {
                Some(e) => Ok(Box::new(e)),
                None => Err(PipelineError::Config(format!("provider adapter needs {EMBED_ENDPOINT_ENV}"))),
            },
        }
    }

    /// Memory conditioner over the coherence checkpoint in `dir`.
    pub fn conditioner(&self, dir: &Path, mode: FusionMode) -> Result<Conditioner, PipelineError> {
        let (_, model, store) = coherence::load_model(dir).map_err(stage_err(Stage::Finetune))?;
        Ok(Conditioner {
            model,
            store,
            embedder: self.embedder()?,
            d: self.graphs.d,
            mode,
            seed: self.memory.seed,
        })
    }

    fn generator_training_section(&self, epochs: Option<usize>, mode: FusionMode) -> serde_json::Value {
        let mut g = self.generator.clone();
        g.decode = Default::default();
        if let Some(e) = epochs {
            g.epochs = e;
        }
        serde_json::json!({ "generator": g, "fusion_mode": mode, "memory_seed": self.memory.seed })
    }

    /// Configuration hash of every stage, each chained from the previous.
    pub fn stage_hashes(&self) -> BTreeMap<Stage, String> {
        let sections = [
            (
                Stage::Annotate,
                serde_json::json!({ "corpus": self.corpus, "annotator": annotator_from_env().provenance() }),
            ),
            (
                Stage::BuildGraphs,
                serde_json::json!({ "graphs": self.graphs }),
            ),
            (
                Stage::Pretrain,
                serde_json::json!({ "pretrain": self.pretrain, "gat": self.pretrain_gat() }),
            ),
            (Stage::Finetune, serde_json::json!({ "coherence": self.coherence })),
            (
                Stage::TrainGenerator,
                self.generator_training_section(None, self.memory.fusion_mode),
            ),
            (Stage::Generate, serde_json::json!({ "decode": self.generator.decode })),
            (Stage::Evaluate, serde_json::json!({ "metrics": self.evaluate.metrics })),
        ];
        let mut out = BTreeMap::new();
        let mut prev = String::new();
        for (stage, section) in sections {
            prev = chain_hash(&prev, stage.name(), &section);
            out.insert(stage, prev.clone());
        }
        out
    }
}

/// `sha256(upstream || stage || section)` as hex.
pub fn chain_hash(upstream: &str, stage: &str, section: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(upstream.as_bytes());
    h.update([0]);
    h.update(stage.as_bytes());
    h.update([0]);
    h.update(serde_json::to_vec(section).expect("json serializes"));
    hex::encode(h.finalize())
}

/// Exclusive ownership of a run directory for the lifetime of the guard.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(run_dir).map_err(io_err(run_dir))?;
        let path = run_dir.join("run.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                use std::io::Write;
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Locked(run_dir.to_path_buf())),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn annotated(&self) -> PathBuf {
        self.root.join("annotated.jsonl")
    }

    pub fn graphs(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("ckpt").join("pretrain")
    }

    pub fn coherence(&self) -> PathBuf {
        self.root.join("ckpt").join("coherence")
    }

    pub fn generator(&self) -> PathBuf {
        self.root.join("ckpt").join("gen")
    }

    pub fn generations(&self) -> PathBuf {
        self.root.join("generations.jsonl")
    }

    pub fn references(&self) -> PathBuf {
        self.root.join("references.jsonl")
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn ablation(&self, mode: FusionMode) -> PathBuf {
        self.root.join("ablation").join(mode.name())
    }

    fn stamp(&self, stage: Stage) -> PathBuf {
        self.root.join("stamps").join(format!("{}.json", stage.name()))
    }

    /// Primary artifact of a stage.
    pub fn artifact(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Annotate => self.annotated(),
            Stage::BuildGraphs => self.graphs(),
            Stage::Pretrain => self.pretrain(),
            Stage::Finetune => self.coherence(),
            Stage::TrainGenerator => self.generator(),
            Stage::Generate => self.generations(),
            Stage::Evaluate => self.report(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct StampFile {
    stage: Stage,
    config_hash: String,
    seconds: f64,
}

/// One gold response with the inputs that produced its hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dialogue_id: String,
    pub persona: Vec<String>,
    pub context: Vec<String>,
    pub reference: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut text = String::new();
    for it in items {
        text.push_str(&serde_json::to_string(it).map_err(|e| PipelineError::Config(e.to_string()))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| PipelineError::Config(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// The generation requests of a corpus: every bot response after an odd
/// number of utterances, in corpus order.
pub fn eval_records(dialogues: &[Dialogue]) -> Vec<EvalRecord> {
    let mut out = Vec::new();
    for d in dialogues {
        for t in (1..d.len()).step_by(2) {
            if d.utterances[t].speaker != crate::corpus::Speaker::Bot {
                continue;
            }
            out.push(EvalRecord {
                dialogue_id: d.dialogue_id.clone(),
                persona: d.persona.clone(),
                context: d.utterances[..t].iter().map(|u| u.text.clone()).collect(),
                reference: d.utterances[t].text.clone(),
            });
        }
    }
    out
}

fn stage_err<E: std::error::Error + Send + Sync + 'static>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        source: Box::new(e),
    }
}

/// Scores a generation file against aligned references.
pub fn evaluate_files(
    generations: &[generator::GenerationOutput],
    records: &[EvalRecord],
    metrics: &[Metric],
    nli: Option<&dyn NliAdapter>,
) -> Result<EvalReport, PipelineError> {
    if generations.len() != records.len() {
        return Err(PipelineError::Config(format!(
            "{} generations but {} references",
            generations.len(),
            records.len()
        )));
    }
    for (g, r) in generations.iter().zip(records) {
        if g.dialogue_id != r.dialogue_id {
            return Err(PipelineError::Config(format!(
                "generation for {} aligned with reference for {}",
                g.dialogue_id, r.dialogue_id
            )));
        }
    }
    let input = EvalInput {
        hypotheses: generations.iter().map(|g| g.response.clone()).collect(),
        references: records.iter().map(|r| r.reference.clone()).collect(),
        personas: records.iter().map(|r| r.persona.clone()).collect(),
    };
    evaluate(&input, metrics, nli).map_err(stage_err(Stage::Evaluate))
}

/// Result of [`run_pipeline`].
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub run_dir: PathBuf,
    pub report: EvalReport,
    /// Stages executed in this call (the rest were already complete).
    pub executed: Vec<Stage>,
}

/// A pipeline bound to a configuration and its run directory.
pub struct Pipeline {
    pub config: RunConfig,
    pub layout: RunLayout,
    hashes: BTreeMap<Stage, String>,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let layout = RunLayout::new(config.run_dir.clone());
        let hashes = config.stage_hashes();
        Ok(Self { config, layout, hashes })
    }

    pub fn hash(&self, stage: Stage) -> &str {
        &self.hashes[&stage]
    }

    /// Whether the stage is complete under the current configuration;
    /// errors when it was completed under a different one.
    pub fn is_complete(&self, stage: Stage) -> Result<bool, PipelineError> {
        let path = self.layout.stamp(stage);
        if !path.is_file() {
            return Ok(false);
        }
        let stamp: StampFile =
            serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?).map_err(|e| PipelineError::Config(e.to_string()))?;
        if stamp.config_hash != self.hash(stage) {
            return Err(PipelineError::HashMismatch {
                stage,
                expected: self.hash(stage).to_string(),
                found: stamp.config_hash,
            });
        }
        Ok(self.layout.artifact(stage).exists())
    }

    fn mark_complete(&self, stage: Stage, seconds: f64) -> Result<(), PipelineError> {
        let path = self.layout.stamp(stage);
        fs::create_dir_all(path.parent().expect("stamp dir")).map_err(io_err(&path))?;
        let stamp = StampFile {
            stage,
            config_hash: self.hash(stage).to_string(),
            seconds,
        };
        fs::write(&path, serde_json::to_vec_pretty(&stamp).expect("stamp serializes")).map_err(io_err(&path))
    }

    fn check_manifest(&self, stage: Stage, dir: &Path) -> Result<(), PipelineError> {
        let manifest = checkpoint::read_manifest(dir).map_err(stage_err(stage))?;
        if manifest.config_hash != self.hash(stage) {
            return Err(PipelineError::HashMismatch {
                stage,
                expected: self.hash(stage).to_string(),
                found: manifest.config_hash,
            });
        }
        Ok(())
    }

    fn require(&self, stage: Stage) -> Result<(), PipelineError> {
        if self.is_complete(stage)? {
            Ok(())
        } else {
            Err(PipelineError::Missing {
                stage,
                path: self.layout.artifact(stage),
            })
        }
    }

    /// Runs every stage from `from` on, requiring earlier stages to be
    /// complete. Completed stages with matching hashes are skipped.
    pub fn run(&self, from: Stage) -> Result<RunSummary, PipelineError> {
        let _lock = RunLock::acquire(&self.layout.root)?;
        // Reject stale stamps before touching the run directory.
        for stage in Stage::ALL {
            self.is_complete(stage)?;
        }
        let snapshot = self.layout.config();
        fs::write(&snapshot, self.config.to_toml()).map_err(io_err(&snapshot))?;
        let mut executed = Vec::new();
        for stage in Stage::ALL {
            if stage < from {
                self.require(stage)?;
                continue;
            }
            if self.is_complete(stage)? {
                log::info!("{stage}: up to date, skipping");
                continue;
            }
            let start = Instant::now();
            log::info!("{stage}: running");
            self.run_stage(stage)?;
            let secs = start.elapsed().as_secs_f64();
            self.mark_complete(stage, secs)?;
            log::info!("{stage}: done in {secs:.1}s");
            executed.push(stage);
        }
        let report = self.read_report()?;
        Ok(RunSummary {
            run_dir: self.layout.root.clone(),
            report,
            executed,
        })
    }

    pub fn read_report(&self) -> Result<EvalReport, PipelineError> {
        let path = self.layout.report();
        serde_json::from_slice(&fs::read(&path).map_err(io_err(&path))?).map_err(|e| PipelineError::Config(e.to_string()))
    }

    fn load_annotated(&self) -> Result<Vec<Dialogue>, PipelineError> {
        load_corpus(&self.layout.annotated(), None).map_err(stage_err(Stage::Annotate))
    }

    fn load_pairs(&self) -> Result<Vec<GraphPair>, PipelineError> {
        load_graphs(&self.layout.graphs()).map_err(stage_err(Stage::BuildGraphs))
    }

    /// Conditioner over the fine-tuned coherence model.
    pub fn conditioner(&self, mode: FusionMode) -> Result<Conditioner, PipelineError> {
        self.check_manifest(Stage::Finetune, &self.layout.coherence())?;
        self.config.conditioner(&self.layout.coherence(), mode)
    }

    fn run_stage(&self, stage: Stage) -> Result<(), PipelineError> {
        let cfg = &self.config;
        let layout = &self.layout;
        let hash = self.hash(stage);
        match stage {
            Stage::Annotate => {
                let corpus = match &cfg.corpus.path {
                    Some(p) => load_corpus(p, cfg.corpus.limit).map_err(stage_err(stage))?,
                    None => fixture_corpus().into_iter().take(cfg.corpus.limit.unwrap_or(usize::MAX)).collect(),
                };
                let (done, todo): (Vec<_>, Vec<_>) = corpus.iter().enumerate().partition(|(_, d)| d.is_annotated());
                let annotator = annotator_from_env();
                let todo_d: Vec<Dialogue> = todo.iter().map(|(_, d)| (*d).clone()).collect();
                let labeled = annotate_all(&todo_d, annotator.as_ref());
                let mut all: Vec<(usize, Dialogue)> = done.into_iter().map(|(i, d)| (i, d.clone())).collect();
                all.extend(todo.iter().map(|(i, _)| *i).zip(labeled));
                all.sort_by_key(|(i, _)| *i);
                let dialogues: Vec<Dialogue> = all.into_iter().map(|(_, d)| d).collect();
                save_corpus(&layout.annotated(), &dialogues).map_err(stage_err(stage))
            }
            Stage::BuildGraphs => {
                let dialogues = self.load_annotated()?;
                let embedder = cfg.embedder()?;
                let mut pairs: Vec<GraphPair> = dialogues
                    .iter()
                    .map(|d| build_pair(d, embedder.as_ref(), cfg.graphs.d, cfg.graphs.embed_dim))
                    .collect::<Result<_, _>>()
                    .map_err(stage_err(stage))?;
                if cfg.graphs.prune {
                    let contexts: Vec<_> = pairs.iter().map(|p| p.context.clone()).collect();
                    let pruned = prune_for_balance(&contexts, cfg.graphs.keep_prob, cfg.graphs.high_freq_quantile, cfg.graphs.prune_seed)
                        .map_err(stage_err(stage))?;
                    for (p, g) in pairs.iter_mut().zip(pruned) {
                        p.context = g;
                    }
                }
                save_graphs(&layout.graphs(), &pairs).map_err(stage_err(stage))
            }
            Stage::Pretrain => {
                let contexts: Vec<_> = self.load_pairs()?.into_iter().map(|p| p.context).collect();
                pretrain::run_pretraining(&cfg.pretrain, &cfg.pretrain_gat(), &contexts, Some(&layout.pretrain()), hash)
                    .map_err(stage_err(stage))?;
                Ok(())
            }
            Stage::Finetune => {
                self.check_manifest(Stage::Pretrain, &layout.pretrain())?;
                let (_, init) = checkpoint::load(&layout.pretrain()).map_err(stage_err(stage))?;
                let pairs = self.load_pairs()?;
                coherence::run_finetuning(&cfg.coherence, &pairs, Some(&init), Some(&layout.coherence()), hash)
                    .map_err(stage_err(stage))?;
                Ok(())
            }
            Stage::TrainGenerator => {
                let conditioner = self.conditioner(cfg.memory.fusion_mode)?;
                let dialogues = self.load_annotated()?;
                generator::run_generator_training(&cfg.generator, &dialogues, &conditioner, Some(&layout.generator()), hash)
                    .map_err(stage_err(stage))?;
                Ok(())
            }
            Stage::Generate => {
                let (records, outputs) =
                    self.generate_with(&layout.generator(), Stage::TrainGenerator, cfg.memory.fusion_mode)?;
                write_jsonl(&layout.references(), &records)?;
                write_generations(&layout.generations(), &outputs).map_err(stage_err(stage))
            }
            Stage::Evaluate => {
                let generations = read_generations(&layout.generations()).map_err(stage_err(stage))?;
                let records: Vec<EvalRecord> = read_jsonl(&layout.references())?;
                let nli = HttpNli::from_env();
                let report = evaluate_files(&generations, &records, &cfg.evaluate.metrics, nli.as_ref().map(|n| n as &dyn NliAdapter))?;
                let path = layout.report();
                fs::write(&path, serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(io_err(&path))
            }
        }
    }

    fn generate_with(
        &self,
        gen_dir: &Path,
        gen_stage: Stage,
        mode: FusionMode,
    ) -> Result<(Vec<EvalRecord>, Vec<generator::GenerationOutput>), PipelineError> {
        let conditioner = self.conditioner(mode)?;
        let (_, generator) = load_generator(gen_dir, conditioner).map_err(stage_err(gen_stage))?;
        let records = eval_records(&self.load_annotated()?);
        let requests: Vec<GenerationRequest> = records
            .iter()
            .map(|r| GenerationRequest {
                dialogue_id: r.dialogue_id.clone(),
                persona: r.persona.clone(),
                context: r.context.clone(),
            })
            .collect();
        let outputs = generate_batch(&generator, &requests, self.config.generator.decode).map_err(stage_err(Stage::Generate))?;
        Ok((records, outputs))
    }

    /// Retrains and evaluates the generator once per fusion mode on top of
    /// the fine-tuned coherence model. A mode whose training hash equals
    /// the main generator's reuses that checkpoint.
    pub fn ablate(&self, modes: &[FusionMode]) -> Result<BTreeMap<FusionMode, EvalReport>, PipelineError> {
        let _lock = RunLock::acquire(&self.layout.root)?;
        for stage in [Stage::Annotate, Stage::BuildGraphs, Stage::Pretrain, Stage::Finetune] {
            self.require(stage)?;
        }
        let finetune_hash = self.hash(Stage::Finetune).to_string();
        let mut reports = BTreeMap::new();
        for &mode in modes {
            let dir = self.layout.ablation(mode);
            let section = self.config.generator_training_section(self.config.ablation.epochs, mode);
            let hash = chain_hash(&finetune_hash, Stage::TrainGenerator.name(), &section);
            let main_done = hash == self.hash(Stage::TrainGenerator) && self.is_complete(Stage::TrainGenerator)?;
            let gen_dir = if main_done { self.layout.generator() } else { dir.join("ckpt") };
            let reuse = main_done
                || (checkpoint::exists(&gen_dir)
                    && checkpoint::read_manifest(&gen_dir).map(|m| m.config_hash == hash).unwrap_or(false));
            if !reuse {
                log::info!("ablation {}: training generator", mode.name());
                let conditioner = self.conditioner(mode)?;
                let dialogues = self.load_annotated()?;
                let mut gcfg = self.config.generator.clone();
                if let Some(e) = self.config.ablation.epochs {
                    gcfg.epochs = e;
                }
                generator::run_generator_training(&gcfg, &dialogues, &conditioner, Some(&gen_dir), &hash)
                    .map_err(stage_err(Stage::TrainGenerator))?;
            }
            let (records, outputs) = self.generate_with(&gen_dir, Stage::TrainGenerator, mode)?;
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            write_generations(&dir.join("generations.jsonl"), &outputs).map_err(stage_err(Stage::Generate))?;
            let report = evaluate_files(&outputs, &records, &self.config.evaluate.metrics, None)?;
            let path = dir.join("report.json");
            fs::write(&path, serde_json::to_vec_pretty(&report).expect("report serializes")).map_err(io_err(&path))?;
            reports.insert(mode, report);
        }
        let named: BTreeMap<&str, &EvalReport> = reports.iter().map(|(m, r)| (m.name(), r)).collect();
        let path = self.layout.root.join("ablation").join("report.json");
        fs::create_dir_all(path.parent().expect("ablation dir")).map_err(io_err(&path))?;
        fs::write(&path, serde_json::to_vec_pretty(&named).expect("reports serialize")).map_err(io_err(&path))?;
        Ok(reports)
    }
}

/// Runs the whole pipeline for `config`.
pub fn run_pipeline(config: RunConfig) -> Result<RunSummary, PipelineError> {
    Pipeline::new(config)?.run(Stage::Annotate)
}

/// One report per fusion mode.
pub fn encoder_ablation(config: RunConfig, modes: &[FusionMode]) -> Result<BTreeMap<FusionMode, EvalReport>, PipelineError> {
    Pipeline::new(config)?.ablate(modes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[generator]\nwidth = 3").is_err());
        let cfg = RunConfig::from_toml("seed = 7\n[generator]\nepochs = 3").unwrap();
        assert_eq!(cfg.generator.epochs, 3);
        assert_eq!(cfg.pretrain.seed, 7);
    }

    #[test]
    fn config_round_trips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn hashes_chain_downstream_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.generator.epochs += 1;
        let (ha, hb) = (a.stage_hashes(), b.stage_hashes());
        assert_eq!(ha[&Stage::Finetune], hb[&Stage::Finetune]);
        assert_ne!(ha[&Stage::TrainGenerator], hb[&Stage::TrainGenerator]);
        assert_ne!(ha[&Stage::Evaluate], hb[&Stage::Evaluate]);
        let mut c = a.clone();
        c.generator.decode = "beam:2".parse().unwrap();
        assert_eq!(c.stage_hashes()[&Stage::TrainGenerator], ha[&Stage::TrainGenerator]);
        assert_ne!(c.stage_hashes()[&Stage::Generate], ha[&Stage::Generate]);
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(matches!(RunLock::acquire(dir.path()), Err(PipelineError::Locked(_))));
        drop(lock);
        RunLock::acquire(dir.path()).unwrap();
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(s.name().parse::<Stage>().unwrap(), s);
        }
    }
}
