use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Parser, Subcommand};
use serde::Deserialize;

use mudi_core::coherence::{self, DcuWeights, FusionMode};
use mudi_core::corpus::{annotate_all, annotator_from_env, fixture_corpus, load_corpus, save_corpus};
use mudi_core::generator::{
    self, generate_batch, load_generator, read_generations, write_generations, DecodeMode, GenerationRequest, Variant,
};
use mudi_core::graphbuild::{build_pair, load_graphs, prune_for_balance, save_graphs};
use mudi_core::metrics::{HttpNli, Metric, NliAdapter};
use mudi_core::nn::checkpoint;
use mudi_core::pipeline::{
    eval_records, evaluate_files, read_jsonl, EmbedProvider, EvalRecord, Pipeline, RunConfig, Stage,
};
use mudi_core::pretrain;

#[derive(Parser)]
#[command(name = "mudi", version, about = "Coherence-graph persona dialogue toolkit")]
struct Cli {
    /// Run configuration (TOML). Flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed applied to every stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Label adjacent utterance pairs with coherence relations.
    Annotate {
        /// Corpus JSONL; the bundled fixture when absent.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Build dialogue and persona graphs from an annotated corpus.
    BuildGraphs {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        d: Option<usize>,
        #[arg(long)]
        keep_prob: Option<f64>,
        #[arg(long)]
        quantile: Option<f64>,
        #[arg(long)]
        provider: Option<EmbedProvider>,
        #[arg(long)]
        embed_dim: Option<usize>,
        /// Skip class-balance pruning.
        #[arg(long)]
        no_prune: bool,
    },
    /// Self-supervised pre-training of the context encoder.
    Pretrain {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised coherence fine-tuning.
    Finetune {
        #[arg(long)]
        graphs: PathBuf,
        /// Pre-trained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        /// `alpha,beta,gamma,delta` loss weights.
        #[arg(long)]
        weights: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the response generator on top of a coherence checkpoint.
    TrainGenerator {
        /// Annotated corpus JSONL.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        coherence_ckpt: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        fusion_mode: Option<FusionMode>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate responses with a trained generator.
    Generate {
        /// One persona sentence per line.
        #[arg(long)]
        persona_file: PathBuf,
        /// Either one JSON string per utterance (a single context), or one
        /// `{"dialogue_id", "context", "persona"?}` object per request.
        #[arg(long)]
        context_file: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        coherence_ckpt: PathBuf,
        /// `greedy`, `beam:<width>` or `sample:<temperature>:<seed>`.
        #[arg(long)]
        decode: Option<DecodeMode>,
        /// Generations JSONL; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score generations against references.
    Evaluate {
        /// Generations JSONL.
        #[arg(long)]
        hyp: PathBuf,
        /// Reference records JSONL or a corpus JSONL.
        #[arg(long = "ref")]
        reference: PathBuf,
        /// Records or corpus supplying personas; `--ref` when absent.
        #[arg(long)]
        persona: Option<PathBuf>,
        /// Comma-separated subset of bleu,rouge,dist,ent,usr,cscore.
        #[arg(long)]
        metrics: Option<String>,
        /// Report JSON; stdout when absent.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run every stage, skipping those already complete.
    Run {
        /// First stage to execute; earlier ones must be complete.
        #[arg(long, default_value = "annotate")]
        from: Stage,
        #[arg(long)]
        run_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Retrain and evaluate the generator under each memory fusion mode.
    Ablate {
        /// Comma-separated modes; all when absent.
        #[arg(long, value_delimiter = ',')]
        modes: Vec<FusionMode>,
        /// Generator epochs per mode.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

/// Applies the global seed and validates after flag overrides.
fn finish(mut cfg: RunConfig, seed: Option<u64>) -> Result<RunConfig> {
    if seed.is_some() {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn stage_hash(cfg: &RunConfig, stage: Stage) -> String {
    cfg.stage_hashes()[&stage].clone()
}

fn parse_weights(s: &str) -> Result<DcuWeights> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad --weights {s:?}"))?;
    let [alpha, beta, gamma, delta] = v[..] else {
        bail!("--weights needs four values, got {}", v.len());
    };
    Ok(DcuWeights { alpha, beta, gamma, delta })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
}

#[derive(Deserialize)]
struct ContextLine {
    dialogue_id: String,
    context: Vec<String>,
    #[serde(default)]
    persona: Option<Vec<String>>,
}

fn read_requests(persona_file: &Path, context_file: &Path) -> Result<Vec<GenerationRequest>> {
    let persona = read_lines(persona_file)?;
    let lines = read_lines(context_file)?;
    if lines.is_empty() {
        bail!("{} has no context", context_file.display());
    }
    if let Ok(utterances) = lines.iter().map(|l| serde_json::from_str::<String>(l)).collect::<Result<Vec<_>, _>>() {
        return Ok(vec![GenerationRequest {
            dialogue_id: "0".into(),
            persona,
            context: utterances,
        }]);
    }
    lines
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let c: ContextLine = serde_json::from_str(l).with_context(|| format!("{}:{}", context_file.display(), i + 1))?;
            Ok(GenerationRequest {
                dialogue_id: c.dialogue_id,
                persona: c.persona.unwrap_or_else(|| persona.clone()),
                context: c.context,
            })
        })
        .collect()
}

/// Reference records, or the records derived from a corpus file.
fn load_records(path: &Path) -> Result<Vec<EvalRecord>> {
    match read_jsonl::<EvalRecord>(path) {
        Ok(r) => Ok(r),
        Err(_) => Ok(eval_records(&load_corpus(path, None)?)),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = base_config(&cli)?;
    let seed = cli.seed;
    match cli.command {
        Command::Annotate { input, out, limit } => {
            let cfg = finish(cfg, seed)?;
            let limit = limit.or(cfg.corpus.limit);
            let corpus = match input.or(cfg.corpus.path.clone()) {
                Some(p) => load_corpus(&p, limit)?,
                None => fixture_corpus().into_iter().take(limit.unwrap_or(usize::MAX)).collect(),
            };
            let annotator = annotator_from_env();
            let annotated = annotate_all(&corpus, annotator.as_ref());
            save_corpus(&out, &annotated)?;
            log::info!("annotated {} dialogues into {}", annotated.len(), out.display());
        }
        Command::BuildGraphs { input, out, d, keep_prob, quantile, provider, embed_dim, no_prune } => {
            if let Some(v) = d {
                cfg.graphs.d = v;
            }
            if let Some(v) = keep_prob {
                cfg.graphs.keep_prob = v;
            }
            if let Some(v) = quantile {
                cfg.graphs.high_freq_quantile = v;
            }
            if let Some(v) = provider {
                cfg.graphs.provider = v;
            }
            if let Some(v) = embed_dim {
                cfg.graphs.embed_dim = v;
                cfg.coherence.context_gat.in_dim = v;
                cfg.coherence.persona_gat.in_dim = v;
            }
            if no_prune {
                cfg.graphs.prune = false;
            }
            let cfg = finish(cfg, seed)?;
            let dialogues = load_corpus(&input, None)?;
            let embedder = cfg.embedder()?;
            let g = &cfg.graphs;
            let mut pairs = dialogues
                .iter()
                .map(|dl| build_pair(dl, embedder.as_ref(), g.d, g.embed_dim))
                .collect::<Result<Vec<_>, _>>()?;
            if g.prune {
                let contexts: Vec<_> = pairs.iter().map(|p| p.context.clone()).collect();
                for (p, c) in pairs.iter_mut().zip(prune_for_balance(&contexts, g.keep_prob, g.high_freq_quantile, g.prune_seed)?) {
                    p.context = c;
                }
            }
            save_graphs(&out, &pairs)?;
            log::info!("wrote {} graph pairs to {}", pairs.len(), out.display());
        }
        Command::Pretrain { graphs, epochs, lr, out } => {
            if let Some(v) = epochs {
                cfg.pretrain.epochs = v;
            }
            if let Some(v) = lr {
                cfg.pretrain.lr = v;
            }
            let cfg = finish(cfg, seed)?;
            let contexts: Vec<_> = load_graphs(&graphs)?.into_iter().map(|p| p.context).collect();
            let outcome =
                pretrain::run_pretraining(&cfg.pretrain, &cfg.pretrain_gat(), &contexts, Some(&out), &stage_hash(&cfg, Stage::Pretrain))?;
            log::info!("pre-training done; kept epoch {}", outcome.selected_epoch);
        }
        Command::Finetune { graphs, init, weights, epochs, lr, out } => {
            if let Some(w) = weights {
                cfg.coherence.weights = parse_weights(&w)?;
            }
            if let Some(v) = epochs {
                cfg.coherence.epochs = v;
            }
            if let Some(v) = lr {
                cfg.coherence.lr = v;
            }
            let cfg = finish(cfg, seed)?;
            let pairs = load_graphs(&graphs)?;
            let init = match init {
                Some(dir) => Some(checkpoint::load(&dir)?.1),
                None => None,
            };
            coherence::run_finetuning(&cfg.coherence, &pairs, init.as_ref(), Some(&out), &stage_hash(&cfg, Stage::Finetune))?;
            log::info!("fine-tuned coherence model written to {}", out.display());
        }
        Command::TrainGenerator { corpus, coherence_ckpt, variant, tau, epochs, fusion_mode, out } => {
            if let Some(v) = variant {
                cfg.generator.variant = v;
            }
            if let Some(v) = tau {
                cfg.generator.tau = v;
            }
            if let Some(v) = epochs {
                cfg.generator.epochs = v;
            }
            if let Some(v) = fusion_mode {
                cfg.memory.fusion_mode = v;
            }
            let cfg = finish(cfg, seed)?;
            let dialogues = load_corpus(&corpus, None)?;
            let conditioner = cfg.conditioner(&coherence_ckpt, cfg.memory.fusion_mode)?;
            let outcome = generator::run_generator_training(
                &cfg.generator,
                &dialogues,
                &conditioner,
                Some(&out),
                &stage_hash(&cfg, Stage::TrainGenerator),
            )?;
            log::info!("generator trained; final token loss {:.4}", outcome.final_loss);
        }
        Command::Generate { persona_file, context_file, ckpt, coherence_ckpt, decode, out } => {
            if let Some(v) = decode {
                cfg.generator.decode = v;
            }
            let cfg = finish(cfg, seed)?;
            let manifest = checkpoint::read_manifest(&ckpt)?;
            let mode: FusionMode = manifest
                .meta
                .get("fusion_mode")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .unwrap_or(cfg.memory.fusion_mode);
            let (_, gen) = load_generator(&ckpt, cfg.conditioner(&coherence_ckpt, mode)?)?;
            let requests = read_requests(&persona_file, &context_file)?;
            let outputs = generate_batch(&gen, &requests, cfg.generator.decode)?;
            match out {
                Some(p) => write_generations(&p, &outputs)?,
                None => {
                    for o in &outputs {
                        println!("{}", serde_json::to_string(o)?);
                    }
                }
            }
        }
        Command::Evaluate { hyp, reference, persona, metrics, report } => {
            if let Some(m) = metrics {
                cfg.evaluate.metrics = Metric::parse_list(&m)?;
            }
            let cfg = finish(cfg, seed)?;
            let generations = read_generations(&hyp)?;
            let mut records = load_records(&reference)?;
            if let Some(p) = persona {
                let personas = load_records(&p)?;
                if personas.len() != records.len() {
                    bail!("{} persona records but {} references", personas.len(), records.len());
                }
                for (r, p) in records.iter_mut().zip(personas) {
                    r.persona = p.persona;
                }
            }
            let nli = HttpNli::from_env();
            let rep = evaluate_files(&generations, &records, &cfg.evaluate.metrics, nli.as_ref().map(|n| n as &dyn NliAdapter))?;
            let text = serde_json::to_string_pretty(&rep)?;
            match report {
                Some(p) => fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{text}"),
            }
        }
        Command::Run { from, run_dir, epochs } => {
            if let Some(d) = run_dir {
                cfg.run_dir = d;
            }
            if let Some(v) = epochs {
                cfg.generator.epochs = v;
            }
            let cfg = finish(cfg, seed)?;
            let summary = Pipeline::new(cfg)?.run(from)?;
            let ran: Vec<&str> = summary.executed.iter().map(|s| s.name()).collect();
            log::info!("run complete in {} (executed: {})", summary.run_dir.display(), ran.join(", "));
            println!("{}", serde_json::to_string_pretty(&summary.report)?);
        }
        Command::Ablate { modes, epochs, run_dir } => {
            if let Some(d) = run_dir {
                cfg.run_dir = d;
            }
            if !modes.is_empty() {
                cfg.ablation.modes = modes;
            }
            if epochs.is_some() {
                cfg.ablation.epochs = epochs;
            }
            let cfg = finish(cfg, seed)?;
            let modes = cfg.ablation.modes.clone();
            let reports = Pipeline::new(cfg)?.ablate(&modes)?;
            println!("{:<14} {:>8} {:>8}", "mode", "bleu1", "rouge1");
            for (mode, r) in &reports {
                let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
                println!("{:<14} {:>8} {:>8}", mode.name(), fmt(r.bleu1), fmt(r.rouge1));
            }
        }
    }
    Ok(())
}
