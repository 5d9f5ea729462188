//! The `pretrain` driver: run configuration, the training loop, the run log
//! and resumption.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use titan_core::model::{Model, ModelConfig, MAX_GENRE_PROMPTS};
use titan_core::tasks::{
    masked_lm_perplexity, multitask_step_weighted, original_probabilities, AdversarialExample, AdversarialLabel,
    Lexicon, OptimizerConfig, OptimizerState, TaskWeights, TASK_NAMES,
};
use titan_core::tokenizer::Tokenizer;

use crate::checkpoint::Checkpoint;
use crate::config::{model_config_from, optimizer_from};
use crate::formats::{load_vocab, read_adversarial, read_corpus, read_lexicon};
use crate::kv::Kv;
use crate::pipeline::{Sampler, SamplerConfig};

/// A numeric failure during a run; the CLI maps it to exit code 2.
#[derive(Debug)]
pub struct NumericFailure {
    pub step: u64,
    pub detail: String,
}

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "non-finite value at step {}: {}", self.step, self.detail)
    }
}

impl std::error::Error for NumericFailure {}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub adversarial: Option<PathBuf>,
    pub adversarial_heldout: Option<PathBuf>,
    pub seed: u64,
    pub steps: u64,
    pub weights: TaskWeights,
    pub sampler: SamplerConfig,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
    pub out: PathBuf,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(base: &Path, field: &str, p: &str) -> Result<PathBuf> {
    let path = resolve(base, p);
    ensure!(path.exists(), "field `{field}`: {} does not exist", path.display());
    Ok(path)
}

const DEFAULT_TASKS: [&str; 6] = ["masked_lm", "document_lm", "reorder", "distance", "uktp", "controllable"];

impl RunConfig {
    /// Parses a run configuration; relative paths are taken from `base`.
    /// The vocabulary is needed to default `model.vocab_size`.
    pub fn from_kv(kv: &Kv, base: &Path) -> Result<(Self, Tokenizer)> {
        let r = kv.reader();
        let vocab = existing(base, "vocab", &r.require::<String>("vocab")?)?;
        let tokenizer = load_vocab(&vocab)?;
        let mut model_kv = Kv::new();
        if let Some(p) = r.get::<String>("model")? {
            model_kv = Kv::load(&existing(base, "model", &p)?)?;
        }
        model_kv.merge(&kv.section("model"));
        r.claim_section("model");
        let mr = model_kv.reader();
        let model = model_config_from(&mr, "", ModelConfig::toy(tokenizer.vocab_size()))
            .map_err(|e| anyhow!("model: {e}"))?;
        mr.finish().map_err(|e| anyhow!("model: {e}"))?;
        ensure!(
            model.vocab_size == tokenizer.vocab_size(),
            "field `model.vocab_size`: {} does not match the vocabulary size {}",
            model.vocab_size,
            tokenizer.vocab_size()
        );

        let seed: u64 = r.require("seed")?;
        let steps: u64 = r.or("steps", 1000)?;
        let mut opt_base = OptimizerConfig {
            total_steps: steps.max(1),
            warmup_steps: (steps / 10).min(OptimizerConfig::default().warmup_steps),
            ..OptimizerConfig::default()
        };
        if let Some(w) = r.get::<u64>("optimizer.warmup_steps")? {
            opt_base.warmup_steps = w;
            opt_base.total_steps = opt_base.total_steps.max(w);
        }
        let optimizer = optimizer_from(&r, "optimizer.", opt_base)?;

        let tasks = r
            .list("tasks")
            .unwrap_or_else(|| DEFAULT_TASKS.iter().map(|s| s.to_string()).collect());
        let batch: usize = r.or("batch_size", 4)?;
        let mut sampler = SamplerConfig::new(tasks, batch, model.max_seq_len)?;
        let mut weights = TaskWeights::new();
        for t in TASK_NAMES {
            if let Some(b) = r.get::<usize>(&format!("batch.{t}"))? {
                sampler.batch.insert(t.to_string(), b);
            }
            if let Some(w) = r.get::<f64>(&format!("weight.{t}"))? {
                ensure!(w >= 0.0 && w.is_finite(), "field `weight.{t}` must be finite and non-negative");
                weights.insert(t.to_string(), w);
            }
        }
        sampler.mask_rate = r.or("mask_rate", sampler.mask_rate)?;
        sampler.reorder_segments = model.reorder_segments;
        sampler.heldout_every = r.or("heldout_every", sampler.heldout_every)?;
        sampler.heldout_examples = r.or("heldout_examples", sampler.heldout_examples)?;
        sampler.document_segments = r.or("document_segments", sampler.document_segments)?;
        sampler.controllable.plain_prob = r.or("controllable.plain_prob", sampler.controllable.plain_prob)?;
        sampler.controllable.drop_prob = r.or("controllable.drop_prob", sampler.controllable.drop_prob)?;
        sampler.controllable.max_soft_prompts = r.or(
            "controllable.max_soft_prompts",
            model.num_genre_prompts.min(MAX_GENRE_PROMPTS - 1),
        )?;
        for (f, p) in [("controllable.plain_prob", sampler.controllable.plain_prob), ("controllable.drop_prob", sampler.controllable.drop_prob)] {
            ensure!((0.0..=1.0).contains(&p), "field `{f}` must lie in [0, 1]");
        }
        ensure!(
            sampler.controllable.max_soft_prompts <= model.num_genre_prompts,
            "field `controllable.max_soft_prompts` exceeds model.num_genre_prompts"
        );
        ensure!((0.0..1.0).contains(&sampler.mask_rate), "field `mask_rate` must lie in [0, 1)");

        let path_opt = |field: &str| -> Result<Option<PathBuf>> {
            r.get::<String>(field)?.map(|p| existing(base, field, &p)).transpose()
        };
        let cfg = RunConfig {
            corpus: existing(base, "corpus", &r.require::<String>("corpus")?)?,
            lexicon: path_opt("lexicon")?,
            adversarial: path_opt("adversarial")?,
            adversarial_heldout: path_opt("adversarial_heldout")?,
            log_interval: r.or("log_interval", 50)?,
            checkpoint_interval: r.or("checkpoint_interval", 0)?,
            out: resolve(base, &r.require::<String>("out")?),
            model,
            optimizer,
            vocab,
            seed,
            steps,
            weights,
            sampler,
        };
        r.finish()?;
        ensure!(cfg.log_interval > 0, "field `log_interval` must be positive");
        Ok((cfg, tokenizer))
    }
}

/// One run-log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub losses: BTreeMap<String, f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub wall_time: f64,
    pub heldout_ppl: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adversarial_acc: Option<f64>,
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    crate::formats::read_jsonl(path)
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub resume: Option<PathBuf>,
    /// Stop after this many completed steps, as if interrupted.
    pub stop_after: Option<u64>,
    /// Record elapsed seconds in the log; off keeps logs reproducible.
    pub wall_time: bool,
    pub quiet: bool,
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub steps_done: u64,
    pub final_checkpoint: PathBuf,
    pub log: Vec<LogRecord>,
}

pub fn adversarial_accuracy(model: &Model<f32>, examples: &[AdversarialExample]) -> Result<f64> {
    ensure!(!examples.is_empty(), "no held-out adversarial examples");
    let seqs: Vec<_> = examples.iter().map(|e| e.tokens.clone()).collect();
    let p = original_probabilities(model, &seqs)?;
    let correct = p
        .iter()
        .zip(examples)
        .filter(|(&p, e)| (p >= 0.5) == (e.label == AdversarialLabel::Original))
        .count();
    Ok(correct as f64 / examples.len() as f64)
}

fn checkpoint(model: &Model<f32>, state: &OptimizerState<f32>, cfg: &RunConfig, tokenizer: &Tokenizer) -> Checkpoint {
    let mut c = Checkpoint::new(model.clone())
        .with_meta("kind", "pretrain")
        .with_meta("seed", cfg.seed)
        .with_meta("step", state.step)
        .with_meta("vocab_hash", format!("{:016x}", tokenizer.fingerprint()));
    c.optimizer = Some(state.clone());
    c
}

fn numeric(step: u64, e: anyhow::Error) -> anyhow::Error {
    match e.downcast_ref::<titan_core::Error>() {
        Some(titan_core::Error::NonFinite { op }) => NumericFailure {
            step,
            detail: format!("produced by {op}"),
        }
        .into(),
        _ => e,
    }
}

pub fn run_pretrain(cfg: &RunConfig, tokenizer: &Tokenizer, opts: &RunOptions) -> Result<RunSummary> {
    let corpus = read_corpus(&cfg.corpus)?;
    for d in &corpus {
        if let Some(g) = d.attributes.as_ref().and_then(|a| a.genre) {
            ensure!(
                g < cfg.model.num_genres,
                "document `{}`: genre {g} out of range for model.num_genres {}",
                d.doc_id,
                cfg.model.num_genres
            );
        }
    }
    let lexicon = match &cfg.lexicon {
        Some(p) => read_lexicon(p, tokenizer)?,
        None => Lexicon::new(),
    };
    let adversarial = match &cfg.adversarial {
        Some(p) => read_adversarial(p, tokenizer)?,
        None => Vec::new(),
    };
    let adversarial_heldout = cfg
        .adversarial_heldout
        .as_ref()
        .map(|p| read_adversarial(p, tokenizer))
        .transpose()?;
    let sampler = Sampler::new(cfg.sampler.clone(), tokenizer, lexicon, &corpus, adversarial, adversarial_heldout)?;
    let heldout = sampler.heldout_masked()?;
    ensure!(!heldout.is_empty(), "corpus too small for a held-out split");
    let adv_eval = if cfg.sampler.tasks.contains("adversarial") {
        sampler.adversarial_eval()
    } else {
        Vec::new()
    };

    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    let log_path = cfg.out.join("log.jsonl");
    let (mut model, mut state, mut log) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            ensure!(ck.model.config == cfg.model, "resume: checkpoint model config differs from the run config");
            ensure!(
                ck.meta_u64("seed")? == Some(cfg.seed),
                "resume: checkpoint seed differs from field `seed`"
            );
            ensure!(
                ck.meta.get("vocab_hash") == Some(&format!("{:016x}", tokenizer.fingerprint())),
                "resume: checkpoint vocabulary differs"
            );
            let state = ck.optimizer.ok_or_else(|| anyhow!("resume: checkpoint has no optimizer state"))?;
            let k = state.step;
            let log: Vec<LogRecord> = if log_path.exists() {
                read_log(&log_path)?.into_iter().filter(|r| r.step <= k).collect()
            } else {
                Vec::new()
            };
            (ck.model, state, log)
        }
        None => {
            let model = Model::<f32>::new(cfg.model.clone(), cfg.seed)?;
            let state = OptimizerState::new(&model.params);
            (model, state, Vec::new())
        }
    };
    let mut log_file = fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?;
    for r in &log {
        writeln!(log_file, "{}", serde_json::to_string(r)?)?;
    }
    if opts.resume.is_none() {
        checkpoint(&model, &state, cfg, tokenizer).save(&cfg.out.join("step-000000.e3tf"))?;
    }

    let start = Instant::now();
    let end = opts.stop_after.map_or(cfg.steps, |s| s.min(cfg.steps));
    while state.step < end {
        let step = state.step;
        let bundle = sampler.bundle(cfg.seed, step)?;
        let report = multitask_step_weighted(&mut model, &mut state, &cfg.optimizer, &bundle, &cfg.weights)
            .map_err(|e| numeric(step + 1, e.into()))?;
        if !report.total.is_finite() || !report.grad_norm.is_finite() {
            return Err(NumericFailure {
                step: step + 1,
                detail: format!("loss {} grad norm {}", report.total, report.grad_norm),
            }
            .into());
        }
        let done = state.step;
        if done % cfg.log_interval == 0 || done == cfg.steps {
            let heldout_ppl = masked_lm_perplexity(&model, &heldout).map_err(|e| numeric(done, e.into()))?;
            let adversarial_acc = if adv_eval.is_empty() {
                None
            } else {
                Some(adversarial_accuracy(&model, &adv_eval)?)
            };
            let rec = LogRecord {
                step: done,
                losses: report.losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                total: report.total,
                grad_norm: report.grad_norm,
                lr: report.lr,
                wall_time: if opts.wall_time { start.elapsed().as_secs_f64() } else { 0.0 },
                heldout_ppl,
                adversarial_acc,
            };
            let line = serde_json::to_string(&rec)?;
            writeln!(log_file, "{line}")?;
            log_file.flush()?;
            if !opts.quiet {
                eprintln!("{line}");
            }
            log.push(rec);
        }
        if done == end || (cfg.checkpoint_interval > 0 && done % cfg.checkpoint_interval == 0) {
            checkpoint(&model, &state, cfg, tokenizer).save(&cfg.out.join(format!("step-{done:06}.e3tf")))?;
        }
    }
    let final_checkpoint = cfg.out.join("model.e3tf");
    if state.step == cfg.steps {
        checkpoint(&model, &state, cfg, tokenizer).save(&final_checkpoint)?;
    } else if state.step > cfg.steps {
        bail!("resume: checkpoint step {} is past field `steps` {}", state.step, cfg.steps);
    }
    Ok(RunSummary {
        steps_done: state.step,
        final_checkpoint,
        log,
    })
}
