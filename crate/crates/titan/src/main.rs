use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use titan::checkpoint::{file_digest, parse, Checkpoint, FLAG_AUX, FLAG_OPTIMIZER};
use titan::distill::{run_distill, DistillManifest};
use titan::eval::{evaluate, read_tasks, render_table, AttentionSel, EvalOptions, MethodSel};
use titan::formats::{
    load_vocab, read_corpus, save_vocab, write_corpus, write_jsonl, AdversarialRecord,
};
use titan::generate::{generate, GenerateRequest};
use titan::kv::Kv;
use titan::pipeline::vocab_texts;
use titan::synth::{lexicon, synthetic_corpus, SynthOptions};
use titan::train::{run_pretrain, NumericFailure, RunConfig, RunOptions};
use titan_core::data::{build_adversarial_dataset, default_taggers, tag_attributes, Attribute, KeywordBucketTopic, Tagger};
use titan_core::tasks::{AttributeSet, Sentiment};
use titan_core::tokenizer::Tokenizer;
use titan_core::zeroshot::ModelLm;

#[derive(Parser)]
#[command(name = "titan", version, about = "Multi-task pre-training, distillation and zero-shot evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-task pre-training from a key=value run config.
    Pretrain {
        config: PathBuf,
        /// Override a config field, `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Include or exclude the adversarial loss.
        #[arg(long, value_parser = ["on", "off"])]
        adversarial: Option<String>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed steps.
        #[arg(long)]
        stop_after: Option<u64>,
        /// Record elapsed time in the log.
        #[arg(long)]
        wall_time: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Teacher, teacher assistant and students trained in lockstep.
    Distill {
        manifest: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Train the teacher alone on the same batches.
        #[arg(long)]
        teacher_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Zero-shot evaluation of a JSON-lines task file.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long, default_value = "all")]
        method: MethodSel,
        #[arg(long, default_value = "uni")]
        attention: AttentionSel,
        /// Per-example results and aggregates, JSON lines.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        beam_width: usize,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Attribute-conditioned generation.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        genre: Option<usize>,
        #[arg(long)]
        topic: Option<String>,
        /// Comma-separated.
        #[arg(long)]
        keywords: Option<String>,
        #[arg(long)]
        sentiment: Option<String>,
        #[arg(long)]
        length: Option<usize>,
        #[arg(long, default_value = "")]
        prompt: String,
        #[arg(long)]
        max_len: Option<usize>,
        #[arg(long)]
        soft_prompts: Option<usize>,
        /// Sample N candidates and return the most credible one.
        #[arg(long, value_name = "N")]
        rank_credibility: Option<usize>,
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Original and generated paragraphs for the adversarial loss.
    BuildAdversarial {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        generator: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        max_generated: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a byte-pair vocabulary on a corpus.
    BuildVocab {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        max_docs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tag corpus documents with controllable-generation attributes.
    TagAttributes {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long, default_value_t = 3)]
        keywords: usize,
        /// key=value file mapping words to topics.
        #[arg(long)]
        topics: Option<PathBuf>,
        /// Comma-separated subset of genre,topic,keywords,sentiment,length.
        #[arg(long)]
        attributes: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a checkpoint's header, tensor directory and digest.
    InspectCheckpoint { checkpoint: PathBuf },
    /// Write the deterministic synthetic corpus.
    SynthCorpus {
        #[arg(long, default_value_t = 5_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2)]
        min_sentences: usize,
        #[arg(long, default_value_t = 8)]
        max_sentences: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the entity lexicon, one name per line.
        #[arg(long)]
        lexicon: Option<PathBuf>,
    },
}

fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(if p.is_absolute() { p.to_path_buf() } else { std::env::current_dir()?.join(p) })
}

fn load_config(path: &Path, set: &[String]) -> Result<(Kv, PathBuf)> {
    let mut kv = Kv::load(path)?;
    for s in set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| anyhow!("--set expects key=value, got `{s}`"))?;
        kv.set(k.trim(), v.trim());
    }
    let base = absolute(path)?.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((kv, base))
}

fn load_model(checkpoint: &Path, vocab: &Path) -> Result<(Checkpoint, Tokenizer)> {
    let ck = Checkpoint::load(checkpoint)?;
    let tk = load_vocab(vocab)?;
    if ck.model.config.vocab_size != tk.vocab_size() {
        bail!(
            "checkpoint vocabulary size {} does not match {}",
            ck.model.config.vocab_size,
            tk.vocab_size()
        );
    }
    if let Some(h) = ck.meta.get("vocab_hash") {
        if *h != format!("{:016x}", tk.fingerprint()) {
            bail!("checkpoint was trained with a different vocabulary");
        }
    }
    Ok((ck, tk))
}

fn parse_attributes(list: &str) -> Result<Vec<Attribute>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            Attribute::ALL
                .into_iter()
                .find(|a| format!("{a:?}").eq_ignore_ascii_case(s))
                .ok_or_else(|| anyhow!("unknown attribute `{s}`"))
        })
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain {
            config,
            set,
            steps,
            seed,
            out,
            adversarial,
            resume,
            stop_after,
            wall_time,
            quiet,
        } => {
            let (mut kv, base) = load_config(&config, &set)?;
            if let Some(s) = steps {
                kv.set("steps", s);
            }
            if let Some(s) = seed {
                kv.set("seed", s);
            }
            if let Some(o) = out {
                kv.set("out", absolute(&o)?.display());
            }
            if let Some(a) = adversarial {
                let default = "masked_lm,document_lm,reorder,distance,uktp,controllable".to_string();
                let mut tasks: Vec<String> = kv
                    .raw("tasks")
                    .map_or(default, str::to_string)
                    .split(',')
                    .map(|t| t.trim().to_string())
                    .filter(|t| !t.is_empty() && t != "adversarial")
                    .collect();
                if a == "on" {
                    tasks.push("adversarial".into());
                }
                kv.set("tasks", tasks.join(","));
            }
            let (cfg, tk) = RunConfig::from_kv(&kv, &base)?;
            let opts = RunOptions {
                resume: resume.map(|r| absolute(&r)).transpose()?,
                stop_after,
                wall_time,
                quiet,
            };
            let s = run_pretrain(&cfg, &tk, &opts)?;
            println!("completed {} steps; output in {}", s.steps_done, cfg.out.display());
        }
        Command::Distill {
            manifest,
            set,
            teacher_only,
            out,
            quiet,
        } => {
            let (mut kv, base) = load_config(&manifest, &set)?;
            if let Some(o) = out {
                kv.set("out", absolute(&o)?.display());
            }
            let (m, tk) = DistillManifest::from_kv(&kv, &base)?;
            let o = run_distill(&m, &tk, teacher_only, quiet)?;
            println!("teacher: {}", o.teacher.display());
            if let Some(ta) = o.ta {
                println!("ta: {}", ta.display());
            }
            for s in o.students {
                println!("student: {}", s.display());
            }
        }
        Command::Eval {
            checkpoint,
            vocab,
            tasks,
            method,
            attention,
            out,
            beam_width,
            max_len,
        } => {
            let (ck, tk) = load_model(&checkpoint, &vocab)?;
            let records = read_tasks(&tasks)?;
            let report = evaluate(
                &ck.model,
                &tk,
                &records,
                method,
                attention,
                &EvalOptions { beam_width, max_len },
            )?;
            if let Some(o) = out {
                let mut lines: Vec<serde_json::Value> = Vec::new();
                for r in &report.results {
                    lines.push(serde_json::to_value(r)?);
                }
                for a in &report.aggregates {
                    let mut v = serde_json::to_value(a)?;
                    v["aggregate"] = true.into();
                    lines.push(v);
                }
                write_jsonl(&o, &lines)?;
            }
            print!("{}", render_table(&report.aggregates));
        }
        Command::Generate {
            checkpoint,
            vocab,
            genre,
            topic,
            keywords,
            sentiment,
            length,
            prompt,
            max_len,
            soft_prompts,
            rank_credibility,
            temperature,
            seed,
            json,
        } => {
            let (ck, tk) = load_model(&checkpoint, &vocab)?;
            let attributes = AttributeSet {
                genre,
                topic,
                keywords: keywords.map(|k| k.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()),
                sentiment: sentiment.map(|s| s.parse::<Sentiment>()).transpose()?,
                length,
            };
            let req = GenerateRequest {
                attributes,
                prompt,
                max_len,
                soft_prompts,
                rank_credibility,
                temperature,
                seed,
            };
            let out = generate(&ck.model, &tk, &req)?;
            if json {
                println!("{}", serde_json::to_string(&out)?);
            } else {
                println!("{}", out.text);
            }
        }
        Command::BuildAdversarial {
            corpus,
            vocab,
            generator,
            n,
            max_generated,
            seed,
            out,
        } => {
            let (ck, tk) = load_model(&generator, &vocab)?;
            let docs = read_corpus(&corpus)?;
            let lm = ModelLm::new(&ck.model);
            let examples = build_adversarial_dataset(&docs, &tk, &lm, n, max_generated, seed)?;
            let recs: Vec<AdversarialRecord> = examples.iter().map(|e| AdversarialRecord::from_example(e, &tk)).collect();
            write_jsonl(&out, &recs)?;
            println!("wrote {} examples to {}", recs.len(), out.display());
        }
        Command::BuildVocab {
            corpus,
            size,
            max_docs,
            out,
        } => {
            let docs = read_corpus(&corpus)?;
            let take = max_docs.unwrap_or(docs.len());
            let texts = vocab_texts(&docs[..take.min(docs.len())]);
            let tk = Tokenizer::train(texts.iter().map(|s| s.as_str()), size)?;
            save_vocab(&out, &tk)?;
            println!("vocabulary of {} tokens written to {}", tk.vocab_size(), out.display());
        }
        Command::TagAttributes {
            corpus,
            vocab,
            keywords,
            topics,
            attributes,
            out,
        } => {
            let mut docs = read_corpus(&corpus)?;
            let tk = load_vocab(&vocab)?;
            let buckets = match topics {
                Some(p) => {
                    let kv = Kv::load(&p)?;
                    KeywordBucketTopic::new(kv.iter().map(|(k, v)| (k.as_str(), v.as_str())))
                }
                None => KeywordBucketTopic::default(),
            };
            let requested = match attributes {
                Some(a) => parse_attributes(&a)?,
                None => Attribute::ALL.to_vec(),
            };
            let taggers = default_taggers(&docs, &tk, keywords, buckets);
            let refs: Vec<&dyn Tagger> = taggers.iter().map(|t| t.as_ref()).collect();
            let tagged: Vec<AttributeSet> = docs.iter().map(|d| tag_attributes(d, &refs, &requested)).collect();
            for (d, a) in docs.iter_mut().zip(tagged) {
                d.attributes = Some(a);
            }
            write_corpus(&out, &docs)?;
            println!("tagged {} documents into {}", docs.len(), out.display());
        }
        Command::InspectCheckpoint { checkpoint } => {
            let bytes = std::fs::read(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let (header, entries, _) = parse(&bytes)?;
            // Full validation, not just the directory.
            Checkpoint::from_bytes(&bytes)?;
            println!("[header]");
            print!("{}", header.render());
            println!("[tensors]");
            for e in &entries {
                let mut flags = Vec::new();
                if e.flags & FLAG_AUX != 0 {
                    flags.push("aux");
                }
                if e.flags & FLAG_OPTIMIZER != 0 {
                    flags.push("optimizer");
                }
                let shape: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
                println!("{} [{}] {} @{}", e.name, shape.join("x"), flags.join(","), e.offset);
            }
            println!("[digest]");
            println!("sha256={}", file_digest(&checkpoint)?);
        }
        Command::SynthCorpus {
            bytes,
            seed,
            min_sentences,
            max_sentences,
            out,
            lexicon: lex,
        } => {
            if min_sentences == 0 || max_sentences < min_sentences {
                bail!("need 1 <= --min-sentences <= --max-sentences");
            }
            let docs = synthetic_corpus(&SynthOptions {
                target_bytes: bytes,
                seed,
                min_sentences,
                max_sentences,
            });
            write_corpus(&out, &docs)?;
            if let Some(p) = lex {
                let mut text = lexicon().join("\n");
                text.push('\n');
                std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("wrote {} documents to {}", docs.len(), out.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<NumericFailure>().is_some() {
        return 2;
    }
    match e.downcast_ref::<titan_core::Error>() {
        Some(titan_core::Error::NonFinite { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
