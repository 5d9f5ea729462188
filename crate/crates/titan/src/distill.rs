//! The `distill` driver: teacher, teacher assistant and students trained in
//! lockstep from one manifest.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, ensure, Result};
use serde::{Deserialize, Serialize};
use titan_core::distill::{
    discard_ald_layer, ofd_step, DistillTopology, DistillWeights, LayerPair, OfdConfig, OfdState, StudentState,
};
use titan_core::model::ModelConfig;
use titan_core::rng::derive_seed;
use titan_core::tasks::{multitask_step, Lexicon, OptimizerConfig};
use titan_core::tokenizer::Tokenizer;

use crate::checkpoint::Checkpoint;
use crate::config::{model_config_from, optimizer_from};
use crate::formats::{load_vocab, read_corpus, read_lexicon};
use crate::kv::{Kv, KvReader};
use crate::pipeline::{Sampler, SamplerConfig};
use crate::train::NumericFailure;

#[derive(Clone, Debug, PartialEq)]
pub struct DistillManifest {
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub lexicon: Option<PathBuf>,
    pub topology: DistillTopology,
    pub ofd: OfdConfig,
    pub sampler: SamplerConfig,
    pub seed: u64,
    pub steps: u64,
    pub warm_start_steps: u64,
    pub discard_ald: bool,
    pub log_interval: u64,
    pub out: PathBuf,
}

/// `a:b, c:d` pairs of source and target layer indices.
fn parse_pairs(field: &str, text: &str) -> Result<Vec<LayerPair>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|p| {
            let (a, b) = p
                .split_once(':')
                .ok_or_else(|| anyhow!("field `{field}`: expected source:target, got `{p}`"))?;
            Ok(LayerPair {
                source: a.trim().parse().map_err(|e| anyhow!("field `{field}`: {e}"))?,
                target: b.trim().parse().map_err(|e| anyhow!("field `{field}`: {e}"))?,
            })
        })
        .collect()
}

fn weights(r: &KvReader<'_>, prefix: &str) -> Result<DistillWeights> {
    let d = DistillWeights::default();
    let w = DistillWeights {
        kl: r.or(&format!("{prefix}.kl_weight"), d.kl)?,
        lm: r.or(&format!("{prefix}.lm_weight"), d.lm)?,
    };
    ensure!(
        w.kl >= 0.0 && w.lm >= 0.0 && w.kl + w.lm > 0.0,
        "fields `{prefix}.kl_weight`/`{prefix}.lm_weight` must be non-negative and not both zero"
    );
    Ok(w)
}

pub fn default_ta(vocab: usize) -> ModelConfig {
    ModelConfig {
        universal_layers: 1,
        ..ModelConfig::toy(vocab)
    }
}

pub fn default_student(vocab: usize) -> ModelConfig {
    ModelConfig {
        universal_layers: 1,
        universal_hidden: 16,
        task_hidden: 16,
        ..ModelConfig::toy(vocab)
    }
}

fn resolve(base: &Path, field: &str, p: &str) -> Result<PathBuf> {
    let path = base.join(p);
    ensure!(path.exists(), "field `{field}`: {} does not exist", path.display());
    Ok(path)
}

impl DistillManifest {
    pub fn from_kv(kv: &Kv, base: &Path) -> Result<(Self, Tokenizer)> {
        let r = kv.reader();
        let vocab = resolve(base, "vocab", &r.require::<String>("vocab")?)?;
        let tokenizer = load_vocab(&vocab)?;
        let v = tokenizer.vocab_size();
        let teacher = model_config_from(&r, "teacher.", ModelConfig::toy(v)).map_err(|e| anyhow!("teacher: {e}"))?;
        let ta = model_config_from(&r, "ta.model.", default_ta(v)).map_err(|e| anyhow!("ta: {e}"))?;
        let listed: BTreeSet<usize> = kv
            .keys()
            .filter_map(|k| k.strip_prefix("student."))
            .filter_map(|k| k.split('.').next()?.parse().ok())
            .collect();
        let count: usize = r.or("students", listed.iter().next_back().map_or(1, |n| n + 1))?;
        ensure!(count >= 1, "field `students` must be at least 1");
        if let Some(&n) = listed.iter().find(|&&n| n >= count) {
            return Err(anyhow!("field `student.{n}`: only {count} student(s) declared"));
        }
        let mut students = Vec::with_capacity(count);
        for i in 0..count {
            let c = model_config_from(&r, &format!("student.{i}.model."), default_student(v))
                .map_err(|e| anyhow!("student.{i}: {e}"))?;
            students.push(c);
        }
        let mut topology = DistillTopology::new(teacher, ta, students.clone()).map_err(|e| anyhow!("topology: {e}"))?;
        if let Some(p) = r.get::<String>("ta.pairs")? {
            topology.ta_pairs = parse_pairs("ta.pairs", &p)?;
        }
        for i in 0..count {
            if let Some(p) = r.get::<String>(&format!("student.{i}.pairs"))? {
                topology.student_pairs[i] = parse_pairs(&format!("student.{i}.pairs"), &p)?;
            }
        }
        topology.ta_auxiliary = r.or("ta_auxiliary", false)?;
        topology.validate().map_err(|e| anyhow!("topology: {e}"))?;

        let seed: u64 = r.require("seed")?;
        let steps: u64 = r.or("steps", 200)?;
        let optimizer = optimizer_from(
            &r,
            "optimizer.",
            OptimizerConfig {
                warmup_steps: (steps / 10).min(4000),
                total_steps: steps.max(1),
                ..OptimizerConfig::default()
            },
        )?;
        let ofd = OfdConfig {
            optimizer,
            ta: weights(&r, "ta")?,
            student: weights(&r, "student")?,
        };
        let tasks = r.list("tasks").unwrap_or_else(|| vec!["masked_lm".to_string()]);
        ensure!(tasks.iter().any(|t| t == "masked_lm"), "field `tasks` must include masked_lm");
        let max_seq_len = std::iter::once(&topology.teacher)
            .chain([&topology.ta])
            .chain(&topology.students)
            .map(|c| c.max_seq_len)
            .min()
            .unwrap_or(0);
        let mut sampler = SamplerConfig::new(tasks, r.or("batch_size", 4)?, max_seq_len)?;
        sampler.controllable.max_soft_prompts = topology.teacher.num_genre_prompts.min(63);
        sampler.heldout_every = 0;
        let lexicon = r.get::<String>("lexicon")?.map(|p| resolve(base, "lexicon", &p)).transpose()?;
        let m = DistillManifest {
            corpus: resolve(base, "corpus", &r.require::<String>("corpus")?)?,
            vocab,
            lexicon,
            topology,
            ofd,
            sampler,
            seed,
            steps,
            warm_start_steps: r.or("warm_start_steps", 0)?,
            discard_ald: r.or("discard_ald", true)?,
            log_interval: r.or("log_interval", 10)?,
            out: base.join(r.require::<String>("out")?),
        };
        r.finish()?;
        ensure!(m.log_interval > 0, "field `log_interval` must be positive");
        Ok((m, tokenizer))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemberLog {
    pub kl: f64,
    pub lm: f64,
    pub total: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLogRecord {
    pub step: u64,
    pub teacher_losses: std::collections::BTreeMap<String, f64>,
    pub teacher_total: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ta: Option<MemberLog>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub students: Vec<MemberLog>,
}

fn save(member: &StudentState<f32>, kind: &str, m: &DistillManifest, tk: &Tokenizer, path: &Path) -> Result<()> {
    let mut c = Checkpoint::new(member.model.clone())
        .with_meta("kind", kind)
        .with_meta("seed", m.seed)
        .with_meta("step", member.step())
        .with_meta("vocab_hash", format!("{:016x}", tk.fingerprint()));
    c.optimizer = Some(member.optimizer.clone());
    c.save(path)
}

#[derive(Clone, Debug)]
pub struct DistillOutputs {
    pub teacher: PathBuf,
    pub ta: Option<PathBuf>,
    pub students: Vec<PathBuf>,
}

fn member_log(r: &titan_core::distill::MemberReport) -> MemberLog {
    MemberLog {
        kl: r.kl,
        lm: r.lm,
        total: r.total,
        grad_norm: r.grad_norm,
    }
}

/// Runs the manifest. With `teacher_only`, only the teacher is trained, on
/// the same batch stream.
pub fn run_distill(m: &DistillManifest, tokenizer: &Tokenizer, teacher_only: bool, quiet: bool) -> Result<DistillOutputs> {
    let corpus = read_corpus(&m.corpus)?;
    let lexicon = match &m.lexicon {
        Some(p) => read_lexicon(p, tokenizer)?,
        None => Lexicon::new(),
    };
    let sampler = Sampler::new(m.sampler.clone(), tokenizer, lexicon, &corpus, Vec::new(), None)?;
    fs::create_dir_all(&m.out)?;
    let mut log = fs::File::create(m.out.join(if teacher_only { "teacher-log.jsonl" } else { "log.jsonl" }))?;
    let mut state = OfdState::<f32>::new(m.topology.clone(), m.seed)?;
    let fail = |step: u64, e: titan_core::Error| -> anyhow::Error {
        match e {
            titan_core::Error::NonFinite { op } => NumericFailure {
                step,
                detail: format!("produced by {op}"),
            }
            .into(),
            e => e.into(),
        }
    };
    if !teacher_only && m.warm_start_steps > 0 {
        let warm_seed = derive_seed(m.seed, 0x5741_524d, 0);
        state
            .warm_start_ta(&m.ofd.optimizer, m.warm_start_steps, |k| {
                sampler
                    .bundle(warm_seed, k)
                    .map(|b| b.masked_lm)
                    .map_err(|e| titan_core::Error::Invalid(e.to_string()))
            })
            .map_err(|e| fail(0, e))?;
    }
    for step in 0..m.steps {
        let bundle = sampler.bundle(m.seed, step)?;
        let record = if teacher_only {
            let t = &mut state.teacher;
            let r = multitask_step(&mut t.model, &mut t.optimizer, &m.ofd.optimizer, &bundle)
                .map_err(|e| fail(step + 1, e))?;
            DistillLogRecord {
                step: r.step,
                teacher_losses: r.losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                teacher_total: r.total,
                lr: r.lr,
                ta: None,
                students: Vec::new(),
            }
        } else {
            let r = ofd_step(&mut state, &m.ofd, &bundle).map_err(|e| fail(step + 1, e))?;
            DistillLogRecord {
                step: r.teacher.step,
                teacher_losses: r.teacher.losses.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
                teacher_total: r.teacher.total,
                lr: r.teacher.lr,
                ta: Some(member_log(&r.ta)),
                students: r.students.iter().map(member_log).collect(),
            }
        };
        let finite = record.teacher_total.is_finite()
            && record.ta.iter().chain(&record.students).all(|s| s.total.is_finite());
        ensure!(
            finite,
            NumericFailure {
                step: record.step,
                detail: "non-finite loss".into()
            }
        );
        if record.step % m.log_interval == 0 || record.step == m.steps {
            let line = serde_json::to_string(&record)?;
            writeln!(log, "{line}")?;
            if !quiet {
                eprintln!("{line}");
            }
        }
    }
    let teacher = m.out.join("teacher.e3tf");
    save(&state.teacher, "teacher", m, tokenizer, &teacher)?;
    if teacher_only {
        return Ok(DistillOutputs {
            teacher,
            ta: None,
            students: Vec::new(),
        });
    }
    let ta = m.out.join("ta.e3tf");
    save(&state.ta, "ta", m, tokenizer, &ta)?;
    let mut students = Vec::new();
    for (i, s) in state.students.iter_mut().enumerate() {
        if m.discard_ald {
            discard_ald_layer(s);
        }
        let p = m.out.join(format!("student-{i}.e3tf"));
        save(s, "student", m, tokenizer, &p)?;
        students.push(p);
    }
    Ok(DistillOutputs {
        teacher,
        ta: Some(ta),
        students,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{file_digest, parse, FLAG_AUX};
    use crate::formats::{save_vocab, write_corpus};
    use crate::synth::{synthetic_corpus, SynthOptions};

    fn manifest(dir: &Path, extra: &str) -> Result<(DistillManifest, Tokenizer)> {
        let docs = synthetic_corpus(&SynthOptions {
            target_bytes: 20_000,
            ..Default::default()
        });
        let tk = Tokenizer::train(docs.iter().map(|d| d.text.as_str()), 200).unwrap();
        write_corpus(&dir.join("c.jsonl"), &docs).unwrap();
        save_vocab(&dir.join("v.json"), &tk).unwrap();
        let small = "universal_layers=1\nuniversal_hidden=16\ntask_hidden=16\nmax_seq_len=24\nnum_genre_prompts=2";
        let prefixed = |p: &str| small.lines().map(|l| format!("{p}{l}\n")).collect::<String>();
        let text = format!(
            "corpus=c.jsonl\nvocab=v.json\nseed=9\nsteps=3\nbatch_size=1\nout=o\n{}{}{}{extra}",
            prefixed("teacher."),
            prefixed("ta.model."),
            prefixed("student.0.model.")
        );
        DistillManifest::from_kv(&Kv::parse(&text)?, dir)
    }

    #[test]
    fn three_checkpoints_and_teacher_isolation() {
        let dir = tempfile::tempdir().unwrap();
        let (m, tk) = manifest(dir.path(), "warm_start_steps=1\n").unwrap();
        let joint = run_distill(&m, &tk, false, true).unwrap();
        let joint_hash = file_digest(&joint.teacher).unwrap();
        assert_eq!(joint.students.len(), 1);
        let bytes = fs::read(&joint.students[0]).unwrap();
        let (_, entries, _) = parse(&bytes).unwrap();
        assert!(entries.iter().all(|e| e.flags & FLAG_AUX == 0));
        let alone = run_distill(&m, &tk, true, true).unwrap();
        assert_eq!(file_digest(&alone.teacher).unwrap(), joint_hash);
    }

    #[test]
    fn manifest_rejects_bad_topology() {
        let dir = tempfile::tempdir().unwrap();
        let err = manifest(dir.path(), "student.0.model.task_heads=1\n").unwrap_err().to_string();
        assert!(err.contains("head counts"), "{err}");
        let err = manifest(dir.path(), "ta.pairs=7:0\n").unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
        let err = manifest(dir.path(), "students=1\nstudent.1.model.task_heads=4\n").unwrap_err().to_string();
        assert!(err.contains("student.1"), "{err}");
        let (m, _) = manifest(dir.path(), "discard_ald=false\nstudents=2\n").unwrap();
        assert_eq!(m.topology.students.len(), 2);
    }
}
