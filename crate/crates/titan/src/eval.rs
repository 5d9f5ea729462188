//! The `eval` harness: zero-shot task files scored with each method.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use titan_core::model::Model;
use titan_core::tokenizer::{TokenId, Tokenizer, SEP};
use titan_core::zeroshot::{
    hungarian_assign, perplexity, restrained_generate, score_joint, score_nsp_true, score_pmi, score_x_given_y,
    score_y_given_x, top1_generate, Attention, LabelVerbalizer, Likelihood, ModelLm, Prediction, PromptTemplate,
    ScoringMethod,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    Classification,
    NspPair,
    ClozeMultiBlank,
    ExtractiveQa,
    GenerativeQa,
    Perplexity,
}

/// One line of a task file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    #[serde(rename = "type")]
    pub kind: TaskType,
    pub input: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    /// Template of the empty-input variant; defaults to the template with
    /// every field left empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub empty_template: Option<String>,
    /// A label string, a class index, or a list of labels for cloze tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Value>,
}

/// Built-in templates by id.
pub fn builtin_template(id: &str) -> Option<&'static str> {
    Some(match id {
        "sentiment" => "{text} It was {label}.",
        "topic" => "{text} This text is about {label}.",
        "nli" => "{premise} Question: {hypothesis}? Answer: {label}.",
        "nsp" => "{a}[SEP]{label}, {b}",
        "qa" => "{context} Question: {question} Answer:",
        "cloze" => "{text}",
        _ => return None,
    })
}

fn default_template(kind: TaskType) -> &'static str {
    match kind {
        TaskType::Classification => "topic",
        TaskType::NspPair => "nsp",
        TaskType::ClozeMultiBlank => "cloze",
        TaskType::ExtractiveQa | TaskType::GenerativeQa => "qa",
        TaskType::Perplexity => "{text}",
    }
}

fn template_text(rec: &TaskRecord) -> &str {
    let t = rec.template.as_deref().unwrap_or_else(|| default_template(rec.kind));
    builtin_template(t).unwrap_or(t)
}

pub fn read_tasks(path: &Path) -> Result<Vec<TaskRecord>> {
    let recs: Vec<TaskRecord> = crate::formats::read_jsonl(path)?;
    ensure!(!recs.is_empty(), "task file {} has no examples", path.display());
    let kind = recs[0].kind;
    for (i, r) in recs.iter().enumerate() {
        ensure!(r.kind == kind, "line {}: mixed task types in one file", i + 1);
    }
    Ok(recs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum MethodSel {
    Joint,
    YGivenX,
    XGivenY,
    Pmi,
    Nsp,
    All,
}

impl std::str::FromStr for MethodSel {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "joint" => MethodSel::Joint,
            "y-given-x" => MethodSel::YGivenX,
            "x-given-y" => MethodSel::XGivenY,
            "pmi" => MethodSel::Pmi,
            "nsp" => MethodSel::Nsp,
            "all" => MethodSel::All,
            _ => bail!("unknown method `{s}`; expected joint, y-given-x, x-given-y, pmi, nsp or all"),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionSel {
    Uni,
    Bi,
    Both,
}

impl std::str::FromStr for AttentionSel {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "uni" => AttentionSel::Uni,
            "bi" => AttentionSel::Bi,
            "both" => AttentionSel::Both,
            _ => bail!("unknown attention `{s}`; expected uni, bi or both"),
        })
    }
}

pub fn method_name(m: ScoringMethod) -> &'static str {
    match m {
        ScoringMethod::Joint => "joint",
        ScoringMethod::YGivenX => "y-given-x",
        ScoringMethod::XGivenY => "x-given-y",
        ScoringMethod::Pmi => "pmi",
        ScoringMethod::NspTrue => "nsp",
    }
}

fn attention_name(a: Attention) -> &'static str {
    match a {
        Attention::Unidirectional => "uni",
        Attention::Bidirectional => "bi",
    }
}

/// The (method, attention) rows to report for a task type.
pub fn plan(kind: TaskType, method: MethodSel, attention: AttentionSel) -> Result<Vec<(ScoringMethod, Attention)>> {
    let lm_methods: &[ScoringMethod] = match kind {
        TaskType::Classification | TaskType::NspPair => {
            &[ScoringMethod::Joint, ScoringMethod::YGivenX, ScoringMethod::XGivenY, ScoringMethod::Pmi]
        }
        TaskType::ClozeMultiBlank => &[ScoringMethod::Joint, ScoringMethod::YGivenX],
        TaskType::ExtractiveQa | TaskType::GenerativeQa | TaskType::Perplexity => {
            ensure!(
                matches!(method, MethodSel::All | MethodSel::Joint),
                "task type {kind:?} has no scoring-method choice"
            );
            return Ok(vec![(ScoringMethod::Joint, Attention::Unidirectional)]);
        }
    };
    let attns: &[Attention] = match attention {
        AttentionSel::Uni => &[Attention::Unidirectional],
        AttentionSel::Bi => &[Attention::Bidirectional],
        AttentionSel::Both => &[Attention::Unidirectional, Attention::Bidirectional],
    };
    let chosen: Vec<ScoringMethod> = match method {
        MethodSel::All => {
            let mut v = lm_methods.to_vec();
            if kind == TaskType::NspPair {
                v.push(ScoringMethod::NspTrue);
            }
            v
        }
        MethodSel::Nsp => {
            ensure!(kind == TaskType::NspPair, "method nsp needs an nsp-pair task file, got {kind:?}");
            vec![ScoringMethod::NspTrue]
        }
        m => {
            let s = match m {
                MethodSel::Joint => ScoringMethod::Joint,
                MethodSel::YGivenX => ScoringMethod::YGivenX,
                MethodSel::XGivenY => ScoringMethod::XGivenY,
                _ => ScoringMethod::Pmi,
            };
            ensure!(lm_methods.contains(&s), "method {} does not apply to {kind:?}", method_name(s));
            vec![s]
        }
    };
    let mut rows = Vec::new();
    for m in chosen {
        if m == ScoringMethod::NspTrue {
            rows.push((m, Attention::Bidirectional));
        } else {
            rows.extend(attns.iter().map(|&a| (m, a)));
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleResult {
    pub index: usize,
    pub method: String,
    pub attention: String,
    pub prediction: Value,
    pub scores: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub method: String,
    pub attention: String,
    pub n: usize,
    /// Fraction correct over examples with an answer; mean perplexity for
    /// perplexity tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_perplexity: Option<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub beam_width: usize,
    /// Generation length; defaults to the 95th-percentile answer length.
    pub max_len: Option<usize>,
}

fn encode_fields(rec: &TaskRecord, tk: &Tokenizer) -> BTreeMap<String, Vec<TokenId>> {
    rec.input.iter().map(|(k, v)| (k.clone(), tk.encode(v))).collect()
}

fn build_template(rec: &TaskRecord, tk: &Tokenizer) -> Result<PromptTemplate> {
    let text = template_text(rec);
    let t = PromptTemplate::parse(text, tk)?;
    let empty = match &rec.empty_template {
        Some(e) => builtin_template(e).unwrap_or(e).to_string(),
        None => text.to_string(),
    };
    Ok(t.parse_empty_input(&empty, tk)?)
}

fn answer_index(rec: &TaskRecord, labels: &[String]) -> Result<Option<usize>> {
    match &rec.answer {
        None => Ok(None),
        Some(Value::Number(n)) => {
            let i = n.as_u64().ok_or_else(|| anyhow!("answer must be a label or a class index"))? as usize;
            ensure!(i < labels.len(), "answer index {i} out of range");
            Ok(Some(i))
        }
        Some(Value::String(s)) => labels
            .iter()
            .position(|l| l == s)
            .map(Some)
            .ok_or_else(|| anyhow!("answer `{s}` is not among the labels")),
        Some(v) => bail!("unsupported answer {v}"),
    }
}

fn labels_of(rec: &TaskRecord) -> Result<&[String]> {
    let l = rec.labels.as_deref().ok_or_else(|| anyhow!("{:?} examples need `labels`", rec.kind))?;
    ensure!(!l.is_empty(), "`labels` is empty");
    Ok(l)
}

fn score(
    model: &Model<f32>,
    m: ScoringMethod,
    a: Attention,
    template: &PromptTemplate,
    fields: &BTreeMap<String, Vec<TokenId>>,
    verbalizer: &LabelVerbalizer,
) -> Result<Prediction> {
    let lm = ModelLm::new(model);
    m.validate(a)?;
    let like = match a {
        Attention::Unidirectional => Likelihood::Uni(&lm),
        Attention::Bidirectional => Likelihood::Bi(&lm),
    };
    Ok(match m {
        ScoringMethod::Joint => score_joint(&like, template, fields, verbalizer)?,
        ScoringMethod::YGivenX => score_y_given_x(&like, template, fields, verbalizer)?,
        ScoringMethod::XGivenY => score_x_given_y(&like, template, fields, verbalizer)?,
        ScoringMethod::Pmi => score_pmi(&like, template, fields, verbalizer)?,
        ScoringMethod::NspTrue => score_nsp_true(&lm, template, fields, verbalizer)?,
    })
}

const BLANK: &str = "___";

/// Per-blank templates: blank `b` becomes the label slot, the others stay
/// as literal text.
fn cloze_templates(text: &str, tk: &Tokenizer) -> Result<Vec<PromptTemplate>> {
    let parts: Vec<&str> = text.split(BLANK).collect();
    ensure!(parts.len() >= 2, "cloze text has no `{BLANK}` blank");
    let esc = |s: &str| s.replace(['{', '}'], "");
    (0..parts.len() - 1)
        .map(|b| {
            let mut t = String::new();
            for (i, p) in parts.iter().enumerate() {
                t.push_str(&esc(p));
                if i + 1 < parts.len() {
                    t.push_str(if i == b { "{label}" } else { BLANK });
                }
            }
            let tpl = PromptTemplate::parse(&t, tk)?;
            Ok(tpl.parse_empty_input(&t, tk)?)
        })
        .collect()
}

fn percentile_95(mut lens: Vec<usize>) -> Option<usize> {
    if lens.is_empty() {
        return None;
    }
    lens.sort_unstable();
    let rank = ((0.95 * lens.len() as f64).ceil() as usize).clamp(1, lens.len());
    Some(lens[rank - 1])
}

/// Renders a template without a label slot.
fn render_prompt(text: &str, input: &BTreeMap<String, String>) -> Result<String> {
    let mut out = String::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let close = rest[open..].find('}').ok_or_else(|| anyhow!("unclosed `{{` in template"))? + open;
        out.push_str(&rest[..open]);
        let name = rest[open + 1..close].trim();
        let v = input.get(name).ok_or_else(|| anyhow!("template field `{name}` not supplied"))?;
        out.push_str(v);
        rest = &rest[close + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn answer_text(rec: &TaskRecord) -> Option<String> {
    match &rec.answer {
        Some(Value::String(s)) => Some(s.trim().to_string()),
        _ => None,
    }
}

pub struct EvalReport {
    pub results: Vec<ExampleResult>,
    pub aggregates: Vec<Aggregate>,
}

pub fn evaluate(
    model: &Model<f32>,
    tk: &Tokenizer,
    tasks: &[TaskRecord],
    method: MethodSel,
    attention: AttentionSel,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    ensure!(!tasks.is_empty(), "task file has no examples");
    let kind = tasks[0].kind;
    let rows = plan(kind, method, attention)?;
    let mut results = Vec::new();
    let mut aggregates = Vec::new();
    let gen_len = match kind {
        TaskType::ExtractiveQa | TaskType::GenerativeQa => {
            let lens = tasks.iter().filter_map(answer_text).map(|a| tk.encode(&format!(" {a}")).len()).collect();
            Some(
                opts.max_len
                    .or_else(|| percentile_95(lens))
                    .ok_or_else(|| anyhow!("no answers to size generation; pass --max-len"))?
                    .max(1),
            )
        }
        _ => None,
    };
    for &(m, a) in &rows {
        let mut correct = 0usize;
        let mut answered = 0usize;
        let mut ppl_sum = 0.0;
        let start = results.len();
        for (index, rec) in tasks.iter().enumerate() {
            let ctx = || format!("example {}", index + 1);
            let (prediction, scores, ok) = match kind {
                TaskType::Classification | TaskType::NspPair => {
                    let labels = labels_of(rec).with_context(ctx)?;
                    let verbalizer = LabelVerbalizer::from_labels(labels.iter().map(|s| s.as_str()), tk)?;
                    let template = build_template(rec, tk).with_context(ctx)?;
                    let p = score(model, m, a, &template, &encode_fields(rec, tk), &verbalizer).with_context(ctx)?;
                    let ok = answer_index(rec, labels)?.map(|g| g == p.class);
                    (Value::from(labels[p.class].clone()), p.scores, ok)
                }
                TaskType::ClozeMultiBlank => {
                    let labels = labels_of(rec).with_context(ctx)?;
                    let text = rec.input.get("text").ok_or_else(|| anyhow!("cloze input needs `text`")).with_context(ctx)?;
                    let verbalizer = LabelVerbalizer::from_labels(labels.iter().map(|s| s.as_str()), tk)?;
                    let mut matrix = Vec::new();
                    for t in cloze_templates(text, tk).with_context(ctx)? {
                        matrix.push(score(model, m, a, &t, &BTreeMap::new(), &verbalizer)?.scores);
                    }
                    let assign = hungarian_assign(&matrix).with_context(ctx)?;
                    let picked: Vec<String> = assign.iter().map(|&c| labels[c].clone()).collect();
                    let ok = match &rec.answer {
                        Some(Value::Array(gold)) => {
                            Some(gold.iter().map(|g| g.as_str().unwrap_or_default()).eq(picked.iter().map(|s| s.as_str())))
                        }
                        None => None,
                        Some(_) => bail!("example {}: cloze answer must be a list of labels", index + 1),
                    };
                    (Value::from(picked), matrix.concat(), ok)
                }
                TaskType::ExtractiveQa | TaskType::GenerativeQa => {
                    let lm = ModelLm::new(model);
                    let prompt = tk.encode(&render_prompt(template_text(rec), &rec.input).with_context(ctx)?);
                    let max_len = gen_len.unwrap_or(1);
                    let (tokens, s) = if kind == TaskType::ExtractiveQa {
                        let context = rec.input.get("context").ok_or_else(|| anyhow!("extractive-qa input needs `context`"))?;
                        let ctx_tokens = tk.encode(&format!(" {context}"));
                        let width = if opts.beam_width == 0 { 8 } else { opts.beam_width };
                        let r = restrained_generate(&lm, None, &prompt, &ctx_tokens, width, max_len, Some(SEP))
                            .with_context(ctx)?;
                        (r.tokens, vec![r.score])
                    } else {
                        (top1_generate(&lm, None, &prompt, max_len, &[SEP]).with_context(ctx)?, Vec::new())
                    };
                    let text = tk.decode(&tokens).trim().to_string();
                    let ok = answer_text(rec).map(|g| g == text);
                    (Value::from(text), s, ok)
                }
                TaskType::Perplexity => {
                    let lm = ModelLm::new(model);
                    let text = rec.input.get("text").ok_or_else(|| anyhow!("perplexity input needs `text`"))?;
                    let p = perplexity(&lm, None, &tk.encode(text)).with_context(ctx)?;
                    ppl_sum += p;
                    (Value::from(p), vec![p], None)
                }
            };
            if let Some(ok) = ok {
                answered += 1;
                correct += ok as usize;
            }
            results.push(ExampleResult {
                index,
                method: method_name(m).to_string(),
                attention: attention_name(a).to_string(),
                prediction,
                scores,
                correct: ok,
            });
        }
        let n = results.len() - start;
        aggregates.push(Aggregate {
            method: method_name(m).to_string(),
            attention: attention_name(a).to_string(),
            n,
            accuracy: (answered > 0).then(|| correct as f64 / answered as f64),
            mean_perplexity: (kind == TaskType::Perplexity).then(|| ppl_sum / n as f64),
        });
    }
    Ok(EvalReport { results, aggregates })
}

/// Plain-text comparison table, one row per method and attention.
pub fn render_table(aggs: &[Aggregate]) -> String {
    let mut s = format!("{:<10} {:<9} {:>5} {:>9}\n", "method", "attention", "n", "accuracy");
    for a in aggs {
        let v = match (a.accuracy, a.mean_perplexity) {
            (Some(x), _) => format!("{x:.4}"),
            (None, Some(p)) => format!("ppl {p:.3}"),
            _ => "-".to_string(),
        };
        s.push_str(&format!("{:<10} {:<9} {:>5} {:>9}\n", a.method, a.attention, a.n, v));
    }
    s
}
