use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::model::tests::tiny;
use crate::model::nlu_forward;
use crate::rng::rng_from_seed;
use crate::tasks::{mask_knowledge_spans, AdversarialExample, AdversarialLabel, Lexicon};
use crate::tensor::{check_gradient, softmax_values};
use crate::tokenizer::{TokenId, NUM_SPECIAL};

fn random_maps(seed: u64, h: usize, s: usize, k: usize) -> Tensor<f64> {
    let mut rng = rng_from_seed(seed);
    let mut data = Vec::new();
    for _ in 0..h * s {
        let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
        data.extend(softmax_values(&logits));
    }
    Tensor::from_f64([h, s, k], &data).unwrap()
}

#[test]
fn attention_kl_examples() {
    let a = random_maps(1, 2, 3, 3);
    assert!(attention_kl_value(&a, &a).unwrap().abs() < 1e-12);
    let one_hot = Tensor::<f64>::from_f64([1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
    let uniform = Tensor::<f64>::from_f64([1, 2, 2], &[0.5; 4]).unwrap();
    let v = attention_kl_value(&one_hot, &uniform).unwrap();
    assert!((v - core::f64::consts::LN_2).abs() < 1e-12);
    let b = random_maps(2, 3, 2, 3);
    assert!(attention_kl_value(&a, &b).is_err());
}

#[test]
fn attention_kl_matches_row_oracle() {
    for seed in 0..10 {
        let (h, s) = (3, 5);
        let p = random_maps(seed, h, s, s);
        let q = random_maps(seed + 100, h, s, s);
        let (pv, qv) = (p.to_f64_vec(), q.to_f64_vec());
        let mut oracle = 0.0;
        for r in 0..h * s {
            let mut kl = 0.0;
            for j in 0..s {
                let (a, b) = (pv[r * s + j], qv[r * s + j]);
                kl += a * (a / b).ln();
            }
            oracle += kl;
        }
        oracle /= (h * s) as f64;
        let v = attention_kl_value(&p, &q).unwrap();
        assert!((v - oracle).abs() < 1e-6);
        assert!(v >= 0.0);
    }
}

#[test]
fn attention_kl_gradient_reaches_target_only() {
    let source = random_maps(5, 2, 3, 3);
    let logits = Tensor::<f64>::from_f64([2, 3, 3], &(0..18).map(|i| (i as f64 * 0.7).sin()).collect::<Vec<_>>())
        .unwrap();
    let err = check_gradient(
        |t, x| {
            let q = t.softmax(x, 2)?;
            attention_kl(t, &source, q)
        },
        &logits,
    )
    .unwrap();
    assert!(err < 1e-2, "{err}");
    let mut tape = Tape::new();
    let x = tape.variable(logits.clone());
    let q = tape.softmax(x, 2).unwrap();
    let kl = attention_kl(&mut tape, &source, q).unwrap();
    let grads = tape.backward(kl).unwrap();
    assert!(grads.values(x).iter().any(|g| *g != 0.0));
}

fn ordinary(i: usize) -> TokenId {
    (NUM_SPECIAL + i) as TokenId
}

fn batch(step: u64, n: usize, len: usize) -> Vec<MaskedLmExample> {
    let mut rng = rng_from_seed(step ^ 0xd15);
    (0..n)
        .map(|k| {
            let start = rng.gen_range(0..6);
            let tokens: Vec<TokenId> = (0..len).map(|i| ordinary((start + i * 2) % 12)).collect();
            mask_knowledge_spans(&tokens, &Lexicon::new(), 0.2, step * 31 + k as u64).unwrap()
        })
        .collect()
}

fn teacher_config() -> ModelConfig {
    ModelConfig {
        universal_layers: 2,
        ..tiny(40)
    }
}

fn student_config() -> ModelConfig {
    ModelConfig {
        universal_hidden: 8,
        ..tiny(40)
    }
}

fn topology(students: usize) -> DistillTopology {
    DistillTopology::new(teacher_config(), tiny(40), vec![student_config(); students]).unwrap()
}

fn opt() -> OfdConfig {
    OfdConfig {
        optimizer: OptimizerConfig {
            lr: 3e-3,
            warmup_steps: 5,
            total_steps: 1000,
            ..OptimizerConfig::default()
        },
        ..OfdConfig::default()
    }
}

#[test]
fn topology_rejects_head_mismatch() {
    let bad = ModelConfig {
        task_heads: 4,
        ..student_config()
    };
    assert!(DistillTopology::new(teacher_config(), tiny(40), vec![bad]).is_err());
    let t = topology(2);
    assert_eq!(t.ta_pairs, vec![LayerPair { source: 2, target: 1 }]);
    assert_eq!(t.student_pairs[1], vec![LayerPair { source: 1, target: 1 }]);
    assert!(DistillTopology::new(teacher_config(), tiny(40), vec![]).is_err());
}

#[test]
fn full_size_ta_is_expressible() {
    let ta = ModelConfig {
        universal_layers: 24,
        universal_hidden: 1024,
        universal_heads: 16,
        ..ModelConfig::titan_reference()
    };
    ta.validate().unwrap();
    assert_eq!(ta.universal_layers, 24);
}

#[test]
fn attach_adds_one_layer_above_the_match_point() {
    let mut s: StudentState<f64> = StudentState::new(student_config(), 3).unwrap();
    let before_params = s.model.params.len();
    let tokens = [ordinary(1), ordinary(2), ordinary(3)];
    let matched = |m: &Model<f64>| {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &m.params);
        let out = nlu_forward(&mut g, &m.config, &tokens).unwrap();
        (
            g.value(out.matched_attention()).clone(),
            g.value(out.matched_hidden()).clone(),
            g.value(out.top()).clone(),
        )
    };
    let pre = matched(&s.model);
    attach_ald_layer(&mut s, 9).unwrap();
    assert_eq!(s.model.config.auxiliary_layers, 1);
    assert!(s.model.params.len() > before_params);
    s.model.params.validate(&s.model.config).unwrap();
    assert!(attach_ald_layer(&mut s, 9).is_err());
    let post = matched(&s.model);
    assert_eq!(pre.0, post.0);
    assert_eq!(pre.1, post.1);
    assert_ne!(pre.2, post.2);

    discard_ald_layer(&mut s);
    assert!(s.model.params.names().all(|n| !n.starts_with(AUX_PREFIX)));
    assert_eq!(s.model.params.len(), before_params);
    let after = matched(&s.model);
    assert_eq!(after.0, post.0);
    assert_eq!(after.1, post.1);
    assert_eq!(after.2, post.1);
}

fn top_layer_grad_norms(grads: &BTreeMap<String, Vec<f64>>, config: &ModelConfig) -> Vec<(String, f64)> {
    let prefix = alloc::format!("nlu.layer{}.", config.task_layers - 1);
    grads
        .iter()
        .filter(|(n, _)| n.starts_with(&prefix))
        .map(|(n, g)| (n.clone(), g.iter().map(|x| x * x).sum::<f64>().sqrt()))
        .collect()
}

#[test]
fn auxiliary_layer_trains_the_top_ffn() {
    let teacher: Model = Model::new(tiny(40), 1).unwrap();
    let b = batch(0, 2, 8);
    let maps = attention_maps(&teacher, &b).unwrap();
    let pairs = [LayerPair { source: 1, target: 1 }];

    let plain: StudentState = StudentState::new(student_config(), 2).unwrap();
    let kl_only = DistillWeights { kl: 1.0, lm: 0.0 };
    let pass = distill_gradients(&plain.model, &b, &maps, &pairs, kl_only).unwrap();
    let norms = top_layer_grad_norms(&pass.grads, &plain.model.config);
    for (name, n) in &norms {
        if name.contains(".ffn.") || name.contains(".ln2.") {
            assert_eq!(*n, 0.0, "{name}");
        }
    }
    assert!(norms.iter().any(|(n, v)| n.contains(".attn.") && *v > 0.0));

    let mut ald = plain.clone();
    attach_ald_layer(&mut ald, 4).unwrap();
    let pass = distill_gradients(&ald.model, &b, &maps, &pairs, DistillWeights::default()).unwrap();
    let norms = top_layer_grad_norms(&pass.grads, &ald.model.config);
    assert!(norms.len() >= 10);
    for (name, n) in &norms {
        assert!(*n > 0.0, "{name}");
    }
}

#[test]
fn teacher_is_isolated_from_distillation() {
    let seed = 17;
    let mut joint: OfdState = OfdState::new(topology(2), seed).unwrap();
    let mut alone: StudentState = StudentState::new(teacher_config(), seed).unwrap();
    let cfg = opt();
    for step in 0..15 {
        let bundle = TaskBundle {
            masked_lm: batch(step, 2, 8),
            ..TaskBundle::default()
        };
        ofd_step(&mut joint, &cfg, &bundle).unwrap();
        multitask_step(&mut alone.model, &mut alone.optimizer, &cfg.optimizer, &bundle).unwrap();
    }
    assert_eq!(joint.teacher, alone);
}

#[test]
fn lockstep_counters_and_phase_checks() {
    let mut st: OfdState = OfdState::new(topology(2), 5).unwrap();
    let cfg = opt();
    st.warm_start_ta(&cfg.optimizer, 3, |s| Ok(batch(s + 50, 2, 8))).unwrap();
    let bundle = TaskBundle {
        masked_lm: batch(0, 2, 8),
        ..TaskBundle::default()
    };
    ofd_step(&mut st, &cfg, &bundle).unwrap();
    assert_eq!(st.teacher.step(), 1);
    assert_eq!(st.ta.step(), 4);
    assert!(st.students.iter().all(|s| s.step() == 1));
    assert!(st
        .warm_start_ta(&cfg.optimizer, 1, |s| Ok(batch(s, 1, 8)))
        .is_err());
    st.students[1].optimizer.step += 1;
    assert!(ofd_step(&mut st, &cfg, &bundle).is_err());
    let mut fresh: OfdState = OfdState::new(topology(1), 5).unwrap();
    assert!(ofd_step(&mut fresh, &cfg, &TaskBundle::default()).is_err());
}

#[test]
fn adding_a_student_leaves_others_unchanged() {
    let cfg = opt();
    let mut one: OfdState = OfdState::new(topology(1), 8).unwrap();
    let mut two: OfdState = OfdState::new(topology(2), 8).unwrap();
    for step in 0..5 {
        let bundle = TaskBundle {
            masked_lm: batch(step, 2, 8),
            ..TaskBundle::default()
        };
        ofd_step(&mut one, &cfg, &bundle).unwrap();
        ofd_step(&mut two, &cfg, &bundle).unwrap();
    }
    assert_eq!(one.students[0], two.students[0]);
    assert_eq!(one.ta, two.ta);
}

#[test]
fn distillation_reduces_student_attention_kl() {
    let cfg = opt();
    let mut st: OfdState = OfdState::new(topology(1), 21).unwrap();
    // A warmed-up TA has attention worth transferring; at initialisation every
    // map is close to uniform.
    let warm = OptimizerConfig { lr: 1e-2, ..cfg.optimizer };
    st.warm_start_ta(&warm, 300, |s| Ok(batch(s + 5000, 4, 8))).unwrap();
    let probe = batch(9999, 4, 8);
    let pairs = st.topology.student_pairs[0].clone();
    let before = measure_attention_kl(&st.ta.model, &st.students[0].model, &pairs, &probe).unwrap();
    for step in 0..300 {
        let bundle = TaskBundle {
            masked_lm: batch(step, 2, 8),
            ..TaskBundle::default()
        };
        ofd_step(&mut st, &cfg, &bundle).unwrap();
    }
    let after = measure_attention_kl(&st.ta.model, &st.students[0].model, &pairs, &probe).unwrap();
    assert!(after < before, "{before} -> {after}");
}

#[test]
fn ta_warm_start() {
    let cfg = opt().optimizer;
    let mut ta: StudentState = StudentState::new(tiny(40), 3).unwrap();
    let init = ta.clone();
    assert!(pretrain_ta(&mut ta, &cfg, 0, |_| Ok(batch(0, 1, 8))).unwrap().is_empty());
    assert_eq!(ta, init);
    let probe = batch(777, 8, 8);
    let loss = |m: &Model| {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &m.params);
        let v = crate::tasks::masked_lm_loss(&mut g, &m.config, &probe).unwrap();
        g.value(v).item()
    };
    let before = loss(&ta.model);
    pretrain_ta(&mut ta, &cfg, 200, |s| Ok(batch(s, 2, 8))).unwrap();
    assert_eq!(ta.step(), 200);
    assert!(loss(&ta.model) < before);
}

#[test]
fn fine_tuning_after_discard_reduces_loss() {
    let mut s: StudentState = StudentState::new(student_config(), 6).unwrap();
    attach_ald_layer(&mut s, 1).unwrap();
    discard_ald_layer(&mut s);
    let examples: Vec<AdversarialExample> = (0..8)
        .map(|i| {
            let label = if i % 2 == 0 { AdversarialLabel::Original } else { AdversarialLabel::Generated };
            let first = if i % 2 == 0 { ordinary(1) } else { ordinary(2) };
            AdversarialExample {
                tokens: vec![first, ordinary(3 + i % 3), ordinary(7)],
                label,
                source_doc_id: "d".into(),
                prefix_sentence_count: 0,
            }
        })
        .collect();
    let bundle = TaskBundle {
        adversarial: examples,
        ..TaskBundle::default()
    };
    let cfg = opt().optimizer;
    let mut losses = Vec::new();
    for _ in 0..60 {
        losses.push(multitask_step(&mut s.model, &mut s.optimizer, &cfg, &bundle).unwrap().total);
    }
    assert!(losses[59] < 0.5 * losses[0], "{} -> {}", losses[0], losses[59]);
}

proptest! {
    #[test]
    fn attention_kl_nonnegative_and_zero_on_equal(seed in any::<u64>(), h in 1usize..4, s in 1usize..5) {
        let p = random_maps(seed, h, s, s);
        let q = random_maps(seed.wrapping_add(1), h, s, s);
        prop_assert!(attention_kl_value(&p, &q).unwrap() >= -1e-12);
        prop_assert!(attention_kl_value(&p, &p).unwrap().abs() < 1e-12);
    }
}
