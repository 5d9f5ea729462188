use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use proptest::prelude::*;

use super::*;
use crate::model::tests::{randomized, tiny};
use crate::model::{
    check_param_gradients, Graph, Model, ModelConfig, ModelMemory, ModelParams, SoftPrompt,
};
use crate::tensor::{log_softmax, Tape, Tensor};
use crate::tokenizer::{TokenId, Tokenizer, MASK, NUM_SPECIAL, SEP};

const GRAD_TOL: f64 = 1e-2;

fn ordinary(i: usize) -> TokenId {
    (NUM_SPECIAL + i) as TokenId
}

fn tokenizer() -> Tokenizer {
    let corpus = [
        "Lampard said on the 4th that Chelsea will win the UCL.",
        "Sports news about football and the weather in winter.",
        "A positive story with keywords and topics.",
        "Positive, Negative, Neutral. About 0 1 2 3 4 5 6 7 8 9 words.",
    ];
    Tokenizer::train(corpus, 200).unwrap()
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for first in 0..n {
        for rest in permutations(n - 1) {
            let mut p = vec![first];
            p.extend(rest.into_iter().map(|x| if x >= first { x + 1 } else { x }));
            out.push(p);
        }
    }
    out
}

#[test]
fn reorder_label_space_sizes() {
    assert_eq!(reorder_class_count(1), 1);
    assert_eq!(reorder_class_count(3), 9);
    assert_eq!(reorder_class_count(4), 33);
}

#[test]
fn reorder_labels_enumerate_canonically_for_three_segments() {
    // Independent enumeration: n ascending, permutations in lexicographic order.
    let mut expected = Vec::new();
    for n in 1..=3 {
        let mut perms = permutations(n);
        perms.sort();
        expected.extend(perms);
    }
    assert_eq!(expected.len(), 9);
    for (label, perm) in expected.iter().enumerate() {
        assert_eq!(encode_reorder_label(perm).unwrap(), label);
    }
    assert_eq!(encode_reorder_label(&[1, 0]).unwrap(), 2);
}

#[test]
fn reorder_labels_round_trip_exhaustively() {
    let mut seen = BTreeSet::new();
    for n in 1..=4 {
        for perm in permutations(n) {
            let label = encode_reorder_label(&perm).unwrap();
            assert!(label < reorder_class_count(4));
            assert_eq!(decode_reorder_label(label), perm);
            assert!(seen.insert(label));
        }
    }
    assert_eq!(seen.len(), 33);
    assert!(encode_reorder_label(&[0, 0]).is_err());
}

#[test]
fn reorder_example_permutes_whole_sentences() {
    let sentences: Vec<Vec<TokenId>> = (0..5)
        .map(|s| (0..3).map(|k| ordinary(3 * s + k)).collect())
        .collect();
    let original: Vec<TokenId> = sentences.concat();
    let mut counts = [0usize; 4];
    for seed in 0..200 {
        let ex = build_sentence_reorder_example(&sentences, 3, seed).unwrap();
        let n = ex.permutation.len();
        assert!((1..=3).contains(&n));
        counts[n] += 1;
        assert!(ex.label < 9);
        assert_eq!(decode_reorder_label(ex.label), ex.permutation);
        assert!(ex.segment_boundaries.iter().all(|b| b % 3 == 0));
        // Undo the permutation and recover the paragraph.
        let mut segs: Vec<&[TokenId]> = vec![&[]; n];
        for (pos, &orig) in ex.permutation.iter().enumerate() {
            let start = ex.segment_boundaries[pos];
            let end = ex.segment_boundaries.get(pos + 1).copied().unwrap_or(ex.permuted_tokens.len());
            segs[orig] = &ex.permuted_tokens[start..end];
        }
        assert_eq!(segs.concat(), original);
        if n == 1 {
            assert_eq!(ex.label, 0);
        }
    }
    assert!(counts[1..].iter().all(|&c| c > 30));
    assert!(build_sentence_reorder_example(&sentences, 0, 1).is_err());
}

#[test]
fn knowledge_masking_rate_on_long_text() {
    let tokens: Vec<TokenId> = (0..1000).map(|i| ordinary(i % 40)).collect();
    let ex = mask_knowledge_spans(&tokens, &Lexicon::new(), 0.15, 11).unwrap();
    let frac = ex.masked_positions.len() as f64 / 1000.0;
    assert!((0.12..=0.18).contains(&frac), "{frac}");
    assert_eq!(ex.restored(), tokens);
    assert!(ex.masked_positions.windows(2).all(|w| w[0] < w[1]));
    assert!(ex.masked_positions.iter().all(|&p| ex.tokens[p] == MASK));
}

#[test]
fn lexicon_spans_are_masked_whole() {
    let mut tokens: Vec<TokenId> = (0..20).map(|i| ordinary(i + 10)).collect();
    tokens[3] = ordinary(0);
    tokens[4] = ordinary(1);
    tokens[5] = ordinary(2);
    let mut lex = Lexicon::new();
    lex.insert(vec![ordinary(0), ordinary(1), ordinary(2)]);
    // Budget of 3 is spent entirely on the span.
    let ex = mask_knowledge_spans(&tokens, &lex, 0.15, 3).unwrap();
    assert_eq!(ex.masked_positions, vec![3, 4, 5]);
    assert_eq!(ex.targets, vec![ordinary(0), ordinary(1), ordinary(2)]);
}

#[test]
fn lexicon_matches_leftmost_longest() {
    let mut lex = Lexicon::new();
    lex.insert(vec![ordinary(0)]);
    lex.insert(vec![ordinary(0), ordinary(1)]);
    let m = lex.matches(&[ordinary(0), ordinary(1), ordinary(0), ordinary(5)]);
    assert_eq!(m, vec![(0, 2), (2, 1)]);
    let tk = tokenizer();
    let lex = Lexicon::from_surface_forms(["Chelsea", "  "], &tk);
    assert_eq!(lex.len(), 2);
    assert!(!lex.matches(&tk.encode("Lampard said Chelsea")).is_empty());
}

#[test]
fn masking_rejects_degenerate_inputs() {
    let lex = Lexicon::new();
    assert!(mask_knowledge_spans(&[ordinary(0)], &lex, 0.15, 0).is_err());
    assert!(mask_knowledge_spans(&[ordinary(0), ordinary(1)], &lex, 0.0, 0).is_err());
    assert!(mask_knowledge_spans(&[ordinary(0), ordinary(1)], &lex, 1.0, 0).is_err());
    let ex = mask_knowledge_spans(&[ordinary(0), ordinary(1)], &lex, 0.01, 0).unwrap();
    assert_eq!(ex.masked_positions.len(), 1);
}

fn store(docs: usize, sentences: usize) -> DocStore {
    let mut s = DocStore::new();
    for d in 0..docs {
        let sents = (0..sentences)
            .map(|k| vec![ordinary(d), ordinary(20 + k)])
            .collect();
        s.push(alloc::format!("doc{d}"), sents);
    }
    s
}

#[test]
fn distance_classes_are_uniform() {
    let s = store(6, 8);
    let mut counts = [0usize; 3];
    for seed in 0..10_000 {
        let ex = build_sentence_distance_example(&s, seed).unwrap();
        counts[ex.label()] += 1;
        match ex.class {
            DistanceClass::CrossDocument => assert_ne!(ex.doc_a, ex.doc_b),
            _ => assert_eq!(ex.doc_a, ex.doc_b),
        }
    }
    for c in counts {
        let f = c as f64 / 10_000.0;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "{counts:?}");
    }
}

#[test]
fn distance_pairs_conform_to_their_class() {
    let s = store(3, 6);
    for seed in 0..500 {
        let ex = build_sentence_distance_example(&s, seed).unwrap();
        let ka = ex.tokens_a[1] - ordinary(20);
        let kb = ex.tokens_b[1] - ordinary(20);
        match ex.class {
            DistanceClass::Adjacent => assert_eq!(kb, ka + 1),
            DistanceClass::SameDocument => assert!(kb >= ka + 2),
            DistanceClass::CrossDocument => assert_ne!(ex.tokens_a[0], ex.tokens_b[0]),
        }
    }
}

#[test]
fn small_store_falls_back_to_feasible_classes() {
    let s = store(1, 2);
    for seed in 0..100 {
        assert_eq!(build_sentence_distance_example(&s, seed).unwrap().class, DistanceClass::Adjacent);
    }
    assert!(build_sentence_distance_example(&store(1, 1), 0).is_err());
    assert!(build_sentence_distance_example(&DocStore::new(), 0).is_err());
}

fn triple() -> TokenTriple {
    TokenTriple {
        head: vec![ordinary(0), ordinary(1)],
        relation: vec![ordinary(2), ordinary(3)],
        tail: vec![ordinary(4)],
    }
}

#[test]
fn uktp_masks_relation_or_sentence() {
    let t = triple();
    let sentence: Vec<TokenId> = (0..20).map(|i| ordinary(10 + i)).collect();
    let mut relation = 0;
    for seed in 0..10_000 {
        let ex = build_uktp_example(&t, &sentence, seed).unwrap();
        assert_eq!(ex.tokens[ex.sentence_start() - 1], SEP);
        let rel = ex.relation_range();
        match ex.mask_site {
            MaskSite::Relation => {
                relation += 1;
                assert_eq!(ex.masked_positions, rel.collect::<Vec<_>>());
            }
            MaskSite::Sentence => {
                assert_eq!(ex.masked_positions.len(), 3);
                assert!(ex.masked_positions.iter().all(|&p| p >= ex.sentence_start()));
                assert_eq!(&ex.tokens[rel], &t.relation[..]);
            }
        }
    }
    let f = relation as f64 / 10_000.0;
    assert!((f - 0.5).abs() < 0.02, "{f}");
    let empty = TokenTriple {
        relation: vec![],
        ..triple()
    };
    assert!(build_uktp_example(&empty, &sentence, 0).is_err());
}

fn news_attrs() -> AttributeSet {
    AttributeSet {
        genre: Some(0),
        topic: Some("Sports".into()),
        keywords: Some(vec!["Lampard".into(), "Chelsea".into(), "UCL".into()]),
        sentiment: Some(Sentiment::Positive),
        length: Some(85),
    }
}

#[test]
fn template_matches_the_worked_example() {
    let tk = tokenizer();
    let p = format_controllable_input(&news_attrs(), &tk, 8, 0.0, 5).unwrap();
    assert_eq!(
        p.text,
        "[t] Sports [/t] [k] Lampard, Chelsea, UCL [/k] [senti] Positive [/senti] [w] About 85 words [/w]"
    );
    assert_eq!(p.soft, Some(SoftPrompt { genre: 0, count: 8 }));
    assert_eq!(p.tokens, tk.encode(&p.text));
    assert_eq!(tk.decode(&p.tokens), p.text);
}

#[test]
fn empty_or_fully_dropped_attributes_give_empty_prompts() {
    let tk = tokenizer();
    let p = format_controllable_input(&AttributeSet::default(), &tk, 4, 0.0, 1).unwrap();
    assert_eq!(p, ControlPrompt::default());
    for seed in 0..20 {
        let p = format_controllable_input(&news_attrs(), &tk, 4, 1.0, seed).unwrap();
        assert_eq!(p, ControlPrompt::default());
    }
    assert!(format_controllable_input(&news_attrs(), &tk, 64, 0.0, 1).is_err());
}

#[test]
fn attribute_dropout_is_independent_per_attribute() {
    let tk = tokenizer();
    let mut kept = [0usize; 5];
    let n = 4000;
    for seed in 0..n {
        let p = format_controllable_input(&news_attrs(), &tk, 2, 0.5, seed).unwrap();
        kept[0] += p.soft.is_some() as usize;
        kept[1] += p.text.contains("[t]") as usize;
        kept[2] += p.text.contains("[k]") as usize;
        kept[3] += p.text.contains("[senti]") as usize;
        kept[4] += p.text.contains("[w]") as usize;
    }
    for k in kept {
        assert!((k as f64 / n as f64 - 0.5).abs() < 0.03, "{kept:?}");
    }
}

#[test]
fn use_prompts_frequency_is_one_half() {
    let tk = tokenizer();
    let body = vec![ordinary(1), ordinary(2)];
    let mut on = 0;
    for seed in 0..10_000 {
        let ex = build_controllable_example(&news_attrs(), &body, &tk, ControllableOptions::default(), seed)
            .unwrap();
        if ex.use_prompts {
            on += 1;
        } else {
            assert_eq!(ex.prompt, ControlPrompt::default());
        }
    }
    let f = on as f64 / 10_000.0;
    assert!((f - 0.5).abs() < 0.02, "{f}");
}

fn attribute_strategy() -> impl Strategy<Value = AttributeSet> {
    let word = "[A-Za-z][A-Za-z0-9]{0,7}";
    (
        proptest::option::of(prop::string::string_regex(word).unwrap()),
        proptest::option::of(prop::collection::vec(prop::string::string_regex(word).unwrap(), 1..4)),
        proptest::option::of(prop::sample::select(Sentiment::ALL.to_vec())),
        proptest::option::of(1usize..5000),
    )
        .prop_map(|(topic, keywords, sentiment, length)| AttributeSet {
            genre: None,
            topic,
            keywords,
            sentiment,
            length,
        })
}

proptest! {
    #[test]
    fn template_parses_back(attrs in attribute_strategy()) {
        let text = render_attributes(&attrs);
        prop_assert_eq!(parse_attributes(&text).unwrap(), attrs);
    }

    #[test]
    fn masking_restores_original(
        tokens in prop::collection::vec((NUM_SPECIAL as TokenId)..60, 2..200),
        seed in any::<u64>(),
    ) {
        let mut lex = Lexicon::new();
        lex.insert(tokens[..2].to_vec());
        let ex = mask_knowledge_spans(&tokens, &lex, 0.15, seed).unwrap();
        prop_assert!(!ex.masked_positions.is_empty());
        prop_assert!(ex.masked_positions.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(ex.masked_positions.iter().all(|&p| p < tokens.len()));
        prop_assert_eq!(ex.restored(), tokens);
    }

    #[test]
    fn reorder_labels_stay_in_range(n_sent in 1usize..8, m in 1usize..5, seed in any::<u64>()) {
        let sentences: Vec<Vec<TokenId>> = (0..n_sent).map(|i| vec![ordinary(i)]).collect();
        let ex = build_sentence_reorder_example(&sentences, m, seed).unwrap();
        prop_assert!(ex.label < reorder_class_count(m));
        prop_assert!(ex.permutation.len() <= m);
    }
}

// Loss tests.

fn model64(config: ModelConfig, seed: u64) -> Model<f64> {
    Model::new(config, seed).unwrap()
}

fn value<F>(params: &ModelParams<f64>, f: F) -> f64
where
    F: Fn(&mut Graph<'_, '_, f64>) -> crate::Result<crate::tensor::Var>,
{
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, params);
    let v = f(&mut g).unwrap();
    g.value(v).item()
}

fn adversarial(tokens: Vec<TokenId>, label: AdversarialLabel) -> AdversarialExample {
    AdversarialExample {
        tokens,
        label,
        source_doc_id: "d".to_string(),
        prefix_sentence_count: 0,
    }
}

fn set(params: &mut ModelParams<f64>, name: &str, values: &[f64]) {
    let t = params.get_mut(name).unwrap();
    assert_eq!(t.numel(), values.len());
    t.data_mut().copy_from_slice(values);
}

#[test]
fn adversarial_loss_rigged_and_uniform_heads() {
    let c = tiny(40);
    let mut m = model64(c.clone(), 3);
    let w = vec![0.0; m.params.get("head.adversarial.w").unwrap().numel()];
    set(&mut m.params, "head.adversarial.w", &w);
    let batch = vec![
        adversarial(vec![ordinary(1), ordinary(2)], AdversarialLabel::Original),
        adversarial(vec![ordinary(3)], AdversarialLabel::Original),
    ];
    set(&mut m.params, "head.adversarial.b", &[0.0, 0.0]);
    let uniform = value(&m.params, |g| adversarial_loss(g, &c, &batch));
    assert!((uniform - core::f64::consts::LN_2).abs() < 1e-12);
    set(&mut m.params, "head.adversarial.b", &[60.0, -60.0]);
    let rigged = value(&m.params, |g| adversarial_loss(g, &c, &batch));
    assert!(rigged.abs() < 1e-12, "{rigged}");
    assert!(adversarial_loss(&mut Graph::frozen(&mut Tape::new(), &m.params), &c, &[]).is_err());
}

#[test]
fn adversarial_loss_matches_per_example_oracle() {
    let c = tiny(40);
    let m = model64(c.clone(), 4);
    let params = randomized(&m.params, 9, 0.5);
    let batch = vec![
        adversarial(vec![ordinary(1), ordinary(2), ordinary(5)], AdversarialLabel::Original),
        adversarial(vec![ordinary(3), ordinary(4)], AdversarialLabel::Generated),
        adversarial(vec![ordinary(6)], AdversarialLabel::Generated),
    ];
    let loss = value(&params, |g| adversarial_loss(g, &c, &batch));
    let mut oracle = 0.0;
    for ex in &batch {
        let seq = vec![ex.tokens.clone()];
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &params);
        let logits = cls_logits(&mut g, &c, &seq, crate::model::Head::Adversarial).unwrap();
        let row = g.value(logits).to_f64_vec();
        let z = libm::log(row.iter().map(|v| libm::exp(*v)).sum::<f64>());
        oracle += z - row[ex.label as usize];
    }
    oracle /= batch.len() as f64;
    assert!((loss - oracle).abs() < 1e-6, "{loss} vs {oracle}");
}

#[test]
fn plain_controllable_equals_document_lm() {
    let c = tiny(40);
    let m = model64(c.clone(), 5);
    let params = randomized(&m.params, 2, 0.5);
    let body: Vec<TokenId> = (0..14).map(|i| ordinary(i % 7)).collect();
    let ex = ControllableExample {
        prompt: ControlPrompt::default(),
        body: body.clone(),
        use_prompts: false,
    };
    let mut a_mem = ModelMemory::new(&c);
    let mut b_mem = ModelMemory::new(&c);
    let a = {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &params);
        let v = controllable_example_loss(&mut g, &c, &ex, Some(&mut a_mem)).unwrap();
        g.value(v).item()
    };
    let b = {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &params);
        let v = document_lm_loss(&mut g, &c, &body, c.max_seq_len, Some(&mut b_mem)).unwrap();
        g.value(v).item()
    };
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(a_mem, b_mem);
    let empty = ControllableExample { body: vec![], ..ex };
    assert!(controllable_lm_loss(&mut Graph::frozen(&mut Tape::new(), &params), &c, &[empty]).is_err());
}

#[test]
fn single_segment_document_lm_is_mean_next_token_nll() {
    let c = tiny(40);
    let m = model64(c.clone(), 6);
    let params = randomized(&m.params, 3, 0.5);
    let body: Vec<TokenId> = vec![ordinary(1), ordinary(4), ordinary(2), ordinary(2), ordinary(0)];
    let loss = value(&params, |g| document_lm_loss(g, &c, &body, 10, None));
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &params);
    let out = crate::model::nlg_forward(&mut g, &c, &body[..4], None, None).unwrap();
    let logits = crate::model::head_logits(&mut g, crate::model::Head::Lm, out.top()).unwrap();
    let rows = g.value(logits).to_f64_vec();
    let v = c.vocab_size;
    let mut oracle = 0.0;
    for t in 0..4 {
        let lp = log_softmax(&rows[t * v..(t + 1) * v]);
        oracle -= lp[body[t + 1] as usize];
    }
    oracle /= 4.0;
    assert!((loss - oracle).abs() < 1e-9);
}

#[test]
fn rigged_unigram_controllable_loss() {
    let c = tiny(40);
    let mut m = model64(c.clone(), 7);
    let v = c.vocab_size;
    let w = vec![0.0; m.params.get("head.lm.w").unwrap().numel()];
    set(&mut m.params, "head.lm.w", &w);
    let bias: Vec<f64> = (0..v).map(|i| (i as f64 * 0.37).sin()).collect();
    set(&mut m.params, "head.lm.b", &bias);
    let tk = tokenizer();
    let attrs = AttributeSet {
        topic: Some("Sports".into()),
        ..AttributeSet::default()
    };
    let mut prompt = format_controllable_input(&attrs, &tk, 2, 0.0, 0).unwrap();
    prompt.soft = Some(SoftPrompt { genre: 1, count: 2 });
    prompt.tokens.retain(|&t| (t as usize) < v);
    prompt.tokens.truncate(3);
    assert!(!prompt.tokens.is_empty());
    let body = vec![ordinary(3), ordinary(1), ordinary(4)];
    let ex = ControllableExample {
        prompt,
        body: body.clone(),
        use_prompts: true,
    };
    let loss = value(&m.params, |g| controllable_lm_loss(g, &c, &[ex.clone()]));
    let lp = log_softmax(&bias);
    let oracle = -body.iter().map(|&t| lp[t as usize]).sum::<f64>() / body.len() as f64;
    assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
}

#[test]
fn prompt_positions_are_not_scored() {
    // Changing the body's first token changes the prompt-conditioned loss only
    // through targets, never through extra prompt-position terms.
    let c = tiny(40);
    let m = model64(c.clone(), 8);
    let params = randomized(&m.params, 4, 0.5);
    let prompt = ControlPrompt {
        soft: None,
        text: String::new(),
        tokens: vec![ordinary(9), ordinary(8)],
    };
    let body = vec![ordinary(1), ordinary(2), ordinary(3)];
    let ex = ControllableExample {
        prompt: prompt.clone(),
        body: body.clone(),
        use_prompts: true,
    };
    let loss = value(&params, |g| controllable_example_loss(g, &c, &ex, None));
    let mut full = prompt.tokens.clone();
    full.extend_from_slice(&body);
    let mut tape = Tape::new();
    let mut g = Graph::frozen(&mut tape, &params);
    let out = crate::model::nlg_forward(&mut g, &c, &full[..full.len() - 1], None, None).unwrap();
    let logits = crate::model::head_logits(&mut g, crate::model::Head::Lm, out.top()).unwrap();
    let rows = g.value(logits).to_f64_vec();
    let v = c.vocab_size;
    let mut oracle = 0.0;
    for (k, &target) in body.iter().enumerate() {
        let r = prompt.tokens.len() - 1 + k;
        oracle -= log_softmax(&rows[r * v..(r + 1) * v])[target as usize];
    }
    oracle /= body.len() as f64;
    assert!((loss - oracle).abs() < 1e-9);
}

#[test]
fn document_memory_is_consumed_but_detached() {
    let c = tiny(30);
    let m = model64(c.clone(), 9);
    let params = randomized(&m.params, 5, 0.5);
    let l = c.max_seq_len;
    let first: Vec<TokenId> = (0..l).map(|i| ordinary(i % 5)).collect();
    let second: Vec<TokenId> = (0..l + 1).map(|i| ordinary(5 + i % 6)).collect();
    let mut doc = first.clone();
    doc.extend_from_slice(&second);

    let with_memory = value(&params, |g| {
        let mut mem = ModelMemory::new(&c);
        document_lm_loss(g, &c, &doc, l, Some(&mut mem))
    });
    let without = value(&params, |g| document_lm_loss(g, &c, &doc, l, None));
    assert!((with_memory - without).abs() > 1e-9);

    // The second segment's loss, after the first segment filled the memory,
    // sends no gradient to tokens that only the first segment read.
    let mut tape = Tape::new();
    let mut g = Graph::new(&mut tape, &params);
    let mut mem = ModelMemory::new(&c);
    let mut head = first.clone();
    head.push(second[0]);
    document_lm_loss(&mut g, &c, &head, l, Some(&mut mem)).unwrap();
    assert!(!mem.universal.is_empty());
    let loss = document_lm_loss(&mut g, &c, &second, l, Some(&mut mem)).unwrap();
    let grads = g.backward(loss).unwrap();
    let pg = g.param_grads(&grads);
    let emb = &pg["embed.tokens"];
    let d = c.universal_hidden;
    let row_norm = |t: TokenId| emb[t as usize * d..(t as usize + 1) * d].iter().map(|x| x.abs()).sum::<f64>();
    for t in &first {
        assert_eq!(row_norm(*t), 0.0);
    }
    assert!(row_norm(second[1]) > 0.0);
}

fn loss_gradcheck<F>(seed: u64, loss: F)
where
    F: Fn(&mut Graph<'_, '_, f64>, &ModelConfig) -> crate::Result<crate::tensor::Var>,
{
    let c = tiny(40);
    let m = model64(c.clone(), seed);
    let params = randomized(&m.params, seed + 100, 0.5);
    let err = check_param_gradients(&params, |g| loss(g, &c)).unwrap();
    assert!(err < GRAD_TOL, "relative error {err}");
}

#[test]
fn masked_lm_loss_gradient_check() {
    let ex = mask_knowledge_spans(&[ordinary(1), ordinary(2), ordinary(3), ordinary(4)], &Lexicon::new(), 0.5, 1)
        .unwrap();
    loss_gradcheck(1, |g, c| masked_lm_loss(g, c, &[ex.clone()]));
}

#[test]
fn uktp_loss_gradient_check() {
    let ex = build_uktp_example(&triple(), &[ordinary(6), ordinary(7)], 2).unwrap();
    loss_gradcheck(2, |g, c| uktp_loss(g, c, &[ex.clone()]));
}

#[test]
fn reorder_loss_gradient_check() {
    let sents = vec![vec![ordinary(1)], vec![ordinary(2), ordinary(3)], vec![ordinary(4)]];
    let a = build_sentence_reorder_example(&sents, 3, 0).unwrap();
    let b = build_sentence_reorder_example(&sents, 3, 5).unwrap();
    loss_gradcheck(3, |g, c| reorder_loss(g, c, &[a.clone(), b.clone()]));
}

#[test]
fn distance_loss_gradient_check() {
    let s = store(2, 3);
    let ex = build_sentence_distance_example(&s, 1).unwrap();
    loss_gradcheck(4, |g, c| distance_loss(g, c, &[ex.clone()]));
}

#[test]
fn adversarial_loss_gradient_check() {
    let batch = vec![
        adversarial(vec![ordinary(1), ordinary(2)], AdversarialLabel::Original),
        adversarial(vec![ordinary(3)], AdversarialLabel::Generated),
    ];
    loss_gradcheck(5, |g, c| adversarial_loss(g, c, &batch));
}

#[test]
fn document_lm_loss_gradient_check() {
    // Memory is a stop-gradient input, so finite differences must hold it
    // fixed: fill it once, then check a later segment against the clone.
    let doc: Vec<TokenId> = (0..14).map(|i| ordinary(i % 9)).collect();
    let c = tiny(40);
    let params = randomized(&model64(c.clone(), 6).params, 106, 0.5);
    let mut filled = ModelMemory::new(&c);
    {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &params);
        document_lm_loss(&mut g, &c, &doc[..7], 6, Some(&mut filled)).unwrap();
    }
    let err = check_param_gradients(&params, |g| {
        let mut mem = filled.clone();
        document_lm_loss(g, &c, &doc[6..13], 6, Some(&mut mem))
    })
    .unwrap();
    assert!(err < GRAD_TOL, "relative error {err}");
    let err = check_param_gradients(&params, |g| document_lm_loss(g, &c, &doc, 6, None)).unwrap();
    assert!(err < GRAD_TOL, "relative error {err}");
}

#[test]
fn controllable_loss_gradient_check() {
    let ex = ControllableExample {
        prompt: ControlPrompt {
            soft: Some(SoftPrompt { genre: 1, count: 2 }),
            text: String::new(),
            tokens: vec![ordinary(9)],
        },
        body: vec![ordinary(1), ordinary(2), ordinary(3)],
        use_prompts: true,
    };
    let plain = ControllableExample {
        prompt: ControlPrompt::default(),
        body: vec![ordinary(4), ordinary(5)],
        use_prompts: false,
    };
    loss_gradcheck(7, |g, c| controllable_lm_loss(g, c, &[ex.clone(), plain.clone()]));
}

// Optimizer.

fn one_param_store(shape: &[usize], data: &[f64], grad: &[f64]) -> ModelParams<f64> {
    let mut p = ModelParams::default();
    p.insert("w", Tensor::from_f64(shape.to_vec(), data).unwrap());
    let mut g = BTreeMap::new();
    g.insert("w".to_string(), grad.to_vec());
    p.accumulate_grads(&g).unwrap();
    p
}

#[test]
fn gradient_clipping_scales_to_unit_norm() {
    let mut p = one_param_store(&[2, 2], &[0.0; 4], &[3.0, 4.0, 12.0, 0.0]);
    let norm = clip_grad_norm(&mut p, 1.0);
    assert!((norm - 13.0).abs() < 1e-12);
    assert!((p.grad_norm() - 1.0).abs() < 1e-6);
    let mut small = one_param_store(&[2], &[0.0; 2], &[0.3, 0.4]);
    clip_grad_norm(&mut small, 1.0);
    assert!((small.grad_norm() - 0.5).abs() < 1e-12);
}

#[test]
fn learning_rate_schedule() {
    let cfg = OptimizerConfig {
        lr: 1.0,
        warmup_steps: 4,
        total_steps: 12,
        ..OptimizerConfig::default()
    };
    let got: Vec<f64> = (0..13).map(|s| cfg.learning_rate(s)).collect();
    let want = [0.25, 0.5, 0.75, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125, 0.0];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-12, "{got:?}");
    }
    assert_eq!(OptimizerConfig::default().lr, 1e-4);
    assert_eq!(OptimizerConfig::default().warmup_steps, 4000);
}

#[test]
fn adamw_matches_hand_computation() {
    let cfg = OptimizerConfig {
        lr: 0.1,
        warmup_steps: 0,
        total_steps: 1000,
        ..OptimizerConfig::default()
    };
    let mut matrix = one_param_store(&[1, 2], &[1.0, -2.0], &[0.5, -0.25]);
    let mut vector = one_param_store(&[2], &[1.0, -2.0], &[0.5, -0.25]);
    let mut sm = OptimizerState::new(&matrix);
    let mut sv = OptimizerState::new(&vector);
    adamw_step(&mut matrix, &mut sm, &cfg).unwrap();
    adamw_step(&mut vector, &mut sv, &cfg).unwrap();
    // First step: m/(1-b1) = g, v/(1-b2) = g^2, update = g/(|g|+eps).
    let lr = cfg.learning_rate(0);
    for (i, (&w0, &g)) in [1.0f64, -2.0].iter().zip(&[0.5f64, -0.25]).enumerate() {
        let adam = g / (g.abs() + cfg.eps);
        let want_vec = w0 - lr * adam;
        let want_mat = w0 - lr * (adam + cfg.weight_decay * w0);
        assert!((vector.get("w").unwrap().data()[i] - want_vec).abs() < 1e-12);
        assert!((matrix.get("w").unwrap().data()[i] - want_mat).abs() < 1e-12);
    }
    assert_eq!(sm.step, 1);
    // No gradient, no update.
    matrix.zero_grad();
    let before = matrix.clone();
    adamw_step(&mut matrix, &mut sm, &cfg).unwrap();
    assert_eq!(matrix.get("w").unwrap().data(), before.get("w").unwrap().data());
}

fn pattern_bundle(config: &ModelConfig, seed: u64) -> TaskBundle {
    let text: Vec<TokenId> = (0..24).map(|i| ordinary([0, 1, 2, 3, 1, 2][i % 6])).collect();
    let short = &text[..text.len().min(config.max_seq_len - 1)];
    let mut b = TaskBundle::default();
    b.masked_lm.push(mask_knowledge_spans(short, &Lexicon::new(), 0.15, seed).unwrap());
    b.document_lm.push(DocumentStream {
        tokens: text.clone(),
        segment_len: config.max_seq_len,
    });
    let sents: Vec<Vec<TokenId>> = short.chunks(3).map(|c| c.to_vec()).collect();
    b.reorder.push(build_sentence_reorder_example(&sents, config.reorder_segments, seed).unwrap());
    b
}

#[test]
fn single_task_bundle_equals_that_task() {
    let c = tiny(40);
    let m = model64(c.clone(), 10);
    let mut b = TaskBundle::default();
    let ex = mask_knowledge_spans(&[ordinary(1), ordinary(2), ordinary(3)], &Lexicon::new(), 0.3, 0).unwrap();
    b.push(PretrainExample::MaskedLm(ex.clone()));
    assert_eq!(b.enabled(), vec!["masked_lm"]);
    let mut mm = m.clone();
    let (losses, total) = accumulate_bundle_gradients(&mut mm, &b).unwrap();
    let direct = value(&m.params, |g| masked_lm_loss(g, &c, &[ex.clone()]));
    assert_eq!(total.to_bits(), direct.to_bits());
    assert_eq!(losses["masked_lm"].to_bits(), direct.to_bits());
    let mut state = OptimizerState::new(&mm.params);
    assert!(multitask_step(&mut mm, &mut state, &OptimizerConfig::default(), &TaskBundle::default()).is_err());
}

#[test]
fn total_loss_is_the_sum_of_task_losses() {
    let c = tiny(40);
    let mut m = model64(c.clone(), 11);
    let b = pattern_bundle(&c, 0);
    let (losses, total) = accumulate_bundle_gradients(&mut m, &b).unwrap();
    assert_eq!(losses.len(), 3);
    let sum: f64 = losses.values().sum();
    assert!((total - sum).abs() < 1e-12);
    assert!(m.params.grad_norm() > 0.0);
}

#[test]
fn loss_weights_scale_the_total() {
    let c = tiny(40);
    let m = model64(c.clone(), 12);
    let b = pattern_bundle(&c, 1);
    let cfg = OptimizerConfig::default();
    let step = |w: &TaskWeights| {
        let mut mm = m.clone();
        let mut st = OptimizerState::new(&mm.params);
        (multitask_step_weighted(&mut mm, &mut st, &cfg, &b, w).unwrap(), mm)
    };
    let (plain, pm) = step(&TaskWeights::new());
    let mut unit = TaskWeights::new();
    unit.insert("reorder".into(), 1.0);
    let (same, sm) = step(&unit);
    assert_eq!(plain, same);
    assert_eq!(pm, sm);
    let mut w = TaskWeights::new();
    w.insert("reorder".into(), 0.0);
    let (r, _) = step(&w);
    assert_eq!(r.losses, plain.losses);
    let without: f64 = plain.losses.iter().filter(|(n, _)| **n != "reorder").map(|(_, v)| v).sum();
    assert!((r.total - without).abs() < 1e-12);
    let mut bad = TaskWeights::new();
    bad.insert("nope".into(), 1.0);
    let mut mm = m.clone();
    let mut st = OptimizerState::new(&mm.params);
    assert!(multitask_step_weighted(&mut mm, &mut st, &cfg, &b, &bad).is_err());
}

#[test]
fn multitask_training_reduces_loss() {
    let c = ModelConfig::toy(20);
    let mut model: Model = Model::new(c.clone(), 12).unwrap();
    let cfg = OptimizerConfig {
        lr: 1e-3,
        warmup_steps: 20,
        total_steps: 500,
        ..OptimizerConfig::default()
    };
    let mut state = OptimizerState::new(&model.params);
    let mut totals = Vec::new();
    for step in 0..500 {
        let bundle = pattern_bundle(&c, step);
        let r = multitask_step(&mut model, &mut state, &cfg, &bundle).unwrap();
        assert!(r.total.is_finite());
        assert_eq!(r.step, step + 1);
        totals.push(r.total);
    }
    let head: f64 = totals[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = totals[480..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.7 * head, "{head} -> {tail}");
}

#[test]
fn original_probability_matches_softmax_of_logits() {
    let c = tiny(30);
    let model = Model::<f64>::new(c.clone(), 5).unwrap();
    let seqs = vec![vec![20, 21, 22], vec![23, 24]];
    let p = original_probabilities(&model, &seqs).unwrap();
    for (s, &pi) in seqs.iter().zip(&p) {
        let mut tape = Tape::new();
        let mut g = Graph::frozen(&mut tape, &model.params);
        let l = cls_logits(&mut g, &c, core::slice::from_ref(s), crate::model::Head::Adversarial).unwrap();
        let d = g.value(l).data().to_vec();
        let want = 1.0 / (1.0 + (d[1] - d[0]).exp());
        assert!((pi - want).abs() < 1e-12);
    }
}
