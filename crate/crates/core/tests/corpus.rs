use etrag::corpus::{
    generate_synthetic, load_jsonl, parse_jsonl, verbalize_input, write_jsonl, write_jsonl_string, Instance, LabelId,
    Span, SyntheticTask, SyntheticTaskConfig, TokenId,
};
use proptest::prelude::*;
use std::collections::{HashMap, HashSet};

/// The token right after the head when it is a cue word.
fn pattern(task: &SyntheticTask, inst: &Instance) -> Option<TokenId> {
    let t = *inst.tokens.get(inst.head_span.end)?;
    let word = task.vocab.token(t)?;
    (word.starts_with("cue") || word.starts_with("sig")).then_some(t)
}

type Key = (Vec<TokenId>, Vec<TokenId>, Option<TokenId>);

fn key(task: &SyntheticTask, inst: &Instance) -> Key {
    (inst.head_tokens().to_vec(), inst.tail_tokens().to_vec(), pattern(task, inst))
}

/// Majority label per (head, tail, pattern).
fn frequency_table(task: &SyntheticTask, data: &[Instance]) -> HashMap<Key, LabelId> {
    let mut counts: HashMap<Key, HashMap<LabelId, usize>> = HashMap::new();
    for inst in data {
        *counts.entry(key(task, inst)).or_default().entry(inst.relation).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(k, c)| (k, c.into_iter().max_by_key(|&(l, n)| (n, std::cmp::Reverse(l))).unwrap().0))
        .collect()
}

fn table_accuracy(task: &SyntheticTask, data: &[Instance]) -> f64 {
    let table = frequency_table(task, data);
    let hits = data.iter().filter(|i| table[&key(task, i)] == i.relation).count();
    hits as f64 / data.len() as f64
}

#[test]
fn noise_free_labels_follow_pair_and_pattern() {
    for seed in 0..3 {
        let task = generate_synthetic(&SyntheticTaskConfig { noise_rate: 0.0, seed, ..Default::default() }).unwrap();
        assert_eq!(table_accuracy(&task, &task.train), 1.0);
    }
    let noisy = generate_synthetic(&SyntheticTaskConfig { noise_rate: 0.3, ..Default::default() }).unwrap();
    assert!(table_accuracy(&noisy, &noisy.train) < 1.0);
}

#[test]
fn same_config_same_bytes() {
    let cfg = SyntheticTaskConfig { seed: 9, ..Default::default() };
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    for (x, y) in [(&a.train, &b.train), (&a.dev, &b.dev), (&a.test, &b.test)] {
        assert_eq!(write_jsonl_string(x, &a.schema, &a.vocab), write_jsonl_string(y, &b.schema, &b.vocab));
    }
    let c = generate_synthetic(&SyntheticTaskConfig { seed: 10, ..cfg }).unwrap();
    assert_ne!(a.train, c.train);
}

#[test]
fn splits_are_disjoint_and_balanced() {
    for seed in 0..5 {
        let task = generate_synthetic(&SyntheticTaskConfig { seed, ..Default::default() }).unwrap();
        let mut ids = HashSet::new();
        for inst in task.train.iter().chain(&task.dev).chain(&task.test) {
            assert!(ids.insert(inst.id.clone()), "{} repeated", inst.id);
        }
        let marginal = |d: &[Instance]| {
            let mut m = vec![0.0; task.schema.len()];
            d.iter().for_each(|i| m[i.relation] += 1.0 / d.len() as f64);
            m
        };
        let (tr, te) = (marginal(&task.train), marginal(&task.test));
        for (l, (a, b)) in tr.iter().zip(&te).enumerate() {
            assert!((a - b).abs() < 0.05, "seed {seed} label {l}: {a:.3} vs {b:.3}");
        }
    }
}

#[test]
fn negative_only_schema() {
    let task = generate_synthetic(&SyntheticTaskConfig { n_labels: 1, ..Default::default() }).unwrap();
    assert!(task.train.iter().chain(&task.test).all(|i| i.relation == task.schema.negative()));
}

#[test]
fn file_round_trip() {
    let task =
        generate_synthetic(&SyntheticTaskConfig { n_train: 40, n_dev: 5, n_test: 5, ..Default::default() }).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.jsonl");
    write_jsonl(&path, &task.train, &task.schema, &task.vocab).unwrap();
    assert_eq!(load_jsonl(&path, &task.schema, &task.vocab).unwrap(), task.train);
}

fn small_task() -> SyntheticTask {
    generate_synthetic(&SyntheticTaskConfig { n_train: 4, n_dev: 1, n_test: 1, ..Default::default() }).unwrap()
}

fn arb_instance(vocab_len: u32, n_labels: usize) -> impl Strategy<Value = Instance> {
    (prop::collection::vec(5..vocab_len, 1..20), any::<[u16; 4]>(), 0..n_labels, "[a-z0-9]{1,8}").prop_map(
        |(tokens, r, label, id)| {
            let n = tokens.len();
            let span = |a: u16, b: u16| {
                let s = a as usize % n;
                Span::new(s, s + 1 + b as usize % (n - s))
            };
            Instance::new(id, tokens, span(r[0], r[1]), span(r[2], r[3]), label)
        },
    )
}

proptest! {
    #[test]
    fn jsonl_round_trips(mut insts in prop::collection::vec(arb_instance(200, 9), 0..6)) {
        let task = small_task();
        insts.iter_mut().enumerate().for_each(|(i, x)| x.id = format!("{i}-{}", x.id));
        let text = write_jsonl_string(&insts, &task.schema, &task.vocab);
        prop_assert_eq!(parse_jsonl(&text, &task.schema, &task.vocab).unwrap(), insts);
    }

    #[test]
    fn input_verbalization_is_injective(a in arb_instance(40, 3), b in arb_instance(40, 3)) {
        let (va, vb) = (verbalize_input(&a, usize::MAX), verbalize_input(&b, usize::MAX));
        // Only entity surfaces are verbalized, not their positions, and the
        // tail runs straight into the sentence, so compare at equal tail length.
        if va == vb && a.tail_span.len() == b.tail_span.len() {
            prop_assert_eq!(a.head_tokens(), b.head_tokens());
            prop_assert_eq!(a.tail_tokens(), b.tail_tokens());
            prop_assert_eq!(&a.tokens, &b.tokens);
        }
        let c = Instance { id: format!("{}x", a.id), ..a.clone() };
        prop_assert_eq!(verbalize_input(&c, usize::MAX), va);
    }
}

#[test]
fn tail_and_sentence_can_share_a_boundary() {
    let a = Instance::new("a", vec![7, 7, 7], Span::new(0, 1), Span::new(0, 1), 0);
    let b = Instance::new("b", vec![7, 7], Span::new(0, 1), Span::new(0, 2), 0);
    assert_eq!(verbalize_input(&a, 99), verbalize_input(&b, 99));
}
