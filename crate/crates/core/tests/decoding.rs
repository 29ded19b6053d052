mod common;

use common::{tiny_model_config, tiny_task};
use etrag::autodiff::Graph;
use etrag::corpus::{verbalize_input, verbalize_output, BOS};
use etrag::generator::{
    build_prompt, build_trie, decoder_step, encode_with_prompt, exhaustive_decode, output_logits, sequence_logprob,
    trie_beam_decode,
};
use etrag::matrix::Matrix;
use etrag::params::{uniform, Binder};
use etrag::pipeline::Model;
use etrag::seed;
use rand::Rng;

/// A model whose parameters are rescaled so output distributions range from
/// flat to sharp.
fn random_state(vocab: usize, s: u64) -> Model {
    let mut model = Model::init(tiny_model_config(vocab), s);
    let mut rng = seed::stream(s, "rescale");
    let c = rng.gen_range(0.5..4.0);
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.get_mut(id).value.data_mut().iter_mut().for_each(|x| *x *= c);
    }
    model
}

#[test]
fn beam_equals_exhaustive_over_random_states() {
    let task = tiny_task(12, 21);
    let n_labels = task.schema.len();
    let mut disagreements = 0;
    for s in 0..120u64 {
        let model = random_state(task.vocab.len(), s);
        let cfg = &model.config.generator;
        let inst = &task.train[s as usize % task.train.len()];
        let trie = build_trie(inst, &task.schema).unwrap();
        let mut rng = seed::stream(s, "prompt");
        let k = rng.gen_range(0..3);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.store);
        let prompt = (k > 0).then(|| {
            let rows = g.constant(uniform(&mut rng, k * 3, cfg.prompt_dim, 1.5));
            build_prompt(&g, rows, 3).unwrap()
        });
        let input = verbalize_input(inst, model.config.max_input_len);
        let enc = encode_with_prompt(&mut g, &mut b, &model.generator, cfg, &input, prompt.as_ref()).unwrap();
        let beam = trie_beam_decode(&mut g, &mut b, &model.generator, cfg, &enc, &trie, n_labels).unwrap();
        let exact = exhaustive_decode(&mut g, &mut b, &model.generator, cfg, &enc, &trie).unwrap();
        assert_eq!(beam.label, exact.label, "state {s}");
        assert_eq!(beam.tokens, exact.tokens);
        assert_eq!(beam.score, exact.score);
        let narrow = trie_beam_decode(&mut g, &mut b, &model.generator, cfg, &enc, &trie, 1).unwrap();
        disagreements += usize::from(narrow.label != exact.label);
    }
    // Greedy search is not exact, so the wide beam is doing real work.
    assert!(disagreements > 0);
}

#[test]
fn encoded_length_is_input_plus_prompt() {
    let task = tiny_task(6, 22);
    let model = Model::init(tiny_model_config(task.vocab.len()), 3);
    let cfg = &model.config.generator;
    let mut rng = seed::stream(3, "lengths");
    for inst in &task.train {
        for _ in 0..10 {
            let k = rng.gen_range(0..5);
            let l = rng.gen_range(1..4);
            let mut g = Graph::new();
            let mut b = Binder::frozen(&model.store);
            let rows = g.constant(uniform(&mut rng, k * l, cfg.prompt_dim, 1.0));
            let prompt = build_prompt(&g, rows, l).unwrap();
            let cut = rng.gen_range(2..model.config.max_input_len);
            let input = verbalize_input(inst, cut);
            let enc = encode_with_prompt(&mut g, &mut b, &model.generator, cfg, &input, Some(&prompt)).unwrap();
            assert_eq!(enc.len(&g), input.len() + k * l);
        }
    }
}

#[test]
fn step_distributions_sum_to_one() {
    let task = tiny_task(4, 23);
    let model = Model::init(tiny_model_config(task.vocab.len()), 4);
    let cfg = &model.config.generator;
    for inst in &task.train {
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.store);
        let input = verbalize_input(inst, model.config.max_input_len);
        let enc = encode_with_prompt(&mut g, &mut b, &model.generator, cfg, &input, None).unwrap();
        let target = verbalize_output(inst, inst.relation, &task.schema).unwrap();
        let total = sequence_logprob(&mut g, &mut b, &model.generator, cfg, &enc, &target).unwrap();
        let mut state = etrag::generator::initial_state(&mut g, &mut b, &model.generator, &enc).unwrap();
        let mut prev = BOS;
        let mut by_hand = 0.0;
        for &t in &target {
            let (next, f) = decoder_step(&mut g, &mut b, &model.generator, cfg, &enc, state, prev).unwrap();
            let logits = output_logits(&mut g, &mut b, &model.generator, f).unwrap();
            let p = g.softmax_rows(logits);
            let row = g.value(p).row(0);
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            by_hand += row[t as usize].ln();
            state = next;
            prev = t;
        }
        assert!((g.scalar_value(total) - by_hand).abs() < 1e-9);
    }
}

#[test]
fn empty_prompt_is_no_prompt() {
    let task = tiny_task(2, 24);
    let model = Model::init(tiny_model_config(task.vocab.len()), 5);
    let cfg = &model.config.generator;
    let input = verbalize_input(&task.train[0], 24);
    let mut g = Graph::new();
    let mut b = Binder::frozen(&model.store);
    let rows = g.constant(Matrix::zeros(0, cfg.prompt_dim));
    let prompt = build_prompt(&g, rows, 3).unwrap();
    let with = encode_with_prompt(&mut g, &mut b, &model.generator, cfg, &input, Some(&prompt)).unwrap();
    let without = encode_with_prompt(&mut g, &mut b, &model.generator, cfg, &input, None).unwrap();
    assert_eq!(g.value(with.states), g.value(without.states));
}
