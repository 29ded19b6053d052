mod common;

use common::{leave_one_out, quick_train_config, tiny_model_config, tiny_task};
use etrag::corpus::{generate_synthetic, SyntheticTaskConfig};
use etrag::params::{ParamGroup, ParamStore};
use etrag::pipeline::{Model, ModelConfig};
use etrag::retriever::Database;
use etrag::training::{
    apply_ablation, history_csv, loss_and_grads, train, train_observed, Ablation, Checkpoint, TrainConfig,
};

fn group_values(store: &ParamStore, group: ParamGroup) -> Vec<Vec<f64>> {
    store.iter().filter(|(_, p)| p.group == group).map(|(_, p)| p.value.data().to_vec()).collect()
}

#[test]
fn loss_falls_over_the_first_steps() {
    let task = generate_synthetic(&SyntheticTaskConfig { noise_rate: 0.0, ..Default::default() }).unwrap();
    let model_cfg = ModelConfig::for_vocab(task.vocab.len());
    let steps = 20;
    let mut curve = vec![0.0; steps];
    for seed in 0..5 {
        let cfg = TrainConfig { warmup_steps: 0, max_steps: steps, eval_every: steps, seed, ..Default::default() };
        train_observed(&task.train, &task.dev[..8], &task.schema, &model_cfg, &cfg, |info, _| {
            curve[info.step - 1] += info.loss / 5.0;
        })
        .unwrap();
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    assert!(mean(&curve[15..]) < mean(&curve[..5]), "{curve:?}");
    let xm = (steps as f64 - 1.0) / 2.0;
    let ym = mean(&curve);
    let slope: f64 = curve.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    assert!(slope < 0.0, "{curve:?}");
}

#[test]
fn generator_is_frozen_during_warmup() {
    let task = tiny_task(12, 31);
    let model_cfg = tiny_model_config(task.vocab.len());
    let cfg = TrainConfig { warmup_steps: 8, max_steps: 12, ..quick_train_config(1) };
    let start = Model::init(model_cfg.clone(), etrag::seed::derive_seed(cfg.seed, "model"));
    let mut prev = start.store.clone();
    let mut generator_moved_after = false;
    let mut encoder_moved = false;
    train_observed(&task.train, &task.dev, &task.schema, &model_cfg, &cfg, |info, m| {
        let gen_same = group_values(&prev, ParamGroup::Generator) == group_values(&m.store, ParamGroup::Generator);
        if info.in_warmup {
            assert!(gen_same, "generator moved at warm-up step {}", info.step);
            encoder_moved |= group_values(&prev, ParamGroup::Encoder) != group_values(&m.store, ParamGroup::Encoder);
        } else {
            generator_moved_after |= !gen_same;
        }
        prev = m.store.clone();
    })
    .unwrap();
    assert!(encoder_moved && generator_moved_after);
}

#[test]
fn frozen_encoder_ablations_keep_the_encoder() {
    let task = tiny_task(12, 32);
    let model_cfg = tiny_model_config(task.vocab.len());
    for ablation in [Ablation::NoRetrieverTraining, Ablation::RandomInstances, Ablation::NoRetrieval] {
        let cfg = TrainConfig { ablation, ..quick_train_config(2) };
        let start = Model::init(model_cfg.clone(), etrag::seed::derive_seed(cfg.seed, "model"));
        let out = train(&task.train, &task.dev, &task.schema, &model_cfg, &cfg).unwrap();
        assert_eq!(
            group_values(&out.best.model.store, ParamGroup::Encoder),
            group_values(&start.store, ParamGroup::Encoder),
            "{ablation}"
        );
    }
}

#[test]
fn random_selection_sends_no_gradient_to_the_encoder() {
    let task = tiny_task(6, 33);
    let db = Database { instances: task.train.clone(), cap: 10 };
    let model = Model::init(tiny_model_config(task.vocab.len()), 7);
    let mut items = leave_one_out(&db);
    for it in &mut items {
        it.pick = Some(vec![0, 2]);
    }
    let cfg = TrainConfig { k: 2, subset_size: 5, ablation: Ablation::RandomInstances, ..Default::default() };
    let wiring = apply_ablation(&cfg);
    assert!(!wiring.trainable(false).contains(&ParamGroup::Encoder));
    let (_, grads) =
        loss_and_grads(&model, &task.schema, &db, &wiring, &items, &wiring.trainable(false), None).unwrap();
    for (id, p) in model.store.iter() {
        assert_eq!(grads[id.0].is_none(), p.group == ParamGroup::Encoder, "{}", p.name);
    }
}

#[test]
fn encoder_receives_gradient_end_to_end() {
    let task = tiny_task(6, 34);
    let db = Database { instances: task.train.clone(), cap: 10 };
    let model = Model::init(tiny_model_config(task.vocab.len()), 8);
    let items = leave_one_out(&db);
    let cfg = TrainConfig { k: 2, subset_size: 5, ..Default::default() };
    let (_, grads) =
        loss_and_grads(&model, &task.schema, &db, &apply_ablation(&cfg), &items, &ParamGroup::ALL, None).unwrap();
    let max = model
        .store
        .iter()
        .filter(|(_, p)| p.group == ParamGroup::Encoder)
        .map(|(id, _)| grads[id.0].as_ref().unwrap().max_abs())
        .fold(0.0, f64::max);
    assert!(max > 1e-12, "max encoder gradient {max:e}");
}

#[test]
fn checkpoint_round_trip_keeps_the_loss() {
    let task = tiny_task(12, 35);
    let model_cfg = tiny_model_config(task.vocab.len());
    let cfg = quick_train_config(3);
    let out = train(&task.train, &task.dev, &task.schema, &model_cfg, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.json");
    out.best.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, out.best);
    let wiring = apply_ablation(&cfg);
    let items = leave_one_out(&out.db);
    let loss = |m: &Model| loss_and_grads(m, &task.schema, &out.db, &wiring, &items, &[], None).unwrap().0;
    assert_eq!(loss(&back.model).to_bits(), loss(&out.best.model).to_bits());
}

#[test]
fn tampered_checkpoint_is_rejected() {
    let task = tiny_task(6, 36);
    let cfg = TrainConfig { max_steps: 2, ..quick_train_config(4) };
    let out = train(&task.train, &task.dev, &task.schema, &tiny_model_config(task.vocab.len()), &cfg).unwrap();
    let text = out.best.to_json().replace("\"max_steps\":2", "\"max_steps\":3");
    assert!(Checkpoint::from_json(&text).is_err());
}

#[test]
fn runs_are_reproducible() {
    let task = tiny_task(12, 37);
    let model_cfg = tiny_model_config(task.vocab.len());
    let cfg = quick_train_config(5);
    let a = train(&task.train, &task.dev, &task.schema, &model_cfg, &cfg).unwrap();
    let b = train(&task.train, &task.dev, &task.schema, &model_cfg, &cfg).unwrap();
    assert_eq!(history_csv(&a.history), history_csv(&b.history));
    assert_eq!(a.best.to_json(), b.best.to_json());
    let c = train(&task.train, &task.dev, &task.schema, &model_cfg, &TrainConfig { seed: 6, ..cfg }).unwrap();
    assert_ne!(history_csv(&a.history), history_csv(&c.history));
}

#[test]
fn history_has_the_metric_columns() {
    let task = tiny_task(12, 38);
    let out = train(&task.train, &task.dev, &task.schema, &tiny_model_config(task.vocab.len()), &quick_train_config(7))
        .unwrap();
    let csv = history_csv(&out.history);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("step,train_loss,dev_loss,dev_f1"));
    assert_eq!(lines.count(), out.history.len());
    assert!(out.history.iter().all(|r| r.step % 5 == 0 || r.step == out.steps_run));
}
