//! One training run per neighbour count, scored on a held-out set.

use super::{evaluate, EvalReport};
use crate::corpus::{Instance, RelationSchema};
use crate::error::Result;
use crate::pipeline::{DbIndex, ModelConfig};
use crate::training::{apply_ablation, train, TrainConfig, TrainOutcome};
use serde::{Deserialize, Serialize};
use std::sync::Mutex;

pub const SWEEP_KS: [usize; 7] = [0, 1, 3, 5, 10, 15, 20];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Trains with `cfg` and scores the best checkpoint on `test`.
pub fn train_and_evaluate(
    train_set: &[Instance],
    dev: &[Instance],
    test: &[Instance],
    schema: &RelationSchema,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(train_set, dev, schema, model_cfg, cfg)?;
    let wiring = apply_ablation(cfg);
    let model = &outcome.best.model;
    let index = if wiring.retrieval.enabled() {
        Some(DbIndex::build(model, &outcome.db, schema, wiring.retrieval.representation)?)
    } else {
        None
    };
    let report = evaluate(model, test, schema, index.as_ref(), &wiring.retrieval)?;
    Ok((outcome, report))
}

/// Runs every `k` in `ks` from the same seed, `jobs` at a time.
pub fn k_sweep(
    train_set: &[Instance],
    dev: &[Instance],
    test: &[Instance],
    schema: &RelationSchema,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    ks: &[usize],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    let slots: Vec<Mutex<Option<Result<SweepRow>>>> = ks.iter().map(|_| Mutex::new(None)).collect();
    let next = Mutex::new(0usize);
    let run = |i: usize| -> Result<SweepRow> {
        let cfg = TrainConfig { k: ks[i], subset_size: base.subset_size.max(ks[i]), ..base.clone() };
        let (_, r) = train_and_evaluate(train_set, dev, test, schema, model_cfg, &cfg)?;
        Ok(SweepRow { k: ks[i], precision: r.precision, recall: r.recall, f1: r.f1 })
    };
    std::thread::scope(|s| {
        for _ in 0..jobs.max(1).min(ks.len()) {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("sweep counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= ks.len() {
                    break;
                }
                *slots[i].lock().expect("sweep slot") = Some(run(i));
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("sweep slot").expect("every k ran")).collect()
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("k,precision,recall,f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.k, r.precision, r.recall, r.f1));
    }
    out
}
