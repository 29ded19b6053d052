//! Negative-aware micro-F1, k-sweeps and retrieved-instance statistics.

mod stats;
mod sweep;

pub use stats::{
    contains_subsequence, retrieval_stats, selection_overlap, stats_from_neighbours, Fractions, LevelStats,
    RetrievalStats,
};
pub use sweep::{k_sweep, sweep_csv, train_and_evaluate, SweepRow, SWEEP_KS};

use crate::corpus::{Instance, LabelId, RelationSchema};
use crate::error::{Error, Result};
use crate::pipeline::{embed_queries, predict_with_query, DbIndex, Model, RetrievalConfig};
use serde::{Deserialize, Serialize};
use std::fmt;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Unweighted mean F1 over positive labels; informational.
    pub macro_f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    /// Indexed by label id.
    pub per_label: Vec<LabelCounts>,
    pub n_instances: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p == 0.0 || r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged scores with the schema's negative label excluded from
/// the positive classes.
pub fn micro_f1(preds: &[LabelId], golds: &[LabelId], schema: &RelationSchema) -> Result<EvalReport> {
    if preds.len() != golds.len() {
        return Err(Error::Config(format!("{} predictions for {} gold labels", preds.len(), golds.len())));
    }
    let mut per_label = vec![LabelCounts::default(); schema.len()];
    for (&p, &g) in preds.iter().zip(golds) {
        if p >= schema.len() || g >= schema.len() {
            return Err(Error::Config(format!("label id out of range ({p} or {g})")));
        }
        if p == g {
            if !schema.is_negative(g) {
                per_label[g].tp += 1;
            }
            continue;
        }
        if !schema.is_negative(p) {
            per_label[p].fp += 1;
        }
        if !schema.is_negative(g) {
            per_label[g].fn_ += 1;
        }
    }
    let tp = per_label.iter().map(|c| c.tp).sum();
    let fp = per_label.iter().map(|c| c.fp).sum();
    let fn_ = per_label.iter().map(|c| c.fn_).sum();
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let positives: Vec<f64> = per_label
        .iter()
        .enumerate()
        .filter(|(i, _)| !schema.is_negative(*i))
        .map(|(_, c)| harmonic(ratio(c.tp, c.tp + c.fp), ratio(c.tp, c.tp + c.fn_)))
        .collect();
    let macro_f1 = if positives.is_empty() { 0.0 } else { positives.iter().sum::<f64>() / positives.len() as f64 };
    Ok(EvalReport {
        precision,
        recall,
        f1: harmonic(precision, recall),
        macro_f1,
        tp,
        fp,
        fn_,
        per_label,
        n_instances: preds.len(),
    })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "n={} P={:.4} R={:.4} F1={:.4} (tp={} fp={} fn={}) macro-F1={:.4}",
            self.n_instances, self.precision, self.recall, self.f1, self.tp, self.fp, self.fn_, self.macro_f1
        )
    }
}

/// Predicted label for every instance of `set`.
pub fn predict_all(
    model: &Model,
    set: &[Instance],
    schema: &RelationSchema,
    index: Option<&DbIndex>,
    retrieval: &RetrievalConfig,
) -> Result<Vec<LabelId>> {
    let queries = match index {
        Some(ix) if retrieval.enabled() && !ix.is_empty() => {
            let refs: Vec<&Instance> = set.iter().collect();
            Some(embed_queries(model, &refs, schema, ix.representation)?)
        }
        _ => None,
    };
    set.iter()
        .enumerate()
        .map(|(i, inst)| {
            let q = queries.as_ref().map(|q| &q[i]);
            predict_with_query(model, inst, schema, index, q, retrieval).map(|d| d.label)
        })
        .collect()
}

pub fn evaluate(
    model: &Model,
    set: &[Instance],
    schema: &RelationSchema,
    index: Option<&DbIndex>,
    retrieval: &RetrievalConfig,
) -> Result<EvalReport> {
    let preds = predict_all(model, set, schema, index, retrieval)?;
    let golds: Vec<LabelId> = set.iter().map(|i| i.relation).collect();
    micro_f1(&preds, &golds, schema)
}
