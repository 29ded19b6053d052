//! Teacher-forced training with the retriever in the loop.
//!
//! The first `warmup_steps` updates touch only the retriever side (encoder
//! and prompt projection) while the generator stays frozen; afterwards every
//! trainable group updates. Dev loss is measured every `eval_every` steps
//! and training stops after `patience` evaluations without improvement.

mod checkpoint;
mod optim;

pub use checkpoint::{config_hash, Checkpoint, CHECKPOINT_VERSION};
pub use optim::{step_optimizer, AdamWConfig, AdamWState, Moments};

use crate::autodiff::{Graph, Var};
use crate::corpus::{Instance, RelationSchema};
use crate::encoder::{encode_batch, EncodeRequest};
use crate::error::{Error, Result};
use crate::evalx::micro_f1;
use crate::matrix::Matrix;
use crate::params::{Binder, ParamGroup};
use crate::pipeline::{
    embed_queries, gold_logprob, predict_with_query, prompt_graph, random_pick_for, DbIndex, Model, ModelConfig,
    Representation, RetrievalConfig, Selection,
};
use crate::retriever::{random_select, sample_subset, Database};
use crate::seed;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    None,
    NoRetrieverTraining,
    NoWarmup,
    RandomInstances,
    ClsEmbeddings,
    NoRetrieval,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::None,
        Ablation::NoRetrieverTraining,
        Ablation::NoWarmup,
        Ablation::RandomInstances,
        Ablation::ClsEmbeddings,
        Ablation::NoRetrieval,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoRetrieverTraining => "no-retriever-training",
            Ablation::NoWarmup => "no-warmup",
            Ablation::RandomInstances => "random-instances",
            Ablation::ClsEmbeddings => "cls-embeddings",
            Ablation::NoRetrieval => "no-retrieval",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| format!("unknown ablation {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub k: usize,
    pub warmup_steps: usize,
    pub subset_size: usize,
    pub db_cap: usize,
    pub batch_size: usize,
    pub optim: AdamWConfig,
    pub tau: f64,
    pub eval_every: usize,
    pub patience: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k: 10,
            warmup_steps: 300,
            subset_size: 32,
            db_cap: 5000,
            batch_size: 16,
            optim: AdamWConfig::default(),
            tau: 1.0,
            eval_every: 100,
            patience: 3,
            max_steps: 2000,
            seed: 0,
            ablation: Ablation::None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(what.to_string()));
        if self.batch_size == 0 || self.eval_every == 0 || self.max_steps == 0 || self.db_cap == 0 {
            return bad("batch_size, eval_every, max_steps and db_cap must be positive");
        }
        if self.patience == 0 {
            return bad("patience must be positive");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if self.k > 0 && self.subset_size < self.k {
            return bad("subset_size must be at least k");
        }
        let o = &self.optim;
        if !(o.lr_base > 0.0 && o.lr_other > 0.0 && o.weight_decay >= 0.0 && o.eps > 0.0) {
            return bad("learning rates and eps must be positive, decay non-negative");
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Pipeline wiring resolved from a config and its ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wiring {
    pub retrieval: RetrievalConfig,
    pub warmup_steps: usize,
    pub train_encoder: bool,
}

pub fn apply_ablation(cfg: &TrainConfig) -> Wiring {
    let mut w = Wiring {
        retrieval: RetrievalConfig {
            k: cfg.k,
            tau: cfg.tau,
            selection: Selection::Soft,
            representation: Representation::Structured,
            seed: seed::derive_seed(cfg.seed, "random-select"),
        },
        warmup_steps: cfg.warmup_steps,
        train_encoder: true,
    };
    match cfg.ablation {
        Ablation::None => {}
        Ablation::NoRetrieverTraining => w.train_encoder = false,
        Ablation::NoWarmup => w.warmup_steps = 0,
        Ablation::RandomInstances => {
            w.retrieval.selection = Selection::Random;
            w.train_encoder = false;
        }
        Ablation::ClsEmbeddings => w.retrieval.representation = Representation::Cls,
        Ablation::NoRetrieval => {
            w.retrieval.k = 0;
            w.warmup_steps = 0;
        }
    }
    if w.retrieval.k == 0 {
        w.warmup_steps = 0;
    }
    w
}

impl Wiring {
    pub fn trainable(&self, in_warmup: bool) -> Vec<ParamGroup> {
        let mut g = Vec::new();
        if self.train_encoder && self.retrieval.enabled() {
            g.push(ParamGroup::Encoder);
        }
        if self.retrieval.enabled() {
            g.push(ParamGroup::Projection);
        }
        if !in_warmup {
            g.push(ParamGroup::Generator);
        }
        g
    }
}

/// One training example with its sampled database subset. `pick` indexes
/// into `subset` when random selection is active.
#[derive(Clone, Debug, PartialEq)]
pub struct LossItem<'a> {
    pub inst: &'a Instance,
    pub subset: Vec<usize>,
    pub pick: Option<Vec<usize>>,
}

/// Negative mean gold log-probability over `items`, with soft prompts built
/// from each item's subset. `db_cache` holds the stacked database
/// embeddings when the encoder is frozen.
pub fn batch_loss(
    g: &mut Graph,
    binder: &mut Binder,
    model: &Model,
    schema: &RelationSchema,
    db: &Database,
    wiring: &Wiring,
    items: &[LossItem],
    db_cache: Option<&Matrix>,
) -> Result<Var> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let r = &wiring.retrieval;
    let repr = r.representation;
    let l = repr.l();
    let mut prompts = vec![None; items.len()];
    if r.enabled() {
        let mut union: Vec<usize> = items.iter().flat_map(|it| it.subset.iter().copied()).collect();
        union.sort_unstable();
        union.dedup();
        let db_emb = match db_cache {
            Some(cache) => {
                let rows: Vec<usize> = union.iter().flat_map(|&d| (0..l).map(move |j| d * l + j)).collect();
                let c = g.constant(cache.clone());
                g.gather_rows(c, rows)?
            }
            None => {
                let reqs: Vec<EncodeRequest> = union
                    .iter()
                    .map(|&d| {
                        let inst = &db.instances[d];
                        EncodeRequest::new(inst, repr.db_kind(inst), schema)
                    })
                    .collect();
                encode_batch(g, binder, &model.encoder, &model.config.encoder, &reqs)?
            }
        };
        let queries = match r.selection {
            Selection::Soft => {
                let reqs: Vec<EncodeRequest> =
                    items.iter().map(|it| EncodeRequest::new(it.inst, repr.query_kind(), schema)).collect();
                Some(encode_batch(g, binder, &model.encoder, &model.config.encoder, &reqs)?)
            }
            Selection::Random => None,
        };
        for (i, it) in items.iter().enumerate() {
            let rows: Vec<usize> = it
                .subset
                .iter()
                .flat_map(|d| {
                    let u = union.binary_search(d).expect("subset member in union");
                    (0..l).map(move |j| u * l + j)
                })
                .collect();
            let cand = g.gather_rows(db_emb, rows)?;
            let q = match queries {
                Some(qs) => g.gather_rows(qs, (i * l..(i + 1) * l).collect())?,
                None => cand,
            };
            let mut ri = r.clone();
            ri.k = ri.k.min(it.subset.len());
            prompts[i] = Some(prompt_graph(g, q, cand, l, &ri, it.pick.as_deref())?);
        }
    }
    let mut total: Option<Var> = None;
    for (it, p) in items.iter().zip(&prompts) {
        let lp = gold_logprob(g, binder, model, it.inst, schema, p.as_ref())?;
        total = Some(match total {
            Some(t) => g.add(t, lp)?,
            None => lp,
        });
    }
    Ok(g.scale(total.expect("non-empty"), -1.0 / items.len() as f64))
}

/// Loss value and gradients for every parameter of the given groups.
pub fn loss_and_grads(
    model: &Model,
    schema: &RelationSchema,
    db: &Database,
    wiring: &Wiring,
    items: &[LossItem],
    trainable: &[ParamGroup],
    db_cache: Option<&Matrix>,
) -> Result<(f64, Vec<Option<Matrix>>)> {
    let mut g = Graph::new();
    let mut binder = Binder::new(&model.store, trainable);
    let loss = batch_loss(&mut g, &mut binder, model, schema, db, wiring, items, db_cache)?;
    let value = g.scalar_value(loss);
    if !value.is_finite() {
        return Ok((value, vec![None; model.store.len()]));
    }
    g.backward(loss)?;
    Ok((value, binder.grads(&g)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_f1: f64,
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("step,train_loss,dev_loss,dev_f1\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.train_loss, r.dev_loss, r.dev_f1));
    }
    out
}

/// Per-update information passed to a training observer.
#[derive(Clone, Debug)]
pub struct StepInfo {
    pub step: usize,
    pub in_warmup: bool,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Checkpoint with the best dev loss after warm-up, or the final state.
    pub best: Checkpoint,
    pub history: Vec<HistoryRow>,
    pub steps_run: usize,
    pub stopped_early: bool,
    pub db: Database,
}

/// Random-access sampling state of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    pub batches: ChaCha8Rng,
    pub subsets: ChaCha8Rng,
    pub picks: ChaCha8Rng,
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl SamplerState {
    pub fn new(seed: u64, n_train: usize) -> Self {
        SamplerState {
            batches: seed::stream(seed, "batches"),
            subsets: seed::stream(seed, "subsets"),
            picks: seed::stream(seed, "picks"),
            order: (0..n_train).collect(),
            cursor: n_train,
        }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor >= self.order.len() {
                self.order.shuffle(&mut self.batches);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Dataset positions of each training instance inside the database.
fn db_positions(train: &[Instance], db: &Database) -> Vec<Option<usize>> {
    let mut ids: Vec<(&str, usize)> = db.instances.iter().enumerate().map(|(i, d)| (d.id.as_str(), i)).collect();
    ids.sort_unstable();
    train.iter().map(|t| ids.binary_search_by_key(&t.id.as_str(), |e| e.0).ok().map(|i| ids[i].1)).collect()
}

pub fn sample_items<'a>(
    sampler: &mut SamplerState,
    train: &'a [Instance],
    positions: &[Option<usize>],
    db: &Database,
    wiring: &Wiring,
    cfg: &TrainConfig,
) -> Result<Vec<LossItem<'a>>> {
    let idx = sampler.next_batch(cfg.batch_size);
    let mut items = Vec::with_capacity(idx.len());
    for i in idx {
        let (subset, pick) = if wiring.retrieval.enabled() {
            let exclude = positions[i];
            let avail = db.len() - exclude.is_some() as usize;
            let subset = sample_subset(db.len(), cfg.subset_size.min(avail), exclude, &mut sampler.subsets)?;
            let pick = match wiring.retrieval.selection {
                Selection::Random => {
                    Some(random_select(subset.len(), wiring.retrieval.k.min(subset.len()), &mut sampler.picks)?)
                }
                Selection::Soft => None,
            };
            (subset, pick)
        } else {
            (Vec::new(), None)
        };
        items.push(LossItem { inst: &train[i], subset, pick });
    }
    Ok(items)
}

/// Mean dev loss and dev micro-F1 under evaluation-mode retrieval over the
/// full database.
pub fn dev_metrics(
    model: &Model,
    dev: &[Instance],
    schema: &RelationSchema,
    db: &Database,
    wiring: &Wiring,
) -> Result<(f64, f64)> {
    if dev.is_empty() {
        return Ok((f64::NAN, 0.0));
    }
    let r = &wiring.retrieval;
    let index = if r.enabled() { Some(DbIndex::build(model, db, schema, r.representation)?) } else { None };
    let queries = match &index {
        Some(ix) if !ix.is_empty() => {
            let refs: Vec<&Instance> = dev.iter().collect();
            Some(embed_queries(model, &refs, schema, ix.representation)?)
        }
        _ => None,
    };
    let mut total = 0.0;
    let mut preds = Vec::with_capacity(dev.len());
    for (i, inst) in dev.iter().enumerate() {
        let mut g = Graph::new();
        let mut binder = Binder::frozen(&model.store);
        let prompt = match (&index, &queries) {
            (Some(ix), Some(qs)) => {
                let q = g.constant(qs[i].rows.clone());
                let d = g.constant(ix.stacked.clone());
                let pick = match r.selection {
                    Selection::Random => Some(random_pick_for(r, inst, ix.len())?),
                    Selection::Soft => None,
                };
                let mut ri = r.clone();
                ri.k = ri.k.min(ix.len());
                Some(prompt_graph(&mut g, q, d, ix.l, &ri, pick.as_deref())?)
            }
            _ => None,
        };
        let lp = gold_logprob(&mut g, &mut binder, model, inst, schema, prompt.as_ref())?;
        total -= g.scalar_value(lp);
        let q = queries.as_ref().map(|q| &q[i]);
        preds.push(predict_with_query(model, inst, schema, index.as_ref(), q, r)?.label);
    }
    let golds: Vec<usize> = dev.iter().map(|i| i.relation).collect();
    Ok((total / dev.len() as f64, micro_f1(&preds, &golds, schema)?.f1))
}

/// The retrieval database a run with `cfg` draws from `train_set`.
pub fn build_database(train_set: &[Instance], cfg: &TrainConfig) -> Database {
    Database::build(train_set, cfg.db_cap, &mut seed::stream(cfg.seed, "database"))
}

/// The model a run with `cfg` starts from.
pub fn initial_model(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Model {
    Model::init(model_cfg.clone(), seed::derive_seed(cfg.seed, "model"))
}

pub fn train(
    train_set: &[Instance],
    dev_set: &[Instance],
    schema: &RelationSchema,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(train_set, dev_set, schema, model_cfg, cfg, |_, _| {})
}

/// [`train`] with a callback after every update.
pub fn train_observed(
    train_set: &[Instance],
    dev_set: &[Instance],
    schema: &RelationSchema,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut observer: impl FnMut(&StepInfo, &Model),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let wiring = apply_ablation(cfg);
    let db = build_database(train_set, cfg);
    if wiring.retrieval.enabled() && db.len() < 2 {
        return Err(Error::Config("retrieval needs at least two database instances".into()));
    }
    let positions = db_positions(train_set, &db);
    let mut model = initial_model(model_cfg, cfg);
    let mut opt = AdamWState::new(model.store.len());
    let mut sampler = SamplerState::new(cfg.seed, train_set.len());
    let hash = config_hash(model_cfg, cfg);

    // With the encoder frozen for the whole run its database embeddings never change.
    let frozen_cache = if wiring.retrieval.enabled() && !wiring.train_encoder {
        Some(DbIndex::build(&model, &db, schema, wiring.retrieval.representation)?.stacked)
    } else {
        None
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut bad_evals = 0;
    let mut since_eval = (0.0, 0usize);
    let mut stopped_early = false;
    let mut step = 0;
    while step < cfg.max_steps {
        let in_warmup = step < wiring.warmup_steps;
        let trainable = wiring.trainable(in_warmup);
        let items = sample_items(&mut sampler, train_set, &positions, &db, &wiring, cfg)?;
        let (loss, grads) = loss_and_grads(&model, schema, &db, &wiring, &items, &trainable, frozen_cache.as_ref())?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { step: step + 1, detail: format!("training loss is {loss}") });
        }
        if let Some(i) = grads.iter().position(|g| g.as_ref().is_some_and(|g| !g.all_finite())) {
            let name = &model.store.get(crate::params::ParamId(i)).name;
            return Err(Error::NonFinite { step: step + 1, detail: format!("gradient of {name} is not finite") });
        }
        step_optimizer(&mut model.store, &grads, &mut opt, &cfg.optim);
        step += 1;
        since_eval.0 += loss;
        since_eval.1 += 1;
        observer(&StepInfo { step, in_warmup, loss }, &model);

        if step % cfg.eval_every == 0 || step == cfg.max_steps {
            let (dev_loss, dev_f1) = dev_metrics(&model, dev_set, schema, &db, &wiring)?;
            history.push(HistoryRow { step, train_loss: since_eval.0 / since_eval.1 as f64, dev_loss, dev_f1 });
            since_eval = (0.0, 0);
            if step >= wiring.warmup_steps {
                let improved = best.as_ref().is_none_or(|(b, _)| dev_loss < *b) || dev_set.is_empty();
                if improved {
                    let ck = Checkpoint::new(&model, cfg, &hash, &opt, step, &sampler);
                    best = Some((dev_loss, ck));
                    bad_evals = 0;
                } else {
                    bad_evals += 1;
                    if bad_evals >= cfg.patience {
                        stopped_early = true;
                        break;
                    }
                }
            }
        }
    }
    let best = match best {
        Some((_, ck)) => ck,
        None => Checkpoint::new(&model, cfg, &hash, &opt, step, &sampler),
    };
    Ok(TrainOutcome { best, history, steps_run: step, stopped_early, db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }

    #[test]
    fn wiring_per_ablation() {
        let base = TrainConfig::default();
        let w = |a| apply_ablation(&TrainConfig { ablation: a, ..base.clone() });
        assert_eq!(w(Ablation::None).warmup_steps, 300);
        assert_eq!(w(Ablation::NoWarmup).warmup_steps, 0);
        assert!(!w(Ablation::NoRetrieverTraining).train_encoder);
        assert_eq!(w(Ablation::NoRetrieverTraining).retrieval.selection, Selection::Soft);
        assert_eq!(w(Ablation::RandomInstances).retrieval.selection, Selection::Random);
        assert_eq!(w(Ablation::ClsEmbeddings).retrieval.representation, Representation::Cls);
        assert_eq!(w(Ablation::NoRetrieval).retrieval.k, 0);
        assert_eq!(w(Ablation::None).trainable(true), vec![ParamGroup::Encoder, ParamGroup::Projection]);
        assert_eq!(w(Ablation::NoRetrieval).trainable(false), vec![ParamGroup::Generator]);
    }

    #[test]
    fn zero_warmup_matches_no_warmup_wiring() {
        let a = apply_ablation(&TrainConfig { warmup_steps: 0, ..Default::default() });
        let b = apply_ablation(&TrainConfig { ablation: Ablation::NoWarmup, ..Default::default() });
        assert_eq!(a, b);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { subset_size: 5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn batches_cover_epoch_before_repeating() {
        let mut s = SamplerState::new(3, 10);
        let mut seen: Vec<usize> = (0..5).flat_map(|_| s.next_batch(2)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }
}
