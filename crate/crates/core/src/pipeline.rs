//! The assembled model and the query → prompt → decode composition shared by
//! training and inference.

use crate::autodiff::{Graph, Var};
use crate::corpus::{verbalize_input, verbalize_output, Instance, RelationSchema, DEFAULT_MAX_INPUT_LEN};
use crate::encoder::{embed_many, EmbedKind, EncoderConfig, EncoderParams, InstanceEmbedding};
use crate::error::Result;
use crate::generator::{
    build_prompt, build_trie, encode_with_prompt, sequence_logprob, trie_beam_decode, Decoded, GeneratorConfig,
    GeneratorParams, SoftPrompt,
};
use crate::matrix::Matrix;
use crate::params::{Binder, ParamStore};
use crate::retriever::{dist_graph, random_select, select_embeddings_graph, soft_select_graph, Database};
use crate::seed;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub max_input_len: usize,
    pub beam: usize,
}

impl ModelConfig {
    pub fn for_vocab(vocab_size: usize) -> Self {
        let encoder = EncoderConfig { vocab_size, ..Default::default() };
        let generator = GeneratorConfig { vocab_size, prompt_dim: encoder.n_out, ..Default::default() };
        ModelConfig { encoder, generator, max_input_len: DEFAULT_MAX_INPUT_LEN, beam: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub generator: GeneratorParams,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let encoder = EncoderParams::init(&mut store, &config.encoder, &mut seed::stream(seed, "init/encoder"));
        let generator = GeneratorParams::init(&mut store, &config.generator, &mut seed::stream(seed, "init/generator"));
        Model { config, store, encoder, generator }
    }
}

/// How prompt instances are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Selection {
    Soft,
    /// Uniformly random instances with one-hot weights; no gradient reaches
    /// the encoder.
    Random,
}

/// Which encoder rows represent an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Representation {
    /// Head, tail and relation rows (`L = 3`).
    Structured,
    /// One row pooled over the whole sequence (`L = 1`).
    Cls,
}

impl Representation {
    pub fn db_kind(self, inst: &Instance) -> EmbedKind {
        match self {
            Representation::Structured => EmbedKind::Instance(inst.relation),
            Representation::Cls => EmbedKind::Cls,
        }
    }

    pub fn query_kind(self) -> EmbedKind {
        match self {
            Representation::Structured => EmbedKind::Query,
            Representation::Cls => EmbedKind::Cls,
        }
    }

    pub fn l(self) -> usize {
        match self {
            Representation::Structured => 3,
            Representation::Cls => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalConfig {
    /// Number of prompt instances; 0 disables retrieval.
    pub k: usize,
    pub tau: f64,
    pub selection: Selection,
    pub representation: Representation,
    /// Seed for random selection.
    pub seed: u64,
}

impl RetrievalConfig {
    pub fn enabled(&self) -> bool {
        self.k > 0
    }
}

/// Builds the soft prompt for one query inside a graph. `db` holds the
/// candidate embeddings stacked `n·l × N`; `random_pick` replaces soft
/// selection when set.
pub fn prompt_graph(
    g: &mut Graph,
    query: Var,
    db: Var,
    l: usize,
    retrieval: &RetrievalConfig,
    random_pick: Option<&[usize]>,
) -> Result<SoftPrompt> {
    let n = g.value(db).rows() / l;
    let weights = match random_pick {
        Some(pick) => {
            let mut w = Matrix::zeros(pick.len(), n);
            for (k, &d) in pick.iter().enumerate() {
                w.set(k, d, 1.0);
            }
            g.constant(w)
        }
        None => {
            let d = dist_graph(g, query, db, l)?;
            soft_select_graph(g, d, retrieval.k, retrieval.tau)?
        }
    };
    let s = select_embeddings_graph(g, weights, db, l)?;
    Ok(build_prompt(g, s, l)?)
}

/// Teacher-forced log-probability of the gold template.
pub fn gold_logprob(
    g: &mut Graph,
    binder: &mut Binder,
    model: &Model,
    inst: &Instance,
    schema: &RelationSchema,
    prompt: Option<&SoftPrompt>,
) -> Result<Var> {
    let input = verbalize_input(inst, model.config.max_input_len);
    let target = verbalize_output(inst, inst.relation, schema)?;
    let enc = encode_with_prompt(g, binder, &model.generator, &model.config.generator, &input, prompt)?;
    Ok(sequence_logprob(g, binder, &model.generator, &model.config.generator, &enc, &target)?)
}

/// Frozen embeddings of a whole database, for evaluation.
#[derive(Clone, Debug)]
pub struct DbIndex {
    pub embeddings: Vec<InstanceEmbedding>,
    pub stacked: Matrix,
    pub l: usize,
    pub representation: Representation,
}

impl DbIndex {
    pub fn build(
        model: &Model,
        db: &Database,
        schema: &RelationSchema,
        representation: Representation,
    ) -> Result<Self> {
        let refs: Vec<&Instance> = db.instances.iter().collect();
        let embeddings = embed_many(
            &model.store,
            &model.encoder,
            &model.config.encoder,
            &refs,
            |i| representation.db_kind(i),
            schema,
        )?;
        let l = representation.l();
        let cols = model.config.encoder.n_out;
        let data: Vec<f64> = embeddings.iter().flat_map(|e| e.rows.data().iter().copied()).collect();
        let stacked = Matrix::from_vec(embeddings.len() * l, cols, data).expect("uniform embedding shapes");
        Ok(DbIndex { embeddings, stacked, l, representation })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }
}

pub fn embed_queries(
    model: &Model,
    insts: &[&Instance],
    schema: &RelationSchema,
    representation: Representation,
) -> Result<Vec<InstanceEmbedding>> {
    Ok(embed_many(&model.store, &model.encoder, &model.config.encoder, insts, |_| representation.query_kind(), schema)?)
}

/// Random prompt picks for one instance, stable across calls.
pub fn random_pick_for(retrieval: &RetrievalConfig, inst: &Instance, db_len: usize) -> Result<Vec<usize>> {
    let mut rng = seed::stream(retrieval.seed, &format!("random-select/{}", inst.id));
    Ok(random_select(db_len, retrieval.k.min(db_len), &mut rng)?)
}

/// Predicts a relation for `inst`: query embedding, soft selection over the
/// full database, prompt, trie-constrained beam search. Without an index or
/// with `k = 0` the prompt is omitted.
pub fn predict(
    model: &Model,
    inst: &Instance,
    schema: &RelationSchema,
    index: Option<&DbIndex>,
    retrieval: &RetrievalConfig,
) -> Result<Decoded> {
    let query = match index {
        Some(ix) if retrieval.enabled() && !ix.is_empty() => {
            Some(embed_queries(model, &[inst], schema, ix.representation)?.remove(0))
        }
        _ => None,
    };
    predict_with_query(model, inst, schema, index, query.as_ref(), retrieval)
}

/// As [`predict`] with a precomputed query embedding.
pub fn predict_with_query(
    model: &Model,
    inst: &Instance,
    schema: &RelationSchema,
    index: Option<&DbIndex>,
    query: Option<&InstanceEmbedding>,
    retrieval: &RetrievalConfig,
) -> Result<Decoded> {
    let mut g = Graph::new();
    let mut binder = Binder::frozen(&model.store);
    let prompt = match (index, query) {
        (Some(ix), Some(q)) if retrieval.enabled() && !ix.is_empty() => {
            let qv = g.constant(q.rows.clone());
            let db = g.constant(ix.stacked.clone());
            let pick = match retrieval.selection {
                Selection::Random => Some(random_pick_for(retrieval, inst, ix.len())?),
                Selection::Soft => None,
            };
            let mut r = retrieval.clone();
            r.k = r.k.min(ix.len());
            Some(prompt_graph(&mut g, qv, db, ix.l, &r, pick.as_deref())?)
        }
        _ => None,
    };
    let cfg = &model.config.generator;
    let input = verbalize_input(inst, model.config.max_input_len);
    let enc = encode_with_prompt(&mut g, &mut binder, &model.generator, cfg, &input, prompt.as_ref())?;
    let trie = build_trie(inst, schema)?;
    Ok(trie_beam_decode(&mut g, &mut binder, &model.generator, cfg, &enc, &trie, model.config.beam)?)
}
