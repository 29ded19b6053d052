//! Retrieval-side encoder: turns an instance into `L×N` embeddings.
//!
//! Every token position is transformed independently by one
//! `tanh(x W + b)` layer whose input is the token embedding concatenated
//! with the mean embedding of its neighbours inside a small window, the mean
//! embedding of the whole sequence and a sinusoidal position code. Rows are span means of the transformed
//! positions, projected to `N`:
//!
//! | row | database instance | query | cls |
//! |-----|-------------------|-------|-----|
//! | 1   | head span         | head span | BOS |
//! | 2   | tail span         | tail span | |
//! | 3   | relation template words | EOS | |
//!
//! The text embedded for a database instance is the verbalized input with
//! the relation template words in place of the final EOS, so the relation
//! row of an instance and the EOS row of a query sit at the same position.

use crate::autodiff::{Graph, Result, Var};
use crate::corpus::{sentence_offset, verbalize_input, Instance, LabelId, RelationSchema, TokenId, EOS, PAD};
use crate::matrix::Matrix;
use crate::params::{uniform, xavier, Binder, ParamGroup, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_enc: usize,
    /// Output width `N` of every embedding row.
    pub n_out: usize,
    pub pos_dim: usize,
    /// Neighbours on each side mixed into every position.
    pub window: usize,
    /// When false the window, sequence and position inputs are zeroed, so
    /// each row depends only on the tokens inside its span.
    pub use_context: bool,
    /// Token embeddings start uniform in `[-init_bound, init_bound]`.
    pub init_bound: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 200,
            d_enc: 32,
            n_out: 16,
            pos_dim: 8,
            window: 1,
            use_context: true,
            init_bound: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embedding: ParamId,
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    pub proj_weight: ParamId,
    pub proj_bias: ParamId,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let b = cfg.init_bound;
        let mix_in = 3 * cfg.d_enc + cfg.pos_dim;
        let g = ParamGroup::Encoder;
        EncoderParams {
            token_embedding: store.add("encoder.token_embedding", g, false, uniform(rng, cfg.vocab_size, cfg.d_enc, b)),
            mix_weight: store.add("encoder.mix.weight", g, false, xavier(rng, mix_in, cfg.d_enc)),
            mix_bias: store.add("encoder.mix.bias", g, true, Matrix::zeros(1, cfg.d_enc)),
            proj_weight: store.add("encoder.proj.weight", g, false, xavier(rng, cfg.d_enc, cfg.n_out)),
            proj_bias: store.add("encoder.proj.bias", g, true, Matrix::zeros(1, cfg.n_out)),
        }
    }
}

/// An `L×N` embedding of one instance or query.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceEmbedding {
    pub rows: Matrix,
    pub source: String,
}

impl InstanceEmbedding {
    pub fn l(&self) -> usize {
        self.rows.rows()
    }
}

/// Which representation to extract.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedKind {
    /// Database instance verbalized with its relation template.
    Instance(LabelId),
    /// Prediction target, relation row read at EOS.
    Query,
    /// Single sequence-level row pooled over every position, the analogue of
    /// a sentence-summary token.
    Cls,
}

/// Token sequence plus the positions averaged into each output row.
/// `context` is the length of the leading part of `seq` whose mean every
/// position sees; it stops before any appended relation words so a query
/// and its database instance share entity rows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodeRequest {
    pub seq: Vec<TokenId>,
    pub rows: Vec<Vec<usize>>,
    pub context: usize,
}

impl EncodeRequest {
    pub fn new(inst: &Instance, kind: EmbedKind, schema: &RelationSchema) -> Self {
        let mut seq = verbalize_input(inst, usize::MAX);
        let off = sentence_offset(inst);
        let head: Vec<usize> = (inst.head_span.start..inst.head_span.end).map(|p| p + off).collect();
        let tail: Vec<usize> = (inst.tail_span.start..inst.tail_span.end).map(|p| p + off).collect();
        let eos = seq.len() - 1;
        let context = eos;
        match kind {
            EmbedKind::Query => EncodeRequest { seq, rows: vec![head, tail, vec![eos]], context },
            EmbedKind::Cls => {
                let all = (0..seq.len()).collect();
                EncodeRequest { seq, rows: vec![all], context }
            }
            EmbedKind::Instance(label) => {
                let words = schema.relation_tokens(label);
                if words.is_empty() {
                    return EncodeRequest { seq, rows: vec![head, tail, vec![eos]], context };
                }
                seq.pop();
                let rel: Vec<usize> = (seq.len()..seq.len() + words.len()).collect();
                seq.extend(words);
                seq.push(EOS);
                EncodeRequest { seq, rows: vec![head, tail, rel], context }
            }
        }
    }
}

pub fn position_code(pos: usize, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|i| {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Encodes a batch of requests into one `(Σ rows) × N` value, requests
/// stacked in order.
pub fn encode_batch(
    g: &mut Graph,
    binder: &mut Binder,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    reqs: &[EncodeRequest],
) -> Result<Var> {
    let mut tokens = Vec::new();
    let mut windows = Vec::new();
    let mut sequences = Vec::new();
    let mut codes = Vec::new();
    let mut row_groups = Vec::new();
    for req in reqs {
        let whole: Vec<usize> = req.seq[..req.context.clamp(1, req.seq.len())].iter().map(|&t| t as usize).collect();
        let mut local: Vec<(usize, usize)> = Vec::new();
        for row in &req.rows {
            let mut group = Vec::with_capacity(row.len());
            for &p in row {
                let slot = match local.iter().find(|(q, _)| *q == p) {
                    Some(&(_, s)) => s,
                    None => {
                        let s = tokens.len();
                        local.push((p, s));
                        tokens.push(req.seq[p] as usize);
                        let lo = p.saturating_sub(cfg.window);
                        let hi = (p + cfg.window).min(req.seq.len() - 1);
                        let mut nb: Vec<usize> = (lo..=hi).filter(|&q| q != p).map(|q| req.seq[q] as usize).collect();
                        if nb.is_empty() {
                            nb.push(PAD as usize);
                        }
                        windows.push(nb);
                        sequences.push(whole.clone());
                        codes.extend(position_code(p, cfg.pos_dim));
                        s
                    }
                };
                group.push(slot);
            }
            row_groups.push(group);
        }
    }
    let n = tokens.len();
    let table = binder.var(g, params.token_embedding);
    let emb = g.gather_rows(table, tokens)?;
    let x = if cfg.use_context {
        let win = g.group_mean_rows(table, windows)?;
        let whole = g.group_mean_rows(table, sequences)?;
        let pos = g.constant(Matrix::from_vec(n, cfg.pos_dim, codes).expect("sized"));
        g.concat_cols(&[emb, win, whole, pos])?
    } else {
        let zeros = g.constant(Matrix::zeros(n, 2 * cfg.d_enc + cfg.pos_dim));
        g.concat_cols(&[emb, zeros])?
    };
    let w = binder.var(g, params.mix_weight);
    let b = binder.var(g, params.mix_bias);
    let pre = g.matmul(x, w)?;
    let pre = g.add_row(pre, b)?;
    let hidden = g.tanh(pre);
    let rows = g.group_mean_rows(hidden, row_groups)?;
    let pw = binder.var(g, params.proj_weight);
    let pb = binder.var(g, params.proj_bias);
    let out = g.matmul(rows, pw)?;
    g.add_row(out, pb)
}

/// Inference-only embedding of many instances at once.
pub fn embed_many(
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
    insts: &[&Instance],
    kind_of: impl Fn(&Instance) -> EmbedKind,
    schema: &RelationSchema,
) -> Result<Vec<InstanceEmbedding>> {
    if insts.is_empty() {
        return Ok(Vec::new());
    }
    let reqs: Vec<EncodeRequest> = insts.iter().map(|i| EncodeRequest::new(i, kind_of(i), schema)).collect();
    let mut g = Graph::new();
    let mut binder = Binder::frozen(store);
    let out = encode_batch(&mut g, &mut binder, params, cfg, &reqs)?;
    let all = g.value(out);
    let mut result = Vec::with_capacity(insts.len());
    let mut r = 0;
    for (inst, req) in insts.iter().zip(&reqs) {
        let l = req.rows.len();
        let data = all.data()[r * all.cols()..(r + l) * all.cols()].to_vec();
        result.push(InstanceEmbedding {
            rows: Matrix::from_vec(l, all.cols(), data).expect("sized"),
            source: inst.id.clone(),
        });
        r += l;
    }
    Ok(result)
}

pub fn embed_instance(
    inst: &Instance,
    label: LabelId,
    schema: &RelationSchema,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<InstanceEmbedding> {
    Ok(embed_many(store, params, cfg, &[inst], |_| EmbedKind::Instance(label), schema)?.remove(0))
}

pub fn embed_query(
    inst: &Instance,
    schema: &RelationSchema,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<InstanceEmbedding> {
    let mut e = embed_many(store, params, cfg, &[inst], |_| EmbedKind::Query, schema)?.remove(0);
    e.source = "query".into();
    Ok(e)
}

pub fn embed_cls(
    inst: &Instance,
    schema: &RelationSchema,
    store: &ParamStore,
    params: &EncoderParams,
    cfg: &EncoderConfig,
) -> Result<InstanceEmbedding> {
    Ok(embed_many(store, params, cfg, &[inst], |_| EmbedKind::Cls, schema)?.remove(0))
}
