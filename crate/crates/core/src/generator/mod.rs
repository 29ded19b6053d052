//! Toy seq2seq relation generator.
//!
//! The input side embeds the verbalized input, splices the projected soft
//! prompt in right after BOS and applies one position-aware `tanh` layer.
//! The decoder is a GRU cell with scaled dot-product attention over the
//! encoded states; each step's output features `[hidden, context]` feed a
//! linear layer over the vocabulary.

mod trie;

pub use trie::{build_trie, exhaustive_decode, trie_beam_decode, Decoded, TemplateTrie};

use crate::autodiff::{AutodiffError, Graph, Var};
use crate::corpus::{TokenId, BOS};
use crate::encoder::position_code;
use crate::matrix::Matrix;
use crate::params::{uniform, xavier, Binder, ParamGroup, ParamId, ParamStore};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeneratorError {
    #[error("labels {0} and {1} verbalize identically for this instance")]
    DuplicateTemplate(usize, usize),
    #[error("beam width must be at least 1")]
    ZeroBeam,
    #[error("soft prompt has {rows} rows, expected a multiple of {l}")]
    PromptShape { rows: usize, l: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, GeneratorError>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_dec: usize,
    pub pos_dim: usize,
    /// Width `N` of incoming soft-prompt rows.
    pub prompt_dim: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { vocab_size: 200, d_model: 32, d_dec: 32, pos_dim: 8, prompt_dim: 16 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GruParams {
    pub wz: ParamId,
    pub wr: ParamId,
    pub wn: ParamId,
    pub uz: ParamId,
    pub ur: ParamId,
    pub un: ParamId,
    pub bz: ParamId,
    pub br: ParamId,
    pub bn: ParamId,
    pub bhn: ParamId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub token_embedding: ParamId,
    pub mix_weight: ParamId,
    pub mix_bias: ParamId,
    pub prompt_weight: ParamId,
    pub prompt_bias: ParamId,
    pub init_weight: ParamId,
    pub init_bias: ParamId,
    pub attn_query: ParamId,
    pub gru: GruParams,
    pub out_weight: ParamId,
    pub out_bias: ParamId,
}

impl GeneratorParams {
    pub fn init(store: &mut ParamStore, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let (v, d, h) = (cfg.vocab_size, cfg.d_model, cfg.d_dec);
        let g = ParamGroup::Generator;
        let token_embedding = store.add("generator.token_embedding", g, false, uniform(rng, v, d, 1.0));
        let mut w =
            |store: &mut ParamStore, name: &str, r: usize, c: usize| store.add(name, g, false, xavier(rng, r, c));
        let mix_weight = w(store, "generator.mix.weight", d + cfg.pos_dim, d);
        let init_weight = w(store, "generator.init.weight", d, h);
        let attn_query = w(store, "generator.attn.query", h, d);
        let wz = w(store, "generator.gru.wz", 2 * d, h);
        let wr = w(store, "generator.gru.wr", 2 * d, h);
        let wn = w(store, "generator.gru.wn", 2 * d, h);
        let uz = w(store, "generator.gru.uz", h, h);
        let ur = w(store, "generator.gru.ur", h, h);
        let un = w(store, "generator.gru.un", h, h);
        let out_weight = w(store, "generator.out.weight", h + d, v);
        let prompt_init = if cfg.prompt_dim == d {
            let mut m = Matrix::zeros(d, d);
            for i in 0..d {
                m.set(i, i, 1.0);
            }
            m
        } else {
            xavier(rng, cfg.prompt_dim, d)
        };
        let prompt_weight = store.add("projection.weight", ParamGroup::Projection, false, prompt_init);
        let prompt_bias = store.add("projection.bias", ParamGroup::Projection, true, Matrix::zeros(1, d));
        let bias = |store: &mut ParamStore, name: &str, c: usize| store.add(name, g, true, Matrix::zeros(1, c));
        GeneratorParams {
            token_embedding,
            mix_weight,
            mix_bias: bias(store, "generator.mix.bias", d),
            prompt_weight,
            prompt_bias,
            init_weight,
            init_bias: bias(store, "generator.init.bias", h),
            attn_query,
            gru: GruParams {
                wz,
                wr,
                wn,
                uz,
                ur,
                un,
                bz: bias(store, "generator.gru.bz", h),
                br: bias(store, "generator.gru.br", h),
                bn: bias(store, "generator.gru.bn", h),
                bhn: bias(store, "generator.gru.bhn", h),
            },
            out_weight,
            out_bias: bias(store, "generator.out.bias", v),
        }
    }
}

/// Soft prompt: `K·L × N` rows in k-major, l-minor order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftPrompt {
    pub rows: Var,
    pub k: usize,
    pub l: usize,
}

/// Stacks selected embeddings (already `K·L × N`, k-major) into a prompt.
pub fn build_prompt(g: &Graph, selected: Var, l: usize) -> Result<SoftPrompt> {
    let rows = g.value(selected).rows();
    if l == 0 || rows % l != 0 {
        return Err(GeneratorError::PromptShape { rows, l });
    }
    Ok(SoftPrompt { rows: selected, k: rows / l, l })
}

/// Encoded input states, `(|x| + K·L) × d_model`.
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    pub states: Var,
    states_t: Var,
}

impl Encoded {
    pub fn len(&self, g: &Graph) -> usize {
        g.value(self.states).rows()
    }
}

pub fn encode_with_prompt(
    g: &mut Graph,
    binder: &mut Binder,
    params: &GeneratorParams,
    cfg: &GeneratorConfig,
    input_ids: &[TokenId],
    prompt: Option<&SoftPrompt>,
) -> Result<Encoded> {
    let table = binder.var(g, params.token_embedding);
    let ids: Vec<usize> = input_ids.iter().map(|&t| t as usize).collect();
    let x = match prompt {
        Some(p) if p.k > 0 && !ids.is_empty() => {
            let w = binder.var(g, params.prompt_weight);
            let b = binder.var(g, params.prompt_bias);
            let proj = g.matmul(p.rows, w)?;
            let proj = g.add_row(proj, b)?;
            let bos = g.gather_rows(table, ids[..1].to_vec())?;
            let rest = g.gather_rows(table, ids[1..].to_vec())?;
            g.concat_rows(&[bos, proj, rest])?
        }
        _ => g.gather_rows(table, ids)?,
    };
    let t = g.value(x).rows();
    let codes: Vec<f64> = (0..t).flat_map(|p| position_code(p, cfg.pos_dim)).collect();
    let pos = g.constant(Matrix::from_vec(t, cfg.pos_dim, codes).expect("sized"));
    let xin = g.concat_cols(&[x, pos])?;
    let w = binder.var(g, params.mix_weight);
    let b = binder.var(g, params.mix_bias);
    let pre = g.matmul(xin, w)?;
    let pre = g.add_row(pre, b)?;
    let states = g.tanh(pre);
    let states_t = g.transpose(states);
    Ok(Encoded { states, states_t })
}

pub fn initial_state(g: &mut Graph, binder: &mut Binder, params: &GeneratorParams, enc: &Encoded) -> Result<Var> {
    let t = g.value(enc.states).rows();
    let total = g.sum_axis(enc.states, crate::autodiff::Axis::Rows);
    let mean = g.scale(total, 1.0 / t as f64);
    let w = binder.var(g, params.init_weight);
    let b = binder.var(g, params.init_bias);
    let pre = g.matmul(mean, w)?;
    let pre = g.add_row(pre, b)?;
    Ok(g.tanh(pre))
}

/// One decoder step: returns the new hidden state and the `1×(d_dec+d_model)`
/// output features.
pub fn decoder_step(
    g: &mut Graph,
    binder: &mut Binder,
    params: &GeneratorParams,
    cfg: &GeneratorConfig,
    enc: &Encoded,
    state: Var,
    prev: TokenId,
) -> Result<(Var, Var)> {
    let wq = binder.var(g, params.attn_query);
    let q = g.matmul(state, wq)?;
    let scores = g.matmul(q, enc.states_t)?;
    let scores = g.scale(scores, 1.0 / (cfg.d_model as f64).sqrt());
    let attn = g.softmax_rows(scores);
    let context = g.matmul(attn, enc.states)?;
    let table = binder.var(g, params.token_embedding);
    let emb = g.gather_rows(table, vec![prev as usize])?;
    let x = g.concat_cols(&[emb, context])?;

    let p = &params.gru;
    let mut gate = |g: &mut Graph, wx: ParamId, uh: ParamId, b: ParamId| -> Result<Var> {
        let wx = binder.var(g, wx);
        let uh = binder.var(g, uh);
        let b = binder.var(g, b);
        let a = g.matmul(x, wx)?;
        let c = g.matmul(state, uh)?;
        let s = g.add(a, c)?;
        Ok(g.add_row(s, b)?)
    };
    let z = gate(g, p.wz, p.uz, p.bz)?;
    let z = g.sigmoid(z);
    let r = gate(g, p.wr, p.ur, p.br)?;
    let r = g.sigmoid(r);
    let wn = binder.var(g, p.wn);
    let un = binder.var(g, p.un);
    let bn = binder.var(g, p.bn);
    let bhn = binder.var(g, p.bhn);
    let hn = g.matmul(state, un)?;
    let hn = g.add_row(hn, bhn)?;
    let rhn = g.mul(r, hn)?;
    let xn = g.matmul(x, wn)?;
    let n = g.add(xn, rhn)?;
    let n = g.add_row(n, bn)?;
    let n = g.tanh(n);
    let diff = g.sub(state, n)?;
    let keep = g.mul(z, diff)?;
    let next = g.add(n, keep)?;
    let features = g.concat_cols(&[next, context])?;
    Ok((next, features))
}

/// Vocabulary logits for stacked step features.
pub fn output_logits(g: &mut Graph, binder: &mut Binder, params: &GeneratorParams, features: Var) -> Result<Var> {
    let w = binder.var(g, params.out_weight);
    let b = binder.var(g, params.out_bias);
    let l = g.matmul(features, w)?;
    Ok(g.add_row(l, b)?)
}

/// Teacher-forced `Σ_t log p(target_t | target_<t, input)` as a `1×1` value.
pub fn sequence_logprob(
    g: &mut Graph,
    binder: &mut Binder,
    params: &GeneratorParams,
    cfg: &GeneratorConfig,
    enc: &Encoded,
    target: &[TokenId],
) -> Result<Var> {
    let mut state = initial_state(g, binder, params, enc)?;
    let mut feats = Vec::with_capacity(target.len());
    let mut prev = BOS;
    for &t in target {
        let (next, f) = decoder_step(g, binder, params, cfg, enc, state, prev)?;
        state = next;
        feats.push(f);
        prev = t;
    }
    let stacked = g.concat_rows(&feats)?;
    let logits = output_logits(g, binder, params, stacked)?;
    let nll = g.cross_entropy(logits, target.iter().map(|&t| t as usize).collect())?;
    Ok(g.scale(nll, -1.0))
}

pub use crate::pipeline::predict;
