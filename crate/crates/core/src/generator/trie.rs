//! Prefix trie over per-instance relation verbalizations and constrained
//! beam decoding over it.

use super::{decoder_step, initial_state, output_logits, sequence_logprob, Encoded, GeneratorError, GeneratorParams};
use super::{GeneratorConfig, Result};
use crate::autodiff::{Graph, Var};
use crate::corpus::{verbalize_output, Instance, LabelId, RelationSchema, TokenId, BOS};
use crate::matrix::log_softmax;
use crate::params::Binder;

#[derive(Clone, Debug, Default)]
struct TrieNode {
    children: Vec<(TokenId, usize)>,
    label: Option<LabelId>,
    /// Smallest label reachable from this node, used for tie-breaks.
    min_label: LabelId,
}

#[derive(Clone, Debug)]
pub struct TemplateTrie {
    nodes: Vec<TrieNode>,
    sequences: Vec<(LabelId, Vec<TokenId>)>,
}

impl TemplateTrie {
    pub fn new() -> Self {
        TemplateTrie { nodes: vec![TrieNode { min_label: LabelId::MAX, ..Default::default() }], sequences: Vec::new() }
    }

    pub fn insert(&mut self, seq: &[TokenId], label: LabelId) -> Result<()> {
        let mut node = 0;
        self.nodes[0].min_label = self.nodes[0].min_label.min(label);
        for &tok in seq {
            node = match self.nodes[node].children.binary_search_by_key(&tok, |c| c.0) {
                Ok(i) => self.nodes[node].children[i].1,
                Err(i) => {
                    let id = self.nodes.len();
                    self.nodes.push(TrieNode { min_label: label, ..Default::default() });
                    self.nodes[node].children.insert(i, (tok, id));
                    id
                }
            };
            self.nodes[node].min_label = self.nodes[node].min_label.min(label);
        }
        if let Some(prev) = self.nodes[node].label {
            return Err(GeneratorError::DuplicateTemplate(prev, label));
        }
        self.nodes[node].label = Some(label);
        self.sequences.push((label, seq.to_vec()));
        Ok(())
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn children(&self, node: usize) -> &[(TokenId, usize)] {
        &self.nodes[node].children
    }

    pub fn label(&self, node: usize) -> Option<LabelId> {
        self.nodes[node].label
    }

    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn sequences(&self) -> &[(LabelId, Vec<TokenId>)] {
        &self.sequences
    }

    pub fn sequence(&self, label: LabelId) -> Option<&[TokenId]> {
        self.sequences.iter().find(|s| s.0 == label).map(|s| s.1.as_slice())
    }

    /// Follows `prefix` from the root.
    pub fn walk(&self, prefix: &[TokenId]) -> Option<usize> {
        let mut node = 0;
        for &tok in prefix {
            let c = &self.nodes[node].children;
            node = c[c.binary_search_by_key(&tok, |c| c.0).ok()?].1;
        }
        Some(node)
    }
}

impl Default for TemplateTrie {
    fn default() -> Self {
        Self::new()
    }
}

/// Trie of every label's verbalization for `inst`.
pub fn build_trie(inst: &Instance, schema: &RelationSchema) -> Result<TemplateTrie> {
    let mut trie = TemplateTrie::new();
    for label in 0..schema.len() {
        let seq = verbalize_output(inst, label, schema).expect("label id in range");
        trie.insert(&seq, label)?;
    }
    Ok(trie)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub label: LabelId,
    pub score: f64,
    pub tokens: Vec<TokenId>,
}

struct Hyp {
    node: usize,
    state: Var,
    prev: TokenId,
    score: f64,
    tokens: Vec<TokenId>,
}

fn better(a: (f64, LabelId), b: (f64, LabelId)) -> bool {
    a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Beam search restricted to trie paths. Completed sequences leave the beam
/// and are never pruned, so a beam at least as wide as the widest trie level
/// returns the exact argmax. Equal scores go to the smaller label id.
pub fn trie_beam_decode(
    g: &mut Graph,
    binder: &mut Binder,
    params: &GeneratorParams,
    cfg: &GeneratorConfig,
    enc: &Encoded,
    trie: &TemplateTrie,
    beam: usize,
) -> Result<Decoded> {
    if beam == 0 {
        return Err(GeneratorError::ZeroBeam);
    }
    let s0 = initial_state(g, binder, params, enc)?;
    let mut hyps = vec![Hyp { node: trie.root(), state: s0, prev: BOS, score: 0.0, tokens: Vec::new() }];
    let mut best: Option<Decoded> = None;
    while !hyps.is_empty() {
        let mut next: Vec<Hyp> = Vec::new();
        for h in &hyps {
            let (state, feats) = decoder_step(g, binder, params, cfg, enc, h.state, h.prev)?;
            let logits = output_logits(g, binder, params, feats)?;
            let lp = log_softmax(g.value(logits).row(0));
            for &(tok, child) in trie.children(h.node) {
                let score = h.score + lp[tok as usize];
                let mut tokens = h.tokens.clone();
                tokens.push(tok);
                if let Some(label) = trie.label(child) {
                    let cand = (score, label);
                    if best.as_ref().is_none_or(|b| better(cand, (b.score, b.label))) {
                        best = Some(Decoded { label, score, tokens: tokens.clone() });
                    }
                }
                if !trie.children(child).is_empty() {
                    next.push(Hyp { node: child, state, prev: tok, score, tokens });
                }
            }
        }
        next.sort_by(|a, b| {
            b.score.total_cmp(&a.score).then(trie.nodes[a.node].min_label.cmp(&trie.nodes[b.node].min_label))
        });
        next.truncate(beam);
        hyps = next;
    }
    Ok(best.expect("trie holds at least one sequence"))
}

/// Scores every sequence in the trie by teacher forcing and returns the best.
pub fn exhaustive_decode(
    g: &mut Graph,
    binder: &mut Binder,
    params: &GeneratorParams,
    cfg: &GeneratorConfig,
    enc: &Encoded,
    trie: &TemplateTrie,
) -> Result<Decoded> {
    let mut best: Option<Decoded> = None;
    for (label, seq) in trie.sequences() {
        let lp = sequence_logprob(g, binder, params, cfg, enc, seq)?;
        let score = g.scalar_value(lp);
        if best.as_ref().is_none_or(|b| better((score, *label), (b.score, b.label))) {
            best = Some(Decoded { label: *label, score, tokens: seq.clone() });
        }
    }
    Ok(best.expect("trie holds at least one sequence"))
}
