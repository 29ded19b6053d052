//! Seeded synthetic relation-extraction task.
//!
//! Positive instances come in two kinds. Fact instances pair a recurring
//! (head, tail) entity pair from a fixed fact table with a label-free cue
//! word; their label is the fact's label and can only be recovered by
//! remembering or retrieving other mentions of the same pair. Cue instances
//! carry a label-specific cue word and a fresh entity pair, so the sentence
//! alone determines the label. `label_entity_correlation` is the share of
//! positives that are fact instances. Negatives carry no cue at all.
//!
//! In every sentence the cue (or a filler, for negatives) sits right after
//! the head mention, inside the encoder's context window.

use super::{CorpusError, Instance, LabelId, RelationSchema, Result, Span, TemplatePiece, TokenId, Vocabulary};
use crate::seed;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;

const GENERIC_CUES: usize = 4;
const MIN_FILLERS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskConfig {
    /// Total label count, the negative label included.
    pub n_labels: usize,
    pub n_entities: usize,
    pub vocab_size: usize,
    pub sentence_len: (usize, usize),
    pub label_entity_correlation: f64,
    pub noise_rate: f64,
    pub negative_fraction: f64,
    /// Fact pairs per entity in the fact table.
    pub facts_per_entity: f64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskConfig {
    fn default() -> Self {
        SyntheticTaskConfig {
            n_labels: 9,
            n_entities: 40,
            vocab_size: 200,
            sentence_len: (8, 16),
            label_entity_correlation: 0.9,
            noise_rate: 0.05,
            negative_fraction: 0.6,
            facts_per_entity: 1.5,
            n_train: 512,
            n_dev: 128,
            n_test: 256,
            seed: 0,
        }
    }
}

impl SyntheticTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.n_labels == 0 || self.n_entities < 2 || self.vocab_size == 0 {
            return bad("n_labels, vocab_size must be positive and n_entities at least 2");
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return bad("split sizes must be positive");
        }
        let (lo, hi) = self.sentence_len;
        if lo < 3 || lo > hi {
            return bad("sentence_len must satisfy 3 <= min <= max");
        }
        for (name, r) in [
            ("label_entity_correlation", self.label_entity_correlation),
            ("noise_rate", self.noise_rate),
            ("negative_fraction", self.negative_fraction),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return Err(CorpusError::Config(format!("{name} = {r} outside [0, 1]")));
            }
        }
        if !(self.facts_per_entity > 0.0) {
            return bad("facts_per_entity must be positive");
        }
        let needed = self.fixed_vocab() + MIN_FILLERS;
        if self.vocab_size < needed {
            return Err(CorpusError::Config(format!(
                "vocab_size {} too small: reserved tokens, templates, entities and cues need {needed}",
                self.vocab_size
            )));
        }
        Ok(())
    }

    fn n_positive(&self) -> usize {
        self.n_labels - 1
    }

    fn n_groups(&self) -> usize {
        self.n_positive().div_ceil(3)
    }

    fn fixed_vocab(&self) -> usize {
        5 + 2 + self.n_groups() + self.n_positive() + self.n_entities + GENERIC_CUES + self.n_positive()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub train: Vec<Instance>,
    pub dev: Vec<Instance>,
    pub test: Vec<Instance>,
    pub schema: RelationSchema,
    pub vocab: Vocabulary,
}

struct Layout {
    entities: Vec<TokenId>,
    generic_cues: Vec<TokenId>,
    label_cues: Vec<TokenId>,
    fillers: Vec<TokenId>,
}

fn build_vocab_and_schema(cfg: &SyntheticTaskConfig) -> Result<(Vocabulary, RelationSchema, Layout)> {
    let mut vocab = Vocabulary::new();
    let no = vocab.add("no");
    let relation = vocab.add("relation");
    let groups: Vec<TokenId> = (0..cfg.n_groups()).map(|g| vocab.add(&format!("kind{g}"))).collect();
    let rel_words: Vec<TokenId> = (0..cfg.n_positive()).map(|i| vocab.add(&format!("rel{i}"))).collect();
    let entities = (0..cfg.n_entities).map(|i| vocab.add(&format!("ent{i}"))).collect();
    let generic_cues = (0..GENERIC_CUES).map(|i| vocab.add(&format!("cue{i}"))).collect();
    let label_cues = (0..cfg.n_positive()).map(|i| vocab.add(&format!("sig{i}"))).collect();
    let n_fillers = cfg.vocab_size - vocab.len();
    let fillers = (0..n_fillers).map(|i| vocab.add(&format!("w{i}"))).collect();

    let mut labels = vec!["no_relation".to_string()];
    let mut templates =
        vec![vec![TemplatePiece::Head, TemplatePiece::Word(no), TemplatePiece::Word(relation), TemplatePiece::Tail]];
    for i in 0..cfg.n_positive() {
        labels.push(format!("rel:{i}"));
        templates.push(vec![
            TemplatePiece::Head,
            TemplatePiece::Word(groups[i / 3]),
            TemplatePiece::Word(rel_words[i]),
            TemplatePiece::Tail,
        ]);
    }
    let schema = RelationSchema::new(labels, 0, templates)?;
    Ok((vocab, schema, Layout { entities, generic_cues, label_cues, fillers }))
}

struct Fact {
    head: usize,
    tail: usize,
    label: LabelId,
}

fn build_facts(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng) -> Vec<Fact> {
    if cfg.n_positive() == 0 {
        return Vec::new();
    }
    let max_pairs = cfg.n_entities * (cfg.n_entities - 1);
    let n = ((cfg.facts_per_entity * cfg.n_entities as f64).round() as usize).clamp(1, max_pairs);
    let mut seen = HashSet::new();
    let mut facts = Vec::with_capacity(n);
    while facts.len() < n {
        let head = rng.gen_range(0..cfg.n_entities);
        let tail = rng.gen_range(0..cfg.n_entities);
        if head == tail || !seen.insert((head, tail)) {
            continue;
        }
        facts.push(Fact { head, tail, label: 1 + rng.gen_range(0..cfg.n_positive()) });
    }
    facts
}

/// What to emit for one instance before sentence realisation.
struct Draft {
    head: usize,
    tail: usize,
    cue: Option<TokenId>,
    label: LabelId,
}

fn random_pair(cfg: &SyntheticTaskConfig, rng: &mut ChaCha8Rng, avoid: &HashSet<(usize, usize)>) -> (usize, usize) {
    loop {
        let h = rng.gen_range(0..cfg.n_entities);
        let t = rng.gen_range(0..cfg.n_entities);
        if h != t && !avoid.contains(&(h, t)) {
            return (h, t);
        }
    }
}

fn realise(draft: &Draft, id: String, cfg: &SyntheticTaskConfig, layout: &Layout, rng: &mut ChaCha8Rng) -> Instance {
    let len = rng.gen_range(cfg.sentence_len.0..=cfg.sentence_len.1);
    let mut tokens: Vec<TokenId> = (0..len).map(|_| *layout.fillers.choose(rng).expect("fillers exist")).collect();
    let head_pos = rng.gen_range(0..len - 2);
    let cue_pos = head_pos + 1;
    let free: Vec<usize> = (0..len).filter(|&p| p != head_pos && p != cue_pos).collect();
    let tail_pos = *free.choose(rng).expect("sentence has room");
    tokens[head_pos] = layout.entities[draft.head];
    tokens[tail_pos] = layout.entities[draft.tail];
    if let Some(cue) = draft.cue {
        tokens[cue_pos] = cue;
    }
    Instance::new(id, tokens, Span::new(head_pos, head_pos + 1), Span::new(tail_pos, tail_pos + 1), draft.label)
}

/// Generates train/dev/test splits, schema and vocabulary. Deterministic in
/// `cfg.seed`.
pub fn generate_synthetic(cfg: &SyntheticTaskConfig) -> Result<SyntheticTask> {
    cfg.validate()?;
    let (vocab, schema, layout) = build_vocab_and_schema(cfg)?;
    let mut rng = seed::stream(cfg.seed, "synthetic");
    let facts = build_facts(cfg, &mut rng);
    let fact_pairs: HashSet<(usize, usize)> = facts.iter().map(|f| (f.head, f.tail)).collect();

    let make_split = |name: &str, n: usize, rng: &mut ChaCha8Rng| -> Vec<Instance> {
        let n_neg = if cfg.n_positive() == 0 { n } else { (cfg.negative_fraction * n as f64).round() as usize };
        let mut is_negative: Vec<bool> = (0..n).map(|i| i < n_neg).collect();
        is_negative.shuffle(rng);
        is_negative
            .into_iter()
            .enumerate()
            .map(|(i, negative)| {
                let mut draft = if negative {
                    let (head, tail) = random_pair(cfg, rng, &fact_pairs);
                    Draft { head, tail, cue: None, label: schema.negative() }
                } else if rng.gen_bool(cfg.label_entity_correlation) {
                    let f = facts.choose(rng).expect("positive labels imply facts");
                    let cue = *layout.generic_cues.choose(rng).expect("cues exist");
                    Draft { head: f.head, tail: f.tail, cue: Some(cue), label: f.label }
                } else {
                    let (head, tail) = random_pair(cfg, rng, &fact_pairs);
                    let label = 1 + rng.gen_range(0..cfg.n_positive());
                    Draft { head, tail, cue: Some(layout.label_cues[label - 1]), label }
                };
                if cfg.noise_rate > 0.0 && rng.gen_bool(cfg.noise_rate) {
                    draft.label = rng.gen_range(0..cfg.n_labels);
                }
                realise(&draft, format!("{name}-{i:05}"), cfg, &layout, rng)
            })
            .collect()
    };
    let train = make_split("train", cfg.n_train, &mut rng);
    let dev = make_split("dev", cfg.n_dev, &mut rng);
    let test = make_split("test", cfg.n_test, &mut rng);
    Ok(SyntheticTask { train, dev, test, schema, vocab })
}
