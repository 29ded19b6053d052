//! Relation instances, vocabulary, relation schema and verbalization.

mod jsonl;
mod synthetic;

pub use jsonl::{load_jsonl, parse_jsonl, to_record, write_jsonl, write_jsonl_string, InstanceRecord};
pub use synthetic::{generate_synthetic, SyntheticTask, SyntheticTaskConfig};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::PathBuf;
use thiserror::Error;

pub type TokenId = u32;
pub type LabelId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const HEAD_MARKER: TokenId = 3;
pub const TAIL_MARKER: TokenId = 4;
pub const RESERVED_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<head>", "<tail>"];

/// Verbalized inputs longer than this are truncated (sentence tail only).
pub const DEFAULT_MAX_INPUT_LEN: usize = 48;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("instance {id}: empty span {start}..{end}")]
    EmptySpan { id: String, start: usize, end: usize },
    #[error("instance {id}: span {start}..{end} out of range for {len} tokens")]
    SpanOutOfRange { id: String, start: usize, end: usize, len: usize },
    #[error("unknown relation label {0:?}")]
    UnknownLabel(String),
    #[error("relation id {0} is not in the schema")]
    UnknownLabelId(LabelId),
    #[error("line {line}: unknown token {token:?}")]
    UnknownToken { line: usize, token: String },
    #[error("duplicate instance id {0:?}")]
    DuplicateId(String),
    #[error("invalid schema: {0}")]
    Schema(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Bijective token-string ↔ token-id map; ids `0..5` are reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED_TOKENS {
            v.add(t);
        }
        v
    }

    /// Builds a vocabulary from a full token list whose first five entries
    /// are the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() || tokens[..RESERVED_TOKENS.len()] != RESERVED_TOKENS {
            return Err(CorpusError::Schema("vocabulary must start with the reserved tokens".into()));
        }
        let mut v = Vocabulary { tokens: Vec::new(), index: HashMap::new() };
        for t in tokens {
            if v.index.contains_key(&t) {
                return Err(CorpusError::Schema(format!("duplicate vocabulary token {t:?}")));
            }
            v.add(&t);
        }
        Ok(v)
    }

    /// Adds `token` if absent; returns its id either way.
    pub fn add(&mut self, token: &str) -> TokenId {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len() as TokenId;
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Half-open token span `start..end`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end
    }
}

/// One labeled relation example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub tokens: Vec<TokenId>,
    pub head_span: Span,
    pub tail_span: Span,
    pub relation: LabelId,
    pub head_type: Option<Vec<TokenId>>,
    pub tail_type: Option<Vec<TokenId>>,
}

impl Instance {
    pub fn new(
        id: impl Into<String>,
        tokens: Vec<TokenId>,
        head_span: Span,
        tail_span: Span,
        relation: LabelId,
    ) -> Self {
        Instance { id: id.into(), tokens, head_span, tail_span, relation, head_type: None, tail_type: None }
    }

    pub fn head_tokens(&self) -> &[TokenId] {
        &self.tokens[self.head_span.start..self.head_span.end]
    }

    pub fn tail_tokens(&self) -> &[TokenId] {
        &self.tokens[self.tail_span.start..self.tail_span.end]
    }

    /// Checks span bounds and, when a schema is given, the relation id.
    pub fn validate(&self, schema: Option<&RelationSchema>) -> Result<()> {
        for span in [self.head_span, self.tail_span] {
            if span.is_empty() {
                return Err(CorpusError::EmptySpan { id: self.id.clone(), start: span.start, end: span.end });
            }
            if span.end > self.tokens.len() {
                return Err(CorpusError::SpanOutOfRange {
                    id: self.id.clone(),
                    start: span.start,
                    end: span.end,
                    len: self.tokens.len(),
                });
            }
        }
        if let Some(schema) = schema {
            if self.relation >= schema.len() {
                return Err(CorpusError::UnknownLabelId(self.relation));
            }
        }
        Ok(())
    }
}

/// One element of an output template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TemplatePiece {
    Head,
    Tail,
    Word(TokenId),
}

/// Relation labels, the distinguished negative label, and one output
/// template per label.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationSchema {
    labels: Vec<String>,
    negative: LabelId,
    templates: Vec<Vec<TemplatePiece>>,
}

/// On-disk schema: templates are whitespace-separated words with `{head}`
/// and `{tail}` placeholders.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaFile {
    pub labels: Vec<String>,
    pub negative: String,
    pub templates: Vec<String>,
    pub vocab: Vec<String>,
}

impl RelationSchema {
    pub fn new(labels: Vec<String>, negative: LabelId, templates: Vec<Vec<TemplatePiece>>) -> Result<Self> {
        if labels.is_empty() {
            return Err(CorpusError::Schema("no labels".into()));
        }
        if negative >= labels.len() {
            return Err(CorpusError::Schema(format!("negative label id {negative} out of range")));
        }
        if templates.len() != labels.len() {
            return Err(CorpusError::Schema(format!("{} templates for {} labels", templates.len(), labels.len())));
        }
        let mut seen_labels = HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            if seen_labels.insert(l.clone(), i).is_some() {
                return Err(CorpusError::Schema(format!("duplicate label {l:?}")));
            }
        }
        let schema = RelationSchema { labels, negative, templates };
        // Distinctness under fixed sentinels for the placeholders.
        let mut seen = HashMap::new();
        for label in 0..schema.len() {
            let seq = schema.substitute(label, &[HEAD_MARKER], &[TAIL_MARKER]);
            if let Some(prev) = seen.insert(seq, label) {
                return Err(CorpusError::Schema(format!(
                    "labels {:?} and {:?} share a template",
                    schema.labels[prev], schema.labels[label]
                )));
            }
        }
        Ok(schema)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn label(&self, id: LabelId) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }

    pub fn label_id(&self, name: &str) -> Option<LabelId> {
        self.labels.iter().position(|l| l == name)
    }

    pub fn negative(&self) -> LabelId {
        self.negative
    }

    pub fn is_negative(&self, id: LabelId) -> bool {
        id == self.negative
    }

    pub fn template(&self, id: LabelId) -> Option<&[TemplatePiece]> {
        self.templates.get(id).map(Vec::as_slice)
    }

    /// The template's literal words, placeholders dropped.
    pub fn relation_tokens(&self, id: LabelId) -> Vec<TokenId> {
        self.templates[id]
            .iter()
            .filter_map(|p| match p {
                TemplatePiece::Word(w) => Some(*w),
                _ => None,
            })
            .collect()
    }

    fn substitute(&self, id: LabelId, head: &[TokenId], tail: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::new();
        for piece in &self.templates[id] {
            match piece {
                TemplatePiece::Head => out.extend_from_slice(head),
                TemplatePiece::Tail => out.extend_from_slice(tail),
                TemplatePiece::Word(w) => out.push(*w),
            }
        }
        out
    }

    pub fn to_file(&self, vocab: &Vocabulary) -> SchemaFile {
        let templates = self
            .templates
            .iter()
            .map(|t| {
                t.iter()
                    .map(|p| match p {
                        TemplatePiece::Head => "{head}".to_string(),
                        TemplatePiece::Tail => "{tail}".to_string(),
                        TemplatePiece::Word(w) => vocab.token(*w).unwrap_or("<?>").to_string(),
                    })
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        SchemaFile {
            labels: self.labels.clone(),
            negative: self.labels[self.negative].clone(),
            templates,
            vocab: vocab.tokens().to_vec(),
        }
    }

    pub fn from_file(file: &SchemaFile) -> Result<(RelationSchema, Vocabulary)> {
        let vocab = Vocabulary::from_tokens(file.vocab.clone())?;
        let negative = file
            .labels
            .iter()
            .position(|l| *l == file.negative)
            .ok_or_else(|| CorpusError::Schema(format!("negative label {:?} not among labels", file.negative)))?;
        let mut templates = Vec::with_capacity(file.templates.len());
        for t in &file.templates {
            let mut pieces = Vec::new();
            for word in t.split_whitespace() {
                pieces.push(match word {
                    "{head}" => TemplatePiece::Head,
                    "{tail}" => TemplatePiece::Tail,
                    w => TemplatePiece::Word(
                        vocab
                            .id(w)
                            .ok_or_else(|| CorpusError::Schema(format!("template word {w:?} not in vocabulary")))?,
                    ),
                });
            }
            templates.push(pieces);
        }
        Ok((RelationSchema::new(file.labels.clone(), negative, templates)?, vocab))
    }
}

/// `BOS, HEAD, head [type], TAIL, tail [type], sentence..., EOS`.
///
/// When longer than `max_len` only the sentence tail is dropped; the entity
/// segments are always kept whole.
pub fn verbalize_input(inst: &Instance, max_len: usize) -> Vec<TokenId> {
    let mut prefix = vec![BOS, HEAD_MARKER];
    prefix.extend_from_slice(inst.head_tokens());
    if let Some(t) = &inst.head_type {
        prefix.extend_from_slice(t);
    }
    prefix.push(TAIL_MARKER);
    prefix.extend_from_slice(inst.tail_tokens());
    if let Some(t) = &inst.tail_type {
        prefix.extend_from_slice(t);
    }
    let room = max_len.saturating_sub(prefix.len() + 1);
    let keep = inst.tokens.len().min(room);
    prefix.extend_from_slice(&inst.tokens[..keep]);
    prefix.push(EOS);
    prefix
}

/// Number of tokens `verbalize_input` puts before the sentence.
pub fn sentence_offset(inst: &Instance) -> usize {
    3 + inst.head_span.len()
        + inst.tail_span.len()
        + inst.head_type.as_ref().map_or(0, Vec::len)
        + inst.tail_type.as_ref().map_or(0, Vec::len)
}

/// The output template for `label` with placeholders filled, plus `EOS`.
pub fn verbalize_output(inst: &Instance, label: LabelId, schema: &RelationSchema) -> Result<Vec<TokenId>> {
    if label >= schema.len() {
        return Err(CorpusError::UnknownLabelId(label));
    }
    let mut out = schema.substitute(label, inst.head_tokens(), inst.tail_tokens());
    out.push(EOS);
    Ok(out)
}
