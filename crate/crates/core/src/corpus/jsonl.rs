use super::{CorpusError, Instance, RelationSchema, Result, Span, TokenId, Vocabulary};
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::fs;
use std::path::Path;

/// One JSONL line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub id: String,
    pub tokens: Vec<String>,
    pub head_span: [usize; 2],
    pub tail_span: [usize; 2],
    pub relation: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tail_type: Option<String>,
}

fn map_tokens(
    words: impl IntoIterator<Item = impl AsRef<str>>,
    vocab: &Vocabulary,
    line: usize,
) -> Result<Vec<TokenId>> {
    words
        .into_iter()
        .map(|w| {
            let w = w.as_ref();
            vocab.id(w).ok_or_else(|| CorpusError::UnknownToken { line, token: w.to_string() })
        })
        .collect()
}

fn to_instance(rec: InstanceRecord, schema: &RelationSchema, vocab: &Vocabulary, line: usize) -> Result<Instance> {
    let tokens = map_tokens(&rec.tokens, vocab, line)?;
    let relation = schema.label_id(&rec.relation).ok_or_else(|| CorpusError::UnknownLabel(rec.relation.clone()))?;
    let head_type = rec.head_type.as_deref().map(|t| map_tokens(t.split_whitespace(), vocab, line)).transpose()?;
    let tail_type = rec.tail_type.as_deref().map(|t| map_tokens(t.split_whitespace(), vocab, line)).transpose()?;
    let inst = Instance {
        id: rec.id,
        tokens,
        head_span: Span::new(rec.head_span[0], rec.head_span[1]),
        tail_span: Span::new(rec.tail_span[0], rec.tail_span[1]),
        relation,
        head_type,
        tail_type,
    };
    inst.validate(Some(schema))?;
    Ok(inst)
}

/// Parses JSONL text; line numbers in errors are 1-based. Blank lines are
/// skipped.
pub fn parse_jsonl(text: &str, schema: &RelationSchema, vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: InstanceRecord =
            serde_json::from_str(line).map_err(|e| CorpusError::Malformed { line: lineno, message: e.to_string() })?;
        let inst = to_instance(rec, schema, vocab, lineno)?;
        if !ids.insert(inst.id.clone()) {
            return Err(CorpusError::DuplicateId(inst.id));
        }
        out.push(inst);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path, schema: &RelationSchema, vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    parse_jsonl(&text, schema, vocab)
}

pub fn to_record(inst: &Instance, schema: &RelationSchema, vocab: &Vocabulary) -> InstanceRecord {
    let words = |ids: &[TokenId]| ids.iter().map(|&t| vocab.token(t).unwrap_or("<?>").to_string()).collect::<Vec<_>>();
    InstanceRecord {
        id: inst.id.clone(),
        tokens: words(&inst.tokens),
        head_span: [inst.head_span.start, inst.head_span.end],
        tail_span: [inst.tail_span.start, inst.tail_span.end],
        relation: schema.label(inst.relation).unwrap_or("<?>").to_string(),
        head_type: inst.head_type.as_deref().map(|t| words(t).join(" ")),
        tail_type: inst.tail_type.as_deref().map(|t| words(t).join(" ")),
    }
}

/// Serializes instances as JSONL text, inverse of [`parse_jsonl`].
pub fn write_jsonl_string(instances: &[Instance], schema: &RelationSchema, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(&to_record(inst, schema, vocab)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, instances: &[Instance], schema: &RelationSchema, vocab: &Vocabulary) -> Result<()> {
    fs::write(path, write_jsonl_string(instances, schema, vocab))
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TemplatePiece;

    fn fixture() -> (RelationSchema, Vocabulary) {
        let mut vocab = Vocabulary::new();
        for w in ["Obama", "was", "born", "in", "Hawaii", "no", "birthplace", "title"] {
            vocab.add(w);
        }
        let schema = RelationSchema::new(
            vec!["no_relation".into(), "per:city_of_birth".into()],
            0,
            vec![
                vec![TemplatePiece::Head, TemplatePiece::Word(vocab.id("no").unwrap()), TemplatePiece::Tail],
                vec![TemplatePiece::Head, TemplatePiece::Word(vocab.id("birthplace").unwrap()), TemplatePiece::Tail],
            ],
        )
        .unwrap();
        (schema, vocab)
    }

    const GOOD: &str = r#"{"id":"a","tokens":["Obama","was","born","in","Hawaii"],"head_span":[0,1],"tail_span":[4,5],"relation":"per:city_of_birth"}
{"id":"b","tokens":["Hawaii","was","born"],"head_span":[0,1],"tail_span":[2,3],"relation":"no_relation"}
"#;

    #[test]
    fn reads_in_order() {
        let (schema, vocab) = fixture();
        let insts = parse_jsonl(GOOD, &schema, &vocab).unwrap();
        assert_eq!(insts.len(), 2);
        assert_eq!(insts[0].id, "a");
        assert_eq!(insts[1].id, "b");
        assert_eq!(insts[0].relation, 1);
        assert_eq!(insts[0].head_tokens(), &[vocab.id("Obama").unwrap()]);
    }

    #[test]
    fn empty_span_names_the_instance() {
        let (schema, vocab) = fixture();
        let line = r#"{"id":"bad","tokens":["Obama","was","born","in","Hawaii","was"],"head_span":[5,5],"tail_span":[4,5],"relation":"no_relation"}"#;
        match parse_jsonl(line, &schema, &vocab) {
            Err(CorpusError::EmptySpan { id, .. }) => assert_eq!(id, "bad"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_label_is_named() {
        let (schema, vocab) = fixture();
        let line = r#"{"id":"x","tokens":["Obama"],"head_span":[0,1],"tail_span":[0,1],"relation":"per:title"}"#;
        match parse_jsonl(line, &schema, &vocab) {
            Err(CorpusError::UnknownLabel(l)) => assert_eq!(l, "per:title"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_carries_line_number() {
        let (schema, vocab) = fixture();
        let text = format!("{}{{not json\n", GOOD);
        match parse_jsonl(&text, &schema, &vocab) {
            Err(CorpusError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_tokens_are_errors() {
        let (schema, vocab) = fixture();
        let line = r#"{"id":"x","tokens":["Biden"],"head_span":[0,1],"tail_span":[0,1],"relation":"no_relation"}"#;
        assert!(matches!(parse_jsonl(line, &schema, &vocab), Err(CorpusError::UnknownToken { line: 1, .. })));
    }

    #[test]
    fn out_of_range_span() {
        let (schema, vocab) = fixture();
        let line = r#"{"id":"r","tokens":["Obama"],"head_span":[0,1],"tail_span":[1,2],"relation":"no_relation"}"#;
        assert!(matches!(parse_jsonl(line, &schema, &vocab), Err(CorpusError::SpanOutOfRange { .. })));
    }

    #[test]
    fn round_trip() {
        let (schema, vocab) = fixture();
        let insts = parse_jsonl(GOOD, &schema, &vocab).unwrap();
        let text = write_jsonl_string(&insts, &schema, &vocab);
        assert_eq!(text, GOOD);
        assert_eq!(parse_jsonl(&text, &schema, &vocab).unwrap(), insts);
    }

    #[test]
    fn entity_types_optional() {
        let (schema, vocab) = fixture();
        let line = r#"{"id":"t","tokens":["Obama","was"],"head_span":[0,1],"tail_span":[1,2],"relation":"no_relation","head_type":"title"}"#;
        let insts = parse_jsonl(line, &schema, &vocab).unwrap();
        assert_eq!(insts[0].head_type, Some(vec![vocab.id("title").unwrap()]));
        assert_eq!(insts[0].tail_type, None);
    }
}
