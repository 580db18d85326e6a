//! One JSON object per line:
//!
//! ```json
//! {"tokens": [12, 40, 7], "label": 2}
//! {"tokens": ["ICE", "considers", "offer"], "label": 0.4, "target_span": [0, 0]}
//! {"tokens": [5, 6, 7], "spans": [{"start": 0, "end": 1, "label": "QUANT"}]}
//! {"tokens": [5, 6, 7], "label": ["B-QUANT", "I-QUANT", "O"]}
//! ```
//!
//! Tokens are ids or strings; strings go through
//! [`token_id`](crate::tasks::vocab::token_id). `target_span` is inclusive.
//! An optional `latent` object carries generator latents.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::synth::Latent;
use crate::tasks::vocab::token_id;
use crate::tasks::{ingest, RawExample, RawLabel, Span, TaskExample, TaskKind, TaskSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum Token {
    Id(usize),
    Text(String),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<Token>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spans: Option<Vec<Span>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    target_span: Option<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    latent: Option<Latent>,
}

fn raw_label(kind: &TaskKind, label: Option<Value>, spans: Option<Vec<Span>>) -> Result<RawLabel> {
    let bad = |what: &str| Error::Data(what.to_string());
    match (kind, label, spans) {
        (_, Some(_), Some(_)) => Err(bad("give either `label` or `spans`, not both")),
        (TaskKind::TokenClassification { .. }, None, Some(spans)) => Ok(RawLabel::Spans(spans)),
        (_, None, Some(_)) => Err(bad("`spans` only apply to token classification")),
        (_, None, None) => Err(bad("missing `label`")),
        (TaskKind::SeqRegression, Some(v), None) => v
            .as_f64()
            .map(RawLabel::Score)
            .ok_or_else(|| bad("regression label must be a number")),
        (TaskKind::SeqClassification { .. }, Some(v), None) => v
            .as_u64()
            .map(|c| RawLabel::Class(c as usize))
            .ok_or_else(|| bad("class label must be a non-negative integer")),
        (TaskKind::TokenClassification { .. }, Some(v), None) => serde_json::from_value::<Vec<String>>(v)
            .map(RawLabel::Tags)
            .map_err(|_| bad("token label must be a list of tag strings")),
    }
}

fn parse_line(line: &str, spec: &TaskSpec, vocab_size: usize) -> Result<TaskExample> {
    let rec: Record = serde_json::from_str(line).map_err(|e| Error::Data(e.to_string()))?;
    let tokens = rec
        .tokens
        .into_iter()
        .map(|t| match t {
            Token::Id(id) if id < vocab_size => Ok(id),
            Token::Id(id) => Err(Error::Data(format!("token id {id} outside vocabulary of {vocab_size}"))),
            Token::Text(s) => Ok(token_id(&s, vocab_size)),
        })
        .collect::<Result<Vec<_>>>()?;
    let raw = RawExample {
        tokens,
        label: raw_label(&spec.kind, rec.label, rec.spans)?,
        target_span: rec.target_span,
        latent: rec.latent,
    };
    ingest(raw, spec)
}

/// Reads and preprocesses a dataset for `spec`. Blank lines are skipped.
pub fn load_jsonl_dataset(path: &Path, spec: &TaskSpec, vocab_size: usize) -> Result<Vec<TaskExample>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex = parse_line(&line, spec, vocab_size).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}:{}: {msg}", path.display(), i + 1)),
            other => other,
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Writes raw records in the format read by [`load_jsonl_dataset`].
pub fn write_jsonl_dataset(path: &Path, examples: &[RawExample]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for ex in examples {
        let (label, spans) = match &ex.label {
            RawLabel::Score(s) => (Some(Value::from(*s)), None),
            RawLabel::Class(c) => (Some(Value::from(*c)), None),
            RawLabel::Tags(t) => (Some(Value::from(t.clone())), None),
            RawLabel::Spans(s) => (None, Some(s.clone())),
        };
        let rec = Record {
            tokens: ex.tokens.iter().map(|&t| Token::Id(t)).collect(),
            label,
            spans,
            target_span: ex.target_span,
            latent: ex.latent.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
