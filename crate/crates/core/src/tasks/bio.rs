//! Span ↔ BIO tag conversion and chunk extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A labeled token span; `end` is inclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub label: String,
}

impl Span {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Self {
        Self {
            start,
            end,
            label: label.into(),
        }
    }
}

pub fn spans_to_bio(length: usize, spans: &[Span]) -> Result<Vec<String>> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    for s in &sorted {
        if s.end < s.start || s.end >= length {
            return Err(Error::Data(format!(
                "span ({}, {}, {}) is outside a sequence of length {length}",
                s.start, s.end, s.label
            )));
        }
    }
    for pair in sorted.windows(2) {
        if pair[1].start <= pair[0].end {
            return Err(Error::Data(format!(
                "overlapping spans ({}, {}, {}) and ({}, {}, {})",
                pair[0].start, pair[0].end, pair[0].label, pair[1].start, pair[1].end, pair[1].label
            )));
        }
    }
    let mut tags = vec!["O".to_string(); length];
    for s in sorted {
        tags[s.start] = format!("B-{}", s.label);
        for t in &mut tags[s.start + 1..=s.end] {
            *t = format!("I-{}", s.label);
        }
    }
    Ok(tags)
}

fn split_tag(tag: &str) -> (&str, &str) {
    match tag.split_once('-') {
        Some((prefix, label)) => (prefix, label),
        None => (tag, ""),
    }
}

/// Extracts chunks from a tag sequence with the lenient IOB2 rules of common
/// sequence-labeling evaluators: an `I-X` that does not continue an `X` chunk
/// opens a new one.
pub fn bio_to_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut current: Option<(usize, String)> = None;
    let (mut prev_prefix, mut prev_label) = ("O".to_string(), String::new());
    for (i, tag) in tags.iter().map(AsRef::as_ref).chain(std::iter::once("O")).enumerate() {
        let (prefix, label) = split_tag(tag);
        let ends = match (prev_prefix.as_str(), prefix) {
            ("B" | "I", "B" | "O") => true,
            (p, _) if p != "O" && prev_label != label => true,
            _ => false,
        };
        if ends {
            if let Some((start, l)) = current.take() {
                out.push(Span::new(start, i - 1, l));
            }
        }
        let starts = prefix == "B"
            || (prev_prefix == "O" && prefix == "I")
            || (prefix != "O" && prev_label != label);
        if starts {
            current = Some((i, label.to_string()));
        }
        prev_prefix = prefix.to_string();
        prev_label = label.to_string();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cause_span() {
        let tags = spans_to_bio(4, &[Span::new(1, 2, "CAUSE")]).unwrap();
        assert_eq!(tags, ["O", "B-CAUSE", "I-CAUSE", "O"]);
    }

    #[test]
    fn no_spans_is_all_outside() {
        assert_eq!(spans_to_bio(3, &[]).unwrap(), ["O", "O", "O"]);
    }

    #[test]
    fn overlap_names_both_spans() {
        let err = spans_to_bio(6, &[Span::new(0, 2, "A"), Span::new(2, 3, "B")]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(0, 2, A)") && msg.contains("(2, 3, B)"), "{msg}");
    }

    #[test]
    fn out_of_range_span_rejected() {
        assert!(spans_to_bio(3, &[Span::new(2, 3, "A")]).is_err());
    }

    #[test]
    fn lenient_chunking() {
        let tags = ["I-A", "I-A", "B-A", "I-B", "O", "I-A"];
        assert_eq!(
            bio_to_spans(&tags),
            vec![Span::new(0, 1, "A"), Span::new(2, 2, "A"), Span::new(3, 3, "B"), Span::new(5, 5, "A")]
        );
    }

    fn arb_spans() -> impl Strategy<Value = (usize, Vec<Span>)> {
        (1usize..40).prop_flat_map(|len| {
            proptest::collection::vec((0..len, 0usize..4, 0usize..3), 0..8).prop_map(move |raw| {
                let mut spans: Vec<Span> = Vec::new();
                let mut cursor = 0;
                let mut starts: Vec<_> = raw;
                starts.sort();
                for (s, w, l) in starts {
                    if s < cursor {
                        continue;
                    }
                    let e = (s + w).min(len - 1);
                    spans.push(Span::new(s, e, ["CAUSE", "EFFECT", "TIME"][l]));
                    cursor = e + 1;
                }
                (len, spans)
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip((len, spans) in arb_spans()) {
            let tags = spans_to_bio(len, &spans).unwrap();
            prop_assert_eq!(tags.len(), len);
            prop_assert_eq!(bio_to_spans(&tags), spans);
        }
    }
}
