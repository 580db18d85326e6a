//! Target markers wrapped around the company or number a label refers to.

use serde::{Deserialize, Serialize};

use super::vocab::{COMPANY_MARKER, COMPANY_MARKER_ID, NUMBER_MARKER, NUMBER_MARKER_ID};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Company,
    Number,
}

impl MarkerKind {
    pub fn token_id(self) -> usize {
        match self {
            MarkerKind::Company => COMPANY_MARKER_ID,
            MarkerKind::Number => NUMBER_MARKER_ID,
        }
    }

    pub fn text(self) -> &'static str {
        match self {
            MarkerKind::Company => COMPANY_MARKER,
            MarkerKind::Number => NUMBER_MARKER,
        }
    }
}

/// Wraps the inclusive span `start..=end` with `marker` on both sides.
pub fn insert_target_markers<T: Clone>(tokens: &[T], start: usize, end: usize, marker: T) -> Result<Vec<T>> {
    if end < start {
        return Err(Error::Data(format!("empty target span ({start}, {end})")));
    }
    if end >= tokens.len() {
        return Err(Error::Data(format!(
            "target span ({start}, {end}) is outside a sequence of length {}",
            tokens.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.extend_from_slice(&tokens[..start]);
    out.push(marker.clone());
    out.extend_from_slice(&tokens[start..=end]);
    out.push(marker);
    out.extend_from_slice(&tokens[end + 1..]);
    Ok(out)
}

pub fn strip_target_markers<T: Clone + PartialEq>(tokens: &[T], marker: &T) -> Vec<T> {
    tokens.iter().filter(|t| *t != marker).cloned().collect()
}
