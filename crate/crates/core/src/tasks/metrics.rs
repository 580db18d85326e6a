//! Evaluation metrics. Accuracy-style scores are percentages.

use std::collections::{BTreeMap, BTreeSet};

use super::bio::bio_to_spans;
use crate::error::{Error, Result};

fn non_empty(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("metric over an empty evaluation split".into()));
    }
    Ok(())
}

pub fn rmse(pred: &[f64], gold: &[f64]) -> Result<f64> {
    non_empty(gold.len())?;
    let mse = pred.iter().zip(gold).map(|(p, g)| (p - g) * (p - g)).sum::<f64>() / gold.len() as f64;
    Ok(mse.sqrt())
}

pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    non_empty(gold.len())?;
    let hits = pred.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(100.0 * hits as f64 / gold.len() as f64)
}

/// Fraction of correctly tagged tokens over all sentences.
pub fn token_accuracy(pred: &[Vec<usize>], gold: &[Vec<usize>]) -> Result<f64> {
    let total: usize = gold.iter().map(Vec::len).sum();
    non_empty(total)?;
    let hits: usize = pred
        .iter()
        .zip(gold)
        .map(|(p, g)| p.iter().zip(g).filter(|(a, b)| a == b).count())
        .sum();
    Ok(100.0 * hits as f64 / total as f64)
}

/// Entity-level macro-F1 with exact boundary and type matching.
///
/// Entity types are the union of gold and predicted types; a type with no
/// correct chunk scores 0. When neither side contains an entity the score
/// is 100 if the tag sequences agree.
pub fn entity_macro_f1<S: AsRef<str>>(pred: &[Vec<S>], gold: &[Vec<S>]) -> Result<f64> {
    non_empty(gold.len())?;
    let collect = |seqs: &[Vec<S>]| -> BTreeSet<(usize, usize, usize, String)> {
        seqs.iter()
            .enumerate()
            .flat_map(|(i, s)| bio_to_spans(s).into_iter().map(move |c| (i, c.start, c.end, c.label)))
            .collect()
    };
    let p = collect(pred);
    let g = collect(gold);
    let mut per_type: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
    for c in &p {
        per_type.entry(&c.3).or_default().1 += 1;
    }
    for c in &g {
        let e = per_type.entry(&c.3).or_default();
        e.2 += 1;
        if p.contains(c) {
            e.0 += 1;
        }
    }
    if per_type.is_empty() {
        let agree = pred.iter().zip(gold).all(|(a, b)| {
            a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.as_ref() == y.as_ref())
        });
        return Ok(if agree { 100.0 } else { 0.0 });
    }
    let f1_sum: f64 = per_type
        .values()
        .map(|&(tp, np, ng)| {
            if tp == 0 {
                return 0.0;
            }
            let precision = tp as f64 / np as f64;
            let recall = tp as f64 / ng as f64;
            2.0 * precision * recall / (precision + recall)
        })
        .sum();
    Ok(100.0 * f1_sum / per_type.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn trivial_cases() {
        assert_eq!(accuracy(&[1, 2, 0], &[1, 2, 0]).unwrap(), 100.0);
        assert_eq!(rmse(&[0.5, -0.1], &[0.5, -0.1]).unwrap(), 0.0);
        assert!(accuracy(&[], &[]).is_err());
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn three_sentences_one_boundary_error() {
        let gold = vec![
            tags("B-CAUSE I-CAUSE O B-EFFECT I-EFFECT"),
            tags("O B-CAUSE O O"),
            tags("B-EFFECT I-EFFECT I-EFFECT O"),
        ];
        let pred = vec![
            tags("B-CAUSE I-CAUSE O B-EFFECT I-EFFECT"),
            tags("O B-CAUSE O O"),
            tags("B-EFFECT I-EFFECT O O"),
        ];
        // Hand chunking: CAUSE has 2 gold, 2 predicted, 2 correct -> F1 1.
        // EFFECT has 2 gold, 2 predicted, 1 correct -> P = R = 1/2, F1 1/2.
        let f1 = entity_macro_f1(&pred, &gold).unwrap();
        assert!((f1 - 75.0).abs() < 1e-12, "{f1}");
    }

    #[test]
    fn spurious_type_counts_as_zero() {
        let gold = vec![tags("B-A O")];
        let pred = vec![tags("B-A B-B")];
        assert!((entity_macro_f1(&pred, &gold).unwrap() - 50.0).abs() < 1e-12);
    }
}
