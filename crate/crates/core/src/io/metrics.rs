//! Run outputs: `run.json` plus header-first CSV files.
//!
//! | file | columns |
//! |---|---|
//! | `repgen.csv` | `step,layer,G` |
//! | `gradsim_step{N}.csv` | `task,<task>...`, one row per task; empty cell = undefined |
//! | `probe.csv` | `layer,w` |
//! | `embeddings.csv` | `kind,task_a,task_b,cosine` |
//! | `aggregate.csv` | `task,metric,n,mean,std` |

use std::fmt::Write as _;
use std::path::Path;

use crate::analysis::{GenCurve, SimilarityMatrix};
use crate::engine::{RunArtifacts, RunRecord, SeedAggregate};
use crate::error::{Error, Result};

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write(path, &text)
}

pub fn repgen_csv(curves: &[GenCurve]) -> String {
    let mut rows: Vec<(u64, usize, f64)> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(move |&(s, g)| (s, c.layer, g)))
        .collect();
    rows.sort_by_key(|&(s, l, _)| (s, l));
    let mut out = String::from("step,layer,G\n");
    for (s, l, g) in rows {
        writeln!(out, "{s},{l},{g}").expect("string write");
    }
    out
}

pub fn matrix_csv(m: &SimilarityMatrix) -> String {
    let mut out = format!("task,{}\n", m.labels.join(","));
    for (label, row) in m.labels.iter().zip(&m.values) {
        let cells: Vec<String> = row.iter().map(|&v| cell(v)).collect();
        writeln!(out, "{label},{}", cells.join(",")).expect("string write");
    }
    out
}

pub fn probe_csv(weights: &[f64]) -> String {
    let mut out = String::from("layer,w\n");
    for (l, w) in weights.iter().enumerate() {
        writeln!(out, "{l},{w}").expect("string write");
    }
    out
}

/// Long-format rows for named similarity matrices, upper triangle with diagonal.
pub fn embeddings_csv(matrices: &[(&str, &SimilarityMatrix)]) -> String {
    let mut out = String::from("kind,task_a,task_b,cosine\n");
    for (kind, m) in matrices {
        for i in 0..m.labels.len() {
            for j in i..m.labels.len() {
                writeln!(out, "{kind},{},{},{}", m.labels[i], m.labels[j], cell(m.values[i][j])).expect("string write");
            }
        }
    }
    out
}

pub fn aggregate_csv(agg: &SeedAggregate) -> String {
    let mut out = String::from("task,metric,n,mean,std\n");
    for t in &agg.tasks {
        let metric = serde_json::to_value(t.metric).expect("enum serializes");
        let metric = metric.as_str().unwrap_or_default();
        writeln!(out, "{},{metric},{},{},{}", t.task, t.scores.len(), t.mean, t.std).expect("string write");
    }
    out
}

fn check_label(label: &str) -> Result<()> {
    if label.contains([',', '\n', '"']) {
        return Err(Error::config("tasks", format!("task id `{label}` cannot be written to CSV")));
    }
    Ok(())
}

/// Writes `run.json` and every CSV the artifacts support into `outdir`.
pub fn emit_metrics(outdir: &Path, record: &RunRecord, artifacts: &RunArtifacts) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    for t in &record.tasks {
        check_label(&t.task)?;
    }
    write_json(&outdir.join("run.json"), record)?;
    if !artifacts.rep_gen.is_empty() {
        write(&outdir.join("repgen.csv"), &repgen_csv(&artifacts.rep_gen))?;
    }
    for g in &artifacts.grad_sims {
        write(&outdir.join(format!("gradsim_step{}.csv", g.step)), &matrix_csv(&g.matrix))?;
    }
    if let Some(w) = &artifacts.probe {
        write(&outdir.join("probe.csv"), &probe_csv(w))?;
    }
    Ok(())
}

pub fn emit_embeddings(outdir: &Path, task: &SimilarityMatrix, text: &SimilarityMatrix) -> Result<()> {
    for l in &task.labels {
        check_label(l)?;
    }
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    write(&outdir.join("embeddings.csv"), &embeddings_csv(&[("task", task), ("text", text)]))
}

pub fn emit_aggregate(outdir: &Path, agg: &SeedAggregate) -> Result<()> {
    std::fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    write_json(&outdir.join("aggregate.json"), agg)?;
    write(&outdir.join("aggregate.csv"), &aggregate_csv(agg))
}

fn parse_f64(s: &str, path: &Path, line: usize) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Data(format!("{}:{line}: `{s}` is not a number", path.display())))
}

/// Reads a matrix written by [`matrix_csv`].
pub fn read_matrix_csv(path: &Path) -> Result<SimilarityMatrix> {
    let text = read(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut values = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != labels.len() + 1 || labels.get(values.len()).map(String::as_str) != Some(cells[0]) {
            return Err(Error::Data(format!("{}:{}: malformed row", path.display(), i + 2)));
        }
        values.push(
            cells[1..]
                .iter()
                .map(|c| if c.is_empty() { Ok(None) } else { parse_f64(c, path, i + 2).map(Some) })
                .collect::<Result<Vec<_>>>()?,
        );
    }
    if values.len() != labels.len() {
        return Err(Error::Data(format!("{}: matrix is not square", path.display())));
    }
    Ok(SimilarityMatrix { labels, values })
}

/// Reads curves written by [`repgen_csv`], ordered by layer.
pub fn read_repgen_csv(path: &Path) -> Result<Vec<GenCurve>> {
    let text = read(path)?;
    let mut curves: Vec<GenCurve> = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 3 {
            return Err(Error::Data(format!("{}:{}: expected 3 columns", path.display(), i + 1)));
        }
        let step = parse_f64(cells[0], path, i + 1)? as u64;
        let layer = parse_f64(cells[1], path, i + 1)? as usize;
        let g = parse_f64(cells[2], path, i + 1)?;
        match curves.iter_mut().find(|c| c.layer == layer) {
            Some(c) => c.points.push((step, g)),
            None => curves.push(GenCurve {
                layer,
                points: vec![(step, g)],
            }),
        }
    }
    curves.sort_by_key(|c| c.layer);
    Ok(curves)
}
