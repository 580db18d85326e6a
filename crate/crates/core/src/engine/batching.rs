//! Mixed-task batch streams.
//!
//! At temperature 1 every task is shuffled and cut into batches, and the
//! union of all batches is shuffled, so a task's share of batches follows
//! its share of batches-worth of data. At any other temperature each draw
//! picks task `t` with probability proportional to `|D_t|^(1/T)` and takes
//! that task's next batch, reshuffling a task whenever it runs out.
//!
//! An epoch always holds `Σ ceil(|D_t| / b_t)` batches. Every epoch is a
//! pure function of `(seed, epoch)`.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seeding::{fnv1a, rng};

/// Indices into one task's training split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchRef {
    pub task: usize,
    pub indices: Vec<usize>,
}

fn stream(label: &str) -> u64 {
    fnv1a(label.as_bytes())
}

fn check(sizes: &[usize], batch_sizes: &[usize], temperature: f64) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::config("tasks", "no tasks to batch"));
    }
    if sizes.len() != batch_sizes.len() {
        return Err(Error::config(
            "batch_size",
            format!("{} batch sizes for {} tasks", batch_sizes.len(), sizes.len()),
        ));
    }
    if let Some(t) = sizes.iter().position(|&n| n == 0) {
        return Err(Error::config("tasks", format!("task {t} has an empty training split")));
    }
    if let Some(t) = batch_sizes.iter().position(|&b| b == 0) {
        return Err(Error::config("batch_size", format!("task {t} has batch size 0")));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::config("temperature", format!("must be positive and finite, got {temperature}")));
    }
    Ok(())
}

fn shuffled_batches(task: usize, n: usize, batch_size: usize, seed: u64, label: &str) -> Vec<BatchRef> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng(seed, stream(label)));
    idx.chunks(batch_size)
        .map(|c| BatchRef {
            task,
            indices: c.to_vec(),
        })
        .collect()
}

/// Sampling probability of each task at temperature `temperature`.
pub fn sampling_shares(sizes: &[usize], temperature: f64) -> Vec<f64> {
    let w: Vec<f64> = sizes.iter().map(|&n| (n as f64).powf(1.0 / temperature)).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|x| x / total).collect()
}

/// Batches per epoch.
pub fn epoch_len(sizes: &[usize], batch_sizes: &[usize]) -> usize {
    sizes.iter().zip(batch_sizes).map(|(n, b)| n.div_ceil(*b)).sum()
}

/// The ordered batches of epoch `epoch`.
pub fn build_mixed_batches(
    sizes: &[usize],
    batch_sizes: &[usize],
    seed: u64,
    temperature: f64,
    epoch: u64,
) -> Result<Vec<BatchRef>> {
    check(sizes, batch_sizes, temperature)?;
    if temperature == 1.0 {
        let mut all: Vec<BatchRef> = sizes
            .iter()
            .zip(batch_sizes)
            .enumerate()
            .flat_map(|(t, (&n, &b))| shuffled_batches(t, n, b, seed, &format!("batches/{epoch}/{t}")))
            .collect();
        all.shuffle(&mut rng(seed, stream(&format!("mix/{epoch}"))));
        return Ok(all);
    }
    let dist = WeightedIndex::new(sampling_shares(sizes, temperature))
        .map_err(|e| Error::config("temperature", e.to_string()))?;
    let mut draw = rng(seed, stream(&format!("draws/{epoch}")));
    let mut queues: Vec<(usize, Vec<BatchRef>)> = vec![(0, Vec::new()); sizes.len()];
    let mut out = Vec::with_capacity(epoch_len(sizes, batch_sizes));
    for _ in 0..epoch_len(sizes, batch_sizes) {
        let t = dist.sample(&mut draw);
        let (pass, queue) = &mut queues[t];
        if queue.is_empty() {
            *queue = shuffled_batches(t, sizes[t], batch_sizes[t], seed, &format!("batches/{epoch}/{t}/{pass}"));
            queue.reverse();
            *pass += 1;
        }
        out.push(queue.pop().expect("refilled above"));
    }
    Ok(out)
}

/// Endless batch sequence across epochs; caches the current epoch.
#[derive(Debug, Clone)]
pub struct BatchStream {
    sizes: Vec<usize>,
    batch_sizes: Vec<usize>,
    seed: u64,
    temperature: f64,
    epoch_len: usize,
    cached: Option<(u64, Vec<BatchRef>)>,
}

impl BatchStream {
    pub fn new(sizes: Vec<usize>, batch_sizes: Vec<usize>, seed: u64, temperature: f64) -> Result<Self> {
        check(&sizes, &batch_sizes, temperature)?;
        let epoch_len = epoch_len(&sizes, &batch_sizes);
        Ok(Self {
            sizes,
            batch_sizes,
            seed,
            temperature,
            epoch_len,
            cached: None,
        })
    }

    pub fn epoch_len(&self) -> usize {
        self.epoch_len
    }

    /// The batch at zero-based position `index` of the stream.
    pub fn get(&mut self, index: u64) -> Result<BatchRef> {
        let epoch = index / self.epoch_len as u64;
        if self.cached.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let batches = build_mixed_batches(&self.sizes, &self.batch_sizes, self.seed, self.temperature, epoch)?;
            self.cached = Some((epoch, batches));
        }
        let (_, batches) = self.cached.as_ref().expect("filled above");
        Ok(batches[(index % self.epoch_len as u64) as usize].clone())
    }
}
