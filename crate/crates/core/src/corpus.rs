// SPDX-License-Identifier: MIT OR Apache-2.0

//! Token datasets, synthetic induction prompts, and the shuffled activation
//! buffer that feeds SAE training.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_until, Site, Weights};
use crate::numerics::Tensor;

/// Ground truth for one induction query inside a sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    /// Position whose next token induction predicts.
    pub query_pos: usize,
    /// The predicted token.
    pub target_token: u32,
    /// Position of that token's earlier occurrence (where an induction head should attend).
    pub target_source_pos: usize,
    /// Number of tokens ending at `query_pos` that repeat the context before `target_source_pos`.
    pub prefix_len: usize,
}

/// Fixed-length token sequences, optionally annotated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenDataset {
    pub seq_len: usize,
    pub vocab: usize,
    pub source: String,
    pub sequences: Vec<Vec<u32>>,
    /// Either empty or one list per sequence.
    #[serde(default)]
    pub annotations: Vec<Vec<Annotation>>,
}

impl TokenDataset {
    pub fn new(seq_len: usize, vocab: usize, source: impl Into<String>, sequences: Vec<Vec<u32>>) -> Result<Self> {
        let ds = Self {
            seq_len,
            vocab,
            source: source.into(),
            sequences,
            annotations: Vec::new(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.len() != self.seq_len {
                return Err(Error::Shape(format!(
                    "sequence {i} has length {}, expected {}",
                    s.len(),
                    self.seq_len
                )));
            }
            if let Some(t) = s.iter().find(|t| **t as usize >= self.vocab) {
                return Err(Error::OutOfRange(format!("sequence {i}: token {t} >= vocab {}", self.vocab)));
            }
        }
        if !self.annotations.is_empty() && self.annotations.len() != self.sequences.len() {
            return Err(Error::Shape("annotations do not match sequences".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn is_annotated(&self) -> bool {
        !self.annotations.is_empty()
    }

    /// Every `(sequence index, annotation)` pair.
    pub fn annotated(&self) -> impl Iterator<Item = (usize, &Annotation)> {
        self.annotations
            .iter()
            .enumerate()
            .flat_map(|(i, a)| a.iter().map(move |a| (i, a)))
    }

    /// Write the binary form: `seq_len`, `count`, `vocab` as `u32` LE, then all ids as `u32` LE.
    /// Annotations are not stored.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(12 + 4 * self.seq_len * self.len());
        for h in [self.seq_len, self.len(), self.vocab] {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        for s in &self.sequences {
            for t in s {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |m: String| Error::Format(format!("{}: {m}", path.display()));
        if bytes.len() < 12 || bytes.len() % 4 != 0 {
            return Err(fmt(format!("{} bytes is not a token file", bytes.len())));
        }
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        let (seq_len, count, vocab) = (words[0] as usize, words[1] as usize, words[2] as usize);
        if words.len() - 3 != seq_len * count {
            return Err(fmt(format!(
                "header says {count} x {seq_len} tokens, file holds {}",
                words.len() - 3
            )));
        }
        let sequences = if seq_len == 0 {
            vec![Vec::new(); count]
        } else {
            words[3..].chunks(seq_len).map(<[u32]>::to_vec).collect()
        };
        let ds = Self::new(seq_len, vocab, path.display().to_string(), sequences)
            .map_err(|e| fmt(e.to_string()))?;
        Ok(ds)
    }
}

/// Sequences whose second half repeats a uniformly random first half.
///
/// Every second-half position `q` is annotated with source `q - half + 1`.
pub fn gen_random_repeated(n: usize, seq_len: usize, vocab: usize, seed: u64) -> Result<TokenDataset> {
    if seq_len < 2 || !seq_len.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("seq_len must be even and >= 2, got {seq_len}")));
    }
    if vocab == 0 {
        return Err(Error::InvalidArgument("vocab must be positive".into()));
    }
    let half = seq_len / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for _ in 0..n {
        let first: Vec<u32> = (0..half).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let seq: Vec<u32> = first.iter().chain(&first).copied().collect();
        let ann = (half..seq_len)
            .map(|q| {
                let src = q - half + 1;
                Annotation {
                    query_pos: q,
                    target_token: seq[src],
                    target_source_pos: src,
                    prefix_len: q - half + 1,
                }
            })
            .collect();
        sequences.push(seq);
        annotations.push(ann);
    }
    Ok(TokenDataset {
        seq_len,
        vocab,
        source: format!("random_repeated(n={n}, seq_len={seq_len}, vocab={vocab}, seed={seed})"),
        sequences,
        annotations,
    })
}

/// Sequences holding `A_1 … A_k B` somewhere and ending with `A_1 … A_k`.
///
/// Pattern tokens are distinct and never used as filler, so `B` occurs once.
/// The single annotation marks the final position with target `B`.
pub fn gen_prefix_induction(
    n: usize,
    prefix_len: usize,
    seq_len: usize,
    vocab: usize,
    seed: u64,
) -> Result<TokenDataset> {
    let k = prefix_len;
    if k == 0 {
        return Err(Error::InvalidArgument("prefix_len must be >= 1".into()));
    }
    if 2 * k + 1 > seq_len {
        return Err(Error::InvalidArgument(format!(
            "prefix_len {k} needs seq_len >= {}, got {seq_len}",
            2 * k + 1
        )));
    }
    let fillers = seq_len - (2 * k + 1);
    if k + 1 > vocab || (fillers > 0 && k + 1 == vocab) {
        return Err(Error::InvalidArgument(format!(
            "vocab {vocab} too small for {} pattern tokens plus filler",
            k + 1
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let all: Vec<u32> = (0..vocab as u32).collect();
    let mut sequences = Vec::with_capacity(n);
    let mut annotations = Vec::with_capacity(n);
    for _ in 0..n {
        let pattern: Vec<u32> = all.choose_multiple(&mut rng, k + 1).copied().collect();
        let filler: Vec<u32> = all.iter().copied().filter(|t| !pattern.contains(t)).collect();
        let start = rng.gen_range(0..=fillers);
        let mut seq = Vec::with_capacity(seq_len);
        for _ in 0..start {
            seq.push(*filler.choose(&mut rng).expect("filler non-empty"));
        }
        seq.extend_from_slice(&pattern);
        while seq.len() < seq_len - k {
            seq.push(*filler.choose(&mut rng).expect("filler non-empty"));
        }
        seq.extend_from_slice(&pattern[..k]);
        annotations.push(vec![Annotation {
            query_pos: seq_len - 1,
            target_token: pattern[k],
            target_source_pos: start + k,
            prefix_len: k,
        }]);
        sequences.push(seq);
    }
    Ok(TokenDataset {
        seq_len,
        vocab,
        source: format!("prefix_induction(n={n}, k={k}, seq_len={seq_len}, vocab={vocab}, seed={seed})"),
        sequences,
        annotations,
    })
}

/// Replace the second-to-last prefix token of the first occurrence
/// (`A` in `A B C … A B`) with a token absent from the sequence, so only a
/// one-token match remains. The annotation is unchanged.
pub fn corrupt_long_prefix(seq: &[u32], ann: &Annotation, vocab: usize, seed: u64) -> Result<Vec<u32>> {
    if ann.prefix_len < 2 || ann.target_source_pos < 2 {
        return Err(Error::InvalidArgument(format!(
            "corruption needs a prefix of at least 2 tokens, got {}",
            ann.prefix_len
        )));
    }
    let fresh: Vec<u32> = (0..vocab as u32).filter(|t| !seq.contains(t)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = *fresh
        .choose(&mut rng)
        .ok_or_else(|| Error::InsufficientData("no token outside the sequence to corrupt with".into()))?;
    let mut out = seq.to_vec();
    out[ann.target_source_pos - 2] = x;
    Ok(out)
}

/// [`corrupt_long_prefix`] applied to every annotated sequence (first annotation each).
pub fn corrupt_dataset(ds: &TokenDataset, seed: u64) -> Result<TokenDataset> {
    if !ds.is_annotated() {
        return Err(Error::InvalidArgument("dataset has no annotations".into()));
    }
    let mut out = ds.clone();
    for (i, (seq, ann)) in out.sequences.iter_mut().zip(&ds.annotations).enumerate() {
        let a = ann
            .first()
            .ok_or_else(|| Error::InvalidArgument(format!("sequence {i} has no annotation")))?;
        *seq = corrupt_long_prefix(seq, a, ds.vocab, seed.wrapping_add(i as u64))?;
    }
    out.source = format!("corrupt({})", ds.source);
    Ok(out)
}

/// Draw `n` sequences from several datasets with the given relative weights.
pub fn mix_datasets(parts: &[(&TokenDataset, f64)], n: usize, seed: u64) -> Result<TokenDataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("no datasets to mix".into()))?
        .0;
    let total: f64 = parts.iter().map(|p| p.1).sum();
    if parts.iter().any(|(d, w)| !(*w >= 0.0) || d.seq_len != first.seq_len || d.is_empty()) || !(total > 0.0) {
        return Err(Error::InvalidArgument(
            "mixture parts need equal seq_len, data, and non-negative weights with a positive sum".into(),
        ));
    }
    let vocab = parts.iter().map(|p| p.0.vocab).max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u = rng.gen::<f64>() * total;
        let mut pick = parts.len() - 1;
        for (i, (_, w)) in parts.iter().enumerate() {
            if u < *w {
                pick = i;
                break;
            }
            u -= w;
        }
        let d = parts[pick].0;
        sequences.push(d.sequences[rng.gen_range(0..d.len())].clone());
    }
    TokenDataset::new(first.seq_len, vocab, "mixture", sequences)
}

/// Where a buffered row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowTag {
    pub seq: usize,
    pub pos: usize,
}

/// Produces activation rows one sequence at a time.
pub trait RowSource {
    fn dim(&self) -> usize;
    /// Append the next group of rows to `out`; returns `false` once exhausted.
    fn next_rows(&mut self, out: &mut Vec<(RowTag, Vec<f64>)>) -> Result<bool>;
}

/// Rows recorded at one site of a model, over a token dataset.
pub struct ModelSource<'a> {
    weights: &'a Weights,
    dataset: &'a TokenDataset,
    site: Site,
    next: usize,
    exclude_first_position: bool,
}

impl<'a> ModelSource<'a> {
    pub fn new(weights: &'a Weights, dataset: &'a TokenDataset, site: Site) -> Result<Self> {
        site.check(&weights.config)?;
        if dataset.seq_len > weights.config.max_seq {
            return Err(Error::OutOfRange(format!(
                "dataset seq_len {} exceeds model max_seq {}",
                dataset.seq_len, weights.config.max_seq
            )));
        }
        Ok(Self {
            weights,
            dataset,
            site,
            next: 0,
            exclude_first_position: false,
        })
    }

    /// Skip position 0 of every sequence.
    pub fn exclude_first_position(mut self, yes: bool) -> Self {
        self.exclude_first_position = yes;
        self
    }
}

impl RowSource for ModelSource<'_> {
    fn dim(&self) -> usize {
        self.site.dim(&self.weights.config)
    }

    fn next_rows(&mut self, out: &mut Vec<(RowTag, Vec<f64>)>) -> Result<bool> {
        let Some(seq) = self.dataset.sequences.get(self.next) else {
            return Ok(false);
        };
        let trace = forward_until(self.weights, seq, self.site.layer)?;
        let acts = trace.site(self.site)?;
        let start = usize::from(self.exclude_first_position);
        for pos in start..seq.len() {
            out.push((RowTag { seq: self.next, pos }, acts.row(pos).to_vec()));
        }
        self.next += 1;
        Ok(true)
    }
}

/// Fixed rows, handed out in order. Useful for tests and precomputed activations.
pub struct VecSource {
    rows: std::vec::IntoIter<Vec<f64>>,
    dim: usize,
    served: usize,
}

impl VecSource {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("rows of unequal width".into()));
        }
        Ok(Self {
            rows: rows.into_iter(),
            dim,
            served: 0,
        })
    }

    /// `n` copies of one row.
    pub fn constant(row: Vec<f64>, n: usize) -> Self {
        Self {
            dim: row.len(),
            rows: vec![row; n].into_iter(),
            served: 0,
        }
    }
}

impl RowSource for VecSource {
    fn dim(&self) -> usize {
        self.dim
    }

    fn next_rows(&mut self, out: &mut Vec<(RowTag, Vec<f64>)>) -> Result<bool> {
        match self.rows.next() {
            Some(r) => {
                out.push((RowTag { seq: self.served, pos: 0 }, r));
                self.served += 1;
                Ok(true)
            }
            None => Ok(false),
        }
    }
}

/// Shuffled pool of activation rows.
///
/// New rows are inserted at uniformly random slots (inside-out Fisher-Yates) and
/// rows are served from the end, so serve order is a uniform shuffle of what the
/// pool held. Once half the pool has been served it is topped up again. A row is
/// removed when served and never returned twice.
pub struct ActivationBuffer<S: RowSource> {
    source: S,
    capacity: usize,
    dim: usize,
    data: Vec<f64>,
    tags: Vec<RowTag>,
    rng: ChaCha8Rng,
    exhausted: bool,
    pending: Vec<(RowTag, Vec<f64>)>,
    served: usize,
}

impl<S: RowSource> ActivationBuffer<S> {
    pub fn new(source: S, capacity: usize, seed: u64) -> Result<Self> {
        if capacity < 2 {
            return Err(Error::InvalidArgument("buffer capacity must be >= 2".into()));
        }
        let dim = source.dim();
        Ok(Self {
            source,
            capacity,
            dim,
            data: Vec::with_capacity(capacity * dim),
            tags: Vec::with_capacity(capacity),
            rng: ChaCha8Rng::seed_from_u64(seed),
            exhausted: false,
            pending: Vec::new(),
            served: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Rows currently held.
    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn rows_served(&self) -> usize {
        self.served
    }

    /// Fill to capacity. Fails if the source runs dry first.
    pub fn fill(&mut self) -> Result<()> {
        self.top_up()?;
        if self.len() < self.capacity {
            return Err(Error::InsufficientData(format!(
                "source exhausted after {} rows, buffer capacity is {}",
                self.len(),
                self.capacity
            )));
        }
        Ok(())
    }

    fn top_up(&mut self) -> Result<()> {
        while self.len() < self.capacity {
            if self.pending.is_empty() {
                if self.exhausted || !self.source.next_rows(&mut self.pending)? {
                    self.exhausted = true;
                    return Ok(());
                }
                self.pending.reverse();
            }
            let Some((tag, row)) = self.pending.pop() else { continue };
            if row.len() != self.dim {
                return Err(Error::Shape(format!("source row of width {}, expected {}", row.len(), self.dim)));
            }
            let i = self.len();
            self.data.extend_from_slice(&row);
            self.tags.push(tag);
            let j = self.rng.gen_range(0..=i);
            if j != i {
                self.tags.swap(i, j);
                let (lo, hi) = self.data.split_at_mut(i * self.dim);
                lo[j * self.dim..(j + 1) * self.dim].swap_with_slice(&mut hi[..self.dim]);
            }
        }
        Ok(())
    }

    /// Serve up to `batch` rows as a `[n × dim]` tensor. Returns `None` when the
    /// buffer and source are both empty.
    pub fn next_batch(&mut self, batch: usize) -> Result<Option<(Tensor, Vec<RowTag>)>> {
        if self.len() <= self.capacity / 2 && !self.exhausted {
            self.top_up()?;
        }
        if self.is_empty() {
            return Ok(None);
        }
        let n = batch.min(self.len());
        let start = self.len() - n;
        let rows = self.data.split_off(start * self.dim);
        let tags = self.tags.split_off(start);
        self.served += n;
        Ok(Some((Tensor::from_parts(vec![n, self.dim], rows), tags)))
    }
}
