//! Byte-level corpora, contiguous-block batching, and seeded synthetic
//! tasks for self-contained experiments.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub tokens: Vec<usize>,
    pub split: Split,
    pub source: String,
}

impl Corpus {
    pub fn from_tokens(tokens: Vec<usize>, split: Split, source: impl Into<String>) -> Corpus {
        Corpus {
            tokens,
            split,
            source: source.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Contiguous prefix/middle/suffix split by fractions that sum to 1.
    pub fn split_contiguous(&self, fracs: (f64, f64, f64)) -> Result<(Corpus, Corpus, Corpus)> {
        let (ft, fv, fe) = fracs;
        if ft <= 0.0 || fv <= 0.0 || fe <= 0.0 {
            return Err(Error::config("split_fracs", "all fractions must be positive"));
        }
        if ((ft + fv + fe) - 1.0).abs() > 1e-9 {
            return Err(Error::config("split_fracs", "fractions must sum to 1"));
        }
        let n = self.tokens.len();
        let n_train = (n as f64 * ft).floor() as usize;
        let n_valid = (n as f64 * fv).floor() as usize;
        let train = Corpus::from_tokens(
            self.tokens[..n_train].to_vec(),
            Split::Train,
            self.source.clone(),
        );
        let valid = Corpus::from_tokens(
            self.tokens[n_train..n_train + n_valid].to_vec(),
            Split::Valid,
            self.source.clone(),
        );
        let test = Corpus::from_tokens(
            self.tokens[n_train + n_valid..].to_vec(),
            Split::Test,
            self.source.clone(),
        );
        Ok((train, valid, test))
    }
}

/// Read a byte file (token id = byte value) and split it contiguously:
/// train prefix, valid middle, test suffix.
pub fn load_corpus(path: &Path, split_fracs: (f64, f64, f64)) -> Result<(Corpus, Corpus, Corpus)> {
    let bytes = std::fs::read(path)?;
    if bytes.is_empty() {
        return Err(Error::Corpus(format!("{} is empty", path.display())));
    }
    let tokens: Vec<usize> = bytes.iter().map(|&b| b as usize).collect();
    let all = Corpus::from_tokens(tokens, Split::Train, path.display().to_string());
    all.split_contiguous(split_fracs)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockBatch {
    /// [batch × block_len]
    pub inputs: Vec<Vec<usize>>,
    /// Same shape, shifted one token into the future.
    pub targets: Vec<Vec<usize>>,
}

/// Iterator over one epoch of contiguous blocks, grouped into batches. The
/// final batch may hold fewer than `batch` blocks so every block is visited
/// exactly once.
pub struct BlockIter<'a> {
    corpus: &'a Corpus,
    order: Vec<usize>,
    next: usize,
    batch: usize,
    block_len: usize,
}

impl<'a> Iterator for BlockIter<'a> {
    type Item = BlockBatch;

    fn next(&mut self) -> Option<BlockBatch> {
        if self.next >= self.order.len() {
            return None;
        }
        let take = self.batch.min(self.order.len() - self.next);
        let mut inputs = Vec::with_capacity(take);
        let mut targets = Vec::with_capacity(take);
        for &b in &self.order[self.next..self.next + take] {
            let lo = b * self.block_len;
            inputs.push(self.corpus.tokens[lo..lo + self.block_len].to_vec());
            targets.push(self.corpus.tokens[lo + 1..lo + self.block_len + 1].to_vec());
        }
        self.next += take;
        Some(BlockBatch { inputs, targets })
    }
}

/// Cut the corpus into non-overlapping contiguous blocks of `block_len`
/// (the trailing partial block is dropped) and iterate them in corpus order,
/// or in a seeded shuffled order.
pub fn make_blocks<'a>(
    corpus: &'a Corpus,
    batch: usize,
    block_len: usize,
    rng: &mut Rng,
    shuffle: bool,
) -> Result<BlockIter<'a>> {
    if batch == 0 {
        return Err(Error::config("batch", "must be positive"));
    }
    if block_len == 0 {
        return Err(Error::config("block_len", "must be positive"));
    }
    if corpus.len() <= block_len {
        return Err(Error::Corpus(format!(
            "corpus of {} tokens is too short for block_len {}",
            corpus.len(),
            block_len
        )));
    }
    // each block needs a target for its last token, hence the -1
    let n_blocks = (corpus.len() - 1) / block_len;
    let mut order: Vec<usize> = (0..n_blocks).collect();
    if shuffle {
        rng.shuffle(&mut order);
    }
    Ok(BlockIter {
        corpus,
        order,
        next: 0,
        batch,
        block_len,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Records of the form `segment 0 segment 0`: the second half of each
    /// record is an exact copy, learnable by attention.
    Copy,
    /// A seeded bigram chain whose conditionals are Zipf-weighted over a
    /// per-context token ordering; has a nontrivial entropy floor.
    ZipfBigram,
}

pub const COPY_DELIM: usize = 0;
const COPY_ALPHABET: usize = 127;
pub const ZIPF_VOCAB: usize = 256;
const ZIPF_EXPONENT: f64 = 1.1;

/// The zipf_bigram chain's transition matrix: row c holds P(next | cur = c).
/// Conditionals put Zipf(1.1) weight on a per-context seeded permutation of
/// the vocabulary. Exposed so tests and analyses can treat the generator as
/// its own oracle.
pub fn zipf_bigram_transitions(seed: u64) -> Vec<Vec<f64>> {
    let v = ZIPF_VOCAB;
    let weights: Vec<f64> = (0..v)
        .map(|r| 1.0 / ((r + 1) as f64).powf(ZIPF_EXPONENT))
        .collect();
    let z: f64 = weights.iter().sum();
    let mut rows = Vec::with_capacity(v);
    for c in 0..v {
        let mut perm: Vec<usize> = (0..v).collect();
        let mut prng = Rng::new(seed).derive(c as u64 + 1);
        prng.shuffle(&mut perm);
        let mut row = vec![0.0; v];
        for (rank, &tok) in perm.iter().enumerate() {
            row[tok] = weights[rank] / z;
        }
        rows.push(row);
    }
    rows
}

/// Deterministic synthetic corpus of exactly `size` tokens.
pub fn gen_synthetic(task: SyntheticTask, size: usize, seed: u64) -> Result<Corpus> {
    if size == 0 {
        return Err(Error::config("size", "must be at least 1"));
    }
    let mut rng = Rng::new(seed);
    let tokens = match task {
        SyntheticTask::Copy => {
            let mut out = Vec::with_capacity(size + 32);
            while out.len() < size {
                let seg_len = 4 + rng.next_below(9) as usize;
                let seg: Vec<usize> = (0..seg_len)
                    .map(|_| 1 + rng.next_below(COPY_ALPHABET as u64 - 1) as usize)
                    .collect();
                out.extend_from_slice(&seg);
                out.push(COPY_DELIM);
                out.extend_from_slice(&seg);
                out.push(COPY_DELIM);
            }
            out.truncate(size);
            out
        }
        SyntheticTask::ZipfBigram => {
            let rows = zipf_bigram_transitions(seed);
            // cumulative rows for inverse-CDF sampling
            let cum: Vec<Vec<f64>> = rows
                .iter()
                .map(|row| {
                    let mut acc = 0.0;
                    row.iter()
                        .map(|p| {
                            acc += p;
                            acc
                        })
                        .collect()
                })
                .collect();
            let mut out = Vec::with_capacity(size);
            let mut cur = rng.next_below(ZIPF_VOCAB as u64) as usize;
            out.push(cur);
            while out.len() < size {
                let u = rng.next_f64();
                let row = &cum[cur];
                let next = match row.binary_search_by(|p| p.partial_cmp(&u).unwrap()) {
                    Ok(i) => (i + 1).min(ZIPF_VOCAB - 1),
                    Err(i) => i.min(ZIPF_VOCAB - 1),
                };
                out.push(next);
                cur = next;
            }
            out
        }
    };
    let name = match task {
        SyntheticTask::Copy => format!("synthetic:copy(size={}, seed={})", size, seed),
        SyntheticTask::ZipfBigram => format!("synthetic:zipf_bigram(size={}, seed={})", size, seed),
    };
    Ok(Corpus::from_tokens(tokens, Split::Train, name))
}
