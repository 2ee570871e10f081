//! In-memory embedding matrices, split row sets and minibatch loaders.

use std::collections::HashMap;

use rand::seq::SliceRandom;

use crate::consensus::dot;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::store::{Class, EmbeddingRecord, Label, SplitManifest};

/// Row-major f64 copies of a store's vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<Label>,
    image: Vec<f64>,
    text: Vec<f64>,
    gen: Vec<f64>,
    index: HashMap<u64, usize>,
}

impl Dataset {
    pub fn from_records(records: &[EmbeddingRecord]) -> Result<Self> {
        let dim = records.first().map_or(0, |r| r.dim());
        let mut ds = Dataset {
            dim,
            ids: Vec::with_capacity(records.len()),
            labels: Vec::with_capacity(records.len()),
            image: Vec::with_capacity(records.len() * dim),
            text: Vec::with_capacity(records.len() * dim),
            gen: Vec::with_capacity(records.len() * dim),
            index: HashMap::with_capacity(records.len()),
        };
        for r in records {
            if r.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: r.dim() });
            }
            if ds.index.insert(r.sample_id(), ds.ids.len()).is_some() {
                return Err(Error::DuplicateId(r.sample_id()));
            }
            ds.ids.push(r.sample_id());
            ds.labels.push(r.label());
            ds.image.extend(r.image_emb().iter().map(|&x| x as f64));
            ds.text.extend(r.text_emb().iter().map(|&x| x as f64));
            ds.gen.extend(r.gen_text_emb().iter().map(|&x| x as f64));
        }
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, row: usize) -> u64 {
        self.ids[row]
    }

    pub fn label(&self, row: usize) -> Label {
        self.labels[row]
    }

    pub fn image(&self, row: usize) -> &[f64] {
        &self.image[row * self.dim..(row + 1) * self.dim]
    }

    pub fn text(&self, row: usize) -> &[f64] {
        &self.text[row * self.dim..(row + 1) * self.dim]
    }

    pub fn gen_text(&self, row: usize) -> &[f64] {
        &self.gen[row * self.dim..(row + 1) * self.dim]
    }

    /// Caption-vs-generated-caption score; independent of the adapter.
    pub fn blip_text_score(&self, row: usize) -> f64 {
        dot(self.text(row), self.gen_text(row))
    }

    pub fn row_of(&self, id: u64) -> Result<usize> {
        self.index.get(&id).copied().ok_or(Error::UnknownId(id))
    }

    /// Replaces every vector of `row`; used to probe that a row has no influence.
    #[cfg(test)]
    pub(crate) fn overwrite(&mut self, row: usize, value: f64) {
        let d = self.dim;
        for m in [&mut self.image, &mut self.text, &mut self.gen] {
            m[row * d..(row + 1) * d].iter_mut().for_each(|x| *x = value);
        }
    }
}

/// A manifest resolved to dataset rows. Labeled, val and test rows carry a class.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub labeled: Vec<(usize, Class)>,
    pub unlabeled: Vec<usize>,
    pub val: Vec<(usize, Class)>,
    pub test: Vec<(usize, Class)>,
}

impl Split {
    pub fn resolve(data: &Dataset, manifest: &SplitManifest) -> Result<Self> {
        let classed = |ids: &[u64], name: &str| -> Result<Vec<(usize, Class)>> {
            ids.iter()
                .map(|&id| {
                    let row = data.row_of(id)?;
                    let class = data.label(row).class().ok_or_else(|| {
                        Error::InvalidArgument(format!("sample {id} in {name} has no ground-truth label"))
                    })?;
                    Ok((row, class))
                })
                .collect()
        };
        let split = Split {
            labeled: classed(&manifest.train_labeled, "train_labeled")?,
            unlabeled: manifest.train_unlabeled.iter().map(|&id| data.row_of(id)).collect::<Result<_>>()?,
            val: classed(&manifest.val, "val")?,
            test: classed(&manifest.test, "test")?,
        };
        split.check_labeled()?;
        Ok(split)
    }

    pub fn check_labeled(&self) -> Result<()> {
        for (class, name) in [(Class::Real, "real"), (Class::Fake, "fake")] {
            if !self.labeled.iter().any(|l| l.1 == class) {
                return Err(Error::MissingClass(name));
            }
        }
        Ok(())
    }

    /// (real, fake) counts of the labeled rows.
    pub fn labeled_counts(&self) -> (usize, usize) {
        let fake = self.labeled.iter().filter(|l| l.1 == Class::Fake).count();
        (self.labeled.len() - fake, fake)
    }
}

/// Cuts `n` items into chunks of `batch`, folding a trailing single item
/// into the previous chunk so train-mode batch norm always sees two samples.
pub fn chunk_bounds(n: usize, batch: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + batch).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push((start, end));
        start = end;
    }
    out
}

/// Endless labeled minibatches, reshuffled at the start of every pass.
#[derive(Debug, Clone)]
pub struct CyclingLoader<T> {
    items: Vec<T>,
    bounds: Vec<(usize, usize)>,
    next: usize,
    rng: Rng,
}

impl<T: Clone> CyclingLoader<T> {
    pub fn new(items: Vec<T>, batch: usize, rng: Rng) -> Self {
        let bounds = chunk_bounds(items.len(), batch);
        let next = bounds.len();
        Self { items, bounds, next, rng }
    }

    pub fn batches_per_pass(&self) -> usize {
        self.bounds.len()
    }

    pub fn next_batch(&mut self) -> Vec<T> {
        if self.bounds.is_empty() {
            return Vec::new();
        }
        if self.next == self.bounds.len() {
            self.items.shuffle(&mut self.rng);
            self.next = 0;
        }
        let (a, b) = self.bounds[self.next];
        self.next += 1;
        self.items[a..b].to_vec()
    }
}

/// 64-bit FNV-1a over a sequence of sample ids.
#[derive(Debug, Clone, Copy)]
pub struct OrderDigest(u64);

impl Default for OrderDigest {
    fn default() -> Self {
        OrderDigest(0xcbf2_9ce4_8422_2325)
    }
}

impl OrderDigest {
    pub fn push(&mut self, id: u64) {
        for b in id.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn hex(&self) -> String {
        format!("{:016x}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn chunks_never_leave_a_single_sample() {
        assert_eq!(chunk_bounds(0, 4), vec![]);
        assert_eq!(chunk_bounds(8, 4), vec![(0, 4), (4, 8)]);
        assert_eq!(chunk_bounds(9, 4), vec![(0, 4), (4, 9)]);
        assert_eq!(chunk_bounds(10, 4), vec![(0, 4), (4, 8), (8, 10)]);
        for n in 2..200 {
            for b in 2..20 {
                let c = chunk_bounds(n, b);
                assert!(c.iter().all(|(a, e)| e - a >= 2));
                assert_eq!(c.last().unwrap().1, n);
            }
        }
    }

    #[test]
    fn cycling_loader_visits_every_item_each_pass() {
        let mut l = CyclingLoader::new((0..10).collect::<Vec<u32>>(), 3, rng::seeded(1));
        assert_eq!(l.batches_per_pass(), 3);
        for _ in 0..4 {
            let mut pass: Vec<u32> = (0..3).flat_map(|_| l.next_batch()).collect();
            pass.sort();
            assert_eq!(pass, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn digest_depends_on_order() {
        let mut a = OrderDigest::default();
        let mut b = OrderDigest::default();
        a.push(1);
        a.push(2);
        b.push(2);
        b.push(1);
        assert_ne!(a.hex(), b.hex());
        // FNV-1a of the empty input
        assert_eq!(OrderDigest::default().hex(), "cbf29ce484222325");
    }
}
