//! Binary embedding store, split manifests and the split operators
//! (stratified labeled split, imbalance resampling, unlabeled subsetting).
//!
//! Layout (little-endian):
//!
//! ```text
//! header  = "CVLM" | version u32 | dim u32 | record_count u64 | flags u32      (24 bytes)
//! record  = sample_id u64 | label i8 | 7 zero bytes
//!           | image_emb f32 x dim | text_emb f32 x dim | gen_text_emb f32 x dim
//! ```

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAGIC: [u8; 4] = *b"CVLM";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 24;
/// Flag bit 0: generated-caption embeddings present.
pub const FLAG_GENERATED: u32 = 1;
/// Allowed deviation of a stored vector's L2 norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-4;

/// Ground-truth annotation carried by a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Real,
    Fake,
    Unlabeled,
}

/// A known class. `Fake` is the positive class (target 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Class {
    Real,
    Fake,
}

impl Class {
    pub fn target(self) -> f64 {
        match self {
            Class::Real => 0.0,
            Class::Fake => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Real => "real",
            Class::Fake => "fake",
        }
    }
}

impl Label {
    pub fn class(self) -> Option<Class> {
        match self {
            Label::Real => Some(Class::Real),
            Label::Fake => Some(Class::Fake),
            Label::Unlabeled => None,
        }
    }

    pub fn to_byte(self) -> i8 {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
            Label::Unlabeled => -1,
        }
    }

    pub fn from_byte(b: i8) -> Result<Self> {
        match b {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            -1 => Ok(Label::Unlabeled),
            other => Err(Error::InvalidLabel(other)),
        }
    }
}

impl From<Class> for Label {
    fn from(c: Class) -> Self {
        match c {
            Class::Real => Label::Real,
            Class::Fake => Label::Fake,
        }
    }
}

/// One image/caption sample: three unit-norm embeddings plus its label.
///
/// Vectors are L2-normalized when a record is constructed; reading a store
/// reconstructs records without touching the stored values.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    sample_id: u64,
    label: Label,
    image_emb: Vec<f32>,
    text_emb: Vec<f32>,
    gen_text_emb: Vec<f32>,
}

fn normalized(v: &[f64]) -> Result<Vec<f32>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("embedding".into()));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < 1e-12 {
        return Err(Error::ZeroNorm(norm));
    }
    Ok(v.iter().map(|x| (x / norm) as f32).collect())
}

impl EmbeddingRecord {
    /// Builds a record, normalizing each embedding to unit length.
    pub fn new(
        sample_id: u64,
        label: Label,
        image_emb: &[f32],
        text_emb: &[f32],
        gen_text_emb: &[f32],
    ) -> Result<Self> {
        let widen = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        Self::from_f64(sample_id, label, &widen(image_emb), &widen(text_emb), &widen(gen_text_emb))
    }

    /// Like [`EmbeddingRecord::new`], normalizing in double precision before narrowing.
    pub fn from_f64(
        sample_id: u64,
        label: Label,
        image_emb: &[f64],
        text_emb: &[f64],
        gen_text_emb: &[f64],
    ) -> Result<Self> {
        let d = image_emb.len();
        if d == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be >= 1".into()));
        }
        for other in [text_emb.len(), gen_text_emb.len()] {
            if other != d {
                return Err(Error::DimensionMismatch { expected: d, got: other });
            }
        }
        Ok(Self {
            sample_id,
            label,
            image_emb: normalized(image_emb)?,
            text_emb: normalized(text_emb)?,
            gen_text_emb: normalized(gen_text_emb)?,
        })
    }

    pub fn sample_id(&self) -> u64 {
        self.sample_id
    }

    pub fn label(&self) -> Label {
        self.label
    }

    pub fn dim(&self) -> usize {
        self.image_emb.len()
    }

    pub fn image_emb(&self) -> &[f32] {
        &self.image_emb
    }

    pub fn text_emb(&self) -> &[f32] {
        &self.text_emb
    }

    pub fn gen_text_emb(&self) -> &[f32] {
        &self.gen_text_emb
    }

    /// Copy of this record with a different label (used to mask or unmask ground truth).
    pub fn with_label(&self, label: Label) -> Self {
        Self { label, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StoreHeader {
    pub version: u32,
    pub dim: u32,
    pub record_count: u64,
    pub flags: u32,
}

impl StoreHeader {
    pub fn has_generated(&self) -> bool {
        self.flags & FLAG_GENERATED != 0
    }

    pub fn record_len(&self) -> usize {
        record_len(self.dim as usize)
    }
}

pub fn record_len(dim: usize) -> usize {
    16 + 3 * dim * 4
}

fn check_records(records: &[EmbeddingRecord]) -> Result<usize> {
    let dim = records.first().map_or(0, |r| r.dim());
    let mut seen = HashSet::with_capacity(records.len());
    for r in records {
        if r.dim() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: r.dim() });
        }
        if !seen.insert(r.sample_id) {
            return Err(Error::DuplicateId(r.sample_id));
        }
    }
    Ok(dim)
}

/// Serializes records into the store byte layout. An empty record list
/// carries `dim` in the header.
pub fn encode_store(records: &[EmbeddingRecord], empty_dim: u32) -> Result<Vec<u8>> {
    let dim = if records.is_empty() {
        empty_dim as usize
    } else {
        check_records(records)?
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + records.len() * record_len(dim));
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&(records.len() as u64).to_le_bytes());
    buf.extend_from_slice(&FLAG_GENERATED.to_le_bytes());
    for r in records {
        buf.extend_from_slice(&r.sample_id.to_le_bytes());
        buf.push(r.label.to_byte() as u8);
        buf.extend_from_slice(&[0u8; 7]);
        for v in [&r.image_emb, &r.text_emb, &r.gen_text_emb] {
            for x in v.iter() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    Ok(buf)
}

/// Writes `records` to `path`; returns the number of bytes written (the file size).
///
/// An empty store records `empty_dim` as its dimension.
pub fn write_store_with_dim(records: &[EmbeddingRecord], empty_dim: u32, path: &Path) -> Result<u64> {
    let buf = encode_store(records, empty_dim)?;
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    f.sync_all().map_err(|e| Error::io(path, e))?;
    Ok(buf.len() as u64)
}

pub fn write_store(records: &[EmbeddingRecord], path: &Path) -> Result<u64> {
    let dim = records.first().map_or(0, |r| r.dim() as u32);
    write_store_with_dim(records, dim, path)
}

fn take<'a>(bytes: &'a [u8], offset: usize, n: usize) -> Result<&'a [u8]> {
    bytes.get(offset..offset + n).ok_or(Error::Truncated {
        offset: offset as u64,
        needed: n as u64,
        len: bytes.len() as u64,
    })
}

fn u32_at(bytes: &[u8], offset: usize) -> Result<u32> {
    Ok(u32::from_le_bytes(take(bytes, offset, 4)?.try_into().unwrap()))
}

fn u64_at(bytes: &[u8], offset: usize) -> Result<u64> {
    Ok(u64::from_le_bytes(take(bytes, offset, 8)?.try_into().unwrap()))
}

fn f32s(bytes: &[u8], offset: usize, n: usize) -> Result<Vec<f32>> {
    Ok(take(bytes, offset, n * 4)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Parses a store image. Values are reproduced exactly as stored.
pub fn decode_store(bytes: &[u8]) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let magic: [u8; 4] = take(bytes, 0, 4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u32_at(bytes, 4)?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let header = StoreHeader {
        version,
        dim: u32_at(bytes, 8)?,
        record_count: u64_at(bytes, 12)?,
        flags: u32_at(bytes, 20)?,
    };
    let dim = header.dim as usize;
    let rec_len = header.record_len();
    let mut records = Vec::new();
    let mut offset = HEADER_LEN;
    for _ in 0..header.record_count {
        // bound the whole record first so a truncation names the record start
        take(bytes, offset, rec_len)?;
        let sample_id = u64_at(bytes, offset)?;
        let label = Label::from_byte(bytes[offset + 8] as i8)?;
        let base = offset + 16;
        records.push(EmbeddingRecord {
            sample_id,
            label,
            image_emb: f32s(bytes, base, dim)?,
            text_emb: f32s(bytes, base + dim * 4, dim)?,
            gen_text_emb: f32s(bytes, base + 2 * dim * 4, dim)?,
        });
        offset += rec_len;
    }
    if offset != bytes.len() {
        let trailing = (bytes.len() - offset) as u64;
        return Err(Error::RecordCountMismatch {
            header: header.record_count,
            actual: header.record_count + trailing.div_ceil(rec_len.max(1) as u64),
        });
    }
    Ok((header, records))
}

pub fn read_store(path: &Path) -> Result<(StoreHeader, Vec<EmbeddingRecord>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes)
}

/// Largest deviation of a vector norm from 1 as `(sample_id, deviation)`;
/// `None` for an empty slice. Generated-caption vectors are checked when
/// `include_gen` is set.
pub fn max_norm_deviation(records: &[EmbeddingRecord], include_gen: bool) -> Option<(u64, f64)> {
    let norm = |v: &[f32]| v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    let mut worst: Option<(u64, f64)> = None;
    for r in records {
        let mut vs = vec![r.image_emb(), r.text_emb()];
        if include_gen {
            vs.push(r.gen_text_emb());
        }
        for v in vs {
            let dev = (norm(v) - 1.0).abs();
            if worst.is_none_or(|w| dev > w.1) {
                worst = Some((r.sample_id, dev));
            }
        }
    }
    worst
}

/// Partition of sample ids into the four training/evaluation roles.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub train_labeled: Vec<u64>,
    pub train_unlabeled: Vec<u64>,
    pub val: Vec<u64>,
    pub test: Vec<u64>,
}

impl SplitManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Checks the manifest invariants against a store.
    pub fn validate(&self, records: &[EmbeddingRecord]) -> Result<()> {
        let labels: HashMap<u64, Label> = records.iter().map(|r| (r.sample_id, r.label)).collect();
        let mut seen = HashSet::new();
        let lists = [
            ("train_labeled", &self.train_labeled, true),
            ("train_unlabeled", &self.train_unlabeled, false),
            ("val", &self.val, true),
            ("test", &self.test, true),
        ];
        for (name, ids, needs_label) in lists {
            for &id in ids {
                let label = *labels.get(&id).ok_or(Error::UnknownId(id))?;
                if !seen.insert(id) {
                    return Err(Error::InvalidArgument(format!(
                        "sample {id} appears in more than one split (second in {name})"
                    )));
                }
                if needs_label && label == Label::Unlabeled {
                    return Err(Error::InvalidArgument(format!(
                        "sample {id} in {name} has no ground-truth label"
                    )));
                }
            }
        }
        let count = |c: Label| self.train_labeled.iter().filter(|id| labels[id] == c).count();
        if count(Label::Real) == 0 {
            return Err(Error::MissingClass("real"));
        }
        if count(Label::Fake) == 0 {
            return Err(Error::MissingClass("fake"));
        }
        Ok(())
    }
}

/// Fractions used by [`build_manifest`]. `val` and `test` are taken from
/// each class first; `labeled` applies to what remains for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub labeled: f64,
    #[serde(default)]
    pub val: f64,
    #[serde(default)]
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { labeled: 0.05, val: 0.1, test: 0.1 }
    }
}

fn round_count(fraction: f64, n: usize) -> usize {
    (fraction * n as f64).round() as usize
}

/// Stratified split. Records without ground truth always land in
/// `train_unlabeled`; labeled records of the unlabeled portion keep their
/// labels in the store but are only used for diagnostics.
pub fn build_manifest(records: &[EmbeddingRecord], fractions: SplitFractions, seed: u64) -> Result<SplitManifest> {
    let SplitFractions { labeled, val, test } = fractions;
    if !(labeled > 0.0 && labeled < 1.0) {
        return Err(Error::InvalidArgument(format!("labeled fraction {labeled} outside (0,1)")));
    }
    if !(0.0..1.0).contains(&val) || !(0.0..1.0).contains(&test) || val + test >= 1.0 {
        return Err(Error::InvalidArgument(format!(
            "val/test fractions ({val}, {test}) must be in [0,1) with sum < 1"
        )));
    }
    let mut rng = rng::seeded(seed);
    let mut manifest = SplitManifest::default();
    for class in [Class::Real, Class::Fake] {
        let mut ids: Vec<u64> = records
            .iter()
            .filter(|r| r.label.class() == Some(class))
            .map(|r| r.sample_id)
            .collect();
        if ids.len() < 2 {
            return Err(Error::MissingClass(class.name()));
        }
        ids.shuffle(&mut rng);
        let n = ids.len();
        let n_test = round_count(test, n);
        let n_val = round_count(val, n);
        if n_test + n_val + 1 > n {
            return Err(Error::Insufficient(format!(
                "class {} has {n} samples, too few for the val/test fractions",
                class.name()
            )));
        }
        let n_train = n - n_test - n_val;
        let n_lab = round_count(labeled, n_train).max(1);
        let (test_ids, rest) = ids.split_at(n_test);
        let (val_ids, train) = rest.split_at(n_val);
        let (lab, unlab) = train.split_at(n_lab);
        manifest.test.extend_from_slice(test_ids);
        manifest.val.extend_from_slice(val_ids);
        manifest.train_labeled.extend_from_slice(lab);
        manifest.train_unlabeled.extend_from_slice(unlab);
    }
    manifest.train_unlabeled.extend(
        records
            .iter()
            .filter(|r| r.label == Label::Unlabeled)
            .map(|r| r.sample_id),
    );
    for list in [
        &mut manifest.train_labeled,
        &mut manifest.train_unlabeled,
        &mut manifest.val,
        &mut manifest.test,
    ] {
        list.sort_unstable();
    }
    Ok(manifest)
}

/// Resamples `pool` so real and fake counts stand in exactly
/// `ratio.0 : ratio.1`, using the largest multiple that fits both classes
/// (optionally capped at `max_total` samples).
pub fn apply_imbalance(
    pool: &[(u64, Class)],
    ratio: (u32, u32),
    max_total: Option<usize>,
    seed: u64,
) -> Result<Vec<u64>> {
    let (r, f) = (ratio.0 as usize, ratio.1 as usize);
    if r == 0 || f == 0 {
        return Err(Error::InvalidArgument(format!("ratio {r}:{f} must be positive")));
    }
    let mut real: Vec<u64> = pool.iter().filter(|(_, c)| *c == Class::Real).map(|(id, _)| *id).collect();
    let mut fake: Vec<u64> = pool.iter().filter(|(_, c)| *c == Class::Fake).map(|(id, _)| *id).collect();
    let mut k = (real.len() / r).min(fake.len() / f);
    if let Some(cap) = max_total {
        k = k.min(cap / (r + f));
    }
    if k == 0 {
        return Err(Error::Insufficient(format!(
            "cannot realize {r}:{f} from {} real and {} fake samples",
            real.len(),
            fake.len()
        )));
    }
    let mut rng = rng::seeded(seed);
    real.shuffle(&mut rng);
    fake.shuffle(&mut rng);
    let mut out: Vec<u64> = real[..k * r].iter().chain(&fake[..k * f]).copied().collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// Draws `round(multiplier * n_labeled)` ids from the unlabeled pool. For a
/// fixed seed, smaller multipliers select prefixes of larger ones.
pub fn subsample_unlabeled(unlabeled: &[u64], multiplier: f64, n_labeled: usize, seed: u64) -> Result<Vec<u64>> {
    if !multiplier.is_finite() || multiplier < 0.0 {
        return Err(Error::InvalidArgument(format!("multiplier {multiplier} must be non-negative")));
    }
    let n = (multiplier * n_labeled as f64).round() as usize;
    if n > unlabeled.len() {
        return Err(Error::Insufficient(format!(
            "requested {n} unlabeled samples ({multiplier}x of {n_labeled}) but pool holds {}",
            unlabeled.len()
        )));
    }
    let mut ids = unlabeled.to_vec();
    ids.shuffle(&mut rng::seeded(seed));
    ids.truncate(n);
    Ok(ids)
}
