//! Synthetic category-discovery data, two-view batching and the `GCDS` file format.
//!
//! # `GCDS` layout (all integers little-endian)
//!
//! | field        | type                      |
//! |--------------|---------------------------|
//! | magic        | `b"GCDS"`                 |
//! | version      | `u32` = 1                 |
//! | N            | `u64`                     |
//! | d_in         | `u32`                     |
//! | K_all        | `u32`                     |
//! | K_base       | `u32`                     |
//! | N records    | `d_in × f64`, `i32` label, `u8` labeled flag |
//! | checksum     | `u64` FNV-1a 64 of every preceding byte, magic included |

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const GCDS_MAGIC: &[u8; 4] = b"GCDS";
pub const GCDS_VERSION: u32 = 1;
const CENTER_ATTEMPTS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub k_all: usize,
    pub k_base: usize,
    pub n_per_class: usize,
    pub d_in: usize,
    /// Minimum pairwise center distance, in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
    pub label_ratio: f64,
    pub aug_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            k_all: 10,
            k_base: 5,
            n_per_class: 100,
            d_in: 32,
            separation: 6.0,
            sigma: 1.0,
            label_ratio: 0.5,
            aug_sigma: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.k_base == 0 || self.k_base > self.k_all {
            return bad(format!("need 1 <= k_base <= k_all, got {} / {}", self.k_base, self.k_all));
        }
        if self.n_per_class < 2 {
            return bad(format!("data.n_per_class must be >= 2, got {}", self.n_per_class));
        }
        if self.d_in == 0 {
            return bad("data.d_in must be positive".into());
        }
        if !(self.separation > 0.0) || !(self.sigma > 0.0) {
            return bad("data.separation and data.sigma must be positive".into());
        }
        if !(self.label_ratio > 0.0 && self.label_ratio <= 1.0) {
            return bad(format!("data.label_ratio must lie in (0, 1], got {}", self.label_ratio));
        }
        if !(self.aug_sigma >= 0.0) {
            return bad(format!("data.aug_sigma must be >= 0, got {}", self.aug_sigma));
        }
        Ok(())
    }

    /// Labeled samples drawn from each base class.
    pub fn labeled_per_class(&self) -> usize {
        let n = self.n_per_class;
        if self.label_ratio >= 1.0 {
            return n;
        }
        ((self.label_ratio * n as f64).round() as usize).clamp(1, n - 1)
    }
}

/// Features, labels and the labeled/unlabeled split.
///
/// Classes `[0, k_base)` are base classes; only they may carry labels.
#[derive(Clone, Debug, PartialEq)]
pub struct GcdDataset {
    features: Tensor,
    labels: Vec<usize>,
    labeled: Vec<bool>,
    k_all: usize,
    k_base: usize,
}

impl GcdDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, labeled: Vec<bool>, k_all: usize, k_base: usize) -> Result<Self> {
        if features.ndim() != 2 {
            return Err(Error::contract(format!("features must be N x d_in, got {:?}", features.shape())));
        }
        let n = features.shape()[0];
        if labels.len() != n || labeled.len() != n {
            return Err(Error::contract(format!(
                "{n} rows but {} labels / {} flags",
                labels.len(),
                labeled.len()
            )));
        }
        if k_base == 0 || k_base > k_all {
            return Err(Error::contract(format!("need 1 <= k_base <= k_all, got {k_base} / {k_all}")));
        }
        if let Some(i) = labels.iter().position(|&y| y >= k_all) {
            return Err(Error::contract(format!("row {i}: label {} >= k_all {k_all}", labels[i])));
        }
        if let Some(i) = (0..n).find(|&i| labeled[i] && labels[i] >= k_base) {
            return Err(Error::contract(format!(
                "row {i}: labeled sample of novel class {}",
                labels[i]
            )));
        }
        if !features.is_finite() {
            return Err(Error::contract("non-finite feature value"));
        }
        Ok(GcdDataset {
            features,
            labels,
            labeled,
            k_all,
            k_base,
        })
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn labeled(&self) -> &[bool] {
        &self.labeled
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn d_in(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn k_all(&self) -> usize {
        self.k_all
    }

    pub fn k_base(&self) -> usize {
        self.k_base
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled.iter().filter(|&&l| l).count()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labeled[i]).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        let novel = self.labels.iter().filter(|&&y| y >= self.k_base).count();
        DatasetSummary {
            n: self.len(),
            d_in: self.d_in(),
            k_all: self.k_all,
            k_base: self.k_base,
            labeled: self.labeled_count(),
            unlabeled: self.len() - self.labeled_count(),
            unlabeled_base: self.len() - self.labeled_count() - novel,
            novel,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n: usize,
    pub d_in: usize,
    pub k_all: usize,
    pub k_base: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub unlabeled_base: usize,
    pub novel: usize,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gaussian clusters around well-separated centers.
///
/// Centers are random directions scaled to norm `separation · sigma`, each
/// redrawn until it lies at least `separation · sigma` from every earlier one.
/// Rows are class-major; a `label_ratio` share of each base class is labeled.
pub fn synth_gen(cfg: &SynthConfig) -> Result<GcdDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let radius = cfg.separation * cfg.sigma;

    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.k_all);
    for k in 0..cfg.k_all {
        let mut placed = false;
        for _ in 0..CENTER_ATTEMPTS {
            let v: Vec<f64> = (0..cfg.d_in).map(|_| std.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < 1e-12 {
                continue;
            }
            let c: Vec<f64> = v.iter().map(|x| x / n * radius).collect();
            if centers.iter().all(|o| dist(o, &c) >= radius) {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place center {k} at separation {} in {} dimensions after {CENTER_ATTEMPTS} draws",
                cfg.separation, cfg.d_in
            )));
        }
    }

    let n = cfg.k_all * cfg.n_per_class;
    let mut data = Vec::with_capacity(n * cfg.d_in);
    let mut labels = Vec::with_capacity(n);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..cfg.n_per_class {
            data.extend(c.iter().map(|m| m + cfg.sigma * std.sample(&mut rng)));
            labels.push(k);
        }
    }

    let mut labeled = vec![false; n];
    let per_class = cfg.labeled_per_class();
    for k in 0..cfg.k_base {
        let mut rows: Vec<usize> = (k * cfg.n_per_class..(k + 1) * cfg.n_per_class).collect();
        rows.shuffle(&mut rng);
        for &i in &rows[..per_class] {
            labeled[i] = true;
        }
    }
    GcdDataset::new(Tensor::new(vec![n, cfg.d_in], data)?, labels, labeled, cfg.k_all, cfg.k_base)
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Adds i.i.d. `N(0, σ_aug²)` noise to every coordinate.
pub fn augment(features: &Tensor, aug_sigma: f64, stream_seed: u64) -> Tensor {
    if aug_sigma == 0.0 {
        return features.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed);
    let noise = Normal::new(0.0, aug_sigma).expect("non-negative sigma");
    let data = features.data().iter().map(|v| v + noise.sample(&mut rng)).collect();
    Tensor::from_parts(features.shape().to_vec(), data)
}

/// Two augmented views of the same rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    /// Dataset row of each batch row.
    pub indices: Vec<usize>,
    pub view1: Tensor,
    pub view2: Tensor,
    pub labels: Vec<usize>,
    pub labeled: Vec<bool>,
}

/// Shuffles the dataset with `epoch_seed` and cuts it into two-view batches.
/// The final short batch is kept.
pub fn batches(dataset: &GcdDataset, batch_size: usize, epoch_seed: u64, aug_sigma: f64) -> Result<Vec<ViewPair>> {
    if batch_size < 2 {
        return Err(Error::contract(format!("batch size must be >= 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, idx)| {
            let x = dataset.features.select_rows(idx);
            let s = mix_seed(epoch_seed, b as u64);
            ViewPair {
                indices: idx.to_vec(),
                view1: augment(&x, aug_sigma, mix_seed(s, 1)),
                view2: augment(&x, aug_sigma, mix_seed(s, 2)),
                labels: idx.iter().map(|&i| dataset.labels[i]).collect(),
                labeled: idx.iter().map(|&i| dataset.labeled[i]).collect(),
            }
        })
        .collect())
}

/// FNV-1a, 64-bit.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn encode_dataset(ds: &GcdDataset) -> Vec<u8> {
    let d = ds.d_in();
    let mut buf = Vec::with_capacity(28 + ds.len() * (8 * d + 5) + 8);
    buf.extend_from_slice(GCDS_MAGIC);
    buf.extend_from_slice(&GCDS_VERSION.to_le_bytes());
    buf.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.k_all as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.k_base as u32).to_le_bytes());
    for (i, row) in ds.features.rows().enumerate() {
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(&(ds.labels[i] as i32).to_le_bytes());
        buf.push(u8::from(ds.labeled[i]));
    }
    let sum = fnv1a64(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    buf
}

/// Bounds-checked little-endian reader that reports offsets on failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                field,
                reason: format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    pub(crate) fn u32(&mut self, field: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn i32(&mut self, field: &'static str) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn u64(&mut self, field: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    pub(crate) fn f64(&mut self, field: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }

    /// Verifies the trailing FNV-1a checksum over everything read so far.
    pub(crate) fn finish_with_checksum(mut self) -> Result<()> {
        let end = self.pos;
        let expect = fnv1a64(&self.buf[..end]);
        let got = self.u64("checksum")?;
        if got != expect {
            return Err(Error::Format {
                offset: end as u64,
                field: "checksum",
                reason: format!("stored {got:#018x}, computed {expect:#018x}"),
            });
        }
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                field: "trailer",
                reason: format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub(crate) fn format_err(offset: usize, field: &'static str, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        field,
        reason: reason.into(),
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<GcdDataset> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != GCDS_MAGIC {
        return Err(format_err(0, "magic", format!("expected GCDS, found {magic:?}")));
    }
    let at = r.pos();
    let version = r.u32("version")?;
    if version != GCDS_VERSION {
        return Err(format_err(at, "version", format!("unsupported version {version}")));
    }
    let at = r.pos();
    let n = r.u64("n")?;
    let d = r.u32("d_in")? as usize;
    let k_all = r.u32("k_all")? as usize;
    let k_base = r.u32("k_base")? as usize;
    if d == 0 || n == 0 {
        return Err(format_err(at, "n", "empty dataset or zero feature width"));
    }
    if k_base == 0 || k_base > k_all {
        return Err(format_err(at + 16, "k_base", format!("need 1 <= k_base <= k_all, got {k_base}/{k_all}")));
    }
    let record = 8 * d as u64 + 5;
    let remaining = (bytes.len() - r.pos()) as u64;
    if n.checked_mul(record).is_none_or(|need| need + 8 > remaining) {
        return Err(format_err(r.pos(), "records", format!("truncated: {n} records of {record} bytes do not fit")));
    }
    let n = n as usize;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    let mut labeled = Vec::with_capacity(n);
    for i in 0..n {
        for _ in 0..d {
            let at = r.pos();
            let v = r.f64("feature")?;
            if !v.is_finite() {
                return Err(format_err(at, "feature", format!("row {i}: non-finite value")));
            }
            data.push(v);
        }
        let at = r.pos();
        let y = r.i32("label")?;
        if y < 0 || y as usize >= k_all {
            return Err(format_err(at, "label", format!("row {i}: label {y} outside [0, {k_all})")));
        }
        let at = r.pos();
        let flag = r.u8("labeled")?;
        if flag > 1 {
            return Err(format_err(at, "labeled", format!("row {i}: flag byte {flag}")));
        }
        if flag == 1 && y as usize >= k_base {
            return Err(format_err(at, "labeled", format!("row {i}: labeled sample of novel class {y}")));
        }
        labels.push(y as usize);
        labeled.push(flag == 1);
    }
    r.finish_with_checksum()?;
    GcdDataset::new(Tensor::new(vec![n, d], data)?, labels, labeled, k_all, k_base)
}

pub fn save_dataset(ds: &GcdDataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<GcdDataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
