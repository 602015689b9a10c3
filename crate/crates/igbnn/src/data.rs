//! Desk-scale dataset generation, deterministic splits and batching, plus
//! the on-disk dataset format.
//!
//! Features are normalized into the unit interval per coordinate so attack
//! budgets have a fixed scale. The binary format (`IGDS`) is a fixed
//! 24-byte header followed by little-endian doubles and 16-bit labels:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "IGDS"
//! 4       4     version (u32 LE, currently 1)
//! 8       4     count   (u32 LE)
//! 12      4     dim     (u32 LE)
//! 16      4     classes (u32 LE)
//! 20      4     bounds code (u32 LE, 0 = unit interval)
//! 24      8*count*dim   features, row-major f64 LE
//! ...     2*count       labels, u16 LE
//! ```

use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Distribution;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic bytes (not an IGDS file)")]
    BadMagic,
    #[error("unsupported IGDS version {0}")]
    UnsupportedVersion(u32),
    #[error("file truncated: expected {want} bytes, got {got}")]
    Truncated { want: usize, got: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("feature {value} outside bounds [{lo}, {hi}]")]
    OutOfBounds { value: f64, lo: f64, hi: f64 },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

const MAGIC: &[u8; 4] = b"IGDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Which partition a dataset belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Full,
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitTag::Full => write!(f, "full"),
            SplitTag::Train => write!(f, "train"),
            SplitTag::Val => write!(f, "val"),
            SplitTag::Test => write!(f, "test"),
        }
    }
}

/// Labeled features in the unit cube with split and provenance metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<u16>,
    dim: usize,
    classes: usize,
    split: SplitTag,
    provenance: String,
}

impl LabeledDataset {
    pub const BOUNDS: (f64, f64) = (0.0, 1.0);

    pub fn new(
        features: Vec<f64>,
        labels: Vec<u16>,
        dim: usize,
        classes: usize,
        provenance: String,
    ) -> Result<Self> {
        if dim == 0 || labels.is_empty() {
            return Err(DataError::Invalid("empty dataset".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(DataError::Invalid(format!(
                "{} features for {} rows of dim {dim}",
                features.len(),
                labels.len()
            )));
        }
        if classes < 2 || classes > u16::MAX as usize {
            return Err(DataError::Invalid(format!("bad class count {classes}")));
        }
        for &l in &labels {
            if l as usize >= classes {
                return Err(DataError::LabelOutOfRange {
                    label: l as usize,
                    classes,
                });
            }
        }
        let (lo, hi) = Self::BOUNDS;
        for &v in &features {
            if !v.is_finite() || v < lo || v > hi {
                return Err(DataError::OutOfBounds { value: v, lo, hi });
            }
        }
        Ok(LabeledDataset {
            features,
            labels,
            dim,
            classes,
            split: SplitTag::Full,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn split(&self) -> SplitTag {
        self.split
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// All features as a count x dim tensor.
    pub fn features_tensor(&self) -> Tensor {
        Tensor::new(vec![self.len(), self.dim], self.features.clone())
            .expect("dataset features are validated")
    }

    /// Rows selected by index, keeping metadata.
    pub fn take(&self, indices: &[usize], split: SplitTag) -> LabeledDataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            features.extend_from_slice(self.feature_row(i));
            labels.push(self.labels[i]);
        }
        LabeledDataset {
            features,
            labels,
            dim: self.dim,
            classes: self.classes,
            split,
            provenance: format!("{}|{}", self.provenance, split),
        }
    }

    /// Exact byte encoding of the `IGDS` format.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(
            HEADER_LEN + self.features.len() * 8 + self.labels.len() * 2,
        );
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.classes as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes()); // bounds code: unit interval
        for v in &self.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    /// Stable content digest of the encoded bytes.
    pub fn digest(&self) -> u64 {
        seeds::fnv1a64(&self.encode())
    }
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

/// Decode the `IGDS` byte format.
pub fn decode_dataset(bytes: &[u8], provenance: String) -> Result<LabeledDataset> {
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            want: HEADER_LEN,
            got: bytes.len(),
        });
    }
    if &bytes[0..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let count = read_u32(bytes, 8) as usize;
    let dim = read_u32(bytes, 12) as usize;
    let classes = read_u32(bytes, 16) as usize;
    let bounds_code = read_u32(bytes, 20);
    if bounds_code != 0 {
        return Err(DataError::Invalid(format!(
            "unknown bounds code {bounds_code}"
        )));
    }
    let want = HEADER_LEN + count * dim * 8 + count * 2;
    if bytes.len() != want {
        return Err(DataError::Truncated {
            want,
            got: bytes.len(),
        });
    }
    let mut features = Vec::with_capacity(count * dim);
    let mut off = HEADER_LEN;
    for _ in 0..count * dim {
        features.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
        off += 8;
    }
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()));
        off += 2;
    }
    LabeledDataset::new(features, labels, dim, classes, provenance)
}

pub fn save_dataset(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ds.encode())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let digest = seeds::fnv1a64(&bytes);
    decode_dataset(&bytes, format!("file({},digest={digest:016x})", path.display()))
}

/// Two interleaving half-circles, rescaled into the unit square. Class
/// counts differ by at most one; the first half of the rows is class 0.
pub fn gen_two_moons(count: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if count < 2 {
        return Err(DataError::Invalid(format!(
            "two moons needs at least 2 points, got {count}"
        )));
    }
    if !(noise >= 0.0) {
        return Err(DataError::Invalid(format!("negative noise {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let m0 = count - count / 2;
    let m1 = count / 2;

    let mut features = Vec::with_capacity(count * 2);
    let mut labels = Vec::with_capacity(count);
    let arc = |i: usize, m: usize| -> f64 {
        if m <= 1 {
            0.0
        } else {
            std::f64::consts::PI * i as f64 / (m - 1) as f64
        }
    };
    // Canonical geometry: outer arc (cos t, sin t), inner arc
    // (1 - cos t, 0.5 - sin t); joint bounding box [-1,2] x [-0.5,1].
    let push = |features: &mut Vec<f64>, rng: &mut ChaCha8Rng, x: f64, y: f64| {
        let (nx, ny): (f64, f64) = if noise > 0.0 {
            (
                normal.sample(rng),
                normal.sample(rng),
            )
        } else {
            (0.0, 0.0)
        };
        let px = x + noise * nx;
        let py = y + noise * ny;
        features.push(((px + 1.0) / 3.0).clamp(0.0, 1.0));
        features.push(((py + 0.5) / 1.5).clamp(0.0, 1.0));
    };
    for i in 0..m0 {
        let t = arc(i, m0);
        push(&mut features, &mut rng, t.cos(), t.sin());
        labels.push(0);
    }
    for i in 0..m1 {
        let t = arc(i, m1);
        push(&mut features, &mut rng, 1.0 - t.cos(), 0.5 - t.sin());
        labels.push(1);
    }
    LabeledDataset::new(
        features,
        labels,
        2,
        2,
        format!("two_moons(count={count},noise={noise},seed={seed})"),
    )
}

/// K isotropic Gaussian blobs at fixed vertices of a regular polygon in the
/// unit square, labels assigned round-robin (balanced up to one point).
pub fn gen_gaussian_blobs(count: usize, k: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if k < 2 {
        return Err(DataError::Invalid(format!("need at least 2 blobs, got {k}")));
    }
    if count == 0 {
        return Err(DataError::Invalid("empty dataset".into()));
    }
    if !(spread >= 0.0) {
        return Err(DataError::Invalid(format!("negative spread {spread}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::StandardNormal;
    let centers: Vec<(f64, f64)> = (0..k)
        .map(|c| {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            (0.5 + 0.35 * angle.cos(), 0.5 + 0.35 * angle.sin())
        })
        .collect();
    let mut features = Vec::with_capacity(count * 2);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % k;
        let (cx, cy) = centers[class];
        let nx: f64 = normal.sample(&mut rng);
        let ny: f64 = normal.sample(&mut rng);
        features.push((cx + spread * nx).clamp(0.0, 1.0));
        features.push((cy + spread * ny).clamp(0.0, 1.0));
        labels.push(class as u16);
    }
    LabeledDataset::new(
        features,
        labels,
        2,
        k,
        format!("gaussian_blobs(count={count},k={k},spread={spread},seed={seed})"),
    )
}

/// Deterministic seeded partition into train/val/test. Fractions apply to
/// the shuffled order; the remainder is the test split.
pub fn split_dataset(
    ds: &LabeledDataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    if !(0.0..=1.0).contains(&train_frac)
        || !(0.0..=1.0).contains(&val_frac)
        || train_frac + val_frac > 1.0
    {
        return Err(DataError::Invalid(format!(
            "bad split fractions {train_frac}/{val_frac}"
        )));
    }
    let n = ds.len();
    let perm = permutation(n, seeds::derive(seed, "split", 0));
    let n_train = (train_frac * n as f64).round() as usize;
    let n_val = (val_frac * n as f64).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok((
        ds.take(&perm[..n_train], SplitTag::Train),
        ds.take(&perm[n_train..n_train + n_val], SplitTag::Val),
        ds.take(&perm[n_train + n_val..], SplitTag::Test),
    ))
}

/// Fisher-Yates permutation of 0..n under a ChaCha stream.
fn permutation(n: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// One minibatch: features as batch x dim plus labels.
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
}

/// Seeded per-epoch permutation split into batches; the final partial batch
/// is kept.
pub fn batches(ds: &LabeledDataset, batch_size: usize, seed: u64, epoch: u64) -> Vec<Batch> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    let order = permutation(ds.len(), seeds::derive(seed, "shuffle", epoch));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut feats = Vec::with_capacity(chunk.len() * ds.dim());
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                feats.extend_from_slice(ds.feature_row(i));
                labels.push(ds.label(i));
            }
            Batch {
                x: Tensor::new(vec![chunk.len(), ds.dim()], feats)
                    .expect("validated features"),
                labels,
            }
        })
        .collect()
}

/// Write `f0..f{d-1},label` CSV.
pub fn export_csv(ds: &LabeledDataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for d in 0..ds.dim() {
        out.push_str(&format!("f{d},"));
    }
    out.push_str("label\n");
    for i in 0..ds.len() {
        for v in ds.feature_row(i) {
            out.push_str(&format!("{v},"));
        }
        out.push_str(&format!("{}\n", ds.label(i)));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read `f0..f{d-1},label` CSV; the class count is the largest label + 1
/// (at least 2).
pub fn import_csv(path: &Path) -> Result<LabeledDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(DataError::Csv {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols.last() != Some(&"label") {
        return Err(DataError::Csv {
            line: 1,
            msg: "header must be f0..f{d-1},label".into(),
        });
    }
    let dim = cols.len() - 1;
    for (d, col) in cols[..dim].iter().enumerate() {
        if *col != format!("f{d}") {
            return Err(DataError::Csv {
                line: 1,
                msg: format!("expected column f{d}, got {col}"),
            });
        }
    }
    let mut features = Vec::new();
    let mut labels: Vec<u16> = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != dim + 1 {
            return Err(DataError::Csv {
                line: lineno + 1,
                msg: format!("expected {} fields, got {}", dim + 1, parts.len()),
            });
        }
        for p in &parts[..dim] {
            features.push(p.trim().parse::<f64>().map_err(|e| DataError::Csv {
                line: lineno + 1,
                msg: e.to_string(),
            })?);
        }
        labels.push(parts[dim].trim().parse::<u16>().map_err(|e| DataError::Csv {
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    let classes = labels
        .iter()
        .map(|&l| l as usize + 1)
        .max()
        .unwrap_or(2)
        .max(2);
    let digest = seeds::fnv1a64(text.as_bytes());
    LabeledDataset::new(
        features,
        labels,
        dim,
        classes,
        format!("csv({},digest={digest:016x})", path.display()),
    )
}
