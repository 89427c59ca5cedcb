//! Dataset ingestion (IDX image/label pairs and a simple embedding format)
//! and results persistence.
//!
//! Embedding file layout (little-endian):
//!
//! ```text
//! b"SDMEMB1\n"
//! u32 count, u32 dim, u32 num_classes
//! count*dim f32 features, row-major
//! count u32 labels
//! ```

use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::{MetricsLog, RunSummary};
use crate::numerics::{DenseMatrix, Real};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const EMBEDDING_MAGIC: &[u8; 8] = b"SDMEMB1\n";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic in {what}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        what: &'static str,
        expected: u32,
        found: u32,
    },
    #[error("bad magic in embedding file")]
    BadEmbeddingMagic,
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("truncated {what}: needed {needed} bytes, found {found}")]
    Truncated {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("label {label} out of range for {num_classes} classes (sample {index})")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed results file: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Normalization {
    None,
    PerSampleL2,
}

/// Samples stored as rows of `features` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset<T> {
    pub features: DenseMatrix<T>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub normalization: Normalization,
    pub provenance: String,
}

impl<T: Real> LabeledDataset<T> {
    pub fn new(
        features: DenseMatrix<T>,
        labels: Vec<usize>,
        num_classes: usize,
        provenance: impl Into<String>,
    ) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(DataError::CountMismatch {
                images: features.rows(),
                labels: labels.len(),
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            normalization: Normalization::None,
            provenance: provenance.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn sample(&self, i: usize) -> (&[T], usize) {
        (self.features.row(i), self.labels[i])
    }

    /// Scales every row to unit norm; all-zero rows are left as they are.
    /// Applying it twice is a no-op.
    pub fn normalize_l2(&mut self) {
        if self.normalization == Normalization::PerSampleL2 {
            return;
        }
        for i in 0..self.features.rows() {
            let row = self.features.row_mut(i);
            let norm = crate::numerics::norm(row);
            if norm > T::zero() {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        self.normalization = Normalization::PerSampleL2;
        self.provenance.push_str(" | l2");
    }

    /// The samples at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
        }
        Self {
            features: DenseMatrix::from_vec(indices.len(), dim, data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            normalization: self.normalization,
            provenance: self.provenance.clone(),
        }
    }

    /// All samples whose label is in `classes`, original order preserved.
    pub fn subset_by_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| classes.contains(&self.labels[i])).collect();
        self.select(&idx)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn cast<U: Real>(&self) -> LabeledDataset<U> {
        LabeledDataset {
            features: self.features.cast(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            normalization: self.normalization,
            provenance: self.provenance.clone(),
        }
    }

    /// Per-feature min-subtract and max-divide over the whole set, for visual export.
    pub fn rescaled_for_display(&self) -> DenseMatrix<f64> {
        let m = self.features.cast::<f64>();
        let min = m.as_slice().iter().copied().fold(f64::INFINITY, f64::min);
        let shifted: Vec<f64> = m.as_slice().iter().map(|v| v - min).collect();
        let max = shifted.iter().copied().fold(0.0, f64::max);
        let data = shifted
            .into_iter()
            .map(|v| if max > 0.0 { v / max } else { 0.0 })
            .collect();
        DenseMatrix::from_vec(m.rows(), m.cols(), data).expect("same shape")
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(io_err(path))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(io_err(path))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            what,
            needed: at + 4,
            found: bytes.len(),
        })
}

/// Parses in-memory IDX image and label files. Pixels are scaled to `[0, 1]`.
pub fn parse_idx_bytes<T: Real>(images: &[u8], labels: &[u8]) -> Result<LabeledDataset<T>> {
    let magic = be_u32(images, 0, "image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(DataError::BadMagic {
            what: "image file",
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let lmagic = be_u32(labels, 0, "label header")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(DataError::BadMagic {
            what: "label file",
            expected: IDX_LABELS_MAGIC,
            found: lmagic,
        });
    }
    let count = be_u32(images, 4, "image header")? as usize;
    let rows = be_u32(images, 8, "image header")? as usize;
    let cols = be_u32(images, 12, "image header")? as usize;
    let nlabels = be_u32(labels, 4, "label header")? as usize;
    if count != nlabels {
        return Err(DataError::CountMismatch {
            images: count,
            labels: nlabels,
        });
    }
    let dim = rows * cols;
    let pixels = images.get(16..16 + count * dim).ok_or(DataError::Truncated {
        what: "image data",
        needed: 16 + count * dim,
        found: images.len(),
    })?;
    let label_bytes = labels.get(8..8 + count).ok_or(DataError::Truncated {
        what: "label data",
        needed: 8 + count,
        found: labels.len(),
    })?;
    let data: Vec<T> = pixels.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(10);
    let features = DenseMatrix::from_vec(count, dim, data).expect("sized above");
    LabeledDataset::new(features, labels, num_classes, "idx")
}

/// Reads an IDX image/label file pair (optionally gzip-compressed).
pub fn parse_idx<T: Real>(images: &Path, labels: &Path) -> Result<LabeledDataset<T>> {
    let img = read_maybe_gz(images)?;
    let lab = read_maybe_gz(labels)?;
    let mut ds = parse_idx_bytes(&img, &lab)?;
    ds.provenance = format!("idx:{}", images.display());
    Ok(ds)
}

/// Encodes a dataset as IDX image and label bytes. Features must lie in `[0, 1]`
/// and the dimension is written as a single row.
pub fn encode_idx<T: Real>(ds: &LabeledDataset<T>, rows: usize, cols: usize) -> Result<(Vec<u8>, Vec<u8>)> {
    if rows * cols != ds.dim() {
        return Err(DataError::Invalid(format!(
            "{rows}x{cols} does not match dimension {}",
            ds.dim()
        )));
    }
    let mut img = Vec::with_capacity(16 + ds.len() * ds.dim());
    for v in [IDX_IMAGES_MAGIC, ds.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&v.to_be_bytes());
    }
    img.extend(
        ds.features
            .as_slice()
            .iter()
            .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    let mut lab = Vec::with_capacity(8 + ds.len());
    lab.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    Ok((img, lab))
}

fn le_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(DataError::Truncated {
            what,
            needed: at + 4,
            found: bytes.len(),
        })
}

pub fn parse_embeddings_bytes<T: Real>(bytes: &[u8]) -> Result<LabeledDataset<T>> {
    if bytes.len() < EMBEDDING_MAGIC.len() {
        return Err(DataError::Truncated {
            what: "embedding header",
            needed: EMBEDDING_MAGIC.len(),
            found: bytes.len(),
        });
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(DataError::BadEmbeddingMagic);
    }
    let count = le_u32(bytes, 8, "embedding header")? as usize;
    let dim = le_u32(bytes, 12, "embedding header")? as usize;
    let num_classes = le_u32(bytes, 16, "embedding header")? as usize;
    let feat_start = 20;
    let feat_end = feat_start + count * dim * 4;
    let label_end = feat_end + count * 4;
    if bytes.len() < feat_end {
        return Err(DataError::Truncated {
            what: "embedding features",
            needed: feat_end,
            found: bytes.len(),
        });
    }
    if bytes.len() < label_end {
        return Err(DataError::Truncated {
            what: "embedding labels",
            needed: label_end,
            found: bytes.len(),
        });
    }
    let data: Vec<T> = bytes[feat_start..feat_end]
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let labels: Vec<usize> = bytes[feat_end..label_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let features = DenseMatrix::from_vec(count, dim, data).expect("sized above");
    LabeledDataset::new(features, labels, num_classes, "embeddings")
}

pub fn parse_embeddings<T: Real>(path: &Path) -> Result<LabeledDataset<T>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let mut ds = parse_embeddings_bytes(&bytes)?;
    ds.provenance = format!("embeddings:{}", path.display());
    Ok(ds)
}

pub fn encode_embeddings<T: Real>(ds: &LabeledDataset<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + ds.len() * (ds.dim() + 1) * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    for v in [ds.len() as u32, ds.dim() as u32, ds.num_classes as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in ds.features.as_slice() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    for &l in &ds.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn write_embeddings<T: Real>(ds: &LabeledDataset<T>, path: &Path) -> Result<()> {
    write_atomic(path, &encode_embeddings(ds))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    static NEXT: AtomicU64 = AtomicU64::new(0);
    let unique = NEXT.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(".{name}.{}.{unique}.tmp", std::process::id()));
    {
        let file = File::create(&tmp).map_err(io_err(&tmp))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(io_err(&tmp))?;
        w.flush().map_err(io_err(&tmp))?;
        w.get_ref().sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Paths written by [`write_results`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultPaths {
    pub records: PathBuf,
    pub summary: PathBuf,
}

/// Writes `<stem>.jsonl` (one record per task and epoch) and `<stem>.summary.json`.
pub fn write_results(log: &MetricsLog, dir: &Path, stem: &str) -> Result<ResultPaths> {
    let mut lines = Vec::new();
    for rec in &log.records {
        serde_json::to_writer(&mut lines, rec)?;
        lines.push(b'\n');
    }
    let records = dir.join(format!("{stem}.jsonl"));
    write_atomic(&records, &lines)?;
    let summary = dir.join(format!("{stem}.summary.json"));
    let body = serde_json::to_vec_pretty(&log.summary())?;
    write_atomic(&summary, &body)?;
    Ok(ResultPaths { records, summary })
}

pub fn read_records(path: &Path) -> Result<Vec<crate::continual::EpochRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(DataError::from))
        .collect()
}

pub fn read_summary(path: &Path) -> Result<RunSummary> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(serde_json::from_str(&text)?)
}
