//! Datasets: IDX and CSV ingestion, a synthetic binary-attribute generator,
//! and batch sampling with replacement.
//!
//! Features are stored flat (`len × num_features`, row-major) and normalised
//! to `[0, 1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Purpose, RngStream};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Probability of flipping each prototype bit in [`synth_attributes`].
pub const BITFLIP_PROB: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    shape: Vec<usize>,
    num_classes: usize,
    feature_range: (f64, f64),
}

impl Dataset {
    /// Validates and builds a dataset. `shape` is the per-example feature
    /// shape (e.g. `[28, 28]` or `[600]`).
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        shape: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::invalid(format!("invalid feature shape {shape:?}")));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let width: usize = shape.iter().product();
        if features.len() != labels.len() * width {
            return Err(Error::ShapeMismatch {
                expected: vec![labels.len(), width],
                actual: vec![features.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label, num_classes });
        }
        if let Some(i) = features.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(format!(
                "feature {} of example {} is outside [0, 1]",
                i % width,
                i / width
            )));
        }
        Ok(Self {
            features,
            labels,
            shape,
            num_classes,
            feature_range: (0.0, 1.0),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_range(&self) -> (f64, f64) {
        self.feature_range
    }

    pub fn features(&self, i: usize) -> &[f64] {
        let w = self.num_features();
        &self.features[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn example(&self, i: usize) -> (&[f64], usize) {
        (self.features(i), self.labels[i])
    }

    /// New dataset made of the given examples, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let w = self.num_features();
        let mut features = Vec::with_capacity(indices.len() * w);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!("index {i} out of range for {} examples", self.len())));
            }
            features.extend_from_slice(self.features(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(features, labels, self.shape.clone(), self.num_classes)
    }

    /// Splits into the first `round(ratio·N)` examples and the rest.
    pub fn split(&self, ratio: f64) -> Result<(Dataset, Dataset)> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::invalid(format!("split ratio must lie in (0, 1), got {ratio}")));
        }
        let k = (ratio * self.len() as f64).round() as usize;
        if k == 0 || k == self.len() {
            return Err(Error::invalid(format!(
                "split ratio {ratio} leaves an empty side for {} examples",
                self.len()
            )));
        }
        let head: Vec<usize> = (0..k).collect();
        let tail: Vec<usize> = (k..self.len()).collect();
        Ok((self.subset(&head)?, self.subset(&tail)?))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Indices drawn for one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub sampling_rate: f64,
}

/// Draws `b` indices uniformly with replacement; `q = b / N`.
pub fn sample_batch(ds: &Dataset, b: usize, rng: &mut RngStream) -> Result<Batch> {
    let n = ds.len();
    if b == 0 || b > n {
        return Err(Error::invalid(format!("batch size {b} must lie in [1, {n}]")));
    }
    let indices = (0..b).map(|_| rng.next_below(n as u64) as usize).collect();
    Ok(Batch {
        indices,
        sampling_rate: b as f64 / n as f64,
    })
}

/// Binary attribute data: `num_classes` random prototypes, each example a
/// copy of its class prototype with every bit flipped with probability 0.1.
pub fn synth_attributes(
    n: usize,
    num_features: usize,
    num_classes: usize,
    seed: u64,
) -> Result<Dataset> {
    if n == 0 || num_features == 0 || num_classes == 0 || num_classes > n {
        return Err(Error::invalid(format!(
            "synthetic data needs positive sizes and num_classes ≤ n (n={n}, features={num_features}, classes={num_classes})"
        )));
    }
    let mut proto_rng = RngStream::new(seed, Purpose::Data, 0, 0);
    let prototypes: Vec<bool> = (0..num_classes * num_features)
        .map(|_| proto_rng.bernoulli(0.5))
        .collect();
    let mut rng = RngStream::new(seed, Purpose::Data, 1, 0);
    let mut features = Vec::with_capacity(n * num_features);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.next_below(num_classes as u64) as usize;
        let proto = &prototypes[label * num_features..(label + 1) * num_features];
        for &bit in proto {
            let flipped = bit ^ rng.bernoulli(BITFLIP_PROB);
            features.push(if flipped { 1.0 } else { 0.0 });
        }
        labels.push(label);
    }
    Dataset::new(features, labels, vec![num_features], num_classes)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            needed: at + 4,
            found: bytes.len(),
        })
}

fn parse_header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::BadMagic { expected: magic, found });
    }
    (0..dims).map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize)).collect()
}

/// Parses IDX image and label byte buffers (already decompressed).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let dims = parse_header(images, IDX_IMAGES_MAGIC, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let needed = 16 + n * rows * cols;
    if images.len() < needed {
        return Err(Error::Truncated {
            needed,
            found: images.len(),
        });
    }
    let n_labels = parse_header(labels, IDX_LABELS_MAGIC, 1)?[0];
    if labels.len() < 8 + n_labels {
        return Err(Error::Truncated {
            needed: 8 + n_labels,
            found: labels.len(),
        });
    }
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }
    let features = images[16..needed].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[8..8 + n].iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(features, labels, vec![rows, cols], num_classes)
}

/// Loads an IDX image/label pair. Gzipped files are detected by their header.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = read_maybe_gz(images_path.as_ref())?;
    let labels = read_maybe_gz(labels_path.as_ref())?;
    parse_idx(&images, &labels)
}

/// Serialises a two-dimensional-feature dataset to IDX bytes, quantising
/// features to `round(255·v)`.
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (rows, cols) = match ds.feature_shape() {
        [r, c] => (*r, *c),
        [w] => (1, *w),
        other => return Err(Error::invalid(format!("cannot encode feature shape {other:?} as IDX"))),
    };
    if ds.labels().iter().any(|&l| l > 255) {
        return Err(Error::invalid("IDX labels must fit in one byte"));
    }
    let mut images = Vec::with_capacity(16 + ds.len() * rows * cols);
    images.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for d in [ds.len(), rows, cols] {
        images.extend_from_slice(&(d as u32).to_be_bytes());
    }
    images.extend(ds.features.iter().map(|&v| (v * 255.0).round() as u8));
    let mut labels = Vec::with_capacity(8 + ds.len());
    labels.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    labels.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    labels.extend(ds.labels().iter().map(|&l| l as u8));
    Ok((images, labels))
}

/// Writes an IDX pair; paths ending in `.gz` are gzip-compressed.
pub fn save_idx(
    ds: &Dataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let (images, labels) = encode_idx(ds)?;
    for (path, bytes) in [(images_path.as_ref(), images), (labels_path.as_ref(), labels)] {
        let file = BufWriter::new(File::create(path)?);
        if path.extension().is_some_and(|e| e == "gz") {
            let mut enc = GzEncoder::new(file, Compression::default());
            enc.write_all(&bytes)?;
            enc.finish()?.flush()?;
        } else {
            let mut file = file;
            file.write_all(&bytes)?;
            file.flush()?;
        }
    }
    Ok(())
}

/// Loads attribute data from CSV: a header row, numeric feature columns and
/// an integer label in the last column. Each feature column is min-max
/// scaled to `[0, 1]` (constant columns become 0).
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path.as_ref())
        .map_err(|e| Error::Csv {
            record: 0,
            message: e.to_string(),
        })?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let record = i + 1;
        let rec = rec.map_err(|e| Error::Csv {
            record,
            message: e.to_string(),
        })?;
        if rec.len() < 2 {
            return Err(Error::Csv {
                record,
                message: "need at least one feature and a label".into(),
            });
        }
        let parse = |s: &str| {
            s.trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| Error::Csv {
                record,
                message: format!("not a finite number: {s:?}"),
            })
        };
        let row = rec.iter().take(rec.len() - 1).map(parse).collect::<Result<Vec<_>>>()?;
        let last = &rec[rec.len() - 1];
        let label = last.trim().parse::<usize>().map_err(|_| Error::Csv {
            record,
            message: format!("label is not a non-negative integer: {last:?}"),
        })?;
        if rows.first().is_some_and(|f: &Vec<f64>| f.len() != row.len()) {
            return Err(Error::Csv {
                record,
                message: format!("expected {} features, found {}", rows[0].len(), row.len()),
            });
        }
        rows.push(row);
        labels.push(label);
    }
    if rows.is_empty() {
        return Err(Error::Csv {
            record: 0,
            message: "no data rows".into(),
        });
    }
    let width = rows[0].len();
    let mut lo = vec![f64::INFINITY; width];
    let mut hi = vec![f64::NEG_INFINITY; width];
    for row in &rows {
        for (j, &v) in row.iter().enumerate() {
            lo[j] = lo[j].min(v);
            hi[j] = hi[j].max(v);
        }
    }
    let mut features = Vec::with_capacity(rows.len() * width);
    for row in &rows {
        for (j, &v) in row.iter().enumerate() {
            let span = hi[j] - lo[j];
            features.push(if span > 0.0 { (v - lo[j]) / span } else { 0.0 });
        }
    }
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, labels, vec![width], num_classes)
}
