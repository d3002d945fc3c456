//! In-memory datasets: IDX and CSV loaders plus deterministic synthetic
//! generators.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Batch;
use crate::rng::{derive_seed, UnitRng};
use crate::tensor::{split_range, Blob};

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Feature rows with one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Blob,
    pub labels: Blob,
}

impl Dataset {
    pub fn new(features: Blob, labels: Blob) -> Result<Self> {
        if labels.cols() != 1 || labels.rows() != features.rows() {
            return Err(Error::Dimension {
                op: "dataset",
                lhs: features.shape(),
                rhs: labels.shape(),
            });
        }
        Ok(Dataset { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// `size` consecutive rows starting at `start`, wrapping around the end.
    pub fn batch(&self, start: usize, size: usize) -> Batch {
        let n = self.len();
        let d = self.dim();
        let mut features = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for i in 0..size {
            let r = (start + i) % n;
            features.extend_from_slice(self.features.row(r));
            labels.push(self.labels.get(r, 0));
        }
        Batch {
            features: Blob::from_vec(size, d, features).expect("sizes agree"),
            labels: Blob::from_vec(size, 1, labels).expect("sizes agree"),
        }
    }

    /// Rows `start..start+len` without wrapping.
    pub fn range(&self, start: usize, len: usize) -> Batch {
        Batch {
            features: self.features.rows_range(start, len),
            labels: self.labels.rows_range(start, len),
        }
    }

    /// Contiguous shard `index` of `parts`, sized like a tensor slice.
    pub fn shard(&self, index: usize, parts: usize) -> Result<Dataset> {
        let (start, len) = split_range(self.len(), parts, index)?;
        let b = self.range(start, len);
        Dataset::new(b.features, b.labels)
    }

    /// Rows permuted by a generator derived from `seed`.
    pub fn shuffled(&self, seed: u64) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut UnitRng::derived(seed, "shuffle"));
        let d = self.dim();
        let mut features = Vec::with_capacity(self.features.len());
        let mut labels = Vec::with_capacity(self.len());
        for &r in &order {
            features.extend_from_slice(self.features.row(r));
            labels.push(self.labels.get(r, 0));
        }
        Dataset {
            features: Blob::from_vec(self.len(), d, features).expect("sizes agree"),
            labels: Blob::from_vec(self.len(), 1, labels).expect("sizes agree"),
        }
    }
}

fn format_err(path: &Path, location: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        location: location.into(),
        reason: reason.into(),
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("four bytes")))
        .ok_or_else(|| format_err(path, format!("byte {at}"), "file ends inside the header"))
}

/// Reads an IDX image file (magic `0x00000803`) and its label file (magic
/// `0x00000801`). Pixels are scaled to `[0, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let img = fs::read(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES {
        return Err(format_err(images, "byte 0", format!("bad magic {magic:#010x}, expected {IDX_IMAGES:#010x}")));
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let d = rows * cols;
    let body = &img[16..];
    if body.len() != n * d {
        return Err(format_err(
            images,
            format!("byte {}", 16 + body.len().min(n * d)),
            format!("expected {} pixel bytes, found {}", n * d, body.len()),
        ));
    }
    let features = Blob::from_vec(n, d, body.iter().map(|&p| p as f64 / 255.0).collect())?;

    let lab = fs::read(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS {
        return Err(format_err(labels, "byte 0", format!("bad magic {magic:#010x}, expected {IDX_LABELS:#010x}")));
    }
    let m = be_u32(&lab, 4, labels)? as usize;
    if m != n {
        return Err(format_err(labels, "byte 4", format!("{m} labels for {n} images")));
    }
    let body = &lab[8..];
    if body.len() != n {
        return Err(format_err(
            labels,
            format!("byte {}", 8 + body.len().min(n)),
            format!("expected {n} label bytes, found {}", body.len()),
        ));
    }
    let labels = Blob::from_vec(n, 1, body.iter().map(|&l| l as f64).collect())?;
    Dataset::new(features, labels)
}

/// Writes an IDX pair for `rows×cols` images given as bytes.
pub fn write_idx(images: &Path, labels: &Path, rows: usize, cols: usize, pixels: &[Vec<u8>], classes: &[u8]) -> Result<()> {
    let mut img = Vec::new();
    img.extend_from_slice(&IDX_IMAGES.to_be_bytes());
    for v in [pixels.len(), rows, cols] {
        img.extend_from_slice(&(v as u32).to_be_bytes());
    }
    for p in pixels {
        img.extend_from_slice(p);
    }
    fs::write(images, img)?;
    let mut lab = Vec::new();
    lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
    lab.extend_from_slice(&(classes.len() as u32).to_be_bytes());
    lab.extend_from_slice(classes);
    fs::write(labels, lab)?;
    Ok(())
}

/// Reads numeric CSV rows without a header; the last column is the label.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| format_err(path, "line 1", e.to_string()))?;
    let mut width = None;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 1;
        let record = record.map_err(|e| format_err(path, format!("line {line}"), e.to_string()))?;
        if record.len() < 2 {
            return Err(format_err(path, format!("line {line}"), "need at least one feature and a label"));
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(format_err(
                    path,
                    format!("line {line}"),
                    format!("ragged row: {} columns, expected {w}", record.len()),
                ))
            }
            Some(_) => {}
        }
        for (c, field) in record.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(path, format!("line {line}, column {}", c + 1), format!("not a number: {field:?}"))
            })?;
            if c + 1 == record.len() {
                labels.push(v);
            } else {
                features.push(v);
            }
        }
    }
    let w = width.ok_or_else(|| format_err(path, "line 1", "no rows"))?;
    let n = labels.len();
    Dataset::new(Blob::from_vec(n, w - 1, features)?, Blob::from_vec(n, 1, labels)?)
}

/// Writes the dataset in the format read by [`load_csv`]. Values are
/// printed in their shortest round-trip form.
pub fn write_csv(data: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| format_err(path, "line 1", e.to_string()))?;
    for r in 0..data.len() {
        let mut row: Vec<String> = data.features.row(r).iter().map(|v| v.to_string()).collect();
        row.push(data.labels.get(r, 0).to_string());
        w.write_record(&row).map_err(|e| format_err(path, format!("line {}", r + 1), e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Generator {
    /// One Gaussian blob per class with centers on the axes.
    Gaussians,
    /// Binary rows drawn from a fixed set of bit patterns, with flips.
    BitPatterns,
    /// Windows of symbol ids over a repeating text.
    RepeatingText,
}

fn default_noise() -> f64 {
    0.5
}

/// Settings of a synthetic dataset. Which optional fields apply depends on
/// the generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub generator: Generator,
    pub n: usize,
    /// Standard deviation for Gaussians, flip probability for bit patterns.
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Symbols per row for repeating text.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
}

impl SyntheticSpec {
    pub fn gaussians(n: usize, dim: usize, classes: usize, noise: f64) -> Self {
        SyntheticSpec {
            generator: Generator::Gaussians,
            n,
            noise,
            dim: Some(dim),
            classes: Some(classes),
            text: None,
            window: None,
        }
    }

    pub fn bit_patterns(n: usize, noise: f64) -> Self {
        SyntheticSpec {
            generator: Generator::BitPatterns,
            n,
            noise,
            dim: None,
            classes: None,
            text: None,
            window: None,
        }
    }

    pub fn repeating_text(text: &str, n: usize, window: usize) -> Self {
        SyntheticSpec {
            generator: Generator::RepeatingText,
            n,
            noise: 0.0,
            dim: None,
            classes: None,
            text: Some(text.to_string()),
            window: Some(window),
        }
    }

    pub fn validate(&self, path: &str) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::validation(format!("{path}.{field}"), why));
        if self.n == 0 {
            return bad("n", "must be at least 1");
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("noise", "must be a finite non-negative number");
        }
        match self.generator {
            Generator::Gaussians => {
                if self.dim == Some(0) {
                    return bad("dim", "must be at least 1");
                }
                if self.classes.is_some_and(|c| c < 2) {
                    return bad("classes", "must be at least 2");
                }
            }
            Generator::BitPatterns => {
                if self.noise > 1.0 {
                    return bad("noise", "is a flip probability and must not exceed 1");
                }
            }
            Generator::RepeatingText => {
                if self.text.as_deref().is_none_or(str::is_empty) {
                    return bad("text", "repeating_text needs a nonempty text");
                }
                if self.window.is_none_or(|w| w < 2) {
                    return bad("window", "repeating_text needs a window of at least 2");
                }
            }
        }
        Ok(())
    }

    /// Vocabulary of a repeating text: its distinct characters in order of
    /// first appearance.
    pub fn vocabulary(&self) -> Vec<char> {
        let mut v = Vec::new();
        for c in self.text.as_deref().unwrap_or("").chars() {
            if !v.contains(&c) {
                v.push(c);
            }
        }
        v
    }

    /// Deterministic dataset for a given seed.
    pub fn generate(&self, seed: u64) -> Result<Dataset> {
        self.validate("data")?;
        let mut rng = UnitRng::new(derive_seed(seed, "synthetic"));
        match self.generator {
            Generator::Gaussians => {
                let dim = self.dim.unwrap_or(2);
                let classes = self.classes.unwrap_or(2);
                let noise = Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE))
                    .map_err(|e| Error::validation("data.noise", e.to_string()))?;
                let mut features = Vec::with_capacity(self.n * dim);
                let mut labels = Vec::with_capacity(self.n);
                for i in 0..self.n {
                    let class = i % classes;
                    for j in 0..dim {
                        // Centers at ±2 on axis class/2.
                        let axis = (class / 2) % dim;
                        let center = if j == axis {
                            if class % 2 == 0 { 2.0 } else { -2.0 }
                        } else {
                            0.0
                        };
                        features.push(center + noise.sample(&mut rng));
                    }
                    labels.push(class as f64);
                }
                Dataset::new(Blob::from_vec(self.n, dim, features)?, Blob::from_vec(self.n, 1, labels)?)
            }
            Generator::BitPatterns => {
                const PATTERNS: [[f64; 4]; 4] = [
                    [1.0, 1.0, 0.0, 0.0],
                    [0.0, 0.0, 1.0, 1.0],
                    [1.0, 0.0, 1.0, 0.0],
                    [0.0, 1.0, 0.0, 1.0],
                ];
                let mut features = Vec::with_capacity(self.n * 4);
                let mut labels = Vec::with_capacity(self.n);
                for i in 0..self.n {
                    let k = i % PATTERNS.len();
                    for &bit in &PATTERNS[k] {
                        let flip = crate::rng::UniformSource::next_uniform(&mut rng) < self.noise;
                        features.push(if flip { 1.0 - bit } else { bit });
                    }
                    labels.push(k as f64);
                }
                Dataset::new(Blob::from_vec(self.n, 4, features)?, Blob::from_vec(self.n, 1, labels)?)
            }
            Generator::RepeatingText => {
                let text: Vec<char> = self.text.as_deref().unwrap_or("").chars().collect();
                let vocab = self.vocabulary();
                let window = self.window.unwrap_or(2);
                let ids: Vec<f64> = text
                    .iter()
                    .map(|c| vocab.iter().position(|v| v == c).expect("in vocabulary") as f64)
                    .collect();
                let mut features = Vec::with_capacity(self.n * window);
                for i in 0..self.n {
                    for j in 0..window {
                        features.push(ids[(i + j) % ids.len()]);
                    }
                }
                let labels = (0..self.n).map(|i| ids[(i + window - 1) % ids.len()]).collect();
                Dataset::new(Blob::from_vec(self.n, window, features)?, Blob::from_vec(self.n, 1, labels)?)
            }
        }
    }
}

/// Where a job's examples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Idx { images: PathBuf, labels: PathBuf },
    Csv { path: PathBuf },
    Synthetic { spec: SyntheticSpec },
}

impl DataSource {
    /// Loads the data; relative paths are resolved against `base`.
    pub fn load(&self, base: &Path, seed: u64) -> Result<Dataset> {
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        match self {
            DataSource::Idx { images, labels } => load_idx(&resolve(images), &resolve(labels)),
            DataSource::Csv { path } => load_csv(&resolve(path)),
            DataSource::Synthetic { spec } => spec.generate(seed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_wrap_around() {
        let d = Dataset::new(
            Blob::from_rows(&[&[0.0], &[1.0], &[2.0]]),
            Blob::from_rows(&[&[0.0], &[1.0], &[2.0]]),
        )
        .unwrap();
        let b = d.batch(2, 3);
        assert_eq!(b.features.data(), &[2.0, 0.0, 1.0]);
        assert_eq!(b.labels.data(), &[2.0, 0.0, 1.0]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec::gaussians(64, 3, 2, 0.5);
        assert_eq!(spec.generate(7).unwrap(), spec.generate(7).unwrap());
        assert_ne!(spec.generate(7).unwrap(), spec.generate(8).unwrap());
    }

    #[test]
    fn repeating_text_windows() {
        let d = SyntheticSpec::repeating_text("abc", 4, 3).generate(0).unwrap();
        assert_eq!(d.features.row(0), &[0.0, 1.0, 2.0]);
        assert_eq!(d.features.row(1), &[1.0, 2.0, 0.0]);
        assert_eq!(d.labels.get(3, 0), 2.0);
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let d = SyntheticSpec::gaussians(20, 4, 3, 1.3).generate(3).unwrap();
        write_csv(&d, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), d);
    }

    #[test]
    fn ragged_csv_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        fs::write(&path, "1,2,0\n3,4,1\n5,1\n").unwrap();
        match load_csv(&path) {
            Err(Error::Format { location, .. }) => assert_eq!(location, "line 3"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn idx_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let (img, lab) = (dir.path().join("i.idx"), dir.path().join("l.idx"));
        let pixels: Vec<Vec<u8>> = (0..10u8).map(|i| vec![i * 25; 28 * 28]).collect();
        let classes: Vec<u8> = (0..10).collect();
        write_idx(&img, &lab, 28, 28, &pixels, &classes).unwrap();
        let d = load_idx(&img, &lab).unwrap();
        assert_eq!(d.features.shape(), (10, 784));
        assert_eq!(d.features.get(9, 0), 225.0 / 255.0);
        assert_eq!(d.labels.get(4, 0), 4.0);
        match load_idx(&lab, &lab) {
            Err(Error::Format { location, .. }) => assert_eq!(location, "byte 0"),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn shards_partition_rows() {
        let d = SyntheticSpec::gaussians(10, 2, 2, 0.1).generate(1).unwrap();
        let parts: Vec<Dataset> = (0..3).map(|i| d.shard(i, 3).unwrap()).collect();
        assert_eq!(parts.iter().map(Dataset::len).collect::<Vec<_>>(), vec![4, 3, 3]);
        assert_eq!(parts[1].features.row(0), d.features.row(4));
    }
}
