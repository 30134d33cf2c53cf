//! Task-free streams: Split-style class sequences over IDX datasets and
//! synthetic Gaussian mode sequences, delivered in fixed-size batches.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EmmError, Result};
use crate::memory::Sample;
use crate::nn::Matrix;

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled feature rows with values in `[0, 1]` for image sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(EmmError::shape(format!(
                "{} feature rows with {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(EmmError::input(format!(
                "label {bad} outside {class_count} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            class_count,
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

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        }
    }

    /// Keeps only samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        let keep: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        self.subset(&keep)
    }

    /// 2×2 average pooling of square images; a 28×28 image becomes 14×14.
    pub fn downsample_2x2(&self) -> Result<Dataset> {
        let d = self.dim();
        let side = (d as f64).sqrt().round() as usize;
        if side * side != d || side % 2 != 0 {
            return Err(EmmError::input(format!(
                "cannot pool {d} features as an even square image"
            )));
        }
        let half = side / 2;
        let mut data = Vec::with_capacity(self.len() * half * half);
        for row in self.features.iter_rows() {
            for r in 0..half {
                for c in 0..half {
                    let at = |dr: usize, dc: usize| row[(2 * r + dr) * side + 2 * c + dc];
                    data.push(0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1)));
                }
            }
        }
        Dataset::new(
            Matrix::from_vec(self.len(), half * half, data)?,
            self.labels.clone(),
            self.class_count,
        )
    }

    /// Mean and population standard deviation over every feature value.
    pub fn moments(&self) -> (f64, f64) {
        let v = self.features.data();
        let n = v.len().max(1) as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    /// Maps every feature value x to (x − mean) / std.
    pub fn standardize(&self, mean: f64, std: f64) -> Result<Dataset> {
        if !(std > 0.0 && std.is_finite() && mean.is_finite()) {
            return Err(EmmError::input(format!("cannot standardize with mean {mean}, std {std}")));
        }
        Dataset::new(
            self.features.map(|x| (x - mean) / std),
            self.labels.clone(),
            self.class_count,
        )
    }
}

fn format_err(path: &str, offset: u64, message: impl Into<String>) -> EmmError {
    EmmError::Format {
        path: path.to_string(),
        offset,
        message: message.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, path: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, bytes.len() as u64, "truncated header"))
}

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &str) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IMAGES_MAGIC {
        return Err(format_err(path, 0, format!("bad image magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let need = 16 + n * rows * cols;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated pixel data: expected {need} bytes"),
        ));
    }
    Ok((n, rows, cols, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &str) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != LABELS_MAGIC {
        return Err(format_err(path, 0, format!("bad label magic {magic:#010x}")));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    if bytes.len() < 8 + n {
        return Err(format_err(
            path,
            bytes.len() as u64,
            format!("truncated label data: expected {} bytes", 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| EmmError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads an IDX image/label file pair, scaling pixels by 1/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let ipath = images_path.display().to_string();
    let lpath = labels_path.display().to_string();
    let (n, rows, cols, pixels) = parse_idx_images(&read_file(images_path)?, &ipath)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, &lpath)?;
    if labels.len() != n {
        return Err(format_err(
            &lpath,
            4,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let features = Matrix::from_vec(
        n,
        rows * cols,
        pixels.iter().map(|&p| f64::from(p) / 255.0).collect(),
    )?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(features, labels, class_count)
}

/// Where one contiguous stretch of the stream draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    Classes(Vec<usize>),
    Gaussian { mean: Vec<f64>, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub source: SegmentSource,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub segments: Vec<Segment>,
    pub batch_size: usize,
    pub shuffle_within_segment: bool,
    pub seed: u64,
}

/// Single-consumer batch iterator. Each sample is handed out once; the
/// stream keeps no way to revisit earlier batches.
#[derive(Debug, Clone)]
pub struct DataStream {
    spec: StreamSpec,
    pending: std::vec::IntoIter<(Vec<f64>, usize)>,
    remaining: usize,
    step: usize,
}

impl DataStream {
    fn new(spec: StreamSpec, ordered: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        if spec.batch_size == 0 {
            return Err(EmmError::Config("batch size must be at least 1".into()));
        }
        Ok(Self {
            spec,
            remaining: ordered.len(),
            pending: ordered.into_iter(),
            step: 0,
        })
    }

    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }

    pub fn remaining(&self) -> usize {
        self.remaining
    }

    /// Stops the stream after at most `n` more samples.
    pub fn truncate(&mut self, n: usize) {
        self.remaining = self.remaining.min(n);
    }

    /// Up to `b` samples, or `None` once the stream is exhausted.
    pub fn next_batch(&mut self) -> Option<Vec<Sample>> {
        if self.remaining == 0 {
            return None;
        }
        let take = self.spec.batch_size.min(self.remaining);
        self.remaining -= take;
        self.step += 1;
        let step = self.step;
        Some(
            self.pending
                .by_ref()
                .take(take)
                .map(|(x, y)| Sample::new(x, Some(y), step))
                .collect(),
        )
    }
}

impl Iterator for DataStream {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_batch()
    }
}

/// Consecutive class groups `{0,1}, {2,3}, …` of `classes_per_task` classes,
/// each segment holding every sample of its classes. Groups with no samples
/// are skipped.
pub fn build_split_stream(
    dataset: &Dataset,
    classes_per_task: usize,
    batch_size: usize,
    shuffle_within_segment: bool,
    seed: u64,
) -> Result<DataStream> {
    if classes_per_task == 0 || dataset.class_count % classes_per_task != 0 {
        return Err(EmmError::Config(format!(
            "{} classes cannot be split into groups of {classes_per_task}",
            dataset.class_count
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = Vec::new();
    let mut ordered = Vec::with_capacity(dataset.len());
    for first in (0..dataset.class_count).step_by(classes_per_task) {
        let classes: Vec<usize> = (first..first + classes_per_task).collect();
        let mut idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| classes.contains(&dataset.labels[i]))
            .collect();
        if idx.is_empty() {
            continue;
        }
        if shuffle_within_segment {
            idx.shuffle(&mut rng);
        }
        segments.push(Segment {
            source: SegmentSource::Classes(classes),
            count: idx.len(),
        });
        ordered.extend(
            idx.into_iter()
                .map(|i| (dataset.features.row(i).to_vec(), dataset.labels[i])),
        );
    }
    DataStream::new(
        StreamSpec {
            segments,
            batch_size,
            shuffle_within_segment,
            seed,
        },
        ordered,
    )
}

/// Isotropic Gaussian modes visited one after another.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianModes {
    pub means: Vec<Vec<f64>>,
    pub scale: f64,
}

impl GaussianModes {
    /// `k` modes in `dim` dimensions, mode `i` centered at `separation · e_{i mod dim}`
    /// shifted along the next axis for wrap-around, so any two means are at
    /// least `separation` apart.
    pub fn separated(k: usize, dim: usize, separation: f64, scale: f64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(EmmError::Config("need at least one mode and one dimension".into()));
        }
        if k > dim {
            return Err(EmmError::Config(format!("{k} modes need dim ≥ {k}, got {dim}")));
        }
        let means = (0..k)
            .map(|i| {
                let mut m = vec![0.0; dim];
                m[i] = separation;
                m
            })
            .collect();
        Ok(Self { means, scale })
    }

    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    fn validate(&self) -> Result<()> {
        if self.means.is_empty() {
            return Err(EmmError::Config("k_modes must be at least 1".into()));
        }
        let d = self.dim();
        if self.means.iter().any(|m| m.len() != d) || d == 0 {
            return Err(EmmError::Config("mode means must share one positive dimension".into()));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(EmmError::Config("mode scale must be positive".into()));
        }
        Ok(())
    }

    fn draw<R: Rng + ?Sized>(&self, mode: usize, rng: &mut R) -> Vec<f64> {
        self.means[mode]
            .iter()
            .map(|&mu| mu + self.scale * rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// `per_mode` fresh draws from every mode, labelled by mode index.
    pub fn dataset(&self, per_mode: usize, seed: u64) -> Result<Dataset> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.means.len();
        let mut data = Vec::with_capacity(k * per_mode * self.dim());
        let mut labels = Vec::with_capacity(k * per_mode);
        for mode in 0..k {
            for _ in 0..per_mode {
                data.extend(self.draw(mode, &mut rng));
                labels.push(mode);
            }
        }
        Dataset::new(Matrix::from_vec(k * per_mode, self.dim(), data)?, labels, k)
    }
}

/// Segment `i` holds `per_mode` draws from mode `i`, labelled `i`.
pub fn synthetic_gaussian_stream(
    modes: &GaussianModes,
    per_mode: usize,
    batch_size: usize,
    seed: u64,
) -> Result<DataStream> {
    modes.validate()?;
    if per_mode == 0 {
        return Err(EmmError::Config("per_mode must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ordered = Vec::with_capacity(per_mode * modes.means.len());
    let mut segments = Vec::new();
    for (mode, mean) in modes.means.iter().enumerate() {
        for _ in 0..per_mode {
            ordered.push((modes.draw(mode, &mut rng), mode));
        }
        segments.push(Segment {
            source: SegmentSource::Gaussian {
                mean: mean.clone(),
                scale: modes.scale,
            },
            count: per_mode,
        });
    }
    DataStream::new(
        StreamSpec {
            segments,
            batch_size,
            shuffle_within_segment: false,
            seed,
        },
        ordered,
    )
}
