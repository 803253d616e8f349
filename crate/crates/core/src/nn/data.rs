//! Dataset ingestion: IDX image/label files, labeled CSV, and the synthetic
//! two-Gaussian classification task used by the comparative runs.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// In-memory labeled dataset. Features are stored flat, row-major, one
/// sample per `sample_shape`-sized block, already scaled to `[0, 1]` where
/// the source format calls for it.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub sample_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_len(&self) -> usize {
        self.sample_shape.iter().product()
    }

    /// Gathers the given samples into a `[batch, ...sample_shape]` tensor
    /// plus their labels.
    pub fn batch<T: Real>(&self, indices: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let flen = self.feature_len();
        let mut data = Vec::with_capacity(indices.len() * flen);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend(self.features[i * flen..(i + 1) * flen].iter().map(|&v| T::from_f64(v)));
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.sample_shape);
        (Tensor::new(shape, data).expect("batch shape is consistent"), labels)
    }
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

struct BeReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> BeReader<'a> {
    fn u32(&mut self) -> Result<u32> {
        if self.offset + 4 > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: "truncated while reading a 32-bit field".into(),
            });
        }
        let v = u32::from_be_bytes(self.bytes[self.offset..self.offset + 4].try_into().unwrap());
        self.offset += 4;
        Ok(v)
    }

    fn bytes(&mut self, count: usize) -> Result<&'a [u8]> {
        if self.offset + count > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset as u64,
                message: format!("expected {count} payload bytes"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + count];
        self.offset += count;
        Ok(out)
    }
}

/// Reads an IDX image file (big-endian magic 0x00000803, three dimensions,
/// u8 pixels). Returns `(pixels, count, rows, cols)`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, usize, usize, usize)> {
    let raw = fs::read(path)?;
    let mut r = BeReader { bytes: &raw, offset: 0 };
    let magic = r.u32()?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"),
        });
    }
    let count = r.u32()? as usize;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    let pixels = r.bytes(count * rows * cols)?.to_vec();
    Ok((pixels, count, rows, cols))
}

/// Reads an IDX label file (big-endian magic 0x00000801, u8 labels).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    let mut r = BeReader { bytes: &raw, offset: 0 };
    let magic = r.u32()?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"),
        });
    }
    let count = r.u32()? as usize;
    Ok(r.bytes(count)?.to_vec())
}

/// Loads an IDX image/label pair into a dataset with pixels scaled by 1/255
/// and per-sample shape `[rows, cols, 1]`.
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset> {
    let (pixels, count, rows, cols) = load_idx_images(images)?;
    let raw_labels = load_idx_labels(labels)?;
    if raw_labels.len() != count {
        return Err(Error::Format {
            offset: 8,
            message: format!("{count} images but {} labels", raw_labels.len()),
        });
    }
    let num_classes = raw_labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset {
        features: pixels.iter().map(|&p| p as f64 / 255.0).collect(),
        sample_shape: vec![rows, cols, 1],
        labels: raw_labels.iter().map(|&l| l as usize).collect(),
        num_classes,
    })
}

/// Loads `label,feature,...` CSV rows. Features are min-max scaled to
/// `[0, 1]` over the whole file (a constant file scales to zeros).
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let label: usize = fields
            .next()
            .unwrap()
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad label", lineno + 1)))?;
        let row: Vec<f64> = fields
            .map(|f| {
                f.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("line {}: bad feature", lineno + 1)))
            })
            .collect::<Result<_>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse(format!(
                    "line {}: {} features, expected {w}",
                    lineno + 1,
                    row.len()
                )))
            }
            _ => {}
        }
        labels.push(label);
        features.extend(row);
    }
    let dim = width.unwrap_or(0);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &features {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        let span = hi - lo;
        for v in features.iter_mut() {
            *v = (*v - lo) / span;
        }
    } else {
        features.iter_mut().for_each(|v| *v = 0.0);
    }
    let num_classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        features,
        sample_shape: vec![dim],
        labels,
        num_classes,
    })
}

/// Balanced two-class Gaussian blobs in `dim` dimensions whose means sit
/// `separation` apart along a fixed unit direction, with unit isotropic
/// noise. `scale` multiplies every feature afterwards: it leaves the
/// classification geometry unchanged but stresses quantizers whose input
/// range cannot adapt.
pub fn synthetic_two_gaussians(
    count: usize,
    dim: usize,
    separation: f64,
    scale: f64,
    seed: u64,
) -> Dataset {
    let mut rng = SplitMix64::new(seed);
    let direction: Vec<f64> = {
        // fixed, slightly uneven direction so no single feature dominates
        let raw: Vec<f64> = (0..dim).map(|i| 1.0 + 0.3 * ((i % 3) as f64)).collect();
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        raw.iter().map(|v| v / norm).collect()
    };
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let class = i % 2;
        let sign = if class == 0 { -0.5 } else { 0.5 };
        for d in direction.iter().take(dim) {
            features.push(scale * (sign * separation * d + rng.next_gaussian()));
        }
        labels.push(class);
    }
    Dataset {
        features,
        sample_shape: vec![dim],
        labels,
        num_classes: 2,
    }
}

/// Four Gaussian blobs at `(+-separation/2, +-separation/2)` in the first
/// two dimensions, labeled by the XOR of the signs (not linearly separable),
/// with unit noise. Remaining dimensions are pure distractor noise of
/// standard deviation `distractor_scale`; `scale` multiplies every feature,
/// stressing quantizers that cannot adapt their input range.
pub fn synthetic_xor_blobs(
    count: usize,
    dim: usize,
    separation: f64,
    distractor_scale: f64,
    scale: f64,
    seed: u64,
) -> Dataset {
    assert!(dim >= 2, "xor task needs at least two dimensions");
    let mut rng = SplitMix64::new(seed);
    let mut features = Vec::with_capacity(count * dim);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let corner = i % 4;
        let s0 = if corner & 1 == 0 { -0.5 } else { 0.5 };
        let s1 = if corner & 2 == 0 { -0.5 } else { 0.5 };
        features.push(scale * (s0 * separation + rng.next_gaussian()));
        features.push(scale * (s1 * separation + rng.next_gaussian()));
        for _ in 2..dim {
            features.push(scale * distractor_scale * rng.next_gaussian());
        }
        labels.push(((s0 > 0.0) != (s1 > 0.0)) as usize);
    }
    Dataset {
        features,
        sample_shape: vec![dim],
        labels,
        num_classes: 2,
    }
}

/// Serializes a dataset back to IDX bytes (test fixtures and round-trips).
pub fn write_idx_images(path: &Path, pixels: &[u8], count: usize, rows: usize, cols: usize) -> Result<()> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    out.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    out.extend_from_slice(&(count as u32).to_be_bytes());
    out.extend_from_slice(&(rows as u32).to_be_bytes());
    out.extend_from_slice(&(cols as u32).to_be_bytes());
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("n2uq-data-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn idx_fixture_round_trips() {
        let dir = tmpdir();
        let images = dir.join("imgs.idx");
        let labels = dir.join("lbls.idx");
        let pixels: Vec<u8> = (0..4 * 28 * 28).map(|i| (i % 251) as u8).collect();
        write_idx_images(&images, &pixels, 4, 28, 28).unwrap();
        write_idx_labels(&labels, &[0, 1, 2, 1]).unwrap();
        let ds = load_idx(&images, &labels).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.sample_shape, vec![28, 28, 1]);
        assert_eq!(ds.num_classes, 3);
        assert!((ds.features[1] - pixels[1] as f64 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn idx_label_count_mismatch_is_a_format_error() {
        let dir = tmpdir();
        let images = dir.join("imgs2.idx");
        let labels = dir.join("lbls2.idx");
        write_idx_images(&images, &[0u8; 2 * 4], 2, 2, 2).unwrap();
        write_idx_labels(&labels, &[0, 1, 0]).unwrap();
        assert!(matches!(load_idx(&images, &labels), Err(Error::Format { .. })));
    }

    #[test]
    fn idx_bad_magic_reports_offset() {
        let dir = tmpdir();
        let path = dir.join("bad.idx");
        fs::write(&path, [0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 0]).unwrap();
        match load_idx_images(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn csv_parses_and_scales() {
        let dir = tmpdir();
        let path = dir.join("data.csv");
        fs::write(&path, "0, 0.0, 10.0\n1, 5.0, 0.0\n").unwrap();
        let ds = load_csv(&path).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.sample_shape, vec![2]);
        assert_eq!(ds.num_classes, 2);
        assert!(ds.features.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(ds.features[1], 1.0);
    }

    #[test]
    fn empty_csv_gives_empty_dataset() {
        let dir = tmpdir();
        let path = dir.join("empty.csv");
        fs::write(&path, "").unwrap();
        let ds = load_csv(&path).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn ragged_csv_is_a_parse_error() {
        let dir = tmpdir();
        let path = dir.join("ragged.csv");
        fs::write(&path, "0,1.0,2.0\n1,3.0\n").unwrap();
        assert!(load_csv(&path).is_err());
    }

    #[test]
    fn synthetic_task_is_balanced_and_reproducible() {
        let a = synthetic_two_gaussians(100, 8, 4.0, 1.0, 7);
        let b = synthetic_two_gaussians(100, 8, 4.0, 1.0, 7);
        assert_eq!(a, b);
        assert_eq!(a.labels.iter().filter(|&&l| l == 0).count(), 50);
        let c = synthetic_two_gaussians(100, 8, 4.0, 1.0, 8);
        assert_ne!(a.features, c.features);
    }

    #[test]
    fn batch_gathers_rows() {
        let ds = synthetic_two_gaussians(10, 3, 2.0, 1.0, 1);
        let (x, y) = ds.batch::<f64>(&[2, 5]);
        assert_eq!(x.shape(), &[2, 3]);
        assert_eq!(y, vec![ds.labels[2], ds.labels[5]]);
        assert_eq!(x.data()[0], ds.features[2 * 3]);
    }
}
