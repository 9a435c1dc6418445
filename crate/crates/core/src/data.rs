//! Deterministic desk-scale datasets and IDX ingestion.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Labelled samples stacked along axis 0 of `inputs`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub split: Split,
    pub seed: u64,
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        name: impl Into<String>,
        split: Split,
        seed: u64,
        inputs: Tensor<T>,
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "dataset",
                lhs: inputs.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        Ok(Self {
            name: name.into(),
            split,
            seed,
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Per-sample input shape.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    /// Inputs and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.inputs.gather_outer(indices)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Ok(Self {
            inputs: self.inputs.slice_outer(0, n)?,
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitDataset<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
}

/// Shuffles with `seed` and puts the first 80% into train.
fn split_80_20<T: Scalar>(
    name: &str,
    seed: u64,
    points: Vec<Vec<T>>,
    labels: Vec<usize>,
    classes: usize,
) -> Result<SplitDataset<T>> {
    let n = labels.len();
    let dim = points[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_SALT));
    let n_train = (n * 4).div_ceil(5).min(n.saturating_sub(1)).max(1);
    let build = |idx: &[usize], split| {
        let data: Vec<T> = idx
            .iter()
            .flat_map(|&i| points[i].iter().copied())
            .collect();
        let lab = idx.iter().map(|&i| labels[i]).collect();
        Dataset::new(
            name,
            split,
            seed,
            Tensor::new(vec![idx.len(), dim], data)?,
            lab,
            classes,
        )
    };
    Ok(SplitDataset {
        train: build(&order[..n_train], Split::Train)?,
        val: build(&order[n_train..], Split::Val)?,
    })
}

const SPLIT_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Interleaved spirals: class `j` winds from the origin to radius 1.
///
/// Angles carry Gaussian jitter of `noise_sigma` radians and radii a
/// Gaussian jitter truncated at `3 * noise_sigma`, so every point lies
/// within radius `1 + 3 * noise_sigma`.
pub fn make_spiral<T: Scalar>(
    n_per_class: usize,
    classes: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<SplitDataset<T>> {
    if n_per_class == 0 || classes < 2 {
        return Err(Error::invalid(
            "spiral needs n_per_class >= 1 and classes >= 2",
        ));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::invalid("spiral noise must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    let denom = (n_per_class.max(2) - 1) as f64;
    for class in 0..classes {
        let offset = class as f64 * std::f64::consts::TAU / classes as f64;
        for i in 0..n_per_class {
            let r = i as f64 / denom;
            let angle_noise: f64 = rng.sample(StandardNormal);
            let radial_noise: f64 = rng.sample(StandardNormal);
            let theta = offset + 4.0 * r + noise_sigma * angle_noise;
            let radius =
                r + (noise_sigma * radial_noise).clamp(-3.0 * noise_sigma, 3.0 * noise_sigma);
            points.push(vec![
                T::of(radius * theta.sin()),
                T::of(radius * theta.cos()),
            ]);
            labels.push(class);
        }
    }
    split_80_20("spiral", seed, points, labels, classes)
}

/// Unit-variance Gaussian clusters around centres at least `separation` apart.
pub fn make_blobs<T: Scalar>(
    n_per_class: usize,
    classes: usize,
    dim: usize,
    separation: f64,
    seed: u64,
) -> Result<SplitDataset<T>> {
    if n_per_class == 0 || classes < 2 || dim == 0 {
        return Err(Error::invalid(
            "blobs need n_per_class >= 1, classes >= 2, dim >= 1",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half_width = separation.max(1.0) * classes as f64 / 2.0;
    let mut centres: Vec<Vec<f64>> = Vec::with_capacity(classes);
    let mut attempts = 0;
    while centres.len() < classes {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::invalid(format!(
                "could not place {classes} centres {separation} apart in 1000 attempts"
            )));
        }
        let c: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-half_width..=half_width))
            .collect();
        if centres.iter().all(|o| euclid(o, &c) >= separation) {
            centres.push(c);
        }
    }
    let mut points = Vec::with_capacity(n_per_class * classes);
    let mut labels = Vec::with_capacity(n_per_class * classes);
    for (class, centre) in centres.iter().enumerate() {
        for _ in 0..n_per_class {
            let p = centre
                .iter()
                .map(|&m| {
                    let z: f64 = rng.sample(StandardNormal);
                    T::of(m + z)
                })
                .collect();
            points.push(p);
            labels.push(class);
        }
    }
    split_80_20("blobs", seed, points, labels, classes)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format {
            offset: offset as u64,
            msg: format!("truncated header ({} bytes available)", bytes.len()),
        })
}

fn parse_idx(bytes: &[u8], expected_magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let magic = read_u32_be(bytes, 0)?;
    if magic != expected_magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad IDX magic {magic:#010x}, expected {expected_magic:#010x}"),
        });
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|d| read_u32_be(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndim;
    let need: usize = dims.iter().product();
    if bytes.len() < start + need {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: format!("truncated payload: expected {need} bytes from offset {start}"),
        });
    }
    Ok((dims, &bytes[start..start + need]))
}

/// Parses an IDX image file into `[n, 1, rows, cols]`, pixels scaled to `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (dims, payload) = parse_idx(bytes, IDX_IMAGES_MAGIC)?;
    let data = payload.iter().map(|&p| T::of(p as f64 / 255.0)).collect();
    Tensor::new(vec![dims[0], 1, dims[1], dims[2]], data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, payload) = parse_idx(bytes, IDX_LABELS_MAGIC)?;
    Ok(payload.iter().map(|&l| l as usize).collect())
}

/// Reads an IDX image/label file pair as one dataset split.
pub fn read_idx<T: Scalar>(images: &Path, labels: &Path, split: Split) -> Result<Dataset<T>> {
    let x = parse_idx_images(&fs::read(images)?)?;
    let y = parse_idx_labels(&fs::read(labels)?)?;
    let classes = y.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new("idx", split, 0, x, y, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_counts_balance_and_split() {
        let d = make_spiral::<f64>(100, 3, 0.1, 42).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 300);
        assert_eq!(d.train.len(), 240);
        let mut counts = [0; 3];
        for &l in d.train.labels.iter().chain(&d.val.labels) {
            counts[l] += 1;
        }
        assert_eq!(counts, [100, 100, 100]);
        assert_eq!(d.train.sample_shape(), &[2]);
    }

    #[test]
    fn spiral_is_deterministic() {
        let a = make_spiral::<f64>(50, 3, 0.0, 7).unwrap();
        let b = make_spiral::<f64>(50, 3, 0.0, 7).unwrap();
        assert_eq!(a, b);
        let c = make_spiral::<f64>(50, 3, 0.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn spiral_radius_bound() {
        let sigma = 0.2;
        let d = make_spiral::<f64>(500, 2, sigma, 3).unwrap();
        for set in [&d.train, &d.val] {
            for p in set.inputs.data().chunks(2) {
                let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
                assert!(r <= 1.0 + 3.0 * sigma + 1e-12, "radius {r}");
            }
        }
    }

    #[test]
    fn blobs_shape_balance_and_separation() {
        let d = make_blobs::<f64>(20, 4, 3, 4.0, 11).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 80);
        assert_eq!(d.train.sample_shape(), &[3]);
        assert_eq!(d, make_blobs::<f64>(20, 4, 3, 4.0, 11).unwrap());
        // Distance-matrix oracle over per-class empirical means would be noisy;
        // recompute centres from the generator's rng stream instead.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hw = 4.0f64 * 4.0 / 2.0;
        let mut centres: Vec<Vec<f64>> = Vec::new();
        while centres.len() < 4 {
            let c: Vec<f64> = (0..3).map(|_| rng.random_range(-hw..=hw)).collect();
            if centres.iter().all(|o| euclid(o, &c) >= 4.0) {
                centres.push(c);
            }
        }
        for i in 0..4 {
            for j in 0..i {
                assert!(euclid(&centres[i], &centres[j]) >= 4.0);
            }
        }
        assert!(make_blobs::<f64>(5, 50, 1, 100.0, 0).is_err());
    }

    fn idx_fixture() -> (Vec<u8>, Vec<u8>) {
        let mut images = vec![0, 0, 8, 3];
        for d in [2u32, 2, 2] {
            images.extend_from_slice(&d.to_be_bytes());
        }
        images.extend_from_slice(&[0, 51, 102, 255, 255, 0, 0, 0]);
        let mut labels = vec![0, 0, 8, 1];
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[1, 0]);
        (images, labels)
    }

    #[test]
    fn idx_fixture_parses() {
        let (images, labels) = idx_fixture();
        let x = parse_idx_images::<f64>(&images).unwrap();
        assert_eq!(x.shape(), &[2, 1, 2, 2]);
        assert_eq!(x.data()[3], 1.0);
        assert_eq!(x.data()[1], 0.2);
        assert_eq!(parse_idx_labels(&labels).unwrap(), vec![1, 0]);

        let dir = tempfile::tempdir().unwrap();
        let (pi, pl) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        fs::write(&pi, &images).unwrap();
        fs::write(&pl, &labels).unwrap();
        let ds = read_idx::<f64>(&pi, &pl, Split::Train).unwrap();
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn idx_truncation_and_magic_errors() {
        let (images, _) = idx_fixture();
        let cut = &images[..images.len() - 3];
        match parse_idx_images::<f64>(cut) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, cut.len() as u64),
            other => panic!("expected format error, got {other:?}"),
        }
        match parse_idx_images::<f64>(&images[..6]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
        let mut bad = images.clone();
        bad[3] = 2;
        assert!(matches!(
            parse_idx_images::<f64>(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
