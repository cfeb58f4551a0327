//! Dataset ingestion: MNIST IDX, CIFAR-10 binary batches, and a synthetic
//! multi-scale shapes segmentation set.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use groupnet::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Augment, DataConfig, DatasetKind};
use crate::error::{read, CliError, Result};

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;
/// Four shape classes plus background.
pub const SHAPE_CLASSES: usize = 5;

/// Images `(n, c, h, w)` with per-image labels, or per-pixel labels laid out
/// `(n, h, w)` for segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub pixel_labels: bool,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_per_sample(&self) -> usize {
        if self.pixel_labels {
            self.images.shape()[2] * self.images.shape()[3]
        } else {
            1
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let per = self.labels_per_sample();
        Dataset {
            images: self.images.gather(idx),
            labels: idx.iter().flat_map(|&i| self.labels[i * per..(i + 1) * per].iter().copied()).collect(),
            pixel_labels: self.pixel_labels,
        }
    }

    /// Subtracts a `(c, h, w)` mean from every image.
    pub fn subtract_mean(&mut self, mean: &Tensor<f64>) {
        let per = mean.len();
        for img in self.images.data_mut().chunks_mut(per) {
            for (v, m) in img.iter_mut().zip(mean.data()) {
                *v -= m;
            }
        }
    }

    pub fn pixel_mean(&self) -> Tensor<f64> {
        let shape = &self.images.shape()[1..];
        let per: usize = shape.iter().product();
        let mut mean = vec![0.0; per];
        for img in self.images.data().chunks(per) {
            for (m, v) in mean.iter_mut().zip(img) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        Tensor::from_vec(shape, mean).expect("mean shape")
    }
}

fn be_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| CliError::Data(format!("truncated IDX header: {what} expected at offset {offset}, file has {} bytes", bytes.len())))
}

/// Dimension sizes and payload of an IDX file with the given magic.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let got = be_u32(bytes, 0, "magic")?;
    if got != magic {
        return Err(CliError::Data(format!(
            "bad IDX magic at offset 0: expected 0x{magic:08x}, found 0x{got:08x}"
        )));
    }
    let ndims = (magic & 0xff) as usize;
    let dims = (0..ndims)
        .map(|i| be_u32(bytes, 4 + 4 * i, "dimension size").map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * ndims;
    let need: usize = dims.iter().product();
    let have = bytes.len() - start;
    if have < need {
        return Err(CliError::Data(format!(
            "truncated IDX payload: {need} bytes expected from offset {start}, found {have} (ends at offset {})",
            bytes.len()
        )));
    }
    Ok((dims, &bytes[start..start + need]))
}

/// `(n, 1, rows, cols)` images scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Tensor<f64>> {
    let (dims, data) = parse_idx(bytes, IDX_IMAGES)?;
    Ok(Tensor::from_vec(
        &[dims[0], 1, dims[1], dims[2]],
        data.iter().map(|&b| b as f64 / 255.0).collect(),
    )?)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let (_, data) = parse_idx(bytes, IDX_LABELS)?;
    Ok(data.iter().map(|&b| b as usize).collect())
}

/// Raw bytes of `name` or `name.gz` in `dir`.
fn read_maybe_gz(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let plain = dir.join(name);
    if plain.exists() {
        return read(&plain);
    }
    let gz = dir.join(format!("{name}.gz"));
    if !gz.exists() {
        return Err(CliError::Data(format!("{} not found (also tried .gz)", plain.display())));
    }
    let mut out = Vec::new();
    GzDecoder::new(read(&gz)?.as_slice())
        .read_to_end(&mut out)
        .map_err(|e| CliError::Data(format!("{}: {e}", gz.display())))?;
    Ok(out)
}

pub fn load_mnist(dir: &Path, train: bool) -> Result<Dataset> {
    let prefix = if train { "train" } else { "t10k" };
    let images = parse_idx_images(&read_maybe_gz(dir, &format!("{prefix}-images-idx3-ubyte"))?)?;
    let labels = parse_idx_labels(&read_maybe_gz(dir, &format!("{prefix}-labels-idx1-ubyte"))?)?;
    if labels.len() != images.shape()[0] {
        return Err(CliError::Data(format!(
            "{} images but {} labels",
            images.shape()[0],
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(CliError::Data(format!("label {bad} outside 0..10")));
    }
    Ok(Dataset {
        images,
        labels,
        pixel_labels: false,
    })
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary records: one label byte then 3072 channel-major pixels.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        let n = bytes.len() / CIFAR_RECORD;
        return Err(CliError::Data(format!(
            "truncated CIFAR record {n} at offset {}: {} of {CIFAR_RECORD} bytes present",
            n * CIFAR_RECORD,
            bytes.len() % CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(CliError::Data(format!(
                "label {} at offset {} outside 0..10",
                rec[0],
                i * CIFAR_RECORD
            )));
        }
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok(Dataset {
        images: Tensor::from_vec(&[n, 3, 32, 32], pixels)?,
        labels,
        pixel_labels: false,
    })
}

pub fn load_cifar(dir: &Path, train: bool) -> Result<Dataset> {
    let names: Vec<String> = if train {
        (1..=5).map(|i| format!("data_batch_{i}.bin")).collect()
    } else {
        vec!["test_batch.bin".into()]
    };
    let mut bytes = Vec::new();
    for n in names {
        let p = dir.join(&n);
        if !p.exists() {
            return Err(CliError::Data(format!("{} not found", p.display())));
        }
        bytes.extend(read(&p)?);
    }
    parse_cifar(&bytes)
}

/// Random disks, squares and horizontal/vertical bars at three size scales
/// on a noisy background. Pixel labels: 0 background, 1..=4 shape kind.
pub fn synthetic_shapes(n: usize, size: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut images = vec![0.0; n * plane];
    let mut labels = vec![0usize; n * plane];
    let unit = size as f64 / 24.0;
    for s in 0..n {
        let img = &mut images[s * plane..(s + 1) * plane];
        let lab = &mut labels[s * plane..(s + 1) * plane];
        let count = rng.random_range(2..=4);
        for _ in 0..count {
            let class = rng.random_range(1..=4usize);
            let r = [1.5, 3.0, 5.5][rng.random_range(0..3)] * unit;
            let cy = rng.random_range(0.0..size as f64);
            let cx = rng.random_range(0.0..size as f64);
            let (hy, hx) = match class {
                3 => (r * 0.4, r * 1.6),
                4 => (r * 1.6, r * 0.4),
                _ => (r, r),
            };
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let inside = match class {
                        1 => dy * dy + dx * dx <= r * r,
                        _ => dy.abs() <= hy.max(0.5) && dx.abs() <= hx.max(0.5),
                    };
                    if inside {
                        img[y * size + x] = 1.0;
                        lab[y * size + x] = class;
                    }
                }
            }
        }
        for v in img.iter_mut() {
            *v = (*v + 0.15 * (rng.random::<f64>() - 0.5)).clamp(0.0, 1.0);
        }
    }
    Dataset {
        images: Tensor::from_vec(&[n, 1, size, size], images).expect("shape"),
        labels,
        pixel_labels: true,
    }
}

/// Train, validation and test sets with the train-set per-pixel mean removed.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub mean: Tensor<f64>,
}

pub fn load_split(cfg: &DataConfig, train: bool, seed: u64) -> Result<Dataset> {
    match cfg.kind {
        DatasetKind::MnistIdx => load_mnist(&cfg.path, train),
        DatasetKind::Cifar10Binary => load_cifar(&cfg.path, train),
        DatasetKind::SyntheticShapes => {
            let s = cfg.synthetic;
            // Test images come from a stream disjoint from the training stream.
            let (count, stream) = if train { (s.train, seed) } else { (s.test, seed ^ 0x7e57) };
            Ok(synthetic_shapes(count, s.size, stream))
        }
    }
}

pub fn load_splits(cfg: &DataConfig, seed: u64) -> Result<Splits> {
    let full = load_split(cfg, true, seed)?;
    let mut test = load_split(cfg, false, seed)?;
    if let Some(limit) = cfg.test_limit {
        let idx: Vec<usize> = (0..limit.min(test.len())).collect();
        test = test.subset(&idx);
    }
    let mut order: Vec<usize> = (0..full.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xda7a));
    let n_val = (full.len() as f64 * cfg.val_fraction).round() as usize;
    let (val_idx, rest) = order.split_at(n_val);
    let n_train = ((rest.len() as f64 * cfg.train_fraction).round() as usize).max(1).min(rest.len());
    let mut train_idx = rest[..n_train].to_vec();
    train_idx.sort_unstable();
    let mut val_idx = val_idx.to_vec();
    val_idx.sort_unstable();
    let mut train = full.subset(&train_idx);
    let mut val = full.subset(&val_idx);
    if train.is_empty() {
        return Err(CliError::Data("training split is empty".into()));
    }
    let mean = train.pixel_mean();
    train.subtract_mean(&mean);
    val.subtract_mean(&mean);
    test.subtract_mean(&mean);
    Ok(Splits { train, val, test, mean })
}

/// Random shift by up to 2 pixels and horizontal flip, in place.
pub fn augment(images: &mut Tensor<f64>, aug: Augment, rng: &mut ChaCha8Rng) {
    if !aug.crop && !aug.flip {
        return;
    }
    let (c, h, w) = (images.shape()[1], images.shape()[2], images.shape()[3]);
    let per = c * h * w;
    for img in images.data_mut().chunks_mut(per) {
        let (dy, dx) = if aug.crop {
            (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2))
        } else {
            (0, 0)
        };
        let flip = aug.flip && rng.random::<bool>();
        let src = img.to_vec();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let sy = y as i64 + dy;
                    let sx0 = if flip { (w - 1 - x) as i64 } else { x as i64 };
                    let sx = sx0 + dx;
                    img[(ch * h + y) * w + x] = if (0..h as i64).contains(&sy) && (0..w as i64).contains(&sx) {
                        src[(ch * h + sy as usize) * w + sx as usize]
                    } else {
                        0.0
                    };
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, rows: u32, cols: u32, fill: u8) -> Vec<u8> {
        let mut b = IDX_IMAGES.to_be_bytes().to_vec();
        for d in [n, rows, cols] {
            b.extend(d.to_be_bytes());
        }
        b.extend(std::iter::repeat(fill).take((n * rows * cols) as usize));
        b
    }

    #[test]
    fn header_arithmetic() {
        let t = parse_idx_images(&idx_images(10, 28, 28, 0)).unwrap();
        assert_eq!(t.shape(), &[10, 1, 28, 28]);
    }

    #[test]
    fn wrong_magic_names_expected() {
        let mut b = idx_images(1, 2, 2, 0);
        b[..4].copy_from_slice(&0u32.to_be_bytes());
        let e = parse_idx_images(&b).unwrap_err().to_string();
        assert!(e.contains("0x00000803"), "{e}");
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let mut b = idx_images(2, 3, 3, 0);
        b.truncate(b.len() - 1);
        let e = parse_idx_images(&b).unwrap_err().to_string();
        assert!(e.contains("offset 16"), "{e}");
        assert!(matches!(parse_idx_images(&b[..6]), Err(CliError::Data(_))));
    }

    #[test]
    fn full_byte_is_one() {
        let t = parse_idx_images(&idx_images(1, 1, 2, 255)).unwrap();
        assert_eq!(t.data(), &[1.0, 1.0]);
    }

    #[test]
    fn labels_parse() {
        let mut b = IDX_LABELS.to_be_bytes().to_vec();
        b.extend(3u32.to_be_bytes());
        b.extend([7, 0, 9]);
        assert_eq!(parse_idx_labels(&b).unwrap(), vec![7, 0, 9]);
    }

    #[test]
    fn cifar_records() {
        let mut b = vec![3u8];
        b.extend(std::iter::repeat(255).take(3072));
        let d = parse_cifar(&b).unwrap();
        assert_eq!((d.images.shape(), d.labels.as_slice()), (&[1, 3, 32, 32][..], &[3][..]));
        b.pop();
        assert!(parse_cifar(&b).unwrap_err().to_string().contains("offset 0"));
    }

    #[test]
    fn shapes_are_deterministic_and_labelled() {
        let a = synthetic_shapes(4, 24, 1);
        assert_eq!(a, synthetic_shapes(4, 24, 1));
        assert_eq!(a.labels.len(), 4 * 24 * 24);
        assert!(a.labels.iter().all(|&l| l < SHAPE_CLASSES));
        assert!(a.labels.iter().any(|&l| l > 0));
    }

    #[test]
    fn mean_subtraction_centres_train() {
        let mut d = synthetic_shapes(6, 8, 2);
        let m = d.pixel_mean();
        d.subtract_mean(&m);
        assert!(d.pixel_mean().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn flip_then_flip_is_identity() {
        let d = synthetic_shapes(1, 8, 3);
        let mut x = d.images.clone();
        let aug = Augment { crop: false, flip: true };
        // Find a seed that flips, then apply it twice.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        while !rng.clone().random::<bool>() {
            rng.random::<bool>();
        }
        augment(&mut x, aug, &mut rng.clone());
        assert_ne!(x, d.images);
        augment(&mut x, aug, &mut rng);
        assert_eq!(x, d.images);
    }
}
