//! Image classification datasets: CIFAR-10 binary batches, MNIST IDX files
//! and a seeded synthetic Gaussian mixture.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, TernError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];
pub const MNIST_MEAN: f64 = 0.1307;
pub const MNIST_STD: f64 = 0.3081;
pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labelled images stored sample-major as `N×C×H×W`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    images: Vec<T>,
    shape: [usize; 3],
    labels: Vec<usize>,
    classes: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Dataset<T>,
    pub test: Dataset<T>,
}

/// Training-time augmentation: random crop from a zero-padded image and a
/// random horizontal flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Augment {
    pub pad: usize,
    pub flip: bool,
}

impl Augment {
    pub const CIFAR: Augment = Augment { pad: 4, flip: true };

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && !self.flip
    }
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        images: Vec<T>,
        shape: [usize; 3],
        labels: Vec<usize>,
        classes: usize,
    ) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(TernError::Shape {
                shape: shape.to_vec(),
                reason: format!("{} values for {} labels", images.len(), labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TernError::Config(format!(
                "label {bad} outside {classes} classes"
            )));
        }
        Ok(Dataset {
            images,
            shape,
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

    pub fn sample_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[T] {
        let per = self.shape.iter().product::<usize>();
        &self.images[i * per..(i + 1) * per]
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len());
        let per = self.shape.iter().product::<usize>();
        Dataset {
            images: self.images[..n * per].to_vec(),
            shape: self.shape,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    /// Stacks the given samples into a batch, augmenting when `augment` is set.
    pub fn batch<R: Rng + ?Sized>(
        &self,
        indices: &[usize],
        augment: Option<(Augment, &mut R)>,
    ) -> (Tensor<T>, Vec<usize>) {
        let [c, h, w] = self.shape;
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        match augment {
            Some((aug, rng)) if !aug.is_identity() => {
                for &i in indices {
                    let img = self.image(i);
                    let (dy, dx) = (
                        rng.gen_range(0..=2 * aug.pad),
                        rng.gen_range(0..=2 * aug.pad),
                    );
                    let flip = aug.flip && rng.gen_bool(0.5);
                    for ch in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                let sx = if flip { w - 1 - x } else { x };
                                let (py, px) = (y + dy, sx + dx);
                                let inside = py >= aug.pad
                                    && py < h + aug.pad
                                    && px >= aug.pad
                                    && px < w + aug.pad;
                                data.push(if inside {
                                    img[(ch * h + py - aug.pad) * w + px - aug.pad]
                                } else {
                                    T::zero()
                                });
                            }
                        }
                    }
                }
            }
            _ => indices
                .iter()
                .for_each(|&i| data.extend_from_slice(self.image(i))),
        }
        (
            Tensor::from_parts(vec![indices.len(), c, h, w], data),
            labels,
        )
    }
}

/// Parameters of the synthetic task. Each class has a smooth random
/// prototype image; a sample is its class prototype, randomly shifted by up
/// to `shift` pixels, plus isotropic Gaussian noise of std `noise`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub channels: usize,
    pub size: usize,
    pub train: usize,
    pub test: usize,
    pub noise: f64,
    pub shift: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            seed: 7,
            classes: 10,
            channels: 1,
            size: 12,
            train: 8000,
            test: 5000,
            noise: 1.4,
            shift: 1,
        }
    }
}

fn box_blur(src: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let (mut s, mut k) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..(y + 2).min(n) {
                for xx in x.saturating_sub(1)..(x + 2).min(n) {
                    s += src[yy * n + xx];
                    k += 1.0;
                }
            }
            out[y * n + x] = s / k;
        }
    }
    out
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
        .sqrt()
        .max(1e-12);
    v.iter_mut().for_each(|x| *x = (*x - mean) / std);
}

pub fn synthetic<T: Scalar>(spec: &SyntheticSpec) -> Result<Splits<T>> {
    if spec.classes < 2 || spec.channels == 0 || spec.size == 0 || spec.train == 0 || spec.test == 0
    {
        return Err(TernError::Config(format!(
            "invalid synthetic dataset {spec:?}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(TernError::Config(format!(
            "synthetic noise must be finite and ≥ 0, got {}",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (c, s) = (spec.channels, spec.size);
    let big = s + 2 * spec.shift;
    let protos: Vec<Vec<Vec<f64>>> = (0..spec.classes)
        .map(|_| {
            (0..c)
                .map(|_| {
                    let raw: Vec<f64> =
                        (0..big * big).map(|_| rng.sample(StandardNormal)).collect();
                    let mut p = box_blur(&box_blur(&raw, big), big);
                    standardize(&mut p);
                    p
                })
                .collect()
        })
        .collect();
    let mut make = |count: usize| -> Result<Dataset<T>> {
        let mut images = Vec::with_capacity(count * c * s * s);
        let mut labels = Vec::with_capacity(count);
        for i in 0..count {
            let k = i % spec.classes;
            let (dy, dx) = (
                rng.gen_range(0..=2 * spec.shift),
                rng.gen_range(0..=2 * spec.shift),
            );
            for plane in &protos[k] {
                for y in 0..s {
                    for x in 0..s {
                        let e: f64 = rng.sample(StandardNormal);
                        images.push(T::of(plane[(y + dy) * big + x + dx] + spec.noise * e));
                    }
                }
            }
            labels.push(k);
        }
        Dataset::new(images, [c, s, s], labels, spec.classes)
    };
    let train = make(spec.train)?;
    let test = make(spec.test)?;
    Ok(Splits { train, test })
}

/// Splits CIFAR-10 binary records into labels and raw pixels.
pub fn parse_cifar10(bytes: &[u8]) -> Result<(Vec<u8>, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(TernError::Parse {
            offset: bytes.len() - bytes.len() % CIFAR_RECORD,
            reason: format!(
                "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                bytes.len()
            ),
        });
    }
    let mut labels = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    let mut pixels = Vec::with_capacity(bytes.len());
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(TernError::Parse {
                offset: i * CIFAR_RECORD,
                reason: format!("label {} outside 0..=9", rec[0]),
            });
        }
        labels.push(rec[0]);
        pixels.extend_from_slice(&rec[1..]);
    }
    Ok((labels, pixels))
}

/// Validates an IDX header against `magic` and returns the dimensions and
/// the payload.
pub fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let be = |off: usize| -> Result<u32> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
            .ok_or(TernError::Truncated {
                offset: off,
                needed: 4,
                available: bytes.len().saturating_sub(off),
            })
    };
    let found = be(0)?;
    if found != magic {
        return Err(TernError::Parse {
            offset: 0,
            reason: format!("IDX magic {found:#010x}, expected {magic:#010x}"),
        });
    }
    let rank = (magic & 0xff) as usize;
    let dims = (0..rank)
        .map(|i| be(4 + 4 * i).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * rank;
    let expected = dims.iter().product::<usize>();
    let body = &bytes[header..];
    if body.len() != expected {
        return Err(TernError::Parse {
            offset: header,
            reason: format!(
                "header claims {expected} bytes of data, file has {}",
                body.len()
            ),
        });
    }
    Ok((dims, body))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| TernError::io(path, e))
}

fn normalize<T: Scalar>(
    pixels: &[u8],
    channels: usize,
    plane: usize,
    mean: &[f64],
    std: &[f64],
) -> Vec<T> {
    pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let ch = (i / plane) % channels;
            T::of((p as f64 / 255.0 - mean[ch]) / std[ch])
        })
        .collect()
}

/// Reads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10<T: Scalar>(dir: &Path) -> Result<Splits<T>> {
    let load = |files: Vec<PathBuf>| -> Result<Dataset<T>> {
        let (mut labels, mut pixels) = (Vec::new(), Vec::new());
        for f in files {
            let (l, p) = parse_cifar10(&read(&f)?)?;
            labels.extend(l.into_iter().map(usize::from));
            pixels.extend(p);
        }
        Dataset::new(
            normalize(&pixels, 3, 1024, &CIFAR_MEAN, &CIFAR_STD),
            [3, 32, 32],
            labels,
            10,
        )
    };
    Ok(Splits {
        train: load(
            (1..=5)
                .map(|i| dir.join(format!("data_batch_{i}.bin")))
                .collect(),
        )?,
        test: load(vec![dir.join("test_batch.bin")])?,
    })
}

/// Reads the four standard MNIST IDX files from `dir`.
pub fn load_mnist<T: Scalar>(dir: &Path) -> Result<Splits<T>> {
    let load = |prefix: &str| -> Result<Dataset<T>> {
        let img_bytes = read(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
        let lab_bytes = read(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
        let (idims, pixels) = parse_idx(&img_bytes, IDX_IMAGES_MAGIC)?;
        let (ldims, labels) = parse_idx(&lab_bytes, IDX_LABELS_MAGIC)?;
        if idims[0] != ldims[0] {
            return Err(TernError::Parse {
                offset: 4,
                reason: format!("{} images but {} labels", idims[0], ldims[0]),
            });
        }
        if let Some(i) = labels.iter().position(|&l| l > 9) {
            return Err(TernError::Parse {
                offset: 8 + i,
                reason: format!("label {} outside 0..=9", labels[i]),
            });
        }
        let (h, w) = (idims[1], idims[2]);
        Dataset::new(
            normalize(pixels, 1, h * w, &[MNIST_MEAN], &[MNIST_STD]),
            [1, h, w],
            labels.iter().map(|&l| l as usize).collect(),
            10,
        )
    };
    Ok(Splits {
        train: load("train")?,
        test: load("t10k")?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    Cifar10(PathBuf),
    Mnist(PathBuf),
    Synthetic(SyntheticSpec),
}

impl DatasetSource {
    /// Augmentation used for the training split by default.
    pub fn default_augment(&self) -> Augment {
        match self {
            DatasetSource::Cifar10(_) => Augment::CIFAR,
            _ => Augment::default(),
        }
    }
}

pub fn load_dataset<T: Scalar>(source: &DatasetSource) -> Result<Splits<T>> {
    match source {
        DatasetSource::Cifar10(dir) => load_cifar10(dir),
        DatasetSource::Mnist(dir) => load_mnist(dir),
        DatasetSource::Synthetic(spec) => synthetic(spec),
    }
}
