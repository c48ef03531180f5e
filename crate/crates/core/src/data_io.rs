//! Dataset loading (IDX, CIFAR binary), 32→64 upsampling and deterministic
//! mini-batch iteration.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_PIXELS: usize = 32 * 32 * 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// Images `[N, H, W, C]` with pixels in `[0, 1]` and one label per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::format(format!(
                "{} images of shape {:?} for {} labels",
                images.shape().first().copied().unwrap_or(0),
                images.shape(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::format(format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(H, W, C)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Rows `start..start + len`.
    pub fn subset(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.len() {
            return Err(Error::usage(format!("subset {start}..{} of a {}-image dataset", start + len, self.len())));
        }
        let per = self.images.len() / self.len().max(1);
        let mut shape = self.images.shape().to_vec();
        shape[0] = len;
        let images = Tensor::new(&shape, self.images.data()[start * per..(start + len) * per].to_vec())?;
        Self::new(images, self.labels[start..start + len].to_vec(), self.num_classes, self.split)
    }

    /// The first `limit` rows, or everything when `limit` is 0 or too large.
    pub fn truncated(self, limit: usize) -> Result<Self> {
        if limit == 0 || limit >= self.len() {
            Ok(self)
        } else {
            self.subset(0, limit)
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

fn idx_header(bytes: &[u8], path: &Path, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + 4 * dims;
    if bytes.len() < header {
        return Err(Error::format(format!("{}: {} bytes is too short for an IDX header", path.display(), bytes.len())));
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(Error::format(format!(
            "{}: bad IDX magic {:02x} {:02x} {:02x} {:02x}, expected {magic:08x}",
            path.display(),
            bytes[0],
            bytes[1],
            bytes[2],
            bytes[3]
        )));
    }
    let extents: Vec<usize> = (0..dims).map(|i| be_u32(bytes, 4 + 4 * i) as usize).collect();
    let expected = header + extents.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "{}: header {extents:?} implies {expected} bytes, file has {}",
            path.display(),
            bytes.len()
        )));
    }
    Ok(extents)
}

/// Reads an IDX image file (`u8`, `[N, rows, cols]`) and its label file.
pub fn load_idx(images_path: &Path, labels_path: &Path, num_classes: usize, split: Split) -> Result<Dataset> {
    let ib = read_file(images_path)?;
    let lb = read_file(labels_path)?;
    let dims = idx_header(&ib, images_path, IDX_IMAGES_MAGIC, 3)?;
    let ldims = idx_header(&lb, labels_path, IDX_LABELS_MAGIC, 1)?;
    if dims[0] != ldims[0] {
        return Err(Error::format(format!(
            "{} holds {} images but {} holds {} labels",
            images_path.display(),
            dims[0],
            labels_path.display(),
            ldims[0]
        )));
    }
    let pixels = ib[16..].iter().map(|&b| b as f32 / 255.0).collect();
    let images = Tensor::new(&[dims[0], dims[1], dims[2], 1], pixels)?;
    let labels = lb[8..].iter().map(|&b| b as usize).collect();
    Dataset::new(images, labels, num_classes, split)
}

/// Reads CIFAR-style binary record files: a label byte (two for CIFAR-100:
/// coarse then fine) followed by 3072 channel-planar R, G, B bytes.
pub fn load_cifar_binary(paths: &[PathBuf], cifar100: bool, coarse: bool, split: Split) -> Result<Dataset> {
    let label_bytes = if cifar100 { 2 } else { 1 };
    let record = label_bytes + CIFAR_PIXELS;
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = read_file(path)?;
        if bytes.is_empty() || bytes.len() % record != 0 {
            return Err(Error::format(format!(
                "{}: {} bytes is not a multiple of the {record}-byte record",
                path.display(),
                bytes.len()
            )));
        }
        for rec in bytes.chunks_exact(record) {
            labels.push(rec[if cifar100 && !coarse { 1 } else { 0 }] as usize);
            let planes = &rec[label_bytes..];
            for p in 0..32 * 32 {
                for c in 0..3 {
                    pixels.push(planes[c * 1024 + p] as f32 / 255.0);
                }
            }
        }
    }
    let n = labels.len();
    let classes = match (cifar100, coarse) {
        (false, _) => 10,
        (true, true) => 20,
        (true, false) => 100,
    };
    Dataset::new(Tensor::new(&[n, 32, 32, 3], pixels)?, labels, classes, split)
}

/// Interpolation used by [`resize_2x`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resample {
    Bilinear,
    Nearest,
}

impl FromStr for Resample {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "nearest" => Ok(Self::Nearest),
            _ => Err(Error::config(format!("unknown resample mode `{s}` (bilinear|nearest)"))),
        }
    }
}

impl fmt::Display for Resample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bilinear => "bilinear",
            Self::Nearest => "nearest",
        })
    }
}

/// Source taps and weights for output index `o` of a 2× upsampling of `n`
/// samples. Pixel centres are aligned (half-pixel convention, no corner
/// alignment): output `o` samples input coordinate `(o + 0.5)/2 − 0.5`,
/// clamped to the border.
fn taps(o: usize, n: usize) -> (usize, usize, f32) {
    let x = ((o as f32 + 0.5) / 2.0 - 0.5).max(0.0);
    let lo = (x.floor() as usize).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    (lo, hi, x - lo as f32)
}

/// Upsamples `[N, 32, 32, C]` to `[N, 64, 64, C]`.
pub fn resize_bilinear_2x(images: &Tensor<f32>) -> Result<Tensor<f32>> {
    resize_2x(images, Resample::Bilinear)
}

pub fn resize_2x(images: &Tensor<f32>, mode: Resample) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[1] != 32 || s[2] != 32 {
        return Err(Error::usage(format!("resize_2x expects [N, 32, 32, C], got {s:?}")));
    }
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (2 * h, 2 * w);
    let src = images.data();
    let mut out = Vec::with_capacity(n * oh * ow * c);
    for img in 0..n {
        let base = img * h * w * c;
        let at = |y: usize, x: usize, ch: usize| src[base + (y * w + x) * c + ch];
        for oy in 0..oh {
            let (y0, y1, fy) = taps(oy, h);
            for ox in 0..ow {
                let (x0, x1, fx) = taps(ox, w);
                for ch in 0..c {
                    let v = match mode {
                        Resample::Nearest => at(oy / 2, ox / 2, ch),
                        Resample::Bilinear => {
                            let top = at(y0, x0, ch) * (1.0 - fx) + at(y0, x1, ch) * fx;
                            let bottom = at(y1, x0, ch) * (1.0 - fx) + at(y1, x1, ch) * fx;
                            top * (1.0 - fy) + bottom * fy
                        }
                    };
                    out.push(v);
                }
            }
        }
    }
    Tensor::new(&[n, oh, ow, c], out)
}

/// Supported datasets and their on-disk layout under a data directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Fmnist,
    Cifar10,
    Cifar100,
    /// CIFAR-100 with the 20 coarse superclass labels.
    Cifar100Coarse,
    Svhn,
}

impl FromStr for DatasetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fmnist" | "fashion-mnist" => Ok(Self::Fmnist),
            "cifar10" => Ok(Self::Cifar10),
            "cifar100" => Ok(Self::Cifar100),
            "cifar100-coarse" => Ok(Self::Cifar100Coarse),
            "svhn" => Ok(Self::Svhn),
            _ => Err(Error::config(format!("unknown dataset `{s}` (fmnist|cifar10|cifar100|cifar100-coarse|svhn)"))),
        }
    }
}

impl fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Fmnist => "fmnist",
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
            Self::Cifar100Coarse => "cifar100-coarse",
            Self::Svhn => "svhn",
        })
    }
}

impl DatasetKind {
    pub fn num_classes(self) -> usize {
        match self {
            Self::Fmnist | Self::Cifar10 | Self::Svhn => 10,
            Self::Cifar100 => 100,
            Self::Cifar100Coarse => 20,
        }
    }

    /// `(H, W, C)` as stored, before any resize.
    pub fn native_shape(self) -> (usize, usize, usize) {
        match self {
            Self::Fmnist => (28, 28, 1),
            _ => (32, 32, 3),
        }
    }

    /// Default sub-directory of the data root.
    pub fn dir_name(self) -> &'static str {
        match self {
            Self::Fmnist => "fashion-mnist",
            Self::Cifar10 => "cifar-10-batches-bin",
            Self::Cifar100 | Self::Cifar100Coarse => "cifar-100-binary",
            Self::Svhn => "svhn-bin",
        }
    }

    /// Files read for `split`.
    pub fn files(self, dir: &Path, split: Split) -> Vec<PathBuf> {
        let names: Vec<String> = match (self, split) {
            (Self::Fmnist, Split::Train) => vec!["train-images-idx3-ubyte".into(), "train-labels-idx1-ubyte".into()],
            (Self::Fmnist, Split::Test) => vec!["t10k-images-idx3-ubyte".into(), "t10k-labels-idx1-ubyte".into()],
            (Self::Cifar10, Split::Train) => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            (Self::Cifar10, Split::Test) => vec!["test_batch.bin".into()],
            (Self::Cifar100 | Self::Cifar100Coarse | Self::Svhn, Split::Train) => vec!["train.bin".into()],
            (Self::Cifar100 | Self::Cifar100Coarse | Self::Svhn, Split::Test) => vec!["test.bin".into()],
        };
        names.into_iter().map(|n| dir.join(n)).collect()
    }

    /// Loads `split` from `dir`; 32×32 colour sets are upsampled to 64×64
    /// unless `resample` is `None`.
    pub fn load(self, dir: &Path, split: Split, resample: Option<Resample>) -> Result<Dataset> {
        let files = self.files(dir, split);
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("dataset file {} not found", missing.display()),
            )));
        }
        let ds = match self {
            Self::Fmnist => return load_idx(&files[0], &files[1], 10, split),
            Self::Cifar10 | Self::Svhn => load_cifar_binary(&files, false, false, split)?,
            Self::Cifar100 => load_cifar_binary(&files, true, false, split)?,
            Self::Cifar100Coarse => load_cifar_binary(&files, true, true, split)?,
        };
        match resample {
            None => Ok(ds),
            Some(mode) => Dataset::new(resize_2x(&ds.images, mode)?, ds.labels, ds.num_classes, split),
        }
    }
}

/// One mini-batch.
#[derive(Debug, Clone)]
pub struct Batch<F: Real> {
    pub images: Tensor<F>,
    pub labels: Vec<usize>,
    /// `[B, classes]`, exactly one 1 per row.
    pub one_hot: Tensor<F>,
}

pub fn one_hot<F: Real>(labels: &[usize], num_classes: usize) -> Tensor<F> {
    let mut t = Tensor::zeros(&[labels.len(), num_classes]);
    for (row, &l) in labels.iter().enumerate() {
        t.data_mut()[row * num_classes + l] = F::one();
    }
    t
}

/// Index order of one epoch: a ChaCha8 shuffle seeded by `seed`, or
/// ascending order.
pub fn epoch_order(n: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// Iterator over mini-batches of `ds`; the final partial batch is kept.
pub struct Batches<'a, F: Real> {
    ds: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
    _marker: std::marker::PhantomData<F>,
}

pub fn batches<F: Real>(ds: &Dataset, batch_size: usize, seed: u64, shuffle: bool) -> Result<Batches<'_, F>> {
    if batch_size == 0 {
        return Err(Error::usage("batch size must be ≥ 1"));
    }
    Ok(Batches { ds, order: epoch_order(ds.len(), seed, shuffle), batch_size, pos: 0, _marker: Default::default() })
}

impl<F: Real> Iterator for Batches<'_, F> {
    type Item = Batch<F>;

    fn next(&mut self) -> Option<Batch<F>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let idx = &self.order[self.pos..(self.pos + self.batch_size).min(self.order.len())];
        self.pos += idx.len();
        let (h, w, c) = self.ds.image_shape();
        let per = h * w * c;
        let src = self.ds.images.data();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            data.extend(src[i * per..(i + 1) * per].iter().map(|&p| F::from_f64(p as f64)));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| self.ds.labels[i]).collect();
        Some(Batch {
            images: Tensor::new(&[idx.len(), h, w, c], data).expect("sizes agree"),
            one_hot: one_hot(&labels, self.ds.num_classes),
            labels,
        })
    }
}
