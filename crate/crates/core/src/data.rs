//! Labelled image batches: a seeded synthetic generator, CIFAR-10 ingestion,
//! augmentation and a small binary file format.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

const DATASET_MAGIC: &[u8; 4] = b"CNMD";
const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(
        images: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let (n, _, _, _) = images.dims4("dataset")?;
        if n != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{n} images but {} labels",
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)` of each image.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    /// Images and labels at `indices`, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let (c, h, w) = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::InvalidArgument(format!(
                    "index {i} out of range for {} items",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }

    /// The first `n` items.
    pub fn take(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let (c, h, ww) = self.image_shape();
        w.write_all(DATASET_MAGIC)?;
        w.write_u32::<LittleEndian>(DATASET_VERSION)?;
        w.write_u8(match self.split {
            Split::Train => 0,
            Split::Test => 1,
        })?;
        for v in [self.len(), c, h, ww, self.num_classes] {
            w.write_u32::<LittleEndian>(v as u32)?;
        }
        for &y in &self.labels {
            w.write_u32::<LittleEndian>(y as u32)?;
        }
        for &v in self.images.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Dataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a dataset file".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset version {version}"
            )));
        }
        let split = match r.read_u8()? {
            0 => Split::Train,
            1 => Split::Test,
            s => return Err(Error::Format(format!("bad split tag {s}"))),
        };
        let mut dims = [0usize; 5];
        for d in &mut dims {
            *d = r.read_u32::<LittleEndian>()? as usize;
        }
        let [n, c, h, w, k] = dims;
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            labels.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let len = n
            .checked_mul(c * h * w)
            .ok_or_else(|| Error::Format("dataset dimensions overflow".into()))?;
        let mut data = vec![0.0; len];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, k, split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bytes = fs::read(path)?;
        Dataset::read_from(bytes.as_slice())
    }
}

/// Parameters of [`gen_synthetic`].
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub height: usize,
    pub width: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Side of the coarse random grid each prototype channel is upsampled from.
const PROTOTYPE_GRID: usize = 4;

/// Class prototypes plus clamped Gaussian pixel noise.
///
/// Every prototype channel is a smooth random pattern with mean 0.5, so class
/// identity lives in spatial structure rather than in colour averages. Items
/// cycle through the classes. Prototypes, training noise and test noise come
/// from separate streams of `seed`.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let SyntheticSpec {
        num_classes: k,
        height: h,
        width: w,
        noise_sigma,
        ..
    } = *spec;
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 classes, got {k}"
        )));
    }
    if h == 0 || w == 0 || spec.train_per_class == 0 || spec.test_per_class == 0 {
        return Err(Error::InvalidArgument(
            "synthetic dataset sizes must be positive".into(),
        ));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sigma {noise_sigma} must be >= 0"
        )));
    }
    let mut proto_rng = stream(spec.seed, Stream::Prototypes);
    let prototypes: Vec<Vec<f64>> = (0..k).map(|_| prototype(h, w, &mut proto_rng)).collect();
    let make = |per_class: usize, purpose: Stream, split: Split| -> Result<Dataset> {
        let mut rng = stream(spec.seed, purpose);
        let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let n = per_class * k;
        let mut data = Vec::with_capacity(n * 3 * h * w);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = i % k;
            labels.push(y);
            for &p in &prototypes[y] {
                let e = if noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((p + e).clamp(0.0, 1.0));
            }
        }
        Dataset::new(Tensor::new(vec![n, 3, h, w], data)?, labels, k, split)
    };
    Ok((
        make(spec.train_per_class, Stream::TrainData, Split::Train)?,
        make(spec.test_per_class, Stream::TestData, Split::Test)?,
    ))
}

fn prototype<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    let g = PROTOTYPE_GRID;
    let mut out = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        let grid: Vec<f64> = (0..g * g).map(|_| rng.random::<f64>()).collect();
        let mut plane = Vec::with_capacity(h * w);
        for y in 0..h {
            let fy = coord(y, h, g);
            for x in 0..w {
                let fx = coord(x, w, g);
                plane.push(bilinear(&grid, g, fy, fx));
            }
        }
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        out.extend(plane.iter().map(|v| (v - mean + 0.5).clamp(0.0, 1.0)));
    }
    out
}

fn coord(i: usize, n: usize, g: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    i as f64 * (g - 1) as f64 / (n - 1) as f64
}

fn bilinear(grid: &[f64], g: usize, y: f64, x: f64) -> f64 {
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(g - 1), (x0 + 1).min(g - 1));
    let (dy, dx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| grid[r * g + c];
    (1.0 - dy) * ((1.0 - dx) * at(y0, x0) + dx * at(y0, x1))
        + dy * ((1.0 - dx) * at(y1, x0) + dx * at(y1, x1))
}

/// Zero-pads every image by `pad`, crops back to the original size at a random
/// offset and mirrors horizontally with probability 0.5.
pub fn augment_batch<R: Rng + ?Sized>(images: &mut Tensor, pad: usize, rng: &mut R) -> Result<()> {
    let (n, c, h, w) = images.dims4("augment")?;
    let per = c * h * w;
    let mut src = vec![0.0; per];
    for i in 0..n {
        let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
        let flip = rng.random_bool(0.5);
        let img = &mut images.data_mut()[i * per..(i + 1) * per];
        src.copy_from_slice(img);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let xs = if flip { w - 1 - x } else { x } as isize + dx;
                    let ys = y as isize + dy;
                    let v = if ys >= 0 && xs >= 0 && (ys as usize) < h && (xs as usize) < w {
                        src[(ch * h + ys as usize) * w + xs as usize]
                    } else {
                        0.0
                    };
                    img[(ch * h + y) * w + x] = v;
                }
            }
        }
    }
    Ok(())
}

/// Per-channel mean and standard deviation over every pixel of `images`.
pub fn channel_stats(images: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, c, h, w) = images.dims4("channel_stats")?;
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let values = || {
            (0..n).flat_map(move |i| {
                images.data()[(i * c + ch) * plane..(i * c + ch + 1) * plane].iter()
            })
        };
        mean[ch] = values().sum::<f64>() / count;
        var[ch] = values().map(|v| (v - mean[ch]).powi(2)).sum::<f64>() / count;
    }
    Ok((mean, var.into_iter().map(f64::sqrt).collect()))
}

/// `(x - mean[c]) / std[c]` in place.
pub fn normalize(images: &mut Tensor, mean: &[f64], std: &[f64]) -> Result<()> {
    let (n, c, h, w) = images.dims4("normalize")?;
    if mean.len() != c || std.len() != c || std.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(
            "normalisation needs a positive std per channel".into(),
        ));
    }
    let plane = h * w;
    for (k, v) in images.data_mut().iter_mut().enumerate() {
        let ch = (k / plane) % c;
        *v = (*v - mean[ch]) / std[ch];
    }
    let _ = n;
    Ok(())
}

/// The public CIFAR-10 binary layout: one label byte then 32x32 red, green and
/// blue planes, row-major.
pub mod cifar {
    use super::*;

    pub const SIDE: usize = 32;
    pub const PIXELS: usize = 3 * SIDE * SIDE;
    pub const RECORD: usize = 1 + PIXELS;
    pub const CLASSES: usize = 10;
    pub const TRAIN_FILES: [&str; 5] = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
    ];
    pub const TEST_FILE: &str = "test_batch.bin";

    #[derive(Clone, Debug, PartialEq, Eq)]
    pub struct Record {
        pub label: u8,
        pub pixels: Vec<u8>,
    }

    pub fn parse(bytes: &[u8]) -> Result<Vec<Record>> {
        if !bytes.len().is_multiple_of(RECORD) {
            return Err(Error::Format(format!(
                "{} bytes is not a whole number of {RECORD}-byte records",
                bytes.len()
            )));
        }
        bytes
            .chunks(RECORD)
            .enumerate()
            .map(|(i, rec)| {
                if rec[0] as usize >= CLASSES {
                    return Err(Error::Format(format!(
                        "record {i} has label byte {}",
                        rec[0]
                    )));
                }
                Ok(Record {
                    label: rec[0],
                    pixels: rec[1..].to_vec(),
                })
            })
            .collect()
    }

    pub fn serialize(records: &[Record]) -> Vec<u8> {
        let mut out = Vec::with_capacity(records.len() * RECORD);
        for r in records {
            out.push(r.label);
            out.extend_from_slice(&r.pixels);
        }
        out
    }

    /// Pixels scaled to [0, 1], unnormalised.
    pub fn to_dataset(records: &[Record], split: Split) -> Result<Dataset> {
        let n = records.len();
        let mut data = Vec::with_capacity(n * PIXELS);
        for r in records {
            data.extend(r.pixels.iter().map(|&p| p as f64 / 255.0));
        }
        let labels = records.iter().map(|r| r.label as usize).collect();
        Dataset::new(
            Tensor::new(vec![n, 3, SIDE, SIDE], data)?,
            labels,
            CLASSES,
            split,
        )
    }

    fn read_files(dir: &Path, names: &[&str]) -> Result<Vec<Record>> {
        let mut all = Vec::new();
        for name in names {
            all.extend(parse(&fs::read(dir.join(name))?)?);
        }
        Ok(all)
    }

    /// Loads a split from the standard file names in `dir`, normalised with
    /// the channel statistics of the training files.
    pub fn load_cifar10_binary(dir: &Path, split: Split) -> Result<Dataset> {
        let train = to_dataset(&read_files(dir, &TRAIN_FILES)?, Split::Train)?;
        let (mean, std) = channel_stats(&train.images)?;
        let mut ds = match split {
            Split::Train => train,
            Split::Test => to_dataset(&read_files(dir, &[TEST_FILE])?, Split::Test)?,
        };
        normalize(&mut ds.images, &mean, &std)?;
        Ok(ds)
    }
}

pub use cifar::load_cifar10_binary;
