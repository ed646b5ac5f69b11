//! Datasets from Gaussian blobs or IDX image files, plus augmentation and batching.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

fn unit_box() -> [f64; 2] {
    [0.0, 1.0]
}

/// Labelled samples stored as flat `[N, D]` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Tensor,
    sample_shape: Vec<usize>,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
    input_box: [f64; 2],
}

impl Dataset {
    pub fn new(
        inputs: Tensor,
        sample_shape: Vec<usize>,
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
        input_box: [f64; 2],
    ) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(Error::Config("dataset is empty".into()));
        }
        let d: usize = sample_shape.iter().product();
        if inputs.shape() != [n, d] {
            return Err(Error::Config(format!(
                "inputs {:?} do not match {n} samples of shape {sample_shape:?}",
                inputs.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Config(format!("label {bad} outside [0, {num_classes})")));
        }
        let [lo, hi] = input_box;
        if !(lo < hi) {
            return Err(Error::Config(format!("input box [{lo}, {hi}] is empty")));
        }
        if inputs.data().iter().any(|&v| !(lo..=hi).contains(&v)) {
            return Err(Error::Config("inputs fall outside the input box".into()));
        }
        Ok(Self { inputs, sample_shape, labels, num_classes, split, input_box })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.sample_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    pub fn input_box(&self) -> [f64; 2] {
        self.input_box
    }

    /// Inputs and labels of the given sample indices, in that order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        (self.inputs.select_rows(indices), indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (inputs, labels) = self.gather(&idx);
        Dataset { inputs, labels, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    /// One center per class.
    pub centers: Vec<Vec<f64>>,
    pub std: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    #[serde(default = "unit_box")]
    pub input_box: [f64; 2],
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.centers.len();
        if m < 2 {
            return Err(Error::Config("blobs need at least 2 centers".into()));
        }
        let d = self.centers[0].len();
        if d == 0 || self.centers.iter().any(|c| c.len() != d) {
            return Err(Error::Config("blob centers must share a positive dimension".into()));
        }
        for j in 0..m {
            for k in j + 1..m {
                if self.centers[j] == self.centers[k] {
                    return Err(Error::Config(format!("blob centers {j} and {k} coincide")));
                }
            }
        }
        if !(self.std.is_finite() && self.std > 0.0) {
            return Err(Error::Config(format!("blob std {} must be positive", self.std)));
        }
        if self.samples_per_class == 0 {
            return Err(Error::Config("samples_per_class must be positive".into()));
        }
        if !(self.input_box[0] < self.input_box[1]) {
            return Err(Error::Config("input box is empty".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }
}

/// Gaussian samples around each center, clipped to the box. The two splits
/// draw from separate streams of the same seed.
pub fn gen_blobs(spec: &BlobSpec, split: Split) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match split {
        Split::Train => 0,
        Split::Test => 1,
    });
    let d = spec.dimension();
    let m = spec.centers.len();
    let [lo, hi] = spec.input_box;
    let mut data = Vec::with_capacity(m * spec.samples_per_class * d);
    let mut labels = Vec::with_capacity(m * spec.samples_per_class);
    for (j, c) in spec.centers.iter().enumerate() {
        for _ in 0..spec.samples_per_class {
            for &ci in c {
                let z: f64 = rng.sample(StandardNormal);
                data.push((ci + spec.std * z).clamp(lo, hi));
            }
            labels.push(j);
        }
    }
    let inputs = Tensor::new(vec![labels.len(), d], data)?;
    Dataset::new(inputs, vec![d], labels, m, split, spec.input_box)
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format(format!("truncated IDX header ({what})")))
}

/// `(dims, payload)` of an IDX file with the given magic.
fn parse_idx(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = be_u32(bytes, 0, what)?;
    if found != magic {
        return Err(Error::Format(format!("{what}: magic {found:#010x}, expected {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let dims: Vec<usize> =
        (0..ndim).map(|i| be_u32(bytes, 4 + 4 * i, what).map(|v| v as usize)).collect::<Result<_>>()?;
    let start = 4 + 4 * ndim;
    let n: usize = dims.iter().product();
    let payload = &bytes[start..];
    if payload.len() != n {
        return Err(Error::Format(format!("{what}: payload has {} bytes, header declares {n}", payload.len())));
    }
    Ok((dims, payload.to_vec()))
}

/// Parses an IDX image/label pair. Pixels are divided by 255; the class count
/// is `num_classes` or, when absent, the largest label plus one.
pub fn parse_idx_pair(images: &[u8], labels: &[u8], split: Split, num_classes: Option<usize>) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, raw_labels) = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Format(format!("{} images but {} labels", idims[0], ldims[0])));
    }
    if idims.contains(&0) {
        return Err(Error::Format("IDX file has a zero dimension".into()));
    }
    let labels: Vec<usize> = raw_labels.iter().map(|&b| b as usize).collect();
    let m = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&x| x + 1).max(2));
    let sample_shape = vec![1, idims[1], idims[2]];
    let inputs = Tensor::new(vec![idims[0], idims[1] * idims[2]], pixels.iter().map(|&p| p as f64 / 255.0).collect())?;
    Dataset::new(inputs, sample_shape, labels, m, split, unit_box())
}

pub fn load_idx(images: &Path, labels: &Path, split: Split, num_classes: Option<usize>) -> Result<Dataset> {
    parse_idx_pair(&std::fs::read(images)?, &std::fs::read(labels)?, split, num_classes)
}

/// `(images, labels)` IDX encodings of a dataset whose values are all multiples of 1/255 in [0, 1].
pub fn encode_idx(ds: &Dataset) -> Result<(Vec<u8>, Vec<u8>)> {
    let (h, w) = match ds.sample_shape() {
        [1, h, w] | [h, w] => (*h, *w),
        other => return Err(Error::Config(format!("cannot write samples of shape {other:?} as IDX images"))),
    };
    let mut images = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [ds.len(), h, w] {
        images.extend((d as u32).to_be_bytes());
    }
    for &v in ds.inputs().data() {
        let b = (v * 255.0).round();
        if !(0.0..=255.0).contains(&b) || b / 255.0 != v {
            return Err(Error::Config(format!("pixel {v} is not a multiple of 1/255 in [0, 1]")));
        }
        images.push(b as u8);
    }
    let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    labels.extend((ds.len() as u32).to_be_bytes());
    for &y in ds.labels() {
        labels.push(u8::try_from(y).map_err(|_| Error::Config(format!("label {y} does not fit in a byte")))?);
    }
    Ok((images, labels))
}

pub fn write_idx(ds: &Dataset, images: &Path, labels: &Path) -> Result<()> {
    let (i, l) = encode_idx(ds)?;
    std::fs::write(images, i)?;
    std::fs::write(labels, l)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub pad: usize,
    pub flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self { pad: 4, flip: true }
    }
}

/// Mirror a `[C, H, W]` image left-to-right.
pub fn hflip(img: &[f64], shape: [usize; 3]) -> Vec<f64> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let row = (ch * h + y) * w;
            for x in 0..w {
                out[row + x] = img[row + w - 1 - x];
            }
        }
    }
    out
}

/// Zero-pad a `[C, H, W]` image by `pad` and crop an `H×W` window at offset `(dy, dx)`
/// (each in `0..=2·pad`). The fill value is clamped into `input_box`.
pub fn pad_crop(img: &[f64], shape: [usize; 3], pad: usize, dy: usize, dx: usize, input_box: [f64; 2]) -> Vec<f64> {
    let [c, h, w] = shape;
    let fill = 0f64.clamp(input_box[0], input_box[1]);
    let mut out = vec![fill; img.len()];
    for ch in 0..c {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(ch * h + y) * w + x] = img[(ch * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Random pad-and-crop plus a coin-flip horizontal mirror for every image row of `batch`.
pub fn augment(batch: &Tensor, ds: &Dataset, cfg: AugmentConfig, rng: &mut impl Rng) -> Result<Tensor> {
    let shape: [usize; 3] = match ds.sample_shape() {
        &[c, h, w] => [c, h, w],
        other => return Err(Error::Config(format!("augmentation needs [C, H, W] samples, got {other:?}"))),
    };
    let mut out = batch.clone();
    for r in 0..batch.rows() {
        let dy = rng.random_range(0..=2 * cfg.pad);
        let dx = rng.random_range(0..=2 * cfg.pad);
        let mut img = pad_crop(batch.row(r), shape, cfg.pad, dy, dx, ds.input_box());
        if cfg.flip && rng.random::<f64>() < 0.5 {
            img = hflip(&img, shape);
        }
        out.row_mut(r).copy_from_slice(&img);
    }
    Ok(out)
}

/// A random permutation of `0..n` cut into batches of `b`; the last batch may be short.
pub fn batches(n: usize, b: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    assert!(b >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(b).map(<[usize]>::to_vec).collect()
}
