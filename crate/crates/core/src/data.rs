//! Datasets: a procedurally drawn 10-class shape/hue corpus standing in for
//! a photographic benchmark, plus the "DSET" container format.
//!
//! Pixels are stored quantized to `u8` and dequantized by `/255`, so every
//! value a model ever sees is exactly representable in the file and
//! round-trips bit-exactly.
//!
//! The ten classes are the product of five shapes (disc, ring, square,
//! cross, triangle) and two palettes (warm, cool). Each image jitters the
//! shape's position and size, draws it in a jittered foreground color over a
//! jittered background, then adds pixel noise — enough variation that raw
//! pixel templates are a weak classifier while a trained model is not.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use std::path::Path;

pub const IMG_CHANNELS: usize = 3;
pub const IMG_SIDE: usize = 32;
pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Split::Train),
            1 => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split tag {other}"))),
        }
    }
    fn domain(self) -> &'static str {
        match self {
            Split::Train => "synthetic-train",
            Split::Test => "synthetic-test",
        }
    }
}

/// One split of labelled images, pixels quantized to u8.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub split: Split,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u16>,
    /// Generator seed or source-file descriptor.
    pub provenance: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data("dataset has no images".into()));
        }
        if self.pixels.len() != self.len() * self.pixels_per_image() {
            return Err(Error::Data(format!(
                "pixel buffer holds {} values, expected {}",
                self.pixels.len(),
                self.len() * self.pixels_per_image()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| usize::from(y) >= self.num_classes) {
            return Err(Error::Data(format!(
                "label {bad} out of range 0..{}",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// One image as a [C,H,W] tensor in [0,1].
    pub fn image(&self, i: usize) -> Result<Tensor<f32>> {
        if i >= self.len() {
            return Err(Error::Data(format!("image index {i} out of range (n={})", self.len())));
        }
        let per = self.pixels_per_image();
        let data = self.pixels[i * per..(i + 1) * per]
            .iter()
            .map(|&b| f32::from(b) / 255.0)
            .collect();
        Tensor::from_vec(&[self.channels, self.height, self.width], data)
    }

    pub fn label(&self, i: usize) -> usize {
        usize::from(self.labels[i])
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| usize::from(l)).collect()
    }

    /// All images stacked into a [N,C,H,W] tensor in [0,1].
    pub fn batch_all(&self) -> Result<Tensor<f32>> {
        self.batch(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Tensor<f32>> {
        let per = self.pixels_per_image();
        let mut data = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            if i >= self.len() {
                return Err(Error::Data(format!("image index {i} out of range (n={})", self.len())));
            }
            data.extend(self.pixels[i * per..(i + 1) * per].iter().map(|&b| f32::from(b) / 255.0));
        }
        Tensor::from_vec(&[idx.len(), self.channels, self.height, self.width], data)
    }

    /// Replace every image with its per-block pixel shuffle under `key`.
    pub fn encrypt(&self, key: &crate::keys::PermutationKey, block: usize) -> Result<Dataset> {
        let per = self.pixels_per_image();
        let mut out = self.clone();
        // Permuting u8 pixels directly keeps quantization exact.
        for i in 0..self.len() {
            let img = Tensor::from_vec(
                &[self.channels, self.height, self.width],
                self.pixels[i * per..(i + 1) * per].iter().map(|&b| f32::from(b)).collect(),
            )?;
            let enc = crate::keys::encrypt_image(&img, key, block)?;
            for (dst, &v) in out.pixels[i * per..(i + 1) * per].iter_mut().zip(enc.data()) {
                *dst = v as u8;
            }
        }
        out.provenance = format!("{} (encrypted: {})", self.provenance, key.key_id());
        Ok(out)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.pixels.len() + self.labels.len() * 2 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.split.tag());
        out.extend_from_slice(&(self.num_classes as u16).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for v in [self.channels, self.height, self.width] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.provenance.len() as u16).to_le_bytes());
        out.extend_from_slice(self.provenance.as_bytes());
        out.extend_from_slice(&self.pixels);
        for l in &self.labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let need = |at: usize, n: usize| -> Result<&[u8]> {
            bytes
                .get(at..at + n)
                .ok_or_else(|| Error::Format("truncated dataset file".into()))
        };
        if need(0, 4)? != MAGIC {
            return Err(Error::Format("not a DSET dataset file".into()));
        }
        let version = u16::from_le_bytes(need(4, 2)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported DSET version {version}")));
        }
        let split = Split::from_tag(need(6, 1)?[0])?;
        let num_classes = u16::from_le_bytes(need(7, 2)?.try_into().unwrap()) as usize;
        let n = u32::from_le_bytes(need(9, 4)?.try_into().unwrap()) as usize;
        let channels = u32::from_le_bytes(need(13, 4)?.try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(need(17, 4)?.try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(need(21, 4)?.try_into().unwrap()) as usize;
        let prov_len = u16::from_le_bytes(need(25, 2)?.try_into().unwrap()) as usize;
        let provenance = std::str::from_utf8(need(27, prov_len)?)
            .map_err(|_| Error::Format("non-utf8 provenance".into()))?
            .to_string();
        let mut at = 27 + prov_len;
        let pixel_count = n * channels * height * width;
        let pixels = need(at, pixel_count)?.to_vec();
        at += pixel_count;
        let labels: Vec<u16> = need(at, n * 2)?
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes(b.try_into().unwrap()))
            .collect();
        at += n * 2;
        if at != bytes.len() {
            return Err(Error::Format("trailing bytes in dataset file".into()));
        }
        let ds = Dataset { split, channels, height, width, num_classes, pixels, labels, provenance };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::report::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const MAGIC: &[u8; 4] = b"DSET";
const VERSION: u16 = 1;

/// Both splits of the synthetic corpus, deterministic per seed.
pub fn gen_synthetic_dataset(seed: u64, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::Data("n_train and n_test must be >= 1".into()));
    }
    Ok((gen_split(seed, n_train, Split::Train), gen_split(seed, n_test, Split::Test)))
}

fn gen_split(seed: u64, n: usize, split: Split) -> Dataset {
    let per = IMG_CHANNELS * IMG_SIDE * IMG_SIDE;
    let mut pixels = vec![0u8; n * per];
    let mut labels = vec![0u16; n];
    for i in 0..n {
        let class = i % NUM_CLASSES;
        labels[i] = class as u16;
        let mut r = rng::stream(rng::derive(seed, split.domain(), i as u64));
        draw_image(&mut pixels[i * per..(i + 1) * per], class, &mut r);
    }
    Dataset {
        split,
        channels: IMG_CHANNELS,
        height: IMG_SIDE,
        width: IMG_SIDE,
        num_classes: NUM_CLASSES,
        pixels,
        labels,
        provenance: format!("synthetic(seed={seed}, split={:?}, n={n})", split),
    }
}

/// Class layout: shape = class / 2 in {disc, ring, square, cross, triangle},
/// palette = class % 2 in {warm, cool}.
fn draw_image(out: &mut [u8], class: usize, r: &mut rand_chacha::ChaCha8Rng) {
    let shape = class / 2;
    let warm = class % 2 == 0;
    let side = IMG_SIDE as f64;

    let bg_gray: f64 = r.random_range(0.15..0.55);
    let bg: [f64; 3] = [
        (bg_gray + r.random_range(-0.04..0.04)).clamp(0.0, 1.0),
        (bg_gray + r.random_range(-0.04..0.04)).clamp(0.0, 1.0),
        (bg_gray + r.random_range(-0.04..0.04)).clamp(0.0, 1.0),
    ];
    let fg: [f64; 3] = if warm {
        [r.random_range(0.65..0.95), r.random_range(0.25..0.55), r.random_range(0.05..0.30)]
    } else {
        [r.random_range(0.05..0.30), r.random_range(0.25..0.55), r.random_range(0.65..0.95)]
    };

    let cx: f64 = side / 2.0 + r.random_range(-4.0..4.0);
    let cy: f64 = side / 2.0 + r.random_range(-4.0..4.0);
    let s: f64 = r.random_range(6.0..10.0);

    let inside = |px: f64, py: f64| -> bool {
        let dx = px - cx;
        let dy = py - cy;
        match shape {
            0 => dx * dx + dy * dy <= (0.9 * s) * (0.9 * s),
            1 => {
                let d2 = dx * dx + dy * dy;
                d2 <= (0.95 * s) * (0.95 * s) && d2 >= (0.55 * s) * (0.55 * s)
            }
            2 => dx.abs() <= 0.8 * s && dy.abs() <= 0.8 * s,
            3 => (dx.abs() <= 0.3 * s && dy.abs() <= s) || (dy.abs() <= 0.3 * s && dx.abs() <= s),
            _ => {
                // upward triangle: apex at cy - s, base at cy + 0.7 s
                dy >= -s && dy <= 0.7 * s && dx.abs() <= 0.9 * s * (dy + s) / (1.7 * s)
            }
        }
    };

    for c in 0..IMG_CHANNELS {
        for y in 0..IMG_SIDE {
            for x in 0..IMG_SIDE {
                let hit = inside(x as f64 + 0.5, y as f64 + 0.5);
                let base = if hit { fg[c] } else { bg[c] };
                let noisy = (base + rng::standard_normal(r) * 0.06).clamp(0.0, 1.0);
                out[(c * IMG_SIDE + y) * IMG_SIDE + x] = (noisy * 255.0).round() as u8;
            }
        }
    }
}
