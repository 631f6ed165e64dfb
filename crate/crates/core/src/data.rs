//! PNG I/O, Gaussian-blur degradation, paired datasets and batching.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader, RgbImage};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{DfnError, Result};
use crate::model::Variant;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::{Shape4, Tensor4};

fn image_err(path: &Path, reason: impl ToString) -> DfnError {
    DfnError::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads an 8-bit RGB (or RGBA, alpha dropped) PNG as a `(1, 3, h, w)`
/// tensor of `u/255` values.
pub fn load_png<T: Scalar>(path: &Path) -> Result<Tensor4<T>> {
    let img = ImageReader::open(path)
        .map_err(|e| image_err(path, e))?
        .with_guessed_format()
        .map_err(|e| image_err(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let rgb = match img {
        DynamicImage::ImageRgb8(rgb) => rgb,
        DynamicImage::ImageRgba8(rgba) => {
            warn!("{}: dropping alpha channel", path.display());
            DynamicImage::ImageRgba8(rgba).to_rgb8()
        }
        other => {
            return Err(image_err(
                path,
                format!("expected 8-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    Ok(rgb_to_tensor(&rgb))
}

pub fn rgb_to_tensor<T: Scalar>(rgb: &RgbImage) -> Tensor4<T> {
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let shape = Shape4 { n: 1, c: 3, h, w };
    let mut t = Tensor4::zeros(shape);
    let inv = T::one() / T::from_f64_lossy(255.0);
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            let i = shape.index(0, c, y as usize, x as usize);
            t.data_mut()[i] = T::from_u8(px.0[c]).unwrap() * inv;
        }
    }
    t
}

/// Quantizes batch item 0 with `round(v·255)` clamped to `[0, 255]`.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor4<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.c != 3 {
        return Err(DfnError::ShapeMismatch {
            context: "tensor_to_rgb",
            axis: "c",
            left: s.c,
            right: 3,
        });
    }
    let mut img = RgbImage::new(s.w as u32, s.h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = t.get(0, c, y as usize, x as usize).as_f64();
            px.0[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(img)
}

pub fn save_png<T: Scalar>(t: &Tensor4<T>, path: &Path) -> Result<()> {
    let img = tensor_to_rgb(t)?;
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| image_err(path, e))?;
    Ok(())
}

/// OpenCV's default σ for a kernel of size `k`.
pub fn sigma_for_kernel(k: usize) -> f64 {
    0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

/// Normalized outer product of the 1-D Gaussian, `k × k`, row-major.
pub fn gaussian_kernel(k: usize, sigma: f64) -> Result<Vec<f64>> {
    if k % 2 == 0 || k == 0 {
        return Err(DfnError::invalid("gaussian_kernel", format!("kernel size {k} must be odd")));
    }
    let r = (k / 2) as f64;
    let g: Vec<f64> = (0..k)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    Ok(g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect())
}

/// Reflect-101 index: `-1 → 1`, `n → n-2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - m;
    }
    m as usize
}

/// Per-channel Gaussian blur with reflect-101 borders; shape preserved.
pub fn gaussian_blur<T: Scalar>(img: &Tensor4<T>, k: usize, sigma: f64) -> Result<Tensor4<T>> {
    let kernel = gaussian_kernel(k, sigma)?;
    let s = img.shape();
    let r = (k / 2) as isize;
    let mut out = Tensor4::zeros(s);
    let src = img.data();
    for nc in 0..s.n * s.c {
        let base = nc * s.plane();
        for y in 0..s.h {
            for x in 0..s.w {
                let mut acc = 0.0;
                for ky in 0..k {
                    let sy = reflect(y as isize + ky as isize - r, s.h);
                    for kx in 0..k {
                        let sx = reflect(x as isize + kx as isize - r, s.w);
                        acc += kernel[ky * k + kx] * src[base + sy * s.w + sx].as_f64();
                    }
                }
                out.data_mut()[base + y * s.w + x] = T::from_f64_lossy(acc);
            }
        }
    }
    Ok(out)
}

/// Mean of each 2×2 block.
pub fn box_downsample2<T: Scalar>(img: &Tensor4<T>) -> Result<Tensor4<T>> {
    let s = img.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(DfnError::invalid("box_downsample2", format!("odd spatial dims in {s}")));
    }
    let out_shape = Shape4::new(s.n, s.c, s.h / 2, s.w / 2)?;
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h / 2 {
                for x in 0..s.w / 2 {
                    let v = img.get(n, c, 2 * y, 2 * x)
                        + img.get(n, c, 2 * y, 2 * x + 1)
                        + img.get(n, c, 2 * y + 1, 2 * x)
                        + img.get(n, c, 2 * y + 1, 2 * x + 1);
                    out.data_mut()[out_shape.index(n, c, y, x)] = v * quarter;
                }
            }
        }
    }
    Ok(out)
}

/// Grows `h` and `w` up to the next multiple of `multiple` by repeating the
/// last row and column.
pub fn pad_to_multiple<T: Scalar>(img: &Tensor4<T>, multiple: usize) -> Result<Tensor4<T>> {
    if multiple == 0 {
        return Err(DfnError::invalid("pad_to_multiple", "multiple must be positive"));
    }
    let s = img.shape();
    let up = |v: usize| v.div_ceil(multiple) * multiple;
    let out_shape = Shape4::new(s.n, s.c, up(s.h), up(s.w))?;
    if out_shape == s {
        return Ok(img.clone());
    }
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..out_shape.h {
                for x in 0..out_shape.w {
                    out.data_mut()[out_shape.index(n, c, y, x)] = img.get(n, c, y.min(s.h - 1), x.min(s.w - 1));
                }
            }
        }
    }
    Ok(out)
}

/// Top-left `h × w` window.
pub fn crop<T: Scalar>(img: &Tensor4<T>, h: usize, w: usize) -> Result<Tensor4<T>> {
    let s = img.shape();
    if h > s.h || w > s.w {
        return Err(DfnError::invalid("crop", format!("{h}×{w} window exceeds {s}")));
    }
    let out_shape = Shape4::new(s.n, s.c, h, w)?;
    let mut out = Tensor4::zeros(out_shape);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..h {
                let src = s.index(n, c, y, 0);
                let dst = out_shape.index(n, c, y, 0);
                out.data_mut()[dst..dst + w].copy_from_slice(&img.data()[src..src + w]);
            }
        }
    }
    Ok(out)
}

/// Blur settings for synthesizing super-resolution inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSpec {
    pub kernel_sizes: Vec<usize>,
    pub seed: u64,
}

impl BlurSpec {
    pub fn new(kernel_sizes: Vec<usize>, seed: u64) -> Result<Self> {
        if kernel_sizes.is_empty() {
            return Err(DfnError::invalid("blur spec", "no kernel sizes"));
        }
        if let Some(k) = kernel_sizes.iter().find(|&&k| k < 3 || k % 2 == 0) {
            return Err(DfnError::invalid("blur spec", format!("kernel size {k} must be odd and >= 3")));
        }
        Ok(BlurSpec { kernel_sizes, seed })
    }
}

/// One input/target pair; `id` is the shared file stem.
#[derive(Clone, Debug, PartialEq)]
pub struct ImagePair<T> {
    pub id: String,
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
}

/// Input = 2×2 box downsample of the target blurred with a kernel size
/// drawn from `spec`; target = the untouched high-resolution image.
pub fn make_sr_pair<T: Scalar>(id: &str, highres: &Tensor4<T>, spec: &BlurSpec, rng: &mut Rng) -> Result<ImagePair<T>> {
    let s = highres.shape();
    if s.h % 2 != 0 || s.w % 2 != 0 {
        return Err(DfnError::invalid("make_sr_pair", format!("odd spatial dims in {s}")));
    }
    let k = spec.kernel_sizes[rng.below(spec.kernel_sizes.len() as u32) as usize];
    let blurred = gaussian_blur(highres, k, sigma_for_kernel(k))?;
    Ok(ImagePair {
        id: id.to_string(),
        input: box_downsample2(&blurred)?,
        target: highres.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Input and target subdirectory names for a task.
pub fn layout(variant: Variant) -> (&'static str, &'static str) {
    match variant {
        Variant::Enhancement => ("low", "high"),
        Variant::SuperResolution => ("lowres_blurred", "highres"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub root: PathBuf,
    pub variant: Variant,
    /// `None` when `root` already is the split directory.
    pub split: Option<Split>,
}

impl DatasetSpec {
    pub fn dir(&self) -> PathBuf {
        match self.split {
            Some(s) => self.root.join(s.dir_name()),
            None => self.root.clone(),
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let rd = fs::read_dir(dir).map_err(|e| DfnError::Dataset(format!("cannot read {}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in rd {
        let path = entry?.path();
        let is_png = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if path.is_file() && is_png {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads every input/target pair, sorted by file stem.
pub fn load_paired_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Vec<ImagePair<T>>> {
    let dir = spec.dir();
    let (in_name, tgt_name) = layout(spec.variant);
    let inputs = png_stems(&dir.join(in_name))?;
    let targets = png_stems(&dir.join(tgt_name))?;
    if inputs.is_empty() {
        return Err(DfnError::Dataset(format!("no PNG files in {}", dir.join(in_name).display())));
    }
    if let Some(stem) = inputs.keys().find(|k| !targets.contains_key(*k)) {
        return Err(DfnError::Dataset(format!("input `{stem}` has no matching {tgt_name}/{stem}.png")));
    }
    if let Some(stem) = targets.keys().find(|k| !inputs.contains_key(*k)) {
        return Err(DfnError::Dataset(format!("target `{stem}` has no matching {in_name}/{stem}.png")));
    }
    let scale = spec.variant.scale();
    let mut pairs = Vec::with_capacity(inputs.len());
    for (stem, in_path) in &inputs {
        let input = load_png::<T>(in_path)?;
        let target = load_png::<T>(&targets[stem])?;
        let (si, st) = (input.shape(), target.shape());
        if st.h != si.h * scale || st.w != si.w * scale {
            return Err(DfnError::Dataset(format!(
                "pair `{stem}`: target {}×{} is not {scale}× input {}×{}",
                st.h, st.w, si.h, si.w
            )));
        }
        pairs.push(ImagePair {
            id: stem.clone(),
            input,
            target,
        });
    }
    info!("loaded {} pairs from {}", pairs.len(), dir.display());
    Ok(pairs)
}

/// Order in which an epoch visits the pairs; a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(len: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    Rng::with_stream(seed, epoch as u64).shuffle(&mut order);
    order
}

/// A stacked minibatch.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub indices: Vec<usize>,
    pub input: Tensor4<T>,
    pub target: Tensor4<T>,
}

/// Iterator over the shuffled minibatches of one epoch. The last batch may
/// be short.
pub struct BatchIter<'a, T> {
    pairs: &'a [ImagePair<T>],
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

pub fn batch_iter<T: Scalar>(pairs: &[ImagePair<T>], batch_size: usize, seed: u64, epoch: usize) -> Result<BatchIter<'_, T>> {
    if batch_size == 0 {
        return Err(DfnError::invalid("batch_iter", "batch size must be >= 1"));
    }
    if pairs.is_empty() {
        return Err(DfnError::Dataset("cannot batch an empty dataset".into()));
    }
    Ok(BatchIter {
        pairs,
        order: epoch_order(pairs.len(), seed, epoch),
        batch_size,
        pos: 0,
    })
}

impl<T: Scalar> Iterator for BatchIter<'_, T> {
    type Item = Result<Batch<T>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let inputs: Vec<_> = indices.iter().map(|&i| &self.pairs[i].input).collect();
        let targets: Vec<_> = indices.iter().map(|&i| &self.pairs[i].target).collect();
        Some((|| {
            Ok(Batch {
                input: Tensor4::stack(&inputs)?,
                target: Tensor4::stack(&targets)?,
                indices,
            })
        })())
    }
}
