//! Two-view generation. Images get random resized crop, flip, color jitter
//! and grayscale; plain vectors get Gaussian noise and coordinate masking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, ImageShape};
use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentMode {
    Full,
    CropOnly,
    None,
}

impl AugmentMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AugmentMode::Full => "full",
            AugmentMode::CropOnly => "crop_only",
            AugmentMode::None => "none",
        }
    }
}

impl std::str::FromStr for AugmentMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(AugmentMode::Full),
            "crop_only" => Ok(AugmentMode::CropOnly),
            "none" => Ok(AugmentMode::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown augment mode {other:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentPolicy {
    pub mode: AugmentMode,
    /// Fraction of the image area kept by the crop.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    /// Output height and width; `None` keeps the input size.
    pub output_size: Option<(usize, usize)>,
    /// Vector data: std of the additive noise in `full` mode.
    pub noise_std: f64,
    /// Vector data: probability that a coordinate is zeroed.
    pub mask_prob: f64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self {
            mode: AugmentMode::Full,
            crop_scale: (0.08, 1.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            output_size: None,
            noise_std: 0.1,
            mask_prob: 0.2,
        }
    }
}

impl AugmentPolicy {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.flip_prob,
            self.jitter_prob,
            self.grayscale_prob,
            self.mask_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::InvalidArgument(
                "probabilities must lie in [0, 1]".into(),
            ));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "bad crop scale range ({lo}, {hi})"
            )));
        }
        if [
            self.brightness,
            self.contrast,
            self.saturation,
            self.noise_std,
        ]
        .iter()
        .any(|v| !(*v >= 0.0))
        {
            return Err(Error::InvalidArgument(
                "jitter strengths and noise must be >= 0".into(),
            ));
        }
        Ok(())
    }

    fn out_shape(&self, input: ImageShape) -> ImageShape {
        let (height, width) = self.output_size.unwrap_or((input.height, input.width));
        ImageShape {
            height,
            width,
            channels: input.channels,
        }
    }

    /// Width of one augmented sample.
    pub fn output_len(&self, input_len: usize, image: Option<ImageShape>) -> usize {
        image.map_or(input_len, |s| self.out_shape(s).len())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent stream for one sample of one epoch.
pub fn sample_rng(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ epoch) ^ index);
    ChaCha8Rng::seed_from_u64(key)
}

/// Two independent draws of the transform chain.
pub fn make_views<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    image: Option<ImageShape>,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<(Vec<T>, Vec<T>)> {
    let one = |rng: &mut R| match image {
        Some(shape) => augment_image(x, shape, policy, rng),
        None => Ok(augment_vector(x, policy, rng)),
    };
    if policy.mode == AugmentMode::None && policy.output_size.is_none() {
        return Ok((x.to_vec(), x.to_vec()));
    }
    let a = one(rng)?;
    let b = one(rng)?;
    Ok((a, b))
}

/// Views for the rows `indices` of `data`; sample `i` draws from
/// [`sample_rng`]`(seed, epoch, indices[i])`.
pub fn make_view_batch<T: Scalar>(
    data: &Dataset<T>,
    indices: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: u64,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let width = policy.output_len(data.dim(), data.image);
    let mut v1 = Vec::with_capacity(indices.len() * width);
    let mut v2 = Vec::with_capacity(indices.len() * width);
    for &i in indices {
        let mut rng = sample_rng(seed, epoch, i as u64);
        let (a, b) = make_views(data.samples.row(i), data.image, policy, &mut rng)?;
        v1.extend(a);
        v2.extend(b);
    }
    Ok((
        Matrix::from_vec(indices.len(), width, v1)?,
        Matrix::from_vec(indices.len(), width, v2)?,
    ))
}

fn augment_vector<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Vec<T> {
    match policy.mode {
        AugmentMode::None => x.to_vec(),
        AugmentMode::CropOnly | AugmentMode::Full => x
            .iter()
            .map(|&v| {
                let noisy = if policy.mode == AugmentMode::Full {
                    v + T::lit(policy.noise_std * rng.sample::<f64, _>(StandardNormal))
                } else {
                    v
                };
                if rng.random::<f64>() < policy.mask_prob {
                    T::zero()
                } else {
                    noisy
                }
            })
            .collect(),
    }
}

/// Crop window `(top, left, height, width)` in input pixels.
fn sample_crop<R: Rng + ?Sized>(
    shape: ImageShape,
    scale: (f64, f64),
    rng: &mut R,
) -> (usize, usize, usize, usize) {
    let (h, w) = (shape.height, shape.width);
    let area = (h * w) as f64;
    let (log_lo, log_hi) = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let target = area * rng.random_range(scale.0..=scale.1);
        let ratio = rng.random_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    (0, 0, h, w)
}

fn augment_image<T: Scalar, R: Rng + ?Sized>(
    x: &[T],
    shape: ImageShape,
    policy: &AugmentPolicy,
    rng: &mut R,
) -> Result<Vec<T>> {
    let out = policy.out_shape(shape);
    if shape.height < out.height || shape.width < out.width {
        return Err(Error::ImageTooSmall {
            height: shape.height,
            width: shape.width,
            out_height: out.height,
            out_width: out.width,
        });
    }
    let pixels: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    let mut img = match policy.mode {
        AugmentMode::None => resize(&pixels, shape, (0, 0, shape.height, shape.width), out),
        AugmentMode::CropOnly | AugmentMode::Full => {
            let window = sample_crop(shape, policy.crop_scale, rng);
            let mut img = resize(&pixels, shape, window, out);
            if rng.random::<f64>() < policy.flip_prob {
                flip_horizontal(&mut img, out);
            }
            img
        }
    };
    if policy.mode == AugmentMode::Full {
        if rng.random::<f64>() < policy.jitter_prob {
            color_jitter(&mut img, out, policy, rng);
        }
        if rng.random::<f64>() < policy.grayscale_prob {
            grayscale(&mut img, out);
        }
    }
    Ok(img.into_iter().map(|v| T::lit(v.clamp(0.0, 1.0))).collect())
}

/// Bilinear resampling of a crop window to `out`, sampling at pixel centers
/// so a full-frame window of the same size is an exact copy.
fn resize(
    x: &[f64],
    shape: ImageShape,
    window: (usize, usize, usize, usize),
    out: ImageShape,
) -> Vec<f64> {
    let (top, left, ch, cw) = window;
    let plane = shape.height * shape.width;
    let mut img = Vec::with_capacity(out.len());
    let coord = |o: usize, n_out: usize, n_in: usize| -> (usize, usize, f64) {
        let src =
            ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, src - i0 as f64)
    };
    for c in 0..shape.channels {
        let base = &x[c * plane..(c + 1) * plane];
        for oy in 0..out.height {
            let (y0, y1, fy) = coord(oy, out.height, ch);
            for ox in 0..out.width {
                let (x0, x1, fx) = coord(ox, out.width, cw);
                let at = |y: usize, xx: usize| base[(top + y) * shape.width + left + xx];
                let v = if fy == 0.0 && fx == 0.0 {
                    at(y0, x0)
                } else {
                    let a = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                    let b = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                    a * (1.0 - fy) + b * fy
                };
                img.push(v);
            }
        }
    }
    img
}

fn flip_horizontal(img: &mut [f64], shape: ImageShape) {
    for row in img.chunks_exact_mut(shape.width) {
        row.reverse();
    }
}

fn luma(img: &[f64], shape: ImageShape) -> Vec<f64> {
    let plane = shape.height * shape.width;
    if shape.channels < 3 {
        return img[..plane].to_vec();
    }
    (0..plane)
        .map(|i| 0.299 * img[i] + 0.587 * img[plane + i] + 0.114 * img[2 * plane + i])
        .collect()
}

fn clamp_all(img: &mut [f64]) {
    img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn color_jitter<R: Rng + ?Sized>(
    img: &mut [f64],
    shape: ImageShape,
    p: &AugmentPolicy,
    rng: &mut R,
) {
    let mut factor = |strength: f64| {
        if strength == 0.0 {
            1.0
        } else {
            rng.random_range((1.0 - strength).max(0.0)..=1.0 + strength)
        }
    };
    let (b, c, s) = (
        factor(p.brightness),
        factor(p.contrast),
        factor(p.saturation),
    );
    img.iter_mut().for_each(|v| *v *= b);
    clamp_all(img);

    let mean = luma(img, shape).iter().sum::<f64>() / (shape.height * shape.width) as f64;
    img.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
    clamp_all(img);

    let gray = luma(img, shape);
    let plane = gray.len();
    for (i, v) in img.iter_mut().enumerate() {
        let g = gray[i % plane];
        *v = (*v - g) * s + g;
    }
    clamp_all(img);
}

fn grayscale(img: &mut [f64], shape: ImageShape) {
    let gray = luma(img, shape);
    let plane = gray.len();
    for (i, v) in img.iter_mut().enumerate() {
        *v = gray[i % plane];
    }
}
