//! Online low-quality synthesis: blur, area downsampling, additive Gaussian
//! noise, then a JPEG round trip, in that fixed order.

use std::io::Cursor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Gaussian,
    Average,
    Median,
    Motion,
}

impl KernelKind {
    pub const ALL: [KernelKind; 4] = [KernelKind::Gaussian, KernelKind::Average, KernelKind::Median, KernelKind::Motion];
}

/// A fully resolved degradation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradeConfig {
    pub kernel: KernelKind,
    /// Gaussian σ; for the other kernels the window length is
    /// `2·ceil(σ) + 1`.
    pub kernel_sigma: f32,
    pub down_scale: usize,
    pub noise_sigma: f32,
    pub jpeg_quality: u8,
    pub seed: u64,
}

impl DegradeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.kernel_sigma > 0.0 && self.kernel_sigma.is_finite()) {
            return Err(Error::invalid(format!("kernel sigma must be > 0, got {}", self.kernel_sigma)));
        }
        if self.down_scale == 0 {
            return Err(Error::invalid("downsampling ratio must be at least 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(1..=100).contains(&self.jpeg_quality) {
            return Err(Error::invalid(format!("JPEG quality {} outside [1, 100]", self.jpeg_quality)));
        }
        Ok(())
    }

    fn window(&self) -> usize {
        2 * self.kernel_sigma.ceil().max(1.0) as usize + 1
    }
}

/// Sampling ranges for [`sample_degrade_config`]. Continuous ranges are
/// inclusive `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParamRanges {
    pub kernels: Vec<KernelKind>,
    pub sigma: [f32; 2],
    pub noise: [f32; 2],
    pub quality: [u8; 2],
    pub down_scale: usize,
}

impl Default for ParamRanges {
    fn default() -> Self {
        Self {
            kernels: KernelKind::ALL.to_vec(),
            sigma: [0.2, 3.0],
            noise: [0.0, 0.08],
            quality: [30, 95],
            down_scale: 8,
        }
    }
}

impl ParamRanges {
    pub fn validate(&self) -> Result<()> {
        if self.kernels.is_empty() {
            return Err(Error::invalid("at least one blur kernel kind is required"));
        }
        let ok = |r: [f32; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ok(self.sigma) || self.sigma[0] <= 0.0 {
            return Err(Error::invalid(format!("invalid sigma range {:?}", self.sigma)));
        }
        if !ok(self.noise) || self.noise[0] < 0.0 {
            return Err(Error::invalid(format!("invalid noise range {:?}", self.noise)));
        }
        if self.quality[0] > self.quality[1] || self.quality[0] < 1 || self.quality[1] > 100 {
            return Err(Error::invalid(format!("invalid JPEG quality range {:?}", self.quality)));
        }
        if self.down_scale == 0 {
            return Err(Error::invalid("downsampling ratio must be at least 1"));
        }
        Ok(())
    }
}

fn uniform(r: &mut rng::SeededRng, [lo, hi]: [f32; 2]) -> f32 {
    if lo == hi {
        lo
    } else {
        r.random_range(lo..=hi)
    }
}

/// Draws a degradation: kernel kind uniform over `ranges.kernels`,
/// continuous parameters uniform over their ranges.
pub fn sample_degrade_config(seed: u64, ranges: &ParamRanges) -> Result<DegradeConfig> {
    ranges.validate()?;
    let mut r = rng::rng_from(seed);
    let kernel = ranges.kernels[r.random_range(0..ranges.kernels.len())];
    let kernel_sigma = uniform(&mut r, ranges.sigma);
    let noise_sigma = uniform(&mut r, ranges.noise);
    let jpeg_quality = r.random_range(ranges.quality[0]..=ranges.quality[1]);
    Ok(DegradeConfig {
        kernel,
        kernel_sigma,
        down_scale: ranges.down_scale,
        noise_sigma,
        jpeg_quality,
        seed: rng::derive(seed, purpose::DEGRADE, 0),
    })
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i32;
    let w: Vec<f32> = (-radius..=radius)
        .map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f32 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Rasterised line of odd length `len` at angle `theta`, normalised.
fn motion_kernel(len: usize, theta: f32) -> Vec<f32> {
    let mut k = vec![0.0f32; len * len];
    let c = (len / 2) as f32;
    let steps = len * 4;
    for s in 0..=steps {
        let t = s as f32 / steps as f32 - 0.5;
        let x = c + t * (len as f32 - 1.0) * theta.cos();
        let y = c + t * (len as f32 - 1.0) * theta.sin();
        let (xi, yi) = (x.round() as usize, y.round() as usize);
        k[yi.min(len - 1) * len + xi.min(len - 1)] += 1.0;
    }
    let s: f32 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

#[inline]
fn clamp_idx(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

fn separable(img: &Image, k: &[f32]) -> Image {
    let (h, w, ch) = img.shape();
    let r = (k.len() / 2) as isize;
    let mut tmp = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * img.get(y, clamp_idx(x as isize + i as isize - r, w), c))
                    .sum();
                tmp.set(y, x, c, v);
            }
        }
    }
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let v = k
                    .iter()
                    .enumerate()
                    .map(|(i, &kv)| kv * tmp.get(clamp_idx(y as isize + i as isize - r, h), x, c))
                    .sum();
                out.set(y, x, c, v);
            }
        }
    }
    out
}

fn convolve2d(img: &Image, k: &[f32], len: usize) -> Image {
    let (h, w, ch) = img.shape();
    let r = (len / 2) as isize;
    let mut out = Image::zeros(h, w, ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut s = 0.0;
                for ky in 0..len {
                    for kx in 0..len {
                        let kv = k[ky * len + kx];
                        if kv != 0.0 {
                            let sy = clamp_idx(y as isize + ky as isize - r, h);
                            let sx = clamp_idx(x as isize + kx as isize - r, w);
                            s += kv * img.get(sy, sx, c);
                        }
                    }
                }
                out.set(y, x, c, s);
            }
        }
    }
    out
}

fn median_filter(img: &Image, len: usize) -> Image {
    let (h, w, ch) = img.shape();
    let r = (len / 2) as isize;
    let mut out = Image::zeros(h, w, ch);
    let mut win = Vec::with_capacity(len * len);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                win.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        win.push(img.get(clamp_idx(y as isize + dy, h), clamp_idx(x as isize + dx, w), c));
                    }
                }
                win.sort_by(|a, b| a.total_cmp(b));
                out.set(y, x, c, win[win.len() / 2]);
            }
        }
    }
    out
}

/// Applies the configured blur kernel with replicated borders.
pub fn blur(img: &Image, cfg: &DegradeConfig) -> Image {
    match cfg.kernel {
        KernelKind::Gaussian => separable(img, &gaussian_kernel(cfg.kernel_sigma)),
        KernelKind::Average => {
            let n = cfg.window();
            separable(img, &vec![1.0 / n as f32; n])
        }
        KernelKind::Median => median_filter(img, cfg.window()),
        KernelKind::Motion => {
            let n = cfg.window();
            let theta = rng::rng_from(rng::mix(cfg.seed, 0xA)).random_range(0.0..std::f32::consts::PI);
            convolve2d(img, &motion_kernel(n, theta), n)
        }
    }
}

/// Mean over non-overlapping `r × r` blocks.
pub fn area_downsample(img: &Image, r: usize) -> Result<Image> {
    let (h, w, ch) = img.shape();
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::invalid(format!("image {h}x{w} is not divisible by downsampling ratio {r}")));
    }
    let (oh, ow) = (h / r, w / r);
    let mut out = Image::zeros(oh, ow, ch);
    let norm = 1.0 / (r * r) as f64;
    for y in 0..oh {
        for x in 0..ow {
            for c in 0..ch {
                // f64 keeps large blocks exact to f32 precision.
                let mut s = 0.0f64;
                for dy in 0..r {
                    for dx in 0..r {
                        s += img.get(y * r + dy, x * r + dx, c) as f64;
                    }
                }
                out.set(y, x, c, (s * norm) as f32);
            }
        }
    }
    Ok(out)
}

/// Encodes to baseline JPEG at `quality` and decodes back.
pub fn jpeg_roundtrip(img: &Image, quality: u8) -> Result<Image> {
    let (h, w, ch) = img.shape();
    if ch != 3 {
        return Err(Error::invalid("JPEG stage expects RGB input"));
    }
    if !(1..=100).contains(&quality) {
        return Err(Error::invalid(format!("JPEG quality {quality} outside [1, 100]")));
    }
    let mut bytes = Vec::new();
    let enc = image::codecs::jpeg::JpegEncoder::new_with_quality(&mut bytes, quality);
    image::ImageEncoder::write_image(enc, &img.to_rgb8(), w as u32, h as u32, image::ExtendedColorType::Rgb8)?;
    let decoded = image::load(Cursor::new(bytes), image::ImageFormat::Jpeg)?.to_rgb8();
    Image::from_rgb8(h, w, 3, decoded.as_raw())
}

/// `[(hq ∗ k) ↓r + n]_JPEG`, clamped to `[0, 1]`.
pub fn degrade(hq: &Image, cfg: &DegradeConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w, _) = hq.shape();
    if h % cfg.down_scale != 0 || w % cfg.down_scale != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} is not divisible by downsampling ratio {}",
            cfg.down_scale
        )));
    }
    let blurred = blur(hq, cfg);
    let mut small = area_downsample(&blurred, cfg.down_scale)?;
    if cfg.noise_sigma > 0.0 {
        let mut r = rng::rng_from(cfg.seed);
        for v in small.as_mut_slice() {
            *v += cfg.noise_sigma * rng::gaussian(&mut r);
        }
    }
    Ok(jpeg_roundtrip(&small.clamped(), cfg.jpeg_quality)?.clamped())
}

/// Bilinear upsampling by integer factors, with half-pixel sample centres
/// and linear extrapolation at the borders (exact on affine ramps), clamped
/// to `[0, 1]`.
pub fn upsample_to_model_res(lq: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    let (h, w, ch) = lq.shape();
    if h == 0 || w == 0 || !target_h.is_multiple_of(h) || !target_w.is_multiple_of(w) || target_h < h || target_w < w {
        return Err(Error::invalid(format!(
            "target {target_h}x{target_w} is not a multiple of {h}x{w}"
        )));
    }
    let (sy, sx) = ((target_h / h) as f32, (target_w / w) as f32);
    let axis = |dst: usize, scale: f32, n: usize| -> (usize, usize, f32) {
        if n == 1 {
            return (0, 0, 0.0);
        }
        let s = (dst as f32 + 0.5) / scale - 0.5;
        let i0 = (s.floor().max(0.0) as usize).min(n - 2);
        (i0, i0 + 1, s - i0 as f32)
    };
    let mut out = Image::zeros(target_h, target_w, ch);
    for y in 0..target_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for x in 0..target_w {
            let (x0, x1, fx) = axis(x, sx, w);
            for c in 0..ch {
                let top = lq.get(y0, x0, c) * (1.0 - fx) + lq.get(y0, x1, c) * fx;
                let bot = lq.get(y1, x0, c) * (1.0 - fx) + lq.get(y1, x1, c) * fx;
                out.set(y, x, c, (top * (1.0 - fy) + bot * fy).clamp(0.0, 1.0));
            }
        }
    }
    Ok(out)
}
