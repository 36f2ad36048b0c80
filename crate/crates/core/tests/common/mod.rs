//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use facerestore::attrenc::EncoderArch;
use facerestore::flowcore::{Conditioning, VelocityArch, VelocityField};
use facerestore::flowedit::{edit_noise, EditConfig};
use facerestore::losses::{DualPair, ObjectiveBatch};
use facerestore::nn::Tensor;
use facerestore::rng;
use facerestore::synthgen::ATTR_COUNT;
use facerestore::{Image, Result};
use rand::Rng;

/// Uniform random image in `[lo, hi)`.
pub fn uniform_image(seed: u64, shape: (usize, usize, usize), lo: f32, hi: f32) -> Image {
    let mut r = rng::rng_from(seed);
    let (h, w, c) = shape;
    Image::from_vec(h, w, c, (0..h * w * c).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Standard-normal random image.
pub fn gaussian_image(seed: u64, shape: (usize, usize, usize)) -> Image {
    let mut r = rng::rng_from(seed);
    let (h, w, c) = shape;
    Image::from_vec(h, w, c, rng::gaussian_vec(&mut r, h * w * c)).unwrap()
}

pub fn max_abs_diff(a: &Image, b: &Image) -> f32 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// A velocity field that ignores its inputs.
pub struct ConstField(pub Image);

impl VelocityField for ConstField {
    fn velocity(&self, _zt: &Image, _t: f32, _cond: &Conditioning) -> Result<Image> {
        Ok(self.0.clone())
    }
}

/// Returns one constant for the unconditional branch and one per
/// attribute prompt, chosen by whether `attrs` is present and equal to
/// `tar`.
pub struct PromptField {
    pub tar: facerestore::synthgen::AttrVector,
    pub on_tar: Image,
    pub otherwise: Image,
}

impl VelocityField for PromptField {
    fn velocity(&self, _zt: &Image, _t: f32, cond: &Conditioning) -> Result<Image> {
        Ok(if cond.attrs.as_ref() == Some(&self.tar) { self.on_tar.clone() } else { self.otherwise.clone() })
    }
}

/// A state-dependent field `v = a·z + b·lq + c·t + d·attrs[0]`, used to
/// compare two editing implementations on a nontrivial trajectory.
pub struct AffineField {
    pub a: f32,
    pub b: f32,
    pub c: f32,
    pub d: f32,
}

impl VelocityField for AffineField {
    fn velocity(&self, zt: &Image, t: f32, cond: &Conditioning) -> Result<Image> {
        let p = cond.resolved_attrs(ATTR_COUNT).get(0);
        zt.zip_map(&cond.lq_up, |z, l| self.a * z + self.b * l + self.c * t + self.d * p)
    }
}

pub fn micro_velocity_arch(size: usize) -> VelocityArch {
    VelocityArch { size, attrs: ATTR_COUNT, widths: [2, 2, 2], time_freqs: 1, embed_dim: 2 }
}

pub fn micro_encoder_arch(size: usize) -> EncoderArch {
    EncoderArch { size, attrs: ATTR_COUNT, widths: [2, 2, 2, 2], feature_dim: 4, identity_dim: 2 }
}

/// A two-item batch coupled by one dual pair on attribute 0.
pub fn micro_batch(seed: u64, size: usize, t: f64) -> ObjectiveBatch<f64> {
    let mut r = rng::rng_from(seed);
    let mut u = |n: usize, lo: f64, hi: f64| (0..n).map(|_| r.random_range(lo..hi)).collect::<Vec<f64>>();
    let len = 2 * 3 * size * size;
    let k = ATTR_COUNT;
    let mut attrs = u(2 * k, 0.0, 1.0).iter().map(|v| v.round()).collect::<Vec<_>>();
    attrs[k] = 1.0 - attrs[0];
    ObjectiveBatch {
        z0: Tensor::from_vec(2, 3, size, size, u(len, 0.3, 0.7)),
        eps: Tensor::from_vec(2, 3, size, size, u(len, -0.1, 0.1)),
        lq: Tensor::from_vec(2, 3, size, size, u(len, 0.0, 1.0)),
        t: vec![t, t],
        attrs,
        gt_probs: u(2 * k, 0.05, 0.95),
        attr_active: vec![true, true],
        pairs: vec![DualPair { src: 0, tar: 1, edited_index: 0 }],
        norm: 2.0,
    }
}

/// Vanilla FlowEdit written from the algorithm, sharing only the noise
/// stream with the library.
pub fn vanilla_flow_edit<V: VelocityField>(model: &V, x: &Image, cfg: &EditConfig) -> Image {
    let s = cfg.settings;
    let n_max = s.resolved_n_max();
    let big_t = s.steps as f32;
    let guided = |z: &Image, t: f32, c: &Conditioning| -> Image {
        let vc = model.velocity(z, t, c).unwrap();
        if s.cfg_scale == 1.0 {
            return vc;
        }
        let vu = model.velocity(z, t, &Conditioning { lq_up: c.lq_up.clone(), attrs: None }).unwrap();
        let mut out = vu.clone();
        for j in 0..out.len() {
            let (c, u) = (vc.as_slice()[j], vu.as_slice()[j]);
            out.as_mut_slice()[j] = u + s.cfg_scale * (c - u);
        }
        out
    };
    let mut z_fe = x.clone();
    let mut i = n_max;
    while i >= 1 {
        let t = i as f32 / big_t;
        let t_prev = (i - 1) as f32 / big_t;
        let noise = edit_noise(s.seed, i, x.shape());
        let mut z_src = x.clone();
        let mut z_tar = x.clone();
        for j in 0..x.len() {
            let xv = x.as_slice()[j];
            let zs = (1.0 - t) * xv + t * noise.as_slice()[j];
            z_src.as_mut_slice()[j] = zs;
            // Same grouping as the library: Z_src + (Z_FE − X_src).
            z_tar.as_mut_slice()[j] = zs + (z_fe.as_slice()[j] - xv);
        }
        let v_tar = guided(&z_tar, t, &cfg.tar_cond);
        let v_src = guided(&z_src, t, &cfg.src_cond);
        for j in 0..x.len() {
            let d = v_tar.as_slice()[j] - v_src.as_slice()[j];
            z_fe.as_mut_slice()[j] += (t_prev - t) * d;
        }
        i -= 1;
    }
    z_fe.clamped()
}

