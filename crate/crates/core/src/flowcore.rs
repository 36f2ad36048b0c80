//! Rectified-flow primitives: the straight interpolation path, the one-step
//! clean estimate `ẑ0 = z_t − t·v`, classifier-free guidance, the velocity
//! network, and a uniform-grid Euler sampler.
//!
//! Time runs from `t = 0` (clean image) to `t = 1` (pure noise); the
//! regression target of the velocity is `ε − z0`.

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::{
    add_channel_bias, avgpool2, avgpool2_backward, channel_bias_grad, silu, silu_backward, upsample2,
    upsample2_backward,
};
use crate::nn::{Conv2d, Linear, ParamSet, Real, Tensor};
use crate::rng::{self, purpose};
use crate::synthgen::{self, AttrVector, ATTR_COUNT};

pub const CHECKPOINT_KIND: &str = "velocity-model";

fn check_t(t: f32) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// `(1 − t)·z0 + t·ε`.
pub fn interpolate(z0: &Image, eps: &Image, t: f32) -> Result<Image> {
    check_t(t)?;
    z0.zip_map(eps, |a, e| (1.0 - t) * a + t * e)
}

/// One-step clean estimate `ẑ0 = z_t − t·v` (unclamped).
pub fn denoise_estimate(zt: &Image, t: f32, v: &Image) -> Result<Image> {
    check_t(t)?;
    zt.zip_map(v, |z, vv| z - t * vv)
}

/// `v_u + s·(v_c − v_u)`; exactly `v_c` at `s = 1`.
pub fn cfg_velocity(v_cond: &Image, v_uncond: &Image, scale: f32) -> Result<Image> {
    v_cond.check_same_shape(v_uncond)?;
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("guidance scale must be finite and >= 0, got {scale}")));
    }
    if scale == 1.0 {
        return Ok(v_cond.clone());
    }
    v_uncond.zip_map(v_cond, |u, c| u + scale * (c - u))
}

/// Interpolation state with its endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub z0: Image,
    pub eps: Image,
    pub t: f32,
    pub zt: Image,
}

impl FlowState {
    pub fn new(z0: Image, eps: Image, t: f32) -> Result<Self> {
        let zt = interpolate(&z0, &eps, t)?;
        Ok(Self { z0, eps, t, zt })
    }

    /// The rectified-flow regression target `ε − z0`.
    pub fn target_velocity(&self) -> Image {
        self.eps.zip_map(&self.z0, |e, z| e - z).expect("shapes checked at construction")
    }
}

/// Restoration conditioning: the upsampled LQ image plus an attribute
/// prompt. `attrs = None` is the unconditional branch, which resolves to
/// the all-0.5 template.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub lq_up: Image,
    pub attrs: Option<AttrVector>,
}

impl Conditioning {
    pub fn new(lq_up: Image, attrs: AttrVector) -> Self {
        Self { lq_up, attrs: Some(attrs) }
    }

    pub fn unconditional(lq_up: Image) -> Self {
        Self { lq_up, attrs: None }
    }

    pub fn resolved_attrs(&self, k: usize) -> AttrVector {
        self.attrs.clone().unwrap_or_else(|| AttrVector::template(k))
    }

    /// The same LQ with the template prompt.
    pub fn to_unconditional(&self) -> Self {
        Self::unconditional(self.lq_up.clone())
    }
}

/// Anything that maps `(z_t, t, cond)` to a velocity image.
pub trait VelocityField: Sync {
    fn velocity(&self, zt: &Image, t: f32, cond: &Conditioning) -> Result<Image>;
}

/// Guided velocity: a single conditional pass when `scale == 1` unless
/// `force_uncond` asks for the unconditional pass anyway (its result is
/// then discarded by [`cfg_velocity`]).
pub fn guided_velocity<V: VelocityField + ?Sized>(
    field: &V,
    zt: &Image,
    t: f32,
    cond: &Conditioning,
    scale: f32,
    force_uncond: bool,
) -> Result<Image> {
    let vc = field.velocity(zt, t, cond)?;
    if scale == 1.0 && !force_uncond {
        return Ok(vc);
    }
    let vu = field.velocity(zt, t, &cond.to_unconditional())?;
    cfg_velocity(&vc, &vu, scale)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f32,
    pub seed: u64,
    /// Evaluate the unconditional branch even when `cfg_scale == 1`.
    pub force_uncond: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            cfg_scale: 5.5,
            seed: 0,
            force_uncond: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid("guidance scale must be finite and >= 0"));
        }
        Ok(())
    }
}

/// The sampler's starting noise for `seed`.
pub fn initial_noise(seed: u64, shape: (usize, usize, usize)) -> Image {
    let (h, w, c) = shape;
    let mut r = rng::rng_from(rng::derive(seed, purpose::SAMPLE, 0));
    Image::from_vec(h, w, c, rng::gaussian_vec(&mut r, h * w * c)).expect("shape")
}

/// Integrates `dz/dt = v` from `t = 1` to `t = 0` on a uniform grid,
/// starting from seeded Gaussian noise; returns the clamped result.
pub fn euler_sample<V: VelocityField + ?Sized>(field: &V, cond: &Conditioning, cfg: &SamplerConfig) -> Result<Image> {
    cfg.validate()?;
    let mut z = initial_noise(cfg.seed, cond.lq_up.shape());
    let n = cfg.steps;
    for i in (1..=n).rev() {
        let t = i as f32 / n as f32;
        let t_prev = (i - 1) as f32 / n as f32;
        let v = guided_velocity(field, &z, t, cond, cfg.cfg_scale, cfg.force_uncond)?;
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("sampler velocity at step {} (t = {t})", n - i),
            });
        }
        let dt = t - t_prev;
        z = z.zip_map(&v, |zz, vv| zz - dt * vv)?;
    }
    Ok(z.clamped())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocityArch {
    pub size: usize,
    pub attrs: usize,
    /// Channel widths at full, half and quarter resolution.
    pub widths: [usize; 3],
    /// Number of sinusoidal frequencies in the time embedding.
    pub time_freqs: usize,
    pub embed_dim: usize,
}

impl Default for VelocityArch {
    fn default() -> Self {
        Self {
            size: synthgen::DEFAULT_SIZE,
            attrs: ATTR_COUNT,
            widths: [16, 32, 48],
            time_freqs: 8,
            embed_dim: 32,
        }
    }
}

impl VelocityArch {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(4) {
            return Err(Error::invalid(format!("model size {} must be a multiple of 4", self.size)));
        }
        if self.widths.contains(&0) || self.time_freqs == 0 || self.embed_dim == 0 || self.attrs == 0 {
            return Err(Error::invalid("velocity model dimensions must be positive"));
        }
        Ok(())
    }
}

/// Assumed spread of the clean image around the upsampled LQ, per pixel.
pub const LQ_RESIDUAL_STD: f64 = 0.12;

/// Skip and output scales of the velocity head at time `t`.
///
/// With `e = z0 − lq` of spread `σ` and `u = z_t − (1 − t)·lq = (1 − t)·e + t·ε`,
/// the best linear guess of the target `ε − z0` from `u` is
/// `skip·u − lq`, and what remains has standard deviation `scale`. The
/// network output is multiplied by `scale`, so it regresses a unit-variance
/// residual at every `t` and an untrained head already follows the LQ.
pub fn preconditioning<F: Real>(t: F) -> (F, F) {
    let s2 = F::lit(LQ_RESIDUAL_STD * LQ_RESIDUAL_STD);
    let one_t = F::one() - t;
    let var_u = one_t * one_t * s2 + t * t;
    ((t - one_t * s2) / var_u, F::lit(LQ_RESIDUAL_STD) / var_u.sqrt())
}

/// Small U-shaped network. Input: `z_t` and the upsampled LQ concatenated
/// on channels; time and attribute embeddings enter as per-channel biases
/// at every resolution level.
#[derive(Debug, Clone)]
pub struct VelocityNet<F> {
    pub arch: VelocityArch,
    pub params: ParamSet<F>,
    embed: Linear,
    proj: [Linear; 5],
    conv_in: Conv2d,
    down: Conv2d,
    mid1: Conv2d,
    mid2: Conv2d,
    up1: Conv2d,
    up2: Conv2d,
    conv_out: Conv2d,
}

/// Saved activations of one forward pass.
#[derive(Debug, Clone)]
pub struct VelocityPass<F> {
    pub v: Tensor<F>,
    t: Vec<F>,
    e_in: Tensor<F>,
    e_pre: Tensor<F>,
    e: Tensor<F>,
    x0: Tensor<F>,
    h1_pre: Tensor<F>,
    p1: Tensor<F>,
    h2_pre: Tensor<F>,
    p2: Tensor<F>,
    h3_pre: Tensor<F>,
    h3: Tensor<F>,
    h4_pre: Tensor<F>,
    cat1: Tensor<F>,
    h5_pre: Tensor<F>,
    cat2: Tensor<F>,
    h6_pre: Tensor<F>,
    h6: Tensor<F>,
}

impl<F: Real> VelocityNet<F> {
    pub fn new(arch: VelocityArch, seed: u64) -> Self {
        let mut r = rng::rng_from(rng::derive(seed, purpose::INIT, 2));
        let mut ps = ParamSet::new();
        let [c1, c2, c3] = arch.widths;
        let e_in = 2 * arch.time_freqs + arch.attrs;
        let embed = Linear::new(&mut ps, "vel.embed", e_in, arch.embed_dim, 2f64.sqrt(), &mut r);
        let proj = [c1, c2, c3, c2, c1]
            .iter()
            .enumerate()
            .map(|(i, &c)| Linear::new(&mut ps, &format!("vel.proj{}", i + 1), arch.embed_dim, c, 1.0, &mut r))
            .collect::<Vec<_>>()
            .try_into()
            .unwrap();
        let conv_in = Conv2d::new(&mut ps, "vel.conv_in", 6, c1, 3, &mut r);
        let down = Conv2d::new(&mut ps, "vel.down", c1, c2, 3, &mut r);
        let mid1 = Conv2d::new(&mut ps, "vel.mid1", c2, c3, 3, &mut r);
        let mid2 = Conv2d::new(&mut ps, "vel.mid2", c3, c3, 3, &mut r);
        let up1 = Conv2d::new(&mut ps, "vel.up1", c3 + c2, c2, 3, &mut r);
        let up2 = Conv2d::new(&mut ps, "vel.up2", c2 + c1, c1, 3, &mut r);
        let conv_out = Conv2d::new(&mut ps, "vel.conv_out", c1, 3, 3, &mut r);
        // Start close to the linear skip alone.
        ps.get_mut(conv_out.weight).iter_mut().for_each(|w| *w = *w * F::lit(0.1));
        Self {
            arch,
            params: ps,
            embed,
            proj,
            conv_in,
            down,
            mid1,
            mid2,
            up1,
            up2,
            conv_out,
        }
    }

    /// Time/attribute embedding input rows: sin/cos Fourier features of
    /// `t` followed by attributes mapped to `[-1, 1]`.
    fn embed_input(&self, t: &[F], attrs: &[F]) -> Tensor<F> {
        let n = t.len();
        let k = self.arch.attrs;
        let mut data = Vec::with_capacity(n * (2 * self.arch.time_freqs + k));
        for i in 0..n {
            for f in 0..self.arch.time_freqs {
                let ang = t[i] * F::lit(std::f64::consts::PI * (1u64 << f) as f64);
                data.push(ang.sin());
                data.push(ang.cos());
            }
            for j in 0..k {
                data.push(F::lit(2.0) * attrs[i * k + j] - F::one());
            }
        }
        Tensor::matrix(n, 2 * self.arch.time_freqs + k, data)
    }

    /// `zt`, `lq`: `n × 3 × S × S`; `t`: `n`; `attrs`: `n × K`.
    pub fn forward(&self, zt: &Tensor<F>, lq: &Tensor<F>, t: &[F], attrs: &[F]) -> VelocityPass<F> {
        let ps = &self.params;
        let e_in = self.embed_input(t, attrs);
        let e_pre = self.embed.forward(ps, &e_in);
        let e = silu(&e_pre);
        let b: Vec<Tensor<F>> = self.proj.iter().map(|p| p.forward(ps, &e)).collect();

        let x0 = Tensor::concat_channels(zt, lq);
        let h1_pre = add_channel_bias(&self.conv_in.forward(ps, &x0), &b[0]);
        let h1 = silu(&h1_pre);
        let p1 = avgpool2(&h1);
        let h2_pre = add_channel_bias(&self.down.forward(ps, &p1), &b[1]);
        let h2 = silu(&h2_pre);
        let p2 = avgpool2(&h2);
        let h3_pre = add_channel_bias(&self.mid1.forward(ps, &p2), &b[2]);
        let h3 = silu(&h3_pre);
        let h4_pre = self.mid2.forward(ps, &h3);
        let h4 = silu(&h4_pre);
        let cat1 = Tensor::concat_channels(&upsample2(&h4), &h2);
        let h5_pre = add_channel_bias(&self.up1.forward(ps, &cat1), &b[3]);
        let h5 = silu(&h5_pre);
        let cat2 = Tensor::concat_channels(&upsample2(&h5), &h1);
        let h6_pre = add_channel_bias(&self.up2.forward(ps, &cat2), &b[4]);
        let h6 = silu(&h6_pre);
        let out = self.conv_out.forward(ps, &h6);
        let item = out.item_len();
        let mut v = out;
        for (j, o) in v.data.iter_mut().enumerate() {
            let (skip, scale) = preconditioning(t[j / item]);
            let u = zt.data[j] - (F::one() - t[j / item]) * lq.data[j];
            *o = skip * u - lq.data[j] + scale * *o;
        }
        VelocityPass {
            v,
            t: t.to_vec(),
            e_in,
            e_pre,
            e,
            x0,
            h1_pre,
            p1,
            h2_pre,
            p2,
            h3_pre,
            h3,
            h4_pre,
            cat1,
            h5_pre,
            cat2,
            h6_pre,
            h6,
        }
    }

    /// Accumulates parameter gradients of `<dv, v>` into `grads`.
    pub fn backward(&self, pass: &VelocityPass<F>, dv: &Tensor<F>, grads: &mut ParamSet<F>) {
        let ps = &self.params;
        let [_, c2, _] = self.arch.widths;
        let mut db: Vec<Tensor<F>> = Vec::with_capacity(5);

        let item = dv.item_len();
        let mut d_out = dv.clone();
        for (j, g) in d_out.data.iter_mut().enumerate() {
            *g = *g * preconditioning(pass.t[j / item]).1;
        }
        let d_h6 = self.conv_out.backward(ps, &pass.h6, &d_out, Some(&mut *grads), true).unwrap();
        let d_h6_pre = silu_backward(&pass.h6_pre, &d_h6);
        db.push(channel_bias_grad(&d_h6_pre));
        let d_cat2 = self.up2.backward(ps, &pass.cat2, &d_h6_pre, Some(&mut *grads), true).unwrap();
        let (d_u2, d_h1_skip) = d_cat2.split_channels(c2);
        let d_h5 = upsample2_backward(&d_u2);
        let d_h5_pre = silu_backward(&pass.h5_pre, &d_h5);
        db.push(channel_bias_grad(&d_h5_pre));
        let d_cat1 = self.up1.backward(ps, &pass.cat1, &d_h5_pre, Some(&mut *grads), true).unwrap();
        let (d_u1, d_h2_skip) = d_cat1.split_channels(pass.cat1.c - c2);
        let d_h4 = upsample2_backward(&d_u1);
        let d_h4_pre = silu_backward(&pass.h4_pre, &d_h4);
        let d_h3 = self.mid2.backward(ps, &pass.h3, &d_h4_pre, Some(&mut *grads), true).unwrap();
        let d_h3_pre = silu_backward(&pass.h3_pre, &d_h3);
        db.push(channel_bias_grad(&d_h3_pre));
        let d_p2 = self.mid1.backward(ps, &pass.p2, &d_h3_pre, Some(&mut *grads), true).unwrap();
        let mut d_h2 = avgpool2_backward(&d_p2);
        d_h2.add_assign(&d_h2_skip);
        let d_h2_pre = silu_backward(&pass.h2_pre, &d_h2);
        db.push(channel_bias_grad(&d_h2_pre));
        let d_p1 = self.down.backward(ps, &pass.p1, &d_h2_pre, Some(&mut *grads), true).unwrap();
        let mut d_h1 = avgpool2_backward(&d_p1);
        d_h1.add_assign(&d_h1_skip);
        let d_h1_pre = silu_backward(&pass.h1_pre, &d_h1);
        db.push(channel_bias_grad(&d_h1_pre));
        self.conv_in.backward(ps, &pass.x0, &d_h1_pre, Some(&mut *grads), false);

        // db was collected from the output side: proj5, proj4, proj3, proj2, proj1.
        let mut d_e = pass.e.zeros_like();
        for (proj, d) in self.proj.iter().rev().zip(&db) {
            let de = proj.backward(ps, &pass.e, d, Some(&mut *grads), true).unwrap();
            d_e.add_assign(&de);
        }
        let d_e_pre = silu_backward(&pass.e_pre, &d_e);
        self.embed.backward(ps, &pass.e_in, &d_e_pre, Some(&mut *grads), false);
    }
}

/// Production velocity model (`f32`).
#[derive(Debug, Clone)]
pub struct VelocityModel {
    pub net: VelocityNet<f32>,
}

impl VelocityModel {
    pub fn new(arch: VelocityArch, seed: u64) -> Self {
        Self { net: VelocityNet::new(arch, seed) }
    }

    pub fn arch(&self) -> &VelocityArch {
        &self.net.arch
    }

    fn check(&self, img: &Image, what: &str) -> Result<()> {
        let s = self.net.arch.size;
        if img.shape() != (s, s, 3) {
            return Err(Error::ShapeMismatch {
                expected: format!("{what} {s}x{s}x3"),
                actual: format!("{:?}", img.shape()),
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(CHECKPOINT_KIND, serde_json::json!({ "arch": self.net.arch }));
        ck.push_params("param", &self.net.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: VelocityArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::format("velocity checkpoint", e))?;
        arch.validate()?;
        let mut m = Self::new(arch, 0);
        ck.read_params("param", &mut m.net.params)?;
        Ok(m)
    }
}

impl VelocityField for VelocityModel {
    fn velocity(&self, zt: &Image, t: f32, cond: &Conditioning) -> Result<Image> {
        check_t(t)?;
        self.check(zt, "z_t")?;
        self.check(&cond.lq_up, "LQ conditioning")?;
        let attrs = cond.resolved_attrs(self.net.arch.attrs);
        attrs.check_len(self.net.arch.attrs)?;
        let pass = self.net.forward(
            &Tensor::from_images(&[zt]),
            &Tensor::from_images(&[&cond.lq_up]),
            &[t],
            attrs.values(),
        );
        let v = pass.v.to_image(0);
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("velocity output at t = {t}") });
        }
        Ok(v)
    }
}
