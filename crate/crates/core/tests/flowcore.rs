//! Rectified-flow primitives, sampler oracles and model properties.

mod common;

use common::*;
use facerestore::checkpoint::Checkpoint;
use facerestore::flowcore::{
    self, cfg_velocity, denoise_estimate, euler_sample, initial_noise, interpolate, Conditioning, FlowState,
    SamplerConfig, VelocityArch, VelocityField, VelocityModel, VelocityNet,
};
use facerestore::losses::{evaluate_objective, LossWeights, ObjectiveBatch};
use facerestore::nn::Tensor;
use facerestore::synthgen::{AttrVector, ATTR_COUNT};
use facerestore::Image;
use proptest::prelude::*;

const S: (usize, usize, usize) = (8, 8, 3);

#[test]
fn constant_examples() {
    let z0 = Image::filled(4, 4, 3, 0.2);
    let eps = Image::filled(4, 4, 3, 0.8);
    assert!(interpolate(&z0, &eps, 0.5).unwrap().as_slice().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    let zt = Image::filled(4, 4, 3, 0.7);
    let v = Image::filled(4, 4, 3, 0.4);
    assert!(denoise_estimate(&zt, 0.5, &v).unwrap().as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-7));
    let out = cfg_velocity(&Image::filled(4, 4, 3, 1.0), &Image::zeros(4, 4, 3), 5.5).unwrap();
    assert!(out.as_slice().iter().all(|&x| x == 5.5));
    assert!(interpolate(&z0, &eps, 1.5).is_err());
    assert!(interpolate(&z0, &Image::zeros(4, 5, 3), 0.5).is_err());
}

#[test]
fn zero_field_returns_clamped_noise() {
    let cond = Conditioning::unconditional(Image::zeros(8, 8, 3));
    let cfg = SamplerConfig { steps: 7, seed: 3, ..SamplerConfig::default() };
    let out = euler_sample(&ConstField(Image::zeros(8, 8, 3)), &cond, &cfg).unwrap();
    assert_eq!(out, initial_noise(3, S).clamped());
}

#[test]
fn sampler_rejects_zero_steps() {
    let cond = Conditioning::unconditional(Image::zeros(8, 8, 3));
    let cfg = SamplerConfig { steps: 0, ..SamplerConfig::default() };
    assert!(euler_sample(&ConstField(Image::zeros(8, 8, 3)), &cond, &cfg).is_err());
}

fn tiny_model() -> VelocityModel {
    VelocityModel::new(VelocityArch { size: 16, attrs: ATTR_COUNT, widths: [4, 4, 4], time_freqs: 2, embed_dim: 4 }, 5)
}

#[test]
fn guidance_scale_one_ignores_the_unconditional_branch() {
    let m = tiny_model();
    let lq = uniform_image(1, (16, 16, 3), 0.0, 1.0);
    let cond = Conditioning::new(lq, AttrVector::template(ATTR_COUNT).with(0, 1.0));
    let base = SamplerConfig { steps: 5, cfg_scale: 1.0, seed: 8, force_uncond: false };
    let a = euler_sample(&m, &cond, &base).unwrap();
    let b = euler_sample(&m, &cond, &SamplerConfig { force_uncond: true, ..base }).unwrap();
    assert_eq!(a, b);
    assert_eq!(a, euler_sample(&m, &cond, &base).unwrap());
    assert_ne!(a, euler_sample(&m, &cond, &SamplerConfig { seed: 9, ..base }).unwrap());
}

#[test]
fn unconditional_is_the_template_prompt() {
    let m = tiny_model();
    let lq = uniform_image(2, (16, 16, 3), 0.0, 1.0);
    let zt = gaussian_image(3, (16, 16, 3));
    let u = m.velocity(&zt, 0.4, &Conditioning::unconditional(lq.clone())).unwrap();
    let t = m.velocity(&zt, 0.4, &Conditioning::new(lq, AttrVector::template(ATTR_COUNT))).unwrap();
    assert_eq!(u, t);
}

#[test]
fn model_rejects_wrong_shapes_and_attribute_counts() {
    let m = tiny_model();
    let zt = Image::zeros(16, 16, 3);
    assert!(m.velocity(&Image::zeros(8, 8, 3), 0.5, &Conditioning::unconditional(zt.clone())).is_err());
    let bad = Conditioning::new(zt.clone(), AttrVector::new(vec![0.5; 5]).unwrap());
    assert!(m.velocity(&zt, 0.5, &bad).is_err());
}

#[test]
fn checkpoint_file_roundtrip_is_exact() {
    let m = tiny_model();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    m.to_checkpoint().save(&p).unwrap();
    let back = VelocityModel::from_checkpoint(&Checkpoint::load(&p).unwrap()).unwrap();
    let zt = gaussian_image(4, (16, 16, 3));
    let cond = Conditioning::new(uniform_image(5, (16, 16, 3), 0.0, 1.0), AttrVector::template(ATTR_COUNT));
    assert_eq!(m.velocity(&zt, 0.7, &cond).unwrap(), back.velocity(&zt, 0.7, &cond).unwrap());
    assert_eq!(std::fs::read(&p).unwrap(), back.to_checkpoint().to_bytes().unwrap());
}

#[test]
fn flow_loss_gradient_matches_finite_differences() {
    let arch = micro_velocity_arch(8);
    let mut net = VelocityNet::<f64>::new(arch, 21);
    assert!(net.params.numel() <= 500, "{} parameters", net.params.numel());
    let full = micro_batch(4, 8, 0.6);
    let batch = ObjectiveBatch { attr_active: vec![false, false], pairs: vec![], ..full };
    let w = LossWeights::default();
    let grads = evaluate_objective(&net, None, &batch, &w, true).unwrap().1.unwrap();
    let h = 1e-5;
    for i in 0..net.params.numel() {
        let x = net.params.flat_get(i);
        net.params.flat_set(i, x + h);
        let up = evaluate_objective(&net, None, &batch, &w, false).unwrap().0.total;
        net.params.flat_set(i, x - h);
        let down = evaluate_objective(&net, None, &batch, &w, false).unwrap().0.total;
        net.params.flat_set(i, x);
        let fd = (up - down) / (2.0 * h);
        let an = grads.flat_get(i);
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
        assert!(rel <= 1e-4, "param {i}: analytic {an} vs fd {fd}");
    }
}

#[test]
fn network_output_keeps_input_shape() {
    for size in [8, 16, 32] {
        let arch = VelocityArch { size, ..micro_velocity_arch(size) };
        let net = VelocityNet::<f32>::new(arch, 1);
        let x = Tensor::from_vec(3, 3, size, size, vec![0.25; 3 * 3 * size * size]);
        let v = net.forward(&x, &x, &[0.1, 0.5, 0.9], &[0.5; 3 * ATTR_COUNT]).v;
        assert_eq!(v.shape(), x.shape());
        assert!(v.all_finite());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn interpolation_matches_formula_and_endpoints(seed in any::<u64>(), t in 0.0f32..=1.0) {
        let z0 = uniform_image(seed, S, 0.0, 1.0);
        let eps = gaussian_image(seed ^ 1, S);
        let st = FlowState::new(z0.clone(), eps.clone(), t).unwrap();
        for ((&zt, &a), &e) in st.zt.as_slice().iter().zip(z0.as_slice()).zip(eps.as_slice()) {
            prop_assert!((zt - ((1.0 - t) * a + t * e)).abs() <= 1e-6);
        }
        prop_assert_eq!(interpolate(&z0, &eps, 0.0).unwrap(), z0.clone());
        prop_assert_eq!(interpolate(&z0, &eps, 1.0).unwrap(), eps.clone());
        // The exact target velocity recovers z0 in one step.
        let back = denoise_estimate(&st.zt, t, &st.target_velocity()).unwrap();
        prop_assert!(max_abs_diff(&back, &z0) <= 1e-6);
        prop_assert_eq!(denoise_estimate(&st.zt, 0.0, &eps).unwrap(), st.zt.clone());
    }

    #[test]
    fn guidance_blend_degenerates_at_zero_and_one(seed in any::<u64>(), s in 0.0f32..10.0) {
        let c = gaussian_image(seed, S);
        let u = gaussian_image(seed ^ 2, S);
        prop_assert_eq!(cfg_velocity(&c, &u, 1.0).unwrap(), c.clone());
        prop_assert_eq!(cfg_velocity(&c, &u, 0.0).unwrap(), u.clone());
        let out = cfg_velocity(&c, &u, s).unwrap();
        for ((&o, &cc), &uu) in out.as_slice().iter().zip(c.as_slice()).zip(u.as_slice()) {
            prop_assert!((o - (uu + s * (cc - uu))).abs() <= 1e-5);
        }
    }

    #[test]
    fn euler_is_exact_on_straight_paths(seed in any::<u64>(), steps in 1usize..40) {
        // Start the line at the sampler's own noise so the oracle is z0*.
        let eps = initial_noise(seed, S);
        let z0 = uniform_image(seed ^ 3, S, 0.05, 0.95);
        let field = ConstField(eps.zip_map(&z0, |e, z| e - z).unwrap());
        let cond = Conditioning::unconditional(Image::zeros(8, 8, 3));
        let cfg = SamplerConfig { steps, seed, cfg_scale: 1.0, force_uncond: false };
        let out = euler_sample(&field, &cond, &cfg).unwrap();
        prop_assert!(max_abs_diff(&out, &z0) <= 1e-5, "{}", max_abs_diff(&out, &z0));
        prop_assert_eq!(out.shape(), S);
    }

    #[test]
    fn sampler_is_deterministic(seed in any::<u64>()) {
        let field = AffineField { a: -0.3, b: 0.2, c: 0.1, d: 0.05 };
        let cond = Conditioning::new(uniform_image(seed, S, 0.0, 1.0), AttrVector::template(ATTR_COUNT).with(0, 1.0));
        let cfg = SamplerConfig { steps: 6, seed, ..SamplerConfig::default() };
        prop_assert_eq!(euler_sample(&field, &cond, &cfg).unwrap(), euler_sample(&field, &cond, &cfg).unwrap());
        prop_assert_eq!(flowcore::initial_noise(seed, S), initial_noise(seed, S));
    }
}
