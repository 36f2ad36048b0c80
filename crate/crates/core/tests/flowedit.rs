//! Editing ODE: vanilla equivalence, degenerate cases and batch output.

mod common;

use common::*;
use facerestore::flowcore::{VelocityArch, VelocityModel};
use facerestore::flowedit::{
    edit_batch, edit_noise, flow_edit_alpha, flow_edit_alpha_observed, EditConfig, EditSettings, EDITED_MANIFEST,
};
use facerestore::synthgen::{self, AttrVector, Manifest, ATTR_COUNT};
use facerestore::Image;
use proptest::prelude::*;

fn tiny_model(seed: u64) -> VelocityModel {
    VelocityModel::new(VelocityArch { size: 16, attrs: ATTR_COUNT, widths: [4, 4, 4], time_freqs: 2, embed_dim: 4 }, seed)
}

fn source(seed: u64) -> Image {
    uniform_image(seed, (16, 16, 3), 0.1, 0.9)
}

fn edit_cfg(x: &Image, alpha: f32, seed: u64, scale: f32) -> EditConfig {
    let src = AttrVector::template(ATTR_COUNT).with(1, 0.0);
    let settings = EditSettings { noise_blend_alpha: alpha, steps: 10, seed, cfg_scale: scale, guide_down_scale: 4, ..EditSettings::default() };
    EditConfig::for_image(x, src.clone(), src.with(1, 1.0), settings).unwrap()
}

#[test]
fn alpha_one_is_vanilla_flowedit_on_ten_seeds() {
    let m = tiny_model(4);
    let affine = AffineField { a: -0.4, b: 0.3, c: 0.2, d: 0.6 };
    for seed in 0..10u64 {
        let x = source(seed);
        for scale in [1.0, 5.5] {
            let c = edit_cfg(&x, 1.0, seed, scale);
            assert_eq!(flow_edit_alpha(&m, &x, &c).unwrap(), vanilla_flow_edit(&m, &x, &c), "seed {seed} scale {scale}");
            assert_eq!(flow_edit_alpha(&affine, &x, &c).unwrap(), vanilla_flow_edit(&affine, &x, &c));
        }
    }
}

#[test]
fn equal_conditionings_return_the_clamped_source() {
    let m = tiny_model(6);
    let mut x = source(3);
    x.set(0, 0, 0, 1.3);
    x.set(1, 0, 0, -0.2);
    let mut c = edit_cfg(&x, 0.85, 3, 5.5);
    c.tar_cond = c.src_cond.clone();
    let mut steps = 0;
    let out = flow_edit_alpha_observed(&m, &x, &c, |st| {
        assert_eq!(st.z_tar, st.z_src, "iteration {}", st.i);
        assert_eq!(st.z_fe, &x);
        steps += 1;
    })
    .unwrap();
    assert_eq!(steps, c.settings.resolved_n_max());
    assert!(max_abs_diff(&out, &x.clamped()) <= 1e-6);
}

#[test]
fn alpha_zero_uses_only_the_initial_noise() {
    let m = tiny_model(8);
    let x = source(5);
    let c = edit_cfg(&x, 0.0, 1, 5.5);
    let mut checked = 0;
    flow_edit_alpha_observed(&m, &x, &c, |st| {
        let want = x.zip_map(st.n_initial, |xv, n| (1.0 - st.t) * xv + st.t * n).unwrap();
        assert!(max_abs_diff(st.z_src, &want) <= 1e-6);
        // Fresh noise is still drawn.
        assert_eq!(st.noise, &edit_noise(1, st.i, x.shape()));
        checked += 1;
    })
    .unwrap();
    assert_eq!(checked, c.settings.resolved_n_max());
    // The fresh-noise seed then has no influence at all.
    let other = edit_cfg(&x, 0.0, 99, 5.5);
    assert_eq!(flow_edit_alpha(&m, &x, &c).unwrap(), flow_edit_alpha(&m, &x, &other).unwrap());
    assert_ne!(
        flow_edit_alpha(&m, &x, &edit_cfg(&x, 0.5, 1, 5.5)).unwrap(),
        flow_edit_alpha(&m, &x, &edit_cfg(&x, 0.5, 99, 5.5)).unwrap()
    );
}

#[test]
fn invalid_settings_are_rejected() {
    let x = source(1);
    let a = AttrVector::template(ATTR_COUNT);
    for s in [
        EditSettings { noise_blend_alpha: 1.1, ..EditSettings::default() },
        EditSettings { noise_blend_alpha: -0.1, ..EditSettings::default() },
        EditSettings { steps: 1, ..EditSettings::default() },
        EditSettings { n_max: Some(0), ..EditSettings::default() },
        EditSettings { guide_down_scale: 0, ..EditSettings::default() },
    ] {
        assert!(EditConfig::for_image(&x, a.clone(), a.clone(), s).is_err(), "{s:?}");
    }
}

#[test]
fn batch_editing_is_reproducible_and_handles_empty_manifests() {
    let corpus = tempfile::tempdir().unwrap();
    synthgen::build_corpus(4, 2, corpus.path()).unwrap();
    let manifest = Manifest::load(corpus.path()).unwrap();
    let m = VelocityModel::new(VelocityArch { widths: [4, 4, 4], ..VelocityArch::default() }, 1);
    let settings = EditSettings { steps: 4, seed: 5, ..EditSettings::default() };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = edit_batch(&m, &manifest, &settings, a.path()).unwrap();
    edit_batch(&m, &manifest, &settings, b.path()).unwrap();
    assert_eq!(ra.edited, 4);
    assert!(ra.failures.is_empty());
    for name in [EDITED_MANIFEST, "edited_000000.png", "edited_000003.png"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
    let text = std::fs::read_to_string(a.path().join(EDITED_MANIFEST)).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["id", "src_png", "edited_png", "edited_index", "target_state", "alpha", "seed"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    let empty = Manifest { dir: corpus.path().to_path_buf(), records: vec![] };
    let e = tempfile::tempdir().unwrap();
    let re = edit_batch(&m, &empty, &settings, e.path()).unwrap();
    assert_eq!(re.edited, 0);
    assert_eq!(std::fs::read_to_string(e.path().join(EDITED_MANIFEST)).unwrap(), "");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn constant_fields_follow_the_telescoping_sum(
        seed in any::<u64>(), alpha in 0.0f32..=1.0, cs in -0.3f32..0.3, ct in -0.3f32..0.3,
        steps in 2usize..40,
    ) {
        let x = uniform_image(seed, (16, 16, 3), 0.3, 0.7);
        let src = AttrVector::template(ATTR_COUNT).with(1, 0.0);
        let tar = src.with(1, 1.0);
        let field = PromptField { tar: tar.clone(), on_tar: Image::filled(16, 16, 3, ct), otherwise: Image::filled(16, 16, 3, cs) };
        let settings = EditSettings { noise_blend_alpha: alpha, steps, seed, cfg_scale: 1.0, ..EditSettings::default() };
        let c = EditConfig::for_image(&x, src, tar, settings).unwrap();
        let out = flow_edit_alpha(&field, &x, &c).unwrap();
        let t_max = settings.t(settings.resolved_n_max());
        // Σ (t_{i-1} − t_i) over the window is t_0 − t_nMax = −t_nMax.
        let sum: f32 = (1..=settings.resolved_n_max()).map(|i| settings.t(i - 1) - settings.t(i)).sum();
        prop_assert!((sum + t_max).abs() <= 1e-6);
        let want = x.map(|v| (v - t_max * (ct - cs)).clamp(0.0, 1.0));
        prop_assert!(max_abs_diff(&out, &want) <= 1e-6);
    }
}
