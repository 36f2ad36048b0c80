//! Inversion-free flow editing with a noise blend.
//!
//! Pass 1 integrates the source-prompt velocity from `X_src` over the
//! editing window to obtain a structured noise map `N_initial`. Pass 2 runs
//! the usual difference-of-velocities ODE, but builds each noisy source
//! state from a blend `α·N_{t_i} + (1 − α)·N_initial` of fresh noise and
//! that map. At `α = 1` the blend is plain fresh noise and the method
//! reduces to vanilla FlowEdit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade;
use crate::error::{Error, Result};
use crate::flowcore::{guided_velocity, Conditioning, VelocityField};
use crate::image::Image;
use crate::par;
use crate::rng::{self, purpose};
use crate::synthgen::{self, AttrVector, Manifest};

/// Serializable editing parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditSettings {
    /// Weight of fresh noise against `N_initial`.
    pub noise_blend_alpha: f32,
    /// Number of grid intervals `T`.
    pub steps: usize,
    /// Index of the first editing step; `None` means `⌈0.9·T⌉`.
    pub n_max: Option<usize>,
    pub seed: u64,
    pub cfg_scale: f32,
    /// Downsampling ratio of the coarse guide given to the model as its LQ
    /// input while editing.
    pub guide_down_scale: usize,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            noise_blend_alpha: 0.85,
            steps: 28,
            n_max: None,
            seed: 0,
            cfg_scale: 5.5,
            guide_down_scale: 8,
        }
    }
}

impl EditSettings {
    pub fn resolved_n_max(&self) -> usize {
        self.n_max.unwrap_or_else(|| (0.9 * self.steps as f64).ceil() as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(Error::invalid(format!("edit needs at least 2 steps, got {}", self.steps)));
        }
        let n = self.resolved_n_max();
        if n < 1 || n > self.steps {
            return Err(Error::invalid(format!("n_max {n} must lie in [1, {}]", self.steps)));
        }
        if !(0.0..=1.0).contains(&self.noise_blend_alpha) {
            return Err(Error::invalid(format!("noise_blend_alpha {} outside [0, 1]", self.noise_blend_alpha)));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::invalid("cfg_scale must be finite and >= 0"));
        }
        if self.guide_down_scale == 0 {
            return Err(Error::invalid("guide_down_scale must be at least 1"));
        }
        Ok(())
    }

    /// Grid time `t_i = i / T`.
    pub fn t(&self, i: usize) -> f32 {
        i as f32 / self.steps as f32
    }
}

/// One edit: parameters plus the source and target conditionings.
#[derive(Debug, Clone, PartialEq)]
pub struct EditConfig {
    pub settings: EditSettings,
    pub src_cond: Conditioning,
    pub tar_cond: Conditioning,
}

impl EditConfig {
    /// Conditionings built from attribute prompts, with the coarse guide of
    /// `x_src` as the shared LQ input.
    pub fn for_image(x_src: &Image, src_attrs: AttrVector, tar_attrs: AttrVector, settings: EditSettings) -> Result<Self> {
        settings.validate()?;
        let g = guide(x_src, settings.guide_down_scale)?;
        Ok(Self {
            settings,
            src_cond: Conditioning::new(g.clone(), src_attrs),
            tar_cond: Conditioning::new(g, tar_attrs),
        })
    }
}

/// Area-downsampled then bilinearly upsampled copy of `x`: the structure an
/// LQ input would carry, without blur, noise or compression.
pub fn guide(x: &Image, r: usize) -> Result<Image> {
    let (h, w, _) = x.shape();
    degrade::upsample_to_model_res(&degrade::area_downsample(x, r)?, h, w)
}

/// Fresh noise `N_{t_i}` for iteration `i`: a counter-based stream, so
/// sweeps over `α` see identical draws.
pub fn edit_noise(seed: u64, i: usize, shape: (usize, usize, usize)) -> Image {
    let (h, w, c) = shape;
    let mut r = rng::rng_from(rng::derive(seed, purpose::EDIT, i as u64));
    Image::from_vec(h, w, c, rng::gaussian_vec(&mut r, h * w * c)).expect("shape")
}

/// State of one Pass-2 iteration, for instrumentation.
#[derive(Debug, Clone)]
pub struct EditStep<'a> {
    pub i: usize,
    pub t: f32,
    pub noise: &'a Image,
    pub n_initial: &'a Image,
    pub z_src: &'a Image,
    pub z_tar: &'a Image,
    pub z_fe: &'a Image,
}

fn check_finite(img: &Image, what: &str, i: usize) -> Result<()> {
    if img.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("{what} at edit iteration {i}") })
    }
}

/// Runs the edit and returns the clamped result.
pub fn flow_edit_alpha<V: VelocityField + ?Sized>(model: &V, x_src: &Image, cfg: &EditConfig) -> Result<Image> {
    flow_edit_alpha_observed(model, x_src, cfg, |_| {})
}

/// [`flow_edit_alpha`] with a callback after every Pass-2 iteration.
pub fn flow_edit_alpha_observed<V: VelocityField + ?Sized>(
    model: &V,
    x_src: &Image,
    cfg: &EditConfig,
    mut observe: impl FnMut(&EditStep<'_>),
) -> Result<Image> {
    let s = &cfg.settings;
    s.validate()?;
    let n_max = s.resolved_n_max();
    let scale = s.cfg_scale;

    // Pass 1: N_initial.
    let mut z = x_src.clone();
    for i in (1..=n_max).rev() {
        let (t, t_prev) = (s.t(i), s.t(i - 1));
        let v = guided_velocity(model, &z, t, &cfg.src_cond, scale, false)?;
        z = z.zip_map(&v, |zz, vv| zz - (t_prev - t) * vv)?;
        check_finite(&z, "inversion state", i)?;
    }
    let n_initial = z;

    // Pass 2.
    let alpha = s.noise_blend_alpha;
    let mut z_fe = x_src.clone();
    for i in (1..=n_max).rev() {
        let (t, t_prev) = (s.t(i), s.t(i - 1));
        let noise = edit_noise(s.seed, i, x_src.shape());
        let mut z_src = x_src.zip_map(&noise, |x, n| (1.0 - t) * x + (alpha * t) * n)?;
        z_src = z_src.zip_map(&n_initial, |a, ni| a + ((1.0 - alpha) * t) * ni)?;
        // Z_tar = Z_FE + Z_src − X_src, grouped so that Z_FE = X_src gives
        // Z_tar = Z_src exactly.
        let offset = z_fe.zip_map(x_src, |f, x| f - x)?;
        let z_tar = z_src.zip_map(&offset, |a, o| a + o)?;
        let v_tar = guided_velocity(model, &z_tar, t, &cfg.tar_cond, scale, false)?;
        let v_src = guided_velocity(model, &z_src, t, &cfg.src_cond, scale, false)?;
        let v_delta = v_tar.zip_map(&v_src, |a, b| a - b)?;
        z_fe = z_fe.zip_map(&v_delta, |f, d| f + (t_prev - t) * d)?;
        check_finite(&z_fe, "edit state", i)?;
        observe(&EditStep { i, t, noise: &noise, n_initial: &n_initial, z_src: &z_src, z_tar: &z_tar, z_fe: &z_fe });
    }
    Ok(z_fe.clamped())
}

/// One line of an edited manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditedRecord {
    pub id: String,
    pub src_png: String,
    pub edited_png: String,
    pub edited_index: usize,
    pub target_state: u8,
    pub alpha: f32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditFailure {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditBatchReport {
    /// Edited manifest, relative to the output directory.
    pub manifest_path: PathBuf,
    pub edited: usize,
    pub failures: Vec<EditFailure>,
}

pub const EDITED_MANIFEST: &str = "edited.jsonl";

/// Seed of the edit of record `index`.
pub fn record_seed(seed: u64, index: usize) -> u64 {
    rng::derive(seed, purpose::EDIT, index as u64 + (1 << 32))
}

/// Edits the source image of every record toward its target prompt and
/// writes the edited PNGs plus an edited manifest to `out_dir`. Per-record
/// failures are collected rather than aborting the batch.
pub fn edit_batch<V: VelocityField + ?Sized>(
    model: &V,
    manifest: &Manifest,
    settings: &EditSettings,
    out_dir: &Path,
) -> Result<EditBatchReport> {
    settings.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = par::map_range(manifest.len(), |i| -> Result<EditedRecord> {
        let rec = &manifest.records[i];
        let pair = manifest.load_pair(i)?;
        let seed = record_seed(settings.seed, i);
        let s = EditSettings { seed, ..*settings };
        let cfg = EditConfig::for_image(&pair.src_image, pair.src_attrs.clone(), pair.tar_attrs.clone(), s)?;
        let out = flow_edit_alpha(model, &pair.src_image, &cfg)?;
        let name = format!("edited_{i:06}.png");
        out.save_png(&out_dir.join(&name))?;
        Ok(EditedRecord {
            id: rec.id.clone(),
            src_png: manifest.dir.join(&rec.src_png).to_string_lossy().into_owned(),
            edited_png: name,
            edited_index: pair.edited_index,
            target_state: pair.tar_attrs.present(pair.edited_index) as u8,
            alpha: settings.noise_blend_alpha,
            seed,
        })
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(rec) => records.push(rec),
            Err(e) => failures.push(EditFailure { id: manifest.records[i].id.clone(), error: e.to_string() }),
        }
    }
    synthgen::write_jsonl(&out_dir.join(EDITED_MANIFEST), &records)?;
    let manifest_path = PathBuf::from(EDITED_MANIFEST);
    Ok(EditBatchReport { manifest_path, edited: records.len(), failures })
}
