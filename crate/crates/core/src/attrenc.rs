//! Attribute-aware encoder: a small convolutional classifier producing
//! per-attribute confidences, a penultimate feature used by the perceptual
//! proxy, and a unit-norm identity embedding.
//!
//! Faces from the renderer are already aligned, so the detection stage of a
//! detect-then-encode pipeline is the identity map here and the encoder
//! consumes full frames.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::degrade;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::layers::{self, avgpool2, avgpool2_backward, l2_normalize, l2_normalize_backward, silu, silu_backward};
use crate::nn::{Conv2d, Linear, ParamSet, Real, RmsProp, Tensor};
use crate::rng::{self, purpose};
use crate::synthgen::{self, AttrVector, IdentityLatent, Manifest, Renderer, ATTR_COUNT};

pub const CHECKPOINT_KIND: &str = "attr-encoder";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderArch {
    pub size: usize,
    pub attrs: usize,
    pub widths: [usize; 4],
    pub feature_dim: usize,
    pub identity_dim: usize,
}

impl Default for EncoderArch {
    fn default() -> Self {
        Self {
            size: synthgen::DEFAULT_SIZE,
            attrs: ATTR_COUNT,
            widths: [16, 32, 32, 32],
            feature_dim: 64,
            identity_dim: 32,
        }
    }
}

impl EncoderArch {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(16) {
            return Err(Error::invalid(format!("encoder input size {} must be a multiple of 16", self.size)));
        }
        if self.attrs == 0 || self.feature_dim == 0 || self.identity_dim == 0 || self.widths.contains(&0) {
            return Err(Error::invalid("encoder dimensions must be positive"));
        }
        Ok(())
    }
}

/// Four conv blocks (conv, SiLU, 2×2 average pool), a dense feature layer,
/// and the attribute and identity heads.
#[derive(Debug, Clone)]
pub struct EncoderNet<F> {
    pub arch: EncoderArch,
    pub params: ParamSet<F>,
    convs: Vec<Conv2d>,
    fc: Linear,
    attr_head: Linear,
    id_hidden: Linear,
    id_out: Linear,
}

/// Forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct EncoderPass<F> {
    pub logits: Tensor<F>,
    pub probs: Tensor<F>,
    pub feature: Tensor<F>,
    pub id_emb: Tensor<F>,
    conv_in: Vec<Tensor<F>>,
    conv_pre: Vec<Tensor<F>>,
    flat: Tensor<F>,
    fc_pre: Tensor<F>,
    id_h_pre: Tensor<F>,
    id_h: Tensor<F>,
    id_raw: Tensor<F>,
}

/// Upstream gradients for [`EncoderNet::backward`].
#[derive(Debug, Default)]
pub struct EncoderGrads<'a, F> {
    pub logits: Option<&'a Tensor<F>>,
    pub feature: Option<&'a Tensor<F>>,
    pub id_emb: Option<&'a Tensor<F>>,
}

impl<F: Real> EncoderNet<F> {
    pub fn new(arch: EncoderArch, seed: u64) -> Self {
        let mut r = rng::rng_from(rng::derive(seed, purpose::INIT, 1));
        let mut ps = ParamSet::new();
        let mut cin = 3;
        let convs = arch
            .widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut ps, &format!("enc.conv{}", i + 1), cin, w, 3, &mut r);
                cin = w;
                c
            })
            .collect();
        let spatial = arch.size / 16;
        let flat = arch.widths[3] * spatial * spatial;
        let fc = Linear::new(&mut ps, "enc.fc", flat, arch.feature_dim, 2f64.sqrt(), &mut r);
        let attr_head = Linear::new(&mut ps, "enc.attr_head", arch.feature_dim, arch.attrs, 1.0, &mut r);
        let id_hidden = Linear::new(&mut ps, "enc.id_hidden", arch.feature_dim, arch.feature_dim, 2f64.sqrt(), &mut r);
        let id_out = Linear::new(&mut ps, "enc.id_out", arch.feature_dim, arch.identity_dim, 1.0, &mut r);
        Self {
            arch,
            params: ps,
            convs,
            fc,
            attr_head,
            id_hidden,
            id_out,
        }
    }

    /// Zeroes the attribute head so every confidence is exactly 0.5.
    pub fn zero_attr_head(&mut self) {
        self.params.get_mut(self.attr_head.weight).iter_mut().for_each(|v| *v = F::zero());
        self.params.get_mut(self.attr_head.bias).iter_mut().for_each(|v| *v = F::zero());
    }

    pub fn forward(&self, x: &Tensor<F>) -> EncoderPass<F> {
        let ps = &self.params;
        let mut conv_in = Vec::with_capacity(4);
        let mut conv_pre = Vec::with_capacity(4);
        let mut h = x.clone();
        for conv in &self.convs {
            let pre = conv.forward(ps, &h);
            let next = avgpool2(&silu(&pre));
            conv_in.push(h);
            conv_pre.push(pre);
            h = next;
        }
        let flat = Tensor::matrix(h.n, h.item_len(), h.data);
        let fc_pre = self.fc.forward(ps, &flat);
        let feature = silu(&fc_pre);
        let logits = self.attr_head.forward(ps, &feature);
        let probs = logits.map(layers::sigmoid);
        let id_h_pre = self.id_hidden.forward(ps, &feature);
        let id_h = silu(&id_h_pre);
        let id_raw = self.id_out.forward(ps, &id_h);
        let id_emb = l2_normalize(&id_raw);
        EncoderPass {
            logits,
            probs,
            feature,
            id_emb,
            conv_in,
            conv_pre,
            flat,
            fc_pre,
            id_h_pre,
            id_h,
            id_raw,
        }
    }

    /// Back-propagates the given upstream gradients. Parameter gradients are
    /// accumulated into `grads` when provided; the input gradient is
    /// returned when `need_dx`.
    pub fn backward(
        &self,
        pass: &EncoderPass<F>,
        up: EncoderGrads<'_, F>,
        mut grads: Option<&mut ParamSet<F>>,
        need_dx: bool,
    ) -> Option<Tensor<F>> {
        let ps = &self.params;
        let mut d_feat = match up.feature {
            Some(g) => g.clone(),
            None => pass.feature.zeros_like(),
        };
        if let Some(g) = up.logits {
            let d = self.attr_head.backward(ps, &pass.feature, g, grads.as_deref_mut(), true).unwrap();
            d_feat.add_assign(&d);
        }
        if let Some(g) = up.id_emb {
            let d_raw = l2_normalize_backward(&pass.id_raw, g);
            let d_h = self.id_out.backward(ps, &pass.id_h, &d_raw, grads.as_deref_mut(), true).unwrap();
            let d_h_pre = silu_backward(&pass.id_h_pre, &d_h);
            let d = self.id_hidden.backward(ps, &pass.feature, &d_h_pre, grads.as_deref_mut(), true).unwrap();
            d_feat.add_assign(&d);
        }
        let d_fc_pre = silu_backward(&pass.fc_pre, &d_feat);
        let d_flat = self.fc.backward(ps, &pass.flat, &d_fc_pre, grads.as_deref_mut(), true).unwrap();
        let last = pass.conv_pre.last().unwrap();
        let mut d = Tensor::from_vec(d_flat.n, last.c, last.h / 2, last.w / 2, d_flat.data);
        for i in (0..self.convs.len()).rev() {
            let d_act = avgpool2_backward(&d);
            let d_pre = silu_backward(&pass.conv_pre[i], &d_act);
            let want_dx = i > 0 || need_dx;
            d = self.convs[i].backward(ps, &pass.conv_in[i], &d_pre, grads.as_deref_mut(), want_dx)?;
        }
        Some(d)
    }

    pub fn check_input(&self, x: &Tensor<F>) -> Result<()> {
        if x.c != 3 || x.h != self.arch.size || x.w != self.arch.size {
            return Err(Error::shape(
                format!("3x{}x{}", self.arch.size, self.arch.size),
                format!("{}x{}x{}", x.c, x.h, x.w),
            ));
        }
        Ok(())
    }
}

/// Unit-norm identity descriptor.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding(pub Vec<f32>);

impl IdentityEmbedding {
    /// Cosine similarity; both sides are re-normalised so positive rescaling
    /// of either vector leaves the result unchanged.
    pub fn cosine(&self, other: &IdentityEmbedding) -> f32 {
        cosine(&self.0, &other.0)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let aa: f64 = a.iter().map(|&x| x as f64 * x as f64).sum();
    let bb: f64 = b.iter().map(|&x| x as f64 * x as f64).sum();
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    // sqrt(aa·aa) == aa exactly, so identical inputs give exactly 1.
    (dot / (aa * bb).sqrt()).clamp(-1.0, 1.0) as f32
}

/// Everything one encoder pass yields for a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoding {
    pub attrs: AttrVector,
    pub feature: Vec<f32>,
    pub identity: IdentityEmbedding,
}

/// Production encoder (`f32`) with its perceptual calibration.
#[derive(Debug, Clone)]
pub struct AttrEncoder {
    pub net: EncoderNet<f32>,
    /// Multiplier mapping raw feature distances onto the perceptual scale.
    pub percep_scale: f32,
    /// False until [`train_encoder`] (or a checkpoint) has set the weights.
    pub trained: bool,
}

impl AttrEncoder {
    pub fn untrained(arch: EncoderArch, seed: u64) -> Self {
        Self {
            net: EncoderNet::new(arch, seed),
            percep_scale: 1.0,
            trained: false,
        }
    }

    pub fn arch(&self) -> &EncoderArch {
        &self.net.arch
    }

    fn check(&self, img: &Image) -> Result<()> {
        let s = self.net.arch.size;
        if img.shape() != (s, s, 3) {
            return Err(Error::shape((s, s, 3), img.shape()));
        }
        Ok(())
    }

    /// Encodes a batch of images in one pass.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<Encoding>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        for img in images {
            self.check(img)?;
        }
        let pass = self.net.forward(&Tensor::from_images(images));
        let k = self.net.arch.attrs;
        let fd = self.net.arch.feature_dim;
        let idd = self.net.arch.identity_dim;
        (0..images.len())
            .map(|i| {
                Ok(Encoding {
                    attrs: AttrVector::new(pass.probs.data[i * k..(i + 1) * k].to_vec())?,
                    feature: pass.feature.data[i * fd..(i + 1) * fd].to_vec(),
                    identity: IdentityEmbedding(pass.id_emb.data[i * idd..(i + 1) * idd].to_vec()),
                })
            })
            .collect()
    }

    pub fn encode(&self, img: &Image) -> Result<Encoding> {
        Ok(self.encode_batch(&[img])?.remove(0))
    }

    pub fn encode_attrs(&self, img: &Image) -> Result<AttrVector> {
        Ok(self.encode(img)?.attrs)
    }

    pub fn encode_identity(&self, img: &Image) -> Result<IdentityEmbedding> {
        Ok(self.encode(img)?.identity)
    }

    /// Raw (uncalibrated) distance between L2-normalised features.
    pub fn raw_feature_distance(a: &[f32], b: &[f32]) -> f32 {
        let na = a.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        let nb = b.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
        a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f32>().sqrt()
    }

    /// Calibrated perceptual distance between two encodings.
    pub fn perceptual_distance(&self, a: &Encoding, b: &Encoding) -> f32 {
        self.percep_scale * Self::raw_feature_distance(&a.feature, &b.feature)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "arch": self.net.arch,
                "percep_scale": self.percep_scale,
                "trained": self.trained,
            }),
        );
        ck.push_params("param", &self.net.params);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(CHECKPOINT_KIND)?;
        let arch: EncoderArch = serde_json::from_value(ck.meta["arch"].clone())
            .map_err(|e| Error::format("encoder checkpoint", e))?;
        arch.validate()?;
        let mut enc = Self::untrained(arch, 0);
        ck.read_params("param", &mut enc.net.params)?;
        enc.percep_scale = ck.meta["percep_scale"].as_f64().unwrap_or(1.0) as f32;
        enc.trained = ck.meta["trained"].as_bool().unwrap_or(false);
        Ok(enc)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderTrainConfig {
    pub arch: EncoderArch,
    pub steps: usize,
    /// Identities per step; each contributes two renders.
    pub batch_identities: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Negative-pair cosine margin of the identity loss.
    pub identity_margin: f64,
    pub identity_weight: f64,
    /// Probability of blurring/noising a training view.
    pub augment_prob: f64,
    pub min_records: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            arch: EncoderArch::default(),
            steps: 900,
            batch_identities: 12,
            learning_rate: 2e-3,
            seed: 0,
            holdout_fraction: 0.1,
            identity_margin: 0.1,
            identity_weight: 1.0,
            augment_prob: 0.5,
            min_records: 1000,
        }
    }
}

impl EncoderTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.steps == 0 || self.batch_identities < 2 {
            return Err(Error::invalid("encoder training needs steps >= 1 and at least 2 identities per batch"));
        }
        if self.learning_rate.is_nan() || self.learning_rate <= 0.0 {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Held-out metrics and the loss trace of an encoder run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub train_records: usize,
    pub holdout_records: usize,
    pub attr_accuracy: f64,
    pub per_attr_accuracy: Vec<f64>,
    pub same_identity_cosine: f64,
    pub different_identity_cosine: f64,
    pub initial_loss: f64,
    pub loss_after_first_epoch: f64,
    pub final_loss: f64,
    pub percep_scale: f32,
}

/// Training/held-out split of record indices, deterministic in `seed`.
pub fn split_indices(n: usize, holdout_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut r = rng::rng_from(rng::derive(seed, purpose::ENCODER, u64::MAX));
    for i in (1..n).rev() {
        let j = r.random_range(0..=i);
        idx.swap(i, j);
    }
    let hold = ((n as f64) * holdout_fraction).round() as usize;
    let held = idx.split_off(n - hold);
    (idx, held)
}

fn random_attrs(r: &mut rng::SeededRng) -> AttrVector {
    AttrVector::new((0..ATTR_COUNT).map(|_| if r.random::<bool>() { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Mild blur/noise so the encoder tolerates imperfect restorations.
fn augment(img: &Image, r: &mut rng::SeededRng, prob: f64) -> Image {
    if r.random::<f64>() >= prob {
        return img.clone();
    }
    let sigma = r.random_range(0.3f32..1.5);
    let cfg = degrade::DegradeConfig {
        kernel: degrade::KernelKind::Gaussian,
        kernel_sigma: sigma,
        down_scale: 1,
        noise_sigma: 0.0,
        jpeg_quality: 100,
        seed: 0,
    };
    let noise = r.random_range(0.0f32..0.04);
    let mut out = degrade::blur(img, &cfg);
    for v in out.as_mut_slice() {
        *v = (*v + noise * rng::gaussian(r)).clamp(0.0, 1.0);
    }
    out
}

struct Batch {
    images: Vec<Image>,
    labels: Vec<f32>,
    /// identity group per image: images 2i and 2i+1 share an identity.
    groups: Vec<usize>,
}

fn make_batch(
    renderer: &Renderer,
    identities: &[IdentityLatent],
    pool: &[usize],
    cfg: &EncoderTrainConfig,
    step: u64,
    augment_prob: f64,
) -> Result<Batch> {
    let mut r = rng::rng_from(rng::derive(cfg.seed, purpose::ENCODER, step));
    let mut images = Vec::new();
    let mut labels = Vec::new();
    let mut groups = Vec::new();
    for g in 0..cfg.batch_identities {
        let id = &identities[pool[r.random_range(0..pool.len())]];
        for _ in 0..2 {
            let a = random_attrs(&mut r);
            let img = renderer.render(id, &a)?;
            images.push(augment(&img, &mut r, augment_prob));
            labels.extend_from_slice(a.values());
            groups.push(g);
        }
    }
    Ok(Batch { images, labels, groups })
}

/// Loss and upstream gradients for one batch.
fn batch_loss<F: Real>(
    pass: &EncoderPass<F>,
    labels: &[f32],
    groups: &[usize],
    cfg: &EncoderTrainConfig,
) -> (f64, Tensor<F>, Tensor<F>) {
    let n = groups.len();
    let k = pass.probs.item_len();
    let mut bce = 0.0;
    let mut d_logits = pass.logits.zeros_like();
    for i in 0..n * k {
        let y = labels[i] as f64;
        let z = pass.logits.data[i].to_f64().unwrap();
        // Stable BCE-with-logits.
        bce += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        let p = pass.probs.data[i].to_f64().unwrap();
        d_logits.data[i] = F::lit((p - y) / (n * k) as f64);
    }
    bce /= (n * k) as f64;

    let d = pass.id_emb.item_len();
    let emb: Vec<f64> = pass.id_emb.data.iter().map(|v| v.to_f64().unwrap()).collect();
    let mut d_emb = vec![0.0f64; n * d];
    let (mut pos_loss, mut neg_loss, mut n_pos, mut n_neg) = (0.0, 0.0, 0usize, 0usize);
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let c: f64 = (0..d).map(|t| emb[i * d + t] * emb[j * d + t]).sum();
            let same = groups[i] == groups[j];
            if same {
                n_pos += 1;
                pos_loss += 1.0 - c;
            } else {
                n_neg += 1;
                neg_loss += (c - cfg.identity_margin).max(0.0);
            }
            pairs.push((i, j, c, same));
        }
    }
    for (i, j, c, same) in pairs {
        // d(cos)/d(emb_i) = emb_j on the unit sphere; the l2-normalisation
        // backward projects out the radial component.
        let g = if same {
            -1.0 / n_pos as f64
        } else if c > cfg.identity_margin {
            1.0 / n_neg as f64
        } else {
            0.0
        } * cfg.identity_weight;
        if g != 0.0 {
            for t in 0..d {
                d_emb[i * d + t] += g * emb[j * d + t];
                d_emb[j * d + t] += g * emb[i * d + t];
            }
        }
    }
    let id_loss = pos_loss / n_pos.max(1) as f64 + neg_loss / n_neg.max(1) as f64;
    let total = bce + cfg.identity_weight * id_loss;
    let d_emb = Tensor::matrix(n, d, d_emb.into_iter().map(F::lit).collect());
    (total, d_logits, d_emb)
}

/// Trains the encoder on renders of the manifest's identities with
/// ground-truth attribute labels, then measures held-out accuracy, identity
/// separation, and calibrates the perceptual scale.
pub fn train_encoder(corpus: &Manifest, cfg: &EncoderTrainConfig) -> Result<(AttrEncoder, EncoderReport)> {
    cfg.validate()?;
    if corpus.len() < cfg.min_records {
        return Err(Error::InsufficientData(format!(
            "encoder training needs at least {} records, corpus has {}",
            cfg.min_records,
            corpus.len()
        )));
    }
    let renderer = Renderer::new(cfg.arch.size)?;
    let identities: Vec<IdentityLatent> = corpus
        .records
        .iter()
        .map(|r| IdentityLatent::new(r.identity.clone()))
        .collect::<Result<_>>()?;
    let (train_idx, hold_idx) = split_indices(corpus.len(), cfg.holdout_fraction, cfg.seed);
    if train_idx.len() < 2 {
        return Err(Error::InsufficientData("fewer than two training identities".into()));
    }

    let mut enc = AttrEncoder::untrained(cfg.arch, cfg.seed);
    let mut opt = RmsProp::new(&enc.net.params, cfg.learning_rate);
    let mut grads = enc.net.params.zeros_like();

    // Fixed probe batch for the loss trace.
    let probe = make_batch(&renderer, &identities, &train_idx, cfg, u64::MAX - 1, 0.0)?;
    let probe_refs: Vec<&Image> = probe.images.iter().collect();
    let probe_x = Tensor::from_images(&probe_refs);
    let probe_loss = |net: &EncoderNet<f32>| -> f64 {
        let pass = net.forward(&probe_x);
        batch_loss(&pass, &probe.labels, &probe.groups, cfg).0
    };
    let initial_loss = probe_loss(&enc.net);
    let epoch_steps = (train_idx.len() / cfg.batch_identities).max(1);
    let mut loss_after_first_epoch = f64::NAN;

    for step in 0..cfg.steps {
        let batch = make_batch(&renderer, &identities, &train_idx, cfg, step as u64, cfg.augment_prob)?;
        let refs: Vec<&Image> = batch.images.iter().collect();
        let x = Tensor::from_images(&refs);
        let pass = enc.net.forward(&x);
        let (loss, d_logits, d_emb) = batch_loss(&pass, &batch.labels, &batch.groups, cfg);
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("encoder loss at step {step} (last finite probe loss {initial_loss:.4})"),
            });
        }
        grads.fill_zero();
        enc.net.backward(
            &pass,
            EncoderGrads {
                logits: Some(&d_logits),
                id_emb: Some(&d_emb),
                feature: None,
            },
            Some(&mut grads),
            false,
        );
        opt.apply(&mut enc.net.params, &grads);
        if step + 1 == epoch_steps {
            loss_after_first_epoch = probe_loss(&enc.net);
        }
    }
    if loss_after_first_epoch.is_nan() {
        loss_after_first_epoch = probe_loss(&enc.net);
    }
    let final_loss = probe_loss(&enc.net);
    enc.trained = true;

    // Perceptual calibration on training pairs: median distance -> 0.2.
    let calib: Vec<usize> = train_idx.iter().copied().take(200).collect();
    let mut dists = Vec::with_capacity(calib.len());
    for &i in &calib {
        let r = &corpus.records[i];
        let id = &identities[i];
        let a = renderer.render(id, &AttrVector::new(r.src_attrs.clone())?)?;
        let b = renderer.render(id, &AttrVector::new(r.tar_attrs.clone())?)?;
        let e = enc.encode_batch(&[&a, &b])?;
        dists.push(AttrEncoder::raw_feature_distance(&e[0].feature, &e[1].feature));
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let median = dists[dists.len() / 2].max(1e-6);
    enc.percep_scale = 0.2 / median;

    let report = evaluate_encoder(&enc, &renderer, corpus, &identities, &hold_idx, cfg.seed)?;
    Ok((
        enc.clone(),
        EncoderReport {
            train_records: train_idx.len(),
            holdout_records: hold_idx.len(),
            initial_loss,
            loss_after_first_epoch,
            final_loss,
            percep_scale: enc.percep_scale,
            ..report
        },
    ))
}

/// Held-out attribute accuracy and identity separation.
fn evaluate_encoder(
    enc: &AttrEncoder,
    renderer: &Renderer,
    corpus: &Manifest,
    identities: &[IdentityLatent],
    hold: &[usize],
    seed: u64,
) -> Result<EncoderReport> {
    let k = enc.arch().attrs;
    let mut correct = vec![0usize; k];
    let mut total = 0usize;
    let mut same = Vec::new();
    let mut diff = Vec::new();
    let mut r = rng::rng_from(rng::derive(seed, purpose::ENCODER, u64::MAX - 2));
    let mut prev: Option<IdentityEmbedding> = None;
    for &i in hold {
        let rec = &corpus.records[i];
        let src = AttrVector::new(rec.src_attrs.clone())?;
        let tar = AttrVector::new(rec.tar_attrs.clone())?;
        let a = renderer.render(&identities[i], &src)?;
        let b = renderer.render(&identities[i], &tar)?;
        let other = random_attrs(&mut r);
        let c = renderer.render(&identities[i], &other)?;
        let enc_out = enc.encode_batch(&[&a, &b, &c])?;
        for (e, truth) in enc_out.iter().zip([&src, &tar, &other]) {
            total += 1;
            for (j, cnt) in correct.iter_mut().enumerate() {
                if e.attrs.present(j) == truth.present(j) {
                    *cnt += 1;
                }
            }
        }
        same.push(enc_out[0].identity.cosine(&enc_out[2].identity) as f64);
        if let Some(p) = &prev {
            diff.push(enc_out[0].identity.cosine(p) as f64);
        }
        prev = Some(enc_out[0].identity.clone());
    }
    let per: Vec<f64> = correct.iter().map(|&c| c as f64 / total.max(1) as f64).collect();
    let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
    Ok(EncoderReport {
        train_records: 0,
        holdout_records: hold.len(),
        attr_accuracy: mean(&per),
        per_attr_accuracy: per,
        same_identity_cosine: mean(&same),
        different_identity_cosine: mean(&diff),
        initial_loss: f64::NAN,
        loss_after_first_epoch: f64::NAN,
        final_loss: f64::NAN,
        percep_scale: enc.percep_scale,
    })
}
