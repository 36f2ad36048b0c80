//! Training objectives: the flow-matching regression, the attribute BCE on
//! the decoded one-step estimate, their weighted sum, the margin hinge
//! between the two prompt branches, and the combined dual-branch total.
//!
//! Scalar losses are computed in `f64`. [`evaluate_objective`] runs the
//! whole chain `v → ẑ0 → clamp → encoder → BCE / hinge` for a batch and
//! returns exact parameter gradients of the velocity network.

use serde::{Deserialize, Serialize};

use crate::attrenc::{AttrEncoder, EncoderGrads, EncoderNet};
use crate::error::{Error, Result};
use crate::flowcore::VelocityNet;
use crate::image::Image;
use crate::nn::layers::sigmoid;
use crate::nn::{ParamSet, Real, Tensor};

/// Lower/upper clamp applied to soft BCE targets.
pub const TARGET_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the attribute loss.
    pub lambda_attr: f64,
    /// Weight of the dual hinge.
    pub dual_weight_alpha: f64,
    /// Hinge margin on the confidence gap.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_attr: 0.2,
            dual_weight_alpha: 0.2,
            margin: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_attr.is_finite() && self.lambda_attr >= 0.0) {
            return Err(Error::invalid(format!("lambda_attr must be finite and >= 0, got {}", self.lambda_attr)));
        }
        if !(self.dual_weight_alpha.is_finite() && self.dual_weight_alpha >= 0.0) {
            return Err(Error::invalid(format!(
                "dual_weight_alpha must be finite and >= 0, got {}",
                self.dual_weight_alpha
            )));
        }
        if !(self.margin > 0.0 && self.margin <= 1.0) {
            return Err(Error::invalid(format!("margin must lie in (0, 1], got {}", self.margin)));
        }
        Ok(())
    }
}

fn finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { context: format!("{name} = {v}") })
    }
}

/// Mean of `(v − (ε − z0))²` over all elements.
pub fn flow_loss(v_pred: &Image, z0: &Image, eps: &Image) -> Result<f64> {
    v_pred.check_same_shape(z0)?;
    v_pred.check_same_shape(eps)?;
    let n = v_pred.len() as f64;
    let s: f64 = v_pred
        .as_slice()
        .iter()
        .zip(z0.as_slice().iter().zip(eps.as_slice()))
        .map(|(&v, (&z, &e))| {
            let d = v as f64 - (e as f64 - z as f64);
            d * d
        })
        .sum();
    Ok(s / n)
}

fn clamp_target(y: f64) -> f64 {
    y.clamp(TARGET_CLAMP, 1.0 - TARGET_CLAMP)
}

/// Numerically stable `ln(1 + e^z)`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean binary cross-entropy of `sigmoid(logits)` against clamped soft
/// targets, evaluated in logit form.
pub fn bce_with_logits(logits: &[f64], targets: &[f64]) -> Result<f64> {
    if logits.len() != targets.len() || logits.is_empty() {
        return Err(Error::shape(targets.len(), logits.len()));
    }
    let s: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| {
            let y = clamp_target(y);
            softplus(z) - y * z
        })
        .sum();
    Ok(s / logits.len() as f64)
}

/// Gradient of [`bce_with_logits`] with respect to each logit.
pub fn bce_with_logits_grad(logits: &[f64], targets: &[f64]) -> Vec<f64> {
    let k = logits.len() as f64;
    logits
        .iter()
        .zip(targets)
        .map(|(&z, &y)| (sigmoid(z) - clamp_target(y)) / k)
        .collect()
}

/// Attribute loss of a decoded estimate against the encoder's reading of
/// the ground truth. `pred` is clamped to `[0, 1]` before encoding; the
/// ground-truth confidences are constants.
pub fn attr_loss(enc: &AttrEncoder, pred: &Image, gt: &Image) -> Result<f64> {
    let s = enc.arch().size;
    for img in [pred, gt] {
        if img.shape() != (s, s, 3) {
            return Err(Error::shape((s, s, 3), img.shape()));
        }
    }
    let pred = pred.clamped();
    let pass = enc.net.forward(&Tensor::from_images(&[&pred, gt]));
    let k = enc.arch().attrs;
    let logits: Vec<f64> = pass.logits.data[..k].iter().map(|&v| v as f64).collect();
    let targets: Vec<f64> = pass.probs.data[k..2 * k].iter().map(|&v| v as f64).collect();
    bce_with_logits(&logits, &targets)
}

/// `l_diff + λ·l_attr`.
pub fn aal_loss(l_diff: f64, l_attr: f64, w: &LossWeights) -> Result<f64> {
    finite("l_diff", l_diff)?;
    finite("l_attr", l_attr)?;
    Ok(l_diff + w.lambda_attr * l_attr)
}

fn check_margin(m: f64) -> Result<()> {
    if !(m > 0.0 && m.is_finite()) {
        return Err(Error::invalid(format!("margin must be > 0, got {m}")));
    }
    Ok(())
}

/// `max(0, m − |a_tar − a_src|)`.
pub fn dual_loss(a_src: f64, a_tar: f64, m: f64) -> Result<f64> {
    check_margin(m)?;
    finite("a_src", a_src)?;
    finite("a_tar", a_tar)?;
    Ok((m - (a_tar - a_src).abs()).max(0.0))
}

/// Subgradient `(∂/∂a_src, ∂/∂a_tar)` of [`dual_loss`]; zero when the hinge
/// is inactive or the gap is exactly zero.
pub fn dual_loss_grad(a_src: f64, a_tar: f64, m: f64) -> (f64, f64) {
    let gap = a_tar - a_src;
    if m - gap.abs() <= 0.0 || gap == 0.0 {
        return (0.0, 0.0);
    }
    let s = gap.signum();
    (s, -s)
}

/// Encoder confidence of attribute `edited_index` on `img`.
pub fn extract_edited_score(enc: &AttrEncoder, img: &Image, edited_index: usize) -> Result<f64> {
    let k = enc.arch().attrs;
    if edited_index >= k {
        return Err(Error::IndexOutOfRange { index: edited_index, len: k });
    }
    Ok(enc.encode_attrs(img)?.get(edited_index) as f64)
}

/// `aal_src + aal_tar + α·l_dual`.
pub fn total_loss(aal_src: f64, aal_tar: f64, l_dual: f64, w: &LossWeights) -> Result<f64> {
    finite("aal_src", aal_src)?;
    finite("aal_tar", aal_tar)?;
    finite("l_dual", l_dual)?;
    Ok(aal_src + aal_tar + w.dual_weight_alpha * l_dual)
}

/// A source/target item pair of a batch coupled by the dual hinge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualPair {
    pub src: usize,
    pub tar: usize,
    pub edited_index: usize,
}

/// One optimisation batch of `n` items.
#[derive(Debug, Clone)]
pub struct ObjectiveBatch<F> {
    /// Clean targets, `n × 3 × S × S`.
    pub z0: Tensor<F>,
    pub eps: Tensor<F>,
    /// Upsampled LQ conditioning.
    pub lq: Tensor<F>,
    pub t: Vec<F>,
    /// Attribute conditioning fed to the network, `n × K`.
    pub attrs: Vec<F>,
    /// Encoder confidences of the ground truth, `n × K`.
    pub gt_probs: Vec<F>,
    /// Per-item switch for the attribute loss.
    pub attr_active: Vec<bool>,
    pub pairs: Vec<DualPair>,
    /// The summed objective is divided by this (the batch size).
    pub norm: f64,
}

impl<F: Real> ObjectiveBatch<F> {
    fn validate(&self, k: usize) -> Result<()> {
        let n = self.z0.n;
        let same = |t: &Tensor<F>| t.shape() == self.z0.shape();
        if !same(&self.eps) || !same(&self.lq) {
            return Err(Error::invalid("objective batch tensors disagree in shape"));
        }
        if self.t.len() != n || self.attrs.len() != n * k || self.gt_probs.len() != n * k || self.attr_active.len() != n {
            return Err(Error::invalid("objective batch metadata has the wrong length"));
        }
        for p in &self.pairs {
            if p.src >= n || p.tar >= n || p.edited_index >= k {
                return Err(Error::invalid(format!("dual pair {p:?} out of range")));
            }
        }
        if self.norm.is_nan() || self.norm <= 0.0 {
            return Err(Error::invalid("objective normaliser must be positive"));
        }
        Ok(())
    }
}

/// Per-item and per-pair loss values of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveTerms {
    pub l_diff: Vec<f64>,
    /// Attribute loss per item; zero for inactive items.
    pub l_attr: Vec<f64>,
    /// `(a_src, a_tar, l_dual)` per pair.
    pub dual: Vec<(f64, f64, f64)>,
    pub total: f64,
}

/// Evaluates the batch objective and, when `want_grad`, its gradient with
/// respect to the velocity-network parameters.
///
/// The encoder is frozen. The clamp before encoding passes gradient only
/// where the estimate lies strictly inside `(0, 1)`.
pub fn evaluate_objective<F: Real>(
    net: &VelocityNet<F>,
    enc: Option<&EncoderNet<F>>,
    batch: &ObjectiveBatch<F>,
    w: &LossWeights,
    want_grad: bool,
) -> Result<(ObjectiveTerms, Option<ParamSet<F>>)> {
    w.validate()?;
    let k = net.arch.attrs;
    batch.validate(k)?;
    let n = batch.z0.n;
    let item = batch.z0.item_len();
    let lambda = w.lambda_attr;
    let alpha = w.dual_weight_alpha;
    let needs_attr = batch.attr_active.iter().any(|&a| a);
    let needs_enc = needs_attr || !batch.pairs.is_empty();
    if needs_enc && enc.is_none() {
        return Err(Error::invalid("attribute or dual terms need an encoder"));
    }
    if let (true, Some(e)) = (needs_enc, enc) {
        let s = e.arch.size;
        if (batch.z0.h, batch.z0.w) != (s, s) {
            return Err(Error::shape((s, s), (batch.z0.h, batch.z0.w)));
        }
    }

    let zt_data: Vec<F> = (0..n * item)
        .map(|j| {
            let t = batch.t[j / item];
            (F::one() - t) * batch.z0.data[j] + t * batch.eps.data[j]
        })
        .collect();
    let zt = Tensor::from_vec(n, 3, batch.z0.h, batch.z0.w, zt_data);
    let pass = net.forward(&zt, &batch.lq, &batch.t, &batch.attrs);
    if !pass.v.all_finite() {
        return Err(Error::NonFinite { context: "velocity prediction".into() });
    }

    let mut l_diff = vec![0.0; n];
    let mut dv = pass.v.zeros_like();
    for i in 0..n {
        let mut s = 0.0;
        for j in i * item..(i + 1) * item {
            let target = batch.eps.data[j].to_f64().unwrap() - batch.z0.data[j].to_f64().unwrap();
            let d = pass.v.data[j].to_f64().unwrap() - target;
            s += d * d;
            dv.data[j] = F::lit(2.0 * d / (item as f64 * batch.norm));
        }
        l_diff[i] = s / item as f64;
    }

    let mut l_attr = vec![0.0; n];
    let mut dual = Vec::with_capacity(batch.pairs.len());
    if let (true, Some(enc)) = (needs_enc, enc) {
        // ẑ0 = z_t − t·v, then clamp.
        let raw: Vec<F> = (0..n * item).map(|j| zt.data[j] - batch.t[j / item] * pass.v.data[j]).collect();
        let clamped: Vec<F> = raw.iter().map(|&x| x.max(F::zero()).min(F::one())).collect();
        let x_hat = Tensor::from_vec(n, 3, zt.h, zt.w, clamped);
        let ep = enc.forward(&x_hat);
        let mut d_logits = ep.logits.zeros_like();
        for i in 0..n {
            if !batch.attr_active[i] {
                continue;
            }
            let z: Vec<f64> = ep.logits.data[i * k..(i + 1) * k].iter().map(|v| v.to_f64().unwrap()).collect();
            let y: Vec<f64> = batch.gt_probs[i * k..(i + 1) * k].iter().map(|v| v.to_f64().unwrap()).collect();
            l_attr[i] = bce_with_logits(&z, &y)?;
            if lambda != 0.0 {
                for (j, g) in bce_with_logits_grad(&z, &y).into_iter().enumerate() {
                    d_logits.data[i * k + j] = d_logits.data[i * k + j] + F::lit(lambda * g / batch.norm);
                }
            }
        }
        for p in &batch.pairs {
            let a_src = ep.probs.data[p.src * k + p.edited_index].to_f64().unwrap();
            let a_tar = ep.probs.data[p.tar * k + p.edited_index].to_f64().unwrap();
            let l = dual_loss(a_src, a_tar, w.margin)?;
            dual.push((a_src, a_tar, l));
            if alpha != 0.0 {
                let (gs, gt) = dual_loss_grad(a_src, a_tar, w.margin);
                for (idx, g, a) in [(p.src, gs, a_src), (p.tar, gt, a_tar)] {
                    let j = idx * k + p.edited_index;
                    d_logits.data[j] = d_logits.data[j] + F::lit(alpha * g * a * (1.0 - a) / batch.norm);
                }
            }
        }
        let any_upstream = d_logits.data.iter().any(|v| *v != F::zero());
        if want_grad && any_upstream {
            let up = EncoderGrads { logits: Some(&d_logits), feature: None, id_emb: None };
            let dx = enc.backward(&ep, up, None, true).expect("input gradient requested");
            for j in 0..n * item {
                let x = raw[j];
                if x > F::zero() && x < F::one() {
                    dv.data[j] = dv.data[j] - batch.t[j / item] * dx.data[j];
                }
            }
        }
    }

    let mut sum = 0.0;
    for i in 0..n {
        let lam = if batch.attr_active[i] { lambda } else { 0.0 };
        sum += l_diff[i] + lam * l_attr[i];
    }
    for &(_, _, l) in &dual {
        sum += alpha * l;
    }
    let total = sum / batch.norm;
    finite("total loss", total)?;

    let grads = if want_grad {
        let mut g = net.params.zeros_like();
        net.backward(&pass, &dv, &mut g);
        Some(g)
    } else {
        None
    };
    Ok((ObjectiveTerms { l_diff, l_attr, dual, total }, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_loss_examples() {
        let z0 = Image::filled(2, 2, 3, 0.25);
        let eps = Image::filled(2, 2, 3, 0.75);
        let perfect = eps.zip_map(&z0, |e, z| e - z).unwrap();
        assert_eq!(flow_loss(&perfect, &z0, &eps).unwrap(), 0.0);
        assert!((flow_loss(&Image::zeros(2, 2, 3), &z0, &eps).unwrap() - 0.25).abs() < 1e-12);
        assert!(flow_loss(&Image::zeros(1, 2, 3), &z0, &eps).is_err());
    }

    #[test]
    fn bce_examples() {
        let l = bce_with_logits(&[0.0; 6], &[0.5; 6]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        // Stationary where the prediction equals the target.
        let y = [0.2, 0.7, 0.5];
        let z: Vec<f64> = y.iter().map(|&p: &f64| (p / (1.0 - p)).ln()).collect();
        assert!(bce_with_logits_grad(&z, &y).iter().all(|g| g.abs() < 1e-12));
        assert!(bce_with_logits(&[0.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn scalar_examples() {
        let w = LossWeights::default();
        assert!((aal_loss(1.0, 0.5, &w).unwrap() - 1.1).abs() < 1e-12);
        let w0 = LossWeights { lambda_attr: 0.0, ..w };
        assert_eq!(aal_loss(0.37, 9.0, &w0).unwrap(), 0.37);
        assert_eq!(dual_loss(0.9, 0.1, 0.5).unwrap(), 0.0);
        assert_eq!(dual_loss(0.3, 0.3, 0.5).unwrap(), 0.5);
        assert!((dual_loss(0.6, 0.5, 0.5).unwrap() - 0.4).abs() < 1e-12);
        assert!(dual_loss(0.6, 0.5, 0.0).is_err());
        assert!((total_loss(1.0, 0.8, 0.4, &w).unwrap() - 1.88).abs() < 1e-12);
        let wa = LossWeights { dual_weight_alpha: 0.0, ..w };
        assert_eq!(total_loss(1.0, 0.8, 0.4, &wa).unwrap(), 1.8);
        assert!(total_loss(f64::NAN, 0.0, 0.0, &w).is_err());
        assert!(LossWeights { margin: 1.5, ..w }.validate().is_err());
    }

    #[test]
    fn hinge_subgradient() {
        assert_eq!(dual_loss_grad(0.6, 0.5, 0.5), (-1.0, 1.0));
        assert_eq!(dual_loss_grad(0.4, 0.5, 0.5), (1.0, -1.0));
        assert_eq!(dual_loss_grad(0.9, 0.1, 0.5), (0.0, 0.0));
        assert_eq!(dual_loss_grad(0.5, 0.5, 0.5), (0.0, 0.0));
    }

    fn micro_setup() -> (VelocityNet<f64>, EncoderNet<f64>, ObjectiveBatch<f64>) {
        use crate::attrenc::EncoderArch;
        use crate::flowcore::VelocityArch;
        use crate::rng;
        let k = 6;
        let net = VelocityNet::<f64>::new(
            VelocityArch { size: 16, attrs: k, widths: [2, 2, 2], time_freqs: 1, embed_dim: 2 },
            3,
        );
        let enc = EncoderNet::<f64>::new(
            EncoderArch { size: 16, attrs: k, widths: [2, 2, 2, 2], feature_dim: 4, identity_dim: 2 },
            5,
        );
        let mut r = rng::rng_from(11);
        let mut u = |n: usize, lo: f64, hi: f64| {
            (0..n).map(|_| lo + (hi - lo) * rand::Rng::random::<f64>(&mut r)).collect::<Vec<_>>()
        };
        let len = 2 * 3 * 16 * 16;
        let batch = ObjectiveBatch {
            z0: Tensor::from_vec(2, 3, 16, 16, u(len, 0.3, 0.7)),
            eps: Tensor::from_vec(2, 3, 16, 16, u(len, -0.1, 0.1)),
            lq: Tensor::from_vec(2, 3, 16, 16, u(len, 0.0, 1.0)),
            t: vec![0.35, 0.35],
            attrs: vec![0.0, 1.0, 0.5, 0.0, 1.0, 0.0, 1.0, 1.0, 0.5, 0.0, 1.0, 0.0],
            gt_probs: u(2 * k, 0.05, 0.95),
            attr_active: vec![true, true],
            pairs: vec![DualPair { src: 0, tar: 1, edited_index: 0 }],
            norm: 1.0,
        };
        (net, enc, batch)
    }

    #[test]
    fn objective_gradient_matches_finite_differences() {
        let (mut net, enc, batch) = micro_setup();
        // Margin 1 keeps the hinge active for any pair of confidences.
        let w = LossWeights { lambda_attr: 0.5, dual_weight_alpha: 0.7, margin: 1.0 };
        let (terms, grads) = evaluate_objective(&net, Some(&enc), &batch, &w, true).unwrap();
        let grads = grads.unwrap();
        assert!(terms.dual[0].2 > 0.0);
        let h = 1e-4;
        for i in 0..net.params.numel() {
            let x = net.params.flat_get(i);
            net.params.flat_set(i, x + h);
            let up = evaluate_objective(&net, Some(&enc), &batch, &w, false).unwrap().0.total;
            net.params.flat_set(i, x - h);
            let down = evaluate_objective(&net, Some(&enc), &batch, &w, false).unwrap().0.total;
            net.params.flat_set(i, x);
            let fd = (up - down) / (2.0 * h);
            let an = grads.flat_get(i);
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
            assert!(rel <= 1e-4, "param {i}: analytic {an} vs fd {fd}");
        }
    }

    #[test]
    fn objective_total_composes_from_terms() {
        let (net, enc, batch) = micro_setup();
        let w = LossWeights::default();
        let (t, _) = evaluate_objective(&net, Some(&enc), &batch, &w, false).unwrap();
        let aal_s = aal_loss(t.l_diff[0], t.l_attr[0], &w).unwrap();
        let aal_t = aal_loss(t.l_diff[1], t.l_attr[1], &w).unwrap();
        let total = total_loss(aal_s, aal_t, t.dual[0].2, &w).unwrap();
        assert!((total - t.total).abs() < 1e-12);
        // Without attribute or dual terms no encoder is needed.
        let plain = ObjectiveBatch { attr_active: vec![false, false], pairs: vec![], ..batch };
        let (t2, _) = evaluate_objective(&net, None, &plain, &w, false).unwrap();
        assert!((t2.total - t.l_diff[0] - t.l_diff[1]).abs() < 1e-12);
    }
}
