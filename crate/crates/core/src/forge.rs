//! Paired-dataset construction: label the source image, edit one attribute
//! with the flow editor, and keep the pair only if it passes three quality
//! checks in order (attribute strength, identity similarity, perceptual
//! drift).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attrenc::AttrEncoder;
use crate::error::{Error, Result};
use crate::flowcore::VelocityField;
use crate::flowedit::{self, EditConfig, EditSettings};
use crate::image::Image;
use crate::par;
use crate::synthgen::{self, AttrVector, CorpusRecord, Manifest, QcScoresRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QcThresholds {
    /// Minimum target-aligned confidence of the edited attribute.
    pub attr_conf_min: f32,
    /// Minimum identity cosine between source and edit.
    pub id_sim_min: f32,
    /// Maximum perceptual distance between source and edit.
    pub percep_max: f32,
}

impl Default for QcThresholds {
    fn default() -> Self {
        Self {
            attr_conf_min: 0.6,
            id_sim_min: 0.5,
            percep_max: 0.3,
        }
    }
}

impl QcThresholds {
    /// Accepts the closed ranges so the vacuous filter `(0, −1, ∞)` is legal.
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.attr_conf_min) {
            return Err(Error::invalid(format!("attr_conf_min {} outside [0, 1]", self.attr_conf_min)));
        }
        if !(-1.0..=1.0).contains(&self.id_sim_min) {
            return Err(Error::invalid(format!("id_sim_min {} outside [-1, 1]", self.id_sim_min)));
        }
        if self.percep_max.is_nan() || self.percep_max <= 0.0 {
            return Err(Error::invalid(format!("percep_max must be > 0, got {}", self.percep_max)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QcReason {
    Kept,
    AttributeWeak,
    IdentityShift,
    PerceptualDrift,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcScores {
    pub attr_conf: f32,
    pub id_sim: f32,
    pub percep: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QcVerdict {
    pub kept: bool,
    pub reason: QcReason,
    pub scores: QcScores,
}

/// Applies the thresholds in stage order; the first failing stage names
/// the reason. Values exactly at a threshold pass.
pub fn qc_verdict(scores: QcScores, th: &QcThresholds) -> QcVerdict {
    let reason = if scores.attr_conf < th.attr_conf_min {
        QcReason::AttributeWeak
    } else if scores.id_sim < th.id_sim_min {
        QcReason::IdentityShift
    } else if scores.percep > th.percep_max {
        QcReason::PerceptualDrift
    } else {
        QcReason::Kept
    };
    QcVerdict { kept: reason == QcReason::Kept, reason, scores }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    pub fn from_conf(conf: f32) -> Self {
        if conf > 0.6 {
            Label::Positive
        } else if conf < 0.4 {
            Label::Negative
        } else {
            Label::Unknown
        }
    }

    /// Prompt value: 1, 0, or the template's 0.5.
    pub fn value(self) -> f32 {
        match self {
            Label::Positive => 1.0,
            Label::Negative => 0.0,
            Label::Unknown => 0.5,
        }
    }
}

pub fn label_attributes(conf: &AttrVector) -> Vec<Label> {
    conf.values().iter().map(|&c| Label::from_conf(c)).collect()
}

/// Scores an edit and applies [`qc_verdict`].
pub fn qc_filter(
    src: &Image,
    edited: &Image,
    edited_index: usize,
    target_state: bool,
    enc: &AttrEncoder,
    th: &QcThresholds,
) -> Result<QcVerdict> {
    th.validate()?;
    if !enc.trained {
        return Err(Error::invalid("quality control needs a trained encoder"));
    }
    let k = enc.arch().attrs;
    if edited_index >= k {
        return Err(Error::IndexOutOfRange { index: edited_index, len: k });
    }
    let e = enc.encode_batch(&[src, edited])?;
    let conf = e[1].attrs.get(edited_index);
    let scores = QcScores {
        attr_conf: if target_state { conf } else { 1.0 - conf },
        id_sim: e[0].identity.cosine(&e[1].identity),
        percep: enc.perceptual_distance(&e[0], &e[1]),
    };
    Ok(qc_verdict(scores, th))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DiscardCounts {
    pub attribute_weak: usize,
    pub identity_shift: usize,
    pub perceptual_drift: usize,
}

impl DiscardCounts {
    pub fn total(&self) -> usize {
        self.attribute_weak + self.identity_shift + self.perceptual_drift
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanScores {
    pub attr_conf: f64,
    pub id_sim: f64,
    pub percep: f64,
}

impl MeanScores {
    fn of<'a>(scores: impl Iterator<Item = &'a QcScores>) -> Option<Self> {
        let (mut s, mut n) = (MeanScores::default(), 0usize);
        for q in scores {
            s.attr_conf += q.attr_conf as f64;
            s.id_sim += q.id_sim as f64;
            s.percep += q.percep as f64;
            n += 1;
        }
        (n > 0).then(|| MeanScores {
            attr_conf: s.attr_conf / n as f64,
            id_sim: s.id_sim / n as f64,
            percep: s.percep / n as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForgeReport {
    pub input: usize,
    pub kept: usize,
    pub discarded: DiscardCounts,
    /// Means over every scored edit.
    pub mean_scores: Option<MeanScores>,
    /// Means over the kept edits only.
    pub kept_mean_scores: Option<MeanScores>,
    pub thresholds: QcThresholds,
    /// Kept-pair manifest, relative to the output directory.
    pub manifest_path: PathBuf,
}

pub const REPORT_FILE: &str = "forge_report.json";
pub const REJECTS_DIR: &str = "rejects";

/// The edit chosen for record `i`: attribute `i mod K` flipped relative to
/// the record's source annotation.
pub fn edit_plan(rec: &CorpusRecord, i: usize) -> (usize, bool) {
    let k = i % rec.src_attrs.len();
    (k, rec.src_attrs[k] < 0.5)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RejectRecord {
    id: String,
    png: String,
    edited_index: usize,
    target_state: bool,
    reason: QcReason,
    scores: QcScores,
}

struct Outcome {
    verdict: QcVerdict,
    record: CorpusRecord,
    src: Image,
    edited: Image,
}

/// Builds a filtered paired dataset from the source images of `clean`.
/// Kept pairs are written in the corpus schema with their QC scores;
/// `dump_rejects` also writes every discarded edit for inspection.
#[allow(clippy::too_many_arguments)]
pub fn forge_dataset<V: VelocityField + ?Sized>(
    clean: &Manifest,
    model: &V,
    enc: &AttrEncoder,
    settings: &EditSettings,
    th: &QcThresholds,
    out_dir: &Path,
    dump_rejects: bool,
) -> Result<ForgeReport> {
    settings.validate()?;
    th.validate()?;
    if clean.is_empty() {
        return Err(Error::InsufficientData("forge input manifest is empty".into()));
    }
    if !enc.trained {
        return Err(Error::invalid("forging needs a trained encoder"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let k = enc.arch().attrs;
    let outcomes: Vec<Outcome> = par::map_range(clean.len(), |i| -> Result<Outcome> {
        let rec = &clean.records[i];
        if rec.src_attrs.len() != k {
            return Err(Error::shape(k, rec.src_attrs.len()));
        }
        let src = Image::load_png(&clean.dir.join(&rec.src_png))?;
        let (idx, target) = edit_plan(rec, i);
        let labels = label_attributes(&enc.encode_attrs(&src)?);
        let src_attrs = AttrVector::new(labels.iter().map(|l| l.value()).collect())?.with(idx, if target { 0.0 } else { 1.0 });
        let tar_attrs = src_attrs.with(idx, if target { 1.0 } else { 0.0 });
        let seed = flowedit::record_seed(settings.seed, i);
        let cfg = EditConfig::for_image(&src, src_attrs.clone(), tar_attrs.clone(), EditSettings { seed, ..*settings })?;
        // Score the 8-bit image that is written, so the stored pair passes
        // the same checks when re-scored from disk.
        let raw = flowedit::flow_edit_alpha(model, &src, &cfg)?;
        let (h, w, c) = raw.shape();
        let edited = Image::from_rgb8(h, w, c, &raw.to_rgb8())?;
        let verdict = qc_filter(&src, &edited, idx, target, enc, th)?;
        let s = verdict.scores;
        let record = CorpusRecord {
            id: rec.id.clone(),
            src_png: format!("src_{i:06}.png"),
            tar_png: format!("tar_{i:06}.png"),
            src_attrs: src_attrs.values().to_vec(),
            tar_attrs: tar_attrs.values().to_vec(),
            edited_index: idx,
            identity: rec.identity.clone(),
            seed,
            qc_scores: Some(QcScoresRecord { attr_conf: s.attr_conf, id_sim: s.id_sim, percep: s.percep }),
        };
        Ok(Outcome { verdict, record, src, edited })
    })
    .into_iter()
    .collect::<Result<_>>()?;

    let mut kept = Vec::new();
    let mut discarded = DiscardCounts::default();
    let mut rejects = Vec::new();
    if dump_rejects {
        let d = out_dir.join(REJECTS_DIR);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for o in &outcomes {
        match o.verdict.reason {
            QcReason::Kept => {
                o.src.save_png(&out_dir.join(&o.record.src_png))?;
                o.edited.save_png(&out_dir.join(&o.record.tar_png))?;
                kept.push(o.record.clone());
                continue;
            }
            QcReason::AttributeWeak => discarded.attribute_weak += 1,
            QcReason::IdentityShift => discarded.identity_shift += 1,
            QcReason::PerceptualDrift => discarded.perceptual_drift += 1,
        }
        if dump_rejects {
            let png = format!("{REJECTS_DIR}/{}", o.record.tar_png);
            o.edited.save_png(&out_dir.join(&png))?;
            rejects.push(RejectRecord {
                id: o.record.id.clone(),
                png,
                edited_index: o.record.edited_index,
                target_state: o.record.tar_attrs[o.record.edited_index] >= 0.5,
                reason: o.verdict.reason,
                scores: o.verdict.scores,
            });
        }
    }
    if dump_rejects {
        synthgen::write_jsonl(&out_dir.join(REJECTS_DIR).join("rejects.jsonl"), &rejects)?;
    }
    let manifest = Manifest { dir: out_dir.to_path_buf(), records: kept };
    manifest.save()?;
    let manifest_path = PathBuf::from(synthgen::MANIFEST_FILE);
    let report = ForgeReport {
        input: clean.len(),
        kept: manifest.len(),
        discarded,
        mean_scores: MeanScores::of(outcomes.iter().map(|o| &o.verdict.scores)),
        kept_mean_scores: MeanScores::of(outcomes.iter().filter(|o| o.verdict.kept).map(|o| &o.verdict.scores)),
        thresholds: *th,
        manifest_path,
    };
    let path = out_dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&report).expect("report serialises");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(a: f32, i: f32, p: f32) -> QcScores {
        QcScores { attr_conf: a, id_sim: i, percep: p }
    }

    #[test]
    fn boundaries() {
        let th = QcThresholds::default();
        let r = |a, i, p| qc_verdict(s(a, i, p), &th).reason;
        assert_eq!(r(0.59, 0.9, 0.1), QcReason::AttributeWeak);
        assert_eq!(r(0.60, 0.50, 0.30), QcReason::Kept);
        assert_eq!(r(0.9, 0.8, 0.31), QcReason::PerceptualDrift);
        assert_eq!(r(0.59, 0.1, 0.9), QcReason::AttributeWeak);
        assert_eq!(r(0.7, 0.49, 0.9), QcReason::IdentityShift);
    }

    #[test]
    fn labels() {
        assert_eq!(Label::from_conf(0.61), Label::Positive);
        assert_eq!(Label::from_conf(0.60), Label::Unknown);
        assert_eq!(Label::from_conf(0.40), Label::Unknown);
        assert_eq!(Label::from_conf(0.39), Label::Negative);
    }

    #[test]
    fn threshold_validation() {
        assert!(QcThresholds { attr_conf_min: 0.0, id_sim_min: -1.0, percep_max: f32::INFINITY }.validate().is_ok());
        assert!(QcThresholds { percep_max: 0.0, ..Default::default() }.validate().is_err());
        assert!(QcThresholds { attr_conf_min: 1.5, ..Default::default() }.validate().is_err());
    }
}
