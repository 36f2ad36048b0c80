//! Evaluation: attribute accuracy, identity similarity, cross-prompt
//! identity similarity, and the perceptual proxy, plus the batch harness,
//! its CSV rows, and a contact-sheet renderer.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attrenc::{self, AttrEncoder};
use crate::degrade::{self, ParamRanges};
use crate::error::{Error, Result};
use crate::flowcore::{euler_sample, Conditioning, SamplerConfig, VelocityField};
use crate::image::Image;
use crate::par;
use crate::rng::{self, purpose};
use crate::synthgen::{AttrVector, PairRecord};

/// The tie rule: a confidence of exactly 0.5 reads as present.
pub fn reads_present(conf: f32) -> bool {
    conf >= 0.5
}

/// Whether a confidence agrees with the wanted state (`true` = present).
pub fn attribute_hit(conf: f32, target_state: bool) -> bool {
    reads_present(conf) == target_state
}

/// 1 when the encoder reads attribute `edited_index` of `restored` in the
/// wanted state, else 0.
pub fn attribute_accuracy(enc: &AttrEncoder, restored: &Image, edited_index: usize, target_state: bool) -> Result<u8> {
    let k = enc.arch().attrs;
    if edited_index >= k {
        return Err(Error::IndexOutOfRange { index: edited_index, len: k });
    }
    let conf = enc.encode_attrs(restored)?.get(edited_index);
    Ok(attribute_hit(conf, target_state) as u8)
}

/// Cosine similarity of the two identity embeddings.
pub fn id_similarity(enc: &AttrEncoder, a: &Image, b: &Image) -> Result<f32> {
    let e = enc.encode_batch(&[a, b])?;
    Ok(e[0].identity.cosine(&e[1].identity))
}

/// Identity similarity between two restorations of the same LQ input made
/// under different prompts.
pub fn cp_ids(enc: &AttrEncoder, restored_src: &Image, restored_tar: &Image) -> Result<f32> {
    id_similarity(enc, restored_src, restored_tar)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub sampler: SamplerConfig,
    pub degrade_ranges: ParamRanges,
    /// Seeds the per-record degradations and sampler noise.
    pub seed: u64,
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampler.validate()?;
        self.degrade_ranges.validate()
    }
}

/// Per-record evaluation outcome (one CSV row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub index: usize,
    pub edited_index: usize,
    pub target_state: bool,
    /// Encoder confidence of the edited attribute on the target-prompt output.
    pub tar_conf: f32,
    pub aa: u8,
    /// Target-prompt output against the source ground truth.
    pub ids: f32,
    pub cp_ids: f32,
    /// Source-prompt output against the source ground truth.
    pub percep: f32,
}

pub const CSV_HEADER: &str = "index,edited_index,target_state,tar_conf,aa,ids,cp_ids,percep";

impl EvalRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.index, self.edited_index, self.target_state as u8, self.tar_conf, self.aa, self.ids, self.cp_ids, self.percep
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aa: f64,
    pub ids_mean: f64,
    pub cp_ids_mean: f64,
    pub percep_mean: f64,
    pub n: usize,
    /// Accuracy per edited attribute; `None` where no record edits it.
    pub per_attribute: Vec<Option<f64>>,
    pub per_attribute_count: Vec<usize>,
}

impl EvalReport {
    /// Aggregates per-record outcomes.
    pub fn from_records(records: &[EvalRecord], k: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::InsufficientData("evaluation needs at least one record".into()));
        }
        let n = records.len();
        let mean = |f: &dyn Fn(&EvalRecord) -> f64| records.iter().map(f).sum::<f64>() / n as f64;
        let mut hits = vec![0usize; k];
        let mut count = vec![0usize; k];
        for r in records {
            count[r.edited_index] += 1;
            hits[r.edited_index] += r.aa as usize;
        }
        Ok(Self {
            aa: records.iter().map(|r| r.aa as usize).sum::<usize>() as f64 / n as f64,
            ids_mean: mean(&|r| r.ids as f64),
            cp_ids_mean: mean(&|r| r.cp_ids as f64),
            percep_mean: mean(&|r| r.percep as f64),
            n,
            per_attribute: (0..k).map(|i| (count[i] > 0).then(|| hits[i] as f64 / count[i] as f64)).collect(),
            per_attribute_count: count,
        })
    }
}

/// The LQ input of eval record `index`: the source image degraded with a
/// seeded draw, upsampled to model resolution.
pub fn eval_lq(pair: &PairRecord, index: usize, cfg: &EvalConfig) -> Result<Image> {
    let dseed = rng::derive(cfg.seed, purpose::EVAL, index as u64);
    let dcfg = degrade::sample_degrade_config(dseed, &cfg.degrade_ranges)?;
    let lq = degrade::degrade(&pair.src_image, &dcfg)?;
    let (h, w, _) = pair.src_image.shape();
    degrade::upsample_to_model_res(&lq, h, w)
}

/// Samples a restoration of `lq_up` under `attrs`.
pub fn restore<V: VelocityField + ?Sized>(model: &V, lq_up: &Image, attrs: &AttrVector, sampler: &SamplerConfig) -> Result<Image> {
    euler_sample(model, &Conditioning::new(lq_up.clone(), attrs.clone()), sampler)
}

/// Restorations of record `index` under its source and target prompts;
/// both share the sampler noise.
pub fn restore_pair<V: VelocityField + ?Sized>(
    model: &V,
    pair: &PairRecord,
    index: usize,
    cfg: &EvalConfig,
) -> Result<(Image, Image, Image)> {
    let lq_up = eval_lq(pair, index, cfg)?;
    let sampler = SamplerConfig {
        seed: rng::derive(cfg.seed, purpose::SAMPLE, index as u64),
        ..cfg.sampler
    };
    let rs = restore(model, &lq_up, &pair.src_attrs, &sampler)?;
    let rt = restore(model, &lq_up, &pair.tar_attrs, &sampler)?;
    Ok((lq_up, rs, rt))
}

/// Scores one record from its two restorations.
pub fn score_record(enc: &AttrEncoder, pair: &PairRecord, index: usize, rs: &Image, rt: &Image) -> Result<EvalRecord> {
    let e = enc.encode_batch(&[rs, rt, &pair.src_image])?;
    let target_state = pair.tar_attrs.present(pair.edited_index);
    let tar_conf = e[1].attrs.get(pair.edited_index);
    Ok(EvalRecord {
        index,
        edited_index: pair.edited_index,
        target_state,
        tar_conf,
        aa: attribute_hit(tar_conf, target_state) as u8,
        ids: e[1].identity.cosine(&e[2].identity),
        cp_ids: e[0].identity.cosine(&e[1].identity),
        percep: enc.perceptual_distance(&e[0], &e[2]),
    })
}

/// Evaluates every pair and returns the per-record rows with the report.
pub fn evaluate_records<V: VelocityField + ?Sized>(
    model: &V,
    enc: &AttrEncoder,
    pairs: &[PairRecord],
    cfg: &EvalConfig,
) -> Result<(Vec<EvalRecord>, EvalReport)> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::InsufficientData("evaluation manifest is empty".into()));
    }
    let records: Vec<EvalRecord> = par::map_range(pairs.len(), |i| {
        let (_, rs, rt) = restore_pair(model, &pairs[i], i, cfg)?;
        score_record(enc, &pairs[i], i, &rs, &rt)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let report = EvalReport::from_records(&records, enc.arch().attrs)?;
    Ok((records, report))
}

pub fn evaluate<V: VelocityField + ?Sized>(model: &V, enc: &AttrEncoder, pairs: &[PairRecord], cfg: &EvalConfig) -> Result<EvalReport> {
    Ok(evaluate_records(model, enc, pairs, cfg)?.1)
}

pub fn records_csv(records: &[EvalRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Tiles images into rows of equal-sized cells separated by a 2-pixel
/// white gutter.
pub fn contact_sheet(rows: &[Vec<Image>]) -> Result<Image> {
    let first = rows
        .first()
        .and_then(|r| r.first())
        .ok_or_else(|| Error::invalid("contact sheet needs at least one image"))?;
    let (h, w, c) = first.shape();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2;
    let mut sheet = Image::filled(rows.len() * (h + gap) + gap, cols * (w + gap) + gap, c, 1.0);
    for (ri, row) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            first.check_same_shape(img)?;
            let (oy, ox) = (gap + ri * (h + gap), gap + ci * (w + gap));
            for y in 0..h {
                for x in 0..w {
                    for ch in 0..c {
                        sheet.set(oy + y, ox + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(sheet)
}

/// Writes a PNG with one row per pair: LQ, source-prompt restoration,
/// target-prompt restoration, source ground truth.
pub fn grid<V: VelocityField + ?Sized>(model: &V, pairs: &[PairRecord], cfg: &EvalConfig, out: &Path) -> Result<()> {
    cfg.validate()?;
    let rows: Vec<Vec<Image>> = par::map_range(pairs.len(), |i| {
        let (lq, rs, rt) = restore_pair(model, &pairs[i], i, cfg)?;
        Ok(vec![lq, rs, rt, pairs[i].src_image.clone()])
    })
    .into_iter()
    .collect::<Result<_>>()?;
    contact_sheet(&rows)?.save_png(out)
}

/// Cosine similarity on raw vectors, re-exported for callers holding
/// embeddings rather than images.
pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    attrenc::cosine(a, b)
}
