//! Training loops for the restoration model.
//!
//! Every step draws its data from a generator seeded by `(seed, step)`, so a
//! step's inputs never depend on earlier steps. Data for a window of steps
//! is synthesised in parallel and the parameter updates are then applied in
//! order, which keeps trajectories identical for any worker count and makes
//! resuming from a checkpoint exact.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attrenc::AttrEncoder;
use crate::checkpoint::Checkpoint;
use crate::degrade::{self, ParamRanges};
use crate::error::{Error, Result};
use crate::flowcore::{self, VelocityArch, VelocityModel};
use crate::image::Image;
use crate::losses::{evaluate_objective, DualPair, LossWeights, ObjectiveBatch};
use crate::nn::{RmsProp, Tensor};
use crate::par;
use crate::rng::{self, purpose, SeededRng};
use crate::synthgen::{AttrVector, Manifest, PairRecord};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Steps whose data is synthesised together before being applied.
const PREFETCH: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum TrainMode {
    /// Plain flow matching.
    Baseline,
    /// Flow matching plus the attribute loss on one branch.
    Aal,
    /// Two prompt branches with attribute losses and the dual hinge.
    Sdt,
    /// Two prompt branches without the dual hinge.
    SdtNoDual,
}

impl TrainMode {
    pub fn dual_branch(self) -> bool {
        matches!(self, TrainMode::Sdt | TrainMode::SdtNoDual)
    }

    pub fn needs_encoder(self) -> bool {
        self != TrainMode::Baseline
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Baseline => "baseline",
            TrainMode::Aal => "aal",
            TrainMode::Sdt => "sdt",
            TrainMode::SdtNoDual => "sdtNoDual",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub weights: LossWeights,
    pub steps_total: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub degrade_ranges: ParamRanges,
    pub checkpoint_every: usize,
    pub corpus_path: PathBuf,
    pub encoder_path: Option<PathBuf>,
    pub arch: VelocityArch,
    /// Probability of replacing the prompt with the template during
    /// training, which teaches the unconditional branch used by guidance.
    pub uncond_prob: f64,
    /// When set, the attribute loss is applied only for `t` below this.
    pub attr_max_t: Option<f32>,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Checkpoint to continue from.
    pub resume_from: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Sdt,
            weights: LossWeights::default(),
            steps_total: 2000,
            batch_size: 1,
            learning_rate: 5e-4,
            seed: 0,
            degrade_ranges: ParamRanges::default(),
            checkpoint_every: 500,
            corpus_path: PathBuf::new(),
            encoder_path: None,
            arch: VelocityArch::default(),
            uncond_prob: 0.1,
            attr_max_t: None,
            clip_norm: Some(1.0),
            resume_from: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.degrade_ranges.validate()?;
        self.arch.validate()?;
        if self.steps_total < 1 {
            return Err(Error::invalid("steps_total must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::invalid("checkpoint_every must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.uncond_prob) {
            return Err(Error::invalid("uncond_prob must lie in [0, 1]"));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::invalid("clip_norm must be positive"));
            }
        }
        Ok(())
    }

    /// Loss weights after applying the mode: the baseline drops both extra
    /// terms and the single-branch and no-dual modes drop the hinge.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        match self.mode {
            TrainMode::Baseline => {
                w.lambda_attr = 0.0;
                w.dual_weight_alpha = 0.0;
            }
            TrainMode::Aal | TrainMode::SdtNoDual => w.dual_weight_alpha = 0.0,
            TrainMode::Sdt => {}
        }
        w
    }
}

/// One line of the training log. Batch quantities are means over the
/// batch; single-branch modes report their branch under the `src` fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StepRecord {
    pub step: usize,
    pub l_diff_src: f64,
    pub l_attr_src: f64,
    pub l_diff_tar: f64,
    pub l_attr_tar: f64,
    pub l_dual: f64,
    pub l_total: f64,
    pub t: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    /// Equality on everything except the wall-clock time.
    pub fn same_values(&self, other: &StepRecord) -> bool {
        StepRecord { wall_ms: 0.0, ..self.clone() } == StepRecord { wall_ms: 0.0, ..other.clone() }
    }

    pub fn all_finite(&self) -> bool {
        [self.l_diff_src, self.l_attr_src, self.l_diff_tar, self.l_attr_tar, self.l_dual, self.l_total, self.t]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Inputs of one training item.
#[derive(Debug, Clone)]
struct Item {
    z0: Image,
    eps: Image,
    lq_up: Image,
    t: f32,
    attrs: AttrVector,
    gt_probs: Vec<f32>,
}

/// The data of one step: a flat item list, plus the dual pairs of the
/// dual-branch modes.
#[derive(Debug, Clone)]
struct StepData {
    items: Vec<Item>,
    pairs: Vec<DualPair>,
}

fn gt_probs(enc: Option<&AttrEncoder>, img: &Image, k: usize) -> Result<Vec<f32>> {
    match enc {
        Some(e) => Ok(e.encode_attrs(img)?.values().to_vec()),
        None => Ok(vec![0.5; k]),
    }
}

/// Draws the degradation, `t`, `ε` and the prompt dropout for one item, in
/// that order.
struct Draw {
    lq_up: Image,
    t: f32,
    eps: Image,
    drop: bool,
}

fn draw(hq: &Image, cfg: &TrainConfig, r: &mut SeededRng) -> Result<Draw> {
    let dcfg = degrade::sample_degrade_config(r.random::<u64>(), &cfg.degrade_ranges)?;
    let lq = degrade::degrade(hq, &dcfg)?;
    let (h, w, c) = hq.shape();
    let lq_up = degrade::upsample_to_model_res(&lq, h, w)?;
    // u in [0, 1) maps to t in (0, 1].
    let t = 1.0 - r.random::<f32>();
    let eps = Image::from_vec(h, w, c, rng::gaussian_vec(r, h * w * c))?;
    let drop = r.random::<f64>() < cfg.uncond_prob;
    Ok(Draw { lq_up, t, eps, drop })
}

fn single_item(hq: &Image, attrs: &AttrVector, enc: Option<&AttrEncoder>, cfg: &TrainConfig, r: &mut SeededRng) -> Result<Item> {
    let d = draw(hq, cfg, r)?;
    let k = attrs.len();
    Ok(Item {
        z0: hq.clone(),
        eps: d.eps,
        lq_up: d.lq_up,
        t: d.t,
        attrs: if d.drop { AttrVector::template(k) } else { attrs.clone() },
        gt_probs: gt_probs(enc, hq, k)?,
    })
}

/// Source and target items sharing one LQ (degraded from the source), one
/// `t` and one `ε`. Prompt dropout applies to both branches together.
fn pair_items(pair: &PairRecord, enc: Option<&AttrEncoder>, cfg: &TrainConfig, r: &mut SeededRng) -> Result<[Item; 2]> {
    pair.validate()?;
    let d = draw(&pair.src_image, cfg, r)?;
    let k = pair.src_attrs.len();
    let cond = |a: &AttrVector| if d.drop { AttrVector::template(k) } else { a.clone() };
    Ok([
        Item {
            z0: pair.src_image.clone(),
            eps: d.eps.clone(),
            lq_up: d.lq_up.clone(),
            t: d.t,
            attrs: cond(&pair.src_attrs),
            gt_probs: gt_probs(enc, &pair.src_image, k)?,
        },
        Item {
            z0: pair.tar_image.clone(),
            eps: d.eps.clone(),
            lq_up: d.lq_up.clone(),
            t: d.t,
            attrs: cond(&pair.tar_attrs),
            gt_probs: gt_probs(enc, &pair.tar_image, k)?,
        },
    ])
}

/// Applies one optimiser step on `data` and returns the step's record.
fn apply_step(
    model: &mut VelocityModel,
    opt: &mut RmsProp<f32>,
    enc: Option<&AttrEncoder>,
    data: &StepData,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let start = Instant::now();
    let w = cfg.effective_weights();
    let n = data.items.len();
    let k = model.arch().attrs;
    let imgs = |f: fn(&Item) -> &Image| Tensor::from_images(&data.items.iter().map(f).collect::<Vec<_>>());
    let attr_on = w.lambda_attr > 0.0 || cfg.mode.needs_encoder();
    let batch = ObjectiveBatch {
        z0: imgs(|i| &i.z0),
        eps: imgs(|i| &i.eps),
        lq: imgs(|i| &i.lq_up),
        t: data.items.iter().map(|i| i.t).collect(),
        attrs: data.items.iter().flat_map(|i| i.attrs.values().iter().copied()).collect(),
        gt_probs: data.items.iter().flat_map(|i| i.gt_probs.iter().copied()).collect(),
        attr_active: data
            .items
            .iter()
            .map(|i| attr_on && enc.is_some() && cfg.attr_max_t.is_none_or(|m| i.t < m))
            .collect(),
        pairs: if enc.is_some() { data.pairs.clone() } else { Vec::new() },
        norm: cfg.batch_size as f64,
    };
    debug_assert_eq!(batch.attrs.len(), n * k);
    let (terms, grads) = evaluate_objective(&model.net, enc.map(|e| &e.net), &batch, &w, true)?;
    let b = cfg.batch_size as f64;
    let mut rec = StepRecord {
        step,
        l_diff_src: 0.0,
        l_attr_src: 0.0,
        l_diff_tar: 0.0,
        l_attr_tar: 0.0,
        l_dual: terms.dual.iter().fold(0.0, |acc, d| acc + d.2) / b,
        l_total: terms.total,
        t: data.items.iter().map(|i| i.t as f64).sum::<f64>() / n as f64,
        wall_ms: 0.0,
    };
    let stride = if cfg.mode.dual_branch() { 2 } else { 1 };
    for i in 0..n {
        if i % stride == 0 {
            rec.l_diff_src += terms.l_diff[i] / b;
            rec.l_attr_src += terms.l_attr[i] / b;
        } else {
            rec.l_diff_tar += terms.l_diff[i] / b;
            rec.l_attr_tar += terms.l_attr[i] / b;
        }
    }
    let grads = grads.expect("gradients requested");
    if !rec.all_finite() || !grads.all_finite() {
        return Err(Error::NonFinite {
            context: format!("training step {step}: {}", serde_json::to_string(&rec).unwrap_or_default()),
        });
    }
    opt.apply(&mut model.net.params, &grads);
    rec.wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(rec)
}

fn new_optimizer(model: &VelocityModel, cfg: &TrainConfig) -> RmsProp<f32> {
    let mut opt = RmsProp::new(&model.net.params, cfg.learning_rate);
    opt.clip_norm = cfg.clip_norm;
    opt
}

fn check_encoder(enc: Option<&AttrEncoder>, model: &VelocityModel) -> Result<()> {
    if let Some(e) = enc {
        if e.arch().size != model.arch().size || e.arch().attrs != model.arch().attrs {
            return Err(Error::invalid("encoder and velocity model disagree on resolution or attribute count"));
        }
    }
    Ok(())
}

/// One single-branch step on `hq` with prompt `attrs`. With `λ = 0` this is
/// the plain flow-matching step.
pub fn train_step_aal(
    model: &mut VelocityModel,
    opt: &mut RmsProp<f32>,
    enc: Option<&AttrEncoder>,
    hq: &Image,
    attrs: &AttrVector,
    cfg: &TrainConfig,
    r: &mut SeededRng,
) -> Result<StepRecord> {
    check_encoder(enc, model)?;
    let cfg1 = TrainConfig { batch_size: 1, mode: if cfg.mode.dual_branch() { TrainMode::Aal } else { cfg.mode }, ..cfg.clone() };
    let item = single_item(hq, attrs, enc, &cfg1, r)?;
    apply_step(model, opt, enc, &StepData { items: vec![item], pairs: vec![] }, &cfg1, opt.step as usize + 1)
}

/// One dual-branch step on `pair`.
pub fn train_step_sdt(
    model: &mut VelocityModel,
    opt: &mut RmsProp<f32>,
    enc: Option<&AttrEncoder>,
    pair: &PairRecord,
    cfg: &TrainConfig,
    r: &mut SeededRng,
) -> Result<StepRecord> {
    check_encoder(enc, model)?;
    let cfg1 = TrainConfig { batch_size: 1, mode: if cfg.mode.dual_branch() { cfg.mode } else { TrainMode::Sdt }, ..cfg.clone() };
    let items = pair_items(pair, enc, &cfg1, r)?;
    let pairs = vec![DualPair { src: 0, tar: 1, edited_index: pair.edited_index }];
    apply_step(model, opt, enc, &StepData { items: items.to_vec(), pairs }, &cfg1, opt.step as usize + 1)
}

/// In-memory training state over a loaded corpus.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: VelocityModel,
    pub opt: RmsProp<f32>,
    /// Number of completed steps.
    pub step: usize,
    pairs: Vec<PairRecord>,
    encoder: Option<AttrEncoder>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, pairs: Vec<PairRecord>, encoder: Option<AttrEncoder>) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::InsufficientData("training corpus is empty".into()));
        }
        if cfg.mode.needs_encoder() && encoder.is_none() {
            return Err(Error::invalid(format!("mode {} needs an attribute encoder", cfg.mode.name())));
        }
        let s = cfg.arch.size;
        for p in &pairs {
            p.validate()?;
            if p.src_image.shape() != (s, s, 3) || p.src_attrs.len() != cfg.arch.attrs {
                return Err(Error::shape((s, s, 3), p.src_image.shape()));
            }
        }
        let encoder = if cfg.mode.needs_encoder() { encoder } else { None };
        let model = VelocityModel::new(cfg.arch, cfg.seed);
        check_encoder(encoder.as_ref(), &model)?;
        let opt = new_optimizer(&model, &cfg);
        Ok(Self { cfg, model, opt, step: 0, pairs, encoder })
    }

    pub fn encoder(&self) -> Option<&AttrEncoder> {
        self.encoder.as_ref()
    }

    /// Synthesises the data of step `step` (1-based).
    fn prepare(&self, step: usize) -> Result<StepData> {
        let step_seed = rng::derive(self.cfg.seed, purpose::TRAIN, step as u64);
        let enc = self.encoder.as_ref();
        let mut items = Vec::new();
        let mut pairs = Vec::new();
        for b in 0..self.cfg.batch_size {
            let mut r = rng::rng_from(rng::derive(step_seed, purpose::TRAIN, b as u64));
            let rec = &self.pairs[r.random_range(0..self.pairs.len())];
            if self.cfg.mode.dual_branch() {
                let base = items.len();
                items.extend(pair_items(rec, enc, &self.cfg, &mut r)?);
                pairs.push(DualPair { src: base, tar: base + 1, edited_index: rec.edited_index });
            } else {
                let (img, attrs) = if r.random::<bool>() {
                    (&rec.tar_image, &rec.tar_attrs)
                } else {
                    (&rec.src_image, &rec.src_attrs)
                };
                items.push(single_item(img, attrs, enc, &self.cfg, &mut r)?);
            }
        }
        Ok(StepData { items, pairs })
    }

    /// Runs up to `n` further steps (never past `steps_total`), calling
    /// `on_step` after each.
    pub fn run(&mut self, n: usize, mut on_step: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<Vec<StepRecord>> {
        let end = (self.step + n).min(self.cfg.steps_total);
        let mut out = Vec::with_capacity(end - self.step);
        while self.step < end {
            let first = self.step + 1;
            let count = PREFETCH.min(end - self.step);
            let data = par::map_range(count, |j| self.prepare(first + j));
            for d in data {
                let d = d?;
                let rec = apply_step(&mut self.model, &mut self.opt, self.encoder.as_ref(), &d, &self.cfg, self.step + 1)?;
                self.step += 1;
                on_step(self, &rec)?;
                out.push(rec);
            }
        }
        Ok(out)
    }

    /// Model weights, optimiser state and the step counter.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta["step"] = self.step.into();
        ck.meta["seed"] = self.cfg.seed.into();
        ck.meta["mode"] = self.cfg.mode.name().into();
        ck.meta["opt_step"] = self.opt.step.into();
        ck.push_params("opt.v", &self.opt.second_moment);
        ck
    }

    /// Restores the state saved by [`Trainer::to_checkpoint`].
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.expect_kind(flowcore::CHECKPOINT_KIND)?;
        let field = |k: &str| {
            ck.meta
                .get(k)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| Error::format("training checkpoint", format!("missing `{k}`")))
        };
        if field("seed")? != self.cfg.seed || ck.meta["mode"] != self.cfg.mode.name() {
            return Err(Error::invalid("checkpoint was written by a run with a different seed or mode"));
        }
        let model = VelocityModel::from_checkpoint(ck)?;
        if *model.arch() != self.cfg.arch {
            return Err(Error::invalid("checkpoint architecture differs from the configuration"));
        }
        let step = field("step")? as usize;
        if step > self.cfg.steps_total {
            return Err(Error::invalid(format!("checkpoint step {step} exceeds steps_total")));
        }
        let mut opt = new_optimizer(&model, &self.cfg);
        ck.read_params("opt.v", &mut opt.second_moment)?;
        opt.step = field("opt_step")?;
        self.model = model;
        self.opt = opt;
        self.step = step;
        Ok(())
    }
}

/// Files written by [`train`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
    pub last: Option<StepRecord>,
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.ckpt"))
}

fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    match fs::read_to_string(path) {
        Ok(text) => crate::synthgen::read_jsonl(&text, "training log"),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Loads the corpus and encoder named in `cfg`, trains, and writes
/// checkpoints every `checkpoint_every` steps, a final copy, and the JSONL
/// step log under `out_dir`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = Manifest::load(&cfg.corpus_path)?;
    if cfg.mode.dual_branch() && !manifest.is_paired() {
        return Err(Error::invalid(format!(
            "mode {} needs a paired corpus; {} has records without a single flipped attribute",
            cfg.mode.name(),
            cfg.corpus_path.display()
        )));
    }
    let encoder = if cfg.mode.needs_encoder() {
        let path = cfg
            .encoder_path
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("mode {} needs encoder_path", cfg.mode.name())))?;
        Some(AttrEncoder::load(path)?)
    } else {
        None
    };
    let pairs = manifest.load_all_pairs()?;
    let mut trainer = Trainer::new(cfg.clone(), pairs, encoder)?;

    let ck_dir = out_dir.join(CHECKPOINT_DIR);
    fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut kept = Vec::new();
    if let Some(path) = &cfg.resume_from {
        trainer.restore(&Checkpoint::load(path)?)?;
        kept = read_log(&log_path)?;
        kept.retain(|r| r.step <= trainer.step);
    }
    let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut text = String::new();
    for r in &kept {
        text.push_str(&serde_json::to_string(r).expect("record serialises"));
        text.push('\n');
    }
    log.write_all(text.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    let mut checkpoints: Vec<PathBuf> = (1..=trainer.step / cfg.checkpoint_every)
        .map(|i| checkpoint_path(out_dir, i * cfg.checkpoint_every))
        .filter(|p| p.exists())
        .collect();
    let remaining = cfg.steps_total - trainer.step;
    let records = trainer.run(remaining, |t, rec| {
        let line = serde_json::to_string(rec).expect("record serialises") + "\n";
        log.write_all(line.as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        if t.step % cfg.checkpoint_every == 0 {
            let p = checkpoint_path(out_dir, t.step);
            t.to_checkpoint().save(&p)?;
            checkpoints.push(p);
        }
        Ok(())
    })?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_checkpoint = ck_dir.join(FINAL_CHECKPOINT);
    trainer.to_checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        checkpoints,
        log_path,
        last: records.last().cloned().or(kept.last().cloned()),
    })
}

/// Reads a training log written by [`train`].
pub fn load_log(path: &Path) -> Result<Vec<StepRecord>> {
    read_log(path)
}
