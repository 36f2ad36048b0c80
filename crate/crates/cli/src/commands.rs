//! One function per subcommand. Each writes its artifacts under `dir` and
//! returns a JSON summary for stdout.

use std::fs;
use std::path::{Path, PathBuf};

use facerestore::attrenc::{self, AttrEncoder};
use facerestore::checkpoint::Checkpoint;
use facerestore::degrade;
use facerestore::flowcore::VelocityModel;
use facerestore::flowedit;
use facerestore::forge;
use facerestore::metrics::{self, EvalConfig};
use facerestore::rng::{self, purpose};
use facerestore::synthgen::{self, AttrVector, Manifest, ATTR_COUNT, ATTR_NAMES};
use facerestore::trainer;
use facerestore::Image;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::CliError;

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    p.as_deref()
        .ok_or_else(|| CliError::validation(format!("`{key}` is required for this command")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("value serialises") + "\n";
    fs::write(path, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}

fn load_model(cfg: &RunConfig) -> Result<VelocityModel, CliError> {
    let path = require(&cfg.paths.model, "paths.model")?;
    Ok(VelocityModel::from_checkpoint(&Checkpoint::load(path)?)?)
}

fn load_encoder(cfg: &RunConfig) -> Result<AttrEncoder, CliError> {
    Ok(AttrEncoder::load(require(&cfg.paths.encoder, "paths.encoder")?)?)
}

fn load_corpus(cfg: &RunConfig) -> Result<Manifest, CliError> {
    Ok(Manifest::load(require(&cfg.paths.corpus, "paths.corpus")?)?)
}

/// Parses `glasses=1,smile=0`; attributes not named stay at 0.5.
pub fn parse_attrs(spec: &str) -> Result<AttrVector, CliError> {
    let mut v = AttrVector::template(ATTR_COUNT);
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (name, value) = part
            .split_once('=')
            .ok_or_else(|| CliError::validation(format!("attribute `{part}` is not of the form name=value")))?;
        let k = synthgen::attr_index(name.trim()).ok_or_else(|| {
            CliError::validation(format!("unknown attribute `{name}`; expected one of {}", ATTR_NAMES.join(", ")))
        })?;
        let x: f32 = value
            .trim()
            .parse()
            .map_err(|_| CliError::validation(format!("attribute value `{value}` is not a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(CliError::validation(format!("attribute value {x} outside [0, 1]")));
        }
        v = v.with(k, x);
    }
    Ok(v)
}

fn validate(cfg: &RunConfig, command: &str) -> Result<(), CliError> {
    let v = |r: facerestore::Result<()>| r.map_err(CliError::from_validation);
    match command {
        "synthgen" if cfg.synthgen.count == 0 => return Err(CliError::validation("synthgen.count must be positive")),
        "degrade" => {
            v(cfg.degrade.ranges.validate())?;
            if let Some(d) = &cfg.degrade.fixed {
                v(d.validate())?;
            }
        }
        "train-encoder" => v(cfg.encoder.validate())?,
        "train" => v(cfg.train.validate())?,
        "restore" => {
            v(cfg.sampler.validate())?;
            parse_attrs(&cfg.restore.attrs)?;
        }
        "edit" => v(cfg.edit.validate())?,
        "forge" => {
            v(cfg.edit.validate())?;
            v(cfg.forge.thresholds.validate())?;
        }
        "eval" | "grid" => {
            v(cfg.sampler.validate())?;
            v(cfg.degrade.ranges.validate())?;
        }
        _ => {}
    }
    Ok(())
}

/// Checks the configuration for `command` and runs it in `dir`.
pub fn run(command: &str, cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    validate(cfg, command)?;
    match command {
        "synthgen" => synthgen_cmd(cfg, dir),
        "degrade" => degrade_cmd(cfg, dir),
        "train-encoder" => train_encoder_cmd(cfg, dir),
        "train" => train_cmd(cfg, dir),
        "restore" => restore_cmd(cfg, dir),
        "edit" => edit_cmd(cfg, dir),
        "forge" => forge_cmd(cfg, dir),
        "eval" => eval_cmd(cfg, dir),
        "grid" => grid_cmd(cfg, dir),
        other => Err(CliError::validation(format!("unknown command `{other}`"))),
    }
}

fn synthgen_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let summary = synthgen::build_corpus(cfg.synthgen.count, cfg.seed, &dir.join("corpus"))?;
    Ok(json!({
        "count": summary.count,
        "per_edited_index": summary.per_edited_index,
        "manifest": summary.manifest_path,
    }))
}

fn degrade_config(cfg: &RunConfig, i: usize) -> Result<degrade::DegradeConfig, CliError> {
    match &cfg.degrade.fixed {
        Some(d) => Ok(*d),
        None => Ok(degrade::sample_degrade_config(
            rng::derive(cfg.seed, purpose::DEGRADE, i as u64),
            &cfg.degrade.ranges,
        )?),
    }
}

#[derive(Serialize)]
struct DegradedRecord {
    id: String,
    src_png: String,
    lq_png: String,
    config: degrade::DegradeConfig,
}

fn degrade_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let mut rows = Vec::new();
    let inputs: Vec<(String, PathBuf)> = match (&cfg.paths.image, &cfg.paths.corpus) {
        (Some(img), _) => vec![("image".into(), img.clone())],
        (None, Some(_)) => {
            let m = load_corpus(cfg)?;
            m.records.iter().map(|r| (r.id.clone(), m.dir.join(&r.src_png))).collect()
        }
        (None, None) => return Err(CliError::validation("degrade needs `paths.image` or `paths.corpus`")),
    };
    let out = dir.join("degraded");
    fs::create_dir_all(&out).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", out.display())))?;
    for (i, (id, path)) in inputs.iter().enumerate() {
        let d = degrade_config(cfg, i)?;
        let lq = degrade::degrade(&Image::load_png(path)?, &d)?;
        let name = format!("lq_{i:06}.png");
        lq.save_png(&out.join(&name))?;
        rows.push(DegradedRecord { id: id.clone(), src_png: path.to_string_lossy().into_owned(), lq_png: name, config: d });
    }
    let text: String = rows.iter().map(|r| serde_json::to_string(r).expect("row serialises") + "\n").collect();
    let manifest = out.join("degraded.jsonl");
    fs::write(&manifest, text).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", manifest.display())))?;
    Ok(json!({ "count": rows.len(), "manifest": manifest }))
}

fn train_encoder_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let corpus = load_corpus(cfg)?;
    let (enc, report) = attrenc::train_encoder(&corpus, &cfg.encoder)?;
    let ck = dir.join("encoder.ckpt");
    enc.save(&ck)?;
    write_json(&dir.join("encoder_report.json"), &report)?;
    Ok(json!({ "checkpoint": ck, "report": report }))
}

fn train_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    if cfg.train.corpus_path.as_os_str().is_empty() {
        return Err(CliError::validation("`paths.corpus` is required for this command"));
    }
    let outcome = trainer::train(&cfg.train, dir)?;
    Ok(serde_json::to_value(outcome).expect("outcome serialises"))
}

fn restore_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let model = load_model(cfg)?;
    let attrs = parse_attrs(&cfg.restore.attrs)?;
    let input = Image::load_png(require(&cfg.paths.image, "paths.image")?)?;
    let s = model.arch().size;
    let lq_up = if input.shape() == (s, s, 3) { input } else { degrade::upsample_to_model_res(&input, s, s)? };
    let out = metrics::restore(&model, &lq_up, &attrs, &cfg.sampler)?;
    let path = dir.join("restored.png");
    out.save_png(&path)?;
    Ok(json!({ "restored": path, "attrs": attrs.values() }))
}

fn edit_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let model = load_model(cfg)?;
    let corpus = load_corpus(cfg)?;
    let report = flowedit::edit_batch(&model, &corpus, &cfg.edit, &dir.join("edited"))?;
    write_json(&dir.join("edit_report.json"), &report)?;
    Ok(serde_json::to_value(report).expect("report serialises"))
}

fn forge_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let model = load_model(cfg)?;
    let enc = load_encoder(cfg)?;
    let corpus = load_corpus(cfg)?;
    let report = forge::forge_dataset(
        &corpus,
        &model,
        &enc,
        &cfg.edit,
        &cfg.forge.thresholds,
        &dir.join("forged"),
        cfg.forge.dump_rejects,
    )?;
    Ok(serde_json::to_value(report).expect("report serialises"))
}

fn eval_pairs(cfg: &RunConfig, max: Option<usize>) -> Result<Vec<synthgen::PairRecord>, CliError> {
    let corpus = load_corpus(cfg)?;
    let start = cfg.eval.offset.min(corpus.len());
    let mut end = cfg.eval.limit.map_or(corpus.len(), |l| (start + l).min(corpus.len()));
    if let Some(m) = max {
        end = end.min(start + m);
    }
    (start..end).map(|i| corpus.load_pair(i).map_err(CliError::from)).collect()
}

fn eval_config(cfg: &RunConfig) -> EvalConfig {
    EvalConfig { sampler: cfg.sampler, degrade_ranges: cfg.degrade.ranges.clone(), seed: cfg.seed }
}

fn eval_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let model = load_model(cfg)?;
    let enc = load_encoder(cfg)?;
    let pairs = eval_pairs(cfg, None)?;
    let (records, report) = metrics::evaluate_records(&model, &enc, &pairs, &eval_config(cfg))?;
    write_json(&dir.join("eval_report.json"), &report)?;
    let csv = dir.join("eval_records.csv");
    fs::write(&csv, metrics::records_csv(&records)).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", csv.display())))?;
    Ok(serde_json::to_value(report).expect("report serialises"))
}

fn grid_cmd(cfg: &RunConfig, dir: &Path) -> Result<Value, CliError> {
    let model = load_model(cfg)?;
    let pairs = eval_pairs(cfg, Some(cfg.eval.grid_rows))?;
    let path = dir.join("grid.png");
    metrics::grid(&model, &pairs, &eval_config(cfg), &path)?;
    Ok(json!({ "grid": path, "rows": pairs.len() }))
}
