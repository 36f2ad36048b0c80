//! Run configuration: one JSON document holding every module's settings,
//! loaded from defaults, an optional file, and dotted-key overrides.

use std::path::PathBuf;

use facerestore::attrenc::EncoderTrainConfig;
use facerestore::degrade::{DegradeConfig, ParamRanges};
use facerestore::flowcore::SamplerConfig;
use facerestore::flowedit::EditSettings;
use facerestore::forge::QcThresholds;
use facerestore::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Input and model locations shared by the commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Corpus directory or manifest file.
    pub corpus: Option<PathBuf>,
    /// Attribute-encoder checkpoint.
    pub encoder: Option<PathBuf>,
    /// Velocity-model checkpoint.
    pub model: Option<PathBuf>,
    /// Single input image for `restore` and `degrade`.
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthgenSection {
    pub count: usize,
}

impl Default for SynthgenSection {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSection {
    pub ranges: ParamRanges,
    /// Fixed degradation; when absent one is drawn per image from `ranges`.
    pub fixed: Option<DegradeConfig>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RestoreSection {
    /// Prompt such as `glasses=1,smile=0`; unnamed attributes stay at 0.5.
    pub attrs: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeSection {
    pub thresholds: QcThresholds,
    /// Also write discarded edits for inspection.
    pub dump_rejects: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// First manifest record used by `eval` and `grid`.
    pub offset: usize,
    /// Number of records; `None` means to the end.
    pub limit: Option<usize>,
    /// Rows in the `grid` contact sheet.
    pub grid_rows: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { offset: 0, limit: None, grid_rows: 8 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Global seed. Every module seed below is overwritten with it during
    /// resolution; modules derive their own per-purpose streams from it.
    pub seed: u64,
    pub paths: Paths,
    pub synthgen: SynthgenSection,
    pub degrade: DegradeSection,
    pub encoder: EncoderTrainConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub edit: EditSettings,
    pub forge: ForgeSection,
    pub restore: RestoreSection,
    pub eval: EvalSection,
}

/// Parses an override value as JSON, falling back to a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `dotted.key` in `doc`. Every segment must already exist, so typos
/// are reported instead of silently creating new keys; `null` leaves are
/// replaced.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::validation(format!("override `{assignment}` is not of the form key=value")))?;
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| CliError::validation(format!("`{}` is not a section", parts[..i].join("."))))?;
        node = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::validation(format!("unknown config key `{key}`")))?;
    }
    *node = parse_value(raw);
    Ok(())
}

impl RunConfig {
    /// Defaults, then `file`, then `overrides`, in that order.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc = serde_json::to_value(RunConfig::default()).expect("defaults serialise");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::validation(format!("cannot read config {path}: {e}")))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| CliError::validation(format!("config {path} is not valid JSON: {e}")))?;
            // Parse once on its own so unknown keys are rejected with a
            // precise message before merging.
            serde_json::from_value::<RunConfig>(user.clone())
                .map_err(|e| CliError::validation(format!("config {path}: {e}")))?;
            merge(&mut doc, user);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| CliError::validation(format!("invalid configuration: {e}")))?;
        cfg.resolve();
        Ok(cfg)
    }

    /// Copies the global seed into every module and the shared paths into
    /// the training section where it has none of its own.
    fn resolve(&mut self) {
        if self.train.corpus_path.as_os_str().is_empty() {
            if let Some(c) = &self.paths.corpus {
                self.train.corpus_path = c.clone();
            }
        }
        if self.train.encoder_path.is_none() {
            self.train.encoder_path = self.paths.encoder.clone();
        }
        let s = self.seed;
        self.encoder.seed = s;
        self.train.seed = s;
        self.sampler.seed = s;
        self.edit.seed = s;
    }

    /// Content hash of `(command, resolved config)`.
    pub fn run_hash(&self, command: &str) -> String {
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(self).expect("config serialises"));
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursively overlays `src` onto `dst`; objects merge key by key, every
/// other value replaces.
fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let cfg = RunConfig::load(None, &["train.weights.lambda_attr=0.5".into(), "seed=7".into()]).unwrap();
        assert_eq!(cfg.train.weights.lambda_attr, 0.5);
        assert_eq!(cfg.train.seed, 7);
        assert!(RunConfig::load(None, &["train.bogus=1".into()]).is_err());
        assert!(RunConfig::load(None, &["train.steps_total=\"many\"".into()]).is_err());
        let p = RunConfig::load(None, &["paths.corpus=some/dir".into()]).unwrap();
        assert_eq!(p.paths.corpus, Some(PathBuf::from("some/dir")));
    }

    #[test]
    fn hash_depends_on_command_and_config() {
        let a = RunConfig::default();
        let b = RunConfig { seed: 1, ..Default::default() };
        assert_eq!(a.run_hash("train"), a.run_hash("train"));
        assert_ne!(a.run_hash("train"), a.run_hash("eval"));
        assert_ne!(a.run_hash("train"), b.run_hash("train"));
    }
}
