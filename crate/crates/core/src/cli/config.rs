use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::{PairSampling, DEFAULT_IGNORE_INDEX};
use crate::pipeline::{PipelineConfig, StageToggles};

/// Image directory with an optional parallel directory of label PNGs
/// sharing file stems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub images: PathBuf,
    #[serde(default)]
    pub labels: Option<PathBuf>,
    #[serde(default = "default_ignore")]
    pub ignore_index: u32,
}

fn default_ignore() -> u32 {
    DEFAULT_IGNORE_INDEX
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoherenceConfig {
    /// 1-based layers whose raw similarity maps are scored.
    pub layers: Vec<usize>,
    pub sampling: PairSampling,
}

impl Default for CoherenceConfig {
    fn default() -> Self {
        Self {
            layers: Vec::new(),
            sampling: PairSampling::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub weights: PathBuf,
    pub text_bank: PathBuf,
    /// A single image; mutually exclusive with `dataset`.
    #[serde(default)]
    pub input: Option<PathBuf>,
    #[serde(default)]
    pub dataset: Option<DatasetConfig>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    /// Each rung lists the toggles it switches on in addition to the previous rungs.
    #[serde(default = "default_ladder")]
    pub ladder: Vec<Vec<String>>,
    #[serde(default)]
    pub coherence: CoherenceConfig,
    /// Also write CSV tables next to JSON reports.
    #[serde(default)]
    pub emit_csv: bool,
    /// Write raw logits next to each label map.
    #[serde(default)]
    pub save_logits: bool,
}

pub fn default_ladder() -> Vec<Vec<String>> {
    [
        &["baseline"][..],
        &["anomaly_resolution"],
        &["attention_enhancement"],
        &["feature_aggregation"],
        &["fusion"],
    ]
    .iter()
    .map(|r| r.iter().map(|s| s.to_string()).collect())
    .collect()
}

/// Switches on the stage(s) a toggle name refers to.
pub fn apply_toggle(stages: &mut StageToggles, name: &str) -> Result<()> {
    match name {
        "baseline" => {}
        "anomaly_resolution" => stages.anomaly_resolution = true,
        "attention_enhancement" => stages.attention_enhancement = true,
        "pre_aggregation" => stages.pre_aggregation = true,
        "post_aggregation" => stages.post_aggregation = true,
        "feature_aggregation" => {
            stages.pre_aggregation = true;
            stages.post_aggregation = true;
        }
        "fusion" => stages.fusion = true,
        other => return Err(Error::Config(format!("unknown stage toggle \"{other}\" in ladder"))),
    }
    Ok(())
}

/// One evaluated configuration of an ablation ladder.
#[derive(Debug, Clone, PartialEq)]
pub struct Rung {
    pub name: String,
    pub stages: StageToggles,
}

/// Expands a ladder into cumulative stage sets, starting from everything off.
pub fn expand_ladder(ladder: &[Vec<String>]) -> Result<Vec<Rung>> {
    if ladder.is_empty() {
        return Err(Error::Config("ablation ladder is empty".into()));
    }
    let mut stages = StageToggles::none();
    let mut rungs = Vec::with_capacity(ladder.len());
    for (i, rung) in ladder.iter().enumerate() {
        for name in rung {
            apply_toggle(&mut stages, name)?;
        }
        let name = if rung.is_empty() || rung.iter().all(|n| n == "baseline") {
            if i == 0 {
                "baseline".to_string()
            } else {
                format!("rung_{i}")
            }
        } else {
            rung.iter()
                .filter(|n| *n != "baseline")
                .map(|n| format!("+{n}"))
                .collect::<String>()
        };
        rungs.push(Rung { name, stages });
    }
    Ok(rungs)
}

/// Sets the value at a dotted path inside a JSON document, creating objects
/// along the way. The value is parsed as JSON and falls back to a string.
pub fn set_path(doc: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut cur = doc;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key \"{path}\"")));
    }
    for (i, part) in parts.iter().enumerate() {
        if !cur.is_object() {
            if cur.is_null() {
                *cur = Value::Object(Default::default());
            } else {
                return Err(Error::Config(format!(
                    "override \"{path}\": \"{}\" is not an object",
                    parts[..i].join(".")
                )));
            }
        }
        let obj = cur.as_object_mut().expect("object checked above");
        if i + 1 == parts.len() {
            obj.insert((*part).to_owned(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_owned()).or_insert(Value::Null);
    }
    unreachable!("path has at least one part")
}

/// Explicit values that take precedence over the configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub weights: Option<PathBuf>,
    pub text_bank: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub layers: Option<Vec<usize>>,
    /// `key.path=value` pairs.
    pub set: Vec<String>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Reads an optional config file and applies overrides on top.
    pub fn resolve(file: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut doc = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Value::Object(Default::default()),
        };
        let path_value = |p: &PathBuf| Value::String(p.to_string_lossy().into_owned());
        let obj = doc
            .as_object_mut()
            .ok_or_else(|| Error::Config("configuration must be a JSON object".into()))?;
        if let Some(p) = &overrides.weights {
            obj.insert("weights".into(), path_value(p));
        }
        if let Some(p) = &overrides.text_bank {
            obj.insert("text_bank".into(), path_value(p));
        }
        if let Some(p) = &overrides.input {
            obj.insert("input".into(), path_value(p));
        }
        if let Some(p) = &overrides.output_dir {
            obj.insert("output_dir".into(), path_value(p));
        }
        if let Some(s) = overrides.seed {
            obj.insert("seed".into(), Value::from(s));
        }
        if let Some(p) = &overrides.images {
            set_path(&mut doc, "dataset.images", &Value::String(p.to_string_lossy().into_owned()).to_string())?;
        }
        if let Some(p) = &overrides.labels {
            set_path(&mut doc, "dataset.labels", &Value::String(p.to_string_lossy().into_owned()).to_string())?;
        }
        if let Some(layers) = &overrides.layers {
            set_path(&mut doc, "coherence.layers", &serde_json::to_string(layers).expect("layers serialize"))?;
        }
        for item in &overrides.set {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override \"{item}\" is not key=value")))?;
            set_path(&mut doc, key.trim(), value.trim())?;
        }
        serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that every referenced input exists.
    pub fn check_inputs(&self) -> Result<()> {
        let mut required = vec![&self.weights, &self.text_bank];
        if let Some(p) = &self.input {
            required.push(p);
        }
        if let Some(d) = &self.dataset {
            required.push(&d.images);
            if let Some(l) = &d.labels {
                required.push(l);
            }
        }
        for p in required {
            if !p.exists() {
                return Err(Error::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
                ));
            }
        }
        if self.input.is_some() && self.dataset.is_some() {
            return Err(Error::Config("set either input or dataset, not both".into()));
        }
        Ok(())
    }
}
