//! JSON experiment configs and task parameter parsing. Command-line flags
//! take precedence over config values, which take precedence over defaults.

use std::collections::BTreeMap;
use std::path::Path;

use lglab_core::tasks::TaskSpec;
use serde::Deserialize;
use serde_json::{Map, Value};

use crate::manifest::read_bytes;
use crate::CliError;

/// Every field is optional; unknown fields are rejected.
#[derive(Clone, Debug, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: Option<String>,
    pub params: Option<BTreeMap<String, Value>>,
    pub seed: Option<u64>,
    pub d: Option<usize>,
    pub batch: Option<usize>,
    pub max_steps: Option<usize>,
    pub stop_loss: Option<f64>,
    pub lr_hidden: Option<f64>,
    pub lr_embed: Option<f64>,
    pub train_len: Option<usize>,
    pub train_lens: Option<Vec<usize>>,
    pub test_lens: Option<Vec<usize>>,
    pub seeds: Option<Vec<u64>>,
    pub param_grid: Option<Vec<f64>>,
    pub eval_batches: Option<usize>,
    pub eval_batch_size: Option<usize>,
}

impl ExperimentConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let bytes = read_bytes(path)?;
        serde_json::from_slice(&bytes).map_err(|e| {
            let off = line_col_offset(&bytes, e.line(), e.column());
            CliError::Usage(format!("{}: byte offset {off}: {e}", path.display()))
        })
    }
}

/// Byte offset of a 1-based line and column as reported by serde_json.
pub fn line_col_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    let start: usize = bytes.split(|&b| b == b'\n').take(line.saturating_sub(1)).map(|l| l.len() + 1).sum();
    (start + column.saturating_sub(1)).min(bytes.len())
}

/// Parses `key=value,key=value`; values are read as JSON, falling back to
/// strings.
pub fn parse_params(text: &str) -> Result<BTreeMap<String, Value>, CliError> {
    let mut out = BTreeMap::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once('=').ok_or_else(|| CliError::Usage(format!("parameter '{item}' is not key=value")))?;
        let value = serde_json::from_str(v.trim()).unwrap_or_else(|_| Value::String(v.trim().to_string()));
        out.insert(k.trim().to_string(), value);
    }
    Ok(out)
}

fn task_defaults(name: &str) -> Result<(&'static str, Value), CliError> {
    Ok(match name {
        "simple" => ("SimpleTask", serde_json::json!({"omega": 1.0})),
        "modp" => ("ModPTask", serde_json::json!({"period": 3, "k": 0})),
        "kgram" => ("KGram", serde_json::json!({"k": 2, "s_vocab": 2})),
        other => return Err(CliError::Usage(format!("unknown task '{other}'; expected simple, modp or kgram"))),
    })
}

/// Builds a task from its short name and parameter overrides.
pub fn build_task(name: &str, params: &BTreeMap<String, Value>) -> Result<TaskSpec, CliError> {
    let (variant, defaults) = task_defaults(name)?;
    let mut obj: Map<String, Value> = defaults.as_object().expect("object").clone();
    for (k, v) in params {
        if !obj.contains_key(k) {
            let known: Vec<&String> = obj.keys().collect();
            return Err(CliError::Usage(format!("task {name} has no parameter '{k}' (known: {known:?})")));
        }
        obj.insert(k.clone(), v.clone());
    }
    obj.insert("variant".into(), Value::String(variant.into()));
    let task: TaskSpec = serde_json::from_value(Value::Object(obj))
        .map_err(|e| CliError::Usage(format!("bad parameters for task {name}: {e}")))?;
    task.validate()?;
    Ok(task)
}

/// Resolves the task from flags and config: `--task` over `task`, and
/// `--params` entries over `params` entries.
pub fn resolve_task(flag_task: Option<&str>, flag_params: Option<&str>, cfg: &ExperimentConfig) -> Result<TaskSpec, CliError> {
    let name =
        flag_task.or(cfg.task.as_deref()).ok_or_else(|| CliError::Usage("no task given (--task or config \"task\")".into()))?;
    let mut params = cfg.params.clone().unwrap_or_default();
    if let Some(p) = flag_params {
        params.extend(parse_params(p)?);
    }
    build_task(name, &params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_and_tasks() {
        let p = parse_params("period=5, k=2").unwrap();
        assert_eq!(build_task("modp", &p).unwrap(), TaskSpec::ModPTask { period: 5, k: 2 });
        assert_eq!(build_task("kgram", &BTreeMap::new()).unwrap(), TaskSpec::KGram { k: 2, s_vocab: 2 });
        assert!(build_task("modp", &parse_params("omega=1").unwrap()).is_err());
        assert!(build_task("modp", &parse_params("period=2,k=5").unwrap()).is_err());
        assert!(build_task("nope", &BTreeMap::new()).is_err());
        assert!(parse_params("period").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"task": "modp", "params": {"period": 4, "k": 1}}"#).unwrap();
        assert_eq!(resolve_task(None, None, &cfg).unwrap(), TaskSpec::ModPTask { period: 4, k: 1 });
        assert_eq!(resolve_task(None, Some("k=3"), &cfg).unwrap(), TaskSpec::ModPTask { period: 4, k: 3 });
        assert_eq!(
            resolve_task(Some("kgram"), None, &ExperimentConfig::default()).unwrap(),
            TaskSpec::KGram { k: 2, s_vocab: 2 }
        );
    }

    #[test]
    fn offsets() {
        let b = b"{\n  \"a\": x\n}";
        assert_eq!(line_col_offset(b, 2, 8), 9);
        assert_eq!(b[9], b'x');
    }

    #[test]
    fn unknown_config_field_rejected() {
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"dd": 3}"#).is_err());
    }
}
