//! Run-config loading: JSON file, merged fragments, dotted `--set` overrides.
//!
//! Overrides are applied to the fully defaulted document, so every settable
//! key exists; keys match case-insensitively (`guidance.T1` is `t1`).

use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use trajguide::evaluation::toy_prompt;
use trajguide::pipeline::{RunConfig, TrajectoryRef};
use trajguide::trajectory::BoxTrajectory;

use crate::failure::{CmdResult, Failure};

/// Prompt given as text plus the word to control; tokenized with the toy
/// tokenizer against the final testbed vocabulary.
#[derive(Debug, Clone, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct TextPrompt {
    text: String,
    target: String,
}

pub fn read_json(path: &Path) -> CmdResult<Value> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::reading(path, e))?;
    serde_json::from_str(&text).map_err(|e| Failure::reading(path, e))
}

/// Recursive object merge; `over` wins on scalars and arrays.
pub fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn find_key<'a>(map: &'a Map<String, Value>, key: &str) -> Option<&'a String> {
    if let Some((k, _)) = map.get_key_value(key) {
        return Some(k);
    }
    let mut hits = map.keys().filter(|k| k.eq_ignore_ascii_case(key));
    match (hits.next(), hits.next()) {
        (Some(k), None) => Some(k),
        _ => None,
    }
}

/// Apply `path=value`; the value is parsed as JSON and falls back to a string.
pub fn apply_set(doc: &mut Value, assignment: &str) -> CmdResult<String> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::invalid(format!("--set '{assignment}' is not of the form key.path=value")))?;
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    let mut cur = doc;
    let mut canonical = Vec::new();
    for seg in path.trim().split('.') {
        let map = cur
            .as_object_mut()
            .ok_or_else(|| Failure::invalid(format!("--set {path}: '{}' is not an object", canonical.join("."))))?;
        let key = find_key(map, seg)
            .cloned()
            .ok_or_else(|| Failure::invalid(format!("--set {path}: unknown config key '{seg}'")))?;
        canonical.push(key.clone());
        cur = map.get_mut(&key).expect("key was just found");
    }
    *cur = value;
    Ok(canonical.join("."))
}

/// Everything a command needs from a config file.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub run: RunConfig,
    pub trajectory: BoxTrajectory,
}

fn decode(doc: Value, origin: &Path) -> CmdResult<RunConfig> {
    serde_path_to_error::deserialize(doc)
        .map_err(|e| Failure::invalid(format!("{}: field '{}': {}", origin.display(), e.path(), e.inner())))
}

pub fn load(path: &Path, fragments: &[PathBuf], sets: &[String]) -> CmdResult<Loaded> {
    let mut doc = read_json(path)?;
    for frag in fragments {
        merge(&mut doc, read_json(frag)?);
    }
    let obj = doc
        .as_object_mut()
        .ok_or_else(|| Failure::invalid(format!("{}: config must be a JSON object", path.display())))?;

    // A text prompt is tokenized after overrides, once the vocabulary is final.
    let mut text_prompt = None;
    if let Some(p) = obj.get("prompt").filter(|p| p.get("text").is_some()) {
        let tp: TextPrompt = serde_json::from_value(p.clone())
            .map_err(|e| Failure::invalid(format!("{}: field 'prompt': {e}", path.display())))?;
        text_prompt = Some(tp);
        obj.insert("prompt".into(), serde_json::json!({"token_ids": [1], "target_indices": [0]}));
    }

    let run = decode(doc, path)?;
    let mut full = serde_json::to_value(&run).map_err(|e| Failure::runtime(e.to_string()))?;
    let mut touched = Vec::new();
    for s in sets {
        touched.push(apply_set(&mut full, s)?);
    }
    let mut run = decode(full, path)?;
    sync_step_counts(&mut run, &touched);

    if let Some(tp) = text_prompt.filter(|_| !touched.iter().any(|k| k.starts_with("prompt"))) {
        run.prompt = toy_prompt(&tp.text, &tp.target, run.testbed.vocab_size, run.testbed.max_tokens)
            .map_err(|e| Failure::invalid(format!("{}: field 'prompt': {e}", path.display())))?;
    }

    let base = path.parent().unwrap_or(Path::new("."));
    let trajectory = match &run.trajectory {
        TrajectoryRef::Path(p) => {
            let full = if p.is_relative() { base.join(p) } else { p.clone() };
            BoxTrajectory::load(&full).map_err(|e| Failure::reading(&full, e))?
        }
        TrajectoryRef::Inline(f) => BoxTrajectory::from_file(f)
            .map_err(|e| Failure::invalid(format!("{}: field 'trajectory': {e}", path.display())))?,
    };
    run.trajectory = TrajectoryRef::Inline(trajectory.to_file());
    Ok(Loaded { run, trajectory })
}

/// Overriding one of `T`, `T1`, `T2` keeps `T1 + T2 = T` and the testbed
/// step count in step, unless the partner key was overridden as well.
fn sync_step_counts(run: &mut RunConfig, touched: &[String]) {
    let has = |k: &str| touched.iter().any(|t| t == k);
    let g = &mut run.guidance;
    if has("guidance.total_steps") && !has("testbed.steps") {
        run.testbed.steps = g.total_steps;
    }
    if has("testbed.steps") && !has("guidance.total_steps") {
        g.total_steps = run.testbed.steps;
    }
    let t_changed = has("guidance.total_steps") || has("testbed.steps");
    match (has("guidance.t1"), has("guidance.t2")) {
        (true, false) => g.t2 = g.total_steps.saturating_sub(g.t1),
        (false, true) => g.t1 = g.total_steps.saturating_sub(g.t2),
        (false, false) if t_changed => g.t2 = g.total_steps.saturating_sub(g.t1),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn set_matches_keys_case_insensitively() {
        let mut doc = json!({"guidance": {"t1": 10, "lambda_p": 0.8}});
        let key = apply_set(&mut doc, "guidance.T1=0").unwrap();
        assert_eq!(key, "guidance.t1");
        assert_eq!(doc["guidance"]["t1"], json!(0));
    }

    #[test]
    fn set_rejects_unknown_keys() {
        let mut doc = json!({"guidance": {"t1": 10}});
        let err = apply_set(&mut doc, "guidance.t9=1").unwrap_err().to_string();
        assert!(err.contains("t9"), "{err}");
        assert!(apply_set(&mut doc, "guidance").is_err());
    }

    #[test]
    fn set_values_fall_back_to_strings() {
        let mut doc = json!({"backend": "toy", "disable": []});
        apply_set(&mut doc, "backend=other").unwrap();
        apply_set(&mut doc, "disable=[\"SC\"]").unwrap();
        assert_eq!(doc, json!({"backend": "other", "disable": ["SC"]}));
    }

    #[test]
    fn merge_is_recursive() {
        let mut a = json!({"guidance": {"t1": 10, "lambda_p": 0.8}, "seed": 1});
        merge(&mut a, json!({"guidance": {"lambda_p": 0.2}}));
        assert_eq!(a, json!({"guidance": {"t1": 10, "lambda_p": 0.2}, "seed": 1}));
    }
}
