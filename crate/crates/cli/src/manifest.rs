//! `manifest.json`: per-stage resolved config plus input and output digests.
//! Each command replaces its own stage entry and keeps the others, so one
//! output directory accumulates the whole pipeline. No timestamps, so a
//! re-run with the same inputs leaves the file byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use exaranker::corpus_io::file_sha256;
use serde::Serialize;
use serde_json::{json, Map, Value};

pub struct Stage {
    name: &'static str,
    config: Value,
    inputs: Vec<(String, PathBuf)>,
    outputs: Vec<(String, PathBuf)>,
}

impl Stage {
    pub fn new(name: &'static str, config: &impl Serialize) -> Self {
        Self {
            name,
            config: serde_json::to_value(config).expect("config serializes"),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(mut self, role: &str, path: &Path) -> Self {
        self.inputs.push((role.to_string(), path.to_path_buf()));
        self
    }

    pub fn output(mut self, role: &str, path: &Path) -> Self {
        self.outputs.push((role.to_string(), path.to_path_buf()));
        self
    }

    fn digests(files: &[(String, PathBuf)]) -> anyhow::Result<Value> {
        let mut out = Map::new();
        for (role, path) in files {
            let sha256 = file_sha256(path).with_context(|| format!("hashing {}", path.display()))?;
            out.insert(role.clone(), json!({ "path": path.display().to_string(), "sha256": sha256 }));
        }
        Ok(Value::Object(out))
    }

    /// Merges this stage into `{dir}/manifest.json`.
    pub fn write(self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join("manifest.json");
        let mut manifest = fs::read_to_string(&path)
            .ok()
            .and_then(|text| serde_json::from_str::<Value>(&text).ok())
            .filter(Value::is_object)
            .unwrap_or_else(|| json!({}));
        let root = manifest.as_object_mut().expect("object");
        root.insert(
            "tool".into(),
            json!(format!("exaranker {}", env!("CARGO_PKG_VERSION"))),
        );
        let stages = root.entry("stages").or_insert_with(|| json!({}));
        if !stages.is_object() {
            *stages = json!({});
        }
        stages.as_object_mut().expect("object").insert(
            self.name.into(),
            json!({
                "config": self.config,
                "inputs": Self::digests(&self.inputs)?,
                "outputs": Self::digests(&self.outputs)?,
            }),
        );
        write_atomic(&path, (serde_json::to_string_pretty(&manifest)? + "\n").as_bytes())?;
        Ok(path)
    }
}

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Directory holding `path`, `.` for bare file names.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Creates the parent directory of an output path.
pub fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    let dir = parent_dir(path);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))
}
