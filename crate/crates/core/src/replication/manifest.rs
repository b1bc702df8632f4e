//! Preregistration manifests: content hashes of the run inputs before a run,
//! extended with output hashes after it.
//!
//! Manifests are canonical JSON (sorted keys, no whitespace, trailing
//! newline). Input paths are relative to the pre-run manifest's directory,
//! output paths to the post-run manifest's.

use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn engine_version() -> String {
    format!("mrp {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn utc_now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

/// Canonical serialization: keys sorted (serde_json maps are ordered), compact.
pub fn canonical_json(v: &Value) -> String {
    serde_json::to_string(v).expect("json value serializes") + "\n"
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn hashed_files(base: &Path, files: &[(String, String)]) -> Result<Map<String, Value>> {
    let mut m = Map::new();
    for (label, path) in files {
        if m.contains_key(label) {
            return Err(Error::Config(format!("duplicate manifest label \"{label}\"")));
        }
        let digest = sha256_file(&resolve(base, path))?;
        m.insert(label.clone(), json!({ "path": path, "sha256": digest }));
    }
    Ok(m)
}

#[derive(Clone, Debug, Default)]
pub struct PreInputs {
    /// Labelled config files (model spec, sampler config, schema, ...).
    pub configs: Vec<(String, String)>,
    /// Optional labelled data files.
    pub data: Vec<(String, String)>,
    pub statement: String,
}

/// Builds the pre-run manifest for `out` (paths are relative to its directory).
pub fn pre_manifest(out: &Path, inputs: &PreInputs, timestamp: Option<&str>) -> Result<Value> {
    if inputs.configs.is_empty() {
        return Err(Error::Staging("a pre-run manifest needs at least one config file".into()));
    }
    let base = base_dir(out);
    let version = engine_version();
    Ok(json!({
        "configs": hashed_files(&base, &inputs.configs)?,
        "data": hashed_files(&base, &inputs.data)?,
        "engine_version": { "value": version, "sha256": sha256_hex(version.as_bytes()) },
        "statement": inputs.statement,
        "timestamp_utc": timestamp.map(str::to_string).unwrap_or_else(utc_now),
    }))
}

pub fn write_pre_manifest(out: &Path, inputs: &PreInputs, timestamp: Option<&str>) -> Result<Value> {
    let v = pre_manifest(out, inputs, timestamp)?;
    std::fs::write(out, canonical_json(&v)).map_err(|e| Error::io(out, e))?;
    Ok(v)
}

fn read_json(path: &Path) -> Result<(Vec<u8>, Value)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_slice(&bytes)?;
    Ok((bytes, v))
}

/// One failed comparison found while checking a manifest.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub label: String,
    pub expected: String,
    pub found: String,
}

fn check_section(base: &Path, section: &str, v: &Value, out: &mut Vec<Mismatch>) {
    let Some(entries) = v.get(section).and_then(Value::as_object) else {
        return;
    };
    for (label, entry) in entries {
        let path = entry.get("path").and_then(Value::as_str).unwrap_or_default();
        let expected = entry.get("sha256").and_then(Value::as_str).unwrap_or_default();
        let found = sha256_file(&resolve(base, path)).unwrap_or_else(|e| format!("unreadable: {e}"));
        if found != expected {
            out.push(Mismatch {
                label: format!("{section}.{label} ({path})"),
                expected: expected.to_string(),
                found,
            });
        }
    }
}

fn check_engine(v: &Value, out: &mut Vec<Mismatch>) {
    let recorded = v
        .pointer("/engine_version/value")
        .and_then(Value::as_str)
        .unwrap_or_default();
    if recorded != engine_version() {
        out.push(Mismatch {
            label: "engine_version".into(),
            expected: recorded.into(),
            found: engine_version(),
        });
    }
}

fn integrity(mismatches: &[Mismatch]) -> Error {
    let lines: Vec<String> = mismatches
        .iter()
        .map(|m| format!("{}: expected {}, found {}", m.label, m.expected, m.found))
        .collect();
    Error::Integrity(lines.join("; "))
}

fn read_pre(pre: &Path) -> Result<(Vec<u8>, Value)> {
    if !pre.exists() {
        return Err(Error::Staging(format!(
            "no pre-run manifest at {}; write one before the run",
            pre.display()
        )));
    }
    let (bytes, v) = read_json(pre)?;
    if v.get("post").is_some() {
        return Err(Error::Staging(format!("{} is already a post-run manifest", pre.display())));
    }
    let mut mismatches = Vec::new();
    let base = base_dir(pre);
    check_section(&base, "configs", &v, &mut mismatches);
    check_section(&base, "data", &v, &mut mismatches);
    check_engine(&v, &mut mismatches);
    if !mismatches.is_empty() {
        return Err(integrity(&mismatches));
    }
    Ok((bytes, v))
}

/// Checks that a pre-run manifest exists and that its inputs are unchanged.
pub fn check_pre_manifest(pre: &Path) -> Result<()> {
    read_pre(pre).map(|_| ())
}

/// Extends the pre-run manifest at `pre` with output hashes. Fails if the
/// inputs no longer match what was registered.
pub fn post_manifest(pre: &Path, out: &Path, outputs: &[(String, String)], timestamp: Option<&str>) -> Result<Value> {
    let (pre_bytes, pre_v) = read_pre(pre)?;
    let out_base = base_dir(out);
    let pre_rel = pathdiff(pre, &out_base);
    let mut v = pre_v;
    v.as_object_mut().expect("manifest is an object").insert(
        "post".into(),
        json!({
            "outputs": hashed_files(&out_base, outputs)?,
            "pre_manifest": { "path": pre_rel, "sha256": sha256_hex(&pre_bytes) },
            "timestamp_utc": timestamp.map(str::to_string).unwrap_or_else(utc_now),
        }),
    );
    Ok(v)
}

pub fn write_post_manifest(pre: &Path, out: &Path, outputs: &[(String, String)], timestamp: Option<&str>) -> Result<Value> {
    let v = post_manifest(pre, out, outputs, timestamp)?;
    std::fs::write(out, canonical_json(&v)).map_err(|e| Error::io(out, e))?;
    Ok(v)
}

/// Relative path from `base` to `path` when `path` lies under `base`,
/// otherwise the absolute path.
fn pathdiff(path: &Path, base: &Path) -> String {
    let abs = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let (p, b) = (abs(path), abs(base));
    match p.strip_prefix(&b) {
        Ok(rel) => rel.to_string_lossy().into_owned(),
        Err(_) => p.to_string_lossy().into_owned(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub checked: usize,
    pub mismatches: Vec<Mismatch>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.mismatches.is_empty()
    }

    pub fn into_result(self) -> Result<Self> {
        if self.ok() {
            Ok(self)
        } else {
            Err(integrity(&self.mismatches))
        }
    }
}

/// Rechecks every hash in a post-run manifest: inputs, the engine version,
/// the referenced pre-run manifest and the outputs.
pub fn verify_manifest(path: &Path) -> Result<VerifyReport> {
    let (_, v) = read_json(path)?;
    let Some(post) = v.get("post") else {
        return Err(Error::Staging(format!("{} has no post-run section", path.display())));
    };
    let base = base_dir(path);
    let pre_path = post.pointer("/pre_manifest/path").and_then(Value::as_str).unwrap_or_default();
    let pre_hash = post.pointer("/pre_manifest/sha256").and_then(Value::as_str).unwrap_or_default();
    let pre_file = resolve(&base, pre_path);
    // input paths were recorded relative to the pre-run manifest
    let pre_base = base_dir(&pre_file);
    let mut mismatches = Vec::new();
    check_section(&pre_base, "configs", &v, &mut mismatches);
    check_section(&pre_base, "data", &v, &mut mismatches);
    check_engine(&v, &mut mismatches);
    check_section(&base, "outputs", post, &mut mismatches);
    let found = sha256_file(&pre_file).unwrap_or_else(|e| format!("unreadable: {e}"));
    if found != pre_hash {
        mismatches.push(Mismatch {
            label: format!("pre_manifest ({pre_path})"),
            expected: pre_hash.into(),
            found,
        });
    }
    let count = |s: Option<&Value>| s.and_then(Value::as_object).map_or(0, Map::len);
    Ok(VerifyReport {
        checked: count(v.get("configs")) + count(v.get("data")) + count(post.get("outputs")) + 2,
        mismatches,
    })
}
