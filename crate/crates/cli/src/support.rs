//! Shared plumbing: config layering, run records, case discovery.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use lesionkit::phantom::{benchmark_set, generate, Phantom, PhantomSetSpec, PhantomSpec};
use lesionkit::{load_mask, load_volume};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::args::PhantomSource;

/// Parses a JSON file, returning both the typed value and the raw document
/// (used to tell which fields the file set).
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<(T, Value)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let raw: Value = serde_json::from_str(&text)
        .map_err(|e| anyhow::anyhow!("config {} is not valid JSON: {e}", path.display()))?;
    let typed = serde_json::from_value(raw.clone())
        .map_err(|e| anyhow::anyhow!("config {}: {e}", path.display()))?;
    Ok((typed, raw))
}

/// `defaults < file` for a config type with serde defaults.
pub fn layered<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, Value)> {
    match path {
        Some(p) => read_config(p),
        None => Ok((T::default(), Value::Null)),
    }
}

pub fn path_str(p: &Path) -> String {
    p.display().to_string()
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create directory {}", dir.display()))
}

/// Parent directory of `file`, or `.` for bare file names.
pub fn dir_of(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

/// Writes the run record to `explicit` or `<default_dir>/run.json`.
pub fn write_run_json(
    explicit: Option<&Path>,
    default_dir: &Path,
    command: &str,
    record: Value,
) -> Result<()> {
    let path = explicit.map_or_else(|| default_dir.join("run.json"), Path::to_path_buf);
    let doc = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": record,
    });
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}

/// `stem -> path` for the files in `dir` whose names end with `suffix`.
pub fn files_by_stem(dir: &Path, suffix: &str) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))?;
    for entry in entries {
        let entry = entry.with_context(|| format!("cannot list {}", dir.display()))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(suffix) {
            if !stem.is_empty() && entry.path().is_file() {
                out.insert(stem.to_string(), entry.path());
            }
        }
    }
    Ok(out)
}

/// Pairs two stem maps, failing with the unmatched stems of each side.
pub fn pair_by_stem(
    left_name: &str,
    left: BTreeMap<String, PathBuf>,
    right_name: &str,
    mut right: BTreeMap<String, PathBuf>,
) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    let mut pairs = Vec::new();
    let mut only_left = Vec::new();
    for (stem, l) in left {
        match right.remove(&stem) {
            Some(r) => pairs.push((stem, l, r)),
            None => only_left.push(stem),
        }
    }
    let only_right: Vec<String> = right.into_keys().collect();
    if !only_left.is_empty() || !only_right.is_empty() {
        bail!(
            "unmatched case stems: only in {left_name}: [{}]; only in {right_name}: [{}]",
            only_left.join(", "),
            only_right.join(", ")
        );
    }
    if pairs.is_empty() {
        bail!("no cases found");
    }
    Ok(pairs)
}

/// Reads a phantom set spec; a bare phantom spec is accepted as one case.
pub fn read_phantom_set(path: &Path) -> Result<PhantomSetSpec> {
    let (raw, _): (Value, Value) = read_config(path)?;
    if raw.get("phantom").is_some() {
        Ok(read_config::<PhantomSetSpec>(path)?.0)
    } else {
        let (phantom, _): (PhantomSpec, Value) = read_config(path)?;
        Ok(PhantomSetSpec {
            name_prefix: "case".into(),
            cases: 1,
            phantom,
        })
    }
}

pub fn generate_set(set: &PhantomSetSpec) -> Result<Vec<(String, Phantom)>> {
    set.expand()
        .into_iter()
        .map(|(name, spec)| {
            let p = generate(&spec).with_context(|| format!("case {name}"))?;
            Ok((name, p))
        })
        .collect()
}

/// Loads or generates the phantoms of an experiment, with a description for the run record.
/// `seed_explicit` lets `--seed` override the seed of a spec file.
pub fn load_phantoms(
    src: &PhantomSource,
    seed_explicit: bool,
) -> Result<(Vec<(String, Phantom)>, Value)> {
    if let Some(dir) = &src.phantoms {
        let images = files_by_stem(dir, ".img.npy")?;
        let gts = files_by_stem(dir, ".gt.npy")?;
        let mut out = Vec::new();
        for (stem, img, gt) in pair_by_stem("images", images, "ground truths", gts)? {
            let image = load_volume(&img)?;
            let mask = load_mask(&gt)?;
            out.push((
                stem,
                Phantom {
                    image,
                    mask,
                    lesions: Vec::new(),
                },
            ));
        }
        let record = json!({
            "directory": path_str(dir),
            "cases": out.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
        });
        return Ok((out, record));
    }
    let mut set = match &src.spec {
        Some(path) => read_phantom_set(path)?,
        None => benchmark_set(src.seed),
    };
    if src.spec.is_some() && seed_explicit {
        set.phantom.seed = src.seed;
    }
    let phantoms = generate_set(&set)?;
    Ok((phantoms, json!({ "generated": set })))
}
