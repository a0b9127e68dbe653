//! Deterministic text output and atomic file writes.
//!
//! All artifacts are plain text (JSON, JSON Lines, CSV). Floats are written
//! with 17 significant digits so values round-trip exactly and identical
//! runs produce byte-identical files. Writers stage content in temporary
//! files and rename on success, so failed commands leave no partial output.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough for exact `f64`
/// round-trips. The output is valid JSON. Panics on non-finite input;
/// callers validate finiteness before serialization.
pub fn fmt_f64(v: f64) -> String {
    assert!(v.is_finite(), "fmt_f64 on non-finite value {v}");
    format!("{v:.16e}")
}

/// Escapes a string for inclusion in JSON output.
pub fn escape_json(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// Renders `[v1,v2,...]` with [`fmt_f64`] elements.
pub fn fmt_f64_array(values: &[f64]) -> String {
    let mut out = String::from("[");
    for (i, &v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&fmt_f64(v));
    }
    out.push(']');
    out
}

/// Renders `[v1,v2,...]` of integers.
pub fn fmt_usize_array(values: &[usize]) -> String {
    let mut out = String::from("[");
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        out.push_str(&v.to_string());
    }
    out.push(']');
    out
}

fn staging_path(target: &Path) -> PathBuf {
    let name = target
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    target.with_file_name(format!(".{name}.tmp{}", std::process::id()))
}

/// Writes `contents` to `path` atomically: stage to a sibling temporary
/// file, then rename over the target.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let tmp = staging_path(path);
    fs::write(&tmp, contents)?;
    match fs::rename(&tmp, path) {
        Ok(()) => Ok(()),
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(Error::Io(e))
        }
    }
}

/// Multi-file transaction: every file is staged first and the set renames
/// together on [`AtomicSet::commit`]. Dropping without committing removes
/// all staged files, so a failed command leaves no partial artifacts.
#[derive(Debug, Default)]
pub struct AtomicSet {
    staged: Vec<(PathBuf, PathBuf)>,
}

impl AtomicSet {
    pub fn new() -> Self {
        AtomicSet { staged: Vec::new() }
    }

    /// Stages `contents` for `path`.
    pub fn stage(&mut self, path: &Path, contents: &str) -> Result<()> {
        let tmp = staging_path(path);
        fs::write(&tmp, contents)?;
        self.staged.push((tmp, path.to_path_buf()));
        Ok(())
    }

    /// Renames every staged file over its target.
    pub fn commit(mut self) -> Result<()> {
        while let Some((tmp, target)) = self.staged.pop() {
            if let Err(e) = fs::rename(&tmp, &target) {
                let _ = fs::remove_file(&tmp);
                return Err(Error::Io(e));
            }
        }
        Ok(())
    }
}

impl Drop for AtomicSet {
    fn drop(&mut self) {
        for (tmp, _) in &self.staged {
            let _ = fs::remove_file(tmp);
        }
    }
}

/// Reads a whole file, attaching the path to any error.
pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Parses one JSON value per non-empty line, attaching 1-based line numbers
/// to parse errors.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = read_file(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: T = serde_json::from_str(line).map_err(|e| Error::Json {
            path: format!("{}:{}", path.display(), i + 1),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}
