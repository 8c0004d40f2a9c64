use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{load_depth, load_pair, Sample};
use crate::error::{Error, Result};

/// One manifest line: `image<TAB>mask[<TAB>depth]`. Relative paths are
/// resolved against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub depth: Option<PathBuf>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    };
    let mut entries = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if !(2..=3).contains(&cols.len()) {
            return Err(Error::Data(format!(
                "{}:{}: expected 2 or 3 tab-separated columns, got {}",
                path.display(),
                no + 1,
                cols.len()
            )));
        }
        entries.push(ManifestEntry {
            image: resolve(cols[0]),
            mask: resolve(cols[1]),
            depth: cols.get(2).map(|d| resolve(d)),
        });
    }
    if entries.is_empty() {
        return Err(Error::Data(format!("{}: manifest lists no samples", path.display())));
    }
    Ok(entries)
}

/// Writes entries with paths relative to the manifest directory when possible.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let rel = |p: &Path| {
        p.strip_prefix(base)
            .unwrap_or(p)
            .to_string_lossy()
            .into_owned()
    };
    let mut out = String::new();
    for e in entries {
        let _ = write!(out, "{}\t{}", rel(&e.image), rel(&e.mask));
        if let Some(d) = &e.depth {
            let _ = write!(out, "\t{}", rel(d));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Loads every manifest entry; order follows the manifest.
pub fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    load_manifest(path)?
        .par_iter()
        .map(|e| {
            let mut s = load_pair(&e.image, &e.mask)?;
            if let Some(d) = &e.depth {
                let depth = load_depth(d)?;
                s = Sample::new(s.id, s.image, s.mask, Some(depth))?;
            }
            Ok(s)
        })
        .collect()
}
