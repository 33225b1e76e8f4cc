//! JSONL manifests of `{id, svg_path, png_path?}` entries.

use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub id: String,
    pub svg_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub png_path: Option<PathBuf>,
}

/// Reads a manifest. Relative paths are resolved against the manifest's directory.
pub fn read(path: &Path) -> Result<Vec<Entry>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let resolve = |p: PathBuf| if p.is_relative() { base.join(p) } else { p };
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let e: Entry = serde_json::from_str(l)
                .map_err(|e| format!("{}:{}: {e}", path.display(), i + 1))?;
            Ok(Entry {
                svg_path: resolve(e.svg_path),
                png_path: e.png_path.map(resolve),
                ..e
            })
        })
        .collect()
}

/// Every `.svg` file directly inside `dir`, sorted by name; a sibling `.png`
/// with the same stem is picked up as the record's image.
pub fn scan_dir(dir: &Path) -> Result<Vec<Entry>, String> {
    let mut entries = Vec::new();
    for item in std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))? {
        let path = item.map_err(|e| e.to_string())?.path();
        if path.extension().and_then(|s| s.to_str()) != Some("svg") {
            continue;
        }
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let png = path.with_extension("png");
        entries.push(Entry {
            id,
            png_path: png.is_file().then_some(png),
            svg_path: path,
        });
    }
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(entries)
}

/// A directory is scanned for SVG files; anything else is read as a manifest.
pub fn load(input: &Path) -> Result<Vec<Entry>, String> {
    if input.is_dir() {
        scan_dir(input)
    } else {
        read(input)
    }
}
