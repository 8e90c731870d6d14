//! Reproducibility records written beside every run's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// SHA-256 of `blob <len>\0<content>`, the git object framing.
pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    hex(&h.finalize())
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("inside root").to_path_buf());
        }
    }
    Ok(())
}

/// Content hash of a file, or of a directory tree as the hash of its sorted
/// `<blob hash>  <relative path>` listing.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(blob_hash(&bytes));
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    let mut listing = String::new();
    for rel in files {
        let full = path.join(&rel);
        let bytes = std::fs::read(&full).map_err(|e| Error::io(&full, e))?;
        let _ = writeln!(listing, "{}  {}", blob_hash(&bytes), rel.to_string_lossy().replace('\\', "/"));
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", listing.len()).as_bytes());
    h.update(listing.as_bytes());
    Ok(hex(&h.finalize()))
}

/// Writes `run_record.cfg`: the resolved configuration as a loadable
/// `key = value` file, headed by comments naming the command and the
/// content hashes of its inputs.
pub fn write_record(out: &Path, command: &str, resolved: &crate::config::KvMap, inputs: &[(&str, &Path)]) -> Result<()> {
    let mut text = format!("# mgaug {command}\n");
    for (name, p) in inputs {
        let _ = writeln!(text, "# input {name} {} sha256:{}", p.display(), content_hash(p)?);
    }
    text.push_str(&resolved.to_text());
    let path = out.join("run_record.cfg");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
