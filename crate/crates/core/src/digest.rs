//! Content hashing for lineage records and reproducibility checks.

use sha2::{Digest, Sha256};
use std::path::Path;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn file_sha256(path: impl AsRef<Path>) -> std::io::Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

/// Digest of every regular file under `dir` (recursive), as sorted
/// `relative_path:sha256` lines. Two directory trees with equal digests
/// have byte-identical contents.
pub fn dir_digest(dir: impl AsRef<Path>) -> std::io::Result<String> {
    fn walk(base: &Path, dir: &Path, lines: &mut Vec<String>) -> std::io::Result<()> {
        let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<Result<_, _>>()?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, lines)?;
            } else {
                let rel = path.strip_prefix(base).unwrap().display().to_string();
                lines.push(format!("{rel}:{}", file_sha256(&path)?));
            }
        }
        Ok(())
    }
    let base = dir.as_ref();
    let mut lines = Vec::new();
    walk(base, base, &mut lines)?;
    Ok(sha256_hex(lines.join("\n").as_bytes()))
}
