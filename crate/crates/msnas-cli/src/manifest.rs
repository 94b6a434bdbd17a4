//! Output manifest: every artifact a command wrote, with a content hash.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use msnas::error::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub bytes: u64,
    pub fnv1a64: String,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ManifestEntry>,
}

pub fn fnv1a64(data: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in data {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Manifest {
    pub fn load(out_dir: &Path) -> Manifest {
        std::fs::read_to_string(out_dir.join("manifest.json"))
            .ok()
            .and_then(|s| serde_json::from_str(&s).ok())
            .unwrap_or_default()
    }

    /// Hash `paths` (relative to `out_dir`) into the manifest and rewrite it.
    pub fn record(out_dir: &Path, paths: &[&str]) -> Result<()> {
        let mut m = Manifest::load(out_dir);
        for rel in paths {
            let p = out_dir.join(rel);
            if p.is_dir() {
                for entry in walk(&p)? {
                    let rel_path = entry.strip_prefix(out_dir).unwrap().to_string_lossy().into_owned();
                    let data = std::fs::read(&entry)?;
                    m.artifacts.insert(
                        rel_path,
                        ManifestEntry {
                            bytes: data.len() as u64,
                            fnv1a64: format!("{:016x}", fnv1a64(&data)),
                        },
                    );
                }
            } else {
                let data = std::fs::read(&p)?;
                m.artifacts.insert(
                    rel.to_string(),
                    ManifestEntry {
                        bytes: data.len() as u64,
                        fnv1a64: format!("{:016x}", fnv1a64(&data)),
                    },
                );
            }
        }
        std::fs::write(out_dir.join("manifest.json"), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

fn walk(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            out.extend(walk(&path)?);
        } else {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
