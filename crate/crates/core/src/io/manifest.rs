//! Dataset manifest: `role<TAB>seed<TAB>path` lines with paths relative to
//! the manifest's directory. Lines starting with `#` are comments, except
//! `#ssim<TAB>seed<TAB>value`, which records the SSIM between the clean and
//! degraded members of an evaluation triple.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::{read_file, write_file};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    Low,
    High,
    EvalClean,
    EvalDegraded,
    EvalMask,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Low => "low",
            Role::High => "high",
            Role::EvalClean => "eval_clean",
            Role::EvalDegraded => "eval_degraded",
            Role::EvalMask => "eval_mask",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Some(match s {
            "low" => Role::Low,
            "high" => Role::High,
            "eval_clean" => Role::EvalClean,
            "eval_degraded" => Role::EvalDegraded,
            "eval_mask" => Role::EvalMask,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub role: Role,
    pub seed: u64,
    /// Relative to the manifest's directory.
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Recorded SSIM(clean, degraded) per evaluation seed.
    pub eval_ssim: BTreeMap<u64, f64>,
    /// Directory the relative paths resolve against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn paths(&self, role: Role) -> Vec<PathBuf> {
        self.entries
            .iter()
            .filter(|e| e.role == role)
            .map(|e| self.base.join(&e.path))
            .collect()
    }

    pub fn seeds(&self, role: Role) -> Vec<u64> {
        self.entries.iter().filter(|e| e.role == role).map(|e| e.seed).collect()
    }

    /// Evaluation triples `(seed, clean, degraded, mask)` in manifest order.
    pub fn eval_triples(&self) -> Result<Vec<(u64, PathBuf, PathBuf, PathBuf)>> {
        let mut out = Vec::new();
        for seed in self.seeds(Role::EvalClean) {
            let find = |role| {
                self.entries
                    .iter()
                    .find(|e| e.role == role && e.seed == seed)
                    .map(|e| self.base.join(&e.path))
                    .ok_or_else(|| {
                        Error::Contract(format!("eval seed {seed} lacks a {} entry", role.as_str()))
                    })
            };
            out.push((seed, find(Role::EvalClean)?, find(Role::EvalDegraded)?, find(Role::EvalMask)?));
        }
        Ok(out)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.role.as_str(), e.seed, e.path.display()));
        }
        for (seed, v) in &self.eval_ssim {
            s.push_str(&format!("#ssim\t{seed}\t{v}\n"));
        }
        s
    }

    pub fn parse(text: &str, base: &Path, path: &Path) -> Result<Manifest> {
        let mut m = Manifest {
            base: base.to_path_buf(),
            ..Default::default()
        };
        for (n, line) in text.lines().enumerate() {
            let bad = |why: &str| Error::format(path, format!("line {}: {why}", n + 1));
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if let Some(tag) = cols[0].strip_prefix('#') {
                if tag == "ssim" && cols.len() == 3 {
                    let seed = cols[1].parse().map_err(|_| bad("bad seed"))?;
                    let v = cols[2].parse().map_err(|_| bad("bad ssim value"))?;
                    m.eval_ssim.insert(seed, v);
                }
                continue;
            }
            if cols.len() != 3 {
                return Err(bad("expected role, seed and path"));
            }
            m.entries.push(ManifestEntry {
                role: Role::parse(cols[0]).ok_or_else(|| bad("unknown role"))?,
                seed: cols[1].parse().map_err(|_| bad("bad seed"))?,
                path: PathBuf::from(cols[2]),
            });
        }
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "not UTF-8"))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Manifest::parse(&text, base, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_text().as_bytes())
    }
}
