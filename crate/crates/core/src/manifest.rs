//! `run.json`: what a command was asked to do and what it read and wrote.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const FILE_NAME: &str = "run.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileHash {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self { path: path.to_path_buf(), sha256: sha256_file(path)? })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Fully resolved parameters; feeding them back reproduces the run.
    pub params: serde_json::Value,
    pub seeds: Vec<u64>,
    pub threads: usize,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
    pub wall_time_s: f64,
    pub argv: Vec<String>,
}

impl RunManifest {
    pub fn new(subcommand: &str, params: serde_json::Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            subcommand: subcommand.into(),
            params,
            seeds: Vec::new(),
            threads: rayon::current_num_threads(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            wall_time_s: 0.0,
            argv: std::env::args().collect(),
        }
    }

    /// Hashes every existing file among `paths`; directories are walked.
    pub fn hash_all(paths: &[PathBuf]) -> Result<Vec<FileHash>> {
        let mut out = Vec::new();
        for p in paths {
            collect(p, &mut out)?;
        }
        Ok(out)
    }

    /// Writes `run.json` into `dir` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(FILE_NAME);
        let tmp = dir.join(format!(".{FILE_NAME}.tmp"));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec_pretty(self)?)?;
            f.write_all(b"\n")?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = crate::error::read_text(path)?;
        serde_json::from_str(&text).map_err(|e| Error::format(e.to_string()).at(path))
    }

    /// Inputs whose current contents no longer match the recorded hash.
    pub fn changed_inputs(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for h in &self.inputs {
            if !h.path.exists() || sha256_file(&h.path)? != h.sha256 {
                out.push(h.path.clone());
            }
        }
        Ok(out)
    }
}

fn collect(p: &Path, out: &mut Vec<FileHash>) -> Result<()> {
    if p.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(p)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            if e.file_name().is_some_and(|n| n != FILE_NAME) {
                collect(&e, out)?;
            }
        }
    } else if p.is_file() {
        out.push(FileHash::of(p)?);
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = crate::error::read_file(path)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
