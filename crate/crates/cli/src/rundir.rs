//! Output directories that carry everything needed to reproduce them.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use crate::config::{Preset, RunConfig};

pub const VERSION: &str = concat!("motionflow ", env!("CARGO_PKG_VERSION"));

#[derive(Serialize)]
struct RunMeta<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    preset: Preset,
    config_source: Option<String>,
    args: &'a [String],
}

pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Uses `out_dir` when given, otherwise `<root>/<command>-seed<seed>`.
    pub fn create(out_dir: Option<&Path>, root: &Path, command: &str, seed: u64) -> Result<Self> {
        let path = match out_dir {
            Some(p) => p.to_path_buf(),
            None => root.join(format!("{command}-seed{seed}")),
        };
        fs::create_dir_all(&path).with_context(|| format!("creating run directory {}", path.display()))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let p = self.file(name);
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    /// Writes `config.toml` (resolved), `config.source.toml` (the user's file,
    /// verbatim) and `run.toml` (version, seed, arguments).
    pub fn snapshot(
        &self,
        cfg: &RunConfig,
        preset: Preset,
        source: Option<(&Path, &str)>,
        command: &str,
        seed: u64,
        args: &[String],
    ) -> Result<()> {
        self.write("config.toml", cfg.to_toml())?;
        if let Some((_, text)) = source {
            self.write("config.source.toml", text)?;
        }
        let meta = RunMeta {
            version: VERSION,
            command,
            seed,
            preset,
            config_source: source.map(|(p, _)| p.display().to_string()),
            args,
        };
        self.write("run.toml", toml::to_string(&meta).context("serializing run metadata")?)?;
        Ok(())
    }
}
