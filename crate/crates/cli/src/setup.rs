//! Shared plumbing: config resolution, output locations, provenance files.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use vos_core::RunConfig;

/// Environment variable naming the root under which subcommands place their
/// default output directories.
pub const OUT_ROOT_ENV: &str = "VOS_OUT_ROOT";

#[derive(Args, Debug)]
pub struct ConfigArgs {
    /// Config file of `key = value` lines; `#` starts a comment.
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override one config key, e.g. `--set train.lr=3e-4`. Repeatable;
    /// applied after the file. Unknown keys are errors.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,

    /// Override every RNG seed in the config (training and data generation).
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory; defaults to `$VOS_OUT_ROOT/<subcommand>`, falling
    /// back to `runs/<subcommand>`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

impl ConfigArgs {
    /// Merge defaults, the config file, `--set` overrides, and `--seed`, in
    /// that order. Returns the config plus a provenance header describing
    /// where each layer came from.
    pub fn resolve(&self) -> Result<(RunConfig, String)> {
        let mut cfg = RunConfig::default();
        let mut prov = String::new();
        match &self.config {
            Some(p) => {
                let text = fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                cfg.apply_text(&text)
                    .with_context(|| format!("parsing {}", p.display()))?;
                prov.push_str(&format!("# config file: {}\n", p.display()));
            }
            None => prov.push_str("# config file: none (defaults)\n"),
        }
        for s in &self.sets {
            let Some((k, v)) = s.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{s}`");
            };
            let (k, v) = (k.trim(), v.trim());
            cfg.set(k, v).with_context(|| format!("--set {k}"))?;
            prov.push_str(&format!("# override: {k} = {v}\n"));
        }
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.synth.seed = seed;
            prov.push_str(&format!("# seed override: {seed}\n"));
        }
        cfg.model.validate()?;
        Ok((cfg, prov))
    }

    pub fn out_dir(&self, leaf: &str) -> PathBuf {
        match &self.out {
            Some(p) => p.clone(),
            None => out_root().join(leaf),
        }
    }
}

pub fn out_root() -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root),
        _ => PathBuf::from("runs"),
    }
}

/// Write the fully resolved config next to the outputs. Called before any
/// compute so a crashed run still documents what it was asked to do.
pub fn write_provenance(dir: &Path, cfg: &RunConfig, header: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("config.resolved.txt");
    fs::write(&path, format!("{header}{}", cfg.to_text()))
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}
