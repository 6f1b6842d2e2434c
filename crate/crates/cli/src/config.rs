//! Flat TOML config files and flag overrides.
//!
//! A config file is one table of `key = value` lines. Keys that name run
//! settings (`epochs`, `budget`, `damping`, ...) go to [`Settings`]; the
//! rest name inputs and outputs. Flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use s4_core::settings::Settings;
use serde::Deserialize;

/// Inputs, outputs and per-command knobs.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Files {
    pub corpus: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub seed_file: Option<PathBuf>,
    pub oracle: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub top_k: Option<usize>,
    pub l1: Option<f64>,
    pub labeled: Option<usize>,
    pub rounds: Option<usize>,
    pub threshold: Option<f64>,
    pub pseudo_batch: Option<usize>,
}

impl Files {
    fn merge(self, over: Files) -> Files {
        Files {
            corpus: over.corpus.or(self.corpus),
            eval: over.eval.or(self.eval),
            seed_file: over.seed_file.or(self.seed_file),
            oracle: over.oracle.or(self.oracle),
            out: over.out.or(self.out),
            threads: over.threads.or(self.threads),
            top_k: over.top_k.or(self.top_k),
            l1: over.l1.or(self.l1),
            labeled: over.labeled.or(self.labeled),
            rounds: over.rounds.or(self.rounds),
            threshold: over.threshold.or(self.threshold),
            pseudo_batch: over.pseudo_batch.or(self.pseudo_batch),
        }
    }

    pub fn corpus(&self) -> Result<&Path> {
        self.corpus.as_deref().ok_or_else(|| {
            anyhow!("no corpus given (use --corpus or a `corpus` key in the config file)")
        })
    }

    pub fn out(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Config {
    pub files: Files,
    pub settings: Settings,
}

impl Config {
    /// Layers: defaults, then the file, then `KEY=VALUE` overrides, then
    /// the dedicated flags in `flags`.
    pub fn load(path: Option<&Path>, sets: &[String], flags: Config) -> Result<Config> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                let table: toml::Table = text
                    .parse()
                    .with_context(|| format!("parsing {}", p.display()))?;
                let mut cfg = split(table).with_context(|| format!("in {}", p.display()))?;
                if let Some(dir) = p.parent() {
                    cfg.files.resolve_relative_to(dir);
                }
                cfg
            }
            None => Config::default(),
        };
        if !sets.is_empty() {
            let mut table = toml::Table::new();
            for s in sets {
                let (k, v) = parse_set(s)?;
                table.insert(k, v);
            }
            let over = split(table)?;
            cfg = cfg.merge(over);
        }
        Ok(cfg.merge(flags))
    }

    fn merge(self, over: Config) -> Config {
        Config {
            files: self.files.merge(over.files),
            settings: self.settings.merge(over.settings),
        }
    }
}

impl Files {
    /// Paths in a config file are relative to the file.
    fn resolve_relative_to(&mut self, dir: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.eval,
            &mut self.seed_file,
            &mut self.oracle,
            &mut self.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
    }
}

fn split(table: toml::Table) -> Result<Config> {
    let (settings, files): (toml::Table, toml::Table) = table
        .into_iter()
        .partition(|(k, _)| Settings::KEYS.contains(&k.as_str()));
    Ok(Config {
        settings: settings.try_into().context("invalid setting")?,
        files: files.try_into().context("invalid key")?,
    })
}

/// Parses `key=value`, reading the value as TOML and falling back to a
/// bare string.
fn parse_set(s: &str) -> Result<(String, toml::Value)> {
    let Some((k, v)) = s.split_once('=') else {
        bail!("expected KEY=VALUE, got {s:?}");
    };
    let (k, v) = (k.trim(), v.trim());
    let value = format!("v = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()));
    Ok((k.to_string(), value))
}
