//! Run configuration files: TOML mirroring `PipelineConfig`, plus an optional
//! `output` directory resolved against the file's own location.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use spurprune::pipeline::PipelineConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_VAR: &str = "SPURPRUNE_OUT";

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub pipeline: PipelineConfig,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    /// Loads `path`, or falls back to `default` when no file is given.
    pub fn load(path: Option<&Path>, default: fn() -> PipelineConfig) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                pipeline: default(),
                output: None,
            });
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")), default)
            .with_context(|| format!("in {}", path.display()))
    }

    /// Parses TOML text. Missing keys take their values from `default`;
    /// unknown keys are errors.
    pub fn parse(text: &str, base_dir: &Path, default: fn() -> PipelineConfig) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        let output = match table.remove("output") {
            None => None,
            Some(toml::Value::String(s)) => Some(base_dir.join(s)),
            Some(_) => bail!("`output` must be a string path"),
        };
        let mut merged = toml::Table::try_from(default())?;
        merge(&mut merged, table);
        let pipeline: PipelineConfig = toml::Value::Table(merged).try_into()?;
        pipeline.validate()?;
        Ok(Self { pipeline, output })
    }

    /// The effective configuration with every default filled in.
    pub fn effective_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(&self.pipeline)?)
    }
}

/// Overlays `patch` on `base`. Tables merge key by key; a tagged enum table
/// whose tag changes is replaced outright so stale variant fields do not
/// leak into the new variant.
fn merge(base: &mut toml::Table, patch: toml::Table) {
    for (key, value) in patch {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(old)), toml::Value::Table(new)) if same_tag(old, &new) => merge(old, new),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn same_tag(old: &toml::Table, new: &toml::Table) -> bool {
    ["kind", "mode"]
        .iter()
        .all(|tag| new.get(*tag).is_none_or(|v| old.get(*tag) == Some(v)))
}

/// `--out` if given, else the config's `output`, else `<root>/<command>`
/// where the root comes from the environment (or `runs`).
pub fn output_dir(flag: Option<&Path>, config: Option<&Path>, command: &str) -> PathBuf {
    if let Some(p) = flag.or(config) {
        return p.to_path_buf();
    }
    let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
    root.join(command)
}
