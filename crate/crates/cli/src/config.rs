//! One TOML file configures every command; `--set a.b=value` overrides any key.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdpcr_core::data::{DatasetConfig, Split};
use tdpcr_core::trainer::{EvalMode, RunConfig, StudyConfig};
use tdpcr_core::{Error, Result};

pub const DATA_DIR_ENV: &str = "TDPCR_DATA_DIR";
pub const ECHO_FILE: &str = "resolved_config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct Config {
    /// Dataset root; falls back to `$TDPCR_DATA_DIR`.
    pub data_dir: Option<PathBuf>,
    /// Output directory of the command.
    pub out: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub run: RunConfig,
    pub study: StudyConfig,
    pub eval: EvalSettings,
    pub viz: VizSettings,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub split: Split,
    pub checkpoint: Option<PathBuf>,
    /// Segmentation probe for `direct-seg` and `multi-stage`.
    pub probe_checkpoint: Option<PathBuf>,
    /// Number of image strips to write.
    pub strips: usize,
    pub batch_size: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self { mode: EvalMode::Full, split: Split::Test, checkpoint: None, probe_checkpoint: None, strips: 4, batch_size: 4 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaScope {
    /// Components fitted on the visualised image alone.
    #[default]
    Image,
    /// Components fitted on the prompts of the whole split.
    Dataset,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VizSettings {
    pub checkpoint: Option<PathBuf>,
    pub split: Split,
    pub index: usize,
    pub scope: PcaScope,
}

impl Default for VizSettings {
    fn default() -> Self {
        Self { checkpoint: None, split: Split::Test, index: 0, scope: PcaScope::Image }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `path` (dotted) in a TOML tree, creating intermediate tables.
pub fn apply_override(root: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key '{key}'")));
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}': '{part}' is inside a non-table value")))?;
        node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node.as_table_mut().ok_or_else(|| Error::Config(format!("'{key}' does not name a table entry")))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// File (or defaults), then overrides, then validation of the touched sections.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                toml::from_str::<toml::Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Value::Table(toml::Table::new()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises to toml")
    }

    pub fn data_dir(&self) -> Result<PathBuf> {
        self.data_dir
            .clone()
            .or_else(|| std::env::var_os(DATA_DIR_ENV).map(PathBuf::from))
            .ok_or_else(|| Error::Config(format!("no dataset directory: set data_dir, --set data_dir=..., or ${DATA_DIR_ENV}")))
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        self.out.clone().ok_or_else(|| Error::Config("no output directory: pass --out".into()))
    }

    /// Writes the fully resolved configuration next to the command's outputs.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))
    }
}
