//! The per-run config file and its path resolution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use xraydet::assembly::DetectorConfig;
use xraydet::harness::{Protocol, TrainConfig};

/// Environment variable naming the compute device when `--device` is absent.
pub const DEVICE_ENV: &str = "XRAYDET_DEVICE";
/// Environment variable that relative dataset manifest paths resolve against.
pub const DATA_ROOT_ENV: &str = "XRAYDET_DATA_ROOT";

/// One run: which detector, trained how, on which data, written where.
///
/// ```toml
/// protocol = "SPLIT"
/// manifest = "data/manifest.toml"
/// out = "runs/yolo-nextvit"
///
/// [detector]
/// head = "YOLO"
/// image_size = 128
/// backbone = { kind = "NEXTVIT_S", width_scale = 0.25 }
///
/// [train]
/// max_epochs = 50
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub protocol: Protocol,
    /// Dataset manifest; relative to this file, or to `XRAYDET_DATA_ROOT` when set.
    pub manifest: Option<PathBuf>,
    /// Output directory, relative to this file.
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub train: TrainConfig,
    /// Whether `detector.num_classes` was written in the file; when it was
    /// not, the dataset's class count is used.
    #[serde(skip)]
    pub explicit_classes: bool,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            bail!("config file {} does not exist", path.display());
        }
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut run: RunManifest = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let value: toml::Table = text.parse()?;
        run.explicit_classes = value
            .get("detector")
            .and_then(|d| d.as_table())
            .is_some_and(|d| d.contains_key("num_classes"));
        run.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(run)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// The dataset manifest path: `--manifest` wins over the file's entry.
    pub fn manifest_path(&self, cli: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = cli {
            return Ok(p.to_path_buf());
        }
        let p = self
            .manifest
            .as_deref()
            .context("no dataset manifest: set `manifest` in the config or pass --manifest")?;
        match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) if p.is_relative() => Ok(PathBuf::from(root).join(p)),
            _ => Ok(self.resolve(p)),
        }
    }

    /// The output directory: `--out` wins over the file's entry.
    pub fn out_dir(&self, cli: Option<&Path>) -> Result<PathBuf> {
        match (cli, &self.out) {
            (Some(p), _) => Ok(p.to_path_buf()),
            (None, Some(p)) => Ok(self.resolve(p)),
            (None, None) => bail!("no output directory: set `out` in the config or pass --out"),
        }
    }
}

/// Read a detector config from either a run file (its `[detector]` table)
/// or a bare detector config.
pub fn load_detector_config(path: &Path) -> Result<DetectorConfig> {
    if !path.exists() {
        bail!("config file {} does not exist", path.display());
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = text.parse().with_context(|| format!("parsing {}", path.display()))?;
    let detector = match table.remove("detector") {
        Some(toml::Value::Table(t)) => t,
        Some(_) => bail!("{}: `detector` must be a table", path.display()),
        None => table,
    };
    detector
        .try_into()
        .with_context(|| format!("parsing the detector config in {}", path.display()))
}
