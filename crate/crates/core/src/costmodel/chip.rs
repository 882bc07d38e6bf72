use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Abstract accelerator description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChipConfig {
    #[serde(default)]
    pub name: String,
    pub num_cores: usize,
    /// Bytes of local memory per core.
    pub mem_per_core: u64,
    /// Bytes per cycle per core.
    pub link_bandwidth: f64,
    /// Cycles per BSP phase boundary.
    pub sync_overhead: u64,
    /// f32 multiply-accumulates per cycle per core.
    pub compute_rate: u64,
    /// Elementwise results per cycle per core.
    pub elementwise_rate: u64,
    /// Bytes reserved per core for staging shifts.
    pub shift_buffer: u64,
    /// Cycles per second; only used for reporting.
    #[serde(default = "default_clock")]
    pub clock: f64,
}

fn default_clock() -> f64 {
    1.33e9
}

impl ChipConfig {
    /// 1472 cores with 624 KiB each. The per-core MAC rate is the aggregate
    /// 250 TFLOPS spread over all cores at 1.33 GHz, rounded.
    pub fn ipu_mk2() -> Self {
        ChipConfig {
            name: "ipu-mk2".into(),
            num_cores: 1472,
            mem_per_core: 638_976,
            link_bandwidth: 3.57,
            sync_overhead: 118,
            compute_rate: 64,
            elementwise_rate: 8,
            shift_buffer: 8192,
            clock: 1.33e9,
        }
    }

    /// A 16-core chip small enough to simulate numerically in full.
    pub fn toy16() -> Self {
        ChipConfig {
            name: "toy-16".into(),
            num_cores: 16,
            mem_per_core: 16 * 1024,
            link_bandwidth: 4.0,
            sync_overhead: 20,
            compute_rate: 4,
            elementwise_rate: 2,
            shift_buffer: 256,
            clock: 1.0e9,
        }
    }

    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "ipu-mk2" => Some(Self::ipu_mk2()),
            "toy-16" => Some(Self::toy16()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.num_cores > 0
            && self.mem_per_core > 0
            && self.link_bandwidth.is_finite()
            && self.link_bandwidth > 0.0
            && self.sync_overhead > 0
            && self.compute_rate > 0
            && self.elementwise_rate > 0
            && self.shift_buffer > 0
            && self.clock > 0.0;
        if !ok {
            return Err(Error::Schema(format!(
                "chip `{}`: all parameters must be positive",
                self.name
            )));
        }
        if self.shift_buffer >= self.mem_per_core {
            return Err(Error::Schema(format!(
                "chip `{}`: shift buffer must be smaller than core memory",
                self.name
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let chip: ChipConfig =
            serde_json::from_str(text).map_err(|e| Error::Schema(format!("chip config: {e}")))?;
        chip.validate()?;
        Ok(chip)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut chip = Self::from_json(&std::fs::read_to_string(path)?)?;
        if chip.name.is_empty() {
            chip.name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
        }
        Ok(chip)
    }

    /// Resolve a profile: an existing file path, then `<dir>/<name>.json`
    /// under `chip_dir`, then the built-in profiles.
    pub fn resolve(name_or_path: &str, chip_dir: Option<&Path>) -> Result<Self> {
        let as_path = Path::new(name_or_path);
        if as_path.is_file() {
            return Self::load(as_path);
        }
        if let Some(dir) = chip_dir {
            let candidate = dir.join(format!("{name_or_path}.json"));
            if candidate.is_file() {
                return Self::load(candidate);
            }
        }
        Self::builtin(name_or_path).ok_or_else(|| Error::Unknown {
            kind: "chip profile",
            name: name_or_path.to_string(),
        })
    }
}
