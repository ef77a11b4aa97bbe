use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use prefixpack::attention::Precision;
use prefixpack::tile::{HardwareModel, RegisterUsageTable};
use prefixpack::workload::{BlockTable, HeadConfig, WorkloadSpec};
use prefixpack::{generate_workload, Strategy};

use crate::Failure;

pub const HW_PROFILE_ENV: &str = "PREFIXPACK_HW_PROFILE";

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum WorkloadSource {
    Inline(WorkloadSpec),
    File(PathBuf),
}

/// A run description. Relative paths resolve against the scenario file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub workload: WorkloadSource,
    /// Pre-built block table used instead of generating one from `workload`.
    #[serde(default)]
    pub table: Option<PathBuf>,
    #[serde(default)]
    pub hardware: Option<PathBuf>,
    #[serde(default)]
    pub registers: Option<PathBuf>,
    pub strategies: Vec<Strategy>,
    #[serde(default)]
    pub seed: u64,
    /// Report path; CSV and metadata files are written beside it.
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub precision: Precision,
}

fn default_tolerance() -> f64 {
    1e-10
}

/// A scenario with every referenced file loaded.
pub struct Scenario {
    pub name: String,
    pub spec: WorkloadSpec,
    pub table: Option<BlockTable>,
    pub hardware: HardwareModel,
    pub registers: RegisterUsageTable,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub output: PathBuf,
    pub tolerance: f64,
    pub precision: Precision,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

pub fn parse_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

pub fn load_hardware(fallback: Option<&Path>) -> Result<HardwareModel, Failure> {
    let from_env = std::env::var_os(HW_PROFILE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    match from_env.as_deref().or(fallback) {
        Some(p) => Ok(HardwareModel::from_json(&read_text(p)?)?),
        None => Ok(HardwareModel::a100()),
    }
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let cfg: ScenarioConfig = parse_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let spec = match &cfg.workload {
            WorkloadSource::Inline(s) => s.clone(),
            WorkloadSource::File(p) => parse_json(&resolve(base, p))?,
        };
        spec.validate()?;
        if cfg.strategies.is_empty() {
            return Err(Failure::Invalid("scenario lists no strategies".into()));
        }
        if cfg.tolerance.is_nan() || cfg.tolerance <= 0.0 {
            return Err(Failure::Invalid(format!("tolerance must be positive, got {}", cfg.tolerance)));
        }
        let table = match &cfg.table {
            Some(p) => {
                let t: BlockTable = parse_json(&resolve(base, p))?;
                t.validate()?;
                Some(t)
            }
            None => None,
        };
        let hardware = load_hardware(cfg.hardware.as_ref().map(|p| resolve(base, p)).as_deref())?;
        let registers = match &cfg.registers {
            Some(p) => RegisterUsageTable::from_json(&read_text(&resolve(base, p))?)?,
            None => RegisterUsageTable::synthetic_default(),
        };
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "scenario".into());
        let output = match &cfg.output {
            Some(p) => resolve(base, p),
            None => base.join(format!("{name}.report.json")),
        };
        Ok(Scenario {
            name,
            spec,
            table,
            hardware,
            registers,
            strategies: cfg.strategies,
            seed: cfg.seed,
            output,
            tolerance: cfg.tolerance,
            precision: cfg.precision,
        })
    }

    pub fn table(&self) -> Result<BlockTable, Failure> {
        match &self.table {
            Some(t) => Ok(t.clone()),
            None => Ok(generate_workload(&self.spec, self.seed)?),
        }
    }
}

/// A workload file holds either a spec or a block table.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum WorkloadFile {
    Table(BlockTable),
    Spec(WorkloadSpec),
}

pub fn parse_heads(s: &str) -> Result<HeadConfig, String> {
    let parts: Vec<usize> = s
        .split(':')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("'{p}': {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [q, kv, dim] => Ok(HeadConfig { q, kv, dim }),
        _ => Err("expected QUERY_HEADS:KV_HEADS:DIM".into()),
    }
}
