use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const A100_JSON: &str = include_str!("../../profiles/a100.json");
const H100_JSON: &str = include_str!("../../profiles/h100.json");
const SYNTHETIC_REGS_JSON: &str = include_str!("../../profiles/registers_synthetic.json");

/// Analytical GPU description: capacities bound tile feasibility, bandwidth
/// and latency drive the execution model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardwareModel {
    pub name: String,
    pub num_sms: usize,
    /// Shared memory one CTA may address, bytes.
    pub smem_per_cta: usize,
    /// Shared memory per SM, bytes; bounds resident concurrency.
    pub smem_per_sm: usize,
    /// Registers one thread may use.
    pub reg_per_thread_limit: usize,
    /// Registers per SM.
    pub reg_file_per_sm: usize,
    #[serde(default = "default_max_ctas")]
    pub max_ctas_per_sm: usize,
    /// Sustained global-memory bandwidth, bytes/ns.
    pub bandwidth: f64,
    /// Inherent global-memory latency, ns.
    pub inherent_latency: f64,
    /// Tensor-core multiply-accumulates per ns per SM.
    pub tensor_throughput: f64,
    #[serde(default)]
    pub l2_bytes: usize,
    /// Tiles a CTA keeps in flight. When set, a CTA's load rate is capped at
    /// `inflight_tiles * tile_bytes / inherent_latency`.
    #[serde(default)]
    pub inflight_tiles: Option<f64>,
}

fn default_max_ctas() -> usize {
    32
}

impl HardwareModel {
    pub fn a100() -> Self {
        serde_json::from_str(A100_JSON).expect("bundled a100 profile parses")
    }

    pub fn h100() -> Self {
        serde_json::from_str(H100_JSON).expect("bundled h100 profile parses")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let hw: HardwareModel =
            serde_json::from_str(s).map_err(|e| Error::InvalidSpec(format!("hardware profile: {e}")))?;
        hw.validate()?;
        Ok(hw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let ints = [
            self.num_sms,
            self.smem_per_cta,
            self.smem_per_sm,
            self.reg_per_thread_limit,
            self.reg_file_per_sm,
            self.max_ctas_per_sm,
        ];
        let floats = [self.bandwidth, self.inherent_latency, self.tensor_throughput];
        if ints.contains(&0) || floats.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidSpec(format!("hardware {}: capacities must be positive", self.name)));
        }
        if let Some(t) = self.inflight_tiles {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidSpec("inflight_tiles must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegisterUsage {
    pub r_thr: usize,
    pub r_cta: usize,
    pub threads_per_cta: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
struct Entry {
    m: u32,
    n: u32,
    r_thr: usize,
    r_cta: usize,
    threads_per_cta: usize,
}

/// Measured (or, for the bundled default, synthetic) register usage per
/// `(m, n)` tile pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "RegisterFile", into = "RegisterFile")]
pub struct RegisterUsageTable {
    pub name: String,
    pub synthetic: bool,
    pub note: String,
    entries: BTreeMap<(u32, u32), RegisterUsage>,
}

#[derive(Serialize, Deserialize)]
struct RegisterFile {
    name: String,
    #[serde(default)]
    synthetic: bool,
    #[serde(default)]
    note: String,
    entries: Vec<Entry>,
}

impl From<RegisterFile> for RegisterUsageTable {
    fn from(f: RegisterFile) -> Self {
        let entries = f
            .entries
            .into_iter()
            .map(|e| ((e.m, e.n), RegisterUsage { r_thr: e.r_thr, r_cta: e.r_cta, threads_per_cta: e.threads_per_cta }))
            .collect();
        RegisterUsageTable { name: f.name, synthetic: f.synthetic, note: f.note, entries }
    }
}

impl From<RegisterUsageTable> for RegisterFile {
    fn from(t: RegisterUsageTable) -> Self {
        let entries = t
            .entries
            .into_iter()
            .map(|((m, n), u)| Entry { m, n, r_thr: u.r_thr, r_cta: u.r_cta, threads_per_cta: u.threads_per_cta })
            .collect();
        RegisterFile { name: t.name, synthetic: t.synthetic, note: t.note, entries }
    }
}

impl RegisterUsageTable {
    /// Bundled synthetic table for head dim 128 (not measured).
    pub fn synthetic_default() -> Self {
        serde_json::from_str(SYNTHETIC_REGS_JSON).expect("bundled register table parses")
    }

    pub fn new(name: impl Into<String>) -> Self {
        RegisterUsageTable { name: name.into(), synthetic: true, note: String::new(), entries: BTreeMap::new() }
    }

    pub fn insert(&mut self, m: u32, n: u32, usage: RegisterUsage) {
        self.entries.insert((m, n), usage);
    }

    pub fn get(&self, m: u32, n: u32) -> Option<RegisterUsage> {
        self.entries.get(&(m, n)).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = ((u32, u32), RegisterUsage)> + '_ {
        self.entries.iter().map(|(&k, &v)| (k, v))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidSpec(format!("register table: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_json(&text)
    }
}
