//! Offline `(m, n)` tile solving.
//!
//! A candidate is accepted when it passes, in this order:
//! - ③ both tiles are powers of two no smaller than 16;
//! - ① the CTA fits the per-CTA shared memory, the per-thread register limit,
//!   and at least one CTA fits an SM;
//! - ② enough KV bytes are in flight across all resident CTAs to cover the
//!   memory latency: `n >= ceil(L * B / (S * C * d * b))`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tile::hardware::{HardwareModel, RegisterUsageTable};

pub const MIN_TILE: u32 = 16;

/// Head dim and element sizes the tiles are solved for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileContext {
    pub head_dim: usize,
    pub kv_bytes: usize,
    pub intermediate_bytes: usize,
}

impl TileContext {
    pub fn new(head_dim: usize, kv_bytes: usize, intermediate_bytes: usize) -> Self {
        TileContext { head_dim, kv_bytes, intermediate_bytes }
    }

    /// Q tile + K/V tile + intermediate accumulators, bytes.
    pub fn smem_per_cta(&self, m: u32, n: u32) -> usize {
        let (m, n, d) = (m as usize, n as usize, self.head_dim);
        m * d * self.kv_bytes + n * d * self.kv_bytes + m * d * self.intermediate_bytes
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TileConfig {
    pub m: u32,
    pub n: u32,
    /// Resident CTAs per SM.
    pub concurrency: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Constraint {
    /// ① shared memory and registers
    #[serde(rename = "①")]
    Resources,
    /// ② bandwidth saturation lower bound on n
    #[serde(rename = "②")]
    Bandwidth,
    /// ③ power-of-two tiles of at least 16
    #[serde(rename = "③")]
    TileShape,
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Constraint::Resources => "①",
            Constraint::Bandwidth => "②",
            Constraint::TileShape => "③",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub m: u32,
    pub n: u32,
    pub constraint: Constraint,
    pub detail: String,
}

/// Accepted configurations plus annotated rejections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub hardware: String,
    pub context: TileContext,
    pub configs: Vec<TileConfig>,
    pub rejected: Vec<Rejection>,
}

impl FeasibleSet {
    pub fn from_configs(hardware: impl Into<String>, context: TileContext, mut configs: Vec<TileConfig>) -> Self {
        configs.sort();
        configs.dedup();
        FeasibleSet { hardware: hardware.into(), context, configs, rejected: Vec::new() }
    }

    pub fn is_empty(&self) -> bool {
        self.configs.is_empty()
    }

    pub fn get(&self, m: u32, n: u32) -> Option<TileConfig> {
        self.configs.iter().copied().find(|c| c.m == m && c.n == n)
    }

    /// Distinct feasible Q tiles, ascending.
    pub fn q_tiles(&self) -> Vec<u32> {
        let mut ms: Vec<u32> = self.configs.iter().map(|c| c.m).collect();
        ms.sort_unstable();
        ms.dedup();
        ms
    }

    /// Feasible KV tiles for Q tile `m`, ascending.
    pub fn kv_tiles(&self, m: u32) -> Vec<u32> {
        let mut ns: Vec<u32> = self.configs.iter().filter(|c| c.m == m).map(|c| c.n).collect();
        ns.sort_unstable();
        ns
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("feasible set serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::InvalidSpec(format!("feasible set: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateRange {
    pub m: Vec<u32>,
    pub n: Vec<u32>,
}

impl Default for CandidateRange {
    /// Powers of two from 16 to 256 on both axes.
    fn default() -> Self {
        let p: Vec<u32> = (4..=8).map(|k| 1u32 << k).collect();
        CandidateRange { m: p.clone(), n: p }
    }
}

/// Largest number of `(m, n)` CTAs that fit one SM at once, limited by
/// per-SM shared memory, the register file and the resident-CTA cap.
pub fn derive_concurrency(
    m: u32,
    n: u32,
    hw: &HardwareModel,
    regs: &RegisterUsageTable,
    ctx: &TileContext,
) -> Result<usize> {
    let usage = regs.get(m, n).ok_or(Error::MissingRegisterEntry { m, n })?;
    let smem = ctx.smem_per_cta(m, n);
    let by_smem = hw.smem_per_sm.checked_div(smem).unwrap_or(usize::MAX);
    let by_regs = hw.reg_file_per_sm.checked_div(usage.r_cta).unwrap_or(usize::MAX);
    Ok(by_smem.min(by_regs).min(hw.max_ctas_per_sm))
}

/// Smallest KV tile that keeps `L * B` bytes in flight with `concurrency`
/// resident CTAs per SM. `None` when nothing is resident.
pub fn bandwidth_floor(hw: &HardwareModel, concurrency: usize, ctx: &TileContext) -> Option<u64> {
    if concurrency == 0 {
        return None;
    }
    let need = hw.inherent_latency * hw.bandwidth;
    let per_row = (hw.num_sms * concurrency * ctx.head_dim * ctx.kv_bytes) as f64;
    Some((need / per_row).ceil() as u64)
}

pub fn is_valid_tile(t: u32) -> bool {
    t >= MIN_TILE && t.is_power_of_two()
}

/// Classifies one candidate.
pub fn check_candidate(
    m: u32,
    n: u32,
    hw: &HardwareModel,
    regs: &RegisterUsageTable,
    ctx: &TileContext,
) -> std::result::Result<TileConfig, Rejection> {
    let reject = |constraint, detail: String| Rejection { m, n, constraint, detail };

    if !is_valid_tile(m) || !is_valid_tile(n) {
        return Err(reject(Constraint::TileShape, format!("tiles must be powers of two >= {MIN_TILE}")));
    }

    let smem = ctx.smem_per_cta(m, n);
    if smem > hw.smem_per_cta {
        return Err(reject(
            Constraint::Resources,
            format!("shared memory {smem} B exceeds {} B per CTA", hw.smem_per_cta),
        ));
    }
    let Some(usage) = regs.get(m, n) else {
        return Err(reject(Constraint::Resources, "no register usage entry".into()));
    };
    if usage.r_thr > hw.reg_per_thread_limit {
        return Err(reject(
            Constraint::Resources,
            format!("{} registers/thread exceed {}", usage.r_thr, hw.reg_per_thread_limit),
        ));
    }
    let c = derive_concurrency(m, n, hw, regs, ctx).expect("entry checked above");
    if c == 0 {
        return Err(reject(Constraint::Resources, "no CTA fits on an SM".into()));
    }

    let floor = bandwidth_floor(hw, c, ctx).expect("c >= 1");
    if (n as u64) < floor {
        return Err(reject(Constraint::Bandwidth, format!("n={n} below in-flight floor {floor} at C={c}")));
    }
    Ok(TileConfig { m, n, concurrency: c })
}

pub fn solve_feasible(
    hw: &HardwareModel,
    regs: &RegisterUsageTable,
    ctx: &TileContext,
    candidates: &CandidateRange,
) -> FeasibleSet {
    let mut configs = Vec::new();
    let mut rejected = Vec::new();
    for &m in &candidates.m {
        for &n in &candidates.n {
            match check_candidate(m, n, hw, regs, ctx) {
                Ok(c) => configs.push(c),
                Err(r) => rejected.push(r),
            }
        }
    }
    configs.sort();
    FeasibleSet { hardware: hw.name.clone(), context: *ctx, configs, rejected }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tile::hardware::RegisterUsage;

    fn ctx() -> TileContext {
        TileContext::new(128, 2, 4)
    }

    fn roomy_regs(pairs: &[(u32, u32)]) -> RegisterUsageTable {
        let mut t = RegisterUsageTable::new("test");
        for &(m, n) in pairs {
            t.insert(m, n, RegisterUsage { r_thr: 64, r_cta: 64 * 128, threads_per_cta: 128 });
        }
        t
    }

    #[test]
    fn concurrency_from_smem() {
        let hw = HardwareModel::a100();
        assert_eq!(ctx().smem_per_cta(64, 128), 81920);
        let c = derive_concurrency(64, 128, &hw, &roomy_regs(&[(64, 128)]), &ctx()).unwrap();
        assert_eq!(c, 2);

        // (16,16): 16384 B per CTA, register use tiny
        assert_eq!(ctx().smem_per_cta(16, 16), 16384);
        let mut tiny = RegisterUsageTable::new("tiny");
        tiny.insert(16, 16, RegisterUsage { r_thr: 32, r_cta: 32 * 64, threads_per_cta: 64 });
        let c = derive_concurrency(16, 16, &hw, &tiny, &ctx()).unwrap();
        assert_eq!(c, 196608 / 16384);
    }

    #[test]
    fn register_exhaustion_gives_zero() {
        let hw = HardwareModel::a100();
        let mut regs = RegisterUsageTable::new("huge");
        regs.insert(64, 64, RegisterUsage { r_thr: 200, r_cta: hw.reg_file_per_sm + 1, threads_per_cta: 256 });
        assert_eq!(derive_concurrency(64, 64, &hw, &regs, &ctx()).unwrap(), 0);
        assert_eq!(
            derive_concurrency(32, 32, &hw, &regs, &ctx()),
            Err(Error::MissingRegisterEntry { m: 32, n: 32 })
        );
    }

    #[test]
    fn non_power_of_two_is_shape_violation() {
        let hw = HardwareModel::a100();
        let regs = roomy_regs(&[(20, 64)]);
        let r = check_candidate(20, 64, &hw, &regs, &ctx()).unwrap_err();
        assert_eq!(r.constraint, Constraint::TileShape);
        let r = check_candidate(8, 64, &hw, &roomy_regs(&[(8, 64)]), &ctx()).unwrap_err();
        assert_eq!(r.constraint, Constraint::TileShape);
    }

    #[test]
    fn bandwidth_floor_example() {
        // L=500, B=2000, S=108, C=2, d=128, b=2: 1e6 / 55296 -> 19
        let hw = HardwareModel::a100();
        assert_eq!(bandwidth_floor(&hw, 2, &ctx()), Some(19));
        let mut regs = RegisterUsageTable::new("c2");
        // force C=2 via registers
        for n in [16, 32] {
            regs.insert(64, n, RegisterUsage { r_thr: 128, r_cta: 32768, threads_per_cta: 256 });
        }
        let r = check_candidate(64, 16, &hw, &regs, &ctx()).unwrap_err();
        assert_eq!(r.constraint, Constraint::Bandwidth);
        let ok = check_candidate(64, 32, &hw, &regs, &ctx()).unwrap();
        assert_eq!(ok.concurrency, 2);
    }

    #[test]
    fn large_square_tile_fits_smem() {
        assert_eq!(ctx().smem_per_cta(128, 128), 131072);
        assert!(ctx().smem_per_cta(128, 128) <= HardwareModel::a100().smem_per_cta);
    }

    #[test]
    fn default_a100_feasible_set() {
        let hw = HardwareModel::a100();
        let fs = solve_feasible(&hw, &RegisterUsageTable::synthetic_default(), &ctx(), &CandidateRange::default());
        assert_eq!(fs.q_tiles(), vec![16, 32, 64, 128]);
        assert_eq!(fs.configs.len() + fs.rejected.len(), 25);
        assert!(fs.get(64, 128).is_some());
        for c in &fs.configs {
            assert!(c.concurrency >= 1);
        }
        // m = 256 never fits
        assert!(fs.rejected.iter().filter(|r| r.m == 256).all(|r| r.constraint == Constraint::Resources));
        let back = FeasibleSet::from_json(&fs.to_json()).unwrap();
        assert_eq!(back, fs);
    }
}
