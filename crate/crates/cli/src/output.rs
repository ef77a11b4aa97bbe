use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use prefixpack::workload::WorkloadSpec;
use prefixpack::StrategyRow;

/// Writes `bytes` to a temporary file beside `path`, then renames it into
/// place so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// `report.json` -> `report.csv`, `report.meta.json`.
pub fn sibling(path: &Path, ext: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{ext}"))
}

#[derive(Debug, Serialize)]
pub struct Report<'a> {
    pub scenario: &'a str,
    pub hardware: &'a str,
    pub seed: u64,
    pub workload: &'a WorkloadSpec,
    pub fingerprint: String,
    pub queries: usize,
    pub theoretical_min_kv_bytes: u64,
    pub rows: &'a [StrategyRow],
}

/// Run facts that differ between identical runs.
#[derive(Debug, Serialize)]
pub struct Meta {
    pub tool_version: &'static str,
    pub created_unix_ms: u128,
    pub elapsed_ms: u128,
    pub threads: usize,
}

impl Meta {
    pub fn now(elapsed: std::time::Duration) -> Self {
        Meta {
            tool_version: env!("CARGO_PKG_VERSION"),
            created_unix_ms: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_millis())
                .unwrap_or(0),
            elapsed_ms: elapsed.as_millis(),
            threads: prefixpack::par::num_threads(),
        }
    }
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const ROW_HEADER: &str =
    "strategy,kv_bytes,intermediate_bytes,total_bytes,redundancy_ratio,makespan_ns,mem_waste,exec_bubble,pack_count,task_count,verified,max_rel_error";

/// One CSV line for `ROW_HEADER`.
pub fn row_csv(r: &StrategyRow, min_kv: u64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        r.strategy,
        r.kv_bytes,
        r.intermediate_bytes,
        r.total_bytes,
        ratio(r.kv_bytes, min_kv),
        r.makespan_ns,
        r.mem_waste,
        r.exec_bubble,
        r.pack_count,
        r.task_count,
        opt(r.verified),
        opt(r.max_rel_error)
    )
}

pub fn ratio(kv: u64, min_kv: u64) -> f64 {
    if min_kv == 0 {
        1.0
    } else {
        kv as f64 / min_kv as f64
    }
}

pub fn rows_csv(rows: &[StrategyRow], min_kv: u64) -> String {
    let mut s = String::from(ROW_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&row_csv(r, min_kv));
        s.push('\n');
    }
    s
}

pub fn print_table(rows: &[StrategyRow], min_kv: u64) {
    println!(
        "{:<20} {:>14} {:>12} {:>8} {:>14} {:>8} {:>8} {:>7} {:>9}",
        "strategy", "kv_bytes", "partials", "kv/min", "makespan_ns", "I_mem", "I_exe", "packs", "verified"
    );
    for r in rows {
        println!(
            "{:<20} {:>14} {:>12} {:>8.3} {:>14.1} {:>8.4} {:>8.4} {:>7} {:>9}",
            r.strategy.name(),
            r.kv_bytes,
            r.intermediate_bytes,
            ratio(r.kv_bytes, min_kv),
            r.makespan_ns,
            r.mem_waste,
            r.exec_bubble,
            r.pack_count,
            match r.verified {
                Some(true) => "yes",
                Some(false) => "NO",
                None => "-",
            }
        );
    }
}
