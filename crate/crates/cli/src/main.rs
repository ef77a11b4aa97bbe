mod output;
mod scenario;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use prefixpack::attention::Precision;
use prefixpack::par::{self, Execution};
use prefixpack::pipeline::{run_strategy, verify_tasks, StrategyRow, TileSetup, VerifyOptions};
use prefixpack::sim::theoretical_minimum;
use prefixpack::tile::{CalibrationOptions, RegisterUsageTable};
use prefixpack::workload::{BlockTable, HeadConfig, WorkloadSpec};
use prefixpack::{generate_workload, Strategy};

use output::{print_table, rows_csv, sibling, write_atomic, Meta, Report};
use scenario::{load_hardware, parse_heads, parse_json, Scenario, WorkloadFile};

#[derive(Debug, thiserror::Error)]
pub enum Failure {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Verification(String),
    #[error("{0}")]
    Infeasible(String),
    #[error(transparent)]
    Other(#[from] anyhow::Error),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Other(_) => 1,
            Failure::Invalid(_) => 2,
            Failure::Verification(_) => 3,
            Failure::Infeasible(_) => 4,
        }
    }
}

impl From<prefixpack::Error> for Failure {
    fn from(e: prefixpack::Error) -> Self {
        use prefixpack::Error as E;
        match e {
            E::EmptyFeasibleSet | E::NoFeasibleConfig(_) => Failure::Infeasible(e.to_string()),
            E::InvalidSpec(_)
            | E::InvalidTable(_)
            | E::InvalidPartition(_)
            | E::MissingRegisterEntry { .. }
            | E::ShapeMismatch(_)
            | E::UnknownBlock(_)
            | E::CoverageGap { .. } => Failure::Invalid(e.to_string()),
            other => Failure::Other(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "prefixpack", version, about = "Prefix-aware decode-attention packing and execution modeling")]
struct Cli {
    /// Run every stage on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Axis {
    /// Queries per batch (last `B` entry).
    Batch,
    /// Tokens of the outermost shared prefix (first `L` entry).
    PrefixLen,
    /// Tokens of the per-query suffix (last `L` entry).
    KvLen,
    /// Queries sharing each last-level parent.
    Fanout,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Expand a workload spec into a block table.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run every strategy of a scenario and write a comparison report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Check each strategy's merged output against full attention.
        #[arg(long)]
        verify: bool,
    },
    /// Repeat a scenario over a grid of one workload parameter.
    Sweep {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values or an inclusive range `a..=b`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// CSV path; defaults to `<report stem>.sweep.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        verify: bool,
    },
    /// Compare one strategy's packed attention with full attention.
    Verify {
        /// A workload spec or a block table.
        #[arg(long)]
        workload: PathBuf,
        #[arg(long, default_value = "pat")]
        strategy: Strategy,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        /// Head layout for block-table workloads, `Q:KV:DIM`.
        #[arg(long, value_parser = parse_heads)]
        heads: Option<HeadConfig>,
        /// Store partials in 4-byte floats.
        #[arg(long)]
        f32_partials: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    match dispatch(cli.command, exec) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cmd: Command, exec: Execution) -> Result<(), Failure> {
    match cmd {
        Command::Gen { spec, seed, out } => cmd_gen(&spec, seed, &out),
        Command::Run { scenario, verify } => cmd_run(&scenario, verify, exec),
        Command::Sweep { scenario, axis, values, out, verify } => {
            cmd_sweep(&scenario, axis, &values, out.as_deref(), verify, exec)
        }
        Command::Verify { workload, strategy, seed, tol, heads, f32_partials } => {
            let precision = if f32_partials { Precision::F32 } else { Precision::F64 };
            cmd_verify(&workload, strategy, seed, tol, heads, precision, exec)
        }
    }
}

fn cmd_gen(spec_path: &Path, seed: u64, out: &Path) -> Result<(), Failure> {
    let spec: WorkloadSpec = parse_json(spec_path)?;
    let table = generate_workload(&spec, seed)?;
    let json = serde_json::to_string(&table).map_err(anyhow::Error::from)?;
    write_atomic(out, json.as_bytes())?;
    println!("queries:            {}", table.num_queries());
    println!("distinct blocks:    {}", table.distinct_blocks());
    println!("distinct tokens:    {}", table.distinct_tokens());
    println!("min KV traffic (B): {}", theoretical_minimum(&table, &spec));
    println!("wrote {}", out.display());
    Ok(())
}

fn setup_for(sc: &Scenario, exec: Execution) -> Result<TileSetup, Failure> {
    Ok(TileSetup::build(sc.hardware.clone(), &sc.registers, &sc.spec, &CalibrationOptions::default(), exec)?)
}

fn run_rows(
    sc: &Scenario,
    table: &BlockTable,
    spec: &WorkloadSpec,
    setup: &TileSetup,
    verify: Option<&VerifyOptions>,
    exec: Execution,
) -> Result<Vec<StrategyRow>, Failure> {
    let rows = par::try_map(exec, &sc.strategies, |&s| run_strategy(s, table, spec, setup, verify, exec).map(|r| r.row))?;
    Ok(rows)
}

fn verification_failures(rows: &[StrategyRow], tol: f64) -> Option<String> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| r.verified == Some(false))
        .map(|r| format!("{} (max rel err {:e})", r.strategy, r.max_rel_error.unwrap_or(f64::NAN)))
        .collect();
    (!bad.is_empty()).then(|| format!("verification above tolerance {tol:e}: {}", bad.join(", ")))
}

fn cmd_run(path: &Path, verify: bool, exec: Execution) -> Result<(), Failure> {
    let t0 = Instant::now();
    let sc = Scenario::load(path)?;
    let table = sc.table()?;
    let setup = setup_for(&sc, exec)?;
    let opts = VerifyOptions { seed: sc.seed, tolerance: sc.tolerance, precision: sc.precision };
    let rows = run_rows(&sc, &table, &sc.spec, &setup, verify.then_some(&opts), exec)?;
    let min_kv = theoretical_minimum(&table, &sc.spec);

    let report = Report {
        scenario: &sc.name,
        hardware: &sc.hardware.name,
        seed: sc.seed,
        workload: &sc.spec,
        fingerprint: table.fingerprint(),
        queries: table.num_queries(),
        theoretical_min_kv_bytes: min_kv,
        rows: &rows,
    };
    let json = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
    let meta = serde_json::to_string_pretty(&Meta::now(t0.elapsed())).map_err(anyhow::Error::from)?;
    write_atomic(&sc.output, json.as_bytes())?;
    write_atomic(&sibling(&sc.output, "csv"), rows_csv(&rows, min_kv).as_bytes())?;
    write_atomic(&sibling(&sc.output, "meta.json"), meta.as_bytes())?;

    print_table(&rows, min_kv);
    println!("wrote {}", sc.output.display());
    match verification_failures(&rows, sc.tolerance) {
        Some(msg) => Err(Failure::Verification(msg)),
        None => Ok(()),
    }
}

fn parse_values(s: &str) -> Result<Vec<usize>, Failure> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let num = |t: &str| t.trim().parse::<usize>().map_err(|e| Failure::Invalid(format!("value '{t}': {e}")));
    if let Some((a, b)) = s.split_once("..=") {
        return Ok((num(a)?..=num(b)?).collect());
    }
    s.split(',').map(num).collect()
}

fn apply_axis(spec: &WorkloadSpec, axis: Axis, v: usize) -> Result<WorkloadSpec, Failure> {
    let mut s = spec.clone();
    let last = s.level_counts.len() - 1;
    match axis {
        Axis::Batch => s.level_counts[last] = v,
        Axis::PrefixLen => s.level_lengths[0] = v,
        Axis::KvLen => s.level_lengths[last] = v,
        Axis::Fanout => {
            if last == 0 {
                return Err(Failure::Invalid("fan-out sweeps need at least two levels".into()));
            }
            s.level_counts[last] = s.level_counts[last - 1] * v;
        }
    }
    s.validate()?;
    Ok(s)
}

const SWEEP_HEADER: &str = "axis,value";

fn cmd_sweep(
    path: &Path,
    axis: Axis,
    values: &str,
    out: Option<&Path>,
    verify: bool,
    exec: Execution,
) -> Result<(), Failure> {
    let t0 = Instant::now();
    let sc = Scenario::load(path)?;
    if sc.table.is_some() {
        return Err(Failure::Invalid("sweeps regenerate the workload; remove 'table' from the scenario".into()));
    }
    let values = parse_values(values)?;
    let specs: Vec<WorkloadSpec> = values.iter().map(|&v| apply_axis(&sc.spec, axis, v)).collect::<Result<_, _>>()?;
    let setup = setup_for(&sc, exec)?;
    let opts = VerifyOptions { seed: sc.seed, tolerance: sc.tolerance, precision: sc.precision };
    let axis_name = axis.to_possible_value().map(|p| p.get_name().to_string()).unwrap_or_default();

    let points = par::try_map(exec, &specs, |spec| -> Result<String, Failure> {
        let table = generate_workload(spec, sc.seed)?;
        let rows = run_rows(&sc, &table, spec, &setup, verify.then_some(&opts), Execution::Sequential)?;
        let min_kv = theoretical_minimum(&table, spec);
        let csv = rows_csv(&rows, min_kv);
        if let Some(msg) = verification_failures(&rows, sc.tolerance) {
            return Err(Failure::Verification(msg));
        }
        Ok(csv)
    })?;

    let mut csv = format!("{SWEEP_HEADER},{}\n", output::ROW_HEADER);
    for (v, block) in values.iter().zip(&points) {
        for line in block.lines().skip(1) {
            csv.push_str(&format!("{axis_name},{v},{line}\n"));
        }
    }
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| sibling(&sc.output, "sweep.csv"));
    write_atomic(&out, csv.as_bytes())?;
    let meta = serde_json::to_string_pretty(&Meta::now(t0.elapsed())).map_err(anyhow::Error::from)?;
    write_atomic(&sibling(&out, "meta.json"), meta.as_bytes())?;
    println!("{} points x {} strategies -> {}", values.len(), sc.strategies.len(), out.display());
    Ok(())
}

fn cmd_verify(
    path: &Path,
    strategy: Strategy,
    seed: u64,
    tol: f64,
    heads: Option<HeadConfig>,
    precision: Precision,
    exec: Execution,
) -> Result<(), Failure> {
    if tol.is_nan() || tol <= 0.0 {
        return Err(Failure::Invalid(format!("tolerance must be positive, got {tol}")));
    }
    let (mut spec, table) = match parse_json::<WorkloadFile>(path)? {
        WorkloadFile::Spec(spec) => {
            let table = generate_workload(&spec, seed)?;
            (spec, table)
        }
        WorkloadFile::Table(table) => {
            table.validate()?;
            let spec = WorkloadSpec::new(vec![table.num_queries()], vec![0], table.block_size);
            (spec, table)
        }
    };
    if let Some(h) = heads {
        spec.heads = h;
    }
    let setup = TileSetup::build(
        load_hardware(None)?,
        &RegisterUsageTable::synthetic_default(),
        &spec,
        &CalibrationOptions::default(),
        exec,
    )?;
    let partition = prefixpack::pipeline::partition_for(strategy, &table)?;
    let tasks = prefixpack::pipeline::tasks_for(strategy, &partition, &table, &setup)?;
    let opts = VerifyOptions { seed, tolerance: tol, precision };
    let err = verify_tasks(&table, &tasks, &spec, &opts, exec)?;
    println!(
        "{strategy}: {} queries, {} packs, {} tasks, max relative error {err:e} (tolerance {tol:e})",
        table.num_queries(),
        partition.len(),
        tasks.len()
    );
    if err <= tol {
        println!("PASS");
        Ok(())
    } else {
        Err(Failure::Verification(format!("max relative error {err:e} exceeds {tol:e}")))
    }
}
