//! Command-line entry point: argument parsing, run orchestration and the
//! JSON report.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::PathBuf;

use clap::Parser;
use serde::Serialize;
use thiserror::Error;

use crate::artifacts::load_sidecars;
use crate::detection::{
    make_stdin_symbolic, s2_explore, s3_run, setup_stack, ExplorationStats, ExploreBudget,
    Finding, InvariantProfile, RunEnv, SinkSpec, Strategy,
};
use crate::emulator::SENTINEL_RETURN;
use crate::parser::parse_program;
use crate::solver::SolverConfig;
use crate::state::{DumpManifest, MachineState, RegisterMap};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Load(String),
}

/// Concolic execution of lifted P-Code listings with panic-path and
/// memory-safety bug detection.
#[derive(Debug, Parser)]
#[command(name = "pcodex", version)]
pub struct Cli {
    /// P-Code listing files (one or more translation units).
    #[arg(required = true)]
    pub listings: Vec<PathBuf>,

    /// Base address offset for the listing at the same position
    /// (hex, repeatable). Unmatched listings load at offset 0.
    #[arg(long)]
    pub base: Vec<String>,

    /// Panic cross-reference sidecar (xref_addresses.txt format).
    #[arg(long)]
    pub xrefs: Option<PathBuf>,

    /// Jump table sidecar (jump_table.json format).
    #[arg(long = "jump-tables")]
    pub jump_tables: Option<PathBuf>,

    /// Symbol name sidecar (one `0xADDR name` per line).
    #[arg(long)]
    pub symbols: Option<PathBuf>,

    /// Register/memory dump manifest to start from.
    #[arg(long)]
    pub dump: Option<PathBuf>,

    /// Start address (hex). Defaults to the dump's rip, else the lowest
    /// instruction address.
    #[arg(long)]
    pub start: Option<String>,

    /// Function-entry analysis target as ADDR:ARGC (implies --strategy s3).
    #[arg(long)]
    pub func: Option<String>,

    /// Detection strategy: s1 (concrete pass), s2 (concolic exploration),
    /// s3 (function entry with symbolic arguments).
    #[arg(long, default_value = "s1")]
    pub strategy: String,

    /// Enable the C memory-safety invariants (null, alignment, init).
    #[arg(long = "c-invariants")]
    pub c_invariants: bool,

    #[arg(long, default_value_t = 100_000)]
    pub max_steps: u64,

    #[arg(long, default_value_t = 64)]
    pub max_forks: u32,

    #[arg(long, default_value_t = 32)]
    pub max_depth: u32,

    #[arg(long = "solver-timeout-ms", default_value_t = 5000)]
    pub solver_timeout_ms: u64,

    /// Seed for all randomized concrete values.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Treat unknown ops, CALLOTHERs and syscalls as fatal.
    #[arg(long)]
    pub strict: bool,

    /// Prompt for the start address and invariant profile on stdin.
    #[arg(long)]
    pub interactive: bool,

    /// Output directory for the report and execution artifacts.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,

    /// Alternative register name map file.
    #[arg(long)]
    pub regmap: Option<PathBuf>,

    /// External call stub as NAME=0xRETVAL (repeatable).
    #[arg(long)]
    pub stub: Vec<String>,

    /// Make bytes read from stdin symbolic.
    #[arg(long = "symbolic-stdin")]
    pub symbolic_stdin: bool,

    /// Concrete bytes backing the emulated stdin.
    #[arg(long = "stdin-data")]
    pub stdin_data: Option<String>,

    /// Exploration worker threads. Artifact determinism is only
    /// guaranteed at 1.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,

    /// Keep executing after a finding instead of stopping the path.
    #[arg(long = "continue-after-finding")]
    pub continue_after_finding: bool,

    /// Suppress the per-op execution log.
    #[arg(long = "no-log")]
    pub no_log: bool,

    /// Suppress the call/syscall trace.
    #[arg(long = "no-trace")]
    pub no_trace: bool,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub strategy: String,
    pub start_address: u64,
    pub seed: u64,
    pub findings: Vec<Finding>,
    pub stats: ExplorationStats,
    pub warnings: Vec<String>,
    pub exit_status: String,
}

impl RunReport {
    pub fn process_exit_code(&self) -> i32 {
        if !self.findings.is_empty() {
            1
        } else if self.stats.faults > 0 {
            3
        } else {
            0
        }
    }
}

fn parse_hex(s: &str) -> Result<u64, CliError> {
    let hex = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    u64::from_str_radix(hex, 16).map_err(|_| CliError::Usage(format!("bad hex value {s:?}")))
}

fn parse_func_spec(s: &str) -> Result<(u64, usize), CliError> {
    let (addr, argc) = s
        .split_once(':')
        .ok_or_else(|| CliError::Usage(format!("--func expects ADDR:ARGC, got {s:?}")))?;
    let addr = parse_hex(addr)?;
    let argc: usize = argc
        .parse()
        .map_err(|_| CliError::Usage(format!("bad argument count in --func {s:?}")))?;
    Ok((addr, argc))
}

fn read_file(path: &PathBuf) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Interactive prompts, answered from `input`. Returns overrides for the
/// start address and the C invariant toggle.
pub fn interactive_prompts(
    input: &mut dyn BufRead,
    output: &mut dyn Write,
) -> Result<(Option<u64>, bool), CliError> {
    write!(output, "start address (hex, empty for default): ")
        .and_then(|_| output.flush())
        .ok();
    let mut line = String::new();
    input
        .read_line(&mut line)
        .map_err(|e| CliError::Usage(format!("cannot read interactive input: {e}")))?;
    let start = match line.trim() {
        "" => None,
        s => Some(parse_hex(s)?),
    };
    write!(output, "enable C memory-safety invariants? [y/N]: ")
        .and_then(|_| output.flush())
        .ok();
    line.clear();
    input
        .read_line(&mut line)
        .map_err(|e| CliError::Usage(format!("cannot read interactive input: {e}")))?;
    let c_invariants = matches!(line.trim(), "y" | "Y" | "yes");
    Ok((start, c_invariants))
}

pub fn run_cli(mut cli: Cli) -> Result<RunReport, CliError> {
    if cli.interactive {
        let stdin = std::io::stdin();
        let mut stdout = std::io::stdout();
        let (start, c_inv) = interactive_prompts(&mut stdin.lock(), &mut stdout)?;
        if let Some(start) = start {
            cli.start = Some(format!("{start:#x}"));
        }
        cli.c_invariants = cli.c_invariants || c_inv;
    }
    run(cli)
}

pub fn run(cli: Cli) -> Result<RunReport, CliError> {
    let strategy = match cli.strategy.as_str() {
        "s1" => Strategy::S1,
        "s2" => Strategy::S2,
        "s3" => Strategy::S3,
        other => {
            return Err(CliError::Usage(format!(
                "unknown strategy {other:?}; expected s1, s2 or s3"
            )))
        }
    };
    if strategy == Strategy::S3 && cli.func.is_none() {
        return Err(CliError::Usage(
            "--strategy s3 requires --func ADDR:ARGC".to_string(),
        ));
    }

    // Load and link the listings.
    let mut sources = Vec::new();
    for (i, path) in cli.listings.iter().enumerate() {
        let base = match cli.base.get(i) {
            Some(b) => parse_hex(b)?,
            None => 0,
        };
        sources.push((path.display().to_string(), base, read_file(path)?));
    }
    let (img, mut warnings) =
        parse_program(&sources, !cli.strict).map_err(|e| CliError::Load(e.to_string()))?;
    if img.instructions.is_empty() {
        return Err(CliError::Load("no instructions in the image".to_string()));
    }

    let (xrefs, tables, symbols, sidecar_warnings) = load_sidecars(
        cli.xrefs.as_deref(),
        cli.jump_tables.as_deref(),
        cli.symbols.as_deref(),
        &img,
    )
    .map_err(|e| CliError::Load(e.to_string()))?;
    warnings.extend(sidecar_warnings);

    let register_map = match &cli.regmap {
        Some(path) => RegisterMap::parse(&read_file(path)?)
            .map_err(|e| CliError::Load(e.to_string()))?,
        None => RegisterMap::default_x86_64(),
    };

    let mut stubs = BTreeMap::new();
    for spec in &cli.stub {
        let (name, value) = spec
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--stub expects NAME=0xVAL, got {spec:?}")))?;
        stubs.insert(name.to_string(), parse_hex(value)?);
    }

    let profile = if cli.c_invariants {
        InvariantProfile::c_profile()
    } else {
        InvariantProfile::default()
    };
    let solver_cfg = SolverConfig {
        timeout_ms: cli.solver_timeout_ms,
        ..SolverConfig::from_env()
    };
    let env = RunEnv {
        img: &img,
        xrefs: &xrefs,
        tables: &tables,
        symbols: &symbols,
        profile: &profile,
        stubs,
        strict: cli.strict,
        strategy,
        solver_cfg,
        halt_on_finding: !cli.continue_after_finding,
    };
    let budget = ExploreBudget {
        max_steps: cli.max_steps,
        // s1 is the degenerate exploration with no forking.
        max_forks: if strategy == Strategy::S1 { 0 } else { cli.max_forks },
        max_depth: cli.max_depth,
        workers: cli.workers.max(1),
    };

    std::fs::create_dir_all(&cli.out).map_err(|e| CliError::Io {
        path: cli.out.display().to_string(),
        source: e,
    })?;
    let sinks = SinkSpec {
        dir: cli.out.clone(),
        log: !cli.no_log,
        trace: !cli.no_trace,
    };
    let sinks = if sinks.log || sinks.trace {
        Some(sinks)
    } else {
        None
    };

    let (start_address, findings, stats) = if let Some(func) = &cli.func {
        let (addr, argc) = parse_func_spec(func)?;
        if !img.contains(addr) {
            return Err(CliError::Usage(format!(
                "--func address {addr:#x} is not in the image"
            )));
        }
        let (findings, stats) = s3_run(
            &env,
            register_map,
            addr,
            argc,
            cli.seed,
            &budget,
            sinks.as_ref(),
        );
        (addr, findings, stats)
    } else {
        let mut state = MachineState::new(register_map, cli.seed);
        let mut have_stack = false;
        if let Some(dump_path) = &cli.dump {
            let manifest = DumpManifest::from_json(&read_file(dump_path)?)
                .map_err(|e| CliError::Load(e.to_string()))?;
            let dir = dump_path.parent().unwrap_or(std::path::Path::new("."));
            state
                .load_dump(&manifest, dir)
                .map_err(|e| CliError::Load(e.to_string()))?;
            have_stack = manifest.registers.contains_key("rsp");
        }
        if let Some(start) = &cli.start {
            state.pc = parse_hex(start)?;
        } else if cli.dump.is_none() {
            state.pc = *img.instructions.keys().next().expect("image is non-empty");
        }
        if !img.contains(state.pc) {
            return Err(CliError::Usage(format!(
                "start address {:#x} is not in the image",
                state.pc
            )));
        }
        if !have_stack {
            setup_stack(&mut state, 0x7fff_0000, 0x10000, SENTINEL_RETURN);
        }
        if cli.symbolic_stdin || cli.stdin_data.is_some() {
            let data = cli
                .stdin_data
                .as_ref()
                .map(|s| s.as_bytes().to_vec())
                .unwrap_or_default();
            if cli.symbolic_stdin {
                make_stdin_symbolic(&mut state, data);
            } else if let Some(crate::state::FdState::Stdin(src)) = state.vfs.fds.get_mut(&0) {
                src.data = data;
            }
        }
        let start = state.pc;
        let (findings, stats) = s2_explore(&env, state, &budget, sinks.as_ref());
        (start, findings, stats)
    };

    let mut findings = findings;
    findings.sort_by(|a, b| {
        (a.trace_ref, a.address, &a.kind).cmp(&(b.trace_ref, b.address, &b.kind))
    });
    let exit_status = if !findings.is_empty() {
        "findings"
    } else if stats.faults > 0 {
        "faulted"
    } else if stats.budget_exhausted {
        "budget_exhausted"
    } else {
        "clean"
    };
    let report = RunReport {
        strategy: strategy.name().to_string(),
        start_address,
        seed: cli.seed,
        findings,
        stats,
        warnings,
        exit_status: exit_status.to_string(),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    let report_path = cli.out.join("report.json");
    std::fs::write(&report_path, json + "\n").map_err(|e| CliError::Io {
        path: report_path.display().to_string(),
        source: e,
    })?;
    Ok(report)
}
