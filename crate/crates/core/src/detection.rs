//! Bug detection: panic cross-reference matching, solver-driven alternate
//! path exploration, function-entry analysis with symbolic arguments, and
//! the C memory-safety invariant profile.

use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::artifacts::{SymbolTable, TextSink};
use crate::emulator::{EmuConfig, Emulator, JumpTableMap, StepOutcome};
use crate::solver::{Solver, SolverConfig, SolverVerdict};
use crate::state::{FdState, MachineState, RegisterMap};
use crate::symbolic::{BinOp, BitvecExpr, ConcolicValue, SymbolId};

/// Which detector produced a finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Strategy {
    S1,
    S2,
    S3,
    CProfile,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::S1 => "s1",
            Strategy::S2 => "s2",
            Strategy::S3 => "s3",
            Strategy::CProfile => "c-profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Finding {
    pub strategy: Strategy,
    /// Bug class, e.g. "Nil Map Assignment" or "NullDeref".
    pub kind: String,
    pub address: u64,
    pub message: String,
    /// Symbol assignment that steers execution to this finding, when the
    /// path depended on symbolic input.
    pub witness: Option<BTreeMap<SymbolId, u64>>,
    /// Step counter at detection time; indexes into the execution log.
    pub trace_ref: u64,
}

/// Panic call sites: address -> (snake_case kind, panic message).
#[derive(Debug, Clone, Default)]
pub struct PanicXrefSet {
    pub entries: BTreeMap<u64, (String, String)>,
}

impl PanicXrefSet {
    pub fn contains(&self, addr: u64) -> bool {
        self.entries.contains_key(&addr)
    }
}

/// Maps a snake_case xref kind to its display name.
pub fn display_kind(kind: &str) -> String {
    match kind {
        "nil_pointer_dereference" => "Nil Pointer Dereference".to_string(),
        "index_out_of_range" => "Index Out Of Range".to_string(),
        "nil_map_assignment" => "Nil Map Assignment".to_string(),
        "too_large_channel" => "Too Large Channel Creation".to_string(),
        "negative_shift" => "Negative Shift".to_string(),
        other => other.to_string(),
    }
}

/// A user-supplied predicate checked whenever the pc reaches `address`.
#[derive(Debug, Clone)]
pub struct PredicateHook {
    pub address: u64,
    pub register: String,
    pub cmp: HookCmp,
    pub constant: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookCmp {
    Eq,
    Ne,
    ULt,
    UGt,
}

/// Which invariants are active during a run.
#[derive(Debug, Clone)]
pub struct InvariantProfile {
    pub panic_xref: bool,
    pub null_deref: bool,
    pub misaligned: bool,
    pub uninit_read: bool,
    pub hooks: Vec<PredicateHook>,
}

impl Default for InvariantProfile {
    fn default() -> InvariantProfile {
        InvariantProfile {
            panic_xref: true,
            null_deref: false,
            misaligned: false,
            uninit_read: false,
            hooks: Vec::new(),
        }
    }
}

impl InvariantProfile {
    pub fn c_profile() -> InvariantProfile {
        InvariantProfile {
            panic_xref: true,
            null_deref: true,
            misaligned: true,
            uninit_read: true,
            hooks: Vec::new(),
        }
    }
}

/// Panic cross-reference check: fires when the pc sits on a known panic
/// call site.
pub fn s1_check(
    state: &MachineState,
    xrefs: &PanicXrefSet,
    strategy: Strategy,
    step: u64,
) -> Option<Finding> {
    xrefs.entries.get(&state.pc).map(|(kind, message)| Finding {
        strategy,
        kind: display_kind(kind),
        address: state.pc,
        message: message.clone(),
        witness: witness_of(state),
        trace_ref: step,
    })
}

fn witness_of(state: &MachineState) -> Option<BTreeMap<SymbolId, u64>> {
    if state.seed_values.is_empty() {
        None
    } else {
        Some(state.seed_values.clone())
    }
}

pub fn table_overflow_finding(addr: u64, index: u64, strategy: Strategy, step: u64) -> Finding {
    Finding {
        strategy,
        kind: "table_index_overflow".to_string(),
        address: addr,
        message: format!("jump table index {index} is out of range"),
        witness: None,
        trace_ref: step,
    }
}

pub fn check_hooks(
    state: &MachineState,
    profile: &InvariantProfile,
    strategy: Strategy,
    step: u64,
) -> Vec<Finding> {
    let mut out = Vec::new();
    for hook in &profile.hooks {
        if hook.address != state.pc {
            continue;
        }
        let value = match state.read_reg(&hook.register) {
            Ok(v) => v.as_u64(),
            Err(_) => continue,
        };
        let hit = match hook.cmp {
            HookCmp::Eq => value == hook.constant,
            HookCmp::Ne => value != hook.constant,
            HookCmp::ULt => value < hook.constant,
            HookCmp::UGt => value > hook.constant,
        };
        if hit {
            out.push(Finding {
                strategy,
                kind: "custom_invariant".to_string(),
                address: state.pc,
                message: format!(
                    "register {} = {value:#x} violates the configured predicate",
                    hook.register
                ),
                witness: witness_of(state),
                trace_ref: step,
            });
        }
    }
    out
}

/// One memory access as seen by the invariant checkers.
#[derive(Debug, Clone)]
pub enum MemEvent {
    Load { addr: ConcolicValue, size: u32 },
    Store { addr: ConcolicValue, size: u32 },
}

/// Null-pointer, alignment and initialization checks, in that priority
/// order so a single bad access yields a single finding.
pub fn c_invariant_check(
    state: &MachineState,
    event: &MemEvent,
    profile: &InvariantProfile,
    solver: Option<&Solver>,
    step: u64,
) -> Option<Finding> {
    let (addr, size, is_load) = match event {
        MemEvent::Load { addr, size } => (addr, *size, true),
        MemEvent::Store { addr, size } => (addr, *size, false),
    };
    let concrete = addr.as_u64();
    if profile.null_deref {
        if concrete == 0 {
            return Some(Finding {
                strategy: Strategy::CProfile,
                kind: "NullDeref".to_string(),
                address: state.pc,
                message: format!(
                    "{} of {size} bytes at null address",
                    if is_load { "load" } else { "store" }
                ),
                witness: witness_of(state),
                trace_ref: step,
            });
        }
        // A symbolic pointer that can still be null under the current path
        // constraints is reported with the solver model as witness.
        if let (Some(expr), Some(solver)) = (&addr.sym, solver) {
            let is_null = BitvecExpr::binary(
                BinOp::Equal,
                expr.clone(),
                BitvecExpr::literal(0, expr.width()),
            );
            if let SolverVerdict::Sat(model) = solver.check_sat(&state.constraints, Some(&is_null))
            {
                return Some(Finding {
                    strategy: Strategy::CProfile,
                    kind: "NullDeref".to_string(),
                    address: state.pc,
                    message: format!(
                        "{} of {size} bytes through a pointer that can be null",
                        if is_load { "load" } else { "store" }
                    ),
                    witness: Some(model),
                    trace_ref: step,
                });
            }
        }
    }
    if is_load && profile.misaligned && size > 1 && concrete % size as u64 != 0 {
        return Some(Finding {
            strategy: Strategy::CProfile,
            kind: "MisalignedAccess".to_string(),
            address: state.pc,
            message: format!("{size}-byte load from misaligned address {concrete:#x}"),
            witness: witness_of(state),
            trace_ref: step,
        });
    }
    if is_load && profile.uninit_read && !state.memory.is_initialized(concrete, size) {
        return Some(Finding {
            strategy: Strategy::CProfile,
            kind: "UninitializedRead".to_string(),
            address: state.pc,
            message: format!("{size}-byte load from uninitialized address {concrete:#x}"),
            witness: witness_of(state),
            trace_ref: step,
        });
    }
    None
}

/// Read-only inputs shared by every worker of an exploration run.
pub struct RunEnv<'a> {
    pub img: &'a crate::model::ProgramImage,
    pub xrefs: &'a PanicXrefSet,
    pub tables: &'a JumpTableMap,
    pub symbols: &'a SymbolTable,
    pub profile: &'a InvariantProfile,
    pub stubs: BTreeMap<String, u64>,
    pub strict: bool,
    pub strategy: Strategy,
    pub solver_cfg: SolverConfig,
    pub halt_on_finding: bool,
}

#[derive(Debug, Clone)]
pub struct ExploreBudget {
    pub max_steps: u64,
    pub max_forks: u32,
    pub max_depth: u32,
    pub workers: usize,
}

impl Default for ExploreBudget {
    fn default() -> ExploreBudget {
        ExploreBudget {
            max_steps: 100_000,
            max_forks: 64,
            max_depth: 32,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ExplorationStats {
    pub steps: u64,
    pub paths: u32,
    pub forks_admitted: u32,
    pub sat_queries: u32,
    pub unsat_queries: u32,
    pub unknown_queries: u32,
    pub budget_exhausted: bool,
    /// Paths that ended in an execution fault rather than a clean exit.
    pub faults: u32,
}

/// Where to write the execution log and call trace. Workers beyond the
/// first get per-worker suffixed files.
#[derive(Debug, Clone)]
pub struct SinkSpec {
    pub dir: PathBuf,
    pub log: bool,
    pub trace: bool,
}

impl SinkSpec {
    fn open(&self, worker: usize) -> (Option<TextSink>, Option<TextSink>) {
        let suffix = if worker == 0 {
            String::new()
        } else {
            format!(".worker{worker}")
        };
        let log = if self.log {
            TextSink::file(self.dir.join(format!("execution_log{suffix}.txt"))).ok()
        } else {
            None
        };
        let trace = if self.trace {
            TextSink::file(self.dir.join(format!("execution_trace{suffix}.txt"))).ok()
        } else {
            None
        };
        (log, trace)
    }
}

struct SharedProgress {
    queue: Mutex<VecDeque<MachineState>>,
    /// Workers currently running a state; exploration ends when the queue
    /// is empty and no worker is active.
    active: AtomicUsize,
    steps: AtomicU64,
    paths: AtomicU32,
    forks: AtomicU32,
    sat: AtomicU32,
    unsat: AtomicU32,
    unknown: AtomicU32,
    budget_exhausted: AtomicBool,
    faults: AtomicU32,
    stop: AtomicBool,
    findings: Mutex<Vec<Finding>>,
}

/// Concolic exploration from an initial state. The concrete path runs
/// first; alternates queued at symbolic branches are admitted when the
/// solver proves them feasible, reseeded with the model, and executed in
/// FIFO order until the step or fork budget runs out.
///
/// With `max_forks = 0` no solver query is made and the run degenerates to
/// a single concrete pass, i.e. pure panic-xref checking.
pub fn s2_explore(
    env: &RunEnv<'_>,
    initial: MachineState,
    budget: &ExploreBudget,
    sinks: Option<&SinkSpec>,
) -> (Vec<Finding>, ExplorationStats) {
    let shared = SharedProgress {
        queue: Mutex::new(VecDeque::from([initial])),
        active: AtomicUsize::new(0),
        steps: AtomicU64::new(0),
        paths: AtomicU32::new(0),
        forks: AtomicU32::new(0),
        sat: AtomicU32::new(0),
        unsat: AtomicU32::new(0),
        unknown: AtomicU32::new(0),
        budget_exhausted: AtomicBool::new(false),
        faults: AtomicU32::new(0),
        stop: AtomicBool::new(false),
        findings: Mutex::new(Vec::new()),
    };
    let workers = budget.workers.max(1);
    if workers == 1 {
        worker_loop(env, budget, &shared, sinks, 0);
    } else {
        std::thread::scope(|scope| {
            for w in 0..workers {
                let shared = &shared;
                scope.spawn(move || worker_loop(env, budget, shared, sinks, w));
            }
        });
    }
    let findings = shared.findings.into_inner().unwrap_or_default();
    let stats = ExplorationStats {
        steps: shared.steps.into_inner(),
        paths: shared.paths.into_inner(),
        forks_admitted: shared.forks.into_inner(),
        sat_queries: shared.sat.into_inner(),
        unsat_queries: shared.unsat.into_inner(),
        unknown_queries: shared.unknown.into_inner(),
        budget_exhausted: shared.budget_exhausted.into_inner(),
        faults: shared.faults.into_inner(),
    };
    (findings, stats)
}

fn worker_loop(
    env: &RunEnv<'_>,
    budget: &ExploreBudget,
    shared: &SharedProgress,
    sinks: Option<&SinkSpec>,
    worker: usize,
) {
    let solver = Solver::new(env.solver_cfg.clone());
    let cfg = EmuConfig {
        strict: env.strict,
        halt_on_finding: env.halt_on_finding,
        explore: budget.max_forks > 0,
        max_fork_depth: budget.max_depth,
        stubs: env.stubs.clone(),
        strategy: env.strategy,
        ..EmuConfig::default()
    };
    let mut emu = Emulator::new(env.img, env.xrefs, env.tables, env.symbols, env.profile, cfg);
    emu.solver = Some(&solver);
    if let Some(spec) = sinks {
        let (log, trace) = spec.open(worker);
        emu.log = log;
        emu.trace = trace;
    }
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        let state = {
            let mut queue = shared.queue.lock().unwrap();
            match queue.pop_front() {
                Some(s) => {
                    shared.active.fetch_add(1, Ordering::SeqCst);
                    Some(s)
                }
                None => None,
            }
        };
        let Some(mut state) = state else {
            if shared.active.load(Ordering::SeqCst) == 0 {
                return;
            }
            std::thread::sleep(std::time::Duration::from_micros(50));
            continue;
        };
        shared.paths.fetch_add(1, Ordering::SeqCst);
        run_one_path(env, budget, shared, &mut emu, &solver, &mut state);
        shared.active.fetch_sub(1, Ordering::SeqCst);
    }
}

fn run_one_path(
    env: &RunEnv<'_>,
    budget: &ExploreBudget,
    shared: &SharedProgress,
    emu: &mut Emulator<'_>,
    solver: &Solver,
    state: &mut MachineState,
) {
    loop {
        if shared.stop.load(Ordering::SeqCst) {
            return;
        }
        if shared.steps.fetch_add(1, Ordering::SeqCst) >= budget.max_steps {
            shared.budget_exhausted.store(true, Ordering::SeqCst);
            return;
        }
        let outcome = emu.step(state);
        // Feasibility-check any alternates queued at this step.
        for alt in std::mem::take(&mut emu.pending_forks) {
            if shared.forks.load(Ordering::SeqCst) >= budget.max_forks {
                continue;
            }
            match solver.check_sat(&alt.constraints, None) {
                SolverVerdict::Sat(model) => {
                    shared.sat.fetch_add(1, Ordering::SeqCst);
                    if shared.forks.fetch_add(1, Ordering::SeqCst) < budget.max_forks {
                        let mut alt = alt;
                        alt.reseed(&model);
                        shared.queue.lock().unwrap().push_back(alt);
                    }
                }
                SolverVerdict::Unsat => {
                    shared.unsat.fetch_add(1, Ordering::SeqCst);
                }
                SolverVerdict::Unknown(_) => {
                    shared.unknown.fetch_add(1, Ordering::SeqCst);
                }
            }
        }
        match outcome {
            StepOutcome::Continue(_) => {}
            StepOutcome::InvariantHit(f) => {
                shared.findings.lock().unwrap().push(f);
                if env.halt_on_finding {
                    // This path stops; siblings keep exploring.
                    return;
                }
            }
            StepOutcome::Exited(_) | StepOutcome::Faulted(_) => {
                if matches!(outcome, StepOutcome::Faulted(_)) {
                    shared.faults.fetch_add(1, Ordering::SeqCst);
                }
                let collected = std::mem::take(&mut emu.findings);
                if !collected.is_empty() {
                    shared.findings.lock().unwrap().extend(collected);
                }
                return;
            }
        }
        if !emu.findings.is_empty() {
            let collected = std::mem::take(&mut emu.findings);
            shared.findings.lock().unwrap().extend(collected);
        }
    }
}

/// Registers carrying integer arguments at function entry, in ABI order.
pub const ARG_REGISTERS: [&str; 6] = ["rdi", "rsi", "rdx", "rcx", "r8", "r9"];

/// Prepares a function-entry state: symbolic argument registers with
/// seeded random concrete values, a fresh stack whose return address is
/// the sentinel, then runs the explorer from the entry point.
pub fn s3_run(
    env: &RunEnv<'_>,
    register_map: RegisterMap,
    func_addr: u64,
    arg_count: usize,
    seed: u64,
    budget: &ExploreBudget,
    sinks: Option<&SinkSpec>,
) -> (Vec<Finding>, ExplorationStats) {
    let mut state = MachineState::new(register_map, seed);
    state.pc = func_addr;
    setup_stack(&mut state, 0x7fff_0000, 0x10000, crate::emulator::SENTINEL_RETURN);
    let argc = arg_count.min(ARG_REGISTERS.len());
    for (i, reg) in ARG_REGISTERS.iter().take(argc).enumerate() {
        // One symbolic byte per argument, zero-extended to register width,
        // keeps every entry query within the enumeration solver's budget.
        let concrete = state.next_rand_u64() & 0xff;
        let sym = state.fresh_symbol(&format!("arg{i}"), 8, concrete);
        let val = ConcolicValue::symbolic(concrete as u128, 8, BitvecExpr::zero_extend(sym, 64));
        let (off, _) = state
            .registers
            .name_map
            .lookup(reg)
            .expect("ABI register exists in the map");
        state.registers.write(off, &val);
    }
    s2_explore(env, state, budget, sinks)
}

/// Builds a zero-filled stack with a synthetic return address on top.
pub fn setup_stack(state: &mut MachineState, base: u64, size: u64, return_addr: u64) {
    state.memory.mark_initialized(base, size);
    let top = base + size - 8;
    let _ = state.write_reg("rsp", top);
    let _ = state.write_reg("rbp", top);
    state
        .memory
        .write(top, &ConcolicValue::concrete(return_addr as u128, 8));
}

/// Re-runs a recorded witness deterministically: the assignment becomes
/// the concrete seed and exploration is disabled.
pub fn replay_with_witness(
    env: &RunEnv<'_>,
    mut initial: MachineState,
    witness: &BTreeMap<SymbolId, u64>,
    max_steps: u64,
    sinks: Option<&SinkSpec>,
) -> (Vec<Finding>, ExplorationStats) {
    initial.reseed(witness);
    let budget = ExploreBudget {
        max_steps,
        max_forks: 0,
        workers: 1,
        ..ExploreBudget::default()
    };
    s2_explore(env, initial, &budget, sinks)
}

/// Configures fd 0 as a symbolic stdin source seeded with `data`.
pub fn make_stdin_symbolic(state: &mut MachineState, data: Vec<u8>) {
    state.vfs.fds.insert(
        0,
        FdState::Stdin(crate::state::StdinSource {
            data,
            pos: 0,
            symbolic: true,
        }),
    );
}
