//! P-Code op execution over a MachineState: opcode semantics, program
//! counter management, intra-instruction branching, jump tables, syscalls
//! and CALLOTHER pseudo-ops.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::artifacts::{append_log, append_trace, render_input, render_output, SymbolTable, TextSink, TraceEvent, TraceKind};
use crate::detection::{self, Finding, InvariantProfile, MemEvent, PanicXrefSet, Strategy};
use crate::model::{Instruction, Opcode, PcodeOp, ProgramImage, SpaceKind, Varnode};
use crate::solver::Solver;
use crate::state::{FdState, MachineState};
use crate::symbolic::{mask, BinOp, BitvecExpr, ConcolicValue, PathConstraint, UnOp};

/// Recovered switch-table dispatch for one indirect branch site.
#[derive(Debug, Clone)]
pub struct JumpTable {
    pub targets: Vec<u64>,
    pub index_source: String,
    pub index_base: i64,
}

#[derive(Debug, Clone, Default)]
pub struct JumpTableMap {
    pub tables: BTreeMap<u64, JumpTable>,
}

#[derive(Debug, Deserialize)]
struct JumpTableFileEntry {
    switch_addr: String,
    index_source: String,
    #[serde(default)]
    index_base: i64,
    targets: Vec<String>,
}

#[derive(Debug, Deserialize)]
struct JumpTableFile {
    tables: Vec<JumpTableFileEntry>,
}

impl JumpTableMap {
    pub fn from_json(text: &str) -> Result<JumpTableMap, String> {
        let file: JumpTableFile = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let mut map = JumpTableMap::default();
        for entry in file.tables {
            let addr = parse_hex(&entry.switch_addr)?;
            let mut targets = Vec::new();
            for t in &entry.targets {
                targets.push(parse_hex(t)?);
            }
            if targets.is_empty() {
                return Err(format!("table at {addr:#x} has no targets"));
            }
            map.tables.insert(
                addr,
                JumpTable {
                    targets,
                    index_source: entry.index_source,
                    index_base: entry.index_base,
                },
            );
        }
        Ok(map)
    }

    /// Every target must exist in the image.
    pub fn validate(&self, img: &ProgramImage) -> Result<(), String> {
        for (addr, table) in &self.tables {
            for t in &table.targets {
                if !img.contains(*t) {
                    return Err(format!(
                        "jump table at {addr:#x} targets {t:#x}, which is not in the image"
                    ));
                }
            }
        }
        Ok(())
    }
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let hex = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| format!("expected 0x-hex, got {s:?}"))?;
    u64::from_str_radix(hex, 16).map_err(|e| format!("bad hex {s:?}: {e}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum FaultKind {
    DivisionByZero,
    UnmappedBranchTarget,
    UnsupportedOp,
    UnknownCallother,
    UnknownSyscall,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct ExecFault {
    pub kind: FaultKind,
    pub address: u64,
    pub op_index: u32,
}

#[derive(Debug, Clone)]
pub enum StepOutcome {
    Continue(u64),
    Exited(i64),
    Faulted(ExecFault),
    InvariantHit(Finding),
}

/// Flow result of one executed op.
enum OpFlow {
    Next,
    /// Signed op-index delta within the current instruction.
    Intra(i64),
    /// Absolute machine-address transfer.
    Transfer(u64),
    Done(StepOutcome),
}

#[derive(Debug, Clone)]
pub struct EmuConfig {
    pub strict: bool,
    pub halt_on_finding: bool,
    /// Queue alternate states at symbolic branches.
    pub explore: bool,
    pub max_fork_depth: u32,
    /// Transfers to this address terminate cleanly (synthetic return).
    pub sentinel_return: u64,
    /// Unmapped call targets resolved by symbol name -> forced return value.
    pub stubs: BTreeMap<String, u64>,
    pub strategy: Strategy,
}

pub const SENTINEL_RETURN: u64 = 0xdead_beef_dead_beef;

impl Default for EmuConfig {
    fn default() -> EmuConfig {
        EmuConfig {
            strict: false,
            halt_on_finding: true,
            explore: false,
            max_fork_depth: 32,
            sentinel_return: SENTINEL_RETURN,
            stubs: BTreeMap::new(),
            strategy: Strategy::S1,
        }
    }
}

pub struct Emulator<'a> {
    pub img: &'a ProgramImage,
    pub xrefs: &'a PanicXrefSet,
    pub tables: &'a JumpTableMap,
    pub symbols: &'a SymbolTable,
    pub profile: &'a InvariantProfile,
    pub solver: Option<&'a Solver>,
    pub cfg: EmuConfig,
    pub log: Option<TextSink>,
    pub trace: Option<TextSink>,
    pub step_count: u64,
    /// Alternate states queued at symbolic branches, awaiting a
    /// feasibility check by the explorer.
    pub pending_forks: Vec<MachineState>,
    /// Findings collected in continue-after-finding mode.
    pub findings: Vec<Finding>,
}

impl<'a> Emulator<'a> {
    pub fn new(
        img: &'a ProgramImage,
        xrefs: &'a PanicXrefSet,
        tables: &'a JumpTableMap,
        symbols: &'a SymbolTable,
        profile: &'a InvariantProfile,
        cfg: EmuConfig,
    ) -> Emulator<'a> {
        Emulator {
            img,
            xrefs,
            tables,
            symbols,
            profile,
            solver: None,
            cfg,
            log: None,
            trace: None,
            step_count: 0,
            pending_forks: Vec::new(),
            findings: Vec::new(),
        }
    }

    fn emit_trace(&mut self, kind: TraceKind) {
        if let Some(sink) = &mut self.trace {
            let event = TraceEvent {
                step: self.step_count,
                kind,
            };
            let _ = append_trace(sink, &event, self.symbols);
        }
    }

    fn report(&mut self, state: &mut MachineState, finding: Finding) -> Option<StepOutcome> {
        let key = (finding.address, finding.kind.clone());
        if state.reported.contains(&key) {
            return None;
        }
        state.reported.insert(key);
        self.emit_trace(TraceKind::FindingEmitted {
            kind: finding.kind.clone(),
            addr: finding.address,
        });
        if self.cfg.halt_on_finding {
            Some(StepOutcome::InvariantHit(finding))
        } else {
            self.findings.push(finding);
            None
        }
    }

    /// Executes one machine instruction. Returns the outcome; `Continue`
    /// carries the next pc (already stored into the state).
    pub fn step(&mut self, state: &mut MachineState) -> StepOutcome {
        let pc = state.pc;
        // Detection hooks run before the instruction executes.
        if self.profile.panic_xref {
            if let Some(f) = detection::s1_check(state, self.xrefs, self.cfg.strategy, self.step_count) {
                if let Some(out) = self.report(state, f) {
                    return out;
                }
            }
        }
        for f in detection::check_hooks(state, self.profile, self.cfg.strategy, self.step_count) {
            if let Some(out) = self.report(state, f) {
                return out;
            }
        }
        let instr = match self.img.get(pc) {
            Some(i) => i.clone(),
            None => {
                return StepOutcome::Faulted(ExecFault {
                    kind: FaultKind::UnmappedBranchTarget,
                    address: pc,
                    op_index: 0,
                })
            }
        };
        state.unique.clear();
        debug_assert!(state.unique.is_empty());
        let mut op_index: i64 = 0;
        let outcome = loop {
            if op_index < 0 {
                break StepOutcome::Faulted(ExecFault {
                    kind: FaultKind::UnmappedBranchTarget,
                    address: pc,
                    op_index: 0,
                });
            }
            if op_index as usize >= instr.ops.len() {
                // Fall through to the next instruction.
                break self.fall_through(state, &instr);
            }
            let flow = self.execute_op(state, &instr, op_index as usize);
            match flow {
                Ok(OpFlow::Next) => op_index += 1,
                Ok(OpFlow::Intra(delta)) => op_index += delta,
                Ok(OpFlow::Transfer(target)) => break self.resolve_transfer(state, target),
                Ok(OpFlow::Done(out)) => break out,
                Err(fault) => break StepOutcome::Faulted(fault),
            }
        };
        self.step_count += 1;
        if let StepOutcome::Continue(next) = &outcome {
            state.pc = *next;
        }
        outcome
    }

    fn fall_through(&mut self, state: &mut MachineState, instr: &Instruction) -> StepOutcome {
        if instr.length > 0 {
            self.resolve_transfer(state, instr.address + instr.length as u64)
        } else {
            match self.img.next_instruction_address(instr.address) {
                Ok(Some(next)) => StepOutcome::Continue(next),
                Ok(None) => StepOutcome::Exited(state.exit_code.unwrap_or(0)),
                Err(_) => StepOutcome::Faulted(ExecFault {
                    kind: FaultKind::UnmappedBranchTarget,
                    address: instr.address,
                    op_index: 0,
                }),
            }
        }
    }

    /// Maps a transfer target to an outcome: in-image addresses continue,
    /// the sentinel exits, stubbed external symbols pop the return address
    /// and force a return value, anything else faults.
    fn resolve_transfer(&mut self, state: &mut MachineState, target: u64) -> StepOutcome {
        let mut target = target;
        for _ in 0..64 {
            if self.img.contains(target) {
                return StepOutcome::Continue(target);
            }
            if target == self.cfg.sentinel_return {
                return StepOutcome::Exited(state.exit_code.unwrap_or(0));
            }
            let stub_value = self
                .symbols
                .lookup(target)
                .and_then(|name| self.cfg.stubs.get(name).copied());
            match stub_value {
                Some(value) => {
                    let sp = state.read_reg("rsp").map(|v| v.as_u64()).unwrap_or(0);
                    let ret = state.memory.read(sp, 8).as_u64();
                    let _ = state.write_reg("rsp", sp.wrapping_add(8));
                    let _ = state.write_reg("rax", value);
                    target = ret;
                }
                None => {
                    return StepOutcome::Faulted(ExecFault {
                        kind: FaultKind::UnmappedBranchTarget,
                        address: target,
                        op_index: 0,
                    })
                }
            }
        }
        StepOutcome::Faulted(ExecFault {
            kind: FaultKind::UnmappedBranchTarget,
            address: target,
            op_index: 0,
        })
    }

    fn fault(&self, kind: FaultKind, instr: &Instruction, op_index: usize) -> ExecFault {
        ExecFault {
            kind,
            address: instr.address,
            op_index: op_index as u32,
        }
    }

    fn log_op(
        &mut self,
        instr: &Instruction,
        op_index: usize,
        op: &PcodeOp,
        inputs: &[ConcolicValue],
        output: Option<&ConcolicValue>,
    ) {
        if let Some(sink) = &mut self.log {
            let rendered: Vec<String> = op
                .inputs
                .iter()
                .zip(inputs.iter())
                .map(|(vn, val)| render_input(vn, val))
                .collect();
            let out = op
                .output
                .as_ref()
                .zip(output)
                .map(|(vn, val)| render_output(vn, val));
            let _ = append_log(
                sink,
                self.step_count,
                instr.address,
                op_index as u32,
                op.opcode.name(),
                &rendered,
                out.as_deref(),
            );
        }
    }

    fn execute_op(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = &instr.ops[op_index];
        match op.opcode {
            Opcode::BRANCH | Opcode::CALL => self.do_branch(state, instr, op_index),
            Opcode::CBRANCH => self.do_cbranch(state, instr, op_index),
            Opcode::BRANCHIND | Opcode::CALLIND | Opcode::RETURN => {
                self.do_indirect(state, instr, op_index)
            }
            Opcode::CALLOTHER => self.do_callother(state, instr, op_index),
            Opcode::LOAD => self.do_load(state, instr, op_index),
            Opcode::STORE => self.do_store(state, instr, op_index),
            _ => self.do_data_op(state, instr, op_index),
        }
    }

    fn do_branch(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = &instr.ops[op_index];
        let dest = op.inputs[0];
        self.log_op(instr, op_index, op, &[state.read_varnode(&dest)], None);
        match dest.space {
            SpaceKind::Constant => Ok(OpFlow::Intra(dest.offset as i64)),
            SpaceKind::Ram => {
                if op.opcode == Opcode::CALL {
                    let args = call_args(state);
                    self.emit_trace(TraceKind::Call {
                        addr: dest.offset,
                        args,
                    });
                }
                Ok(OpFlow::Transfer(dest.offset))
            }
            _ => Err(self.fault(FaultKind::UnsupportedOp, instr, op_index)),
        }
    }

    fn do_cbranch(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = &instr.ops[op_index];
        let dest = op.inputs[0];
        let cond = state.read_varnode(&op.inputs[1]);
        self.log_op(instr, op_index, op, &[state.read_varnode(&dest), cond.clone()], None);
        let taken = cond.as_u128() != 0;
        if let Some(cond_expr) = &cond.sym {
            let constraint = PathConstraint {
                expr: BitvecExpr::binary(
                    BinOp::NotEqual,
                    cond_expr.clone(),
                    BitvecExpr::literal(0, cond_expr.width()),
                ),
                origin: (instr.address, op_index as u32),
                taken,
            };
            state.constraints.push(constraint);
            // Queue the flipped branch for exploration, once per
            // (address, op index) on this path prefix. Alternates for
            // intra-instruction destinations are not explored.
            if self.cfg.explore
                && dest.space == SpaceKind::Ram
                && !state.negated_branches.contains(&(instr.address, op_index as u32))
            {
                state
                    .negated_branches
                    .insert((instr.address, op_index as u32));
                if let Ok(mut alt) = state.fork(self.cfg.max_fork_depth) {
                    let last = alt.constraints.last_mut().expect("just pushed");
                    last.taken = !taken;
                    let alt_pc = if taken {
                        self.fall_through_address(instr)
                    } else {
                        Some(dest.offset)
                    };
                    if let Some(alt_pc) = alt_pc {
                        alt.pc = alt_pc;
                        self.pending_forks.push(alt);
                    }
                }
            }
        }
        if taken {
            match dest.space {
                SpaceKind::Constant => Ok(OpFlow::Intra(dest.offset as i64)),
                SpaceKind::Ram => Ok(OpFlow::Transfer(dest.offset)),
                _ => Err(self.fault(FaultKind::UnsupportedOp, instr, op_index)),
            }
        } else {
            Ok(OpFlow::Next)
        }
    }

    fn fall_through_address(&self, instr: &Instruction) -> Option<u64> {
        if instr.length > 0 {
            Some(instr.address + instr.length as u64)
        } else {
            self.img.next_instruction_address(instr.address).ok().flatten()
        }
    }

    fn do_indirect(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = &instr.ops[op_index];
        let dest = state.read_varnode(&op.inputs[0]);
        self.log_op(instr, op_index, op, &[dest.clone()], None);
        if op.opcode == Opcode::RETURN {
            self.emit_trace(TraceKind::Return { addr: dest.as_u64() });
            return Ok(OpFlow::Transfer(dest.as_u64()));
        }
        let resolved = resolve_branchind(
            state,
            instr.address,
            op_index as u32,
            &dest,
            self.tables,
            self.cfg.explore,
        );
        let entries = match resolved {
            Ok(entries) => entries,
            Err(index) => {
                let f = detection::table_overflow_finding(
                    instr.address,
                    index,
                    self.cfg.strategy,
                    self.step_count,
                );
                return match self.report(state, f) {
                    Some(out) => Ok(OpFlow::Done(out)),
                    None => Ok(OpFlow::Next),
                };
            }
        };
        let (concrete_target, _) = entries[0];
        // Queue alternates for the other in-range labels.
        for (target, constraint) in entries.iter().skip(1) {
            if *target == concrete_target {
                continue;
            }
            if let Ok(mut alt) = state.fork(self.cfg.max_fork_depth) {
                if let Some(c) = constraint {
                    alt.constraints.push(c.clone());
                }
                alt.pc = *target;
                self.pending_forks.push(alt);
            }
        }
        if op.opcode == Opcode::CALLIND {
            let args = call_args(state);
            self.emit_trace(TraceKind::Call {
                addr: concrete_target,
                args,
            });
        }
        Ok(OpFlow::Transfer(concrete_target))
    }

    fn do_callother(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = &instr.ops[op_index].clone();
        let inputs: Vec<ConcolicValue> = op.inputs.iter().map(|vn| state.read_varnode(vn)).collect();
        self.log_op(instr, op_index, op, &inputs, None);
        let name = self.img.callother_name(instr.address, op_index as u32);
        match name {
            Some("syscall") => self.do_syscall(state, instr, op_index),
            _ => {
                if self.cfg.strict {
                    Err(self.fault(FaultKind::UnknownCallother, instr, op_index))
                } else {
                    if let Some(out) = &op.output {
                        let zero = ConcolicValue::concrete(0, out.size);
                        state.write_varnode(out, &zero).map_err(|_| {
                            self.fault(FaultKind::UnsupportedOp, instr, op_index)
                        })?;
                    }
                    Ok(OpFlow::Next)
                }
            }
        }
    }

    /// Syscall dispatch on the rax register. The supported subset is what
    /// the fixture corpus needs: read, write, mmap, brk, exit, exit_group.
    fn do_syscall(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let number = reg_u64(state, "rax");
        let args = [
            reg_u64(state, "rdi"),
            reg_u64(state, "rsi"),
            reg_u64(state, "rdx"),
        ];
        self.emit_trace(TraceKind::SyscallEntry {
            number,
            args: args.to_vec(),
        });
        match number {
            // read(fd, buf, count)
            0 => {
                let (fd, buf, count) = (args[0] as i64, args[1], args[2].min(4096));
                let ret = self.sys_read(state, fd, buf, count);
                let _ = state.write_reg("rax", ret as u64);
                Ok(OpFlow::Next)
            }
            // write(fd, buf, count)
            1 => {
                let (fd, buf, count) = (args[0] as i64, args[1], args[2].min(65536));
                let bytes = state.memory.read_concrete_bytes(buf, count);
                let ret = match state.vfs.fds.get_mut(&fd) {
                    Some(FdState::Stdout(sink)) | Some(FdState::Stderr(sink)) => {
                        sink.extend_from_slice(&bytes);
                        count as i64
                    }
                    _ => -9, // EBADF
                };
                let _ = state.write_reg("rax", ret as u64);
                Ok(OpFlow::Next)
            }
            // mmap(addr, length, ...): anonymous only, bump-allocated
            9 => {
                let length = args[1].max(1);
                let base = state.heap_next;
                let rounded = (length + 4095) & !4095;
                state.heap_next += rounded;
                state.memory.mark_initialized(base, length.min(1 << 20));
                let _ = state.write_reg("rax", base);
                Ok(OpFlow::Next)
            }
            // brk(addr)
            12 => {
                let addr = args[0];
                if addr != 0 {
                    state.heap_next = addr;
                }
                let _ = state.write_reg("rax", state.heap_next);
                Ok(OpFlow::Next)
            }
            // exit / exit_group
            60 | 231 => {
                let code = args[0] as i64;
                state.exit_code = Some(code);
                Ok(OpFlow::Done(StepOutcome::Exited(code)))
            }
            _ => {
                if self.cfg.strict {
                    Err(self.fault(FaultKind::UnknownSyscall, instr, op_index))
                } else {
                    let _ = state.write_reg("rax", 0);
                    Ok(OpFlow::Next)
                }
            }
        }
    }

    fn sys_read(&mut self, state: &mut MachineState, fd: i64, buf: u64, count: u64) -> i64 {
        let source = match state.vfs.fds.get(&fd) {
            Some(FdState::Stdin(s)) => s.clone(),
            _ => return -9,
        };
        let mut pos = source.pos;
        let mut written = 0u64;
        for i in 0..count {
            let concrete = if pos < source.data.len() {
                let b = source.data[pos];
                pos += 1;
                Some(b)
            } else {
                None
            };
            if source.symbolic {
                let seed = concrete.unwrap_or_else(|| state.next_rand_u64() as u8);
                let name = format!("stdin{}", state.seed_values.len());
                let sym = state.fresh_symbol(&name, 8, seed as u64);
                let val = ConcolicValue::symbolic(seed as u128, 1, sym);
                state.memory.write(buf + i, &val);
                written += 1;
            } else {
                match concrete {
                    Some(b) => {
                        state.memory.write_bytes(buf + i, &[b]);
                        written += 1;
                    }
                    None => break, // EOF
                }
            }
        }
        if let Some(FdState::Stdin(s)) = state.vfs.fds.get_mut(&fd) {
            s.pos = pos;
        }
        written as i64
    }

    fn do_load(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = instr.ops[op_index].clone();
        let out = op.output.expect("LOAD has an output");
        let addr = state.read_varnode(&op.inputs[1]);
        // input0 (space id constant) is accepted and ignored.
        if let Some(f) = detection::c_invariant_check(
            state,
            &MemEvent::Load {
                addr: addr.clone(),
                size: out.size,
            },
            self.profile,
            self.solver,
            self.step_count,
        ) {
            if let Some(outcome) = self.report(state, f) {
                return Ok(OpFlow::Done(outcome));
            }
        }
        let value = state.memory.read(addr.as_u64(), out.size);
        self.log_op(
            instr,
            op_index,
            &op,
            &[state.read_varnode(&op.inputs[0]), addr],
            Some(&value),
        );
        state
            .write_varnode(&out, &value)
            .map_err(|_| self.fault(FaultKind::UnsupportedOp, instr, op_index))?;
        Ok(OpFlow::Next)
    }

    fn do_store(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = instr.ops[op_index].clone();
        let addr = state.read_varnode(&op.inputs[1]);
        let value = state.read_varnode(&op.inputs[2]);
        if let Some(f) = detection::c_invariant_check(
            state,
            &MemEvent::Store {
                addr: addr.clone(),
                size: value.size(),
            },
            self.profile,
            self.solver,
            self.step_count,
        ) {
            if let Some(outcome) = self.report(state, f) {
                return Ok(OpFlow::Done(outcome));
            }
        }
        self.log_op(
            instr,
            op_index,
            &op,
            &[state.read_varnode(&op.inputs[0]), addr.clone(), value.clone()],
            None,
        );
        state.memory.write(addr.as_u64(), &value);
        Ok(OpFlow::Next)
    }

    /// All pure data ops: COPY, PIECE/SUBPIECE, POPCOUNT, extensions and
    /// the integer/bool arithmetic table.
    fn do_data_op(
        &mut self,
        state: &mut MachineState,
        instr: &Instruction,
        op_index: usize,
    ) -> Result<OpFlow, ExecFault> {
        let op = instr.ops[op_index].clone();
        let out = op.output.expect("data op has an output");
        let inputs: Vec<ConcolicValue> = op.inputs.iter().map(|vn| state.read_varnode(vn)).collect();
        let value = compute_data_op(op.opcode, &out, &op.inputs, &inputs)
            .map_err(|kind| self.fault(kind, instr, op_index))?;
        self.log_op(instr, op_index, &op, &inputs, Some(&value));
        state
            .write_varnode(&out, &value)
            .map_err(|_| self.fault(FaultKind::UnsupportedOp, instr, op_index))?;
        Ok(OpFlow::Next)
    }
}

fn reg_u64(state: &MachineState, name: &str) -> u64 {
    state.read_reg(name).map(|v| v.as_u64()).unwrap_or(0)
}

/// Argument-register values at call time (System V AMD64 integer order).
pub fn call_args(state: &MachineState) -> Vec<u64> {
    ["rdi", "rsi", "rdx", "rcx", "r8", "r9"]
        .iter()
        .map(|r| reg_u64(state, r))
        .collect()
}

/// Resolves an indirect branch. With a table entry the concrete index
/// selects the target; when the index is symbolic and exploration is on,
/// one (target, index==k) pair per in-range label follows for forking.
/// Err carries the out-of-range concrete index.
pub fn resolve_branchind(
    state: &MachineState,
    instr_addr: u64,
    op_index: u32,
    dest: &ConcolicValue,
    tables: &JumpTableMap,
    explore: bool,
) -> Result<Vec<(u64, Option<PathConstraint>)>, u64> {
    let table = match tables.tables.get(&instr_addr) {
        Some(t) => t,
        None => return Ok(vec![(dest.as_u64(), None)]),
    };
    let index_val = state
        .read_reg(&table.index_source)
        .unwrap_or(ConcolicValue::concrete(0, 8));
    let index = index_val.as_u64().wrapping_sub(table.index_base as u64);
    if index >= table.targets.len() as u64 {
        return Err(index);
    }
    let mut out = vec![(table.targets[index as usize], None)];
    if explore && index_val.is_symbolic() {
        let width = index_val.size() * 8;
        let idx_expr = BitvecExpr::binary(
            BinOp::Sub,
            index_val.expr(),
            BitvecExpr::literal(table.index_base as u64 as u128, width),
        );
        for (k, target) in table.targets.iter().enumerate() {
            let constraint = PathConstraint {
                expr: BitvecExpr::binary(
                    BinOp::Equal,
                    idx_expr.clone(),
                    BitvecExpr::literal(k as u128, width),
                ),
                origin: (instr_addr, op_index),
                taken: true,
            };
            out.push((*target, Some(constraint)));
        }
    }
    Ok(out)
}

/// Evaluates a pure data op on concrete operand values. This is the
/// emulator's own opcode table, exposed so tests can cross-check it
/// against the separately written expression evaluator.
pub fn concrete_data_op(
    opcode: Opcode,
    out_size: u32,
    inputs: &[(u128, u32)],
) -> Result<u128, FaultKind> {
    let out = Varnode::unique(0, out_size);
    let input_vns: Vec<Varnode> = inputs
        .iter()
        .map(|(_, s)| Varnode::unique(0x100, *s))
        .collect();
    let values: Vec<ConcolicValue> = inputs
        .iter()
        .map(|(v, s)| ConcolicValue::concrete(*v, *s))
        .collect();
    compute_data_op(opcode, &out, &input_vns, &values).map(|v| v.as_u128())
}

/// Data ops at size 16 are limited to copy/extract/concat and bitwise
/// logic; everything else keeps the bitvector layer at 64 bits or below.
fn wide_ok(opcode: Opcode) -> bool {
    matches!(
        opcode,
        Opcode::COPY
            | Opcode::PIECE
            | Opcode::SUBPIECE
            | Opcode::INT_XOR
            | Opcode::INT_AND
            | Opcode::INT_OR
            | Opcode::INT_NEGATE
    )
}

fn adapt_width(expr: Arc<BitvecExpr>, width: u32) -> Arc<BitvecExpr> {
    use std::cmp::Ordering::*;
    match expr.width().cmp(&width) {
        Equal => expr,
        Less => BitvecExpr::zero_extend(expr, width),
        Greater => Arc::new(BitvecExpr::Extract {
            child: expr,
            low_byte: 0,
            width,
        }),
    }
}

fn compute_data_op(
    opcode: Opcode,
    out: &Varnode,
    input_vns: &[Varnode],
    inputs: &[ConcolicValue],
) -> Result<ConcolicValue, FaultKind> {
    let out_w = out.size * 8;
    let wide = out.size == 16 || inputs.iter().any(|v| v.size() == 16);
    if wide && !wide_ok(opcode) {
        return Err(FaultKind::UnsupportedOp);
    }
    let symbolic = inputs.iter().any(|v| v.is_symbolic());

    // Concrete result. This table is intentionally written on its own; the
    // independent reference lives in the symbolic evaluator and the oracle
    // tests sweep both exhaustively.
    let a = inputs[0].as_u128();
    let aw = inputs[0].size() * 8;
    let b = inputs.get(1).map(|v| v.as_u128()).unwrap_or(0);
    let bw = inputs.get(1).map(|v| v.size() * 8).unwrap_or(0);
    let m = mask(aw);
    let om = mask(out_w);
    let sgn = |v: u128, w: u32| (v >> (w - 1)) & 1 == 1;
    let signed = |v: u128, w: u32| -> i128 {
        if w >= 128 {
            v as i128
        } else if sgn(v, w) {
            v as i128 - (1i128 << w)
        } else {
            v as i128
        }
    };
    let concrete: u128 = match opcode {
        Opcode::COPY => a & om,
        Opcode::INT_ADD => a.wrapping_add(b) & m,
        Opcode::INT_SUB => a.wrapping_sub(b) & m,
        Opcode::INT_MULT => a.wrapping_mul(b) & m,
        Opcode::INT_DIV => {
            if b == 0 {
                return Err(FaultKind::DivisionByZero);
            }
            a / b
        }
        Opcode::INT_REM => {
            if b == 0 {
                return Err(FaultKind::DivisionByZero);
            }
            a % b
        }
        Opcode::INT_SDIV => {
            if b == 0 {
                return Err(FaultKind::DivisionByZero);
            }
            signed(a, aw).wrapping_div(signed(b, aw)) as u128 & m
        }
        Opcode::INT_SREM => {
            if b == 0 {
                return Err(FaultKind::DivisionByZero);
            }
            signed(a, aw).wrapping_rem(signed(b, aw)) as u128 & m
        }
        Opcode::INT_XOR => a ^ b,
        Opcode::INT_AND => a & b,
        Opcode::INT_OR => a | b,
        Opcode::INT_LEFT => {
            if b >= aw as u128 {
                0
            } else {
                (a << b) & m
            }
        }
        Opcode::INT_RIGHT => {
            if b >= aw as u128 {
                0
            } else {
                a >> b
            }
        }
        Opcode::INT_SRIGHT => {
            if b >= aw as u128 {
                if sgn(a, aw) {
                    m
                } else {
                    0
                }
            } else {
                (signed(a, aw) >> b) as u128 & m
            }
        }
        Opcode::INT_EQUAL => u128::from(a == b),
        Opcode::INT_NOTEQUAL => u128::from(a != b),
        Opcode::INT_LESS => u128::from(a < b),
        Opcode::INT_SLESS => u128::from(signed(a, aw) < signed(b, aw)),
        Opcode::INT_LESSEQUAL => u128::from(a <= b),
        Opcode::INT_SLESSEQUAL => u128::from(signed(a, aw) <= signed(b, aw)),
        Opcode::INT_CARRY => {
            if aw >= 128 {
                u128::from(a.checked_add(b).is_none())
            } else {
                u128::from((a + b) >> aw != 0)
            }
        }
        Opcode::INT_SCARRY => {
            let r = a.wrapping_add(b) & m;
            u128::from(sgn(a, aw) == sgn(b, aw) && sgn(r, aw) != sgn(a, aw))
        }
        Opcode::INT_SBORROW => {
            let r = a.wrapping_sub(b) & m;
            u128::from(sgn(a, aw) != sgn(b, aw) && sgn(r, aw) != sgn(a, aw))
        }
        Opcode::INT_2COMP => a.wrapping_neg() & m,
        Opcode::INT_NEGATE => !a & m,
        Opcode::INT_ZEXT => a & om,
        Opcode::INT_SEXT => signed(a, aw) as u128 & om,
        Opcode::BOOL_NEGATE => u128::from(a == 0),
        Opcode::BOOL_XOR => u128::from((a != 0) ^ (b != 0)),
        Opcode::BOOL_AND => u128::from(a != 0 && b != 0),
        Opcode::BOOL_OR => u128::from(a != 0 || b != 0),
        Opcode::POPCOUNT => a.count_ones() as u128 & om,
        Opcode::PIECE => ((a << bw) | b) & om,
        Opcode::SUBPIECE => {
            let shift = (b as u32).saturating_mul(8);
            if shift >= 128 {
                0
            } else {
                (a >> shift) & om
            }
        }
        _ => return Err(FaultKind::UnsupportedOp),
    };

    if !symbolic {
        return Ok(ConcolicValue::concrete(concrete, out.size));
    }

    // Symbolic propagation mirrors the concrete table node-for-node.
    let ae = inputs[0].expr();
    let be = || inputs[1].expr();
    let bin = |op: BinOp| BitvecExpr::binary(op, ae.clone(), be());
    let expr: Arc<BitvecExpr> = match opcode {
        Opcode::COPY => adapt_width(ae.clone(), out_w),
        Opcode::INT_ADD => bin(BinOp::Add),
        Opcode::INT_SUB => bin(BinOp::Sub),
        Opcode::INT_MULT => bin(BinOp::Mult),
        Opcode::INT_DIV => bin(BinOp::Div),
        Opcode::INT_REM => bin(BinOp::Rem),
        Opcode::INT_SDIV => bin(BinOp::SDiv),
        Opcode::INT_SREM => bin(BinOp::SRem),
        Opcode::INT_XOR => bin(BinOp::Xor),
        Opcode::INT_AND => bin(BinOp::And),
        Opcode::INT_OR => bin(BinOp::Or),
        Opcode::INT_LEFT => bin(BinOp::Shl),
        Opcode::INT_RIGHT => bin(BinOp::Lshr),
        Opcode::INT_SRIGHT => bin(BinOp::Ashr),
        Opcode::INT_EQUAL => bin(BinOp::Equal),
        Opcode::INT_NOTEQUAL => bin(BinOp::NotEqual),
        Opcode::INT_LESS => bin(BinOp::ULess),
        Opcode::INT_SLESS => bin(BinOp::SLess),
        Opcode::INT_LESSEQUAL => bin(BinOp::ULessEq),
        Opcode::INT_SLESSEQUAL => bin(BinOp::SLessEq),
        Opcode::INT_CARRY => bin(BinOp::Carry),
        Opcode::INT_SCARRY => bin(BinOp::SCarry),
        Opcode::INT_SBORROW => bin(BinOp::SBorrow),
        Opcode::INT_2COMP => BitvecExpr::unary(UnOp::Neg, ae.clone()),
        Opcode::INT_NEGATE => BitvecExpr::unary(UnOp::Not, ae.clone()),
        Opcode::INT_ZEXT => BitvecExpr::zero_extend(ae.clone(), out_w),
        Opcode::INT_SEXT => BitvecExpr::sign_extend(ae.clone(), out_w),
        Opcode::BOOL_NEGATE => BitvecExpr::unary(UnOp::BoolNegate, ae.clone()),
        Opcode::BOOL_XOR => bin(BinOp::BoolXor),
        Opcode::BOOL_AND => bin(BinOp::BoolAnd),
        Opcode::BOOL_OR => bin(BinOp::BoolOr),
        Opcode::POPCOUNT => BitvecExpr::unary(UnOp::Popcount, ae.clone()),
        Opcode::PIECE => Arc::new(BitvecExpr::Concat {
            high: ae.clone(),
            low: be(),
        }),
        Opcode::SUBPIECE => {
            let shift = b as u32;
            let child_bytes = inputs[0].size();
            if shift >= child_bytes {
                BitvecExpr::literal(0, out_w)
            } else {
                let avail = (child_bytes - shift) * 8;
                adapt_width(
                    Arc::new(BitvecExpr::Extract {
                        child: ae.clone(),
                        low_byte: shift,
                        width: avail.min(out_w),
                    }),
                    out_w,
                )
            }
        }
        _ => return Err(FaultKind::UnsupportedOp),
    };
    let expr = adapt_width(expr, out_w);
    // Drop expressions that folded to the concrete literal anyway.
    let _ = input_vns;
    Ok(ConcolicValue::symbolic(concrete, out.size, expr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Instruction, Opcode, PcodeOp, Varnode};
    use crate::state::RegisterMap;

    fn op(
        opcode: Opcode,
        output: Option<Varnode>,
        inputs: Vec<Varnode>,
    ) -> PcodeOp {
        PcodeOp::new(opcode, output, inputs).unwrap()
    }

    fn run_data_op(opcode: Opcode, out_size: u32, ins: &[(u128, u32)]) -> Result<u128, FaultKind> {
        let out = Varnode::unique(0, out_size);
        let input_vns: Vec<Varnode> = ins
            .iter()
            .map(|(v, s)| Varnode::constant(*v as u64, *s))
            .collect();
        let inputs: Vec<ConcolicValue> = ins
            .iter()
            .map(|(v, s)| ConcolicValue::concrete(*v, *s))
            .collect();
        compute_data_op(opcode, &out, &input_vns, &inputs).map(|v| v.as_u128())
    }

    #[test]
    fn int_add_example() {
        assert_eq!(run_data_op(Opcode::INT_ADD, 8, &[(2, 8), (3, 8)]).unwrap(), 5);
    }

    #[test]
    fn scarry_example() {
        assert_eq!(run_data_op(Opcode::INT_SCARRY, 1, &[(0x7F, 1), (0x01, 1)]).unwrap(), 1);
    }

    #[test]
    fn sright_sign_fill_when_shift_exceeds_width() {
        assert_eq!(
            run_data_op(Opcode::INT_SRIGHT, 1, &[(0x80, 1), (9, 1)]).unwrap(),
            0xFF
        );
    }

    #[test]
    fn division_by_zero_faults() {
        assert_eq!(
            run_data_op(Opcode::INT_DIV, 8, &[(5, 8), (0, 8)]),
            Err(FaultKind::DivisionByZero)
        );
    }

    #[test]
    fn wide_arithmetic_unsupported() {
        assert_eq!(
            run_data_op(Opcode::INT_ADD, 16, &[(1, 16), (2, 16)]),
            Err(FaultKind::UnsupportedOp)
        );
        assert_eq!(run_data_op(Opcode::INT_AND, 16, &[(3, 16), (1, 16)]).unwrap(), 1);
    }

    fn make_env() -> (PanicXrefSet, JumpTableMap, SymbolTable, InvariantProfile) {
        (
            PanicXrefSet::default(),
            JumpTableMap::default(),
            SymbolTable::default(),
            InvariantProfile::default(),
        )
    }

    fn single_instruction_image(ops: Vec<PcodeOp>) -> ProgramImage {
        let mut img = ProgramImage::default();
        img.instructions
            .insert(0x10, Instruction::new(0x10, ops, 0).unwrap());
        img
    }

    #[test]
    fn cbranch_const_dest_jumps_intra() {
        // CBRANCH (const,0x2,8), cond=1 at op 0 of a 4-op instruction
        // lands on op 2, skipping the COPY at op 1.
        let rax = Varnode::register(0, 8);
        let ops = vec![
            op(Opcode::CBRANCH, None, vec![Varnode::constant(2, 8), Varnode::constant(1, 1)]),
            op(Opcode::COPY, Some(rax), vec![Varnode::constant(0x11, 8)]),
            op(Opcode::COPY, Some(rax), vec![Varnode::constant(0x22, 8)]),
            op(Opcode::BRANCH, None, vec![Varnode::ram(0x10, 8)]),
        ];
        let img = single_instruction_image(ops);
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        let out = emu.step(&mut st);
        assert!(matches!(out, StepOutcome::Continue(0x10)));
        assert_eq!(st.read_reg("rax").unwrap().as_u64(), 0x22);
    }

    #[test]
    fn step_fall_through_by_listing_order() {
        let rax = Varnode::register(0, 8);
        let mut img = ProgramImage::default();
        for addr in [0x10u64, 0x13] {
            img.instructions.insert(
                addr,
                Instruction::new(
                    addr,
                    vec![op(Opcode::COPY, Some(rax), vec![Varnode::constant(1, 8)])],
                    0,
                )
                .unwrap(),
            );
        }
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        assert!(matches!(emu.step(&mut st), StepOutcome::Continue(0x13)));
        assert_eq!(st.pc, 0x13);
    }

    #[test]
    fn branch_to_ram_address() {
        let ops = vec![op(Opcode::BRANCH, None, vec![Varnode::ram(0x201010, 8)])];
        let mut img = single_instruction_image(ops);
        let rax = Varnode::register(0, 8);
        img.instructions.insert(
            0x201010,
            Instruction::new(
                0x201010,
                vec![op(Opcode::COPY, Some(rax), vec![Varnode::constant(1, 8)])],
                0,
            )
            .unwrap(),
        );
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        assert!(matches!(emu.step(&mut st), StepOutcome::Continue(0x201010)));
    }

    #[test]
    fn unmapped_branch_target_faults() {
        let ops = vec![op(Opcode::BRANCH, None, vec![Varnode::ram(0x999999, 8)])];
        let img = single_instruction_image(ops);
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        match emu.step(&mut st) {
            StepOutcome::Faulted(f) => assert_eq!(f.kind, FaultKind::UnmappedBranchTarget),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn table_fixture() -> JumpTableMap {
        let mut tables = JumpTableMap::default();
        tables.tables.insert(
            0x100,
            JumpTable {
                targets: vec![0xA, 0xB, 0xC],
                index_source: "rax".into(),
                index_base: 0,
            },
        );
        tables
    }

    #[test]
    fn resolve_branchind_concrete_index() {
        let tables = table_fixture();
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.write_reg("rax", 1).unwrap();
        let dest = ConcolicValue::concrete(0xB, 8);
        let out = resolve_branchind(&st, 0x100, 0, &dest, &tables, true).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 0xB);
        assert!(out[0].1.is_none());
    }

    #[test]
    fn resolve_branchind_symbolic_index_enumerates_labels() {
        let tables = table_fixture();
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        let sym = st.fresh_symbol("idx", 64, 1);
        st.registers
            .write(0, &ConcolicValue::symbolic(1, 8, sym));
        let dest = ConcolicValue::concrete(0xB, 8);
        let out = resolve_branchind(&st, 0x100, 0, &dest, &tables, true).unwrap();
        assert_eq!(out.len(), 4);
        assert_eq!(out[0].0, 0xB);
        let targets: Vec<u64> = out[1..].iter().map(|(t, _)| *t).collect();
        assert_eq!(targets, vec![0xA, 0xB, 0xC]);
        assert!(out[1..].iter().all(|(_, c)| c.is_some()));
    }

    #[test]
    fn resolve_branchind_index_out_of_table() {
        let tables = table_fixture();
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.write_reg("rax", 7).unwrap();
        let dest = ConcolicValue::concrete(0, 8);
        assert_eq!(
            resolve_branchind(&st, 0x100, 0, &dest, &tables, false).unwrap_err(),
            7
        );
    }

    #[test]
    fn resolve_branchind_without_table_uses_concrete_dest() {
        let tables = JumpTableMap::default();
        let st = MachineState::new(RegisterMap::default_x86_64(), 0);
        let dest = ConcolicValue::concrete(0x4242, 8);
        let out = resolve_branchind(&st, 0x100, 0, &dest, &tables, true).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].0, 0x4242);
    }

    fn syscall_image(number: u64, arg0: u64) -> ProgramImage {
        let rax = Varnode::register(0, 8);
        let rdi = Varnode::register(0x38, 8);
        let mut img = ProgramImage::default();
        let ops = vec![
            op(Opcode::COPY, Some(rax), vec![Varnode::constant(number, 8)]),
            op(Opcode::COPY, Some(rdi), vec![Varnode::constant(arg0, 8)]),
            op(Opcode::CALLOTHER, None, vec![Varnode::constant(0, 4)]),
        ];
        img.instructions
            .insert(0x10, Instruction::new(0x10, ops, 0).unwrap());
        img.callother_names.insert((0x10, 2), "syscall".into());
        img
    }

    #[test]
    fn syscall_exit_group() {
        let img = syscall_image(231, 0);
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        assert!(matches!(emu.step(&mut st), StepOutcome::Exited(0)));
    }

    #[test]
    fn syscall_write_appends_to_stdout() {
        let rax = Varnode::register(0, 8);
        let rdi = Varnode::register(0x38, 8);
        let rsi = Varnode::register(0x30, 8);
        let rdx = Varnode::register(0x10, 8);
        let mut img = ProgramImage::default();
        let ops = vec![
            op(Opcode::COPY, Some(rax), vec![Varnode::constant(1, 8)]),
            op(Opcode::COPY, Some(rdi), vec![Varnode::constant(1, 8)]),
            op(Opcode::COPY, Some(rsi), vec![Varnode::constant(0x2000, 8)]),
            op(Opcode::COPY, Some(rdx), vec![Varnode::constant(5, 8)]),
            op(Opcode::CALLOTHER, None, vec![Varnode::constant(0, 4)]),
        ];
        img.instructions
            .insert(0x10, Instruction::new(0x10, ops, 0).unwrap());
        img.callother_names.insert((0x10, 4), "syscall".into());
        let (xrefs, tables, symbols, profile) = make_env();
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, EmuConfig::default());
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.memory.write_bytes(0x2000, b"hello");
        st.pc = 0x10;
        let out = emu.step(&mut st);
        assert!(matches!(out, StepOutcome::Exited(_) | StepOutcome::Continue(_)));
        assert_eq!(st.vfs.stdout(), b"hello");
        assert_eq!(st.read_reg("rax").unwrap().as_u64(), 5);
    }

    #[test]
    fn unknown_syscall_strict_faults() {
        let img = syscall_image(9999, 0);
        let (xrefs, tables, symbols, profile) = make_env();
        let cfg = EmuConfig {
            strict: true,
            ..EmuConfig::default()
        };
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, cfg);
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.pc = 0x10;
        match emu.step(&mut st) {
            StepOutcome::Faulted(f) => assert_eq!(f.kind, FaultKind::UnknownSyscall),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn symbolic_cbranch_records_constraint_and_alternate() {
        let rax = Varnode::register(0, 8);
        let zf = Varnode::register(0x206, 1);
        let mut img = ProgramImage::default();
        let guard_ops = vec![
            op(
                Opcode::INT_EQUAL,
                Some(zf),
                vec![rax, Varnode::constant(0x2a, 8)],
            ),
            op(Opcode::CBRANCH, None, vec![Varnode::ram(0x30, 8), zf]),
        ];
        img.instructions
            .insert(0x10, Instruction::new(0x10, guard_ops, 0).unwrap());
        for addr in [0x20u64, 0x30] {
            img.instructions.insert(
                addr,
                Instruction::new(
                    addr,
                    vec![op(Opcode::COPY, Some(rax), vec![Varnode::constant(0, 8)])],
                    0,
                )
                .unwrap(),
            );
        }
        let (xrefs, tables, symbols, profile) = make_env();
        let cfg = EmuConfig {
            explore: true,
            ..EmuConfig::default()
        };
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, cfg);
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        let sym = st.fresh_symbol("x", 64, 5);
        st.registers.write(0, &ConcolicValue::symbolic(5, 8, sym));
        st.pc = 0x10;
        let out = emu.step(&mut st);
        // 5 != 0x2a: branch not taken, falls through to 0x20.
        assert!(matches!(out, StepOutcome::Continue(0x20)));
        assert_eq!(st.constraints.len(), 1);
        assert!(!st.constraints[0].taken);
        assert_eq!(emu.pending_forks.len(), 1);
        let alt = &emu.pending_forks[0];
        assert_eq!(alt.pc, 0x30);
        assert!(alt.constraints[0].taken);
        assert_eq!(alt.fork_depth, 1);
    }

    #[test]
    fn stubbed_external_call_returns() {
        let rax = Varnode::register(0, 8);
        let mut img = ProgramImage::default();
        img.instructions.insert(
            0x10,
            Instruction::new(
                0x10,
                vec![op(Opcode::CALL, None, vec![Varnode::ram(0x555000, 8)])],
                0,
            )
            .unwrap(),
        );
        img.instructions.insert(
            0x18,
            Instruction::new(
                0x18,
                vec![op(Opcode::COPY, Some(rax), vec![rax])],
                0,
            )
            .unwrap(),
        );
        let mut symbols = SymbolTable::default();
        symbols.map.insert(0x555000, "malloc".into());
        let (xrefs, tables, _, profile) = make_env();
        let mut cfg = EmuConfig::default();
        cfg.stubs.insert("malloc".into(), 0x7777);
        let mut emu = Emulator::new(&img, &xrefs, &tables, &symbols, &profile, cfg);
        let mut st = MachineState::new(RegisterMap::default_x86_64(), 0);
        st.write_reg("rsp", 0x7fff0000).unwrap();
        st.memory
            .write(0x7fff0000, &ConcolicValue::concrete(0x18, 8));
        st.pc = 0x10;
        assert!(matches!(emu.step(&mut st), StepOutcome::Continue(0x18)));
        assert_eq!(st.read_reg("rax").unwrap().as_u64(), 0x7777);
        assert_eq!(st.read_reg("rsp").unwrap().as_u64(), 0x7fff0008);
    }
}
