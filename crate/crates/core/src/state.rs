//! The forkable concolic machine: register file, sparse memory, temporary
//! space, virtual file system and the path-constraint ledger.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::model::{SpaceKind, Varnode};
use crate::symbolic::{
    byte_expr, combine_bytes, eval_to_u128, BitvecExpr, ConcolicValue, PathConstraint, SymbolId,
};

#[derive(Debug, Error)]
pub enum StateError {
    #[error("write to constant-space varnode")]
    WriteToConstant,
    #[error("fork depth {depth} reached the configured maximum {max}")]
    ForkLimitExceeded { depth: u32, max: u32 },
    #[error("unknown register name {0:?}")]
    UnknownRegisterName(String),
    #[error("segments overlap at {addr:#x}")]
    SegmentOverlap { addr: u64 },
    #[error("cannot read {path}: {source}")]
    FileUnreadable {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed register map line {line}: {text:?}")]
    BadRegisterMap { line: usize, text: String },
    #[error("malformed dump manifest: {0}")]
    BadManifest(String),
}

#[derive(Debug, Clone, Default)]
struct Cell {
    val: u8,
    sym: Option<Arc<BitvecExpr>>,
}

/// Byte-addressed sparse store used for the register and unique spaces.
#[derive(Debug, Clone, Default)]
struct ByteStore {
    cells: BTreeMap<u64, Cell>,
}

impl ByteStore {
    fn read(&self, offset: u64, size: u32) -> ConcolicValue {
        let cells: Vec<(u8, Option<Arc<BitvecExpr>>)> = (0..size as u64)
            .map(|i| {
                self.cells
                    .get(&(offset + i))
                    .map(|c| (c.val, c.sym.clone()))
                    .unwrap_or((0, None))
            })
            .collect();
        combine_bytes(&cells)
    }

    fn write(&mut self, offset: u64, val: &ConcolicValue) {
        for (i, byte) in val.bytes.iter().enumerate() {
            let sym = val.sym.as_ref().map(|e| byte_expr(e, i as u32));
            self.cells.insert(offset + i as u64, Cell { val: *byte, sym });
        }
    }

    fn clear(&mut self) {
        self.cells.clear();
    }

    fn reseed(&mut self, bindings: &BTreeMap<SymbolId, u64>) {
        for cell in self.cells.values_mut() {
            if let Some(e) = &cell.sym {
                if let Ok(v) = eval_to_u128(e, bindings) {
                    cell.val = v as u8;
                }
            }
        }
    }
}

/// Register name -> (offset, size) mapping, loaded from an editable data
/// file. Defaults follow Ghidra's x86-64 SLEIGH layout.
#[derive(Debug, Clone, Default)]
pub struct RegisterMap {
    map: BTreeMap<String, (u64, u32)>,
}

impl RegisterMap {
    pub fn parse(text: &str) -> Result<RegisterMap, StateError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let bad = || StateError::BadRegisterMap {
                line: i + 1,
                text: raw.to_string(),
            };
            let name = parts.next().ok_or_else(bad)?;
            let off_str = parts.next().ok_or_else(bad)?;
            let size_str = parts.next().ok_or_else(bad)?;
            let hex = off_str
                .strip_prefix("0x")
                .or_else(|| off_str.strip_prefix("0X"))
                .ok_or_else(bad)?;
            let offset = u64::from_str_radix(hex, 16).map_err(|_| bad())?;
            let size: u32 = size_str.parse().map_err(|_| bad())?;
            map.insert(name.to_string(), (offset, size));
        }
        Ok(RegisterMap { map })
    }

    pub fn default_x86_64() -> RegisterMap {
        RegisterMap::parse(include_str!("../data/x86_64.regmap"))
            .expect("bundled register map is well-formed")
    }

    pub fn lookup(&self, name: &str) -> Option<(u64, u32)> {
        self.map.get(name).copied()
    }
}

#[derive(Debug, Clone)]
pub struct RegisterFile {
    store: ByteStore,
    pub name_map: RegisterMap,
}

impl RegisterFile {
    pub fn new(name_map: RegisterMap) -> RegisterFile {
        RegisterFile {
            store: ByteStore::default(),
            name_map,
        }
    }

    pub fn read(&self, offset: u64, size: u32) -> ConcolicValue {
        self.store.read(offset, size)
    }

    pub fn write(&mut self, offset: u64, val: &ConcolicValue) {
        self.store.write(offset, val);
    }

    pub fn read_by_name(&self, name: &str) -> Result<ConcolicValue, StateError> {
        let (off, size) = self
            .name_map
            .lookup(name)
            .ok_or_else(|| StateError::UnknownRegisterName(name.to_string()))?;
        Ok(self.read(off, size))
    }

    pub fn write_by_name(&mut self, name: &str, value: u64) -> Result<(), StateError> {
        let (off, size) = self
            .name_map
            .lookup(name)
            .ok_or_else(|| StateError::UnknownRegisterName(name.to_string()))?;
        self.write(off, &ConcolicValue::concrete(value as u128, size));
        Ok(())
    }
}

const PAGE_SIZE: u64 = 4096;

#[derive(Clone)]
struct Page {
    bytes: Box<[u8; PAGE_SIZE as usize]>,
    sym: BTreeMap<u16, Arc<BitvecExpr>>,
    init: Box<[u64; 64]>,
}

impl Page {
    fn new() -> Page {
        Page {
            bytes: Box::new([0; PAGE_SIZE as usize]),
            sym: BTreeMap::new(),
            init: Box::new([0; 64]),
        }
    }

    fn is_init(&self, idx: u16) -> bool {
        self.init[(idx / 64) as usize] >> (idx % 64) & 1 == 1
    }

    fn set_init(&mut self, idx: u16) {
        self.init[(idx / 64) as usize] |= 1 << (idx % 64);
    }
}

impl std::fmt::Debug for Page {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Page").finish_non_exhaustive()
    }
}

/// Paged memory: each byte carries a concrete value, an optional symbolic
/// expression, and a flag recording whether it was ever written or loaded
/// from a dump. Untouched bytes read as 0x00 / uninitialized.
#[derive(Debug, Clone, Default)]
pub struct SparseMemory {
    pages: BTreeMap<u64, Page>,
}

impl SparseMemory {
    fn split(addr: u64) -> (u64, u16) {
        (addr / PAGE_SIZE, (addr % PAGE_SIZE) as u16)
    }

    pub fn read(&self, addr: u64, size: u32) -> ConcolicValue {
        let cells: Vec<(u8, Option<Arc<BitvecExpr>>)> = (0..size as u64)
            .map(|i| {
                let (pno, idx) = Self::split(addr.wrapping_add(i));
                match self.pages.get(&pno) {
                    Some(p) => (p.bytes[idx as usize], p.sym.get(&idx).cloned()),
                    None => (0, None),
                }
            })
            .collect();
        combine_bytes(&cells)
    }

    /// True iff every byte of the range was previously written or loaded.
    pub fn is_initialized(&self, addr: u64, size: u32) -> bool {
        (0..size as u64).all(|i| {
            let (pno, idx) = Self::split(addr.wrapping_add(i));
            self.pages.get(&pno).is_some_and(|p| p.is_init(idx))
        })
    }

    pub fn write(&mut self, addr: u64, val: &ConcolicValue) {
        for (i, byte) in val.bytes.iter().enumerate() {
            let (pno, idx) = Self::split(addr.wrapping_add(i as u64));
            let page = self.pages.entry(pno).or_insert_with(Page::new);
            page.bytes[idx as usize] = *byte;
            match val.sym.as_ref().map(|e| byte_expr(e, i as u32)) {
                Some(e) => {
                    page.sym.insert(idx, e);
                }
                None => {
                    page.sym.remove(&idx);
                }
            }
            page.set_init(idx);
        }
    }

    pub fn write_bytes(&mut self, addr: u64, bytes: &[u8]) {
        for (i, byte) in bytes.iter().enumerate() {
            let (pno, idx) = Self::split(addr.wrapping_add(i as u64));
            let page = self.pages.entry(pno).or_insert_with(Page::new);
            page.bytes[idx as usize] = *byte;
            page.sym.remove(&idx);
            page.set_init(idx);
        }
    }

    /// Marks a range initialized (zero-filled), as anonymous mmap does.
    pub fn mark_initialized(&mut self, addr: u64, len: u64) {
        for i in 0..len {
            let (pno, idx) = Self::split(addr.wrapping_add(i));
            let page = self.pages.entry(pno).or_insert_with(Page::new);
            page.set_init(idx);
        }
    }

    pub fn read_concrete_bytes(&self, addr: u64, len: u64) -> Vec<u8> {
        (0..len)
            .map(|i| {
                let (pno, idx) = Self::split(addr.wrapping_add(i));
                self.pages
                    .get(&pno)
                    .map(|p| p.bytes[idx as usize])
                    .unwrap_or(0)
            })
            .collect()
    }

    fn reseed(&mut self, bindings: &BTreeMap<SymbolId, u64>) {
        for page in self.pages.values_mut() {
            for (idx, e) in &page.sym {
                if let Ok(v) = eval_to_u128(e, bindings) {
                    page.bytes[*idx as usize] = v as u8;
                }
            }
        }
    }
}

/// Per-instruction scratch space, cleared at each machine-instruction
/// boundary.
#[derive(Debug, Clone, Default)]
pub struct UniqueSpace {
    store: ByteStore,
}

impl UniqueSpace {
    pub fn read(&self, offset: u64, size: u32) -> ConcolicValue {
        self.store.read(offset, size)
    }

    pub fn write(&mut self, offset: u64, val: &ConcolicValue) {
        self.store.write(offset, val);
    }

    pub fn clear(&mut self) {
        self.store.clear();
    }

    pub fn is_empty(&self) -> bool {
        self.store.cells.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct StdinSource {
    pub data: Vec<u8>,
    pub pos: usize,
    /// When set, bytes read from this source become fresh symbols.
    pub symbolic: bool,
}

#[derive(Debug, Clone)]
pub enum FdState {
    Stdin(StdinSource),
    Stdout(Vec<u8>),
    Stderr(Vec<u8>),
    Closed,
}

#[derive(Debug, Clone)]
pub struct VirtualFileSystem {
    pub fds: BTreeMap<i64, FdState>,
}

impl VirtualFileSystem {
    pub fn new() -> VirtualFileSystem {
        let mut fds = BTreeMap::new();
        fds.insert(
            0,
            FdState::Stdin(StdinSource {
                data: Vec::new(),
                pos: 0,
                symbolic: false,
            }),
        );
        fds.insert(1, FdState::Stdout(Vec::new()));
        fds.insert(2, FdState::Stderr(Vec::new()));
        VirtualFileSystem { fds }
    }

    pub fn stdout(&self) -> &[u8] {
        match self.fds.get(&1) {
            Some(FdState::Stdout(buf)) => buf,
            _ => &[],
        }
    }
}

impl Default for VirtualFileSystem {
    fn default() -> Self {
        VirtualFileSystem::new()
    }
}

/// JSON dump manifest: register values plus raw segment images, produced
/// externally (e.g. by a gdb script) at the analysis start address.
#[derive(Debug, Clone, Deserialize)]
pub struct DumpManifest {
    pub registers: BTreeMap<String, String>,
    #[serde(default)]
    pub segments: Vec<SegmentSpec>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SegmentSpec {
    pub base: String,
    #[serde(default)]
    pub perms: String,
    pub file: String,
}

fn parse_hex_u64(s: &str) -> Result<u64, StateError> {
    let hex = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .unwrap_or(s);
    let radix = if hex.len() == s.len() { 10 } else { 16 };
    u64::from_str_radix(hex, radix).map_err(|_| StateError::BadManifest(format!("bad value {s:?}")))
}

impl DumpManifest {
    pub fn from_json(text: &str) -> Result<DumpManifest, StateError> {
        serde_json::from_str(text).map_err(|e| StateError::BadManifest(e.to_string()))
    }
}

/// Deterministic allocator of fresh symbol ids, shared across forks so ids
/// never collide between sibling states.
#[derive(Debug, Clone, Default)]
pub struct SymbolAllocator {
    next: Arc<AtomicU32>,
}

impl SymbolAllocator {
    fn fresh(&self) -> SymbolId {
        self.next.fetch_add(1, Ordering::Relaxed)
    }
}

/// The complete concolic machine state. `fork` produces a value-independent
/// copy; mutating the child never changes the parent.
#[derive(Debug, Clone)]
pub struct MachineState {
    pub pc: u64,
    pub registers: RegisterFile,
    pub memory: SparseMemory,
    pub unique: UniqueSpace,
    pub vfs: VirtualFileSystem,
    pub constraints: Vec<PathConstraint>,
    pub fork_depth: u32,
    pub rng_seed: u64,
    pub rng: ChaCha8Rng,
    /// Concrete seed value of every symbol created in this state's history.
    pub seed_values: BTreeMap<SymbolId, u64>,
    pub symbol_names: BTreeMap<SymbolId, String>,
    pub symbol_widths: BTreeMap<SymbolId, u32>,
    allocator: SymbolAllocator,
    /// Branch negations already queued for exploration on this path prefix.
    pub negated_branches: std::collections::BTreeSet<(u64, u32)>,
    /// Bump allocator base for brk/anonymous mmap.
    pub heap_next: u64,
    /// Findings already reported for this state (continue-after-finding).
    pub reported: std::collections::BTreeSet<(u64, String)>,
    /// Exit code captured by exit/exit_group.
    pub exit_code: Option<i64>,
}

impl MachineState {
    pub fn new(register_map: RegisterMap, rng_seed: u64) -> MachineState {
        MachineState {
            pc: 0,
            registers: RegisterFile::new(register_map),
            memory: SparseMemory::default(),
            unique: UniqueSpace::default(),
            vfs: VirtualFileSystem::new(),
            constraints: Vec::new(),
            fork_depth: 0,
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            seed_values: BTreeMap::new(),
            symbol_names: BTreeMap::new(),
            symbol_widths: BTreeMap::new(),
            allocator: SymbolAllocator::default(),
            negated_branches: Default::default(),
            heap_next: 0x7000_0000,
            reported: Default::default(),
            exit_code: None,
        }
    }

    pub fn read_varnode(&self, vn: &Varnode) -> ConcolicValue {
        match vn.space {
            SpaceKind::Constant => ConcolicValue::concrete(vn.offset as u128, vn.size),
            SpaceKind::Register => self.registers.read(vn.offset, vn.size),
            SpaceKind::Unique => self.unique.read(vn.offset, vn.size),
            SpaceKind::Ram => self.memory.read(vn.offset, vn.size),
        }
    }

    pub fn write_varnode(&mut self, vn: &Varnode, val: &ConcolicValue) -> Result<(), StateError> {
        debug_assert_eq!(val.size(), vn.size);
        match vn.space {
            SpaceKind::Constant => Err(StateError::WriteToConstant),
            SpaceKind::Register => {
                self.registers.write(vn.offset, val);
                Ok(())
            }
            SpaceKind::Unique => {
                self.unique.write(vn.offset, val);
                Ok(())
            }
            SpaceKind::Ram => {
                self.memory.write(vn.offset, val);
                Ok(())
            }
        }
    }

    /// Deep, independent copy with `fork_depth` incremented.
    pub fn fork(&self, max_depth: u32) -> Result<MachineState, StateError> {
        if self.fork_depth >= max_depth {
            return Err(StateError::ForkLimitExceeded {
                depth: self.fork_depth,
                max: max_depth,
            });
        }
        let mut child = self.clone();
        child.fork_depth += 1;
        Ok(child)
    }

    /// Creates a fresh symbol with the given concrete seed value.
    pub fn fresh_symbol(&mut self, name: &str, width: u32, concrete: u64) -> Arc<BitvecExpr> {
        let id = self.allocator.fresh();
        self.seed_values.insert(id, concrete);
        self.symbol_names.insert(id, name.to_string());
        self.symbol_widths.insert(id, width);
        BitvecExpr::symbol(id, width)
    }

    /// Installs a solver model as the new concrete seed: every byte of the
    /// state that carries a symbolic expression is re-evaluated under the
    /// merged bindings.
    pub fn reseed(&mut self, model: &BTreeMap<SymbolId, u64>) {
        for (id, v) in model {
            self.seed_values.insert(*id, *v);
        }
        let bindings = self.seed_values.clone();
        self.registers.store.reseed(&bindings);
        self.unique.store.reseed(&bindings);
        self.memory.reseed(&bindings);
    }

    /// Loads register values and memory segments from a dump manifest.
    /// Segment file paths are resolved relative to `dir`. Sets `pc` from
    /// the `rip` entry when present.
    pub fn load_dump(&mut self, manifest: &DumpManifest, dir: &Path) -> Result<(), StateError> {
        for name in manifest.registers.keys() {
            if self.registers.name_map.lookup(name).is_none() {
                return Err(StateError::UnknownRegisterName(name.clone()));
            }
        }
        let mut segments: Vec<(u64, Vec<u8>)> = Vec::new();
        for seg in &manifest.segments {
            let base = parse_hex_u64(&seg.base)?;
            let path = dir.join(&seg.file);
            let bytes = std::fs::read(&path).map_err(|e| StateError::FileUnreadable {
                path: path.display().to_string(),
                source: e,
            })?;
            segments.push((base, bytes));
        }
        segments.sort_by_key(|(base, _)| *base);
        for pair in segments.windows(2) {
            let (a_base, a_bytes) = &pair[0];
            let (b_base, _) = &pair[1];
            if a_base + a_bytes.len() as u64 > *b_base {
                return Err(StateError::SegmentOverlap { addr: *b_base });
            }
        }
        for (name, value) in &manifest.registers {
            let v = parse_hex_u64(value)?;
            self.registers.write_by_name(name, v)?;
            if name == "rip" {
                self.pc = v;
            }
        }
        for (base, bytes) in &segments {
            self.memory.write_bytes(*base, bytes);
        }
        Ok(())
    }

    pub fn read_reg(&self, name: &str) -> Result<ConcolicValue, StateError> {
        self.registers.read_by_name(name)
    }

    pub fn write_reg(&mut self, name: &str, value: u64) -> Result<(), StateError> {
        self.registers.write_by_name(name, value)
    }

    pub fn next_rand_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn state() -> MachineState {
        MachineState::new(RegisterMap::default_x86_64(), 1)
    }

    #[test]
    fn register_write_read_roundtrip() {
        let mut st = state();
        let vn = Varnode::register(0, 8);
        st.write_varnode(&vn, &ConcolicValue::concrete(0x2a, 8)).unwrap();
        assert_eq!(st.read_varnode(&vn).as_u64(), 0x2a);
    }

    #[test]
    fn overlapping_register_reads_are_byte_consistent() {
        let mut st = state();
        st.write_varnode(
            &Varnode::register(0, 8),
            &ConcolicValue::concrete(0x1122334455667788, 8),
        )
        .unwrap();
        // eax = low 4 bytes of rax
        assert_eq!(st.read_varnode(&Varnode::register(0, 4)).as_u64(), 0x55667788);
        // sub-read after writing 7
        st.write_varnode(&Varnode::register(0, 8), &ConcolicValue::concrete(7, 8))
            .unwrap();
        assert_eq!(st.read_varnode(&Varnode::register(0, 4)).as_u64(), 7);
    }

    #[test]
    fn ram_byte_addressing() {
        let mut st = state();
        st.write_varnode(
            &Varnode::ram(0x1000, 4),
            &ConcolicValue::concrete(0xAABBCCDD, 4),
        )
        .unwrap();
        assert_eq!(st.read_varnode(&Varnode::ram(0x1002, 1)).as_u64(), 0xBB);
    }

    #[test]
    fn untouched_memory_reads_zero_uninitialized() {
        let st = state();
        let v = st.read_varnode(&Varnode::ram(0x9000, 1));
        assert_eq!(v.as_u64(), 0);
        assert!(!st.memory.is_initialized(0x9000, 1));
    }

    #[test]
    fn write_to_constant_rejected() {
        let mut st = state();
        let err = st
            .write_varnode(&Varnode::constant(0, 8), &ConcolicValue::concrete(1, 8))
            .unwrap_err();
        assert!(matches!(err, StateError::WriteToConstant));
    }

    #[test]
    fn constant_read_is_literal() {
        let st = state();
        let v = st.read_varnode(&Varnode::constant(0x2a, 8));
        assert_eq!(v.as_u64(), 42);
        assert!(!v.is_symbolic());
    }

    #[test]
    fn fork_isolation() {
        let parent = state();
        let mut child = parent.fork(8).unwrap();
        assert_eq!(child.fork_depth, 1);
        child
            .write_varnode(&Varnode::ram(0x1000, 8), &ConcolicValue::concrete(7, 8))
            .unwrap();
        assert_eq!(parent.read_varnode(&Varnode::ram(0x1000, 8)).as_u64(), 0);
        assert_eq!(child.constraints.len(), parent.constraints.len());
    }

    #[test]
    fn fork_limit() {
        let mut st = state();
        st.fork_depth = 4;
        assert!(matches!(
            st.fork(4),
            Err(StateError::ForkLimitExceeded { .. })
        ));
    }

    #[test]
    fn symbolic_write_read_preserves_expr() {
        let mut st = state();
        let sym = st.fresh_symbol("x", 64, 0x2a);
        let v = ConcolicValue::symbolic(0x2a, 8, sym.clone());
        st.write_varnode(&Varnode::register(0, 8), &v).unwrap();
        let back = st.read_varnode(&Varnode::register(0, 8));
        assert!(Arc::ptr_eq(back.sym.as_ref().unwrap(), &sym));
        assert_eq!(back.as_u64(), 0x2a);
    }

    #[test]
    fn reseed_updates_concrete_bytes() {
        let mut st = state();
        let sym = st.fresh_symbol("x", 64, 5);
        st.write_varnode(&Varnode::register(0, 8), &ConcolicValue::symbolic(5, 8, sym))
            .unwrap();
        let mut model = BTreeMap::new();
        model.insert(0u32, 99u64);
        st.reseed(&model);
        assert_eq!(st.read_varnode(&Varnode::register(0, 8)).as_u64(), 99);
        assert!(st.read_varnode(&Varnode::register(0, 8)).is_symbolic());
    }

    #[test]
    fn vfs_opens_standard_fds() {
        let st = state();
        assert!(matches!(st.vfs.fds.get(&0), Some(FdState::Stdin(_))));
        assert!(matches!(st.vfs.fds.get(&1), Some(FdState::Stdout(_))));
        assert!(matches!(st.vfs.fds.get(&2), Some(FdState::Stderr(_))));
    }

    fn write_manifest(dir: &Path, json: &str) -> std::path::PathBuf {
        let p = dir.join("manifest.json");
        std::fs::write(&p, json).unwrap();
        p
    }

    #[test]
    fn load_dump_sets_registers_and_memory() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("seg0.bin"), [0xAB; 16]).unwrap();
        let json = r#"{"registers": {"rip": "0x201000", "rsp": "0x7fff0000"},
                       "segments": [{"base": "0x201000", "perms": "rx", "file": "seg0.bin"}]}"#;
        write_manifest(dir.path(), json);
        let manifest = DumpManifest::from_json(json).unwrap();
        let mut st = state();
        st.load_dump(&manifest, dir.path()).unwrap();
        assert_eq!(st.pc, 0x201000);
        assert_eq!(st.read_reg("rsp").unwrap().as_u64(), 0x7fff0000);
        assert!(st.memory.is_initialized(0x201000, 16));
        assert_eq!(st.memory.read(0x201000, 1).as_u64(), 0xAB);
        assert!(!st.memory.is_initialized(0x201010, 1));
    }

    #[test]
    fn load_dump_unknown_register() {
        let manifest = DumpManifest::from_json(r#"{"registers": {"xyz": "0x1"}}"#).unwrap();
        let mut st = state();
        let err = st.load_dump(&manifest, Path::new(".")).unwrap_err();
        assert!(matches!(err, StateError::UnknownRegisterName(_)));
    }

    #[test]
    fn load_dump_overlapping_segments() {
        let dir = TempDir::new().unwrap();
        std::fs::write(dir.path().join("a.bin"), [0; 32]).unwrap();
        std::fs::write(dir.path().join("b.bin"), [0; 32]).unwrap();
        let json = r#"{"registers": {},
            "segments": [{"base": "0x1000", "perms": "rw", "file": "a.bin"},
                         {"base": "0x1010", "perms": "rw", "file": "b.bin"}]}"#;
        let manifest = DumpManifest::from_json(json).unwrap();
        let mut st = state();
        let err = st.load_dump(&manifest, dir.path()).unwrap_err();
        assert!(matches!(err, StateError::SegmentOverlap { .. }));
    }

    #[test]
    fn load_dump_missing_file() {
        let dir = TempDir::new().unwrap();
        let json = r#"{"registers": {},
            "segments": [{"base": "0x1000", "perms": "rw", "file": "missing.bin"}]}"#;
        let manifest = DumpManifest::from_json(json).unwrap();
        let mut st = state();
        assert!(matches!(
            st.load_dump(&manifest, dir.path()).unwrap_err(),
            StateError::FileUnreadable { .. }
        ));
    }
}
