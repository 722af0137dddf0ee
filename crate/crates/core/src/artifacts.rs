//! Sidecar file loading (panic xrefs, jump tables, symbol names) and the
//! textual execution log / call trace writers.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::detection::PanicXrefSet;
use crate::emulator::JumpTableMap;
use crate::model::{ProgramImage, SpaceKind, Varnode};
use crate::symbolic::{first_symbol, ConcolicValue};

#[derive(Debug, Error)]
pub enum SidecarError {
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: String,
        line: usize,
        message: String,
    },
    #[error("cannot read {file}: {source}")]
    Io {
        file: String,
        source: std::io::Error,
    },
}

/// Address -> symbol name, loaded from a `0xADDR name` listing.
#[derive(Debug, Clone, Default)]
pub struct SymbolTable {
    pub map: BTreeMap<u64, String>,
}

impl SymbolTable {
    pub fn lookup(&self, addr: u64) -> Option<&str> {
        self.map.get(&addr).map(|s| s.as_str())
    }

    pub fn parse(text: &str, file: &str) -> Result<SymbolTable, SidecarError> {
        let mut map = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let malformed = |message: String| SidecarError::Malformed {
                file: file.to_string(),
                line: i + 1,
                message,
            };
            let addr_tok = parts.next().unwrap();
            let name = parts
                .next()
                .ok_or_else(|| malformed("missing symbol name".into()))?;
            let addr = parse_hex_addr(addr_tok).map_err(malformed)?;
            map.insert(addr, name.to_string());
        }
        Ok(SymbolTable { map })
    }
}

fn parse_hex_addr(tok: &str) -> Result<u64, String> {
    let hex = tok
        .strip_prefix("0x")
        .or_else(|| tok.strip_prefix("0X"))
        .ok_or_else(|| format!("expected 0x-hex address, got {tok:?}"))?;
    u64::from_str_radix(hex, 16).map_err(|e| format!("bad address {tok:?}: {e}"))
}

/// Parses a panic cross-reference listing: one `0xADDR kind "message"`
/// entry per line.
pub fn parse_xrefs(text: &str, file: &str) -> Result<PanicXrefSet, SidecarError> {
    let mut set = PanicXrefSet::default();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |message: String| SidecarError::Malformed {
            file: file.to_string(),
            line: i + 1,
            message,
        };
        let mut parts = line.splitn(3, char::is_whitespace);
        let addr_tok = parts.next().unwrap();
        let kind = parts
            .next()
            .ok_or_else(|| malformed("missing xref kind".into()))?;
        let rest = parts.next().unwrap_or("").trim();
        let message = if rest.is_empty() {
            String::new()
        } else {
            let inner = rest
                .strip_prefix('"')
                .and_then(|r| r.strip_suffix('"'))
                .ok_or_else(|| malformed(format!("message must be double-quoted, got {rest:?}")))?;
            inner.to_string()
        };
        let addr = parse_hex_addr(addr_tok).map_err(malformed)?;
        set.entries.insert(addr, (kind.to_string(), message));
    }
    Ok(set)
}

/// Loads the optional sidecar trio next to a program image. Xref or symbol
/// addresses outside the image produce warnings; jump-table targets outside
/// the image are an error because the emulator would jump blind.
pub fn load_sidecars(
    xrefs_path: Option<&Path>,
    tables_path: Option<&Path>,
    symbols_path: Option<&Path>,
    img: &ProgramImage,
) -> Result<(PanicXrefSet, JumpTableMap, SymbolTable, Vec<String>), SidecarError> {
    let mut warnings = Vec::new();
    let read = |path: &Path| -> Result<String, SidecarError> {
        std::fs::read_to_string(path).map_err(|e| SidecarError::Io {
            file: path.display().to_string(),
            source: e,
        })
    };
    let xrefs = match xrefs_path {
        Some(p) => {
            let set = parse_xrefs(&read(p)?, &p.display().to_string())?;
            for addr in set.entries.keys() {
                if !img.contains(*addr) {
                    warnings.push(format!(
                        "xref address {addr:#x} is not an instruction in the image"
                    ));
                }
            }
            set
        }
        None => PanicXrefSet::default(),
    };
    let tables = match tables_path {
        Some(p) => {
            let map = JumpTableMap::from_json(&read(p)?).map_err(|message| {
                SidecarError::Malformed {
                    file: p.display().to_string(),
                    line: 0,
                    message,
                }
            })?;
            map.validate(img).map_err(|message| SidecarError::Malformed {
                file: p.display().to_string(),
                line: 0,
                message,
            })?;
            map
        }
        None => JumpTableMap::default(),
    };
    let symbols = match symbols_path {
        Some(p) => {
            let table = SymbolTable::parse(&read(p)?, &p.display().to_string())?;
            for (addr, name) in &table.map {
                if !img.contains(*addr) {
                    warnings.push(format!("symbol {name} at {addr:#x} is outside the image"));
                }
            }
            table
        }
        None => SymbolTable::default(),
    };
    Ok((xrefs, tables, symbols, warnings))
}

/// A line-oriented output sink: either a buffered file or an in-memory
/// buffer for tests.
pub enum TextSink {
    File(BufWriter<File>, PathBuf),
    Mem(Vec<u8>),
}

impl TextSink {
    pub fn file(path: impl Into<PathBuf>) -> io::Result<TextSink> {
        let path = path.into();
        Ok(TextSink::File(BufWriter::new(File::create(&path)?), path))
    }

    pub fn mem() -> TextSink {
        TextSink::Mem(Vec::new())
    }

    pub fn write_line(&mut self, line: &str) -> io::Result<()> {
        match self {
            TextSink::File(w, _) => {
                w.write_all(line.as_bytes())?;
                w.write_all(b"\n")
            }
            TextSink::Mem(buf) => {
                buf.extend_from_slice(line.as_bytes());
                buf.push(b'\n');
                Ok(())
            }
        }
    }

    pub fn flush(&mut self) -> io::Result<()> {
        match self {
            TextSink::File(w, _) => w.flush(),
            TextSink::Mem(_) => Ok(()),
        }
    }

    pub fn into_string(mut self) -> String {
        let _ = self.flush();
        let (mem, path) = match &mut self {
            TextSink::Mem(buf) => (Some(std::mem::take(buf)), None),
            TextSink::File(_, path) => (None, Some(path.clone())),
        };
        drop(self);
        match (mem, path) {
            (Some(buf), _) => String::from_utf8_lossy(&buf).into_owned(),
            (_, Some(path)) => std::fs::read_to_string(path).unwrap_or_default(),
            _ => unreachable!(),
        }
    }
}

impl Drop for TextSink {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

/// Renders an op input for the execution log. Constant varnodes print as
/// themselves; everything else carries its concrete value, and symbolic
/// values show the first symbol they depend on.
pub fn render_input(vn: &Varnode, val: &ConcolicValue) -> String {
    if let Some(expr) = &val.sym {
        if let Some(id) = first_symbol(expr) {
            return format!("sym{id}@{:#x}", val.as_u128());
        }
    }
    if vn.space == SpaceKind::Constant {
        vn.render()
    } else {
        format!("{}={:#x}", vn.render(), val.as_u128())
    }
}

pub fn render_output(vn: &Varnode, val: &ConcolicValue) -> String {
    if let Some(expr) = &val.sym {
        if let Some(id) = first_symbol(expr) {
            return format!("{}=sym{id}@{:#x}", vn.render(), val.as_u128());
        }
    }
    format!("{}={:#x}", vn.render(), val.as_u128())
}

/// Appends one execution-log line:
/// `STEP <n> 0x<addr>/<op index> <OPCODE> <inputs...> -> <output>`.
pub fn append_log(
    sink: &mut TextSink,
    step: u64,
    addr: u64,
    op_index: u32,
    opcode: &str,
    inputs: &[String],
    output: Option<&str>,
) -> io::Result<()> {
    let mut line = format!("STEP {step} {addr:#x}/{op_index} {opcode}");
    for i in inputs {
        line.push(' ');
        line.push_str(i);
    }
    if let Some(out) = output {
        line.push_str(" -> ");
        line.push_str(out);
    }
    sink.write_line(&line)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TraceKind {
    Call { addr: u64, args: Vec<u64> },
    Return { addr: u64 },
    SyscallEntry { number: u64, args: Vec<u64> },
    FindingEmitted { kind: String, addr: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceEvent {
    pub step: u64,
    pub kind: TraceKind,
}

/// Appends one call-trace line; call targets resolve to symbol names when
/// the symbol table knows them.
pub fn append_trace(
    sink: &mut TextSink,
    event: &TraceEvent,
    symbols: &SymbolTable,
) -> io::Result<()> {
    let line = match &event.kind {
        TraceKind::Call { addr, args } => {
            let name = symbols.lookup(*addr).unwrap_or("?");
            let rendered: Vec<String> = args.iter().map(|a| format!("{a:#x}")).collect();
            format!("CALL {addr:#x} {name} args=[{}]", rendered.join(", "))
        }
        TraceKind::Return { addr } => format!("RETURN {addr:#x}"),
        TraceKind::SyscallEntry { number, args } => {
            let rendered: Vec<String> = args.iter().map(|a| format!("{a:#x}")).collect();
            format!("SYSCALL {number} args=[{}]", rendered.join(", "))
        }
        TraceKind::FindingEmitted { kind, addr } => format!("FINDING {kind} {addr:#x}"),
    };
    sink.write_line(&line)
}
