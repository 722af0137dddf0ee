//! Textual P-Code listing parser and printer.
//!
//! Listing grammar: a line `0xADDR [len=N]` opens an instruction; each
//! following line holds one op, either `OUTVN = OPCODE IN0 [, IN1 [, IN2]]`
//! or `OPCODE IN0 [, IN1 [, IN2]]` for output-less ops. `#` starts a
//! comment; blank lines are ignored. CALLOTHER carries a quoted pseudo-op
//! name after its first input: `CALLOTHER (const,0x0,4) "syscall"` (an
//! optional comma before the quote is accepted).

use std::fmt;

use thiserror::Error;

use crate::model::{
    is_rejected_opcode, Instruction, ModelError, Opcode, PcodeOp, ProgramImage, SpaceKind, Varnode,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    BadVarnode,
    UnknownOpcode,
    ArityMismatch,
    BadAddress,
    RejectedHighLevelOp,
}

impl fmt::Display for ParseErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ParseErrorKind::BadVarnode => "bad varnode",
            ParseErrorKind::UnknownOpcode => "unknown opcode",
            ParseErrorKind::ArityMismatch => "arity mismatch",
            ParseErrorKind::BadAddress => "bad address",
            ParseErrorKind::RejectedHighLevelOp => "rejected high-level op",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("line {line_number}: {kind}: {message}")]
pub struct ParseError {
    pub line_number: usize,
    pub kind: ParseErrorKind,
    pub message: String,
}

impl ParseError {
    fn new(line_number: usize, kind: ParseErrorKind, message: impl Into<String>) -> ParseError {
        ParseError {
            line_number,
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("{unit}: {err}")]
    Parse {
        unit: String,
        #[source]
        err: ParseError,
    },
    #[error("duplicate instruction address {addr:#x} (units {first_unit} and {second_unit})")]
    DuplicateAddress {
        addr: u64,
        first_unit: String,
        second_unit: String,
    },
}

/// Parses a single varnode token of the form `(space,0xOFFSET,SIZE)`.
pub fn parse_varnode(token: &str) -> Result<Varnode, String> {
    let inner = token
        .strip_prefix('(')
        .and_then(|t| t.strip_suffix(')'))
        .ok_or_else(|| format!("not parenthesized: {token:?}"))?;
    if inner.contains(char::is_whitespace) {
        return Err(format!("interior whitespace in {token:?}"));
    }
    let mut parts = inner.splitn(3, ',');
    let space_name = parts.next().unwrap_or("");
    let offset_str = parts.next().ok_or_else(|| format!("missing offset in {token:?}"))?;
    let size_str = parts.next().ok_or_else(|| format!("missing size in {token:?}"))?;
    let space = SpaceKind::from_name(space_name)
        .ok_or_else(|| format!("unknown space {space_name:?}"))?;
    let hex = offset_str
        .strip_prefix("0x")
        .or_else(|| offset_str.strip_prefix("0X"))
        .ok_or_else(|| format!("offset {offset_str:?} is not 0x-hex"))?;
    let offset =
        u64::from_str_radix(hex, 16).map_err(|_| format!("bad hex offset {offset_str:?}"))?;
    let size: u32 = size_str
        .parse()
        .map_err(|_| format!("bad size {size_str:?}"))?;
    Varnode::new(space, offset, size).map_err(|e| e.to_string())
}

#[derive(Debug, PartialEq)]
enum Tok {
    Paren(String),
    Quote(String),
    Word(String),
    Eq,
}

fn lex_line(line: &str, line_number: usize) -> Result<Vec<Tok>, ParseError> {
    let mut toks = Vec::new();
    let mut chars = line.chars().peekable();
    while let Some(&c) = chars.peek() {
        match c {
            c if c.is_whitespace() || c == ',' => {
                chars.next();
            }
            '(' => {
                let mut tok = String::new();
                for c in chars.by_ref() {
                    tok.push(c);
                    if c == ')' {
                        break;
                    }
                }
                if !tok.ends_with(')') {
                    return Err(ParseError::new(
                        line_number,
                        ParseErrorKind::BadVarnode,
                        format!("unclosed varnode {tok:?}"),
                    ));
                }
                toks.push(Tok::Paren(tok));
            }
            '"' => {
                chars.next();
                let mut tok = String::new();
                let mut closed = false;
                for c in chars.by_ref() {
                    if c == '"' {
                        closed = true;
                        break;
                    }
                    tok.push(c);
                }
                if !closed {
                    return Err(ParseError::new(
                        line_number,
                        ParseErrorKind::BadVarnode,
                        "unterminated quoted name",
                    ));
                }
                toks.push(Tok::Quote(tok));
            }
            '=' => {
                chars.next();
                toks.push(Tok::Eq);
            }
            _ => {
                let mut tok = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == ',' || c == '=' || c == '(' {
                        break;
                    }
                    tok.push(c);
                    chars.next();
                }
                toks.push(Tok::Word(tok));
            }
        }
    }
    Ok(toks)
}

/// Strips a `#` comment, honoring quoted strings.
fn strip_comment(line: &str) -> &str {
    let mut in_quote = false;
    for (i, c) in line.char_indices() {
        match c {
            '"' => in_quote = !in_quote,
            '#' if !in_quote => return &line[..i],
            _ => {}
        }
    }
    line
}

struct ParsedOp {
    op: PcodeOp,
    callother_name: Option<String>,
}

fn parse_op_line(toks: Vec<Tok>, line_number: usize) -> Result<ParsedOp, ParseError> {
    let (output, rest) = if toks.len() >= 2 && toks[1] == Tok::Eq {
        let out_tok = match &toks[0] {
            Tok::Paren(s) => s,
            other => {
                return Err(ParseError::new(
                    line_number,
                    ParseErrorKind::BadVarnode,
                    format!("output is not a varnode: {other:?}"),
                ))
            }
        };
        let vn = parse_varnode(out_tok)
            .map_err(|m| ParseError::new(line_number, ParseErrorKind::BadVarnode, m))?;
        (Some(vn), &toks[2..])
    } else {
        (None, &toks[..])
    };
    let opcode_name = match rest.first() {
        Some(Tok::Word(w)) => w.as_str(),
        _ => {
            return Err(ParseError::new(
                line_number,
                ParseErrorKind::UnknownOpcode,
                "missing opcode",
            ))
        }
    };
    if is_rejected_opcode(opcode_name) {
        return Err(ParseError::new(
            line_number,
            ParseErrorKind::RejectedHighLevelOp,
            format!("{opcode_name} is not low-level P-Code"),
        ));
    }
    let opcode = Opcode::from_name(opcode_name).ok_or_else(|| {
        ParseError::new(
            line_number,
            ParseErrorKind::UnknownOpcode,
            opcode_name.to_string(),
        )
    })?;
    let mut inputs = Vec::new();
    let mut callother_name = None;
    for tok in &rest[1..] {
        match tok {
            Tok::Paren(s) => {
                let vn = parse_varnode(s)
                    .map_err(|m| ParseError::new(line_number, ParseErrorKind::BadVarnode, m))?;
                inputs.push(vn);
            }
            Tok::Quote(name) => {
                if opcode != Opcode::CALLOTHER || inputs.is_empty() || callother_name.is_some() {
                    return Err(ParseError::new(
                        line_number,
                        ParseErrorKind::BadVarnode,
                        "quoted name only allowed after CALLOTHER's first input",
                    ));
                }
                callother_name = Some(name.clone());
            }
            other => {
                return Err(ParseError::new(
                    line_number,
                    ParseErrorKind::BadVarnode,
                    format!("unexpected token {other:?}"),
                ))
            }
        }
    }
    let op = PcodeOp::new(opcode, output, inputs).map_err(|e| {
        let kind = match e {
            ModelError::BadVarnodeSize { .. } => ParseErrorKind::BadVarnode,
            _ => ParseErrorKind::ArityMismatch,
        };
        ParseError::new(line_number, kind, e.to_string())
    })?;
    Ok(ParsedOp { op, callother_name })
}

fn parse_address_line(toks: &[Tok], line_number: usize) -> Result<(u64, u32), ParseError> {
    let addr = match &toks[0] {
        Tok::Word(w) => {
            let hex = w
                .strip_prefix("0x")
                .or_else(|| w.strip_prefix("0X"))
                .ok_or_else(|| {
                    ParseError::new(line_number, ParseErrorKind::BadAddress, w.clone())
                })?;
            u64::from_str_radix(hex, 16).map_err(|_| {
                ParseError::new(line_number, ParseErrorKind::BadAddress, w.clone())
            })?
        }
        _ => {
            return Err(ParseError::new(
                line_number,
                ParseErrorKind::BadAddress,
                "expected address",
            ))
        }
    };
    let mut length = 0u32;
    let mut consumed = 1;
    match toks.get(1) {
        None => {}
        // The lexer splits `len=N` into three tokens.
        Some(Tok::Word(w))
            if w == "len"
                && matches!(toks.get(2), Some(Tok::Eq))
                && matches!(toks.get(3), Some(Tok::Word(_))) =>
        {
            let n = match &toks[3] {
                Tok::Word(n) => n,
                _ => unreachable!(),
            };
            length = n.parse().map_err(|_| {
                ParseError::new(line_number, ParseErrorKind::BadAddress, format!("bad len={n}"))
            })?;
            consumed = 4;
        }
        Some(other) => {
            return Err(ParseError::new(
                line_number,
                ParseErrorKind::BadAddress,
                format!("unexpected token {other:?} after address"),
            ))
        }
    }
    if toks.len() > consumed {
        return Err(ParseError::new(
            line_number,
            ParseErrorKind::BadAddress,
            "trailing tokens after address line",
        ));
    }
    Ok((addr, length))
}

struct ParsedUnit {
    instructions: Vec<Instruction>,
    callother_names: Vec<(u64, u32, String)>,
    warnings: Vec<String>,
}

fn parse_unit(text: &str, base: u64, lenient: bool) -> Result<ParsedUnit, ParseError> {
    let mut unit = ParsedUnit {
        instructions: Vec::new(),
        callother_names: Vec::new(),
        warnings: Vec::new(),
    };
    let mut current: Option<(u64, u32, Vec<PcodeOp>)> = None;
    let mut pending_names: Vec<(u32, String)> = Vec::new();

    let finish =
        |current: &mut Option<(u64, u32, Vec<PcodeOp>)>,
         pending: &mut Vec<(u32, String)>,
         unit: &mut ParsedUnit,
         line_number: usize|
         -> Result<(), ParseError> {
        if let Some((addr, length, ops)) = current.take() {
            if ops.is_empty() {
                if lenient {
                    unit.warnings
                        .push(format!("dropping empty instruction at {addr:#x}"));
                    pending.clear();
                    return Ok(());
                }
                return Err(ParseError::new(
                    line_number,
                    ParseErrorKind::ArityMismatch,
                    format!("instruction at {addr:#x} has no ops"),
                ));
            }
            let instr = Instruction::new(addr, ops, length).map_err(|e| {
                ParseError::new(line_number, ParseErrorKind::ArityMismatch, e.to_string())
            })?;
            for (idx, name) in pending.drain(..) {
                unit.callother_names.push((addr, idx, name));
            }
            unit.instructions.push(instr);
        }
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line_number = i + 1;
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let starts_instruction = line.starts_with("0x") || line.starts_with("0X");
        let toks = lex_line(line, line_number)?;
        if toks.is_empty() {
            continue;
        }
        if starts_instruction {
            finish(&mut current, &mut pending_names, &mut unit, line_number)?;
            let (addr, length) = parse_address_line(&toks, line_number)?;
            current = Some((addr.wrapping_add(base), length, Vec::new()));
        } else {
            let (_, _, ops) = current.as_mut().ok_or_else(|| {
                ParseError::new(
                    line_number,
                    ParseErrorKind::BadAddress,
                    "op line before any instruction address",
                )
            })?;
            match parse_op_line(toks, line_number) {
                Ok(parsed) => {
                    let idx = ops.len() as u32;
                    if let Some(name) = parsed.callother_name {
                        pending_names.push((idx, name));
                    }
                    ops.push(parsed.op);
                }
                Err(e) if lenient && e.kind == ParseErrorKind::UnknownOpcode => {
                    unit.warnings.push(format!("line {line_number}: skipping {}", e.message));
                }
                Err(e) => return Err(e),
            }
        }
    }
    let last_line = text.lines().count();
    finish(&mut current, &mut pending_names, &mut unit, last_line)?;
    Ok(unit)
}

/// Parses one or more listing units into a `ProgramImage`. `base_offset` is
/// added to every instruction address of its unit. The first error aborts
/// that unit; duplicate resulting addresses across units are an error.
pub fn parse_program(
    sources: &[(String, u64, String)],
    lenient: bool,
) -> Result<(ProgramImage, Vec<String>), LoadError> {
    let mut img = ProgramImage::default();
    let mut warnings = Vec::new();
    let mut owner: std::collections::BTreeMap<u64, String> = Default::default();
    for (name, base, text) in sources {
        let unit = parse_unit(text, *base, lenient).map_err(|err| LoadError::Parse {
            unit: name.clone(),
            err,
        })?;
        for instr in unit.instructions {
            if let Some(first) = owner.get(&instr.address) {
                return Err(LoadError::DuplicateAddress {
                    addr: instr.address,
                    first_unit: first.clone(),
                    second_unit: name.clone(),
                });
            }
            owner.insert(instr.address, name.clone());
            img.instructions.insert(instr.address, instr);
        }
        for (addr, idx, co_name) in unit.callother_names {
            img.callother_names.insert((addr, idx), co_name);
        }
        for w in unit.warnings {
            warnings.push(format!("{name}: {w}"));
        }
        img.load_units.push((name.clone(), *base));
    }
    Ok((img, warnings))
}

fn render_op(op: &PcodeOp, callother_name: Option<&str>) -> String {
    let mut s = String::new();
    if let Some(out) = &op.output {
        s.push_str(&out.render());
        s.push_str(" = ");
    }
    s.push_str(op.opcode.name());
    for (i, vn) in op.inputs.iter().enumerate() {
        if i == 0 {
            s.push(' ');
        } else {
            s.push_str(" , ");
        }
        s.push_str(&vn.render());
        if i == 0 {
            if let Some(name) = callother_name {
                s.push_str(&format!(" \"{name}\""));
            }
        }
    }
    s
}

/// Renders a program back to listing text in normal form (single spaces,
/// lowercase hex, no comments), so `render_program(parse(x)) ==
/// normalize_listing(x)` for canonical listings.
pub fn render_program(img: &ProgramImage) -> String {
    let mut out = String::new();
    for instr in img.instructions.values() {
        if instr.length > 0 {
            out.push_str(&format!("{:#x} len={}\n", instr.address, instr.length));
        } else {
            out.push_str(&format!("{:#x}\n", instr.address));
        }
        for (i, op) in instr.ops.iter().enumerate() {
            let name = img.callother_name(instr.address, i as u32);
            out.push_str(&render_op(op, name));
            out.push('\n');
        }
    }
    out
}

/// Normal form of a listing: comments and blank lines dropped, whitespace
/// runs collapsed, hex literals lowercased. Quoted strings are preserved.
pub fn normalize_listing(text: &str) -> String {
    let mut out = String::new();
    for raw in text.lines() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let mut norm = String::new();
        let mut in_quote = false;
        let mut last_space = false;
        let mut chars = line.chars().peekable();
        while let Some(c) = chars.next() {
            if c == '"' {
                in_quote = !in_quote;
                norm.push(c);
                last_space = false;
            } else if !in_quote && c.is_whitespace() {
                if !last_space {
                    norm.push(' ');
                    last_space = true;
                }
            } else if !in_quote && c == '0' && matches!(chars.peek(), Some('x') | Some('X')) {
                chars.next();
                norm.push_str("0x");
                while let Some(&h) = chars.peek() {
                    if h.is_ascii_hexdigit() {
                        norm.push(h.to_ascii_lowercase());
                        chars.next();
                    } else {
                        break;
                    }
                }
                last_space = false;
            } else {
                norm.push(c);
                last_space = false;
            }
        }
        out.push_str(norm.trim_end());
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn src(text: &str) -> Vec<(String, u64, String)> {
        vec![("test".into(), 0, text.into())]
    }

    #[test]
    fn parse_varnode_examples() {
        assert_eq!(
            parse_varnode("(register,0x0,8)").unwrap(),
            Varnode::register(0, 8)
        );
        assert_eq!(
            parse_varnode("(const,0x2a,8)").unwrap(),
            Varnode::constant(42, 8)
        );
        assert!(parse_varnode("(stackptr,0x8,8)").is_err());
        assert!(parse_varnode("(register, 0x0, 8)").is_err());
        assert!(parse_varnode("(register,0x0,0)").is_err());
        assert!(parse_varnode("(register,0x0,17)").is_err());
    }

    #[test]
    fn parse_two_instruction_listing() {
        let text = "\
0x201000 len=7
  (register,0x0,8) = COPY (const,0x2a,8)
  STORE (const,0x1b1,8) , (register,0x20,8) , (register,0x0,8)
0x201007 len=2
  CBRANCH (ram,0x201010,8) , (register,0x206,1)
";
        let (img, warnings) = parse_program(&src(text), false).unwrap();
        assert!(warnings.is_empty());
        assert_eq!(img.instructions.len(), 2);
        let first = img.get(0x201000).unwrap();
        assert_eq!(first.ops.len(), 2);
        assert_eq!(first.length, 7);
        assert_eq!(first.ops[0].opcode, Opcode::COPY);
        assert_eq!(first.ops[1].opcode, Opcode::STORE);
    }

    #[test]
    fn rejects_high_level_op() {
        let text = "0x10\n  (register,0x0,8) = MULTIEQUAL (register,0x0,8) , (register,0x8,8)\n";
        let err = parse_program(&src(text), false).unwrap_err();
        match err {
            LoadError::Parse { err, .. } => {
                assert_eq!(err.kind, ParseErrorKind::RejectedHighLevelOp);
                assert_eq!(err.line_number, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_float_op() {
        let text = "0x10\n  (register,0x0,8) = FLOAT_ADD (register,0x0,8) , (register,0x8,8)\n";
        let err = parse_program(&src(text), false).unwrap_err();
        assert!(matches!(
            err,
            LoadError::Parse { err: ParseError { kind: ParseErrorKind::RejectedHighLevelOp, .. }, .. }
        ));
    }

    #[test]
    fn duplicate_address_across_units() {
        let a = ("a".to_string(), 0u64, "0x201000\n  BRANCH (ram,0x201000,8)\n".to_string());
        let b = ("b".to_string(), 0u64, "0x201000\n  BRANCH (ram,0x201000,8)\n".to_string());
        let err = parse_program(&[a, b], false).unwrap_err();
        assert!(matches!(err, LoadError::DuplicateAddress { addr: 0x201000, .. }));
    }

    #[test]
    fn base_offset_applied() {
        let text = "0x100\n  BRANCH (ram,0x100,8)\n";
        let sources = vec![("lib".to_string(), 0x7000_0000u64, text.to_string())];
        let (img, _) = parse_program(&sources, false).unwrap();
        assert!(img.contains(0x7000_0100));
    }

    #[test]
    fn lenient_skips_unknown_opcode() {
        let text = "0x10\n  FROBNICATE (register,0x0,8)\n  (register,0x0,8) = COPY (const,0x1,8)\n";
        assert!(parse_program(&src(text), false).is_err());
        let (img, warnings) = parse_program(&src(text), true).unwrap();
        assert_eq!(img.get(0x10).unwrap().ops.len(), 1);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn callother_name_recorded() {
        let text = "0x10\n  CALLOTHER (const,0x0,4) , \"syscall\"\n";
        let (img, _) = parse_program(&src(text), false).unwrap();
        assert_eq!(img.callother_name(0x10, 0), Some("syscall"));
    }

    #[test]
    fn round_trip_normal_form() {
        let text = "\
0x201000 len=7   # comment
  (register,0x0,8) = COPY (const,0x2A,8)

  STORE (const,0x1B1,8) , (register,0x20,8) , (register,0x0,8)
0x201007 len=2
  CALLOTHER (const,0x0,4) \"syscall\"
";
        let (img, _) = parse_program(&src(text), false).unwrap();
        assert_eq!(render_program(&img), normalize_listing(text));
    }

    #[test]
    fn arity_error_points_at_line() {
        let text = "0x10\n  (register,0x0,8) = COPY (const,0x1,8) , (const,0x2,8)\n";
        let err = parse_program(&src(text), false).unwrap_err();
        match err {
            LoadError::Parse { err, .. } => {
                assert_eq!(err.kind, ParseErrorKind::ArityMismatch);
                assert_eq!(err.line_number, 2);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    proptest::proptest! {
        #[test]
        fn varnode_render_parse_round_trip(
            space in 0usize..4,
            offset in proptest::prelude::any::<u64>(),
            size in 1u32..=16,
        ) {
            let space = [SpaceKind::Constant, SpaceKind::Register, SpaceKind::Unique, SpaceKind::Ram][space];
            let vn = Varnode::new(space, offset, size).unwrap();
            let parsed = parse_varnode(&vn.render()).unwrap();
            proptest::prop_assert_eq!(parsed, vn);
        }
    }
}
