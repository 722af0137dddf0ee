//! In-memory representation of a low-level P-Code program.

use std::collections::BTreeMap;

use thiserror::Error;

/// The four address spaces of the flat x86-64 model. Overlay spaces
/// (stack, other) are folded into `Ram` by the generator convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SpaceKind {
    Constant,
    Register,
    Unique,
    Ram,
}

impl SpaceKind {
    pub fn name(self) -> &'static str {
        match self {
            SpaceKind::Constant => "const",
            SpaceKind::Register => "register",
            SpaceKind::Unique => "unique",
            SpaceKind::Ram => "ram",
        }
    }

    pub fn from_name(name: &str) -> Option<SpaceKind> {
        match name {
            "const" => Some(SpaceKind::Constant),
            "register" => Some(SpaceKind::Register),
            "unique" => Some(SpaceKind::Unique),
            "ram" => Some(SpaceKind::Ram),
            _ => None,
        }
    }
}

/// A typed storage reference: space, byte offset (or literal value for the
/// constant space) and size in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Varnode {
    pub space: SpaceKind,
    pub offset: u64,
    pub size: u32,
}

impl Varnode {
    pub fn new(space: SpaceKind, offset: u64, size: u32) -> Result<Varnode, ModelError> {
        if !(1..=16).contains(&size) {
            return Err(ModelError::BadVarnodeSize { size });
        }
        Ok(Varnode {
            space,
            offset,
            size,
        })
    }

    pub const fn constant(value: u64, size: u32) -> Varnode {
        Varnode {
            space: SpaceKind::Constant,
            offset: value,
            size,
        }
    }

    pub const fn register(offset: u64, size: u32) -> Varnode {
        Varnode {
            space: SpaceKind::Register,
            offset,
            size,
        }
    }

    pub const fn unique(offset: u64, size: u32) -> Varnode {
        Varnode {
            space: SpaceKind::Unique,
            offset,
            size,
        }
    }

    pub const fn ram(offset: u64, size: u32) -> Varnode {
        Varnode {
            space: SpaceKind::Ram,
            offset,
            size,
        }
    }

    pub fn is_const(&self) -> bool {
        self.space == SpaceKind::Constant
    }

    pub fn render(&self) -> String {
        format!("({},{:#x},{})", self.space.name(), self.offset, self.size)
    }
}

macro_rules! opcodes {
    ($($name:ident),* $(,)?) => {
        /// Low-level P-Code opcodes. Floating-point and decompiler-level
        /// opcodes are rejected at parse time. Variants keep the listing
        /// spelling so names round-trip textually.
        #[allow(non_camel_case_types)]
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
        pub enum Opcode {
            $($name),*
        }

        impl Opcode {
            pub const ALL: &'static [Opcode] = &[$(Opcode::$name),*];

            pub fn name(self) -> &'static str {
                match self {
                    $(Opcode::$name => stringify!($name)),*
                }
            }

            pub fn from_name(name: &str) -> Option<Opcode> {
                match name {
                    $(stringify!($name) => Some(Opcode::$name),)*
                    _ => None,
                }
            }
        }
    };
}

opcodes! {
    COPY, LOAD, STORE, BRANCH, CBRANCH, BRANCHIND, CALL, CALLIND, CALLOTHER,
    RETURN, PIECE, SUBPIECE, POPCOUNT,
    INT_EQUAL, INT_NOTEQUAL, INT_LESS, INT_SLESS, INT_LESSEQUAL, INT_SLESSEQUAL,
    INT_ZEXT, INT_SEXT, INT_ADD, INT_SUB, INT_CARRY, INT_SCARRY, INT_SBORROW,
    INT_2COMP, INT_NEGATE, INT_XOR, INT_AND, INT_OR, INT_LEFT, INT_RIGHT,
    INT_SRIGHT, INT_MULT, INT_DIV, INT_SDIV, INT_REM, INT_SREM,
    BOOL_NEGATE, BOOL_XOR, BOOL_AND, BOOL_OR,
}

impl Opcode {
    /// (min inputs, max inputs, has output). CALLOTHER is variadic up to 3
    /// inputs with an optional output.
    pub fn arity(self) -> (usize, usize, OutputRule) {
        use OutputRule::*;
        match self {
            Opcode::COPY => (1, 1, Required),
            Opcode::LOAD => (2, 2, Required),
            Opcode::STORE => (3, 3, Forbidden),
            Opcode::BRANCH => (1, 1, Forbidden),
            Opcode::CBRANCH => (2, 2, Forbidden),
            Opcode::BRANCHIND => (1, 1, Forbidden),
            Opcode::CALL => (1, 1, Forbidden),
            Opcode::CALLIND => (1, 1, Forbidden),
            Opcode::CALLOTHER => (1, 3, Optional),
            Opcode::RETURN => (1, 1, Forbidden),
            Opcode::PIECE => (2, 2, Required),
            Opcode::SUBPIECE => (2, 2, Required),
            Opcode::POPCOUNT => (1, 1, Required),
            Opcode::INT_ZEXT
            | Opcode::INT_SEXT
            | Opcode::INT_2COMP
            | Opcode::INT_NEGATE
            | Opcode::BOOL_NEGATE => (1, 1, Required),
            _ => (2, 2, Required),
        }
    }

    pub fn is_comparison(self) -> bool {
        matches!(
            self,
            Opcode::INT_EQUAL
                | Opcode::INT_NOTEQUAL
                | Opcode::INT_LESS
                | Opcode::INT_SLESS
                | Opcode::INT_LESSEQUAL
                | Opcode::INT_SLESSEQUAL
                | Opcode::INT_CARRY
                | Opcode::INT_SCARRY
                | Opcode::INT_SBORROW
        )
    }

    pub fn is_shift(self) -> bool {
        matches!(self, Opcode::INT_LEFT | Opcode::INT_RIGHT | Opcode::INT_SRIGHT)
    }

    /// Binary integer ops whose two inputs must have equal sizes.
    pub fn is_size_matched_binary(self) -> bool {
        let (min, max, out) = self.arity();
        min == 2
            && max == 2
            && out == OutputRule::Required
            && !self.is_shift()
            && !matches!(self, Opcode::PIECE | Opcode::SUBPIECE | Opcode::LOAD)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputRule {
    Required,
    Forbidden,
    Optional,
}

/// High-level / decompiler-only opcode names, rejected with a dedicated
/// error so listings produced from the wrong dialect fail loudly.
pub const HIGH_LEVEL_OPCODES: &[&str] = &[
    "MULTIEQUAL", "INDIRECT", "CAST", "PTRADD", "PTRSUB", "SEGMENTOP",
    "CPOOLREF", "NEW", "INSERT", "EXTRACT",
];

pub fn is_rejected_opcode(name: &str) -> bool {
    HIGH_LEVEL_OPCODES.contains(&name) || name.starts_with("FLOAT_")
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("varnode size {size} out of range [1,16]")]
    BadVarnodeSize { size: u32 },
    #[error("{opcode}: expected {expected} inputs, got {got}")]
    ArityMismatch {
        opcode: &'static str,
        expected: String,
        got: usize,
    },
    #[error("{opcode}: output varnode is {problem}")]
    BadOutput {
        opcode: &'static str,
        problem: &'static str,
    },
    #[error("{opcode}: input sizes {a} and {b} differ")]
    SizeMismatch {
        opcode: &'static str,
        a: u32,
        b: u32,
    },
    #[error("instruction at {addr:#x} has no ops")]
    EmptyInstruction { addr: u64 },
    #[error("address {addr:#x} not in image")]
    AddressUnknown { addr: u64 },
}

/// One P-Code operation: opcode, optional output and up to three inputs.
/// Construction validates the arity table and the size rules, so every
/// reachable `PcodeOp` is well-formed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PcodeOp {
    pub opcode: Opcode,
    pub output: Option<Varnode>,
    pub inputs: Vec<Varnode>,
}

impl PcodeOp {
    pub fn new(
        opcode: Opcode,
        output: Option<Varnode>,
        inputs: Vec<Varnode>,
    ) -> Result<PcodeOp, ModelError> {
        let (min, max, out_rule) = opcode.arity();
        if inputs.len() < min || inputs.len() > max {
            return Err(ModelError::ArityMismatch {
                opcode: opcode.name(),
                expected: if min == max {
                    format!("{min}")
                } else {
                    format!("{min}..{max}")
                },
                got: inputs.len(),
            });
        }
        match (out_rule, &output) {
            (OutputRule::Required, None) => {
                return Err(ModelError::BadOutput {
                    opcode: opcode.name(),
                    problem: "missing",
                })
            }
            (OutputRule::Forbidden, Some(_)) => {
                return Err(ModelError::BadOutput {
                    opcode: opcode.name(),
                    problem: "not allowed",
                })
            }
            _ => {}
        }
        if let Some(out) = &output {
            if out.is_const() {
                return Err(ModelError::BadOutput {
                    opcode: opcode.name(),
                    problem: "a constant",
                });
            }
            if ![1, 2, 4, 8, 16].contains(&out.size) {
                return Err(ModelError::BadVarnodeSize { size: out.size });
            }
            if opcode.is_comparison() && out.size != 1 {
                return Err(ModelError::BadOutput {
                    opcode: opcode.name(),
                    problem: "not size 1",
                });
            }
        }
        if opcode.is_size_matched_binary() && inputs[0].size != inputs[1].size {
            return Err(ModelError::SizeMismatch {
                opcode: opcode.name(),
                a: inputs[0].size,
                b: inputs[1].size,
            });
        }
        Ok(PcodeOp {
            opcode,
            output,
            inputs,
        })
    }
}

/// All P-Code ops lifted from one machine instruction. `length` is the size
/// of the machine instruction in bytes; 0 means unknown, in which case
/// fall-through follows listing order instead of address arithmetic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction {
    pub address: u64,
    pub ops: Vec<PcodeOp>,
    pub length: u32,
}

impl Instruction {
    pub fn new(address: u64, ops: Vec<PcodeOp>, length: u32) -> Result<Instruction, ModelError> {
        if ops.is_empty() {
            return Err(ModelError::EmptyInstruction { addr: address });
        }
        Ok(Instruction {
            address,
            ops,
            length,
        })
    }
}

/// A fully loaded program: instructions keyed by ascending address plus the
/// side map of CALLOTHER pseudo-op names. Immutable after load; safe to
/// share read-only across exploration workers.
#[derive(Debug, Clone, Default)]
pub struct ProgramImage {
    pub instructions: BTreeMap<u64, Instruction>,
    /// (name, base address) for each listing unit loaded.
    pub load_units: Vec<(String, u64)>,
    /// (instruction address, op index) -> pseudo-op name.
    pub callother_names: BTreeMap<(u64, u32), String>,
}

impl ProgramImage {
    pub fn get(&self, addr: u64) -> Option<&Instruction> {
        self.instructions.get(&addr)
    }

    pub fn contains(&self, addr: u64) -> bool {
        self.instructions.contains_key(&addr)
    }

    /// Smallest instruction address strictly greater than `addr`, or `None`
    /// at the end of the image. `addr` must itself be a key.
    pub fn next_instruction_address(&self, addr: u64) -> Result<Option<u64>, ModelError> {
        if !self.instructions.contains_key(&addr) {
            return Err(ModelError::AddressUnknown { addr });
        }
        Ok(self
            .instructions
            .range(addr.wrapping_add(1)..)
            .next()
            .map(|(a, _)| *a))
    }

    pub fn callother_name(&self, addr: u64, op_index: u32) -> Option<&str> {
        self.callother_names
            .get(&(addr, op_index))
            .map(|s| s.as_str())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image_with(addrs: &[u64]) -> ProgramImage {
        let mut img = ProgramImage::default();
        for &a in addrs {
            let op = PcodeOp::new(
                Opcode::COPY,
                Some(Varnode::register(0, 8)),
                vec![Varnode::constant(0, 8)],
            )
            .unwrap();
            img.instructions
                .insert(a, Instruction::new(a, vec![op], 0).unwrap());
        }
        img
    }

    #[test]
    fn next_instruction_address_walks_in_order() {
        let img = image_with(&[0x10, 0x13, 0x18]);
        assert_eq!(img.next_instruction_address(0x10).unwrap(), Some(0x13));
        assert_eq!(img.next_instruction_address(0x13).unwrap(), Some(0x18));
        assert_eq!(img.next_instruction_address(0x18).unwrap(), None);
    }

    #[test]
    fn next_instruction_address_end_of_image() {
        let img = image_with(&[0x10]);
        assert_eq!(img.next_instruction_address(0x10).unwrap(), None);
    }

    #[test]
    fn next_instruction_address_unknown_addr() {
        let img = image_with(&[0x10, 0x13]);
        assert_eq!(
            img.next_instruction_address(0x11),
            Err(ModelError::AddressUnknown { addr: 0x11 })
        );
    }

    #[test]
    fn constant_output_rejected() {
        let err = PcodeOp::new(
            Opcode::COPY,
            Some(Varnode::constant(0, 8)),
            vec![Varnode::constant(1, 8)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BadOutput { .. }));
    }

    #[test]
    fn cbranch_arity_enforced() {
        let err = PcodeOp::new(Opcode::CBRANCH, None, vec![Varnode::ram(0x10, 8)]).unwrap_err();
        assert!(matches!(err, ModelError::ArityMismatch { .. }));
        assert!(PcodeOp::new(
            Opcode::CBRANCH,
            None,
            vec![Varnode::ram(0x10, 8), Varnode::register(0x206, 1)],
        )
        .is_ok());
    }

    #[test]
    fn store_has_three_inputs_no_output() {
        assert!(PcodeOp::new(
            Opcode::STORE,
            None,
            vec![
                Varnode::constant(0x1b1, 8),
                Varnode::register(0x20, 8),
                Varnode::register(0x0, 8),
            ],
        )
        .is_ok());
        let err = PcodeOp::new(
            Opcode::STORE,
            Some(Varnode::register(0, 8)),
            vec![
                Varnode::constant(0x1b1, 8),
                Varnode::register(0x20, 8),
                Varnode::register(0x0, 8),
            ],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BadOutput { .. }));
    }

    #[test]
    fn binary_int_ops_need_matching_sizes() {
        let err = PcodeOp::new(
            Opcode::INT_ADD,
            Some(Varnode::register(0, 8)),
            vec![Varnode::constant(1, 8), Varnode::constant(2, 4)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::SizeMismatch { .. }));
    }

    #[test]
    fn comparison_output_must_be_size_1() {
        let err = PcodeOp::new(
            Opcode::INT_EQUAL,
            Some(Varnode::register(0x206, 8)),
            vec![Varnode::constant(1, 8), Varnode::constant(2, 8)],
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::BadOutput { .. }));
    }

    #[test]
    fn shifts_allow_different_amount_size() {
        assert!(PcodeOp::new(
            Opcode::INT_LEFT,
            Some(Varnode::register(0, 8)),
            vec![Varnode::register(0, 8), Varnode::constant(3, 4)],
        )
        .is_ok());
    }
}
