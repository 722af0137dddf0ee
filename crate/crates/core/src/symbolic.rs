//! Bitvector expression language, concolic values and path constraints.
//!
//! Expressions are immutable trees behind `Arc`, shared freely between
//! forked states. `eval_concrete` is the concrete reference evaluator; its
//! semantics (two's-complement, modular) must match the emulator's opcode
//! table exactly, which the oracle tests check exhaustively at width 8.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

pub type SymbolId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    /// Two's-complement negation.
    Neg,
    /// Bitwise complement.
    Not,
    /// 1 if the operand is zero, else 0. Width 1.
    BoolNegate,
    /// Number of set bits.
    Popcount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mult,
    Div,
    SDiv,
    Rem,
    SRem,
    And,
    Or,
    Xor,
    Shl,
    Lshr,
    Ashr,
    Equal,
    NotEqual,
    ULess,
    SLess,
    ULessEq,
    SLessEq,
    /// Unsigned-add overflow bit.
    Carry,
    /// Signed-add overflow bit.
    SCarry,
    /// Signed-sub overflow bit.
    SBorrow,
    BoolAnd,
    BoolOr,
    BoolXor,
}

impl BinOp {
    /// Ops whose result has width 1 regardless of operand width.
    pub fn yields_bit(self) -> bool {
        matches!(
            self,
            BinOp::Equal
                | BinOp::NotEqual
                | BinOp::ULess
                | BinOp::SLess
                | BinOp::ULessEq
                | BinOp::SLessEq
                | BinOp::Carry
                | BinOp::SCarry
                | BinOp::SBorrow
                | BinOp::BoolAnd
                | BinOp::BoolOr
                | BinOp::BoolXor
        )
    }
}

#[derive(Debug, PartialEq, Eq, Hash)]
pub enum BitvecExpr {
    Literal {
        value: u128,
        width: u32,
    },
    Symbol {
        id: SymbolId,
        width: u32,
    },
    Unary {
        op: UnOp,
        child: Arc<BitvecExpr>,
    },
    Binary {
        op: BinOp,
        left: Arc<BitvecExpr>,
        right: Arc<BitvecExpr>,
    },
    /// Low `width` bits of `child` after dropping `low_byte` bytes.
    Extract {
        child: Arc<BitvecExpr>,
        low_byte: u32,
        width: u32,
    },
    Concat {
        high: Arc<BitvecExpr>,
        low: Arc<BitvecExpr>,
    },
    ZeroExtend {
        child: Arc<BitvecExpr>,
        width: u32,
    },
    SignExtend {
        child: Arc<BitvecExpr>,
        width: u32,
    },
    IfThenElse {
        cond: Arc<BitvecExpr>,
        then_expr: Arc<BitvecExpr>,
        else_expr: Arc<BitvecExpr>,
    },
}

pub fn mask(width: u32) -> u128 {
    if width >= 128 {
        u128::MAX
    } else {
        (1u128 << width) - 1
    }
}

fn sign_bit(value: u128, width: u32) -> bool {
    (value >> (width - 1)) & 1 == 1
}

fn to_signed(value: u128, width: u32) -> i128 {
    if width >= 128 {
        value as i128
    } else if sign_bit(value, width) {
        (value as i128) - (1i128 << width)
    } else {
        value as i128
    }
}

impl BitvecExpr {
    pub fn width(&self) -> u32 {
        match self {
            BitvecExpr::Literal { width, .. }
            | BitvecExpr::Symbol { width, .. }
            | BitvecExpr::Extract { width, .. }
            | BitvecExpr::ZeroExtend { width, .. }
            | BitvecExpr::SignExtend { width, .. } => *width,
            BitvecExpr::Unary { op, child } => match op {
                UnOp::BoolNegate => 1,
                _ => child.width(),
            },
            BitvecExpr::Binary { op, left, .. } => {
                if op.yields_bit() {
                    1
                } else {
                    left.width()
                }
            }
            BitvecExpr::Concat { high, low } => high.width() + low.width(),
            BitvecExpr::IfThenElse { then_expr, .. } => then_expr.width(),
        }
    }

    pub fn literal(value: u128, width: u32) -> Arc<BitvecExpr> {
        Arc::new(BitvecExpr::Literal {
            value: value & mask(width),
            width,
        })
    }

    pub fn symbol(id: SymbolId, width: u32) -> Arc<BitvecExpr> {
        Arc::new(BitvecExpr::Symbol { id, width })
    }

    /// Builds a unary node, folding when the child is a literal.
    pub fn unary(op: UnOp, child: Arc<BitvecExpr>) -> Arc<BitvecExpr> {
        if let BitvecExpr::Literal { .. } = &*child {
            if let Ok(bytes) = eval_concrete(&BitvecExpr::Unary { op, child: child.clone() }, &BTreeMap::new()) {
                let width = match op {
                    UnOp::BoolNegate => 1,
                    _ => child.width(),
                };
                return BitvecExpr::literal(le_bytes_to_u128(&bytes), width);
            }
        }
        Arc::new(BitvecExpr::Unary { op, child })
    }

    /// Builds a binary node, folding when both children are literals.
    pub fn binary(op: BinOp, left: Arc<BitvecExpr>, right: Arc<BitvecExpr>) -> Arc<BitvecExpr> {
        if let (BitvecExpr::Literal { .. }, BitvecExpr::Literal { .. }) = (&*left, &*right) {
            let node = BitvecExpr::Binary {
                op,
                left: left.clone(),
                right: right.clone(),
            };
            if let Ok(bytes) = eval_concrete(&node, &BTreeMap::new()) {
                let width = if op.yields_bit() { 1 } else { left.width() };
                return BitvecExpr::literal(le_bytes_to_u128(&bytes), width);
            }
        }
        Arc::new(BitvecExpr::Binary { op, left, right })
    }

    pub fn zero_extend(child: Arc<BitvecExpr>, width: u32) -> Arc<BitvecExpr> {
        if child.width() == width {
            return child;
        }
        if let BitvecExpr::Literal { value, .. } = &*child {
            return BitvecExpr::literal(*value, width);
        }
        Arc::new(BitvecExpr::ZeroExtend { child, width })
    }

    pub fn sign_extend(child: Arc<BitvecExpr>, width: u32) -> Arc<BitvecExpr> {
        if child.width() == width {
            return child;
        }
        Arc::new(BitvecExpr::SignExtend { child, width })
    }
}

fn le_bytes_to_u128(bytes: &[u8]) -> u128 {
    let mut v = 0u128;
    for (i, b) in bytes.iter().enumerate().take(16) {
        v |= (*b as u128) << (8 * i);
    }
    v
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum EvalError {
    #[error("unbound symbol sym{0}")]
    UnboundSymbol(SymbolId),
    #[error("division by zero")]
    DivisionByZero,
    #[error("expression width exceeds 128 bits")]
    WidthOverflow,
}

fn eval_u128(
    expr: &BitvecExpr,
    bindings: &BTreeMap<SymbolId, u64>,
) -> Result<(u128, u32), EvalError> {
    match expr {
        BitvecExpr::Literal { value, width } => Ok((*value & mask(*width), *width)),
        BitvecExpr::Symbol { id, width } => {
            let v = bindings.get(id).ok_or(EvalError::UnboundSymbol(*id))?;
            Ok(((*v as u128) & mask(*width), *width))
        }
        BitvecExpr::Unary { op, child } => {
            let (v, w) = eval_u128(child, bindings)?;
            let m = mask(w);
            Ok(match op {
                UnOp::Neg => (v.wrapping_neg() & m, w),
                UnOp::Not => (!v & m, w),
                UnOp::BoolNegate => (u128::from(v == 0), 1),
                UnOp::Popcount => (v.count_ones() as u128, w),
            })
        }
        BitvecExpr::Binary { op, left, right } => {
            let (a, w) = eval_u128(left, bindings)?;
            let (b, _) = eval_u128(right, bindings)?;
            let m = mask(w);
            let sa = to_signed(a, w);
            let bit = |c: bool| (u128::from(c), 1);
            Ok(match op {
                BinOp::Add => (a.wrapping_add(b) & m, w),
                BinOp::Sub => (a.wrapping_sub(b) & m, w),
                BinOp::Mult => (a.wrapping_mul(b) & m, w),
                BinOp::Div => {
                    if b == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    (a / b, w)
                }
                BinOp::Rem => {
                    if b == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    (a % b, w)
                }
                BinOp::SDiv => {
                    if b == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    ((sa.wrapping_div(to_signed(b, w))) as u128 & m, w)
                }
                BinOp::SRem => {
                    if b == 0 {
                        return Err(EvalError::DivisionByZero);
                    }
                    ((sa.wrapping_rem(to_signed(b, w))) as u128 & m, w)
                }
                BinOp::And => (a & b, w),
                BinOp::Or => (a | b, w),
                BinOp::Xor => (a ^ b, w),
                BinOp::Shl => {
                    if b >= w as u128 {
                        (0, w)
                    } else {
                        (a.wrapping_shl(b as u32) & m, w)
                    }
                }
                BinOp::Lshr => {
                    if b >= w as u128 {
                        (0, w)
                    } else {
                        (a.wrapping_shr(b as u32), w)
                    }
                }
                BinOp::Ashr => {
                    if b >= w as u128 {
                        (if sign_bit(a, w) { m } else { 0 }, w)
                    } else {
                        ((sa >> (b as u32)) as u128 & m, w)
                    }
                }
                BinOp::Equal => bit(a == b),
                BinOp::NotEqual => bit(a != b),
                BinOp::ULess => bit(a < b),
                BinOp::SLess => bit(sa < to_signed(b, w)),
                BinOp::ULessEq => bit(a <= b),
                BinOp::SLessEq => bit(sa <= to_signed(b, w)),
                BinOp::Carry => {
                    if w >= 128 {
                        bit(a.checked_add(b).is_none())
                    } else {
                        bit(((a + b) >> w) != 0)
                    }
                }
                BinOp::SCarry => {
                    let r = a.wrapping_add(b) & m;
                    bit(sign_bit(a, w) == sign_bit(b, w) && sign_bit(r, w) != sign_bit(a, w))
                }
                BinOp::SBorrow => {
                    let r = a.wrapping_sub(b) & m;
                    bit(sign_bit(a, w) != sign_bit(b, w) && sign_bit(r, w) != sign_bit(a, w))
                }
                BinOp::BoolAnd => bit(a != 0 && b != 0),
                BinOp::BoolOr => bit(a != 0 || b != 0),
                BinOp::BoolXor => bit((a != 0) ^ (b != 0)),
            })
        }
        BitvecExpr::Extract {
            child,
            low_byte,
            width,
        } => {
            let (v, _) = eval_u128(child, bindings)?;
            Ok(((v >> (low_byte * 8)) & mask(*width), *width))
        }
        BitvecExpr::Concat { high, low } => {
            let (hv, hw) = eval_u128(high, bindings)?;
            let (lv, lw) = eval_u128(low, bindings)?;
            if hw + lw > 128 {
                return Err(EvalError::WidthOverflow);
            }
            Ok(((hv << lw) | lv, hw + lw))
        }
        BitvecExpr::ZeroExtend { child, width } => {
            let (v, _) = eval_u128(child, bindings)?;
            Ok((v & mask(*width), *width))
        }
        BitvecExpr::SignExtend { child, width } => {
            let (v, w) = eval_u128(child, bindings)?;
            Ok(((to_signed(v, w) as u128) & mask(*width), *width))
        }
        BitvecExpr::IfThenElse {
            cond,
            then_expr,
            else_expr,
        } => {
            let (c, _) = eval_u128(cond, bindings)?;
            if c != 0 {
                eval_u128(then_expr, bindings)
            } else {
                eval_u128(else_expr, bindings)
            }
        }
    }
}

/// Evaluates an expression under concrete bindings, returning little-endian
/// bytes of length ceil(width/8).
pub fn eval_concrete(
    expr: &BitvecExpr,
    bindings: &BTreeMap<SymbolId, u64>,
) -> Result<Vec<u8>, EvalError> {
    let (v, w) = eval_u128(expr, bindings)?;
    let nbytes = ((w + 7) / 8) as usize;
    Ok((0..nbytes).map(|i| (v >> (8 * i)) as u8).collect())
}

/// Evaluates to a u128, masked to the expression width.
pub fn eval_to_u128(
    expr: &BitvecExpr,
    bindings: &BTreeMap<SymbolId, u64>,
) -> Result<u128, EvalError> {
    eval_u128(expr, bindings).map(|(v, _)| v)
}

/// Collects every symbol (with its width) appearing in the expression.
pub fn collect_symbols(expr: &BitvecExpr, out: &mut BTreeMap<SymbolId, u32>) {
    match expr {
        BitvecExpr::Literal { .. } => {}
        BitvecExpr::Symbol { id, width } => {
            out.insert(*id, *width);
        }
        BitvecExpr::Unary { child, .. } => collect_symbols(child, out),
        BitvecExpr::Binary { left, right, .. } => {
            collect_symbols(left, out);
            collect_symbols(right, out);
        }
        BitvecExpr::Extract { child, .. }
        | BitvecExpr::ZeroExtend { child, .. }
        | BitvecExpr::SignExtend { child, .. } => collect_symbols(child, out),
        BitvecExpr::Concat { high, low } => {
            collect_symbols(high, out);
            collect_symbols(low, out);
        }
        BitvecExpr::IfThenElse {
            cond,
            then_expr,
            else_expr,
        } => {
            collect_symbols(cond, out);
            collect_symbols(then_expr, out);
            collect_symbols(else_expr, out);
        }
    }
}

/// Lowest symbol id in the expression, used for rendering symbolic operands.
pub fn first_symbol(expr: &BitvecExpr) -> Option<SymbolId> {
    let mut syms = BTreeMap::new();
    collect_symbols(expr, &mut syms);
    syms.keys().next().copied()
}

/// Paired concrete bytes (little-endian) and optional symbolic expression
/// of width `bytes.len() * 8`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConcolicValue {
    pub bytes: Vec<u8>,
    pub sym: Option<Arc<BitvecExpr>>,
}

impl ConcolicValue {
    pub fn concrete(value: u128, size: u32) -> ConcolicValue {
        ConcolicValue {
            bytes: (0..size).map(|i| (value >> (8 * i)) as u8).collect(),
            sym: None,
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> ConcolicValue {
        ConcolicValue { bytes, sym: None }
    }

    pub fn symbolic(value: u128, size: u32, expr: Arc<BitvecExpr>) -> ConcolicValue {
        debug_assert_eq!(expr.width(), size * 8);
        ConcolicValue {
            bytes: (0..size).map(|i| (value >> (8 * i)) as u8).collect(),
            sym: Some(expr),
        }
    }

    pub fn size(&self) -> u32 {
        self.bytes.len() as u32
    }

    pub fn as_u128(&self) -> u128 {
        le_bytes_to_u128(&self.bytes)
    }

    pub fn as_u64(&self) -> u64 {
        self.as_u128() as u64
    }

    pub fn is_symbolic(&self) -> bool {
        self.sym.is_some()
    }

    /// The symbolic expression when present, otherwise a literal of the
    /// concrete bytes.
    pub fn expr(&self) -> Arc<BitvecExpr> {
        match &self.sym {
            Some(e) => e.clone(),
            None => BitvecExpr::literal(self.as_u128(), self.size() * 8),
        }
    }
}

/// Expression for byte `index` of a wider value.
pub fn byte_expr(whole: &Arc<BitvecExpr>, index: u32) -> Arc<BitvecExpr> {
    if whole.width() == 8 && index == 0 {
        return whole.clone();
    }
    if let BitvecExpr::Literal { value, .. } = &**whole {
        return BitvecExpr::literal(value >> (8 * index), 8);
    }
    Arc::new(BitvecExpr::Extract {
        child: whole.clone(),
        low_byte: index,
        width: 8,
    })
}

/// Reassembles a value from per-byte cells (little-endian order). Byte
/// expressions that are contiguous extracts of one shared parent collapse
/// back to that parent.
pub fn combine_bytes(cells: &[(u8, Option<Arc<BitvecExpr>>)]) -> ConcolicValue {
    let bytes: Vec<u8> = cells.iter().map(|(b, _)| *b).collect();
    if cells.iter().all(|(_, s)| s.is_none()) {
        return ConcolicValue { bytes, sym: None };
    }
    if cells.len() == 1 {
        let sym = cells[0].1.clone();
        return ConcolicValue { bytes, sym };
    }
    // Collapse Extract(e, 0..n) chains over the same parent.
    if let Some((_, Some(first))) = cells.first() {
        if let BitvecExpr::Extract {
            child: parent,
            low_byte: 0,
            width: 8,
        } = &**first
        {
            if parent.width() == cells.len() as u32 * 8 {
                let all_match = cells.iter().enumerate().all(|(i, (_, s))| match s {
                    Some(e) => matches!(
                        &**e,
                        BitvecExpr::Extract { child, low_byte, width: 8 }
                            if Arc::ptr_eq(child, parent) && *low_byte == i as u32
                    ),
                    None => false,
                });
                if all_match {
                    return ConcolicValue {
                        bytes,
                        sym: Some(parent.clone()),
                    };
                }
            }
        }
    }
    let term = |i: usize| -> Arc<BitvecExpr> {
        match &cells[i].1 {
            Some(e) => e.clone(),
            None => BitvecExpr::literal(cells[i].0 as u128, 8),
        }
    };
    let mut acc = term(cells.len() - 1);
    for i in (0..cells.len() - 1).rev() {
        acc = Arc::new(BitvecExpr::Concat {
            high: acc,
            low: term(i),
        });
    }
    ConcolicValue {
        bytes,
        sym: Some(acc),
    }
}

/// Direction record for one executed symbolic branch.
#[derive(Debug, Clone)]
pub struct PathConstraint {
    /// Width-1 branch condition.
    pub expr: Arc<BitvecExpr>,
    /// (instruction address, op index) of the CBRANCH.
    pub origin: (u64, u32),
    pub taken: bool,
}

impl PathConstraint {
    pub fn holds(&self, bindings: &BTreeMap<SymbolId, u64>) -> Result<bool, EvalError> {
        let v = eval_to_u128(&self.expr, bindings)?;
        Ok((v != 0) == self.taken)
    }

    pub fn negated(&self) -> PathConstraint {
        PathConstraint {
            expr: self.expr.clone(),
            origin: self.origin,
            taken: !self.taken,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lit(v: u128, w: u32) -> Arc<BitvecExpr> {
        BitvecExpr::literal(v, w)
    }

    fn eval1(e: &BitvecExpr) -> Vec<u8> {
        eval_concrete(e, &BTreeMap::new()).unwrap()
    }

    #[test]
    fn literal_evaluates_to_bytes() {
        assert_eq!(eval1(&BitvecExpr::Literal { value: 5, width: 8 }), vec![5]);
    }

    #[test]
    fn add_wraps_modular() {
        let e = BitvecExpr::Binary {
            op: BinOp::Add,
            left: lit(0xFF, 8),
            right: lit(0x01, 8),
        };
        assert_eq!(eval1(&e), vec![0x00]);
    }

    #[test]
    fn sborrow_matches_signed_sub_overflow_table() {
        // Exhaustive 8-bit sweep against an i16-based reference.
        for a in 0u32..256 {
            for b in 0u32..256 {
                let e = BitvecExpr::Binary {
                    op: BinOp::SBorrow,
                    left: lit(a as u128, 8),
                    right: lit(b as u128, 8),
                };
                let got = eval1(&e)[0];
                let sa = a as u8 as i8 as i16;
                let sb = b as u8 as i8 as i16;
                let wide = sa - sb;
                let expect = u8::from(wide < -128 || wide > 127);
                assert_eq!(got, expect, "SBORROW({a:#x},{b:#x})");
            }
        }
        let e = BitvecExpr::Binary {
            op: BinOp::SBorrow,
            left: lit(0x80, 8),
            right: lit(0x01, 8),
        };
        assert_eq!(eval1(&e), vec![0x01]);
    }

    #[test]
    fn unbound_symbol_is_error() {
        let e = BitvecExpr::Symbol { id: 7, width: 8 };
        assert_eq!(
            eval_concrete(&e, &BTreeMap::new()),
            Err(EvalError::UnboundSymbol(7))
        );
    }

    #[test]
    fn symbol_binding_masked_to_width() {
        let e = BitvecExpr::Symbol { id: 0, width: 8 };
        let mut b = BTreeMap::new();
        b.insert(0, 0x1ff_u64);
        assert_eq!(eval_concrete(&e, &b).unwrap(), vec![0xff]);
    }

    #[test]
    fn shifts_beyond_width() {
        let shl = BitvecExpr::Binary {
            op: BinOp::Shl,
            left: lit(0x80, 8),
            right: lit(9, 8),
        };
        assert_eq!(eval1(&shl), vec![0]);
        let ashr = BitvecExpr::Binary {
            op: BinOp::Ashr,
            left: lit(0x80, 8),
            right: lit(9, 8),
        };
        assert_eq!(eval1(&ashr), vec![0xFF]);
    }

    #[test]
    fn concat_extract_roundtrip() {
        let whole = lit(0xAABBCCDD, 32);
        let b0 = byte_expr(&whole, 0);
        assert_eq!(eval1(&b0), vec![0xDD]);
        let cat = BitvecExpr::Concat {
            high: lit(0xAA, 8),
            low: lit(0xBB, 8),
        };
        assert_eq!(eval1(&cat), vec![0xBB, 0xAA]);
    }

    #[test]
    fn combine_bytes_collapses_shared_parent() {
        let sym = BitvecExpr::symbol(3, 32);
        let cells: Vec<_> = (0..4)
            .map(|i| (0u8, Some(byte_expr(&sym, i))))
            .collect();
        let v = combine_bytes(&cells);
        assert!(Arc::ptr_eq(v.sym.as_ref().unwrap(), &sym));
    }

    #[test]
    fn combine_bytes_mixed_builds_concat() {
        let sym = BitvecExpr::symbol(1, 8);
        let cells = vec![(0x2a_u8, None), (0u8, Some(sym))];
        let v = combine_bytes(&cells);
        let mut b = BTreeMap::new();
        b.insert(1, 0x5a_u64);
        assert_eq!(
            eval_concrete(v.sym.as_ref().unwrap(), &b).unwrap(),
            vec![0x2a, 0x5a]
        );
    }

    #[test]
    fn literal_folding_in_constructors() {
        let e = BitvecExpr::binary(BinOp::Add, lit(2, 8), lit(3, 8));
        assert!(matches!(&*e, BitvecExpr::Literal { value: 5, width: 8 }));
    }

    #[test]
    fn path_constraint_holds() {
        let sym = BitvecExpr::symbol(0, 8);
        let c = PathConstraint {
            expr: BitvecExpr::binary(BinOp::Equal, sym, lit(3, 8)),
            origin: (0x10, 0),
            taken: true,
        };
        let mut b = BTreeMap::new();
        b.insert(0, 3u64);
        assert!(c.holds(&b).unwrap());
        b.insert(0, 4u64);
        assert!(!c.holds(&b).unwrap());
        assert!(c.negated().holds(&b).unwrap());
    }
}
