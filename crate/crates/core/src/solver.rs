//! Satisfiability checking for path constraints.
//!
//! Two backends sit behind [`Solver`]: a built-in bounded enumeration that
//! exhaustively tries every assignment when the query holds at most
//! `max_enum_bits` symbolic bits, and an optional external SMT-LIB2 process
//! (e.g. z3) for everything larger. The repository builds and tests fully
//! with the enumeration backend alone.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crate::symbolic::{
    collect_symbols, BinOp, BitvecExpr, EvalError, PathConstraint, SymbolId, UnOp,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SolverVerdict {
    Sat(BTreeMap<SymbolId, u64>),
    Unsat,
    Unknown(String),
}

#[derive(Debug, Clone)]
pub struct SolverConfig {
    /// External SMT solver binary; `None` means enumeration only.
    pub backend: Option<PathBuf>,
    pub backend_args: Vec<String>,
    pub timeout_ms: u64,
    /// Bit budget for the enumeration fallback.
    pub max_enum_bits: u32,
}

impl Default for SolverConfig {
    fn default() -> SolverConfig {
        SolverConfig {
            backend: None,
            backend_args: Vec::new(),
            timeout_ms: 5000,
            max_enum_bits: 20,
        }
    }
}

impl SolverConfig {
    /// Picks up the backend from the `PCODEX_SMT_SOLVER` environment
    /// variable when set.
    pub fn from_env() -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Ok(path) = std::env::var("PCODEX_SMT_SOLVER") {
            if !path.is_empty() {
                if path.contains("z3") {
                    cfg.backend_args = vec!["-in".to_string()];
                }
                cfg.backend = Some(PathBuf::from(path));
            }
        }
        cfg
    }
}

pub struct Solver {
    pub cfg: SolverConfig,
}

impl Solver {
    pub fn new(cfg: SolverConfig) -> Solver {
        Solver { cfg }
    }

    /// Checks the conjunction of `constraints` (each in its recorded
    /// direction) plus an optional extra expression required nonzero.
    pub fn check_sat(
        &self,
        constraints: &[PathConstraint],
        extra: Option<&Arc<BitvecExpr>>,
    ) -> SolverVerdict {
        let mut symbols: BTreeMap<SymbolId, u32> = BTreeMap::new();
        for c in constraints {
            collect_symbols(&c.expr, &mut symbols);
        }
        if let Some(e) = extra {
            collect_symbols(e, &mut symbols);
        }
        let total_bits: u32 = symbols.values().sum();
        if total_bits <= self.cfg.max_enum_bits {
            return enumerate(constraints, extra, &symbols);
        }
        if self.cfg.backend.is_some() {
            return self.check_external(constraints, extra, &symbols);
        }
        SolverVerdict::Unknown(format!(
            "{total_bits} symbolic bits exceed the {}-bit enumeration budget and no external solver is configured",
            self.cfg.max_enum_bits
        ))
    }

    fn check_external(
        &self,
        constraints: &[PathConstraint],
        extra: Option<&Arc<BitvecExpr>>,
        symbols: &BTreeMap<SymbolId, u32>,
    ) -> SolverVerdict {
        let script = build_smtlib(constraints, extra, symbols);
        let backend = self.cfg.backend.as_ref().unwrap();
        let mut child = match Command::new(backend)
            .args(&self.cfg.backend_args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
        {
            Ok(c) => c,
            Err(e) => return SolverVerdict::Unknown(format!("cannot spawn {backend:?}: {e}")),
        };
        if let Some(mut stdin) = child.stdin.take() {
            let _ = stdin.write_all(script.as_bytes());
        }
        let reader = {
            let stdout = child.stdout.take().unwrap();
            std::thread::spawn(move || {
                use std::io::Read;
                let mut out = String::new();
                let mut r = stdout;
                let _ = r.read_to_string(&mut out);
                out
            })
        };
        let deadline = Instant::now() + Duration::from_millis(self.cfg.timeout_ms);
        loop {
            match child.try_wait() {
                Ok(Some(_)) => break,
                Ok(None) => {
                    if Instant::now() >= deadline {
                        let _ = child.kill();
                        let _ = child.wait();
                        return SolverVerdict::Unknown("solver timeout".into());
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return SolverVerdict::Unknown(format!("solver wait failed: {e}")),
            }
        }
        let output = reader.join().unwrap_or_default();
        parse_smt_response(&output, symbols)
    }
}

fn enumerate(
    constraints: &[PathConstraint],
    extra: Option<&Arc<BitvecExpr>>,
    symbols: &BTreeMap<SymbolId, u32>,
) -> SolverVerdict {
    let ids: Vec<SymbolId> = symbols.keys().copied().collect();
    let widths: Vec<u32> = symbols.values().copied().collect();
    let mut values = vec![0u64; ids.len()];
    loop {
        let model: BTreeMap<SymbolId, u64> =
            ids.iter().copied().zip(values.iter().copied()).collect();
        if assignment_satisfies(constraints, extra, &model) {
            return SolverVerdict::Sat(model);
        }
        // Odometer increment over the per-symbol value ranges.
        let mut i = 0;
        loop {
            if i == values.len() {
                return SolverVerdict::Unsat;
            }
            values[i] += 1;
            if values[i] < (1u64 << widths[i]) {
                break;
            }
            values[i] = 0;
            i += 1;
        }
    }
}

fn assignment_satisfies(
    constraints: &[PathConstraint],
    extra: Option<&Arc<BitvecExpr>>,
    model: &BTreeMap<SymbolId, u64>,
) -> bool {
    for c in constraints {
        match c.holds(model) {
            Ok(true) => {}
            // Division by zero under this assignment cannot satisfy the path.
            Ok(false) | Err(_) => return false,
        }
    }
    if let Some(e) = extra {
        match crate::symbolic::eval_to_u128(e, model) {
            Ok(v) => v != 0,
            Err(_) => false,
        }
    } else {
        true
    }
}

/// True iff every constraint evaluates to its recorded direction under the
/// model. Errors on symbols missing from the model.
pub fn model_check(
    constraints: &[PathConstraint],
    model: &BTreeMap<SymbolId, u64>,
) -> Result<bool, EvalError> {
    for c in constraints {
        if !c.holds(model)? {
            return Ok(false);
        }
    }
    Ok(true)
}

// --- SMT-LIB2 translation -------------------------------------------------

fn smt_zero(width: u32) -> String {
    format!("(_ bv0 {width})")
}

fn bool_to_bv1(b: String) -> String {
    format!("(ite {b} #b1 #b0)")
}

fn top_bit(t: &str, w: u32) -> String {
    format!("((_ extract {} {}) {t})", w - 1, w - 1)
}

fn smt_term(expr: &BitvecExpr) -> String {
    match expr {
        BitvecExpr::Literal { value, width } => format!("(_ bv{value} {width})"),
        BitvecExpr::Symbol { id, .. } => format!("s{id}"),
        BitvecExpr::Unary { op, child } => {
            let t = smt_term(child);
            let w = child.width();
            match op {
                UnOp::Neg => format!("(bvneg {t})"),
                UnOp::Not => format!("(bvnot {t})"),
                UnOp::BoolNegate => bool_to_bv1(format!("(= {t} {})", smt_zero(w))),
                UnOp::Popcount => {
                    let mut acc = format!("((_ zero_extend {}) ((_ extract 0 0) {t}))", w - 1);
                    for i in 1..w {
                        let bit = format!("((_ zero_extend {}) ((_ extract {i} {i}) {t}))", w - 1);
                        acc = format!("(bvadd {acc} {bit})");
                    }
                    acc
                }
            }
        }
        BitvecExpr::Binary { op, left, right } => {
            let a = smt_term(left);
            let b = smt_term(right);
            let w = left.width();
            let bw = right.width();
            let simple = |name: &str| format!("({name} {a} {b})");
            let cmp = |name: &str| bool_to_bv1(format!("({name} {a} {b})"));
            let nonzero = |t: &str, tw: u32| format!("(distinct {t} {})", smt_zero(tw));
            match op {
                BinOp::Add => simple("bvadd"),
                BinOp::Sub => simple("bvsub"),
                BinOp::Mult => simple("bvmul"),
                BinOp::Div => simple("bvudiv"),
                BinOp::SDiv => simple("bvsdiv"),
                BinOp::Rem => simple("bvurem"),
                BinOp::SRem => simple("bvsrem"),
                BinOp::And => simple("bvand"),
                BinOp::Or => simple("bvor"),
                BinOp::Xor => simple("bvxor"),
                BinOp::Shl | BinOp::Lshr | BinOp::Ashr => {
                    let name = match op {
                        BinOp::Shl => "bvshl",
                        BinOp::Lshr => "bvlshr",
                        _ => "bvashr",
                    };
                    let amt = match bw.cmp(&w) {
                        std::cmp::Ordering::Equal => b.clone(),
                        std::cmp::Ordering::Less => {
                            format!("((_ zero_extend {}) {b})", w - bw)
                        }
                        std::cmp::Ordering::Greater => {
                            // Saturate oversized amounts; the shift op itself
                            // handles >= width correctly at equal widths.
                            format!(
                                "(ite (bvuge {b} (_ bv{w} {bw})) (_ bv{w} {w}) ((_ extract {} 0) {b}))",
                                w - 1
                            )
                        }
                    };
                    format!("({name} {a} {amt})")
                }
                BinOp::Equal => cmp("="),
                BinOp::NotEqual => bool_to_bv1(format!("(distinct {a} {b})")),
                BinOp::ULess => cmp("bvult"),
                BinOp::SLess => cmp("bvslt"),
                BinOp::ULessEq => cmp("bvule"),
                BinOp::SLessEq => cmp("bvsle"),
                BinOp::Carry => {
                    let wide = format!(
                        "(bvadd ((_ zero_extend 1) {a}) ((_ zero_extend 1) {b}))"
                    );
                    format!("((_ extract {w} {w}) {wide})")
                }
                BinOp::SCarry | BinOp::SBorrow => {
                    let r = if *op == BinOp::SCarry {
                        format!("(bvadd {a} {b})")
                    } else {
                        format!("(bvsub {a} {b})")
                    };
                    let sa = top_bit(&a, w);
                    let sb = top_bit(&b, w);
                    let sr = top_bit(&r, w);
                    let same_in = if *op == BinOp::SCarry {
                        format!("(= {sa} {sb})")
                    } else {
                        format!("(distinct {sa} {sb})")
                    };
                    bool_to_bv1(format!("(and {same_in} (distinct {sr} {sa}))"))
                }
                BinOp::BoolAnd => {
                    bool_to_bv1(format!("(and {} {})", nonzero(&a, w), nonzero(&b, bw)))
                }
                BinOp::BoolOr => {
                    bool_to_bv1(format!("(or {} {})", nonzero(&a, w), nonzero(&b, bw)))
                }
                BinOp::BoolXor => {
                    bool_to_bv1(format!("(xor {} {})", nonzero(&a, w), nonzero(&b, bw)))
                }
            }
        }
        BitvecExpr::Extract {
            child,
            low_byte,
            width,
        } => {
            let lo = low_byte * 8;
            format!("((_ extract {} {lo}) {})", lo + width - 1, smt_term(child))
        }
        BitvecExpr::Concat { high, low } => {
            format!("(concat {} {})", smt_term(high), smt_term(low))
        }
        BitvecExpr::ZeroExtend { child, width } => {
            format!("((_ zero_extend {}) {})", width - child.width(), smt_term(child))
        }
        BitvecExpr::SignExtend { child, width } => {
            format!("((_ sign_extend {}) {})", width - child.width(), smt_term(child))
        }
        BitvecExpr::IfThenElse {
            cond,
            then_expr,
            else_expr,
        } => format!(
            "(ite (= {} #b1) {} {})",
            smt_term(cond),
            smt_term(then_expr),
            smt_term(else_expr)
        ),
    }
}

fn build_smtlib(
    constraints: &[PathConstraint],
    extra: Option<&Arc<BitvecExpr>>,
    symbols: &BTreeMap<SymbolId, u32>,
) -> String {
    let mut s = String::new();
    s.push_str("(set-logic QF_BV)\n");
    for (id, width) in symbols {
        s.push_str(&format!("(declare-const s{id} (_ BitVec {width}))\n"));
    }
    for c in constraints {
        let expect = if c.taken { "#b1" } else { "#b0" };
        s.push_str(&format!("(assert (= {} {expect}))\n", smt_term(&c.expr)));
    }
    if let Some(e) = extra {
        s.push_str(&format!(
            "(assert (distinct {} {}))\n",
            smt_term(e),
            smt_zero(e.width())
        ));
    }
    s.push_str("(check-sat)\n");
    if !symbols.is_empty() {
        let names: Vec<String> = symbols.keys().map(|id| format!("s{id}")).collect();
        s.push_str(&format!("(get-value ({}))\n", names.join(" ")));
    }
    s
}

fn parse_smt_value(tok: &str) -> Option<u64> {
    if let Some(hex) = tok.strip_prefix("#x") {
        u64::from_str_radix(hex, 16).ok()
    } else if let Some(bits) = tok.strip_prefix("#b") {
        u64::from_str_radix(bits, 2).ok()
    } else {
        tok.parse().ok()
    }
}

fn parse_smt_response(output: &str, symbols: &BTreeMap<SymbolId, u32>) -> SolverVerdict {
    let mut lines = output.lines();
    let verdict = loop {
        match lines.next() {
            Some(l) if l.trim() == "sat" => break "sat",
            Some(l) if l.trim() == "unsat" => return SolverVerdict::Unsat,
            Some(l) if l.trim() == "unknown" => {
                return SolverVerdict::Unknown("solver returned unknown".into())
            }
            Some(_) => continue,
            None => return SolverVerdict::Unknown("no verdict in solver output".into()),
        }
    };
    debug_assert_eq!(verdict, "sat");
    let rest: String = lines.collect::<Vec<_>>().join(" ");
    let toks: Vec<String> = rest
        .replace('(', " ")
        .replace(')', " ")
        .split_whitespace()
        .map(|s| s.to_string())
        .collect();
    let mut model = BTreeMap::new();
    let mut i = 0;
    while i + 1 < toks.len() {
        if let Some(id_str) = toks[i].strip_prefix('s') {
            if let Ok(id) = id_str.parse::<SymbolId>() {
                if symbols.contains_key(&id) {
                    // Value may be a plain token or `_ bvN W` expanded form.
                    let val = if toks[i + 1] == "_" && i + 2 < toks.len() {
                        toks[i + 2].strip_prefix("bv").and_then(|v| v.parse().ok())
                    } else {
                        parse_smt_value(&toks[i + 1])
                    };
                    if let Some(v) = val {
                        model.insert(id, v);
                    }
                }
            }
        }
        i += 1;
    }
    for id in symbols.keys() {
        if !model.contains_key(id) {
            return SolverVerdict::Unknown(format!("solver model missing s{id}"));
        }
    }
    SolverVerdict::Sat(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::symbolic::BitvecExpr as E;

    fn eq_constraint(sym: Arc<BitvecExpr>, value: u128, width: u32, taken: bool) -> PathConstraint {
        PathConstraint {
            expr: E::binary(BinOp::Equal, sym, E::literal(value, width)),
            origin: (0, 0),
            taken,
        }
    }

    #[test]
    fn sat_with_model() {
        let x = E::symbol(0, 8);
        let s = Solver::new(SolverConfig::default());
        match s.check_sat(&[eq_constraint(x, 3, 8, true)], None) {
            SolverVerdict::Sat(m) => assert_eq!(m.get(&0), Some(&3)),
            other => panic!("expected Sat, got {other:?}"),
        }
    }

    #[test]
    fn contradiction_is_unsat() {
        let x = E::symbol(0, 8);
        let cs = vec![
            eq_constraint(x.clone(), 3, 8, true),
            eq_constraint(x, 4, 8, true),
        ];
        let s = Solver::new(SolverConfig::default());
        assert_eq!(s.check_sat(&cs, None), SolverVerdict::Unsat);
    }

    #[test]
    fn times_two_has_two_models() {
        // x*2 == 10 at width 8: both 5 and 133 are models.
        let x = E::symbol(0, 8);
        let lhs = E::binary(BinOp::Mult, x, E::literal(2, 8));
        let c = PathConstraint {
            expr: E::binary(BinOp::Equal, lhs, E::literal(10, 8)),
            origin: (0, 0),
            taken: true,
        };
        let s = Solver::new(SolverConfig::default());
        match s.check_sat(std::slice::from_ref(&c), None) {
            SolverVerdict::Sat(m) => {
                let v = m[&0];
                assert!(v == 5 || v == 133, "unexpected model {v}");
                assert!(model_check(&[c], &m).unwrap());
            }
            other => panic!("expected Sat, got {other:?}"),
        }
    }

    #[test]
    fn over_budget_without_backend_is_unknown() {
        let x = E::symbol(0, 64);
        let s = Solver::new(SolverConfig::default());
        match s.check_sat(&[eq_constraint(x, 3, 64, true)], None) {
            SolverVerdict::Unknown(_) => {}
            other => panic!("expected Unknown, got {other:?}"),
        }
    }

    #[test]
    fn no_symbols_evaluates_directly() {
        let t = PathConstraint {
            expr: E::literal(1, 1),
            origin: (0, 0),
            taken: true,
        };
        let f = t.negated();
        let s = Solver::new(SolverConfig::default());
        assert!(matches!(s.check_sat(&[t.clone()], None), SolverVerdict::Sat(_)));
        assert_eq!(s.check_sat(&[f], None), SolverVerdict::Unsat);
        assert!(matches!(s.check_sat(&[], None), SolverVerdict::Sat(_)));
    }

    #[test]
    fn model_check_examples() {
        let x = E::symbol(0, 8);
        let c = eq_constraint(x, 3, 8, true);
        let mut m = BTreeMap::new();
        m.insert(0u32, 3u64);
        assert!(model_check(std::slice::from_ref(&c), &m).unwrap());
        m.insert(0, 4);
        assert!(!model_check(std::slice::from_ref(&c), &m).unwrap());
        assert!(model_check(std::slice::from_ref(&c), &BTreeMap::new()).is_err());
    }

    #[test]
    fn smtlib_script_shape() {
        let x = E::symbol(2, 8);
        let c = eq_constraint(x, 0x2a, 8, true);
        let mut syms = BTreeMap::new();
        syms.insert(2u32, 8u32);
        let script = build_smtlib(&[c], None, &syms);
        assert!(script.contains("(declare-const s2 (_ BitVec 8))"));
        assert!(script.contains("(check-sat)"));
        assert!(script.contains("(get-value (s2))"));
    }

    #[test]
    fn smt_response_parsing() {
        let mut syms = BTreeMap::new();
        syms.insert(0u32, 8u32);
        match parse_smt_response("sat\n((s0 #x2a))\n", &syms) {
            SolverVerdict::Sat(m) => assert_eq!(m[&0], 0x2a),
            other => panic!("{other:?}"),
        }
        match parse_smt_response("sat\n((s0 (_ bv42 8)))\n", &syms) {
            SolverVerdict::Sat(m) => assert_eq!(m[&0], 42),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse_smt_response("unsat\n", &syms), SolverVerdict::Unsat);
    }
}
