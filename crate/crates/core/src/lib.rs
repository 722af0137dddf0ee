//! Concolic execution engine for low-level P-Code listings.
//!
//! The engine interprets textual P-Code dumps of x86-64 binaries, tracking
//! concrete bytes alongside symbolic bitvector expressions, and detects
//! runtime-panic paths in TinyGo-compiled Go programs as well as generic
//! memory-safety violations in C programs.

pub mod artifacts;
pub mod cli;
pub mod detection;
pub mod emulator;
pub mod model;
pub mod parser;
pub mod solver;
pub mod state;
pub mod symbolic;
