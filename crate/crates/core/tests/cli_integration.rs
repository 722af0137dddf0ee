//! Exit-code and artifact behavior of the installed binary.

use std::path::PathBuf;
use std::process::Command;

use tempfile::TempDir;

fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../fixtures")
        .join(rel)
}

fn pcodex() -> Command {
    Command::new(env!("CARGO_BIN_EXE_pcodex"))
}

#[test]
fn clean_run_exits_zero() {
    let out = TempDir::new().unwrap();
    let status = pcodex()
        .arg(fixture("c/clean.pcode"))
        .args(["--c-invariants", "--out"])
        .arg(out.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{status:?}");
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(stdout.contains("clean: 0 findings"), "{stdout}");
}

#[test]
fn finding_exits_one_and_reports() {
    let out = TempDir::new().unwrap();
    let status = pcodex()
        .arg(fixture("go/nil_map.pcode"))
        .args(["--xrefs"])
        .arg(fixture("go/nil_map_xrefs.txt"))
        .args(["--out"])
        .arg(out.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&status.stdout);
    assert!(
        stdout.contains("Nil Map Assignment at 0x2034c5: add an entry to a nil map"),
        "{stdout}"
    );
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.path().join("out/report.json")).unwrap())
            .unwrap();
    assert_eq!(report["findings"][0]["address"], 0x2034c5);
    assert_eq!(report["exit_status"], "findings");
}

#[test]
fn usage_error_exits_two() {
    let status = pcodex().args(["--strategy", "s1"]).output().unwrap();
    assert_eq!(status.status.code(), Some(2), "missing listing argument");

    let out = TempDir::new().unwrap();
    let status = pcodex()
        .arg(fixture("c/clean.pcode"))
        .args(["--strategy", "s3", "--out"])
        .arg(out.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2), "s3 without --func");
}

#[test]
fn fault_exits_three() {
    // A listing whose only instruction branches into unmapped memory.
    let dir = TempDir::new().unwrap();
    let listing = dir.path().join("bad.pcode");
    std::fs::write(&listing, "0x1000\nBRANCH (ram,0x999999,8)\n").unwrap();
    let status = pcodex()
        .arg(&listing)
        .args(["--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(3), "{status:?}");
}

#[test]
fn jump_table_dispatch_follows_index() {
    let out = TempDir::new().unwrap();
    let status = pcodex()
        .arg(fixture("misc/switch.pcode"))
        .args(["--jump-tables"])
        .arg(fixture("misc/jump_table.json"))
        .args(["--out"])
        .arg(out.path().join("out"))
        .output()
        .unwrap();
    // rax = 1 selects the second label, which exits cleanly.
    assert_eq!(status.status.code(), Some(0), "{status:?}");
    let log = std::fs::read_to_string(out.path().join("out/execution_log.txt")).unwrap();
    assert!(log.contains("0x401200/0"), "second label not executed:\n{log}");
    assert!(!log.contains("0x401100/0"), "wrong label executed:\n{log}");
}

#[test]
fn strict_mode_rejects_unknown_ops_leniency_warns() {
    let dir = TempDir::new().unwrap();
    let listing = dir.path().join("mixed.pcode");
    std::fs::write(
        &listing,
        "0x1000\n(register,0x0,8) = FROBNICATE (register,0x0,8) , (register,0x8,8)\n\
         (register,0x0,8) = COPY (const,0x3c,8)\n\
         (register,0x38,8) = COPY (const,0x0,8)\nCALLOTHER (const,0x0,4) \"syscall\"\n",
    )
    .unwrap();
    let strict = pcodex()
        .arg(&listing)
        .args(["--strict", "--out"])
        .arg(dir.path().join("out_strict"))
        .output()
        .unwrap();
    assert_eq!(strict.status.code(), Some(3), "{strict:?}");

    let lenient = pcodex()
        .arg(&listing)
        .args(["--out"])
        .arg(dir.path().join("out_lenient"))
        .output()
        .unwrap();
    assert_eq!(lenient.status.code(), Some(0), "{lenient:?}");
}

#[test]
fn s3_function_entry_run() {
    let out = TempDir::new().unwrap();
    // Entry analysis of the symbolic guard's comparison block: seed the
    // loaded byte via the argument registers instead of stdin by starting
    // at the guard with --func.
    let status = pcodex()
        .arg(fixture("go/nil_map.pcode"))
        .args(["--xrefs"])
        .arg(fixture("go/nil_map_xrefs.txt"))
        .args(["--strategy", "s3", "--func", "0x201000:2", "--seed", "3", "--out"])
        .arg(out.path().join("out"))
        .output()
        .unwrap();
    // The nil-map path is unconditional from the entry, so the panic site
    // is reached regardless of the symbolic arguments.
    assert_eq!(status.status.code(), Some(1), "{status:?}");
}
