use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use tempfile::TempDir;

fn kyshuf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kyshuf")).args(args).output().expect("spawn kyshuf")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn kat_passes_and_corrupt_key_fails() {
    let ok = kyshuf(&["kat", "--param", "kyber512", "--count", "20", "--seed", "7"]);
    assert_eq!(code(&ok), 0, "{}", stdout(&ok));
    assert!(stdout(&ok).contains("master seed: 0x7"));
    let bad = kyshuf(&["kat", "--param", "kyber512", "--count", "20", "--seed", "7", "--corrupt-key"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn rpg_gen_prints_permutations_and_rejects_zero_seed() {
    let o = kyshuf(&["rpg", "gen", "--seed", "1", "--count", "2"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let perms: Vec<&str> = text.lines().filter(|l| !l.starts_with("lfsr seed")).collect();
    assert_eq!(perms.len(), 2);
    assert_ne!(perms[0], perms[1]);
    assert_eq!(code(&kyshuf(&["rpg", "gen", "--seed", "0"])), 2);
}

#[test]
fn rpg_audit_writes_histogram() {
    let dir = TempDir::new().unwrap();
    let out = p(&dir, "hist.csv");
    let o = kyshuf(&["rpg", "audit", "--trials", "500", "--seed", "3", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 65);
    assert!(rows[0].starts_with("position,v00,v01"));
    // Every position receives exactly one value per trial.
    for row in &rows[1..] {
        let total: u64 = row.split(',').skip(1).map(|c| c.parse::<u64>().unwrap()).sum();
        assert_eq!(total, 500);
    }
}

#[test]
fn noiseless_simulation_then_cpa_recovers_the_key() {
    let dir = TempDir::new().unwrap();
    let (key, traces, out, curve) = (p(&dir, "k.skky"), p(&dir, "t.sktl"), p(&dir, "cpa.csv"), p(&dir, "curve.csv"));
    assert_eq!(code(&kyshuf(&["keygen", "--param", "kyber512", "--seed", "5", "--out", s(&key)])), 0);
    let sim = kyshuf(&[
        "sim", "traces", "--param", "kyber512", "--seed", "5", "--traces", "200", "--noise-sigma", "0", "--key", s(&key),
        "--out", s(&traces),
    ]);
    assert_eq!(code(&sim), 0, "{}", stdout(&sim));
    let cpa = kyshuf(&[
        "attack", "cpa", "--in", s(&traces), "--coeffs", "4", "--key", s(&key), "--out", s(&out), "--curve", s(&curve),
    ]);
    assert_eq!(code(&cpa), 0);
    assert!(stdout(&cpa).contains("success: true"), "{}", stdout(&cpa));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("coeff,rank,hypothesis,score"));
    assert!(std::fs::read_to_string(&curve).unwrap().starts_with("sample,rho_best,rho_truth"));

    let svg = p(&dir, "curve.svg");
    assert_eq!(code(&kyshuf(&["report", "--in", s(&curve), "--out", s(&svg)])), 0);
    assert!(std::fs::read_to_string(&svg).unwrap().contains("<svg"));
}

#[test]
fn tvla_flags_unprotected_fixed_vs_random() {
    let dir = TempDir::new().unwrap();
    let (f, r, out) = (p(&dir, "f.sktl"), p(&dir, "r.sktl"), p(&dir, "t.csv"));
    for (class, path) in [("--fixed", &f), ("--random", &r)] {
        let o = kyshuf(&["sim", "traces", "--seed", "9", "--traces", "500", class, "--out", s(path)]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
    }
    let o = kyshuf(&["attack", "tvla", "--fixed", s(&f), "--random", s(&r), "--out", s(&out)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("LEAK"), "{}", stdout(&o));
    let csv = std::fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("sample,t"));
    assert_eq!(csv.lines().count(), 1 + 128);

    let svg = p(&dir, "t.svg");
    assert_eq!(code(&kyshuf(&["report", "--in", s(&out), "--out", s(&svg)])), 0);
}

#[test]
fn format_errors_exit_3_and_param_mismatch_exits_4() {
    let dir = TempDir::new().unwrap();
    let empty = p(&dir, "empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&kyshuf(&["report", "--in", s(&empty), "--out", s(&p(&dir, "e.svg"))])), 3);
    let header_only = p(&dir, "h.csv");
    std::fs::write(&header_only, "sample,t\n").unwrap();
    assert_eq!(code(&kyshuf(&["report", "--in", s(&header_only), "--out", s(&p(&dir, "h.svg"))])), 3);

    let junk = p(&dir, "junk.sktl");
    std::fs::write(&junk, b"NOPE0000000000000000000000").unwrap();
    assert_eq!(code(&kyshuf(&["attack", "tvla", "--in", s(&junk), "--out", s(&p(&dir, "x.csv"))])), 3);

    let key = p(&dir, "k768.skky");
    assert_eq!(code(&kyshuf(&["keygen", "--param", "kyber768", "--out", s(&key)])), 0);
    let o = kyshuf(&["sim", "traces", "--param", "kyber512", "--traces", "4", "--key", s(&key), "--out", s(&p(&dir, "t.sktl"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn simulated_file_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (p(&dir, "a.sktl"), p(&dir, "b.sktl"));
    for path in [&a, &b] {
        let o = kyshuf(&["sim", "traces", "--seed", "0x2a", "--traces", "64", "--protected", "--target", "all", "--out", s(path)]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
    }
    let bytes = std::fs::read(&a).unwrap();
    assert_eq!(&bytes[..4], b"SKTL");
    assert_eq!(bytes, std::fs::read(&b).unwrap());
}

#[test]
fn keygen_matches_golden_file() {
    let dir = TempDir::new().unwrap();
    let key = p(&dir, "k.skky");
    assert_eq!(code(&kyshuf(&["keygen", "--param", "kyber512", "--seed", "1", "--out", s(&key)])), 0);
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/kyber512_seed1.skky");
    assert_eq!(std::fs::read(&key).unwrap(), std::fs::read(golden).unwrap());
}
