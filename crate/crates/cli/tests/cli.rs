use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_manet-sim"));
    c.env_remove("MANET_SIM_OUT");
    c
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn run_to(file: &Path, out: &Path, extra: &[&str]) -> Output {
    bin()
        .arg("run")
        .arg(file)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap()
}

#[test]
fn every_bundled_scenario_validates() {
    let mut n = 0;
    for e in fs::read_dir(scenario("")).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "scn") {
            let o = bin().arg("validate").arg(&p).output().unwrap();
            assert_eq!(code(&o), 0, "{}: {}", p.display(), stderr(&o));
            n += 1;
        }
    }
    assert!(n >= 8);
}

#[test]
fn bad_weights_cite_the_constraint() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "w.scn",
        "[nodes]\nS 0 0\n[groups]\ng1 members=S\n[params]\nweights = 0.5 0.3 0.3\n",
    );
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("w0 + w1 + w2 = 1"), "{}", stderr(&o));
    assert!(stderr(&o).contains("line 6"), "{}", stderr(&o));
}

#[test]
fn undeclared_node_is_invalid() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "z.scn",
        "[nodes]\nS 0 0\nD 10 0\n[groups]\ng1 members=S,D\n[script]\n5 discover S Z\n",
    );
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("undeclared node Z"));
    let o = run_to(&p, &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 2);
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "p.scn", "[nodes]\nS 0 0\n[script]\nsoon join S g1\n");
    let o = bin().arg("validate").arg(&p).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 4: bad script time soon"), "{}", stderr(&o));
}

#[test]
fn missing_file_is_io() {
    let o = bin().arg("validate").arg("/nonexistent/x.scn").output().unwrap();
    assert_eq!(code(&o), 3);
    let o = bin().arg("report").arg("/nonexistent/events.log").output().unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn benign_run_passes_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_to(&scenario("benign.scn"), &out, &[]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 8);
    assert!(text.lines().all(|l| l.ends_with(" PASS")));
    assert_eq!(fs::read_to_string(out.join("audit.txt")).unwrap(), text);
    assert!(fs::read_to_string(out.join("events.log")).unwrap().ends_with("end\n"));
    assert!(!fs::read(out.join("events.bin")).unwrap().is_empty());
}

#[test]
fn worked_mitm_scenario_is_detected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = run_to(&scenario("mitm_stealth.scn"), &out, &[]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let log = fs::read_to_string(out.join("events.log")).unwrap();
    assert!(log.contains("reject chain_mismatch rreq S>D seq=1"));
}

#[test]
fn claimed_undetected_attack_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_to(&scenario("mitm_undetected.scn"), &dir.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("detection_outcomes FAIL"));
}

#[test]
fn overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = run_to(
        &scenario("benign.scn"),
        &a,
        &["--provider", "real", "--strict-chain", "--seed", "4"],
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let log = fs::read_to_string(a.join("events.log")).unwrap();
    assert!(log.contains("provider real"));
    assert!(log.contains("strict_chain=true"));
    run_to(
        &scenario("benign.scn"),
        &b,
        &["--provider", "real", "--strict-chain", "--seed", "4"],
    );
    assert_eq!(log, fs::read_to_string(b.join("events.log")).unwrap());
}

#[test]
fn out_dir_defaults_from_env() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("from-env");
    let o = bin()
        .arg("run")
        .arg(scenario("rreq_replay.scn"))
        .env("MANET_SIM_OUT", &out)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    assert!(out.join("events.log").exists());
}

#[test]
fn unwritable_out_dir_is_io() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "x");
    let o = run_to(&scenario("benign.scn"), &blocker.join("sub"), &[]);
    assert_eq!(code(&o), 3);
}

#[test]
fn report_is_deterministic_and_counts_actions() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    run_to(&scenario("benign.scn"), &out, &[]);
    let log = out.join("events.log");
    let first = bin().arg("report").arg(&log).output().unwrap();
    let second = bin().arg("report").arg(&log).output().unwrap();
    assert_eq!(code(&first), 0);
    assert_eq!(first.stdout, second.stdout);
    let r = stdout(&first);
    // Four nodes besides the leader are admitted: three at start, C later.
    assert!(
        r.contains("  elections 1\n  admits 4\n  discoveries 1\n  accepts 2\n"),
        "{r}"
    );
    let leave = r.lines().find(|l| l.contains("B leave g1")).unwrap();
    let remove = r.lines().find(|l| l.contains("remove B g1")).unwrap();
    let tick = |l: &str| -> u64 { l.split_whitespace().next().unwrap()[2..].parse().unwrap() };
    let bump = r
        .lines()
        .find(|l| l.contains("epoch g1") && tick(l) >= tick(leave))
        .unwrap();
    assert_eq!(tick(bump), tick(remove));
}

#[test]
fn report_on_empty_and_corrupt_logs() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.log", "");
    let o = bin().arg("report").arg(&empty).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(o.stdout.is_empty());
    let bad = write(dir.path(), "bad.log", "not a log line\n");
    let o = bin().arg("report").arg(&bad).output().unwrap();
    assert_eq!(code(&o), 2);
}
