use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn mcsnet(extra: &[&str]) -> Command {
    let r = root();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mcsnet"));
    cmd.arg("--topology").arg(r.join("configs/fig1/topology.toml"));
    cmd.arg("--services").arg(r.join("configs/fig1/services.toml"));
    cmd.args(extra);
    cmd
}

fn scenario(name: &str) -> String {
    root().join("scenarios").join(format!("{name}.toml")).display().to_string()
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

#[test]
fn shipped_scenario_exits_zero() {
    let out = run(&mut mcsnet(&["--scenario", &scenario("s2_linkfail")]));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("completed"));
}

#[test]
fn outputs_are_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for i in 0..2 {
        let m = dir.path().join(format!("m{i}.jsonl"));
        let t = dir.path().join(format!("t{i}.jsonl"));
        let out = run(mcsnet(&["--scenario", &scenario("s3_nodefail")])
            .arg("--metrics-out")
            .arg(&m)
            .arg("--trace-out")
            .arg(&t));
        assert_eq!(out.status.code(), Some(0));
        files.push((fs::read(&m).unwrap(), fs::read(&t).unwrap()));
    }
    assert!(!files[0].0.is_empty());
    assert_eq!(files[0], files[1]);
}

#[test]
fn bad_config_exits_two_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("topology.toml");
    fs::write(&bad, "bridges = [\"A\"]\nsupervisor_attachment = \n").unwrap();
    let out = run(Command::new(env!("CARGO_BIN_EXE_mcsnet"))
        .arg("--topology")
        .arg(&bad)
        .arg("--services")
        .arg(root().join("configs/fig1/services.toml")));
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("topology.toml") && err.contains(":2:"), "{err}");
}

#[test]
fn infeasible_placement_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let services = dir.path().join("services.toml");
    fs::write(
        &services,
        "[[services]]\nid = \"huge\"\ncriticality = \"critical\"\ndemand = { cpu_millicores = 100000, memory_mib = 1 }\n",
    )
    .unwrap();
    let out = run(Command::new(env!("CARGO_BIN_EXE_mcsnet"))
        .arg("--topology")
        .arg(root().join("configs/fig1/topology.toml"))
        .arg("--services")
        .arg(&services));
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn repl_without_pacing_is_refused() {
    let out = run(&mut mcsnet(&["--repl", "--pace", "off"]));
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn repl_answers_commands_and_records_them() {
    let dir = tempfile::tempdir().unwrap();
    let record = dir.path().join("record.toml");
    let metrics = dir.path().join("live.jsonl");
    let mut child = mcsnet(&["--repl", "--pace", "1000", "--seed", "4"])
        .arg("--record-out")
        .arg(&record)
        .arg("--metrics-out")
        .arg(&metrics)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(b"bogus\nstatus\nfail-link TSN1 TSN3\nquit\n").unwrap();
    let out = child.wait_with_output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("unrecognized command `bogus`"), "{stdout}");
    assert!(stdout.contains("video-recv"), "{stdout}");
    assert!(stdout.contains("fail_link TSN1 TSN3 at"), "{stdout}");

    let recorded = fs::read_to_string(&record).unwrap();
    assert!(recorded.contains("fail_link TSN1 TSN3"), "{recorded}");
    let replayed = dir.path().join("replay.jsonl");
    let out = run(mcsnet(&[]).arg("--scenario").arg(&record).arg("--metrics-out").arg(&replayed));
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(&metrics).unwrap(), fs::read(&replayed).unwrap());
}
