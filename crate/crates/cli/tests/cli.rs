use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
name = "tiny"
seeds = [3, 4]

[topology]
n = 60
degree_cap = 12

[scheme]
ids = ["blocksdnvc_full", "random8"]

[workload]
txs = 10
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blocksdn"));
    c.env_remove("BLOCKSDN_OUT");
    c
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn validate_accepts_good_and_rejects_bad_config() {
    let d = tempfile::tempdir().unwrap();
    let good = write_config(d.path(), "good.toml", TINY);
    let out = run(bin().arg("validate").arg(&good));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("2 schemes x 2 seeds"));

    let bad = write_config(d.path(), "bad.toml", "[controller]\nd_near = 8\nd_far = 4\n");
    let out = run(bin().arg("validate").arg(&bad));
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.contains("controller.d_near"), "{err}");

    let unknown = write_config(d.path(), "unknown.toml", "[workload]\ntxs = 5\nspeed = 2\n");
    let out = run(bin().arg("validate").arg(&unknown));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("line 3"), "{}", text(&out.stderr));

    let out = run(bin().arg("validate").arg(d.path().join("missing.toml")));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn effective_config_round_trips() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out = run(bin().arg("--print-effective-config").arg("run").arg(&cfg));
    assert_eq!(out.status.code(), Some(0));
    let printed = text(&out.stdout);
    assert!(printed.contains("theta_ms"), "defaults are resolved");
    let reparsed = blocksdn::config::parse_config(&printed).unwrap();
    assert_eq!(reparsed, blocksdn::config::parse_config(TINY).unwrap());
    assert!(!d.path().join("out").exists(), "printing does not run anything");
}

#[test]
fn run_is_deterministic_and_honors_output_root() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    for root in ["a", "b"] {
        let out = run(bin().env("BLOCKSDN_OUT", d.path().join(root)).arg("run").arg(&cfg));
        assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    }
    let files = ["runs.csv", "summary.csv", "summary.txt", "cdf_blocksdnvc_full.csv", "cdf_random8.csv", "effective_config.toml"];
    for f in files {
        let a = std::fs::read(d.path().join("a/tiny").join(f)).unwrap();
        let b = std::fs::read(d.path().join("b/tiny").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
    let runs = std::fs::read_to_string(d.path().join("a/tiny/runs.csv")).unwrap();
    assert!(runs.starts_with("# blocksdn runs v1\n"));
    assert_eq!(runs.lines().count(), 2 + 4);
}

#[test]
fn out_flag_beats_environment() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path().join("env"))
        .arg("--out")
        .arg(d.path().join("flag"))
        .arg("run")
        .arg(&cfg));
    assert_eq!(out.status.code(), Some(0));
    assert!(d.path().join("flag/tiny/summary.csv").exists());
    assert!(!d.path().join("env").exists());
}

#[test]
fn partial_delivery_exits_two() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path())
        .args(["--set", "workload.drain_ms=1", "--set", "workload.rate_per_s=1000"])
        .arg("run")
        .arg(&cfg));
    assert_eq!(out.status.code(), Some(2), "{}", text(&out.stderr));
    let table = std::fs::read_to_string(d.path().join("tiny/summary.txt")).unwrap();
    assert!(table.contains("PARTIAL"), "{table}");
}

#[test]
fn sweep_writes_long_csv_and_rejects_bad_values() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path(), "c.toml", TINY);
    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path())
        .args(["--set", "scheme.ids=blocksdnvc_noburst"])
        .arg("sweep")
        .arg(&cfg)
        .args(["--axis", "controller.d_near", "--values", "4,6"]));
    assert_eq!(out.status.code(), Some(1), "a string override of a list field is a config error");

    let one = write_config(d.path(), "one.toml", &TINY.replace(r#"ids = ["blocksdnvc_full", "random8"]"#, r#"ids = ["blocksdnvc_noburst"]"#));
    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path())
        .arg("sweep")
        .arg(&one)
        .args(["--axis", "controller.d_near", "--values", "4,6"]));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let csv = std::fs::read_to_string(d.path().join("tiny/sweep_controller_d_near.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# blocksdn sweep v1"));
    assert_eq!(
        lines.next(),
        Some("axis,value,scheme,seed,median_ms,p90_ms,p99_ms,bytes_factor,control_frac,partial")
    );
    assert_eq!(lines.count(), 4);

    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path())
        .arg("sweep")
        .arg(&one)
        .args(["--axis", "controller.d_near", "--values", "six"]));
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn compare_knows_presets() {
    let out = run(bin().args(["compare", "--preset", "nope"]));
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("table1"));

    let d = tempfile::tempdir().unwrap();
    let out = run(bin()
        .env("BLOCKSDN_OUT", d.path())
        .args(["--set", "seeds.count=1", "--set", "topology.n=80", "--set", "topology.degree_cap=16", "--set", "workload.txs=10"])
        .args(["compare", "--preset", "attacks"]));
    assert_eq!(out.status.code(), Some(0), "{}", text(&out.stderr));
    let slow = std::fs::read_to_string(d.path().join("attacks/slowdown.csv")).unwrap();
    assert!(slow.contains("blocksdnvc_full,"));
    assert!(slow.contains("mercury,"));
    assert!(d.path().join("attacks/attack_free/summary.csv").exists());
}
