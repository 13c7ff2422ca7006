use std::path::{Path, PathBuf};

use clap::Parser;
use personadb::cli::{execute, Cli, Outcome};
use personadb::Result;

fn run(args: &[&str]) -> Result<Outcome> {
    let cli = Cli::try_parse_from(std::iter::once("personadb").chain(args.iter().copied())).unwrap();
    execute(&cli.command)
}

fn write_config(root: &Path, extra: &str) -> PathBuf {
    let path = root.join("run.toml");
    let text = format!(
        "[data]\ndir = \"data\"\nstore = \"store\"\n\n[composition]\nr = 8\n\n[run]\nout_dir = \"runs\"\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path
}

fn out(root: &Path, name: &str) -> String {
    root.join("runs").join(name).to_str().unwrap().to_string()
}

#[test]
fn dry_run_touches_no_backend_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "\n[backend]\nkind = \"http\"\n");
    let c = c.to_str().unwrap();
    let synth = run(&["synth", "-c", c, "--dry-run"]).unwrap();
    assert!(!dir.path().join("data").exists());
    assert_eq!(synth.summary["users"], 40);
    run(&["synth", "-c", c, "--out", &out(dir.path(), "synth")]).unwrap();
    for cmd in ["build", "join", "predict", "sweep", "eval"] {
        let o = run(&[cmd, "-c", c, "--dry-run"]).unwrap();
        assert_eq!(o.status, "dry_run");
        assert!(o.run_dir.is_none());
        assert_eq!(o.summary["backend_calls"].as_u64().unwrap_or(0), 0, "{cmd}: {}", o.summary);
    }
    let runs: Vec<_> = std::fs::read_dir(dir.path().join("runs")).unwrap().collect();
    assert_eq!(runs.len(), 1);
    assert!(!dir.path().join("store").exists());
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[composition]\nr = \n").unwrap();
    let e = run(&["predict", "-c", path.to_str().unwrap()]).unwrap_err();
    assert_eq!(e.kind(), "ConfigError");
    assert!(e.to_string().contains("bad.toml"), "{e}");

    let ok = write_config(dir.path(), "");
    let e = run(&["predict", "-c", ok.to_str().unwrap(), "--set", "composition.x=1.5"]).unwrap_err();
    assert_eq!(e.kind(), "ConfigError");
    assert!(e.to_string().contains("composition.x"), "{e}");
}

#[test]
fn overrides_win_and_are_journaled() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "");
    let run_dir = out(dir.path(), "synth");
    let o = run(&["synth", "-c", c.to_str().unwrap(), "--out", &run_dir, "--set", "composition.r=12"]).unwrap();
    let base = run(&["synth", "-c", c.to_str().unwrap(), "--dry-run"]).unwrap();
    assert_ne!(o.config_digest, base.config_digest);

    let resolved = std::fs::read_to_string(Path::new(&run_dir).join("config.toml")).unwrap();
    assert!(resolved.contains("r = 12"), "{resolved}");
    let journal = std::fs::read_to_string(Path::new(&run_dir).join("journal.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(journal.lines().next().unwrap()).unwrap();
    assert_eq!(first["event"], "config");
    assert_eq!(first["digest"], o.config_digest.as_str());
    assert_eq!(first["resolved"]["composition"]["r"], 12);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(Path::new(&run_dir).join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_digest"], o.config_digest.as_str());
}

#[test]
fn rebuilding_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "");
    let c = c.to_str().unwrap();
    run(&["synth", "-c", c, "--out", &out(dir.path(), "synth")]).unwrap();
    let first = run(&["build", "-c", c, "--out", &out(dir.path(), "b1")]).unwrap();
    assert!(first.summary["records_added"].as_u64().unwrap() > 0);
    let persona = dir.path().join("store/users/u000/persona.json");
    let before = std::fs::read(&persona).unwrap();
    let second = run(&["build", "-c", c, "--out", &out(dir.path(), "b2")]).unwrap();
    assert_eq!(second.summary["records_added"], 0);
    assert_eq!(std::fs::read(&persona).unwrap(), before);
}

#[test]
fn single_user_corpus_reports_failed_sweep_cells() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(
        dir.path(),
        "\n[synth]\nn_users = 1\nn_clusters = 1\nlurker_fraction = 0.0\ndomains = [\"energy\"]\ndomain_coverage_per_user = 1\n\n[sweep]\nr_values = [4]\nx_values = [0.0, 0.5]\n",
    );
    let c = c.to_str().unwrap();
    run(&["synth", "-c", c, "--out", &out(dir.path(), "synth")]).unwrap();
    run(&["build", "-c", c, "--out", &out(dir.path(), "build")]).unwrap();
    let join = run(&["join", "-c", c, "--out", &out(dir.path(), "join")]).unwrap();
    assert!(join.partial);
    let failures = std::fs::read_to_string(dir.path().join("runs/join/join_failures.json")).unwrap();
    assert!(failures.contains("NoCandidates"), "{failures}");

    let o = run(&["sweep", "-c", c, "--out", &out(dir.path(), "sweep")]).unwrap();
    assert_eq!(o.summary["incomplete"], 2);
    let csv = std::fs::read_to_string(dir.path().join("runs/sweep/sweep.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "r,x,pearson,accuracy,n");
    assert_eq!(rows[1], "4,0,,1.000000,1", "one evaluated task leaves correlation undefined");
    assert_eq!(rows[2], "4,0.5,,,0");
    let why = std::fs::read_to_string(dir.path().join("runs/sweep/sweep_failures.json")).unwrap();
    assert!(why.contains("NoCandidates"), "{why}");
}

#[test]
fn failures_leave_an_error_record() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(dir.path(), "");
    let run_dir = out(dir.path(), "predict");
    let e = run(&["predict", "-c", c.to_str().unwrap(), "--out", &run_dir]).unwrap_err();
    let record: serde_json::Value =
        serde_json::from_slice(&std::fs::read(Path::new(&run_dir).join("error.json")).unwrap()).unwrap();
    assert_eq!(record["status"], "error");
    assert_eq!(record["kind"], e.kind());
    assert!(!Path::new(&run_dir).join("manifest.json").exists());
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for name in ["default.toml", "synth_demo.toml"] {
        let cfg = personadb::config::RunConfig::load(Some(&dir.join(name)), &[]).unwrap();
        assert_eq!(cfg.composition.x, 0.25, "{name}");
    }
}
