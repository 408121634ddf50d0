use std::path::Path;
use std::process::{Command, Output};

fn cli(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attn-hijack"))
        .args(args)
        .current_dir(cwd)
        .env_remove("ATTN_HIJACK_OUT")
        .output()
        .unwrap()
}

fn error_kind(out: &Output) -> String {
    let line = String::from_utf8_lossy(&out.stderr)
        .lines()
        .last()
        .unwrap_or_default()
        .to_string();
    let v: serde_json::Value = serde_json::from_str(&line).unwrap_or_else(|_| panic!("not json: {line}"));
    v["error"].as_str().unwrap().to_string()
}

fn files_under(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = walk(dir)
        .into_iter()
        .map(|p| p.strip_prefix(dir).unwrap().display().to_string())
        .collect();
    v.sort();
    v
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = vec![];
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

const TINY: &[&str] = &[
    "--mode",
    "grid",
    "--trojan",
    "1",
    "--clean",
    "1",
    "--train-size",
    "48",
    "--eval-size",
    "24",
    "--epochs",
    "1",
    "--min-clean-accuracy",
    "0",
    "--min-asr",
    "0",
];

#[test]
fn unknown_flag_is_a_usage_error_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["zoo", "build", "--no-such-flag", "--out", "z"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_kind(&out), "usage");
    assert!(files_under(dir.path()).is_empty());
}

#[test]
fn help_and_version_succeed() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(&["--help"], dir.path()).status.code(), Some(0));
    assert_eq!(cli(&["--version"], dir.path()).status.code(), Some(0));
}

#[test]
fn out_of_range_parameters_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["zoo", "build", "--alpha", "1.5"][..],
        &["zoo", "build", "--alpha", "0"],
        &["zoo", "build", "--gamma", "1"],
        &["zoo", "build", "--beta", "40"],
        &["zoo", "build", "--phrase-len", "4"],
        &["zoo", "build", "--trojan", "0"],
    ] {
        let out = cli(args, dir.path());
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        assert_eq!(error_kind(&out), "validation");
    }
    assert!(files_under(dir.path()).is_empty());
}

#[test]
fn malformed_config_file_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), "[zoo]\nunknown_key = 3\n").unwrap();
    let out = cli(&["--config", "run.toml", "zoo", "build"], dir.path());
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn missing_zoo_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&["zoo", "eval", "--zoo", "nowhere"], dir.path());
    assert_ne!(out.status.code(), Some(0));
    assert!(error_kind(&out) == "validation" || error_kind(&out) == "runtime");
}

#[test]
fn zoo_build_is_byte_identical_across_runs_and_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |out: &str, jobs: &str| {
        let mut args = vec!["zoo", "build", "--seed", "5", "--jobs", jobs, "--out", out];
        args.extend_from_slice(TINY);
        let o = cli(&args, dir.path());
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("a", "1");
    run("b", "2");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    assert!(files.contains(&"manifest.json".to_string()));
    for f in &files {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f} differs"
        );
    }

    let eval = cli(&["zoo", "eval", "--zoo", "a", "--out", "eval"], dir.path());
    assert!(eval.status.success(), "{}", String::from_utf8_lossy(&eval.stderr));
    let rows: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("eval/zoo_eval.json")).unwrap()).unwrap();
    for r in rows.as_array().unwrap() {
        for k in ["clean_accuracy", "asr"] {
            let (x, y) = (r["recorded"][k].as_f64().unwrap(), r["recomputed"][k].as_f64().unwrap());
            assert!((x - y).abs() <= 1e-6);
        }
    }
}
