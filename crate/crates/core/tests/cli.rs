use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
num_workers = 3
block_size = 2
num_speakers = 30
utterances_per_speaker = 10
frames_per_utterance = 8
base_dim = 4
num_classes = 4
stack = 2
mlp_hidden = [8]
"#;

fn shadowsync(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shadowsync")).args(args).output().unwrap()
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    shadowsync(&args)
}

fn write_config(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_writes_artifacts_with_exact_headers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let out = dir.path().join("run");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));

    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("strategy,epoch,fer"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 4 * 4 * 3);
    assert_eq!(rows[0], format!("bmuf,0.25,{}", rows[0].rsplit(',').next().unwrap()));

    let fin = fs::read_to_string(out.join("final.csv")).unwrap();
    let fin: Vec<&str> = fin.lines().collect();
    assert_eq!(fin[0], "strategy,test_fer");
    let strategies: Vec<&str> = fin[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(strategies, ["bmuf", "ma", "ema"]);

    let manifest = fs::read_to_string(out.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 1"));
    assert!(manifest.contains("num_workers = 3"));
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", SMALL);
    let first = dir.path().join("a");
    assert!(run(&cfg, &first, &["--seed", "17"]).status.success());
    let second = dir.path().join("b");
    assert!(run(&first.join("manifest.toml"), &second, &[]).status.success());
    for file in ["curves.csv", "final.csv", "manifest.toml"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file}");
    }
    let other = dir.path().join("c");
    assert!(run(&cfg, &other, &[]).status.success());
    assert_ne!(fs::read(first.join("curves.csv")).unwrap(), fs::read(other.join("curves.csv")).unwrap());
}

#[test]
fn degenerate_settings_make_bmuf_and_ema_curves_identical() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}block_momentum = 0.0\nblock_learning_rate = 1.0\nema_rate = 0.0\n");
    let cfg = write_config(dir.path(), "degenerate.toml", &text);
    let out = dir.path().join("run");
    assert!(run(&cfg, &out, &[]).status.success());
    let curves = fs::read_to_string(out.join("curves.csv")).unwrap();
    let tail = |s: &str| -> Vec<String> {
        curves
            .lines()
            .filter(|l| l.starts_with(&format!("{s},")))
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    assert_eq!(tail("bmuf").len(), 16);
    assert_eq!(tail("bmuf"), tail("ema"));
}

#[test]
fn checkpoints_are_saved_when_requested() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{SMALL}epochs = 1\nsave_checkpoints = true\n");
    let cfg = write_config(dir.path(), "ck.toml", &text);
    let out = dir.path().join("run");
    assert!(run(&cfg, &out, &[]).status.success());
    let mut names: Vec<String> = fs::read_dir(out.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4 * 3);
    let ema = names.iter().find(|n| n.starts_with("ema-")).unwrap();
    let ck = shadowsync::Checkpoint::load(&out.join("checkpoints").join(ema)).unwrap();
    assert_eq!(ck.strategy, shadowsync::Strategy::Ema);
    assert!(ck.params.is_finite());
}

#[test]
fn invalid_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    for (text, key) in [
        ("ema_rate = 1.5\n", "ema_rate"),
        ("num_workers = 0\n", "num_workers"),
        ("learning_rate = -1.0\n", "learning_rate"),
        ("block_momentum = 1.0\n", "block_momentum"),
        ("no_such_key = 3\n", "no_such_key"),
    ] {
        let cfg = write_config(dir.path(), "bad.toml", text);
        let o = run(&cfg, &dir.path().join("out"), &[]);
        assert!(!o.status.success(), "{text}");
        assert!(stderr(&o).contains(key), "{text}: {}", stderr(&o));
    }
    let o = run(&dir.path().join("missing.toml"), &dir.path().join("out"), &[]);
    assert!(!o.status.success());
}

#[test]
fn unwritable_output_dir_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "small.toml", &format!("{SMALL}epochs = 1\n"));
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let o = run(&cfg, &blocker.join("out"), &[]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("error:"));
}

#[test]
fn compare_prints_relative_reduction_against_bmuf() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    fs::create_dir(&a).unwrap();
    fs::write(a.join("final.csv"), "strategy,test_fer\nbmuf,0.200000\nma,0.180000\nema,0.150000\n").unwrap();
    let o = shadowsync(&["compare", a.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    assert!(lines[1].contains("bmuf") && lines[1].contains("20.00%") && lines[1].ends_with("0.00%"));
    assert!(lines[2].contains("ma") && lines[2].ends_with("10.00%"));
    assert!(lines[3].contains("ema") && lines[3].ends_with("25.00%"));

    let o = shadowsync(&["compare", dir.path().join("nope").to_str().unwrap()]);
    assert!(!o.status.success());
}
