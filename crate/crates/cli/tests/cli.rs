use std::collections::BTreeSet;
use std::path::Path;
use std::process::{Command, Output};

use lstcn_train::TrainConfig;

fn lstcn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lstcn"))
        .current_dir(dir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn doc(name: &str) -> String {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs")
        .join(name);
    std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn keys(v: &toml::Value, out: &mut BTreeSet<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                out.insert(k.clone());
                keys(v, out);
            }
        }
        toml::Value::Array(a) => a.iter().for_each(|v| keys(v, out)),
        _ => {}
    }
}

#[test]
fn missing_checkpoint_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = lstcn(dir.path(), &["eval", "--checkpoint", "nowhere/model.ckpt"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("nowhere/model.ckpt"), "{}", stderr(&o));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = lstcn(dir.path(), &["train", "--learning-rate", "3"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "p = 4\nmystery = 1\n").unwrap();
    let o = lstcn(
        dir.path(),
        &["--config", "bad.toml", "train", "--max-iters", "1"],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("mystery"), "{}", stderr(&o));
}

#[test]
fn fusecheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lstcn(dir.path(), &["--out", "o", "fusecheck", "--trials", "100"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("o/fusecheck.txt").is_file());
}

#[test]
fn gradcheck_single_op() {
    let dir = tempfile::tempdir().unwrap();
    let o = lstcn(
        dir.path(),
        &[
            "--out",
            "o",
            "gradcheck",
            "--ops",
            "conv2d",
            "--trials",
            "5",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = std::fs::read_to_string(dir.path().join("o/gradcheck.txt")).unwrap();
    assert!(report.contains("conv2d"), "{report}");
}

#[test]
fn synth_writes_manifest_and_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = lstcn(
        dir.path(),
        &[
            "--seed",
            "3",
            "--out",
            "d",
            "synth",
            "--subjects",
            "3",
            "--frames",
            "16",
            "--views",
            "0",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(dir.path().join("d/manifest.tsv")).unwrap();
    assert!(manifest.lines().count() >= 3, "{manifest}");
    TrainConfig::load(&dir.path().join("d/train.toml")).unwrap();
    assert!(dir.path().join("d/artifacts.tsv").is_file());
}

#[test]
fn every_flag_is_documented() {
    let text = doc("cli.md");
    let dir = tempfile::tempdir().unwrap();
    for sub in [
        "synth",
        "train",
        "eval",
        "ablate",
        "gradcheck",
        "fusecheck",
        "report",
    ] {
        let o = lstcn(dir.path(), &[sub, "--help"]);
        assert!(o.status.success());
        let help = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(text.contains(&format!("## {sub}")), "{sub} has no section");
        for word in help.split_whitespace() {
            let flag = word.trim_end_matches(',');
            if flag.starts_with("--") && flag != "--help" && flag != "--version" {
                assert!(
                    text.contains(&format!("`{flag}")),
                    "{sub}: {flag} undocumented"
                );
            }
        }
    }
}

#[test]
fn every_config_key_is_documented() {
    let text = doc("config.md");
    let mut all = BTreeSet::new();
    for cfg in [
        TrainConfig::synthetic_default(),
        TrainConfig::casia_b_default("m.tsv".into()),
    ] {
        keys(&cfg.to_text().parse::<toml::Value>().unwrap(), &mut all);
    }
    for k in ["variant", "normalize", "path"] {
        all.insert(k.into());
    }
    for k in &all {
        let documented = [format!("`{k}`"), format!("[{k}]`"), format!(".{k}]`")]
            .iter()
            .any(|form| text.contains(form.as_str()));
        assert!(documented, "config key {k} undocumented");
    }
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let synth = TrainConfig::load(&root.join("synthetic.toml")).unwrap();
    assert_eq!(synth, TrainConfig::synthetic_default());
    TrainConfig::from_text(&std::fs::read_to_string(root.join("casia_b.toml")).unwrap()).unwrap();
}
