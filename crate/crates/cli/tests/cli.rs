use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pyramid_mixer::data::synthetic::planted_successor;
use pyramid_mixer::data::{to_canonical_tsv, InteractionRecord};
use serde_json::Value;

fn pymx(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pymx"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .env("PYMX_THREADS", "1")
        .output()
        .expect("spawn pymx")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The run directory is the last line a successful command prints.
fn run_dir(o: &Output, cwd: &Path) -> PathBuf {
    assert!(o.status.success(), "stderr: {}", stderr(o));
    cwd.join(stdout(o).lines().last().expect("run dir line"))
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

/// Planted-successor data plus noise records that the 5-core filter must drop.
fn write_dataset(dir: &Path) -> PathBuf {
    let mut records = planted_successor(3);
    for u in 0..4 {
        records.push(InteractionRecord::new(format!("lonely{u}"), "item0", 5).with_field("group", "g0"));
    }
    for i in 0..3 {
        records.push(InteractionRecord::new("user0", format!("rare{i}"), 9000 + i).with_field("group", "g1"));
    }
    let path = dir.join("planted.tsv");
    fs::write(&path, to_canonical_tsv(&records)).unwrap();
    path
}

fn small_config(dir: &Path, data: &Path) -> PathBuf {
    let config = serde_json::json!({
        "data": { "path": data, "format": "canonical-tsv" },
        "model": { "L": 12, "D": 16, "D_prime": 4, "L_prime": 4, "S": 2 },
        "train": { "max_epochs": 2, "batch_size": 64, "prefixes_per_user": 4 },
        "seed": 9,
        "tag": "t",
    });
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

/// Straight-line k-core over `(user, item)` pairs, written independently of the library.
fn naive_core(pairs: &[(String, String)], k: usize) -> usize {
    let mut alive = vec![true; pairs.len()];
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for (p, _) in pairs.iter().zip(&alive).filter(|(_, a)| **a) {
            *users.entry(&p.0).or_default() += 1;
            *items.entry(&p.1).or_default() += 1;
        }
        let mut changed = false;
        for (p, a) in pairs.iter().zip(alive.iter_mut()) {
            if *a && (users[p.0.as_str()] < k || items[p.1.as_str()] < k) {
                *a = false;
                changed = true;
            }
        }
        if !changed {
            return alive.iter().filter(|a| **a).count();
        }
    }
}

#[test]
fn prep_keeps_exactly_the_core_interactions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path());
    let cfg = small_config(tmp.path(), &data);
    let out = pymx(&["--config", cfg.to_str().unwrap(), "prep"], tmp.path());
    let dir = run_dir(&out, tmp.path());

    let pairs: Vec<(String, String)> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| {
            let mut cols = l.split('\t');
            (cols.next().unwrap().to_string(), cols.next().unwrap().to_string())
        })
        .collect();
    let expected = naive_core(&pairs, 5);
    assert!(expected < pairs.len(), "the noise records should be filtered");

    let kept = fs::read_to_string(dir.join("interactions.tsv")).unwrap();
    assert_eq!(kept.lines().count(), expected);
    let stats = read_json(&dir.join("prep.json"));
    assert_eq!(stats["retained_interactions"], expected);
    assert_eq!(stats["raw_interactions"], pairs.len());
    assert!(dir.join("vocab.tsv").exists());
    assert!(dir.join("config.json").exists());
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pymx(&["gradcheck"], tmp.path());
    let text = stdout(&out);
    assert!(out.status.success(), "{text}\n{}", stderr(&out));
    assert!(text.lines().last().unwrap().starts_with("PASS max_rel_err="), "{text}");
}

#[test]
fn invalid_rank_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pymx(&["--set", "model.D_prime=64", "--set", "model.D=64", "cost"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    let last = err.lines().last().unwrap();
    assert!(last.starts_with("error[config]: "), "{err}");
    assert!(last.contains("D_prime"), "{err}");
    assert_eq!(err.lines().filter(|l| l.starts_with("error[")).count(), 1);
}

#[test]
fn missing_data_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pymx(&["--set", "data.path=nowhere/ml-100k", "prep"], tmp.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).lines().last().unwrap().starts_with("error["), "{}", stderr(&out));
}

#[test]
fn malformed_override_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = pymx(&["--set", "model.D", "cost"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error[config]: "));
}

#[test]
fn resolved_config_reproduces_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path());
    let cfg = small_config(tmp.path(), &data);
    let first = run_dir(&pymx(&["--config", cfg.to_str().unwrap(), "train"], tmp.path()), tmp.path());
    for file in ["config.json", "checkpoint.pymx", "train.log.jsonl", "metrics.json", "cost.json"] {
        assert!(first.join(file).exists(), "missing {file}");
    }
    assert_eq!(fs::read_to_string(first.join("train.log.jsonl")).unwrap().lines().count(), 2);

    let resolved = first.join("config.json");
    let second = run_dir(&pymx(&["--config", resolved.to_str().unwrap(), "train"], tmp.path()), tmp.path());
    assert_ne!(first, second, "a second run gets its own directory");
    assert_eq!(read_json(&first.join("metrics.json")), read_json(&second.join("metrics.json")));
    assert_eq!(read_json(&resolved), read_json(&second.join("config.json")));

    // Evaluating the saved checkpoint reproduces the reported test metrics.
    let ckpt = first.join("checkpoint.pymx");
    let eval = run_dir(
        &pymx(&["--config", resolved.to_str().unwrap(), "eval", "--checkpoint", ckpt.to_str().unwrap()], tmp.path()),
        tmp.path(),
    );
    assert_eq!(read_json(&eval.join("metrics.json"))["test"], read_json(&first.join("metrics.json"))["test"]);

    // A different architecture is refused and the mismatching field is named.
    let out = pymx(
        &[
            "--config",
            resolved.to_str().unwrap(),
            "--set",
            "model.D_prime=8",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
        ],
        tmp.path(),
    );
    assert_eq!(out.status.code(), Some(5));
    assert!(stderr(&out).contains("D_prime"), "{}", stderr(&out));
}

#[test]
fn resume_continues_from_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path());
    let cfg = small_config(tmp.path(), &data);
    let cfg = cfg.to_str().unwrap();
    let straight = run_dir(&pymx(&["--config", cfg, "--set", "train.max_epochs=2", "train"], tmp.path()), tmp.path());
    let half = run_dir(&pymx(&["--config", cfg, "--set", "train.max_epochs=1", "train"], tmp.path()), tmp.path());
    let ckpt = half.join("checkpoint.pymx");
    let resumed = run_dir(
        &pymx(&["--config", cfg, "--set", "train.max_epochs=2", "train", "--resume", ckpt.to_str().unwrap()], tmp.path()),
        tmp.path(),
    );
    let last_line = |dir: &Path| -> Value {
        let text = fs::read_to_string(dir.join("train.log.jsonl")).unwrap();
        serde_json::from_str(text.lines().last().unwrap()).unwrap()
    };
    let (a, b) = (last_line(&straight), last_line(&resumed));
    assert_eq!(b["epoch"], 2);
    assert_eq!(a["train_loss"], b["train_loss"]);
    assert_eq!(a["valid_mrr10"], b["valid_mrr10"]);
    assert_eq!(read_json(&straight.join("metrics.json"))["test"], read_json(&resumed.join("metrics.json"))["test"]);
}

#[test]
fn cost_reports_the_mixer_ratio() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_dataset(tmp.path());
    let cfg = small_config(tmp.path(), &data);
    let dir = run_dir(&pymx(&["--config", cfg.to_str().unwrap(), "cost"], tmp.path()), tmp.path());
    let cost = read_json(&dir.join("cost.json"));
    assert_eq!(cost["feature_mac_ratio"].as_f64().unwrap(), 0.25);
}

/// Same check on the real MovieLens-100K ratings file, when present.
#[test]
fn prep_on_movielens_matches_an_independent_filter() {
    let dir = std::env::var_os("PYMX_ML100K_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k"));
    let Ok(raw) = fs::read_to_string(dir.join("u.data")) else {
        eprintln!("skipping: no u.data under {}", dir.display());
        return;
    };
    let pairs: Vec<(String, String)> = raw
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut cols = l.split('\t');
            (cols.next().unwrap().to_string(), cols.next().unwrap().to_string())
        })
        .collect();
    let tmp = tempfile::tempdir().unwrap();
    let path = format!("data.path={}", dir.display());
    let out = run_dir(&pymx(&["--set", &path, "prep"], tmp.path()), tmp.path());
    let kept = fs::read_to_string(out.join("interactions.tsv")).unwrap().lines().count();
    assert_eq!(kept, naive_core(&pairs, 5));
}
