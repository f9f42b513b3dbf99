use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_soundcheck")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Outcome records with the wall clock removed.
fn untimed_outcomes(dir: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(dir.join("outcomes.jsonl"))
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn corpus_commands() {
    let dir = tempfile::tempdir().unwrap();
    let games = dir.path().join("games.txt");
    ok(&["gen", "--n", "30", "--seed", "4", "--out", path(&games)]);
    let stats: serde_json::Value = serde_json::from_str(&ok(&["stats", path(&games)])).unwrap();
    assert_eq!(stats["game_count"], 30);
    assert_eq!(stats["premature_end_count"], 0);
    assert!(stats["max_plies"].as_u64().unwrap() <= 150);

    let short = dir.path().join("short.txt");
    ok(&["filter", path(&games), "--out", path(&short), "--max-plies", "60"]);
    let kept: serde_json::Value = serde_json::from_str(&ok(&["stats", path(&short)])).unwrap();
    assert!(kept["max_plies"].as_u64().unwrap() <= 60);
    assert!(kept["game_count"].as_u64().unwrap() < 30);

    let pd = dir.path().join("pd.tsv");
    ok(&["export-pd", path(&games), "--out", path(&pd)]);
    let rows = fs::read_to_string(&pd).unwrap().lines().count() as u64;
    assert_eq!(rows, stats["token_count"].as_u64().unwrap() - 30);
}

#[test]
fn attack_writes_reports_and_exec_matches_builtin() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("builtin");
    let b = dir.path().join("exec");
    let common = ["--adversary", "imo,rm", "--warmups", "random:8:10:3", "--max-plies", "40", "--reps", "2"];
    let mut args = vec!["attack", "--model", "builtin:seeded-flaw", "--out", path(&a)];
    args.extend(common);
    ok(&args);
    let exec = format!("exec:{} serve --model builtin:seeded-flaw", bin());
    let mut args = vec!["attack", "--model", &exec, "--out", path(&b)];
    args.extend(common);
    ok(&args);

    let outcomes = untimed_outcomes(&a);
    assert_eq!(outcomes.len(), 2 * 8 * 2);
    assert_eq!(outcomes, untimed_outcomes(&b));

    for f in ["summary.csv", "asr_curve_imo.csv", "asr_curve_rm.csv", "taxonomy_imo.csv", "taxonomy_rm.csv"] {
        let text = fs::read_to_string(a.join(f)).unwrap();
        assert!(text.starts_with("# "), "{f} lacks its header comment");
    }
    let summary = fs::read_to_string(a.join("summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
    assert!(summary.lines().nth(2).unwrap().starts_with("imo,greedy,16,1.0,"));

    let rebuilt = dir.path().join("rebuilt");
    ok(&["report", path(&a.join("outcomes.jsonl")), "--out", path(&rebuilt)]);
    for f in ["asr_curve_imo.csv", "taxonomy_rm.csv", "summary.csv"] {
        assert_eq!(fs::read_to_string(a.join(f)).unwrap(), fs::read_to_string(rebuilt.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn eval_and_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let games = dir.path().join("games.txt");
    ok(&["gen", "--n", "5", "--seed", "1", "--out", path(&games)]);
    let end = ok(&["eval", "--model", "builtin:perfect", "end-recognition", path(&games)]);
    assert_eq!(end.trim(), "1");
    let ratio = ok(&["eval", "--model", "builtin:uniform", "legal-ratio", path(&games)]);
    assert_eq!(ratio.trim(), "0");
    let iou_csv = dir.path().join("iou.csv");
    let iou = ok(&["eval", "--model", "builtin:perfect-probe", "iou", path(&games), "--epsilon", "0", "--out", path(&iou_csv)]);
    assert!(iou.contains("iou_wm Some(1.0)"), "{iou}");
    assert!(fs::read_to_string(&iou_csv).unwrap().starts_with("# game"));

    let report = ok(&["conformance", "--model", &format!("exec:{} serve --model builtin:perfect-probe", bin())]);
    assert!(report.lines().all(|l| l.starts_with("PASS")), "{report}");
    let bad = run(&["conformance", "--model", "exec:cat"]);
    assert!(!bad.status.success());
}

#[test]
fn perft_and_argument_errors() {
    assert_eq!(ok(&["perft", "--depth", "3"]).trim(), "8902");
    let divided = ok(&["perft", "--depth", "2", "--divide"]);
    assert_eq!(divided.lines().count(), 21);
    assert!(divided.contains("e2e4: 20"));
    let kiwipete = "r3k2r/p1ppqpb1/bn2pnp1/3PN3/1p2P3/2N2Q1p/PPPBBPPP/R3K2R w KQkq - 0 1";
    assert_eq!(ok(&["perft", "--fen", kiwipete, "--depth", "2"]).trim(), "2039");

    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path());
    for args in [
        vec!["attack", "--model", "builtin:perfect", "--adversary", "nope", "--warmups", "random:1:2:1", "--out", out],
        vec!["attack", "--model", "builtin:perfect", "--warmups", "random:1:3:1", "--out", out],
        vec!["attack", "--model", "builtin:missing", "--warmups", "random:1:2:1", "--out", out],
        vec!["attack", "--model", "builtin:perfect", "--adversary", "bso", "--warmups", "random:1:2:1", "--out", out],
        vec!["attack", "--model", "builtin:perfect", "--policy", "topk:0", "--warmups", "random:1:2:1", "--out", out],
        vec!["stats", "/nonexistent/corpus.txt"],
    ] {
        let o = run(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
}
