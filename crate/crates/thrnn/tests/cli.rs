use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;
use thrnn::checkpoint::{digest, Checkpoint};
use thrnn::commands::{evaluate_hawkes_parallel, evaluate_model_parallel};
use thrnn::config::RunConfig;
use thrnn::split_file::load_split;
use thrnn_core::evaluation::{evaluate_hawkes, evaluate_model, fit_user_hawkes};
use thrnn_core::hawkes::FitConfig;

const TINY: &str = r#"
profile = "synthetic"
seed = 5
epochs = 2

[synth]
num_users = 12
sessions_per_user = 20
num_items = 6
max_session_len = 4

[pipeline]
max_session_len = 4

[model]
item_embedding_dim = 4
user_embedding_dim = 2
gap_embedding_dim = 2
hidden_dim_inter = 5
hidden_dim_intra = 5
batch_size = 4
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Workspace {
            dir: tempfile::tempdir().unwrap(),
        };
        std::fs::write(ws.path("tiny.toml"), TINY).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_thrnn"))
            .args(args)
            .current_dir(self.dir.path())
            .env_remove("THRNN_CONFIG")
            .env_remove("THRNN_SPLIT")
            .env_remove("THRNN_CHECKPOINT")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(
            out.status.success(),
            "thrnn {args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn fails(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert!(!out.status.success(), "thrnn {args:?} unexpectedly succeeded");
        String::from_utf8(out.stderr).unwrap()
    }

    fn synth(&self) -> String {
        self.ok(&["synth", "--config", "tiny.toml", "--out", "split.jsonl"])
    }

    fn train(&self, out: &str, extra: &[&str]) -> String {
        let mut args = vec!["train", "--config", "tiny.toml", "--split", "split.jsonl", "--out", out];
        args.extend_from_slice(extra);
        self.ok(&args)
    }
}

fn file_digest(p: &Path) -> String {
    digest(&std::fs::read(p).unwrap())
}

fn json_lines(text: &str) -> Vec<Value> {
    text.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn synth_matches_nominal_counts() {
    let ws = Workspace::new();
    let stats = &json_lines(&ws.synth())[0]["stats"];
    assert_eq!(stats["users"], 12);
    assert_eq!(stats["sessions"], 12 * 20);
    assert_eq!(stats["items"], 6);
    let first = std::fs::read_to_string(ws.path("split.jsonl")).unwrap();
    assert!(first.starts_with(r#"{"format":"thrnn-split","version":1"#));
}

#[test]
fn training_is_reproducible_and_resumable() {
    let ws = Workspace::new();
    ws.synth();
    let log = json_lines(&ws.train("a.ckpt", &[]));
    assert_eq!(log.len(), 2);
    for (i, line) in log.iter().enumerate() {
        assert_eq!(line["epoch"], i + 1);
        assert!(line["train_loss"].as_f64().unwrap().is_finite());
        assert!(line["val_recall_at_5"].as_f64().is_some());
        assert!(line["val_mae_days"].as_f64().is_some());
    }
    ws.train("b.ckpt", &[]);
    assert_eq!(file_digest(&ws.path("a.ckpt")), file_digest(&ws.path("b.ckpt")));

    // 2 epochs + 1 resumed epoch equals 3 uninterrupted epochs
    let resumed = json_lines(&ws.train("c.ckpt", &["--resume", "a.ckpt", "--epochs", "1"]));
    assert_eq!(resumed[0]["epoch"], 3);
    ws.train("d.ckpt", &["--epochs", "3"]);
    assert_eq!(file_digest(&ws.path("c.ckpt")), file_digest(&ws.path("d.ckpt")));
    assert_eq!(Checkpoint::load(&ws.path("c.ckpt")).unwrap().epochs_done, 3);
}

#[test]
fn alpha_sweep_writes_one_checkpoint_per_exponent() {
    let ws = Workspace::new();
    ws.synth();
    let log = json_lines(&ws.train("m.ckpt", &["--alpha-sweep", "--epochs", "1"]));
    let alphas: Vec<f64> = log.iter().map(|l| l["alpha_exp"].as_f64().unwrap()).collect();
    assert_eq!(alphas, [0.3, 0.5, 0.7, 0.9, 1.0]);
    for a in ["0.3", "0.5", "0.7", "0.9", "1"] {
        let ck = Checkpoint::load(&ws.path(&format!("m.alpha{a}.ckpt"))).unwrap();
        assert_eq!(ck.model.config().alpha_exp, a.parse::<f64>().unwrap());
    }
    let err = ws.fails(&["train", "--config", "tiny.toml", "--split", "split.jsonl", "--out", "x.ckpt", "--alpha-exp", "1.5"]);
    assert!(err.contains("outside (0, 1]"), "{err}");
}

#[test]
fn evaluation_reports_and_round_trip() {
    let ws = Workspace::new();
    ws.synth();
    ws.train("m.ckpt", &[]);
    let args = [
        "evaluate",
        "--config",
        "tiny.toml",
        "--split",
        "split.jsonl",
        "--checkpoint",
        "m.ckpt",
        "--baselines",
        "hawkes_short,hawkes_long,mean_gap,popularity",
        "--out",
        "r1.jsonl",
        "--plot",
        "plot.csv",
    ];
    ws.ok(&args);
    let mut again = args;
    again[10] = "r2.jsonl";
    ws.ok(&again);
    // save → load → evaluate is bit-identical
    assert_eq!(
        std::fs::read(ws.path("r1.jsonl")).unwrap(),
        std::fs::read(ws.path("r2.jsonl")).unwrap()
    );

    let lines = json_lines(&std::fs::read_to_string(ws.path("r1.jsonl")).unwrap());
    assert_eq!(lines[0]["format"], "thrnn-report");
    assert!(lines[0]["note"].as_str().unwrap().contains('±'));
    let models: Vec<&str> = lines[1..].iter().map(|l| l["report"]["model"].as_str().unwrap()).collect();
    assert_eq!(models, ["thrnn", "hawkes_short", "hawkes_long", "mean_gap", "popularity"]);
    let ks: Vec<&String> = lines[1]["report"]["recall"].as_object().unwrap().keys().collect();
    assert_eq!(ks, ["10", "20", "5"]);
    assert_eq!(lines[1]["report"]["mrr"].as_object().unwrap().len(), 3);

    // mean-gap MAE against the constant-predictor value computed here
    let (split, _) = load_split(&ws.path("split.jsonl")).unwrap();
    let train_gaps: Vec<f64> = split
        .train
        .iter()
        .flat_map(|u| u.sessions.iter().enumerate().skip(1))
        .filter(|(_, s)| !s.gap_masked)
        .map(|(_, s)| s.gap_before as f64)
        .collect();
    let mean = train_gaps.iter().sum::<f64>() / train_gaps.len() as f64;
    let targets: Vec<f64> = split
        .test
        .iter()
        .flat_map(|u| &u.sessions)
        .filter(|s| !s.gap_masked)
        .map(|s| s.gap_before as f64)
        .collect();
    let expected = targets.iter().map(|t| (t - mean).abs()).sum::<f64>() / targets.len() as f64 / 86_400.0;
    let got = lines[4]["report"]["overall_mae_days"].as_f64().unwrap();
    assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");

    let plot = std::fs::read_to_string(ws.path("plot.csv")).unwrap();
    let mut rows = plot.lines();
    assert_eq!(rows.next().unwrap(), "model,bucket_lo_days,bucket_hi_days,mae_days,count");
    let plotted: std::collections::BTreeSet<&str> = rows.map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(plotted.into_iter().collect::<Vec<_>>(), ["hawkes_long", "hawkes_short", "mean_gap", "thrnn"]);
}

#[test]
fn seed_summaries_over_several_checkpoints() {
    let ws = Workspace::new();
    ws.synth();
    ws.train("s1.ckpt", &["--seed", "1", "--epochs", "1"]);
    ws.train("s2.ckpt", &["--seed", "2", "--epochs", "1"]);
    ws.ok(&[
        "evaluate", "--config", "tiny.toml", "--split", "split.jsonl", "--checkpoint", "s1.ckpt,s2.ckpt", "--out", "r.jsonl",
    ]);
    let lines = json_lines(&std::fs::read_to_string(ws.path("r.jsonl")).unwrap());
    let summary = &lines.last().unwrap();
    assert_eq!(summary["kind"], "summary");
    assert_eq!(summary["summary"]["seeds"], 2);
    let r5: Vec<f64> = lines[1..3].iter().map(|l| l["report"]["recall"]["5"].as_f64().unwrap()).collect();
    let mean = summary["summary"]["recall"]["5"]["mean"].as_f64().unwrap();
    let std = summary["summary"]["recall"]["5"]["std"].as_f64().unwrap();
    assert!((mean - (r5[0] + r5[1]) / 2.0).abs() < 1e-12);
    assert!((std - (r5[0] - r5[1]).abs() / 2.0).abs() < 1e-12);
}

#[test]
fn parallel_evaluation_matches_sequential() {
    let ws = Workspace::new();
    ws.synth();
    ws.train("m.ckpt", &["--epochs", "1"]);
    let cfg = RunConfig::load(&ws.path("tiny.toml")).unwrap();
    let (split, _) = load_split(&ws.path("split.jsonl")).unwrap();
    let ck = Checkpoint::load(&ws.path("m.ckpt")).unwrap();
    let ev = &cfg.evaluation;
    assert_eq!(
        evaluate_model_parallel(&ck.model, &split, ev, "thrnn").unwrap(),
        evaluate_model(&ck.model, &split, ev, "thrnn").unwrap()
    );
    let fit = FitConfig::short_window();
    assert_eq!(
        evaluate_hawkes_parallel(&split, &fit, ev, "h").unwrap(),
        evaluate_hawkes(&split, &fit, ev, "h").unwrap()
    );
}

#[test]
fn short_hawkes_window_uses_last_fifteen_sessions() {
    let ws = Workspace::new();
    ws.synth();
    let cfg = RunConfig::load(&ws.path("tiny.toml")).unwrap();
    let (split, _) = load_split(&ws.path("split.jsonl")).unwrap();
    for u in 0..split.num_users() {
        let n = split.train[u].sessions.len();
        assert!(n > 15, "user {u} has only {n} training sessions");
        let mut truncated = split.clone();
        truncated.train[u].sessions.drain(..n - 15);
        let full = fit_user_hawkes(&split, u, &cfg.hawkes_short, &cfg.evaluation).unwrap();
        let last = fit_user_hawkes(&truncated, u, &cfg.hawkes_short, &cfg.evaluation).unwrap();
        // equal up to rounding of the absolute time offset
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs());
        assert!(
            close(full.params.gamma0, last.params.gamma0)
                && close(full.params.excitation, last.params.excitation)
                && close(full.params.decay, last.params.decay),
            "user {u}: {:?} vs {:?}",
            full.params,
            last.params
        );
    }
}

#[test]
fn predict_outputs_top_k_and_both_units() {
    let ws = Workspace::new();
    ws.synth();
    ws.train("m.ckpt", &["--epochs", "1"]);
    let history = r#"{"user":"u3","sessions":[
        {"items":["i0","i1","i2"],"start_time":0,"end_time":120},
        {"items":["i3","i4"],"start_time":90000,"end_time":90060}]}"#;
    std::fs::write(ws.path("h.json"), history).unwrap();
    let args = ["predict", "--checkpoint", "m.ckpt", "--history", "h.json", "--k", "5"];
    let first = ws.ok(&args);
    assert_eq!(first, ws.ok(&args));
    let rec: Value = serde_json::from_str(&first).unwrap();
    assert_eq!(rec["items"].as_array().unwrap().len(), 5);
    let s = rec["return_time_seconds"].as_f64().unwrap();
    let d = rec["return_time_days"].as_f64().unwrap();
    assert!(s > 0.0);
    assert_eq!(d, s / 86_400.0);

    let bad = history.replace("\"i4\"", "\"nope\"").replace("\"i0\"", "\"gone\"");
    std::fs::write(ws.path("bad.json"), bad).unwrap();
    let err = ws.fails(&["predict", "--checkpoint", "m.ckpt", "--history", "bad.json"]);
    assert!(err.contains("unknown items in history: gone, nope"), "{err}");
}

#[test]
fn incompatible_inputs_are_rejected() {
    let ws = Workspace::new();
    ws.synth();
    ws.train("m.ckpt", &["--epochs", "1"]);
    let other = TINY.replace("num_items = 6", "num_items = 8");
    std::fs::write(ws.path("other.toml"), other).unwrap();
    ws.ok(&["synth", "--config", "other.toml", "--out", "other.jsonl"]);
    let err = ws.fails(&["evaluate", "--split", "other.jsonl", "--checkpoint", "m.ckpt", "--out", "r.jsonl", "--config", "tiny.toml"]);
    assert!(err.contains("does not match the split"), "{err}");

    let text = std::fs::read_to_string(ws.path("split.jsonl")).unwrap();
    std::fs::write(ws.path("v2.jsonl"), text.replacen("\"version\":1", "\"version\":2", 1)).unwrap();
    let err = ws.fails(&["evaluate", "--split", "v2.jsonl", "--baselines", "popularity", "--out", "r.jsonl"]);
    assert!(err.contains("version 2"), "{err}");

    let mut bytes = std::fs::read(ws.path("m.ckpt")).unwrap();
    bytes[8] = 2;
    std::fs::write(ws.path("v2.ckpt"), bytes).unwrap();
    let err = ws.fails(&["predict", "--checkpoint", "v2.ckpt", "--history", "none.json"]);
    assert!(err.contains("version 2"), "{err}");
}

#[test]
fn config_errors_stop_before_work() {
    let ws = Workspace::new();
    std::fs::write(ws.path("bad.toml"), "[model]\nalpha_exp = 1.5\n").unwrap();
    let err = ws.fails(&["synth", "--config", "bad.toml", "--out", "s.jsonl"]);
    assert!(err.contains("alpha_exp"), "{err}");
    assert!(!ws.path("s.jsonl").exists());
    std::fs::write(ws.path("typo.toml"), "[model]\nlearning_rat = 0.1\n").unwrap();
    let err = ws.fails(&["synth", "--config", "typo.toml", "--out", "s.jsonl"]);
    assert!(err.contains("learning_rat"), "{err}");
}

#[test]
fn preprocess_raw_logs() {
    let ws = Workspace::new();
    let mut log = String::from("username,subreddit,utc\n");
    for u in 0..4 {
        for s in 0..5 {
            for k in 0..3 {
                let t = 1_500_000_000 + s * 86_400 + k * 300;
                log.push_str(&format!("user{u},sub{},{t}\n", (u + s + k) % 7));
            }
        }
    }
    std::fs::write(ws.path("reddit.csv"), &log).unwrap();
    let out = ws.ok(&["preprocess", "--dataset", "reddit", "--input", "reddit.csv", "--out", "r.jsonl"]);
    let summary: Value = serde_json::from_str(&out).unwrap();
    assert_eq!(summary["rows"], 60);
    assert_eq!(summary["malformed"], 0);
    assert_eq!(summary["stats"]["users"], 4);
    assert_eq!(summary["stats"]["sessions"], 20);
    load_split(&ws.path("r.jsonl")).unwrap();

    std::fs::write(ws.path("empty.csv"), "").unwrap();
    let err = ws.fails(&["preprocess", "--dataset", "reddit", "--input", "empty.csv", "--out", "e.jsonl"]);
    assert!(err.contains("zero data rows"), "{err}");

    let lastfm = "u1\t2009-05-04T23:08:57Z\tA1\tArtist\tT1\tSong\nbroken line\n";
    std::fs::write(ws.path("lastfm.tsv"), lastfm).unwrap();
    let err = ws.fails(&["preprocess", "--dataset", "lastfm", "--input", "lastfm.tsv", "--out", "l.jsonl"]);
    assert!(err.contains("1 of 2 rows are malformed"), "{err}");
}

#[test]
fn config_command_prints_a_loadable_profile() {
    let ws = Workspace::new();
    for p in ["lastfm", "reddit", "synthetic"] {
        let text = ws.ok(&["config", "--profile", p]);
        let cfg = RunConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, RunConfig::profile(cfg.profile));
    }
}
