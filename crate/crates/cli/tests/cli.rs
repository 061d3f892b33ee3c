use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use darer::graphs::build_drtg;
use serde_json::{json, Value};

/// Small and fast enough for every command to finish in seconds.
const TINY: &[&str] = &["T=1", "d_hidden=8", "d_word=8", "epochs=2", "dropout=0"];

fn darer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_darer"))
        .args(args)
        .env_remove("DARER_OUT")
        .output()
        .expect("spawn darer")
}

fn ok(args: &[&str]) -> Output {
    let out = darer(args);
    assert!(out.status.success(), "{args:?}:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

/// Writes a small generated corpus and returns its `data=` override.
fn small_corpus(dir: &Path) -> String {
    let d = dir.join("corpus");
    ok(&["gen-synth", "--out", d.to_str().unwrap(), "--train", "12", "--dev", "4", "--test", "4", "--seed", "3"]);
    format!("data={}", d.display())
}

fn train(out: &Path, data: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap(), "--set", data];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    darer(&args)
}

#[test]
fn train_writes_outputs_and_records_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let out = tmp.path().join("run");
    let r = train(&out, &data, &["T=0", "seed=9"]);
    assert!(r.status.success(), "{}", stderr(&r));
    for f in ["checkpoint.json", "history.jsonl", "metrics.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let history = fs::read_to_string(out.join("history.jsonl")).unwrap();
    let header: Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["steps"], 0);
    assert_eq!(header["config"]["seed"], 9);
    assert!(header["parameters"].as_u64().unwrap() > 0);
    // one train and one dev record per epoch
    assert_eq!(history.lines().count(), 1 + 2 * 2);
    let m = read_json(&out.join("metrics.json"));
    assert!(m["best_epoch"].as_u64().unwrap() >= 1);
    assert!(m["test"]["sentiment"]["macro_f1"].is_number());
}

#[test]
fn refuses_to_overwrite_without_force() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let out = tmp.path().join("run");
    assert!(train(&out, &data, &[]).status.success());
    let again = train(&out, &data, &[]);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));
    let mut args = vec!["train", "--force", "--out", out.to_str().unwrap(), "--set", &data];
    args.extend_from_slice(TINY);
    ok(&args);
}

#[test]
fn rejects_unknown_config_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let r = darer(&["train", "--out", tmp.path().to_str().unwrap(), "--set", "hidden_size=3"]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("unknown config key"), "{}", stderr(&r));

    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "d_hidden = 8\nwarmup = 3\n").unwrap();
    let r = darer(&["train", "--out", tmp.path().to_str().unwrap(), "--config", cfg.to_str().unwrap()]);
    assert!(stderr(&r).contains("warmup"), "{}", stderr(&r));
    assert!(!tmp.path().join("checkpoint.json").exists());
}

#[test]
fn eval_checks_the_checkpoint_config_and_reports_each_step() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let out = tmp.path().join("run");
    assert!(train(&out, &data, &["T=3"]).status.success());
    let ck = out.join("checkpoint.json");
    let ck = ck.to_str().unwrap();

    let r = darer(&["eval", "--checkpoint", ck, "--set", &data, "steps=2", "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());
    assert!(stderr(&r).contains("steps"), "{}", stderr(&r));

    ok(&["eval", "--checkpoint", ck, "--split", "test", "--per-step", "--set", &data, "--out", out.to_str().unwrap()]);
    let e = read_json(&out.join("eval-test.json"));
    assert_eq!(e["split"], "test");
    let steps = e["per_step"].as_array().unwrap();
    assert_eq!(steps.len(), 4);
    assert_eq!(steps[3]["sentiment"], e["sentiment"]);
}

#[test]
fn memorizes_a_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    fs::create_dir_all(&dir).unwrap();
    let dialog = json!({
        "id": "d1",
        "utterances": [
            {"speaker": 1, "text": "i love this movie", "sentiment": "positive", "act": "statement"},
            {"speaker": 2, "text": "why do you", "sentiment": "neutral", "act": "question"},
            {"speaker": 1, "text": "the music is great", "sentiment": "positive", "act": "answer"},
            {"speaker": 2, "text": "no it is awful", "sentiment": "negative", "act": "disagreement"}
        ]
    });
    fs::write(dir.join("train.jsonl"), format!("{dialog}\n")).unwrap();
    let mut copy = dialog.clone();
    copy["id"] = json!("d1-copy");
    fs::write(dir.join("dev.jsonl"), format!("{copy}\n")).unwrap();
    let out = tmp.path().join("run");
    let data = format!("data={}", dir.display());
    ok(&[
        "train", "--out", out.to_str().unwrap(), "--set", &data, "T=1", "d_hidden=16", "d_word=16", "dropout=0",
        "gamma_s=1", "lr=0.01", "batch_size=1", "epochs=200", "patience=20",
    ]);
    let m = read_json(&out.join("metrics.json"));
    assert_eq!(m["dev"]["sentiment"]["macro_f1"], 1.0);
    assert_eq!(m["dev"]["act"]["macro_f1"], 1.0);
    assert!(m.get("test").is_none());
}

#[test]
fn sweep_keeps_the_requested_order() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let out = tmp.path().join("sweep");
    let r = ok(&["sweep-t", "--t-values", "2,0", "--epochs", "1", "--out", out.to_str().unwrap(), "--set", &data, "d_hidden=8", "d_word=8"]);
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(String::from_utf8_lossy(&r.stdout), csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "T,sentiment_f1,act_f1,mean_f1,best_epoch");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("2,") && lines[2].starts_with("0,"));

    let one = tmp.path().join("one");
    ok(&["sweep-t", "--t-values", "0", "--epochs", "1", "--out", one.to_str().unwrap(), "--set", &data, "d_hidden=8", "d_word=8"]);
    assert_eq!(fs::read_to_string(one.join("sweep.csv")).unwrap().lines().count(), 2);
}

#[test]
fn inspect_dumps_masked_row_stochastic_attention() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_corpus(tmp.path());
    let out = tmp.path().join("run");
    assert!(train(&out, &data, &["T=2"]).status.success());
    let ck = out.join("checkpoint.json");
    let corpus = data.trim_start_matches("data=");
    let first = fs::read_to_string(Path::new(corpus).join("dev.jsonl")).unwrap();
    let dialog: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let id = dialog["id"].as_str().unwrap();
    let n = dialog["utterances"].as_array().unwrap().len();

    ok(&["inspect", "--checkpoint", ck.to_str().unwrap(), "--dialog", id, "--step", "2", "--set", &data, "--out", out.to_str().unwrap()]);
    let safe: String = id.chars().map(|c| if c.is_alphanumeric() || c == '-' { c } else { '_' }).collect();
    let dump = read_json(&out.join(format!("attention-{safe}-step2.json")));
    assert_eq!(dump["step"], 2);
    assert_eq!(dump["nodes"].as_array().unwrap().len(), 2 * n);
    let rels = dump["relations"].as_array().unwrap();
    assert_eq!(rels.len(), 12);
    let g = build_drtg(n).unwrap();
    for rel in rels {
        let r = rel["id"].as_u64().unwrap() as usize;
        assert_eq!(rel["name"], g.relation_name(r));
        let w = rel["weights"].as_array().unwrap();
        for i in 0..2 * n {
            let row: Vec<f64> = w[i].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            let mut any = false;
            for (j, &a) in row.iter().enumerate() {
                if g.has_edge(r, j, i) {
                    any = true;
                } else {
                    assert_eq!(a, 0.0, "relation {r} ({i},{j}) is masked");
                }
            }
            let sum: f64 = row.iter().sum();
            let want = if any { 1.0 } else { 0.0 };
            assert!((sum - want).abs() < 1e-6, "relation {r} row {i} sums to {sum}");
        }
    }

    let r = darer(&["inspect", "--checkpoint", ck.to_str().unwrap(), "--dialog", id, "--step", "3", "--set", &data, "--out", out.to_str().unwrap()]);
    assert!(!r.status.success());

    let rg = tmp.path().join("rgcn");
    assert!(train(&rg, &data, &["variant=rgcn"]).status.success());
    let r = darer(&["inspect", "--checkpoint", rg.join("checkpoint.json").to_str().unwrap(), "--dialog", id, "--set", &data, "--out", rg.to_str().unwrap()]);
    assert!(stderr(&r).contains("unsupported variant"), "{}", stderr(&r));
}

#[test]
fn output_directory_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("from-env");
    let r = Command::new(env!("CARGO_BIN_EXE_darer"))
        .args(["gen-synth", "--train", "3", "--dev", "1", "--test", "1"])
        .env("DARER_OUT", &out)
        .output()
        .unwrap();
    assert!(r.status.success(), "{}", stderr(&r));
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_eq!(fs::read_to_string(out.join("train.jsonl")).unwrap().lines().count(), 3);
}

#[test]
fn gen_synth_is_seeded_and_validates_rules() {
    let tmp = tempfile::tempdir().unwrap();
    let gen = |name: &str, seed: &str| {
        let d = tmp.path().join(name);
        ok(&["gen-synth", "--out", d.to_str().unwrap(), "--train", "5", "--dev", "2", "--test", "2", "--seed", seed]);
        fs::read_to_string(d.join("train.jsonl")).unwrap()
    };
    assert_eq!(gen("a", "4"), gen("b", "4"));
    assert_ne!(gen("a", "4"), gen("c", "5"));
    let r = darer(&["gen-synth", "--out", tmp.path().to_str().unwrap(), "--disable-rule", "r9"]);
    assert!(!r.status.success());
}
