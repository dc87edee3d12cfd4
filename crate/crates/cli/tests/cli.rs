use std::path::Path;
use std::process::{Command, Output};

fn uirate(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_uirate")).args(args).output().expect("spawn uirate")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn corpus(dir: &Path, n: usize) -> String {
    let out = dir.join("data");
    let o = uirate(&["gen-synthetic", "--n", &n.to_string(), "--size", "32", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    out.join("manifest.csv").to_str().unwrap().to_string()
}

#[test]
fn conv_cost_reports_both_costs() {
    let o = uirate(&["conv-cost", "--dk", "3", "--m", "32", "--n", "64", "--df", "16"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("4718592"), "{text}");
    assert!(text.contains("598016"), "{text}");
    assert!(text.contains("0.126736"), "{text}");
}

#[test]
fn conv_cost_preset_lists_layers() {
    let o = uirate(&["conv-cost", "--preset", "desk"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.lines().count() > 3);
    assert!(text.lines().last().unwrap().starts_with("total "));
}

#[test]
fn train_eval_predict_flow() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 12);
    let run = dir.path().join("run");
    let o = uirate(&["train", "--manifest", &manifest, "--epochs", "2", "--out", run.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let history = std::fs::read_to_string(run.join("history.csv")).unwrap();
    assert!(history.starts_with("epoch,split,loss"));
    let ck = run.join("checkpoint.json");
    assert!(ck.exists());
    let ck = ck.to_str().unwrap();
    let o = uirate(&["eval", "--checkpoint", ck, "--manifest", &manifest, "--split", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("MAE"), "{}", stdout(&o));
    let o = uirate(&["predict", "--checkpoint", ck, "--manifest", &manifest, "--clamp"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("image_path,split,avg_rating,predicted"));
    let preds: Vec<f64> = lines.map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(preds.len(), 12);
    assert!(preds.iter().all(|p| (1.0..=5.0).contains(p)));
}

#[test]
fn ablate_activation_suite() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 10);
    let table = dir.path().join("table.csv");
    let o = uirate(&[
        "ablate", "--manifest", &manifest, "--suite", "activations", "--epochs", "1", "--out", table.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(table).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "variant,status,MAE,MSE,RMSE,R2,Pearson-r,split,note");
    assert_eq!(lines.len(), 5);
    for (line, name) in lines[1..].iter().zip(["Swish", "Mish", "GoLU", "GELU"]) {
        assert!(line.starts_with(name), "{line}");
    }
}

#[test]
fn distill_demo_writes_records() {
    let o = uirate(&["distill-demo", "--steps", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 4);
}

#[test]
fn data_stats_summarises_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 16);
    let o = uirate(&["data-stats", "--manifest", &manifest]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("16"));
}

#[test]
fn json_without_timestamp_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let p = dir.path().join(name);
        let o = uirate(&["conv-cost", "--preset", "desk", "--json", p.to_str().unwrap(), "--no-timestamp"]);
        assert_eq!(code(&o), 0);
        std::fs::read(p).unwrap()
    };
    let a = run("a.json");
    assert_eq!(a, run("b.json"));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["command"], "conv-cost");
    assert!(v.get("generated_at_unix").is_none());
}

#[test]
fn help_is_available_everywhere() {
    assert_eq!(code(&uirate(&["--help"])), 0);
    for (sub, flag) in [
        ("train", "--manifest"),
        ("eval", "--checkpoint"),
        ("predict", "--clamp"),
        ("ablate", "--suite"),
        ("conv-cost", "--dk"),
        ("data-stats", "--manifest"),
        ("gen-synthetic", "--noise"),
        ("distill-demo", "--steps"),
    ] {
        let o = uirate(&[sub, "--help"]);
        assert_eq!(code(&o), 0, "{sub}");
        assert!(stdout(&o).contains(flag), "{sub} help lacks {flag}");
    }
}

#[test]
fn exit_codes() {
    assert_eq!(code(&uirate(&["conv-cost", "--bogus"])), 1);
    assert_eq!(code(&uirate(&["conv-cost", "--dk", "5", "--m", "1", "--n", "1", "--df", "2"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let manifest = corpus(dir.path(), 6);
    assert_eq!(code(&uirate(&["train", "--manifest", &manifest, "--lr", "-1"])), 1);
    assert_eq!(code(&uirate(&["train", "--manifest", "/nonexistent/manifest.csv"])), 2);
    assert_eq!(code(&uirate(&["eval", "--checkpoint", "/nonexistent.json", "--manifest", &manifest])), 2);
}
