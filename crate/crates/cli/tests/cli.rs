use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn etrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_etrag")).args(args).env_remove("ETRAG_OUT_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = etrag(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 10] =
    ["--n-train", "24", "--n-dev", "4", "--n-test", "6", "--vocab-size", "80", "--n-entities", "10"];
const QUICK: [&str; 14] = [
    "--max-steps",
    "6",
    "--warmup-steps",
    "2",
    "--eval-every",
    "3",
    "--k",
    "2",
    "--subset-size",
    "4",
    "--batch-size",
    "4",
    "--patience",
    "2",
];

fn small_data(root: &Path, seed: &str) -> PathBuf {
    let dir = root.join(format!("data-{seed}"));
    let mut args = vec!["gen", "--out", p(&dir), "--seed", seed];
    args.extend(SMALL);
    ok(&args);
    dir
}

fn quick_train(root: &Path, data: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let dir = root.join(name);
    let mut args = vec!["train", "--data", p(data), "--out", p(&dir)];
    args.extend(QUICK);
    args.extend(extra);
    ok(&args);
    dir
}

#[test]
fn gen_defaults_and_determinism() {
    let t = tempfile::tempdir().unwrap();
    let a = t.path().join("a");
    ok(&["gen", "--out", p(&a)]);
    let lines = |f: &str| std::fs::read_to_string(a.join(f)).unwrap().lines().count();
    assert_eq!((lines("train.jsonl"), lines("dev.jsonl"), lines("test.jsonl")), (512, 128, 256));
    let b = t.path().join("b");
    let c = t.path().join("c");
    ok(&["gen", "--out", p(&b), "--seed", "7"]);
    ok(&["gen", "--out", p(&c), "--seed", "7"]);
    for f in ["train.jsonl", "dev.jsonl", "test.jsonl", "schema.json"] {
        assert_eq!(std::fs::read(b.join(f)).unwrap(), std::fs::read(c.join(f)).unwrap(), "{f}");
    }
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["synthetic"]["n_train"], 512);
    assert_eq!(m["seed"], 7);
    assert!(m["finished_at"].is_string());
}

#[test]
fn negative_only_task() {
    let t = tempfile::tempdir().unwrap();
    let d = t.path().join("neg");
    let mut args = vec!["gen", "--out", p(&d), "--n-labels", "1"];
    args.extend(SMALL);
    ok(&args);
    let text = std::fs::read_to_string(d.join("train.jsonl")).unwrap();
    assert!(text.lines().all(|l| l.contains("\"relation\":\"no_relation\"")));
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), "1");
    assert_eq!(etrag(&["gen", "--out", p(&data)]).status.code(), Some(1));
    assert_eq!(etrag(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(
        etrag(&["train", "--data", p(&data), "--tau", "0", "--out", p(&t.path().join("x"))]).status.code(),
        Some(1)
    );
    assert_eq!(etrag(&["--help"]).status.code(), Some(0));

    let broken = t.path().join("broken");
    std::fs::create_dir(&broken).unwrap();
    for f in ["schema.json", "dev.jsonl", "test.jsonl"] {
        std::fs::copy(data.join(f), broken.join(f)).unwrap();
    }
    std::fs::write(broken.join("train.jsonl"), "{not json}\n").unwrap();
    let out = etrag(&["train", "--data", p(&broken), "--out", p(&t.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));

    let z = t.path().join("z");
    let mut args = vec!["train", "--data", p(&data), "--out", p(&z), "--lr-base", "1e300"];
    args.extend(QUICK);
    let out = etrag(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("step"));
}

#[test]
fn train_writes_manifest_metrics_and_checkpoint() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), "2");
    let run = quick_train(t.path(), &data, "run", &[]);
    let csv = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("step,train_loss,dev_loss,dev_f1\n"));
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["k"], 2);
    assert_eq!(m["config"]["train"]["db_cap"], 5000);
    assert_eq!(m["inputs"].as_object().unwrap().len(), 4);
    assert!(m["outputs"]["checkpoint.json"].is_string());
    let again = quick_train(t.path(), &data, "again", &[]);
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), std::fs::read(again.join("metrics.csv")).unwrap());

    let plain = quick_train(t.path(), &data, "plain", &["--ablation", "no-retrieval"]);
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(plain.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["train"]["ablation"], "no-retrieval");
}

#[test]
fn eval_retrieve_stats_and_sweep() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), "3");
    let run = quick_train(t.path(), &data, "run", &[]);
    let ck = run.join("checkpoint.json");

    let ev = t.path().join("eval");
    let out = ok(&["eval", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&ev)]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("F1="));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ev.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["n_instances"], 6);

    let re = t.path().join("retrieve");
    let args =
        ["retrieve", "--checkpoint", p(&ck), "--data", p(&data), "--id", "train-00003", "--k", "1", "--as-stored"];
    let mut with_out = args.to_vec();
    with_out.extend(["--out", p(&re)]);
    let out = ok(&with_out);
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "train-00003");
    assert!(row[2].parse::<f64>().unwrap().abs() < 1e-12, "{text}");
    let missing = etrag(&[
        "retrieve",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&data),
        "--id",
        "nope",
        "--out",
        p(&t.path().join("m")),
    ]);
    assert_eq!(missing.status.code(), Some(1));

    let st = t.path().join("stats");
    ok(&["stats", "--checkpoint", p(&ck), "--data", p(&data), "--out", p(&st), "--levels", "1,3"]);
    let csv = std::fs::read_to_string(st.join("stats_trained.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    assert!(st.join("stats_untrained.csv").exists());

    let sw = t.path().join("sweep");
    let mut args = vec!["sweep", "--data", p(&data), "--out", p(&sw), "--ks", "0,1,3"];
    args.extend(QUICK);
    ok(&args);
    let csv = std::fs::read_to_string(sw.join("sweep.csv")).unwrap();
    let ks: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(ks, ["0", "1", "3"]);
}

#[test]
fn sweep_defaults_to_the_published_grid() {
    let help = String::from_utf8(etrag(&["sweep", "--help"]).stdout).unwrap();
    assert!(help.contains("0,1,3,5,10,15,20"), "{help}");
}

#[test]
fn ablate_tabulates_each_configuration() {
    let t = tempfile::tempdir().unwrap();
    let data = small_data(t.path(), "4");
    let out_dir = t.path().join("ablate");
    let mut args = vec!["ablate", "--data", p(&data), "--out", p(&out_dir), "--seeds", "2", "--jobs", "2"];
    args.extend(QUICK);
    ok(&args);
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 2);
    let table = std::fs::read_to_string(out_dir.join("table.txt")).unwrap();
    for name in ["none", "no-retriever-training", "no-warmup", "random-instances", "cls-embeddings", "no-retrieval"] {
        assert!(table.lines().any(|l| l.starts_with(name)), "{name} missing");
    }
}

#[test]
fn default_output_dir_from_environment() {
    let t = tempfile::tempdir().unwrap();
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_etrag"));
    cmd.args(["gen"]).args(SMALL).env("ETRAG_OUT_DIR", t.path());
    assert!(cmd.output().unwrap().status.success());
    assert!(t.path().join("gen").join("manifest.json").exists());
}
