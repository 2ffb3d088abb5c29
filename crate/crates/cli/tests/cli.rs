use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const TINY_CONFIG: &str = "\
[cpkan]
hidden = [8]
d_exp = 8
[msgraph]
d = 8
heads = 2
layers = 1
[mkcl]
channels = 8
hidden = 8
d_seq = 8
gate_hidden = 4
[fusion]
tokens = 2
d_model = 8
d_state = 4
d_fuse = 6
[head]
hidden = [16]
[train]
epochs = 3
batch_size = 8
";

fn hgmamba(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgmamba"))
        .args(args)
        .env_remove("HGMAMBA_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let ws = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(ws.path("tiny.toml"), TINY_CONFIG).unwrap();
        ws
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Generates a dataset from spec text and returns its directory.
    fn data(&self, name: &str, spec: &str) -> PathBuf {
        let spec_path = self.path(&format!("{name}.spec.toml"));
        fs::write(&spec_path, spec).unwrap();
        let out = self.path(name);
        let o = hgmamba(&["gen-data", "--spec", s(&spec_path), "--out", s(&out)]);
        assert!(o.status.success(), "{}", stderr(&o));
        out
    }

    fn train(&self, data: &Path, out: &str, extra: &[&str]) -> Output {
        let config = self.path("tiny.toml");
        let out = self.path(out);
        let mut args = vec!["train", "--config", s(&config), "--data", s(data), "--out", s(&out)];
        args.extend_from_slice(extra);
        hgmamba(&args)
    }
}

const SMALL_SPEC: &str = "samples_per_class = 10\n";

#[test]
fn gen_data_writes_four_files_with_matching_counts() {
    let ws = Workspace::new();
    let data = ws.data("d", "samples_per_class = 6\nnum_classes = 3\n");
    let mut names: Vec<String> = fs::read_dir(&data)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["expression.csv", "labels.tsv", "sequences.fasta", "structures.fasta"]);
    let labels = fs::read_to_string(data.join("labels.tsv")).unwrap();
    assert_eq!(labels.lines().count(), 18);
    let fasta = fs::read_to_string(data.join("sequences.fasta")).unwrap();
    assert_eq!(fasta.lines().filter(|l| l.starts_with('>')).count(), 18);
    let csv = fs::read_to_string(data.join("expression.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);
}

#[test]
fn gen_data_is_byte_identical_for_a_seed() {
    let ws = Workspace::new();
    let a = ws.data("a", SMALL_SPEC);
    let b = ws.data("b", SMALL_SPEC);
    for f in ["expression.csv", "labels.tsv", "sequences.fasta", "structures.fasta"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gen_data_rejects_short_sequences_before_writing() {
    let ws = Workspace::new();
    let spec = ws.path("bad.toml");
    fs::write(&spec, "seq_len = 12\n").unwrap();
    let out = ws.path("never");
    let o = hgmamba(&["gen-data", "--spec", s(&spec), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("seq_len"));
    assert!(!out.exists());
}

#[test]
fn train_eval_and_exports_agree() {
    let ws = Workspace::new();
    let data = ws.data("d", SMALL_SPEC);
    let o = ws.train(&data, "run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let printed = stdout(&o);
    let acc_line = printed.lines().find(|l| l.starts_with("test accuracy ")).expect("test accuracy printed");

    let log = fs::read_to_string(ws.path("run/metrics.csv")).unwrap();
    assert_eq!(log.lines().next().unwrap(), "epoch,split,loss,acc,mcc,f1,recall,precision");
    let last: Vec<&str> = log.lines().last().unwrap().split(',').collect();
    assert_eq!(last[1], "test");
    assert_eq!(acc_line, format!("test accuracy {}", last[3]));

    let ckpt = ws.path("run/checkpoint.hgmb");
    let e = hgmamba(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data)]);
    assert!(e.status.success(), "{}", stderr(&e));
    let report = stdout(&e);
    for (key, col) in [("loss", 2), ("accuracy", 3), ("mcc", 4), ("f1", 5), ("recall", 6), ("precision", 7)] {
        assert!(report.lines().any(|l| l == format!("{key} {}", last[col])), "{key} in {report}");
    }

    let emb = ws.path("fused.csv");
    let x = hgmamba(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--stage", "fused", "--out", s(&emb)]);
    assert!(x.status.success(), "{}", stderr(&x));
    let text = fs::read_to_string(&emb).unwrap();
    assert_eq!(text.lines().count(), 41);
    for line in text.lines() {
        assert_eq!(line.split(',').count(), 3 * 6 + 2);
    }
    let again = ws.path("fused2.csv");
    let y = hgmamba(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--stage", "fused", "--out", s(&again)]);
    assert!(y.status.success());
    assert_eq!(fs::read(&emb).unwrap(), fs::read(&again).unwrap());

    let seq = ws.path("seq.csv");
    let z = hgmamba(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--stage", "seq", "--out", s(&seq)]);
    assert!(z.status.success());
    assert!(fs::read_to_string(&seq).unwrap().lines().all(|l| l.split(',').count() == 8 + 2));

    let att = ws.path("att.csv");
    let a = hgmamba(&["export-attention", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&att)]);
    assert!(a.status.success(), "{}", stderr(&a));
    let att = fs::read_to_string(&att).unwrap();
    assert_eq!(att.lines().next().unwrap(), "id,layer,head,target,source,alpha");
    // Weights into one target node, per head, sum to one.
    let mut sums = std::collections::BTreeMap::<(String, String, String), f64>::new();
    for line in att.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        *sums.entry((f[0].into(), f[2].into(), f[3].into())).or_default() += f[5].parse::<f64>().unwrap();
    }
    assert!(sums.values().all(|v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn bimodal_without_expression_trains_and_rejects_exp_export() {
    let ws = Workspace::new();
    let data = ws.data("d", "samples_per_class = 10\nexpression_dim = 0\n");
    assert!(!data.join("expression.csv").exists());
    let o = ws.train(&data, "run", &["--modalities", "seq,str"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = ws.path("run/checkpoint.hgmb");
    let out = ws.path("exp.csv");
    let e = hgmamba(&["export-embeddings", "--checkpoint", s(&ckpt), "--data", s(&data), "--stage", "exp", "--out", s(&out)]);
    assert_eq!(e.status.code(), Some(1));
    assert!(stderr(&e).contains("modality absent"), "{}", stderr(&e));
    assert!(!out.exists());
}

#[test]
fn single_modality_is_a_usage_error() {
    let ws = Workspace::new();
    let data = ws.data("d", SMALL_SPEC);
    let o = ws.train(&data, "run", &["--modalities", "exp"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least two modalities"));
}

#[test]
fn corrupted_checkpoint_and_class_mismatch_are_reported() {
    let ws = Workspace::new();
    let data = ws.data("d", SMALL_SPEC);
    assert!(ws.train(&data, "run", &[]).status.success());
    let ckpt = ws.path("run/checkpoint.hgmb");

    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] ^= 0xff;
    let bad = ws.path("bad.hgmb");
    fs::write(&bad, bytes).unwrap();
    let e = hgmamba(&["eval", "--checkpoint", s(&bad), "--data", s(&data)]);
    assert_eq!(e.status.code(), Some(2));
    assert!(stderr(&e).contains("bad checkpoint header"));

    let three = ws.data("three", "samples_per_class = 10\nnum_classes = 3\n");
    let e = hgmamba(&["eval", "--checkpoint", s(&ckpt), "--data", s(&three)]);
    assert_eq!(e.status.code(), Some(1));
    assert!(stderr(&e).contains("3 classes but the model was built for 4"), "{}", stderr(&e));
}

#[test]
fn training_is_deterministic_and_seed_env_applies() {
    let ws = Workspace::new();
    let data = ws.data("d", SMALL_SPEC);
    assert!(ws.train(&data, "a", &[]).status.success());
    assert!(ws.train(&data, "b", &["--threads", "2"]).status.success());
    for f in ["metrics.csv", "checkpoint.hgmb"] {
        assert_eq!(fs::read(ws.path(&format!("a/{f}"))).unwrap(), fs::read(ws.path(&format!("b/{f}"))).unwrap());
    }
    let config = ws.path("tiny.toml");
    let out = ws.path("c");
    let o = Command::new(env!("CARGO_BIN_EXE_hgmamba"))
        .args(["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)])
        .env("HGMAMBA_SEED", "7")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_ne!(fs::read(ws.path("a/metrics.csv")).unwrap(), fs::read(out.join("metrics.csv")).unwrap());

    let o = Command::new(env!("CARGO_BIN_EXE_hgmamba"))
        .args(["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)])
        .env("HGMAMBA_SEED", "seven")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn config_errors_name_section_and_key() {
    let ws = Workspace::new();
    let data = ws.data("d", SMALL_SPEC);
    let config = ws.path("bad.toml");
    fs::write(&config, "[train]\nepochs = 2\nmomentum = 0.9\n").unwrap();
    let out = ws.path("run");
    let o = hgmamba(&["train", "--config", s(&config), "--data", s(&data), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("train") && err.contains("momentum"), "{err}");
    assert!(!out.exists());
}

#[test]
fn gradcheck_passes_and_detects_a_flipped_backward() {
    let o = hgmamba(&["gradcheck", "--module", "all"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let table = stdout(&o);
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for row in rows {
        let f: Vec<&str> = row.split_whitespace().collect();
        assert!(f[1].parse::<f64>().unwrap() < 1e-4, "{row}");
        assert_eq!(f[3], "ok");
    }

    let o = hgmamba(&["gradcheck", "--module", "cpkan", "--inject-sign-flip"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn gradcheck_selection_runs_one_module() {
    let o = hgmamba(&["gradcheck", "--module", "fusion"]);
    assert!(o.status.success());
    let table = stdout(&o);
    assert_eq!(table.lines().count(), 2);
    assert!(table.lines().nth(1).unwrap().starts_with("fusion"));
    assert_eq!(hgmamba(&["gradcheck", "--module", "lstm"]).status.code(), Some(1));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(hgmamba(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(hgmamba(&["train"]).status.code(), Some(1));
    assert_eq!(hgmamba(&["--threads", "0", "gradcheck", "--module", "head"]).status.code(), Some(1));
    assert_eq!(hgmamba(&["--help"]).status.code(), Some(0));
}
