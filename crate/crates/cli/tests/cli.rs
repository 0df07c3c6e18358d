//! The `opsc` binary driven as a subprocess.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use opsc_core::checkpoint::save_checkpoint;
use opsc_core::corpus::{build_vocab, ContractRecord, LabelType};
use opsc_core::model::{Model, ModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn opsc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opsc"))
        .current_dir(dir)
        .env_remove("OPSC_OUT")
        .args(args)
        .output()
        .expect("spawn opsc")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn disasm_text_and_json() {
    let tmp = tempfile::tempdir().unwrap();
    let text = ok(&opsc(tmp.path(), &["disasm", "--hex", "0x6001600201"]));
    assert_eq!(text, "PUSH1 PUSH1 ADD\n");
    let json: serde_json::Value = serde_json::from_str(&ok(&opsc(tmp.path(), &["disasm", "--json", "--hex", "6001600201"]))).unwrap();
    assert_eq!(json["tokens"], serde_json::json!(["PUSH1", "PUSH1", "ADD"]));
    assert_eq!(json["byte_len"], 5);

    std::fs::write(tmp.path().join("code.hex"), "0x5b00\n").unwrap();
    assert_eq!(ok(&opsc(tmp.path(), &["disasm", "code.hex"])), "JUMPDEST STOP\n");
}

#[test]
fn bad_input_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    assert_eq!(code(&opsc(d, &["disasm", "--hex", "0x6g"])), 3);
    assert_eq!(code(&opsc(d, &["disasm"])), 2);
    assert_eq!(code(&opsc(d, &["train-lm", "--prep", "missing"])), 3);
    assert_eq!(code(&opsc(d, &["train-clf", "--prep", "p"])), 2);

    std::fs::write(d.join("bad.toml"), "[lm]\nepoch = 3\n").unwrap();
    let out = opsc(d, &["--config", "bad.toml", "disasm", "--hex", "00"]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("epoch"));

    std::fs::write(d.join("neg.toml"), "[lm]\nbatch_size = 0\n").unwrap();
    assert_eq!(code(&opsc(d, &["--config", "neg.toml", "disasm", "--hex", "00"])), 2);

    std::fs::write(d.join("corpus.jsonl"), "{\"address\": \"a\", \"bytecode\": \"0x00\", \"label\": 9}\n").unwrap();
    let out = opsc(d, &["prep", "--corpus", "corpus.jsonl"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":1:"));
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    for out in ["a", "b"] {
        ok(&opsc(d, &["--seed", "7", "--out", out, "synth", "--per-class", "50"]));
    }
    let a = std::fs::read(d.join("a/corpus.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b/corpus.jsonl")).unwrap());
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 200);

    // The echoed configuration reproduces the run.
    ok(&opsc(d, &["--config", "a/config.toml", "--out", "c", "synth"]));
    assert_eq!(a, std::fs::read(d.join("c/corpus.jsonl")).unwrap());

    ok(&opsc(d, &["--seed", "8", "--out", "other", "synth", "--per-class", "50"]));
    assert_ne!(a, std::fs::read(d.join("other/corpus.jsonl")).unwrap());
}

#[test]
fn default_output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_opsc"))
        .current_dir(tmp.path())
        .env("OPSC_OUT", tmp.path().join("root"))
        .args(["synth", "--per-class", "3"])
        .output()
        .unwrap();
    ok(&out);
    assert!(tmp.path().join("root/synth/corpus.jsonl").is_file());
    assert!(tmp.path().join("root/synth/config.toml").is_file());
}

/// Rows-as-actual confusion matrix used by the predictions fixture.
const MATRIX: [[usize; 4]; 4] = [[648, 4, 3, 215], [59, 42, 0, 119], [1, 0, 135, 45], [78, 18, 5, 4759]];

#[test]
fn eval_predictions_file_reproduces_reference_table() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let mut csv = String::from("actual,predicted\n");
    for (a, row) in MATRIX.iter().enumerate() {
        for (p, &n) in row.iter().enumerate() {
            for _ in 0..n {
                csv.push_str(&format!("{},{}\n", a + 1, p + 1));
            }
        }
    }
    std::fs::write(d.join("preds.csv"), csv).unwrap();
    let table = ok(&opsc(d, &["--out", "ev", "eval", "--predictions", "preds.csv"]));
    assert!(table.contains("Test accuracy 91.1 (n = 6131)"), "{table}");

    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("ev/metrics.json")).unwrap()).unwrap();
    let pct = |v: &serde_json::Value| v.as_f64().unwrap() * 100.0;
    assert!((pct(&m["accuracy"]) - 91.0).abs() <= 0.6);
    let recalls: Vec<f64> = m["per_class"].as_array().unwrap().iter().map(|c| pct(&c["recall"])).collect();
    for (got, want) in recalls.iter().zip([74.0, 19.0, 75.0, 98.0]) {
        assert!((got - want).abs() <= 0.6, "{recalls:?}");
    }
    assert!((pct(&m["weighted"]["fbeta"]) - 90.0).abs() <= 0.6);
    assert!(m["per_class"][0]["auc"].is_null());

    let cm = std::fs::read_to_string(d.join("ev/confusion.csv")).unwrap();
    assert!(cm.starts_with("actual\\predicted,1,2,3,4\n1,648,4,3,215\n"), "{cm}");
}

#[test]
fn eval_predictions_with_probabilities_writes_roc() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("preds.csv"),
        "actual,predicted,p1,p2,p3,p4\n1,1,0.7,0.1,0.1,0.1\n2,2,0.1,0.7,0.1,0.1\n3,3,0.1,0.1,0.7,0.1\n4,4,0.1,0.1,0.1,0.7\n4,1,0.4,0.2,0.2,0.2\n",
    )
    .unwrap();
    ok(&opsc(d, &["--out", "ev", "eval", "--predictions", "preds.csv"]));
    let roc = std::fs::read_to_string(d.join("ev/roc.csv")).unwrap();
    assert!(roc.starts_with("class,threshold,fpr,tpr\n1,inf,0,0\n"), "{roc}");
    for k in 1..=4 {
        assert!(roc.lines().any(|l| l.starts_with(&format!("{k},"))));
    }

    std::fs::write(d.join("broken.csv"), "actual,predicted\n1,x\n").unwrap();
    assert_eq!(code(&opsc(d, &["--out", "ev2", "eval", "--predictions", "broken.csv"])), 3);
}

/// Untrained classifier and LM checkpoints over a small vocabulary.
fn fixture_models(d: &Path) {
    let recs: Vec<ContractRecord> = ["ADD MUL SUB", "ADD ADD"]
        .iter()
        .enumerate()
        .map(|(i, t)| ContractRecord {
            address: i.to_string(),
            tokens: t.split(' ').map(String::from).collect(),
            label: LabelType::Normal,
        })
        .collect();
    let vocab = build_vocab(&recs, 1).unwrap();
    vocab.save(&d.join("vocab.tsv")).unwrap();
    let cfg = ModelConfig {
        emb_size: 8,
        hidden_size: 8,
        n_layers: 1,
        head_hidden: 4,
        ..ModelConfig::desk(vocab.len())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let clf = Model::<f32>::new_classifier(cfg, &vocab, &mut rng).unwrap();
    save_checkpoint(&clf, &d.join("clf.ckpt"), &BTreeMap::new()).unwrap();
    let lm = Model::<f32>::new_lm(cfg, &vocab, &mut rng).unwrap();
    save_checkpoint(&lm, &d.join("lm.ckpt"), &BTreeMap::new()).unwrap();

    let other = build_vocab(&recs[1..], 1).unwrap();
    other.save(&d.join("other.tsv")).unwrap();
}

#[test]
fn predict_all_unknown_tokens_gives_distribution() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture_models(d);
    // JUMPDEST, CALLER and STOP are not in the vocabulary.
    let out = ok(&opsc(d, &["predict", "--checkpoint", "clf.ckpt", "--vocab", "vocab.tsv", "--hex", "0x5b3300"]));
    let p: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(p["unknown_tokens"], 3);
    let probs: Vec<f64> = p["probabilities"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(probs.len(), 4);
    assert!(probs.iter().all(|&x| x > 0.0 && x < 1.0));
    // Probabilities come from a 32-bit model.
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    let k = p["predicted"].as_u64().unwrap() as usize;
    assert!(probs.iter().all(|&x| x <= probs[k - 1]));
}

#[test]
fn checkpoint_errors_exit_with_code_four() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    fixture_models(d);
    let lm_as_clf = opsc(d, &["predict", "--checkpoint", "lm.ckpt", "--vocab", "vocab.tsv", "--hex", "01"]);
    assert_eq!(code(&lm_as_clf), 4);
    assert!(String::from_utf8_lossy(&lm_as_clf.stderr).contains("Lm"));

    assert_eq!(code(&opsc(d, &["predict", "--checkpoint", "clf.ckpt", "--vocab", "other.tsv", "--hex", "01"])), 4);

    let mut bytes = std::fs::read(d.join("clf.ckpt")).unwrap();
    bytes[10] ^= 0xff; // inside the vocab hash
    std::fs::write(d.join("tampered.ckpt"), &bytes).unwrap();
    assert_eq!(code(&opsc(d, &["predict", "--checkpoint", "tampered.ckpt", "--vocab", "vocab.tsv", "--hex", "01"])), 4);

    let full = std::fs::read(d.join("clf.ckpt")).unwrap();
    std::fs::write(d.join("short.ckpt"), &full[..full.len() - 3]).unwrap();
    let out = opsc(d, &["predict", "--checkpoint", "short.ckpt", "--vocab", "vocab.tsv", "--hex", "01"]);
    assert_eq!(code(&out), 4);
    assert!(String::from_utf8_lossy(&out.stderr).contains("head.fc2.bias"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(
        d.join("tiny.toml"),
        "[synth]\nper_class = 12\nmean_len = 40\nlen_jitter = 10\n\
         [model]\nemb_size = 8\nhidden_size = 8\nn_layers = 1\nhead_hidden = 4\n\
         [lm]\nepochs = 1\nbptt = 10\n[clf]\nepochs = 2\n[lr_find]\nsteps = 20\n",
    )
    .unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["--config", "tiny.toml", "--seed", "5"];
        full.extend_from_slice(args);
        ok(&opsc(d, &full))
    };
    run(&["--out", "s", "synth"]);
    run(&["--out", "p", "prep", "--corpus", "s/corpus.jsonl"]);
    run(&["--out", "sp", "split", "--corpus", "s/corpus.jsonl"]);
    assert_eq!(
        std::fs::read(d.join("p/split.json")).unwrap(),
        std::fs::read(d.join("sp/split.json")).unwrap()
    );
    run(&["--out", "lm", "train-lm", "--prep", "p"]);
    run(&["--out", "clf", "train-clf", "--prep", "p", "--lm", "lm/best.ckpt"]);
    run(&["--out", "rnd", "train-clf", "--prep", "p", "--random-encoder"]);
    run(&["--out", "ev", "eval", "--prep", "p", "--checkpoint", "clf/best.ckpt"]);
    run(&["--out", "lr", "lr-find", "--prep", "p"]);
    for f in [
        "p/vocab.tsv",
        "p/corpus.jsonl",
        "p/prep.json",
        "lm/history.jsonl",
        "clf/fbeta.csv",
        "clf/history.jsonl",
        "ev/metrics.json",
        "ev/confusion.csv",
        "ev/roc.csv",
        "lr/lr_find.csv",
        "lr/lr_find.json",
    ] {
        assert!(d.join(f).is_file(), "{f}");
    }
    for dir in ["s", "p", "sp", "lm", "clf", "rnd", "ev", "lr"] {
        assert!(d.join(dir).join("config.toml").is_file(), "{dir}");
    }
    let hist = std::fs::read_to_string(d.join("clf/history.jsonl")).unwrap();
    assert_eq!(hist.lines().count(), 2);
    let first: serde_json::Value = serde_json::from_str(hist.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["valid_fbeta"].is_number());
    let lr = std::fs::read_to_string(d.join("lr/lr_find.csv")).unwrap();
    assert!(lr.starts_with("lr,loss\n"));

    // An LM checkpoint trained on another vocabulary is refused.
    ok(&opsc(d, &["--seed", "6", "--out", "s2", "synth", "--per-class", "6", "--mean-len", "20", "--len-jitter", "2"]));
    ok(&opsc(d, &["--seed", "6", "--out", "p2", "prep", "--corpus", "s2/corpus.jsonl"]));
    let out = opsc(d, &["--config", "tiny.toml", "--out", "x", "train-clf", "--prep", "p2", "--lm", "lm/best.ckpt"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
}
