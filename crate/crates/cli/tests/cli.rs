use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use metasv::eval::{self, DcfParams};
use metasv::experiment::{heldout_trials, score_model};
use metasv::{Checkpoint, Corpus, RunConfig};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn metasv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_metasv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = metasv(args);
    assert!(
        out.status.success(),
        "metasv {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the smoke corpus and trial list into `dir`.
fn corpus_in(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus.bin");
    let trials = dir.join("trials.txt");
    ok(&[
        "gen-corpus",
        "--config",
        s(&smoke_config()),
        "--out",
        s(&corpus),
        "--trials",
        s(&trials),
    ]);
    (corpus, trials)
}

fn train(system: &str, corpus: &Path, out: &Path, extra: &[&str]) -> Output {
    let config = smoke_config();
    let mut args = vec![
        "train",
        "--system",
        system,
        "--config",
        s(&config),
        "--corpus",
        s(corpus),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    metasv(&args)
}

#[test]
fn gen_corpus_is_deterministic_and_sized() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ca, ta) = corpus_in(a.path());
    let (cb, tb) = corpus_in(b.path());
    assert_eq!(fs::read(&ca).unwrap(), fs::read(&cb).unwrap());
    assert_eq!(fs::read(&ta).unwrap(), fs::read(&tb).unwrap());

    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let corpus = Corpus::read(&ca).unwrap();
    assert_eq!(corpus.train_speakers, cfg.corpus.num_speakers);
    assert_eq!(corpus.heldout_speakers, cfg.corpus.heldout_speakers);
    assert_eq!(
        corpus.utterances.len(),
        cfg.corpus.num_speakers * cfg.corpus.utterances_per_speaker
            + cfg.corpus.heldout_speakers * cfg.corpus.heldout_utterances_per_speaker
    );

    let other = a.path().join("other.bin");
    ok(&[
        "gen-corpus",
        "--config",
        s(&smoke_config()),
        "--out",
        s(&other),
        "--seed",
        "99",
    ]);
    assert_ne!(fs::read(&ca).unwrap(), fs::read(&other).unwrap());
}

#[test]
fn missing_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut v: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(smoke_config()).unwrap()).unwrap();
    v["episode"]
        .as_object_mut()
        .unwrap()
        .remove("erase_fraction")
        .unwrap();
    let path = dir.path().join("broken.json");
    fs::write(&path, v.to_string()).unwrap();
    let out = metasv(&[
        "gen-corpus",
        "--config",
        s(&path),
        "--out",
        s(&dir.path().join("c.bin")),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("erase_fraction"), "{err}");
}

#[test]
fn train_baseline_records_only_ce_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = corpus_in(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert!(train("baseline", &corpus, &a, &[]).status.success());
    assert!(train("baseline", &corpus, &b, &[]).status.success());
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv, fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert_eq!(
        fs::read(a.join("checkpoint.bin")).unwrap(),
        fs::read(b.join("checkpoint.bin")).unwrap()
    );

    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,lr,loss_total,loss_ce,loss_pn,loss_contra"
    );
    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let mut n = 0;
    for line in lines {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0], n as f64);
        assert_eq!(f[4], 0.0);
        assert_eq!(f[5], 0.0);
        assert_eq!(f[2], f[3]);
        n += 1;
    }
    assert_eq!(n, cfg.train.steps_stage1);
}

#[test]
fn stage2_only_needs_init_and_matches_full_run() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = corpus_in(dir.path());
    let out = train("mltc", &corpus, &dir.path().join("x"), &["--stage2-only"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--init"));

    let out = train(
        "pn",
        &corpus,
        &dir.path().join("x"),
        &["--stage2-only", "--init", "nope.bin"],
    );
    assert!(
        !out.status.success(),
        "single-stage systems have no stage 2"
    );

    let pn = dir.path().join("pn");
    let full = dir.path().join("full");
    let split = dir.path().join("split");
    assert!(train("pn", &corpus, &pn, &["--seed", "2"]).status.success());
    assert!(train("mltc", &corpus, &full, &["--seed", "2"])
        .status
        .success());
    let init = pn.join("checkpoint.bin");
    let out = train(
        "mltc",
        &corpus,
        &split,
        &["--seed", "2", "--stage2-only", "--init", s(&init)],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert_eq!(
        fs::read(full.join("checkpoint.bin")).unwrap(),
        fs::read(split.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn eval_is_deterministic_and_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, trials) = corpus_in(dir.path());
    let model = dir.path().join("acl");
    assert!(train("acl", &corpus, &model, &[]).status.success());
    let ck = model.join("checkpoint.bin");
    let e1 = dir.path().join("e1");
    let e2 = dir.path().join("e2");
    for e in [&e1, &e2] {
        ok(&[
            "eval",
            "--checkpoint",
            s(&ck),
            "--corpus",
            s(&corpus),
            "--trials",
            s(&trials),
            "--out",
            s(e),
        ]);
    }
    let json = fs::read_to_string(e1.join("metrics.json")).unwrap();
    assert_eq!(json, fs::read_to_string(e2.join("metrics.json")).unwrap());
    assert_eq!(
        fs::read(e1.join("scores.txt")).unwrap(),
        fs::read(e2.join("scores.txt")).unwrap()
    );

    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let c = Corpus::read(&corpus).unwrap();
    let ts = heldout_trials(&c, &cfg).unwrap();
    assert_eq!(eval::read_trials(&trials).unwrap(), ts);
    let ck = Checkpoint::read(&ck).unwrap();
    let scored = score_model(&c, &ts, &ck.params, ck.coeffs.as_ref()).unwrap();
    let m = eval::metrics("acl", &scored, &DcfParams::default()).unwrap();
    assert_eq!(
        json,
        m.to_json(),
        "label defaults to the checkpoint's directory name"
    );

    let empty = dir.path().join("empty.txt");
    fs::write(&empty, "").unwrap();
    let out = metasv(&[
        "eval",
        "--checkpoint",
        s(&model.join("checkpoint.bin")),
        "--corpus",
        s(&corpus),
        "--trials",
        s(&empty),
        "--out",
        s(&dir.path().join("e3")),
    ]);
    assert!(!out.status.success());
}

#[test]
fn fuse_with_itself_keeps_metrics_and_is_symmetric() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, trials) = corpus_in(dir.path());
    let mut scores = Vec::new();
    for system in ["pn", "acl"] {
        let model = dir.path().join(system);
        assert!(train(system, &corpus, &model, &[]).status.success());
        ok(&[
            "eval",
            "--checkpoint",
            s(&model.join("checkpoint.bin")),
            "--corpus",
            s(&corpus),
            "--trials",
            s(&trials),
            "--out",
            s(&model),
        ]);
        scores.push(model.join("scores.txt"));
    }
    let fuse = |a: &Path, b: &Path, out: &Path| {
        ok(&[
            "fuse",
            "--scores-a",
            s(a),
            "--scores-b",
            s(b),
            "--trials",
            s(&trials),
            "--out",
            s(out),
        ]);
        fs::read_to_string(out.join("metrics.json")).unwrap()
    };
    let same = fuse(&scores[0], &scores[0], &dir.path().join("same"));
    let alone = fs::read_to_string(dir.path().join("pn/metrics.json")).unwrap();
    assert_eq!(same.replace("\"fusion\"", "\"pn\""), alone);

    let ab = fuse(&scores[0], &scores[1], &dir.path().join("ab"));
    let ba = fuse(&scores[1], &scores[0], &dir.path().join("ba"));
    assert_eq!(ab, ba);
    assert_eq!(
        fs::read(dir.path().join("ab/scores.txt")).unwrap(),
        fs::read(dir.path().join("ba/scores.txt")).unwrap()
    );
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn experiment_matches_individual_runs_and_reruns_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[
        "experiment",
        "--config",
        s(&smoke_config()),
        "--out-dir",
        s(&a),
    ]);
    ok(&[
        "experiment",
        "--config",
        s(&smoke_config()),
        "--out-dir",
        s(&b),
    ]);
    assert_eq!(tree(&a), tree(&b));

    let cfg = RunConfig::load(&smoke_config()).unwrap();
    let report = fs::read_to_string(a.join("report.csv")).unwrap();
    let rows: Vec<&str> = report
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    let mut expected: Vec<&str> = cfg.experiment.systems.iter().map(|s| s.name()).collect();
    expected.push("fusion");
    assert_eq!(rows, expected);

    let (corpus, _) = corpus_in(dir.path());
    let seed = cfg.experiment.seeds[1].to_string();
    let solo = dir.path().join("solo");
    assert!(train("mltc-acl", &corpus, &solo, &["--seed", &seed])
        .status
        .success());
    let cell = a.join(format!("cells/mltc-acl/seed-{seed}"));
    for f in ["checkpoint.bin", "metrics.csv"] {
        assert_eq!(
            fs::read(cell.join(f)).unwrap(),
            fs::read(solo.join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&[
        "eval",
        "--checkpoint",
        s(&solo.join("checkpoint.bin")),
        "--corpus",
        s(&corpus),
        "--trials",
        s(&a.join("trials.txt")),
        "--out",
        s(&solo),
        "--system",
        "mltc-acl",
    ]);
    for f in ["scores.txt", "metrics.json"] {
        assert_eq!(
            fs::read(cell.join(f)).unwrap(),
            fs::read(solo.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck", "--seeds", "2"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("worst"));
}

#[test]
fn unknown_system_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(
        "wavlm",
        &dir.path().join("c.bin"),
        &dir.path().join("o"),
        &[],
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wavlm"));
}
