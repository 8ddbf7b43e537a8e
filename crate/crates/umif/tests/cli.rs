use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use umif::formats::read_checkpoint;
use umif_core::optim::AdamWConfig;

fn umif(args: &[&str]) -> Output {
    umif_env(args, &[])
}

fn umif_env(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_umif"));
    c.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("UMIF_")) {
        c.env_remove(k);
    }
    c.envs(env.iter().copied());
    c.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_is_byte_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    for d in [&a, &b] {
        let o = umif(&["gen-data", "--num_shapes", "6", "--seed", "5", "--dataset", s(d)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    let (ta, tb) = (tree(&a), tree(&b));
    assert_eq!(ta.len(), 1 + 6 * 25);
    assert_eq!(ta, tb);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("d");
    let o = umif(&["gen-data", "--voxel_size", "12", "--dataset", s(&data)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(!data.exists());

    let o = umif(&["verify", "--suite", "gradchek"]);
    assert_eq!(code(&o), 2);
    let e = stderr(&o);
    assert!(e.contains("gradcheck") && e.contains("oracles") && e.contains("invariants"), "{e}");

    let missing = t.path().join("missing.ckpt");
    let o = umif(&["eval", "--checkpoint", s(&missing), "--views", ""]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = umif(&["eval", "--checkpoint", s(&missing), "--views", "1,25"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    assert_eq!(code(&umif(&["gen-data", "--bogus_key", "1"])), 2);
    assert_eq!(code(&umif(&["gen-data", "--epochs"])), 2);
    assert_eq!(code(&umif(&["frobnicate"])), 2);
    assert_eq!(code(&umif_env(&["gen-data"], &[("UMIF_NOT_A_KEY", "1")])), 2);
    assert_eq!(code(&umif(&["verify", "--mutant", "nonsense"])), 2);

    // a missing checkpoint is a runtime failure, not a usage error
    assert_eq!(code(&umif(&["eval", "--checkpoint", s(&missing)])), 1);
}

fn manifest_rows(dir: &Path) -> usize {
    fs::read_to_string(dir.join("manifest.tsv")).unwrap().lines().count() - 1
}

#[test]
fn config_layers_apply_in_order() {
    let t = tempfile::tempdir().unwrap();
    let file = t.path().join("run.cfg");
    fs::write(&file, "# toy run\nnum_shapes = 3\n").unwrap();
    let d = t.path().join("d");
    let run = |extra: &[&str], env: &[(&str, &str)]| {
        let _ = fs::remove_dir_all(&d);
        let mut args = vec!["gen-data", "--config", s(&file), "--dataset", s(&d)];
        args.extend_from_slice(extra);
        let o = umif_env(&args, env);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        manifest_rows(&d)
    };
    assert_eq!(run(&[], &[]), 3);
    assert_eq!(run(&[], &[("UMIF_NUM_SHAPES", "4")]), 4);
    assert_eq!(run(&["--num-shapes=5"], &[("UMIF_NUM_SHAPES", "4")]), 5);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    assert_eq!(code(&umif(&["gen-data", "--num_shapes", "8", "--seed", "2", "--dataset", s(&data)])), 0);
    let run = |name: &str, epochs: &str, resume: Option<&Path>| {
        let dir = t.path().join(name);
        let mut args = vec!["train".to_string()];
        if let Some(r) = resume {
            args.extend(["--resume".into(), s(r).into()]);
        }
        for (k, v) in [
            ("dataset", s(&data)),
            ("checkpoints", s(&dir.join("ckpt"))),
            ("reports", s(&dir.join("reports"))),
            ("epochs", epochs),
            ("batch_size", "2"),
            ("lr", "1e-3"),
            ("lr_decay_epochs", "2"),
        ] {
            args.extend([format!("--{k}"), v.to_string()]);
        }
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let o = umif(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        dir
    };
    let full = run("full", "3", None);
    let part = run("part", "1", None);
    run("part", "3", Some(&part.join("ckpt/last.ckpt")));

    let loss = fs::read_to_string(full.join("reports/loss.csv")).unwrap();
    assert_eq!(loss, fs::read_to_string(part.join("reports/loss.csv")).unwrap());
    let lines: Vec<&str> = loss.lines().collect();
    assert_eq!(lines[0], "epoch,lr,train_dice,val_dice");
    assert_eq!(lines.len(), 5);
    let lr: Vec<f64> = lines[1..].iter().map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(lr[1], 1e-3);
    assert!((lr[3] - 1e-4).abs() < 1e-12, "decay after epoch 2: {lr:?}");
    // checkpoints also store the run config, whose output paths differ
    let read = |d: &Path, e: usize| {
        let b = fs::read(d.join(format!("ckpt/epoch_{e:03}.ckpt"))).unwrap();
        read_checkpoint(&b, AdamWConfig::default()).unwrap()
    };
    let strip = |text: &str| -> String {
        text.lines().filter(|l| !l.starts_with("checkpoints") && !l.starts_with("reports")).collect()
    };
    for e in 1..=3 {
        let (a, b) = (read(&full, e), read(&part, e));
        assert_eq!(a.params, b.params, "epoch {e}");
        assert_eq!(a.state, b.state, "epoch {e}");
        if e > 1 {
            assert_eq!(strip(&a.config_text), strip(&b.config_text));
        }
    }
}

#[test]
fn verify_reports_and_catches_a_mutant() {
    let o = umif(&["verify", "--suite", "oracles"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    let mut rows = csv::Reader::from_reader(out.as_bytes());
    assert_eq!(rows.headers().unwrap(), vec!["suite", "check", "passed", "detail"]);
    assert!(rows.records().all(|r| &r.unwrap()[2] == "true"));

    let o = umif(&["verify", "--suite", "gradcheck", "--mutant", "mul"]);
    assert_eq!(code(&o), 1);
    let out = String::from_utf8(o.stdout).unwrap();
    let failed: Vec<String> = csv::Reader::from_reader(out.as_bytes())
        .records()
        .map(|r| r.unwrap())
        .filter(|r| &r[2] == "false")
        .map(|r| r[1].to_string())
        .collect();
    assert!(failed.contains(&"op/mul".to_string()), "{failed:?}");
}

#[test]
fn eval_and_inspect_write_reports() {
    let t = tempfile::tempdir().unwrap();
    let (data, ckpt, rep) = (t.path().join("data"), t.path().join("ckpt"), t.path().join("rep"));
    let common = ["--dataset", s(&data), "--checkpoints", s(&ckpt), "--reports", s(&rep)];
    let with = |cmd: &[&str]| {
        let mut a: Vec<&str> = cmd.to_vec();
        a.extend_from_slice(&common);
        let o = umif(&a);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        o
    };
    with(&["gen-data", "--num_shapes", "6"]);
    with(&["train", "--epochs", "1"]);
    let last = ckpt.join("last.ckpt");
    let o = with(&["eval", "--checkpoint", s(&last), "--views", "1,3"]);
    let summary = String::from_utf8(o.stdout).unwrap();
    assert!(summary.starts_with("n_views,count,mean_iou,mean_fscore,mean_dice\n"), "{summary}");
    assert_eq!(fs::read_to_string(rep.join("eval_summary.csv")).unwrap(), summary);
    let rows = fs::read_to_string(rep.join("eval_rows.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "sample_id,n_views,iou,fscore,dice");
    assert_eq!(rows.lines().count(), 1 + 3 * 2);

    let seed = fs::read_to_string(data.join("manifest.tsv")).unwrap().lines().nth(1).unwrap().split('\t').next().unwrap().to_string();
    let n = 3;
    with(&["inspect", "--checkpoint", s(&last), "--sample", &seed, "--views", "3"]);
    let dir = rep.join("inspect").join(&seed);
    let cfg = umif::config::RunConfig::default();
    let (t_per, k, g) = (cfg.model.encoder.tokens_per_view(), cfg.model.encoder.k, cfg.model.encoder.groups);
    let positions = cfg.model.encoder.ivdb_positions();
    for p in &positions {
        let text = fs::read_to_string(dir.join(format!("ivdb{p}_neighbors.csv"))).unwrap();
        let mut per_anchor: BTreeMap<(String, String), usize> = BTreeMap::new();
        for r in csv::Reader::from_reader(text.as_bytes()).records() {
            let r = r.unwrap();
            *per_anchor.entry((r[0].to_string(), r[1].to_string())).or_default() += 1;
            assert_ne!(&r[0], &r[5], "neighbor from the anchor's own view");
        }
        assert_eq!(per_anchor.len(), n * t_per);
        assert!(per_anchor.values().all(|&c| c == k * (n - 1)));
    }
    let text = fs::read_to_string(dir.join("clusters.csv")).unwrap();
    let recs: Vec<csv::StringRecord> = csv::Reader::from_reader(text.as_bytes()).records().map(|r| r.unwrap()).collect();
    assert_eq!(recs.len(), n * t_per);
    let groups: std::collections::BTreeSet<&str> = recs.iter().map(|r| r.get(4).unwrap()).collect();
    assert_eq!(groups.len(), g);
    assert_eq!(recs.iter().filter(|r| &r[5] == "true").count(), g);

    let o = umif(&["inspect", "--checkpoint", s(&last), "--sample", "999999", "--dataset", s(&data)]);
    assert_eq!(code(&o), 2);
}
