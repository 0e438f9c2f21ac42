use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sac::Checkpoint32;
use serde_json::{json, Value};
use tempfile::TempDir;

fn sac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sac"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// The bundled toy config with paths pointed at `dir` and `edit` applied.
fn toy_config(dir: &Path, edit: impl FnOnce(&mut Value)) -> PathBuf {
    let text = std::fs::read_to_string(data_dir().join("toy.json")).unwrap();
    let mut cfg: Value = serde_json::from_str(&text).unwrap();
    cfg["paths"] = json!({
        "train_edges": data_dir().join("toy_train.tsv"),
        "test_edges": data_dir().join("toy_test.tsv"),
        "checkpoint_dir": dir.join("run"),
    });
    edit(&mut cfg);
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn report(o: &Output) -> Value {
    assert!(o.status.success(), "{}", stderr(o));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn toy_pipeline_trains_evaluates_and_exports() {
    let dir = TempDir::new().unwrap();
    let cfg = toy_config(dir.path(), |_| {});
    let cfg_s = path_str(&cfg);

    let out = sac(&["train", "--config", cfg_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt_path = dir.path().join("run/final.sack");
    assert!(ckpt_path.exists());

    let log = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let lines: Vec<Value> = log
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for l in &lines {
        for key in ["step", "vanilla", "nib", "total", "seconds"] {
            assert!(l.get(key).is_some(), "missing {key}");
        }
    }
    let first = lines.first().unwrap()["total"].as_f64().unwrap();
    let last = lines.last().unwrap()["total"].as_f64().unwrap();
    assert!(last < first, "loss {first} -> {last}");

    let ckpt_s = path_str(&ckpt_path);
    let trained = report(&sac(&[
        "evaluate",
        "--config",
        cfg_s,
        "--checkpoint",
        ckpt_s,
    ]));
    let random = report(&sac(&["evaluate", "--config", cfg_s, "--random"]));
    let (t, r) = (
        trained["recall_at_k"].as_f64().unwrap(),
        random["recall_at_k"].as_f64().unwrap(),
    );
    assert_eq!(trained["k"], 20);
    assert!(t >= 3.0 * r, "trained {t} vs random {r}");

    let ckpt = Checkpoint32::load(&ckpt_path).unwrap();
    let table = &ckpt.params.node_embeddings;
    let (n, d) = (table.rows(), table.last_dim());

    let bin = dir.path().join("emb.bin");
    let out = sac(&[
        "export",
        "--checkpoint",
        ckpt_s,
        "--out",
        path_str(&bin),
        "--format",
        "binary",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let bytes = std::fs::read(&bin).unwrap();
    assert_eq!(&bytes[..4], b"SACE");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    assert_eq!(
        u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        n as u64
    );
    assert_eq!(
        u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize,
        d
    );
    let bin_vals: Vec<f32> = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(bin_vals.len(), n * d);
    for (a, b) in bin_vals.iter().zip(table.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let tsv = dir.path().join("emb.tsv");
    let out = sac(&["export", "--checkpoint", ckpt_s, "--out", path_str(&tsv)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let text = std::fs::read_to_string(&tsv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), n);
    for (r, line) in rows.iter().enumerate() {
        let mut fields = line.split('\t');
        let label = fields.next().unwrap();
        let expected = if r < ckpt.user_ids.len() {
            format!("u:{}", ckpt.user_ids[r])
        } else {
            format!("i:{}", ckpt.item_ids[r - ckpt.user_ids.len()])
        };
        assert_eq!(label, expected);
        let vals: Vec<f32> = fields.map(|f| f.parse().unwrap()).collect();
        assert_eq!(vals, bin_vals[r * d..(r + 1) * d]);
    }
}

#[test]
fn missing_edge_file_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.tsv");
    let cfg = toy_config(dir.path(), |c| c["paths"]["train_edges"] = json!(missing));
    let out = sac(&["train", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("nope.tsv"), "{}", stderr(&out));
}

#[test]
fn invalid_config_is_rejected_before_writing() {
    let dir = TempDir::new().unwrap();
    let cfg = toy_config(dir.path(), |c| c["train"]["loss"]["tau"] = json!(0.0));
    let out = sac(&["train", "--config", path_str(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("loss.tau"), "{}", stderr(&out));
    assert!(!dir.path().join("run").exists());

    let cfg = toy_config(dir.path(), |c| {
        c["train"]["sampler"]["fanouts"] = json!([32, 32])
    });
    assert_eq!(
        sac(&["train", "--config", path_str(&cfg)]).status.code(),
        Some(2)
    );
    let cfg = toy_config(dir.path(), |c| c["train"]["bogus"] = json!(1));
    assert_eq!(
        sac(&["train", "--config", path_str(&cfg)]).status.code(),
        Some(2)
    );
}

#[test]
fn dimension_mismatch_exits_four() {
    let dir = TempDir::new().unwrap();
    let small = toy_config(dir.path(), |c| {
        c["train"]["epochs"] = json!(1);
        c["train"]["encoder"]["d"] = json!(8);
    });
    let out = sac(&["train", "--config", path_str(&small)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let ckpt = dir.path().join("run/final.sack");
    let wide = toy_config(dir.path(), |c| c["train"]["encoder"]["d"] = json!(16));
    let out = sac(&[
        "evaluate",
        "--config",
        path_str(&wide),
        "--checkpoint",
        path_str(&ckpt),
    ]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

#[test]
fn empty_test_file_reports_zero_users() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty.tsv");
    std::fs::write(&empty, "").unwrap();
    let cfg = toy_config(dir.path(), |c| c["paths"]["test_edges"] = json!(empty));
    let out = sac(&["evaluate", "--config", path_str(&cfg), "--random"]);
    let rep = report(&out);
    assert_eq!(rep["users"], 0);
    assert!(stderr(&out).contains("no interactions"), "{}", stderr(&out));
}

#[test]
fn resume_continues_the_log() {
    let dir = TempDir::new().unwrap();
    let cfg = toy_config(dir.path(), |c| {
        c["train"]["epochs"] = json!(2);
        c["train"]["checkpoint_interval"] = json!(4);
        c["train"]["encoder"]["d"] = json!(8);
    });
    let cfg_s = path_str(&cfg);
    let out = sac(&["train", "--config", cfg_s]);
    assert!(out.status.success(), "{}", stderr(&out));
    let full = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let mid = dir.path().join("mid.sack");
    std::fs::rename(dir.path().join("run/step-00000004.sack"), &mid).unwrap();

    let out = sac(&["train", "--config", cfg_s, "--resume", path_str(&mid)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let resumed = std::fs::read_to_string(dir.path().join("run/train_log.jsonl")).unwrap();
    let totals = |s: &str| -> Vec<(u64, f64)> {
        s.lines()
            .map(|l| {
                let v: Value = serde_json::from_str(l).unwrap();
                (v["step"].as_u64().unwrap(), v["total"].as_f64().unwrap())
            })
            .collect()
    };
    let tail: Vec<_> = totals(&resumed)
        .into_iter()
        .skip(totals(&full).len())
        .collect();
    let expected: Vec<_> = totals(&full).into_iter().filter(|(s, _)| *s >= 4).collect();
    assert_eq!(tail, expected);
}

#[test]
fn synth_blocks_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.tsv");
    let args = |out: &Path| {
        vec![
            "--seed".to_string(),
            "5".into(),
            "synth".into(),
            "--users".into(),
            "10".into(),
            "--items".into(),
            "6".into(),
            "--blocks".into(),
            "2".into(),
            "--p-in".into(),
            "1".into(),
            "--p-out".into(),
            "0".into(),
            "--out".into(),
            path_str(out).to_string(),
        ]
    };
    let run = |out: &Path| {
        let a: Vec<String> = args(out);
        let refs: Vec<&str> = a.iter().map(String::as_str).collect();
        sac(&refs)
    };
    assert!(run(&a).status.success());
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 5 * 3 * 2);
    let side: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("a.tsv.json")).unwrap())
            .unwrap();
    let ub = side["user_blocks"].as_array().unwrap();
    let ib = side["item_blocks"].as_array().unwrap();
    for line in text.lines() {
        let (u, i) = line.split_once('\t').unwrap();
        assert_eq!(
            ub[u.parse::<usize>().unwrap()],
            ib[i.parse::<usize>().unwrap()]
        );
    }

    let b = dir.path().join("b.tsv");
    assert!(run(&b).status.success());
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let out = sac(&[
        "synth",
        "--users",
        "4",
        "--items",
        "4",
        "--p-in",
        "1.5",
        "--p-out",
        "0",
        "--out",
        path_str(&b),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sample_debug_on_path_graph() {
    let dir = TempDir::new().unwrap();
    let edges = dir.path().join("path.tsv");
    // path u0 - i0 - u1, plus a separate edge so negatives exist
    std::fs::write(&edges, "0\t0\n1\t0\n2\t1\n").unwrap();
    let cfg = toy_config(dir.path(), |c| {
        c["paths"]["train_edges"] = json!(edges);
        c["train"]["sampler"]["fanouts"] = json!([2, 2]);
        c["train"]["walk"]["easy_count"] = json!(4);
    });
    for seed in 0..10 {
        let s = seed.to_string();
        let out = sac(&[
            "--seed",
            &s,
            "sample-debug",
            "--config",
            path_str(&cfg),
            "--user",
            "0",
        ]);
        let dump = report(&out);
        assert_eq!(dump["target"], "u:0");
        assert_eq!(dump["hops"][0], json!(["i:0", "i:0"]));
        for v in dump["hops"][1].as_array().unwrap() {
            assert!(v == "u:0" || v == "u:1");
        }
        assert_eq!(
            dump["masked_positives"][0],
            json!({"node": "i:0", "hop": 1})
        );
        for t in dump["kept_tokens"].as_array().unwrap() {
            assert!(t["hop"].as_u64().unwrap() <= 2);
            assert_ne!(t["node"], "i:0");
        }
        assert_eq!(dump["negatives"]["easy_count"], 4);
    }
    let out = sac(&["sample-debug", "--config", path_str(&cfg), "--user", "99"]);
    assert_eq!(out.status.code(), Some(3));
}
