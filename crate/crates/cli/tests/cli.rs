use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pgdvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgdvae"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = pgdvae(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen-data",
        "--units",
        "triangle,grid,hexagon",
        "--count-per-unit",
        "4",
        "--m-max",
        "4",
        "--pattern",
        "chain",
        "--seed",
        seed,
        "--out",
        p(&out),
    ]);
    out
}

const SMALL_CONFIG: &str = "epochs = 2
batch_size = 6
checkpoint_every = 1
seed = 3

[model]
d_l = 4
d_g = 3
hidden = 8
m_max = 4
";

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_small(dir.path(), "a.jsonl", "7");
    let b = gen_small(dir.path(), "b.jsonl", "7");
    let c = gen_small(dir.path(), "c.jsonl", "8");
    let text = fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 12);
    assert_eq!(text, fs::read_to_string(&b).unwrap());
    assert_ne!(text, fs::read_to_string(&c).unwrap());
    let manifest = fs::read_to_string(dir.path().join("a.jsonl.manifest.json")).unwrap();
    assert!(manifest.contains("\"subcommand\": \"gen-data\""));
    assert!(manifest.contains("\"seed\": 7"));
}

#[test]
fn eval_of_identical_sets() {
    let dir = tempfile::tempdir().unwrap();
    let x = gen_small(dir.path(), "x.jsonl", "1");
    let report = dir.path().join("report.json");
    ok(&["eval", "--ref", p(&x), "--gen", p(&x), "--train-set", p(&x), "--out", p(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["kld_cluster"].as_f64().unwrap() <= 1e-9);
    assert!(v["kld_dense"].as_f64().unwrap() <= 1e-9);
    assert_eq!(v["novelty"].as_f64().unwrap(), 0.0);
}

#[test]
fn train_sample_traverse_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "train.jsonl", "2");
    let cfg = dir.path().join("config.toml");
    fs::write(&cfg, SMALL_CONFIG).unwrap();
    let run = dir.path().join("run");
    ok(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)]);
    for name in ["final.json", "epochs.csv", "checkpoint-epoch-0001.json", "checkpoint-epoch-0002.json", "manifest.json"] {
        assert!(run.join(name).exists(), "{name} missing");
    }
    let log = fs::read_to_string(run.join("epochs.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let ckpt = run.join("final.json");
    let s1 = dir.path().join("s1.jsonl");
    let s2 = dir.path().join("s2.jsonl");
    for out in [&s1, &s2] {
        ok(&["sample", "--ckpt", p(&ckpt), "--count", "5", "--mode", "threshold", "--seed", "4", "--out", p(out)]);
    }
    assert_eq!(fs::read_to_string(&s1).unwrap(), fs::read_to_string(&s2).unwrap());
    assert_eq!(fs::read_to_string(&s1).unwrap().lines().count(), 5);

    let trav = dir.path().join("trav.jsonl");
    ok(&[
        "traverse", "--ckpt", p(&ckpt), "--latent", "local", "--dim", "1", "--values", "-2,0,2", "--out", p(&trav),
    ]);
    assert_eq!(fs::read_to_string(&trav).unwrap().lines().count(), 3);
    let steps = fs::read_to_string(dir.path().join("trav.jsonl.steps.csv")).unwrap();
    assert!(steps.starts_with("step,value,n,m,clustering,density\n0,-2,"));

    // Resuming a finished run with a larger budget continues it; changing a
    // model width is refused.
    ok(&[
        "train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run), "--resume", p(&ckpt), "--epochs", "3",
    ]);
    assert_eq!(fs::read_to_string(run.join("epochs.csv")).unwrap().lines().count(), 4);
    fs::write(&cfg, SMALL_CONFIG.replace("d_l = 4", "d_l = 5")).unwrap();
    let out = pgdvae(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run), "--resume", p(&ckpt)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("model.d_l"));
}

#[test]
fn decompose_then_assemble_roundtrips() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("tri.jsonl");
    ok(&[
        "gen-data", "--units", "triangle", "--count-per-unit", "3", "--m-max", "4", "--seed", "5", "--out", p(&data),
    ]);
    let parts = dir.path().join("parts.jsonl");
    ok(&["decompose", "--in", p(&data), "--n", "3", "--out", p(&parts)]);
    let full = ok(&["assemble", "--in", p(&parts)]);
    let source: Vec<serde_json::Value> = fs::read_to_string(&data)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let rebuilt: Vec<serde_json::Value> = String::from_utf8(full.stdout)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(source.len(), rebuilt.len());
    for (s, r) in source.iter().zip(&rebuilt) {
        let k = r["A"].as_array().unwrap().len();
        let trimmed: Vec<Vec<u64>> = s["A"].as_array().unwrap()[..k]
            .iter()
            .map(|row| row.as_array().unwrap()[..k].iter().map(|v| v.as_u64().unwrap()).collect())
            .collect();
        assert_eq!(serde_json::to_value(trimmed).unwrap(), r["A"]);
    }
}

#[test]
fn bfs_stability_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_small(dir.path(), "d.jsonl", "3");
    let out = ok(&["bfs-stability", "--data", p(&data), "--perms", "4", "--seed", "1"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("scheme,spearman,kendall\nbfs,"));
    assert_eq!(text, String::from_utf8(ok(&["bfs-stability", "--data", p(&data), "--perms", "4", "--seed", "1"]).stdout).unwrap());
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cases: Vec<Vec<String>> = vec![
        vec!["gen-data".into(), "--bogus".into()],
        vec![
            "eval".into(),
            "--ref".into(),
            p(&dir.path().join("missing.jsonl")).into(),
            "--gen".into(),
            "x".into(),
            "--train-set".into(),
            "x".into(),
            "--out".into(),
            "r.json".into(),
        ],
        {
            let data = gen_small(dir.path(), "d.jsonl", "1");
            let cfg = dir.path().join("bad.toml");
            fs::write(&cfg, "epochs = \"many\"\n").unwrap();
            vec![
                "train".into(),
                "--data".into(),
                p(&data).into(),
                "--config".into(),
                p(&cfg).into(),
                "--out".into(),
                p(&dir.path().join("run")).into(),
            ]
        },
    ];
    for args in cases {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = pgdvae(&refs);
        assert!(!out.status.success(), "{args:?} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert_eq!(err.trim_end().lines().count(), 1, "{args:?}: {err}");
    }
}
