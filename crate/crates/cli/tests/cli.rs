use std::path::Path;
use std::process::Command;

use serde_json::Value;

fn gatedgan(args: &[&str]) -> String {
    let out = Command::new(env!("CARGO_BIN_EXE_gatedgan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "gatedgan {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn last_json(stdout: &str) -> Value {
    serde_json::Deserializer::from_str(stdout)
        .into_iter::<Value>()
        .last()
        .unwrap()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_train_eval_and_latent_tools() {
    let tmp = tempfile::tempdir().unwrap();
    let mirror = tmp.path().join("mirror");
    let ds = tmp.path().join("ds");
    gatedgan::data::write_card_fixture(&mirror, 10, 3).unwrap();

    let fetched = last_json(&gatedgan(&["data", "fetch", "--source", p(&mirror), "--dir", p(&ds), "--res", "16"]));
    assert_eq!(fetched["entries"], 10);
    gatedgan(&["data", "crop", "--dir", p(&ds)]);
    let list = tmp.path().join("prune.txt");
    std::fs::write(&list, "card001 text overlay\nmissing-id\n").unwrap();
    let pruned = last_json(&gatedgan(&["data", "prune", "--dir", p(&ds), "--list", p(&list)]));
    assert_eq!((pruned["pruned"].as_u64(), pruned["kept"].as_u64()), (Some(1), Some(9)));
    assert_eq!(pruned["warnings"].as_array().unwrap().len(), 1);
    let report = tmp.path().join("select.json");
    gatedgan(&["data", "select", "--dir", p(&ds), "--keep", "0.8", "--embedding", "randproj", "--out", p(&report)]);
    let sel: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(sel["scores"].as_array().unwrap().len(), 9);
    let packed = tmp.path().join("set.pack");
    let info = last_json(&gatedgan(&["data", "pack", "--dir", p(&ds), "--out", p(&packed), "--seed", "1"]));
    assert_eq!(info["images"], 9);

    let run = tmp.path().join("run");
    let common = [
        "--data",
        p(&packed),
        "--res",
        "16",
        "--batch",
        "4",
        "--total-kimg",
        "0.012",
        "--seed",
        "5",
        "--latent-dim",
        "16",
        "--w-mean-samples",
        "64",
    ];
    let mut args = vec!["train", "--gates", "off:4-8", "--out", p(&run)];
    args.extend(common);
    let ckpts = gatedgan(&args);
    assert!(ckpts.trim().ends_with("final.ckpt"));
    let ckpt = run.join("final.ckpt");
    let metrics = std::fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let fid = last_json(&gatedgan(&[
        "eval", "fid", "--ckpt", p(&ckpt), "--ref", p(&packed), "--n", "16", "--extractor", "randproj",
    ]));
    assert!(fid["fid"].as_f64().unwrap() > 0.0);
    let stats = tmp.path().join("ref.json");
    gatedgan(&["eval", "stats", "--images", p(&packed), "--res", "16", "--extractor", "randproj", "--out", p(&stats)]);
    let fid2 = last_json(&gatedgan(&[
        "eval", "fid", "--ckpt", p(&ckpt), "--ref", p(&stats), "--n", "16", "--extractor", "randproj",
    ]));
    assert_eq!(fid["fid"], fid2["fid"]);

    let ns = gatedgan(&["eval", "noise-sensitivity", "--ckpt", p(&ckpt), "--n", "8", "--extractor", "randproj"]);
    let ns: Value = serde_json::from_str(&ns).unwrap();
    assert!(ns["fid"].as_f64().unwrap() >= 0.0);

    let spec = tmp.path().join("ablation.json");
    std::fs::write(
        &spec,
        r#"{"rows": [
            {"label": "gated, const", "gates": "off:4-8", "checkpoint": "run/final.ckpt", "noise_mode": "constant_per_run", "n_samples": 8},
            {"label": "gated, random", "gates": "off:4-8", "checkpoint": "run/final.ckpt", "noise_mode": "random_per_latent", "n_samples": 8}
        ], "seed": 3, "reference": "ref.json", "extractor": "randproj"}"#,
    )
    .unwrap();
    let table_json = tmp.path().join("table.json");
    let text = gatedgan(&["eval", "ablation", "--spec", p(&spec), "--out", p(&table_json)]);
    assert!(text.starts_with("Configuration"), "{text}");
    assert!(text.contains("gated, random"));
    let table: Value = serde_json::from_str(&std::fs::read_to_string(&table_json).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 2);

    let basis = tmp.path().join("basis.pca");
    let pca = last_json(&gatedgan(&["latent", "pca", "--ckpt", p(&ckpt), "--n", "64", "--out", p(&basis)]));
    assert_eq!(pca["components"], 16);
    let grid = tmp.path().join("grid.png");
    gatedgan(&[
        "latent", "mix-grid", "--ckpt", p(&ckpt), "--coarse", "1,2", "--fine", "3-5", "--cutoff", "2", "--out", p(&grid),
    ]);
    let g = gatedgan::data::Raster::decode(&std::fs::read(&grid).unwrap()).unwrap();
    assert_eq!((g.width, g.height), (48, 32));

    let target = ds.join("processed/card002.png");
    let archive = tmp.path().join("card.latent");
    let render = tmp.path().join("recon.png");
    let summary = last_json(&gatedgan(&[
        "latent",
        "project",
        "--ckpt",
        p(&ckpt),
        "--image",
        p(&target),
        "--out",
        p(&archive),
        "--steps",
        "20",
        "--render",
        p(&render),
    ]));
    assert!(summary["mse"].as_f64().unwrap().is_finite());
    let again = tmp.path().join("again.png");
    gatedgan(&["latent", "render", "--ckpt", p(&ckpt), "--archive", p(&archive), "--out", p(&again)]);
    assert_eq!(std::fs::read(&again).unwrap(), std::fs::read(&render).unwrap());

    let up = tmp.path().join("up.png");
    gatedgan(&["data", "sr", "--input", p(&target), "--out", p(&up)]);
    let r = gatedgan::data::Raster::decode(&std::fs::read(&up).unwrap()).unwrap();
    assert_eq!((r.width, r.height), (32, 32));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let out = Command::new(env!("CARGO_BIN_EXE_gatedgan"))
        .args(["eval", "fid", "--ckpt", "/nonexistent.ckpt", "--ref", "/nonexistent", "--n", "4"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.ckpt"));
    let out = Command::new(env!("CARGO_BIN_EXE_gatedgan"))
        .args(["data", "sr", "--input", "x.png", "--out", "y.png", "--backend", "esrgan"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("esrgan"));
}
