use std::path::Path;
use std::process::{Command, Output};

fn sketchmatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sketchmatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sketchmatch(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_gallery_identify() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let manifest = data.join("manifest.csv");
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, "seed = 4\n[train]\nepochs = 1\nbatch_size = 3\n").unwrap();

    ok(&["synth", "--identities", "6", "--size", "32", "--out", s(&data), "--config", s(&cfg)]);
    assert!(ok(&["ingest", "--manifest", s(&manifest)]).starts_with("ok: 6 entries, 6 identities, 12 attributes"));

    let run = root.join("run");
    ok(&["train", "--manifest", s(&manifest), "--out", s(&run), "--config", s(&cfg)]);
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2);

    let gallery = root.join("gallery.json");
    let ckpt = run.join("checkpoint.bin");
    ok(&["build-gallery", "--manifest", s(&manifest), "--checkpoint", s(&ckpt), "--out", s(&gallery), "--config", s(&cfg)]);

    let row = std::fs::read_to_string(&manifest).unwrap().lines().nth(3).unwrap().to_string();
    let fields: Vec<&str> = row.split(',').collect();
    let probe = data.join(fields[1]);
    let text = ok(&[
        "identify",
        "--probe",
        s(&probe),
        "--attributes",
        fields[3],
        "--gallery",
        s(&gallery),
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&cfg),
    ]);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("rank\tidentity\tdistance"));
    let ranked: Vec<(u32, f64)> = lines
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[1].parse().unwrap(), f[2].parse().unwrap())
        })
        .collect();
    assert_eq!(ranked.len(), 6);
    assert!(ranked.windows(2).all(|w| w[0].1 <= w[1].1));
    let mut ids: Vec<u32> = ranked.iter().map(|r| r.0).collect();
    ids.sort();
    assert_eq!(ids, vec![0, 1, 2, 3, 4, 5]);

    let bad = sketchmatch(&[
        "identify",
        "--probe",
        s(&probe),
        "--attributes",
        "0101",
        "--gallery",
        s(&gallery),
        "--checkpoint",
        s(&ckpt),
        "--config",
        s(&cfg),
    ]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn malformed_manifest_row_is_a_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--identities", "3", "--size", "16", "--out", s(&data)]);
    let manifest = data.join("manifest.csv");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let broken: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == 2 { l[..l.len() - 1].to_string() } else { l.to_string() })
        .collect();
    std::fs::write(&manifest, broken.join("\n") + "\n").unwrap();
    let out = sketchmatch(&["ingest", "--manifest", s(&manifest)]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error: schema error at row"), "{err}");
    assert_eq!(err.lines().count(), 1);
}

#[test]
fn usage_and_config_errors_exit_one() {
    assert_eq!(sketchmatch(&["frobnicate"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlr = 0.1\n").unwrap();
    let out = sketchmatch(&["ingest", "--manifest", "missing.csv", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(sketchmatch(&["--help"]).status.success());
}

#[test]
fn report_checks_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let data = root.join("data");
    let cfg = root.join("run.toml");
    std::fs::write(&cfg, "[model]\npreset = \"tiny\"\n[train]\nepochs = 1\n").unwrap();
    ok(&["synth", "--identities", "8", "--size", "16", "--out", s(&data)]);
    let eval = root.join("eval");
    let printed = ok(&[
        "evaluate",
        "--manifest",
        s(&data.join("manifest.csv")),
        "--folds",
        "1",
        "--out",
        s(&eval),
        "--config",
        s(&cfg),
    ]);
    assert!(printed.starts_with("rank-1\t"), "{printed}");
    let report = eval.join("report.json");
    let csv = root.join("cmc.csv");
    ok(&["report", "--report", s(&report), "--out", s(&csv), "--config", s(&cfg)]);
    assert!(std::fs::read_to_string(&csv).unwrap().starts_with("rank,accuracy\n1,"));

    let other = root.join("other.toml");
    std::fs::write(&other, "[model]\npreset = \"tiny\"\n[train]\nepochs = 2\n").unwrap();
    let out = sketchmatch(&["report", "--report", s(&report), "--out", s(&csv), "--config", s(&other)]);
    assert_eq!(out.status.code(), Some(2));
}
