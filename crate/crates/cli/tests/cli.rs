use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fsat(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fsat"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A model trained for a couple of steps on the held-out split.
fn tiny_model(dir: &Path) -> PathBuf {
    let model = dir.join("m.fsat");
    let out = fsat(&[
        "train",
        "--data",
        s(&fixtures().join("heldout")),
        "--out",
        s(&model),
        "--desk",
        "--max-steps",
        "2",
        "--patch",
        "32",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    model
}

#[test]
fn train_fuse_eval_bench_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let trace = fs::read_to_string(format!("{}.trace.csv", s(&model))).unwrap();
    assert_eq!(trace.lines().count(), 3);

    let ir = fixtures().join("heldout/ir/scene_01.pgm");
    let vi = fixtures().join("heldout/vi/scene_01.pgm");
    let fused = dir.path().join("f.pgm");
    let out = fsat(&[
        "fuse",
        "--ir",
        s(&ir),
        "--vi",
        s(&vi),
        "--model",
        s(&model),
        "--out",
        s(&fused),
    ]);
    assert!(out.status.success());
    let bytes = fs::read(&fused).unwrap();
    assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
    assert_eq!(bytes.len(), 13 + 64 * 64);

    // a color visible image through the luma route
    let rgb_path = dir.path().join("vi.ppm");
    let mut rgb = b"P6\n64 64\n255\n".to_vec();
    for &v in &fs::read(&vi).unwrap()[13..] {
        rgb.extend([v, v / 2, 255 - v]);
    }
    fs::write(&rgb_path, &rgb).unwrap();
    let color = dir.path().join("f.ppm");
    let out = fsat(&[
        "fuse",
        "--ir",
        s(&ir),
        "--vi",
        s(&rgb_path),
        "--model",
        s(&model),
        "--out",
        s(&color),
        "--rgb",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(fs::read(&color).unwrap().starts_with(b"P6\n64 64\n255\n"));

    let csv = dir.path().join("m.csv");
    let out = fsat(&[
        "eval",
        "--data",
        s(&fixtures().join("heldout")),
        "--model",
        s(&model),
        "--csv",
        s(&csv),
    ]);
    assert!(out.status.success());
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("pair,mi,ncie,qabf,ssim,seconds\n"));
    assert_eq!(table.lines().count(), 6);

    let out = fsat(&[
        "bench",
        "--data",
        s(&fixtures().join("heldout")),
        "--model",
        s(&model),
        "--repeats",
        "1",
    ]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("\nmean,"));
}

#[test]
fn exit_codes_separate_usage_data_and_verification() {
    assert_eq!(fsat(&["train"]).status.code(), Some(2));
    assert_eq!(fsat(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(
        fsat(&["train", "--data", "x", "--out", "y", "--ablation", "bogus"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        fsat(&["gradcheck", "--config", "/no/such/file"])
            .status
            .code(),
        Some(2)
    );

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.fsat");
    let out = fsat(&[
        "eval",
        "--data",
        s(&fixtures().join("heldout")),
        "--model",
        s(&missing),
        "--csv",
        "x.csv",
    ]);
    assert_eq!(out.status.code(), Some(3));
    let bad_model = dir.path().join("bad.fsat");
    fs::write(&bad_model, b"not a model").unwrap();
    let out = fsat(&[
        "bench",
        "--data",
        s(&fixtures().join("heldout")),
        "--model",
        s(&bad_model),
    ]);
    assert_eq!(out.status.code(), Some(3));

    let out = fsat(&["gradcheck", "--samples", "2", "--tolerance", "1e-300"]);
    assert_eq!(out.status.code(), Some(4));
    assert_eq!(
        fsat(&["gradcheck", "--samples", "2"]).status.code(),
        Some(0)
    );
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("cfg.fsat");
    let cfg = dir.path().join("run.cfg");
    fs::write(
        &cfg,
        format!(
            "# desk run\ndata={}\nout={}\ndesk=true\nmax_steps=50\npatch=32\nablation=no_itm\n",
            s(&fixtures().join("heldout")),
            s(&model)
        ),
    )
    .unwrap();
    let out = fsat(&[
        "train",
        "--config",
        s(&cfg),
        "--max-steps",
        "1",
        "--ablation",
        "no_fsam",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let trace = fs::read_to_string(format!("{}.trace.csv", s(&model))).unwrap();
    assert_eq!(trace.lines().count(), 2);
    let loaded = fsat_core::network::read_model::<f32>(
        &model,
        &fsat_core::network::StructureRegistry::with_defaults(),
    )
    .unwrap();
    assert_eq!(loaded.0.config().structure, "no_fsam");
}
