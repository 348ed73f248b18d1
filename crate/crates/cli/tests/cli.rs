use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dualcassi::io;
use dualcassi::masks::template_mask;
use dualcassi::optics::{derive_seed, dual_measure};
use dualcassi::spectral::{default_spectral_response, synth_scene};
use dualcassi::{Dispersion, NoiseSpec, SceneSpec};
use tempfile::TempDir;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualcassi"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Nonzero exit with a single `error: <code>: ...` line on stderr.
fn fails(args: &[&str], code: &str) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "multi-line error: {err}");
    assert!(err.starts_with(&format!("error: {code}: ")), "{err}");
    err
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn synth_writes_one_file_per_seed_deterministically() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let listed = ok(&["synth", "--dims", "16x16x4", "--seeds", "1..4", "--out", p(&a)]);
    assert_eq!(listed.lines().count(), 4);
    ok(&["synth", "--dims", "16x16x4", "--seeds", "1..4", "--out", p(&b)]);
    for s in 1..=4 {
        let name = format!("scene_{s}.hsc");
        assert_eq!(fs::read(a.join(&name)).unwrap(), fs::read(b.join(&name)).unwrap());
    }
    let cube = io::load_cube(&a.join("scene_3.hsc")).unwrap();
    let spec = SceneSpec {
        nx: 16,
        ny: 16,
        bands: 4,
        ..SceneSpec::with_seed(3)
    };
    assert_eq!(cube, synth_scene(&spec).unwrap());
}

#[test]
fn usage_errors_are_single_lines() {
    fails(&["synth", "--dims", "16by16"], "usage");
    fails(&["synth", "--seeds", "5..2"], "usage");
    fails(&["frobnicate"], "usage");
}

#[test]
fn dynamic_simulation_requires_weights() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--dims", "16x16x4", "--out", p(dir.path())]);
    let err = fails(
        &[
            "simulate",
            "--scenes",
            p(dir.path()),
            "--mask",
            "dynamic",
            "--out",
            p(dir.path()),
        ],
        "parameter",
    );
    assert!(err.contains("dynamic mask requires --weights"), "{err}");
    fails(
        &["simulate", "--scenes", p(dir.path()), "--mask", "stripes"],
        "unknown-name",
    );
    fails(&["simulate", "--scenes", p(&dir.path().join("missing"))], "io");
}

#[test]
fn noiseless_simulation_matches_in_process_measurement() {
    let dir = TempDir::new().unwrap();
    ok(&["synth", "--dims", "16x16x4", "--seeds", "7", "--out", p(dir.path())]);
    let scene = dir.path().join("scene_7.hsc");
    ok(&[
        "simulate",
        "--scenes",
        p(&scene),
        "--d",
        "2",
        "--sigma",
        "0",
        "--mask-seed",
        "3",
        "--out",
        p(dir.path()),
    ]);
    let meas = io::load_measurement(&dir.path().join("scene_7.hsm")).unwrap();
    let rgb = io::load_rgb(&dir.path().join("scene_7.hsr")).unwrap();
    let mask = io::load_mask(&dir.path().join("scene_7.hsk")).unwrap();
    assert_eq!(meas.dispersion, Dispersion::Linear(2));

    let cube = io::load_cube(&scene).unwrap();
    let expect_mask = template_mask(16, 16, 0.5, 3).unwrap();
    assert_eq!(mask, expect_mask);
    let resp = default_spectral_response(4).unwrap();
    let noise = NoiseSpec::new(0.0, derive_seed(0, 0)).unwrap();
    let (r, m) = dual_measure(&cube, &expect_mask, &resp, &Dispersion::Linear(2), &noise).unwrap();
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<_>>();
    assert_eq!(f32s(&meas.data), f32s(&m.data));
    assert_eq!(f32s(&rgb.data), f32s(&r.data));
}

#[test]
fn classical_reconstruction_clears_the_floor() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    ok(&["synth", "--dims", "32x32x8", "--seeds", "1", "--out", p(d)]);
    ok(&["simulate", "--scenes", p(d), "--out", p(d)]);
    let out = ok(&[
        "reconstruct",
        "--meas",
        p(&d.join("scene_1.hsm")),
        "--rgb",
        p(&d.join("scene_1.hsr")),
        "--mask",
        p(&d.join("scene_1.hsk")),
        "--truth",
        p(&d.join("scene_1.hsc")),
        "--method",
        "classical",
        "--stages",
        "30",
        "--out",
        p(&d.join("rec.hsc")),
    ]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[1], "psnr_db,ssim,mrae,rmse");
    let psnr: f64 = lines[2].split(',').next().unwrap().parse().unwrap();
    assert!(psnr >= 25.0, "psnr {psnr}");
    assert!(d.join("rec.hsc").exists() && d.join("rec.metrics.csv").exists());

    let m = ok(&[
        "metrics",
        "--pred",
        p(&d.join("rec.hsc")),
        "--truth",
        p(&d.join("scene_1.hsc")),
        "--region",
        "0,0,8,8",
    ]);
    assert!(m.starts_with("psnr_db,ssim,mrae,rmse\n"));
    assert!(m.contains("curve_correlation,"));
}

#[test]
fn mismatched_mask_is_a_dimension_error() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["synth", "--dims", "16x16x4", "--out", p(&a)]);
    ok(&["synth", "--dims", "8x8x4", "--out", p(&b)]);
    ok(&["simulate", "--scenes", p(&a), "--out", p(&a)]);
    ok(&["simulate", "--scenes", p(&b), "--out", p(&b)]);
    fails(
        &[
            "reconstruct",
            "--meas",
            p(&a.join("scene_1.hsm")),
            "--rgb",
            p(&a.join("scene_1.hsr")),
            "--mask",
            p(&b.join("scene_1.hsk")),
        ],
        "dimension",
    );
}

#[test]
fn one_epoch_training_writes_checkpoint_and_trace() {
    let dir = TempDir::new().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let args = |out: &Path| {
        vec![
            "train".to_string(),
            "--dims".into(),
            "16x16x4".into(),
            "--seeds".into(),
            "1..2".into(),
            "--epochs".into(),
            "1".into(),
            "--seed".into(),
            "5".into(),
            "--out".into(),
            p(out).to_string(),
        ]
    };
    let run_a: Vec<String> = args(&a);
    ok(&run_a.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = fs::read_to_string(a.join("loss.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,loss,lr");
    assert_eq!(lines.len(), 2);
    assert!(!io::load_params(&a.join("model.hsp")).unwrap().is_empty());

    let run_b: Vec<String> = args(&b);
    ok(&run_b.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(
        fs::read(a.join("model.hsp")).unwrap(),
        fs::read(b.join("model.hsp")).unwrap()
    );
    assert_eq!(csv, fs::read_to_string(b.join("loss.csv")).unwrap());

    // the checkpoint drives the network method end to end
    ok(&["synth", "--dims", "16x16x4", "--seeds", "9", "--out", p(dir.path())]);
    ok(&[
        "simulate",
        "--scenes",
        p(&dir.path().join("scene_9.hsc")),
        "--out",
        p(dir.path()),
    ]);
    ok(&[
        "reconstruct",
        "--method",
        "dmdc",
        "--weights",
        p(&a.join("model.hsp")),
        "--meas",
        p(&dir.path().join("scene_9.hsm")),
        "--rgb",
        p(&dir.path().join("scene_9.hsr")),
        "--mask",
        p(&dir.path().join("scene_9.hsk")),
        "--out",
        p(&dir.path().join("net.hsc")),
    ]);
    assert!(dir.path().join("net.hsc").exists());
}

#[test]
fn bench_over_all_mask_types_gives_four_aggregates() {
    let dir = TempDir::new().unwrap();
    let d = dir.path();
    let t = d.join("train");
    ok(&[
        "train",
        "--dims",
        "16x16x4",
        "--seeds",
        "1",
        "--epochs",
        "1",
        "--mask",
        "dynamic",
        "--out",
        p(&t),
    ]);
    assert!(t.join("mask.hsp").exists());
    let bench = |out: &Path| {
        ok(&[
            "bench",
            "--dims",
            "16x16x4",
            "--seeds",
            "1..2",
            "--stages",
            "3",
            "--masks",
            "manual,rand,normal,dynamic",
            "--mask-weights",
            p(&t.join("mask.hsp")),
            "--out",
            p(out),
        ]);
        fs::read_to_string(out).unwrap()
    };
    let csv = bench(&d.join("one.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(
        lines[0],
        "scene_seed,mask_type,method,stages,use_rgb,use_ne,use_cross,psnr_db,ssim,mrae,rmse,seconds"
    );
    assert_eq!(lines.len(), 1 + 8 + 4);
    assert_eq!(lines.iter().filter(|l| l.starts_with("mean,")).count(), 4);
    // metric columns repeat exactly; only timing may differ
    let strip = |s: &str| -> Vec<String> { s.lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect() };
    assert_eq!(strip(&csv), strip(&bench(&d.join("two.csv"))));
    fails(&["bench", "--masks", "dynamic", "--seeds", "1"], "parameter");
}

#[test]
fn config_file_keys_are_checked_and_flags_win() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# scenes\ndims = 8x8x4\nseeds = 1..2\n").unwrap();
    let out = dir.path().join("s");
    let listed = ok(&["synth", "--config", p(&cfg), "--seeds", "3", "--out", p(&out)]);
    assert_eq!(listed.lines().count(), 1);
    let cube = io::load_cube(&out.join("scene_3.hsc")).unwrap();
    assert_eq!(cube.dims(), (8, 8, 4));

    fs::write(&cfg, "dims = 8x8x4\ncolour = blue\n").unwrap();
    fails(&["synth", "--config", p(&cfg)], "config");
    fs::write(&cfg, "epochs = 3\n").unwrap();
    fails(&["synth", "--config", p(&cfg)], "config");
}
