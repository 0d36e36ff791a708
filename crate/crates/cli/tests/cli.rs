use std::path::Path;
use std::process::{Command, Output};

fn gsr(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gsr"))
        .args(args)
        .current_dir(dir)
        .env("GSR_THREADS", "1")
        .output()
        .expect("spawn gsr")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gsr(dir, args);
    assert!(
        out.status.success(),
        "gsr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

/// Small scene shared by most tests.
fn scene(dir: &Path) {
    ok(dir, &["synth", "--seed", "3", "--count", "200", "--sh-degree", "2", "--out", "scene.ply"]);
    ok(dir, &["cameras", "--count", "10", "--width", "32", "--height", "32", "--out", "cams.json"]);
}

const FAST: &[&str] = &["--cloud", "scene.ply", "--cameras", "cams.json", "--iterations", "15", "--quality", "3"];

fn with(base: &[&str], extra: &[&str]) -> Vec<String> {
    base.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn ok_owned(dir: &Path, args: Vec<String>) -> String {
    ok(dir, &args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn help_lists_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let help = ok(dir.path(), &["--help"]);
    for sub in [
        "synth",
        "cameras",
        "render",
        "compress",
        "decompress",
        "pairs",
        "train-restorer",
        "encode-residual",
        "restore",
        "refine",
        "eval",
        "rd-sweep",
        "ablate",
        "plot",
        "run",
    ] {
        assert!(help.contains(sub), "{sub} missing from help");
        ok(dir.path(), &[sub, "--help"]);
    }
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&gsr(dir.path(), &["synth", "--out", "a.ply", "--bogus"])), 2);
    assert_eq!(code(&gsr(dir.path(), &["frobnicate"])), 2);
    scene(dir.path());
    // Quality out of range is an invalid argument.
    let args = with(&["run", "--no-prior", "--out-dir", "o"], FAST);
    let mut args: Vec<&str> = args.iter().map(String::as_str).collect();
    args.extend(["--quality", "11"]);
    assert_eq!(code(&gsr(dir.path(), &args)), 2);
    // The learned prior needs a checkpoint.
    let args = with(&["run", "--out-dir", "o"], FAST);
    assert_eq!(code(&gsr(dir.path(), &args.iter().map(String::as_str).collect::<Vec<_>>())), 2);
}

#[test]
fn corrupt_inputs_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("junk.gscc"), b"not a container").unwrap();
    let out = gsr(dir.path(), &["decompress", "--input", "junk.gscc", "--out", "x.ply"]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("decompress"));
    let out = gsr(dir.path(), &["decompress", "--input", "missing.gscc", "--out", "x.ply"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn compression_commands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    ok(d, &["compress", "--cloud", "scene.ply", "--out", "a.gscc"]);
    ok(d, &["compress", "--cloud", "scene.ply", "--out", "b.gscc"]);
    assert_eq!(std::fs::read(d.join("a.gscc")).unwrap(), std::fs::read(d.join("b.gscc")).unwrap());
    ok(d, &["decompress", "--input", "a.gscc", "--out", "out/a.ply"]);
    ok(d, &["render", "--cloud", "a.gscc", "--cameras", "cams.json", "--out-dir", "deg", "--views", "0,3"]);
    ok(d, &["render", "--cloud", "scene.ply", "--cameras", "cams.json", "--out-dir", "gt"]);
    assert!(d.join("deg/view_0003.png").exists() && !d.join("deg/view_0001.png").exists());
    assert!(d.join("gt/view_0009.png").exists());
    ok(d, &["encode-residual", "--original", "gt/view_0000.png", "--degraded", "deg/view_0000.png", "--out", "r.gsrs"]);
    ok(d, &["restore", "--degraded", "deg/view_0000.png", "--residual", "r.gsrs", "--out", "targets/view_0000.png"]);
    ok(d, &["refine", "--cloud", "a.gscc", "--cameras", "cams.json", "--targets-dir", "targets", "--iterations", "5", "--out", "refined.ply", "--log", "refine.csv"]);
    let log = std::fs::read_to_string(d.join("refine.csv")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let report = ok(d, &["eval", "--cloud", "refined.ply", "--reference", "scene.ply", "--cameras", "cams.json", "--out", "report.csv", "--error-maps", "maps"]);
    assert!(report.starts_with("views 10 psnr"), "{report}");
    assert!(d.join("maps/view_0005.png").exists());
}

#[test]
fn pipeline_runs_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    for out in ["r1", "r2"] {
        ok_owned(d, with(&["run", "--no-prior", "--out-dir", out], FAST));
    }
    for f in ["compressed.gscc", "refined.ply", "rd.csv", "report.csv", "refine_log.csv", "run.json"] {
        assert_eq!(std::fs::read(d.join("r1").join(f)).unwrap(), std::fs::read(d.join("r2").join(f)).unwrap(), "{f}");
    }
    let residuals: Vec<_> = std::fs::read_dir(d.join("r1/residuals")).unwrap().collect();
    assert!(!residuals.is_empty());
    let rd = std::fs::read_to_string(d.join("r1/rd.csv")).unwrap();
    assert!(rd.starts_with("label,cloud_bytes,residual_bytes,total_bytes,psnr,ssim\nno-prior,"));
}

#[test]
fn restorer_training_and_use() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    ok(d, &["pairs", "--clouds", "scene.ply", "--cameras", "cams.json", "--pos-bits", "10", "--out", "pairs.gspd"]);
    let args = [
        "train-restorer", "--pairs", "pairs.gspd", "--out", "net.gsrn", "--depth", "3", "--width", "4", "--steps", "6",
        "--batch", "2", "--patch", "16", "--log", "loss.csv", "--checkpoint-dir", "ck", "--checkpoint-every", "3",
    ];
    ok(d, &args);
    assert!(d.join("ck/restorer_step3.gsrn").exists());
    assert_eq!(std::fs::read_to_string(d.join("loss.csv")).unwrap().lines().count(), 7);
    ok_owned(d, with(&["run", "--restorer", "net.gsrn", "--out-dir", "full"], FAST));
    let rd = std::fs::read_to_string(d.join("full/rd.csv")).unwrap();
    assert!(rd.contains("\nfull,"), "{rd}");
}

#[test]
fn sweep_grid_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    scene(d);
    ok_owned(d, with(&["rd-sweep", "--no-prior", "--qualities", "2,6", "--out", "rd.csv"], FAST));
    let rd = std::fs::read_to_string(d.join("rd.csv")).unwrap();
    assert_eq!(rd.lines().count(), 3);
    ok(d, &["plot", "--rd", "rd.csv", "--out", "rd.svg"]);
    assert!(std::fs::read_to_string(d.join("rd.svg")).unwrap().starts_with("<svg"));
    // Without a restorer the prior cells fail but the grid completes.
    ok_owned(d, with(&["ablate", "--axes", "prior,sideinfo", "--out", "grid.csv"], FAST));
    let grid = std::fs::read_to_string(d.join("grid.csv")).unwrap();
    let rows: Vec<&str> = grid.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("full,") && rows[0].contains("failed"));
    assert!(rows[1].starts_with("no-prior,") && rows[1].ends_with(",ok"));
    assert!(rows[3].starts_with("none,") && rows[3].ends_with(",ok"));
}

#[test]
fn config_file_supplies_flags_and_command_line_wins() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("gsr.toml"), "seed = 9\n[synth]\ncount = 7\nout = \"from_file.ply\"\n").unwrap();
    ok(d, &["--config", "gsr.toml", "synth"]);
    let text = std::fs::read(d.join("from_file.ply")).unwrap();
    assert!(String::from_utf8_lossy(&text).contains("element vertex 7"));
    ok(d, &["synth", "--config", "gsr.toml", "--count", "5", "--out", "cli.ply"]);
    let text = std::fs::read(d.join("cli.ply")).unwrap();
    assert!(String::from_utf8_lossy(&text).contains("element vertex 5"));
    assert!(!d.join("cli.ply.tmp").exists());
    // Unknown keys are unknown flags.
    std::fs::write(d.join("bad.toml"), "[synth]\nwibble = 1\n").unwrap();
    assert_eq!(code(&gsr(d, &["synth", "--config", "bad.toml", "--out", "x.ply"])), 2);
}
