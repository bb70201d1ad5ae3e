//! End-to-end runs of the command-line front end on a tiny dataset.

use std::path::Path;

use missmarple::cli::{run_with, EXIT_INVALID, EXIT_OK, EXIT_USAGE};

fn run(args: &[&str]) -> (i32, String, String) {
    let argv: Vec<&str> = std::iter::once("missmarple").chain(args.iter().copied()).collect();
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn ok(args: &[&str]) -> String {
    let (code, out, err) = run(args);
    assert_eq!(code, EXIT_OK, "{args:?}: {err}");
    out
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn help_and_usage_errors() {
    let (code, out, _) = run(&["--help"]);
    assert_eq!(code, EXIT_OK);
    for cmd in ["gen", "extract", "train-v", "train-va", "eval", "localize", "cost"] {
        assert!(out.contains(cmd), "{cmd} missing from help");
    }
    assert_eq!(run(&[]).0, EXIT_USAGE);
    assert_eq!(run(&["gen", "--out", "x", "--regime", "medium"]).0, EXIT_USAGE);
    assert_eq!(run(&["cost", "--preset", "table3", "--config", "a.toml"]).0, EXIT_USAGE);
}

#[test]
fn invalid_settings_exit_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(&dir.path().join("d"));
    let (code, _, err) = run(&["gen", "--out", &out, "--size", "100"]);
    assert_eq!(code, EXIT_INVALID, "{err}");
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nepochs = 99\n").unwrap();
    let (code, _, err) = run(&["train-v", "--corpus", &out, "--out", &out, "--config", &s(&cfg)]);
    assert_eq!(code, EXIT_INVALID, "{err}");
}

#[test]
fn pipeline_with_localization() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| s(&dir.path().join(x));
    let gen = ok(&["gen", "--out", &p("data"), "--count", "4", "--size", "128", "--seed", "2"]);
    assert!(gen.starts_with("# missmarple "), "{gen}");
    assert!(gen.contains("# seed: 2"));
    let ext = ok(&["extract", "--manifest", &p("data/manifest.txt"), "--out", &p("corpus"), "--seed", "2"]);
    assert!(ext.contains("[values]"));
    ok(&["train-v", "--corpus", &p("corpus"), "--out", &p("mmv"), "--iterations", "2", "--epochs", "1"]);
    for f in ["weights.mmwt", "model.toml", "donor.mmwt", "selection.txt", "train_report.txt", "train_log.txt"] {
        assert!(dir.path().join("mmv").join(f).exists(), "{f}");
    }
    let sel = std::fs::read_to_string(dir.path().join("mmv/selection.txt")).unwrap();
    assert!(sel.contains("iteration = "));

    let eval = ok(&[
        "eval", "--manifest", &p("data/manifest.txt"), "--corpus", &p("corpus"), "--model", &p("mmv"),
        "--threshold", "0.1", "--out", &p("eval.txt"),
    ]);
    assert!(eval.contains("row1.threshold = 0.1"), "{eval}");
    assert!(dir.path().join("eval.timing.txt").exists());

    let image = p("data/spliced/sp_0000.png");
    let loc = ok(&[
        "localize", "--model", &p("mmv"), "--image", &image, "--out-dir", &p("loc"), "--threshold", "0",
        "--report", &p("loc/report.txt"),
    ]);
    assert!(loc.contains("sp_0000.png"), "{loc}");
    let annotated = image::open(dir.path().join("loc/sp_0000.localized.png")).unwrap();
    assert_eq!((annotated.width(), annotated.height()), (128, 128));
    assert!(dir.path().join("loc/report.txt").exists());
}

#[test]
fn cost_presets() {
    let t3 = ok(&["cost", "--preset", "table3"]);
    assert!(t3.contains("68.3890%") && t3.contains("99.1102%"));
    assert!(t3.contains("Rao & Ni") && t3.contains("Pomari et al."));
    let d = ok(&["cost", "--preset", "default"]);
    assert!(d.contains("47185920"), "{d}");
}
