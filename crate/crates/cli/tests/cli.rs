use std::path::Path;
use std::process::{Command, Output};

fn eyolo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eyolo"))
        .args(args)
        .env_remove("EYOLO_DATA")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = eyolo(args);
    assert!(
        out.status.success(),
        "eyolo {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn loss_column(csv: &str) -> Vec<f64> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

/// Parses the PLY header and checks the body against the declared count.
fn check_ply(text: &str) -> usize {
    let (header, body) = text.split_once("end_header\n").expect("header terminator");
    let mut lines = header.lines();
    assert_eq!(lines.next(), Some("ply"));
    assert_eq!(lines.next(), Some("format ascii 1.0"));
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .expect("vertex element")
        .parse()
        .unwrap();
    let props: Vec<&str> = header.lines().filter(|l| l.starts_with("property")).collect();
    assert_eq!(props.len(), 6);
    let rows: Vec<&str> = body.lines().collect();
    assert_eq!(rows.len(), count);
    for r in rows {
        let f: Vec<&str> = r.split_whitespace().collect();
        assert_eq!(f.len(), 6);
        for v in &f[..3] {
            assert!(v.parse::<f64>().unwrap().is_finite());
        }
        for v in &f[3..] {
            v.parse::<u8>().unwrap();
        }
    }
    count
}

#[test]
fn synth_train_detect_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let run = dir.path().join("run");
    ok(&["synth", "--seed", "7", "--scenes", "16", "--out", s(&data)]);
    assert!(data.join("manifest.txt").exists());

    ok(&["train", "--data", s(&data), "--preset", "tiny", "--epochs", "50", "--out", s(&run), "--seed", "7"]);
    let csv = std::fs::read_to_string(run.join("loss.csv")).unwrap();
    assert!(csv.starts_with("epoch,train_loss,val_loss\n"));
    let losses = loss_column(&csv);
    assert_eq!(losses.len(), 50);
    assert!(losses[49] < losses[0], "{} !< {}", losses[49], losses[0]);

    let oracle = ok(&["eval", "--data", s(&data), "--oracle"]);
    let mean = oracle.lines().find(|l| l.starts_with("Mean")).unwrap();
    let max = oracle.lines().find(|l| l.starts_with("Max")).unwrap();
    for row in [mean, max] {
        let vals: Vec<f64> = row.split_whitespace().skip(1).map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals, vec![1.0, 1.0, 1.0]);
    }

    let ckpt = run.join("best.ckpt");
    let ply = dir.path().join("out.ply");
    let dets = dir.path().join("dets.txt");
    let scene = data.join("scene0000");
    ok(&["detect", "--image", s(&scene), "--ckpt", s(&ckpt), "--ply", s(&ply), "--out", s(&dets), "--conf", "0.05"]);
    let text = std::fs::read_to_string(&dets).unwrap();
    for line in text.lines() {
        assert_eq!(line.split_whitespace().count(), 8, "{line}");
    }
    assert!(check_ply(&std::fs::read_to_string(&ply).unwrap()) > 0);

    let report = ok(&["eval", "--data", s(&data), "--ckpt", s(&ckpt)]);
    assert!(report.contains("3D IoU^(2/3)"));
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["synth", "--seed", "3", "--scenes", "2", "--out", s(d)]);
    }
    for f in ["manifest.txt", "generator.txt", "scene0001/color.png", "scene0001/depth.png", "scene0001/labels.txt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn export_writes_cloud_only_ply() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "1", "--scenes", "1", "--image-size", "32", "--out", s(&data)]);
    let ply = dir.path().join("scene.ply");
    ok(&["export", "--image", s(&data.join("scene0000")), "--out", s(&ply)]);
    let n = check_ply(&std::fs::read_to_string(&ply).unwrap());
    // every pixel has depth, plus 12 edges per ground-truth box
    assert!(n > 32 * 32);
}

#[test]
fn bench_prints_both_tables() {
    let out = ok(&["bench", "--preset", "tiny", "--iterations", "2", "--warmup", "0", "--candidates", "200", "--seed", "1"]);
    assert!(out.contains("SPEED [fps]"));
    assert!(out.contains("single-pass 3D IoU") && out.contains("two-pass 2D IoU"));
}

#[test]
fn help_documents_default_nms_threshold() {
    for sub in ["detect", "eval", "bench"] {
        let out = ok(&[sub, "--help"]);
        assert!(out.contains("0.35"), "{sub} --help");
        assert!(out.contains("--seed"), "{sub} --help");
    }
    for sub in ["synth", "train", "export"] {
        assert!(ok(&[sub, "--help"]).contains("--seed"), "{sub} --help");
    }
}

#[test]
fn usage_and_io_failures_have_distinct_codes() {
    let out = eyolo(&["train", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = eyolo(&["eval", "--data", "/nonexistent/eyolo-data", "--oracle"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("/nonexistent/eyolo-data"));
}

#[test]
fn data_directory_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--seed", "2", "--scenes", "1", "--image-size", "32", "--out", s(&data)]);
    let out = Command::new(env!("CARGO_BIN_EXE_eyolo"))
        .args(["eval", "--oracle"])
        .env("EYOLO_DATA", &data)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
