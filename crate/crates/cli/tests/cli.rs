use std::path::Path;
use std::process::{Command, Output};

fn pcam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pcam")).args(args).output().expect("spawn pcam")
}

fn ok(args: &[&str]) -> String {
    let out = pcam(args);
    assert!(
        out.status.success(),
        "pcam {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_reports_groups() {
    let out = ok(&["gradcheck", "--kind", "pcam", "--seed", "3"]);
    assert!(out.contains("head.w") && out.contains("features"));
    let out = ok(&["gradcheck", "--kind", "lselba", "--gamma", "0.5"]);
    assert!(out.contains("lselba(0.5)") && out.contains("lselba.beta"));
}

#[test]
fn errors_are_one_line_and_nonzero() {
    let out = pcam(&["gradcheck", "--kind", "median"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("pcam: "));

    let out = pcam(&["infer", "--model", "/nonexistent/model.bin", "--image", "x.pgm"]);
    assert!(!out.status.success());
    assert_eq!(String::from_utf8(out.stderr).unwrap().lines().count(), 1);
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let model = dir.path().join("model.bin");
    let ckpt = dir.path().join("state.ckpt");
    ok(&["synth-gen", "--out", s(&data), "--n", "24", "--seed", "5"]);
    for f in ["labels.csv", "gt_boxes.csv", "config.json", "images/img00000.pgm"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let log = ok(&[
        "train", "--data", s(&data), "--pooling", "pcam", "--epochs", "2", "--batch", "8", "--seed", "1", "--out",
        s(&model), "--checkpoint", s(&ckpt),
    ]);
    assert_eq!(log.lines().filter(|l| l.starts_with("epoch")).count(), 2);

    // resuming a finished run to a later epoch matches training straight through
    let resumed = dir.path().join("resumed.bin");
    let straight = dir.path().join("straight.bin");
    ok(&[
        "train", "--data", s(&data), "--epochs", "3", "--batch", "8", "--seed", "1", "--out", s(&resumed),
        "--resume", s(&ckpt),
    ]);
    ok(&["train", "--data", s(&data), "--epochs", "3", "--batch", "8", "--seed", "1", "--out", s(&straight)]);
    assert_eq!(std::fs::read(&resumed).unwrap(), std::fs::read(&straight).unwrap());

    let heat = dir.path().join("heat.pgm");
    let boxes = dir.path().join("boxes.csv");
    let out = ok(&[
        "infer", "--model", s(&model), "--image", s(&data.join("images/img00003.pgm")), "--tau", "0.9",
        "--heatmap", s(&heat), "--boxes", s(&boxes),
    ]);
    assert_eq!(out.lines().filter(|l| l.starts_with("class")).count(), 2);
    let pgm = std::fs::read(dir.path().join("heat_1.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n64 64\n255\n"));
    let csv = std::fs::read_to_string(&boxes).unwrap();
    assert!(csv.starts_with("image_id,class_id,x,y,w,h,score\n"));

    let pred = dir.path().join("pred.csv");
    let scores = dir.path().join("scores.csv");
    for baseline in [false, true] {
        let mut args = vec![
            "predict", "--model", s(&model), "--data", s(&data), "--boxes", s(&pred), "--scores", s(&scores),
        ];
        if baseline {
            args.push("--baseline");
        }
        ok(&args);
        let report = ok(&[
            "eval", "--pred", s(&pred), "--gt", s(&data.join("gt_boxes.csv")), "--labels",
            s(&data.join("labels.csv")), "--scores", s(&scores), "--iobb", "0.5",
        ]);
        assert!(report.contains("class_id,auc,loc_accuracy,avg_false_positives,images,boxes"));
        assert_eq!(report.lines().filter(|l| l.starts_with("0,") || l.starts_with("1,")).count(), 2);
    }

    let small = dir.path().join("small.pgm");
    std::fs::write(&small, b"P5\n8 8\n255\n".iter().copied().chain([0u8; 64]).collect::<Vec<_>>()).unwrap();
    let out = pcam(&["infer", "--model", s(&model), "--image", s(&small)]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("trained at 64x64"));
}
