use std::fs;
use std::path::Path;
use std::process::Command;

fn coral(args: &[&str]) -> std::process::Output {
    let out = Command::new(env!("CARGO_BIN_EXE_coral")).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "coral {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_then_apply_writes_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let backbone = dir.path().join("backbone");
    let config = dir.path().join("train.toml");
    let artifact = dir.path().join("edit");
    let applied = dir.path().join("applied");
    fs::write(&config, "max_iterations = 6\neval_every = 2\ncheckpoint_every = 3\nseed = 4\n").unwrap();

    coral(&["init-backbone", "--out", s(&backbone)]);
    coral(&[
        "train", "--prompt", "bright", "--variant", "can", "--editor", "mapper", "--config", s(&config), "--out",
        s(&artifact), "--backbone", s(&backbone),
    ]);
    assert!(artifact.join("manifest.toml").is_file());
    assert!(artifact.join("checkpoints/checkpoint-3/state.toml").is_file());
    assert!(artifact.join("checkpoints/checkpoint-6/state.toml").is_file());
    let csv = fs::read_to_string(artifact.join("loss.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("iteration,clip,l2,id,area,tv,total"));
    assert_eq!(csv.lines().count(), 1 + 4);
    let manifest = fs::read_to_string(artifact.join("manifest.toml")).unwrap();
    assert!(manifest.contains("edit_cutoff = 6"), "{manifest}");

    coral(&[
        "apply", "--artifact", s(&artifact), "--seed", "9", "--alpha", "-1.5", "--tau", "0.2",
        "--toggle-layers", "2,5", "--out", s(&applied), "--backbone", s(&backbone),
    ]);
    for f in ["original.png", "edited.png", "metrics.csv"] {
        assert!(applied.join(f).is_file(), "{f}");
    }
    for l in 1..=6 {
        assert!(applied.join(format!("mask_layer_{l}.png")).is_file());
    }
    let metrics = fs::read_to_string(applied.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next(),
        Some("l2,id_similarity,mean_abs_change,area_layer_1,area_layer_2,area_layer_3,area_layer_4,area_layer_5,area_layer_6")
    );
    let row: Vec<f64> = lines.next().unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert_eq!(row[4], 0.0);
    assert_eq!(row[7], 0.0);
}

#[test]
fn same_seed_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    fs::write(&config, "max_iterations = 4\nseed = 1\n").unwrap();
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        coral(&[
            "train", "--prompt", "p", "--variant", "ss", "--editor", "global", "--config", s(&config), "--out",
            s(&out),
        ]);
        let mut files: Vec<_> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|x| x == "bin" || x == "toml"))
            .map(|p| (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap()))
            .collect();
        files.sort();
        runs.push(files);
    }
    assert_eq!(runs[0], runs[1]);
}

#[test]
fn alpha_zero_reproduces_the_original_png() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.toml");
    fs::write(&config, "max_iterations = 3\n").unwrap();
    let art = dir.path().join("edit");
    coral(&["train", "--prompt", "p", "--variant", "ss", "--editor", "mapper", "--config", s(&config), "--out", s(&art)]);
    let out = dir.path().join("zero");
    coral(&["apply", "--artifact", s(&art), "--seed", "2", "--alpha", "0", "--out", s(&out)]);
    assert_eq!(fs::read(out.join("original.png")).unwrap(), fs::read(out.join("edited.png")).unwrap());
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_coral"))
        .args(["apply", "--artifact", s(&dir.path().join("missing")), "--seed", "1", "--out", s(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let config = dir.path().join("bad.toml");
    fs::write(&config, "edit_cutoff = 13\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_coral"))
        .args(["train", "--prompt", "p", "--variant", "ss", "--editor", "global", "--config", s(&config)])
        .args(["--out", s(&dir.path().join("x"))])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("edit_cutoff"));
}
