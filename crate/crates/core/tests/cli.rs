use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--override", "data=synthetic-events:2:16:1",
    "--override", "t=2",
    "--override", "l=1",
    "--override", "d=8",
    "--override", "h=8",
    "--override", "w=8",
    "--override", "n_agg=2",
    "--override", "epochs=1",
    "--override", "batch_size=8",
];

/// Runs `args[0]` on the tiny config; later arguments override it.
fn saformer(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_saformer"))
        .arg(args[0])
        .args(TINY)
        .args(&args[1..])
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn overrides_beat_config_file_and_seed_beats_both() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "d = 16\nseed = 3\nlr = 0.002\n").unwrap();
    let out = dir.path().join("run");
    let o = Command::new(env!("CARGO_BIN_EXE_saformer"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--seed", "11"])
        .args(TINY)
        .args(["--override", "seed=5", "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = std::fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert!(manifest.contains("d = 8\n"), "{manifest}");
    assert!(manifest.contains("seed = 11\n"));
    assert!(manifest.contains("lr = 0.002\n"));
    for f in ["metrics.csv", "best.ckpt", "summary.txt"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn missing_cifar_path_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = saformer(&["train", "--override", "data=cifar10-binary:2:10:0", "--override", "c=3"], &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("data_path"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = saformer(&["complexity", "--override", "depth=3"], &dir.path().join("x"));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("depth"));
}

#[test]
fn non_empty_out_dir_needs_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    std::fs::create_dir_all(&out).unwrap();
    std::fs::write(out.join("old.txt"), "keep").unwrap();
    let o = saformer(&["complexity", "--tokens", "16,64"], &out);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--force"));
    assert!(!out.join("complexity.csv").exists());
    let o = saformer(&["complexity", "--tokens", "16,64", "--force"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("complexity.csv").exists());
}

#[test]
fn single_variant_ablation_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let o = saformer(&["ablate", "--variants", "no-dwc"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 1, "{table}");
    assert!(rows[0].starts_with("no-dwc,"));
}

#[test]
fn gradcheck_passes_and_fault_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = saformer(&["gradcheck", "--coords", "6", "--batch", "2"], &dir.path().join("ok"));
    assert!(o.status.success(), "{}", stderr(&o));
    let o = saformer(&["gradcheck", "--coords", "6", "--batch", "2", "--fault", "linear:1.5"], &dir.path().join("bad"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("gradient check failed"));
    assert!(dir.path().join("bad").join("gradcheck.csv").exists());
}

#[test]
fn profile_reports_relative_differences() {
    let dir = tempfile::tempdir().unwrap();
    let reference = dir.path().join("ref.csv");
    std::fs::write(&reference, "metric,ours,other\ncifar10_acc,95.8,95.5\n").unwrap();
    let out = dir.path().join("p");
    let o = saformer(&["profile", "--batches", "1", "--reference", reference.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let rd = std::fs::read_to_string(out.join("rd.csv")).unwrap();
    assert!(rd.lines().nth(1).unwrap().ends_with(",0.31"), "{rd}");
    let energy = std::fs::read_to_string(out.join("energy.csv")).unwrap();
    assert!(energy.lines().count() > 5);
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"not a checkpoint").unwrap();
    let o = saformer(&["eval", "--checkpoint", ckpt.to_str().unwrap()], &dir.path().join("e"));
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn train_then_eval_round_trips_the_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("t");
    let o = saformer(&["train"], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = std::fs::read_to_string(out.join("summary.txt")).unwrap();
    let best: f64 = summary
        .lines()
        .find_map(|l| l.strip_prefix("best test accuracy "))
        .and_then(|l| l.split_whitespace().next())
        .unwrap()
        .parse()
        .unwrap();
    let o = saformer(&["eval", "--checkpoint", out.join("best.ckpt").to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let acc: f64 = text.lines().find_map(|l| l.strip_prefix("accuracy ")).unwrap().parse().unwrap();
    assert!((acc - best).abs() < 1e-4, "{text} vs {summary}");
}
