use std::path::Path;
use std::process::{Command, Output};

fn fergcn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fergcn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn gen_tiny(dir: &Path) -> String {
    let data = dir.join("tiny.fgds").display().to_string();
    let o = fergcn(&[
        "gen", "--classes", "2", "--per-class", "4", "--frames", "4", "--size", "8", "--seed", "3",
        "--out", &data,
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data
}

fn train_tiny(dir: &Path, data: &str, extra: &[&str]) -> Output {
    let out = dir.join("run").display().to_string();
    let mut args = vec![
        "train", "--data", data, "--out", &out, "--frames", "4", "--classes", "2", "--dim", "4",
        "--epochs", "2",
    ];
    args.extend_from_slice(extra);
    if !extra.contains(&"--lr") {
        args.extend_from_slice(&["--lr", "0.05"]);
    }
    fergcn(&args)
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&fergcn(&["--help"])), 0);
    assert_eq!(code(&fergcn(&["--version"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&fergcn(&[])), 1);
    assert_eq!(code(&fergcn(&["bogus"])), 1);
    assert_eq!(code(&fergcn(&["gen", "--classes", "two", "--out", "x"])), 1);
    assert_eq!(code(&fergcn(&["gradcheck", "--scope", "everything"])), 1);
}

#[test]
fn invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let o = train_tiny(dir.path(), &data, &["--module-count", "9"]);
    assert_eq!(code(&o), 1);
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs=2\nnot_a_key=1\n").unwrap();
    let o = fergcn(&["train", "--config", cfg.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
}

#[test]
fn missing_and_corrupt_files_exit_three() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.fgds").display().to_string();
    let o = fergcn(&["train", "--data", &missing, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let junk = dir.path().join("junk.fgck");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let data = gen_tiny(dir.path());
    let o = fergcn(&["eval", "--checkpoint", junk.to_str().unwrap(), "--data", &data]);
    assert_eq!(code(&o), 3);
}

#[test]
fn divergent_training_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let o = train_tiny(dir.path(), &data, &["--lr", "1e150"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn gen_train_eval_export_flow() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let o = train_tiny(dir.path(), &data, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let run = dir.path().join("run");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let mut lines = metrics.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,train_loss,train_acc,val_acc,a_offdiag,w_1,w_2,w_3,w_4"
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.split(',').count() == 9));
    assert!(rows[0].starts_with("0,"));

    let ckpt = run.join("checkpoint.fgck").display().to_string();
    let o = fergcn(&["eval", "--checkpoint", &ckpt, "--data", &data]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.starts_with("accuracy "), "{text}");

    let out = dir.path().join("exp");
    let o = fergcn(&[
        "export", "--checkpoint", &ckpt, "--data", &data, "--kind", "weights", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let csv = std::fs::read_to_string(out.join("weights.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "w_1,w_2,w_3,w_4");

    let o = fergcn(&[
        "export", "--checkpoint", &ckpt, "--data", &data, "--kind", "heatmaps", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    let pgm = std::fs::read_to_string(out.join("heatmap_after_f01.pgm")).unwrap();
    assert!(pgm.starts_with("P2\n8 8\n255\n"));
}

#[test]
fn training_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    assert_eq!(code(&train_tiny(dir.path(), &data, &[])), 0);
    let first = std::fs::read(dir.path().join("run/metrics.csv")).unwrap();
    let ckpt = std::fs::read(dir.path().join("run/checkpoint.fgck")).unwrap();
    assert_eq!(code(&train_tiny(dir.path(), &data, &[])), 0);
    assert_eq!(std::fs::read(dir.path().join("run/metrics.csv")).unwrap(), first);
    assert_eq!(std::fs::read(dir.path().join("run/checkpoint.fgck")).unwrap(), ckpt);
}

#[test]
fn ablate_prints_one_row_per_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_tiny(dir.path());
    let o = fergcn(&[
        "ablate", "--data", &data, "--frames", "4", "--classes", "2", "--dim", "4", "--epochs",
        "1", "--variants", "0,1f",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 3, "{text}");
}

#[test]
fn gradcheck_stop_gradient_passes() {
    let o = fergcn(&["gradcheck", "--scope", "stop_gradient"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}
