use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mpda(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mpda")).args(args).output().expect("spawn")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn train_tiny(dir: &Path) -> String {
    let cfg = dir.join("tiny.cfg");
    fs::write(&cfg, "scenario = hetero1\nepochs = 1\nscenes_per_epoch = 1\n").unwrap();
    let out = dir.join("run");
    let o = mpda(&["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("steps=1 final_l="));
    out.join("model.ckpt").to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_one_and_help_exits_zero() {
    assert_eq!(code(&mpda(&[])), 1);
    assert_eq!(code(&mpda(&["frobnicate"])), 1);
    assert_eq!(code(&mpda(&["--help"])), 0);
}

#[test]
fn bad_config_exits_one_and_missing_files_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "gamma = 3\n").unwrap();
    let o = mpda(&["train", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(code(&mpda(&["eval", "--ckpt", missing.to_str().unwrap()])), 2);
    assert_eq!(code(&mpda(&["viz", "--in", missing.to_str().unwrap(), "--out", dir.path().to_str().unwrap()])), 2);
}

#[test]
fn gen_train_eval_adapt_viz_bench() {
    let dir = tempfile::tempdir().unwrap();
    let scenes = dir.path().join("scenes");
    let o = mpda(&["gen", "--seed", "3", "--count", "2", "--out", scenes.to_str().unwrap(), "--test-split"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let collab = scenes.join("scene0000_collab.fmap");
    let ego = scenes.join("scene0000_ego.fmap");
    assert!(collab.exists() && ego.exists() && scenes.join("scene0001.json").exists());

    let ckpt = train_tiny(dir.path());
    let o = mpda(&["eval", "--ckpt", &ckpt, "--scenes", "2"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 3);
    assert!(text.contains("method=nofusion") && text.contains("method=naive") && text.contains("method=mpda"));
    assert_eq!(code(&mpda(&["eval", "--ckpt", &ckpt, "--methods", "magic"])), 1);

    let adapted = dir.path().join("adapted.fmap");
    let o = mpda(&[
        "adapt",
        "--in",
        collab.to_str().unwrap(),
        "--ckpt",
        &ckpt,
        "--ego",
        ego.to_str().unwrap(),
        "--out",
        adapted.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("x32x88x64"));
    let o = mpda(&["adapt", "--in", collab.to_str().unwrap(), "--ckpt", &ckpt, "--out", adapted.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));

    let pic = dir.path().join("ego.pgm");
    let o = mpda(&["viz", "--in", ego.to_str().unwrap(), "--out", pic.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read(&pic).unwrap().starts_with(b"P5"));

    let o = mpda(&["bench", "--ckpt", &ckpt, "--agents", "1,2", "--iters", "1", "--warmup", "0"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().filter(|l| l.starts_with("n_agents=")).count(), 2);
    assert_eq!(code(&mpda(&["bench", "--ckpt", &ckpt, "--iters", "0"])), 1);
}

#[test]
fn gradcheck_passes() {
    let o = mpda(&["gradcheck"]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).lines().all(|l| l.starts_with("PASS")));
}
