use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
experiment = synthetic
train_per_class = 40
test_per_class = 40
input_dim = 8
hidden = 16
pretrain_steps = 50
meta_hidden_kernel = 4
meta_hidden_norm = 2
meta_cells = 1
episodes = 3
inner_steps = 5
unroll_steps = 10
snapshot_every = 5
readout_steps = 50
fisher_samples = 20
deterministic_log = true
";

fn remembra(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_remembra"))
        .args(args)
        .env("REMEMBRA_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn dry_run_prints_resolved_config() {
    let out = remembra(&["--experiment", "new-classes", "--methods", "sgd,meta", "--seeds", "3", "--dry-run"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("experiment = new-classes\n"));
    assert!(text.contains("methods = meta,sgd\n"));
    assert!(text.contains("seeds = 0,1,2,\n"));
}

#[test]
fn missing_experiment_is_named() {
    let out = remembra(&["--dry-run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "episodes = 3\n");
    let out = remembra(&["--config", &cfg, "--dry-run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("experiment"));

    let cfg = write_config(dir.path(), "experiment = synthetic\nsource = cifar10\n");
    let out = remembra(&["--config", &cfg, "--dry-run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cifar_dir"));
}

#[test]
fn parse_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "experiment = synthetic\n# note\nepisodes = many\n");
    let out = remembra(&["--config", &cfg, "--dry-run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3"), "{err}");
    assert!(err.contains("episodes"), "{err}");
}

#[test]
fn missing_dataset_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!("experiment = synthetic\nsource = cifar10\ncifar_dir = {}\n", dir.path().join("nope").display()),
    );
    let out = remembra(&["--config", &cfg, "--out", &dir.path().join("o").display().to_string()]);
    assert!(!out.status.success());
}

#[test]
fn run_writes_per_method_seed_artifacts_reproducibly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), TINY);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = remembra(&[
            "--config",
            &cfg,
            "--methods",
            "sgd,meta",
            "--seeds",
            "2",
            "--log-gates",
            "--out",
            &out.display().to_string(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for want in [
        "compare.csv",
        "compare.txt",
        "config.txt",
        "checkpoint_0.rmbr",
        "gates_seed0.csv",
        "gates_seed1.csv",
        "probe_meta_seed0.csv",
        "probe_meta_seed1.csv",
        "probe_sgd_seed0.csv",
        "probe_sgd_seed1.csv",
        "theta_seed0.rmbr",
        "theta_seed1.rmbr",
        "train_log_seed0.csv",
        "train_log_seed1.csv",
    ] {
        assert!(names.iter().any(|n| n == want), "missing {want} in {names:?}");
    }
    let without_out = |p: &Path| -> String {
        fs::read_to_string(p)
            .unwrap()
            .lines()
            .filter(|l| !l.starts_with("out = "))
            .collect()
    };
    assert_eq!(without_out(&a.join("config.txt")), without_out(&b.join("config.txt")));
    for n in names.iter().filter(|n| *n != "config.txt") {
        assert_eq!(fs::read(a.join(n)).unwrap(), fs::read(b.join(n)).unwrap(), "{n} differs between reruns");
    }
    let probe = fs::read_to_string(a.join("probe_sgd_seed0.csv")).unwrap();
    assert!(probe.starts_with("method,seed,task,step,readout_acc,original_acc\n"));
    let log = fs::read_to_string(a.join("train_log_seed0.csv")).unwrap();
    assert!(log.starts_with("episode,task_k,step_t,huber_loss,threshold,tbptt_s,restarted,wall_ms\n"));
    let table = fs::read_to_string(a.join("compare.txt")).unwrap();
    let meta = table.find("\nmeta").unwrap();
    let sgd = table.find("\nsgd").unwrap();
    assert!(meta < sgd);
}
