use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn dgc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dgc"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, "n_train = 300\nn_val = 80\nn_test = 80\nepochs = 4\n").unwrap();
    p
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Value of the `mean_auc` row in an auc.csv.
fn mean_auc(csv: &str) -> f64 {
    let row = csv.lines().find(|l| l.contains(",mean_auc,")).expect("mean row");
    row.split(',').nth(2).unwrap().parse().unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    let t = TempDir::new().unwrap();
    for args in [&["--help"][..], &["--version"], &["train", "--help"]] {
        assert_eq!(code(&dgc(t.path(), args)), 0, "{args:?}");
    }
}

#[test]
fn usage_errors_exit_one() {
    let t = TempDir::new().unwrap();
    assert_eq!(code(&dgc(t.path(), &["frobnicate"])), 1);
    assert_eq!(code(&dgc(t.path(), &[])), 1);
    assert_eq!(code(&dgc(t.path(), &["train"])), 1);
    assert_eq!(code(&dgc(t.path(), &["grad-check", "--seeds", "x"])), 1);
    assert_eq!(code(&dgc(t.path(), &["train", "--manifest", "m.csv", "--mode", "bayes"])), 1);
}

#[test]
fn config_errors_exit_one_with_one_line() {
    let t = TempDir::new().unwrap();
    let cases = [
        ("typo.toml", "epochz = 3\n", "epochz"),
        ("preset.toml", "preset = \"huge\"\n", "huge"),
        ("bad.toml", "latent_dim = 0\n", "latent"),
        ("syntax.toml", "epochs = = 3\n", ""),
    ];
    for (name, body, needle) in cases {
        fs::write(t.path().join(name), body).unwrap();
        let o = dgc(t.path(), &["--config", name, "gen-data"]);
        assert_eq!(code(&o), 1, "{name}: {}", stderr(&o));
        let err = stderr(&o);
        assert_eq!(err.trim_end().lines().count(), 1, "{name}: {err}");
        assert!(err.contains(needle), "{name}: {err}");
    }
    let o = dgc(t.path(), &["--config", "missing.toml", "gen-data"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn runtime_errors_exit_two() {
    let t = TempDir::new().unwrap();
    fs::write(t.path().join("junk.dgc"), b"not a checkpoint").unwrap();
    fs::write(t.path().join("m.csv"), "image_path,patient_id\n").unwrap();
    let o = dgc(t.path(), &["eval", "--checkpoint", "junk.dgc", "--manifest", "m.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("magic"), "{}", stderr(&o));
    let o = dgc(t.path(), &["train", "--manifest", "absent.csv"]);
    assert_eq!(code(&o), 2);
    assert_eq!(stderr(&o).trim_end().lines().count(), 1);
}

#[test]
fn gen_train_eval_round_trip() {
    let t = TempDir::new().unwrap();
    let cfg = small_config(t.path());
    let cfg = cfg.to_str().unwrap();
    let run = |args: &[&str]| {
        let o = dgc(t.path(), args);
        assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        o
    };

    run(&["--config", cfg, "--out", "data", "gen-data"]);
    for f in ["manifest.csv", "train.txt", "val.txt", "test.txt", "images/img_00000.pgm"] {
        assert!(t.path().join("data").join(f).exists(), "{f}");
    }
    run(&["--config", cfg, "--out", "run", "train", "--manifest", "data/manifest.csv"]);
    run(&["--config", cfg, "--out", "ev", "eval", "--checkpoint", "run/checkpoint.dgc", "--manifest", "data/manifest.csv", "--patients", "data/train.txt", "--svg"]);

    let auc = read(t.path().join("ev/auc.csv"));
    let m = mean_auc(&auc);
    assert!(m > 0.95, "training-set mean AUC {m}");
    assert!(read(t.path().join("ev/roc.svg")).starts_with("<svg"));

    let hist = read(t.path().join("run/history.csv"));
    let header = hist.lines().find(|l| !l.starts_with('#')).unwrap();
    assert_eq!(header, "epoch,train_loss,val_mean_auc,wall_seconds");
    assert_eq!(hist.lines().filter(|l| !l.starts_with('#')).count(), 5);

    for f in ["data/manifest.csv", "data/train.txt", "run/history.csv", "ev/auc.csv", "ev/roc.csv"] {
        let text = read(t.path().join(f));
        assert!(text.starts_with("# command = "), "{f}");
        for key in ["init_seed", "shuffle_seed", "noise_seed", "data_seed", "split_seed"] {
            assert!(text.lines().any(|l| l.starts_with(&format!("# {key} = "))), "{f} lacks {key}");
        }
    }
    assert!(read(t.path().join("run/run.log")).contains("wall_seconds"));
}

#[test]
fn repeated_commands_give_identical_artifacts() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.toml");
    fs::write(&cfg, "n_train = 120\nn_val = 40\nn_test = 40\nepochs = 2\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    for k in ["a", "b"] {
        let data = format!("data_{k}");
        let run = format!("run_{k}");
        let ev = format!("ev_{k}");
        for args in [
            vec!["--config", cfg, "--seed", "7", "--out", &data, "gen-data"],
            vec!["--config", cfg, "--seed", "7", "--out", &run, "train", "--manifest", "data_a/manifest.csv", "--split-dir", "data_a"],
            vec!["--config", cfg, "--seed", "7", "--out", &ev, "eval", "--checkpoint", "run_a/checkpoint.dgc", "--manifest", "data_a/manifest.csv"],
        ] {
            let o = dgc(t.path(), &args);
            assert_eq!(code(&o), 0, "{args:?}: {}", stderr(&o));
        }
    }
    let bytes = |p: &str| fs::read(t.path().join(p)).unwrap();
    for f in ["manifest.csv", "train.txt", "val.txt", "test.txt", "images/img_00007.pgm"] {
        assert_eq!(bytes(&format!("data_a/{f}")), bytes(&format!("data_b/{f}")), "{f}");
    }
    assert_eq!(bytes("run_a/checkpoint.dgc"), bytes("run_b/checkpoint.dgc"));
    for f in ["auc.csv", "roc.csv"] {
        assert_eq!(bytes(&format!("ev_a/{f}")), bytes(&format!("ev_b/{f}")), "{f}");
    }
    let untimed = |p: &str| -> Vec<String> {
        read(t.path().join(p)).lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
    };
    assert_eq!(untimed("run_a/history.csv"), untimed("run_b/history.csv"));
    assert!(read(t.path().join("data_a/manifest.csv")).contains("# seed = 7"));
}

#[test]
fn mode_flag_and_split_fallback() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.toml");
    fs::write(&cfg, "n_train = 100\nn_val = 30\nn_test = 30\nepochs = 1\n").unwrap();
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&dgc(t.path(), &["--config", cfg, "--out", "d", "gen-data"])), 0);
    fs::remove_file(t.path().join("d/train.txt")).unwrap();
    let o = dgc(t.path(), &["--config", cfg, "--out", "r", "train", "--manifest", "d/manifest.csv", "--mode", "deterministic"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("deterministic model"));
    assert!(read(t.path().join("r/history.csv")).contains("# mode = \"deterministic\""));
}

#[test]
fn compare_writes_two_runs_by_label_rows() {
    let t = TempDir::new().unwrap();
    let cfg = t.path().join("c.toml");
    fs::write(&cfg, "n_train = 80\nn_val = 30\nn_test = 30\nepochs = 1\n").unwrap();
    let o = dgc(t.path(), &["--config", cfg.to_str().unwrap(), "--out", "cmp", "compare", "--seeds", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = read(t.path().join("cmp/comparison.csv"));
    let mut lines = csv.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next().unwrap(), "run,label,auc_mean,auc_std,repeats,delta");
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 2 * (14 + 1));
    for run in ["generative", "deterministic"] {
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{run},"))).count(), 15);
    }
    assert!(read(t.path().join("cmp/comparison.txt")).contains("delta"));
    let runs = read(t.path().join("cmp/runs.csv"));
    assert_eq!(runs.lines().filter(|l| !l.starts_with('#')).count(), 11);
    for s in 0..5 {
        assert!(t.path().join(format!("cmp/auc_generative_{s}.csv")).exists());
        assert!(t.path().join(format!("cmp/auc_deterministic_{s}.csv")).exists());
    }
    assert!(stdout(&o).contains("non-inferiority"));
}

#[test]
fn grad_check_twenty_seeds_passes() {
    let t = TempDir::new().unwrap();
    let o = dgc(t.path(), &["--out", "gc", "grad-check", "--seeds", "20"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    assert!(!stdout(&o).contains("FAIL"));
    let csv = read(t.path().join("gc/gradcheck.csv"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 23);
}
