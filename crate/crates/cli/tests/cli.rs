//! End-to-end pipeline checks through the binary: determinism of outputs,
//! config validation, and the shape of the produced artifacts.

use std::fs;
use std::path::Path;
use std::process::Command;

fn satflow() -> Command {
    Command::new(env!("CARGO_BIN_EXE_satflow"))
}

/// Small everything: short runs, tiny model, few epochs.
const SMALL_CONFIG: &str = r#"
seed = 11

[sim]
duration = 8.0
sim_dt = 0.01

[dataset]
train_runs = 3
test_runs = 2
steps = 4

[model]
coupling_layers = 2
hidden_layers = 1
hidden_units = 8
steps = 4
token_dim = 4

[training]
batch_size = 128
max_epochs = 3
patience = 5

[mpc]
solver_iterations = 4

[maneuver]
duration = 3.0
sim_dt = 0.01
angle_deg = 20.0

[evaluation]
noise_runs = 2
self_loop_steps = 4
"#;

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

#[test]
fn gen_dataset_is_byte_identical_across_reruns() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    for sub in ["a", "b"] {
        let status = satflow()
            .args(["gen-dataset", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(dir.path().join(sub))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for file in ["train.bin", "test.bin", "config.toml"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
}

#[test]
fn unknown_config_key_is_rejected_with_its_name() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "seed = 1\n[training]\nlearning_rtae = 0.1\n").unwrap();
    let out = satflow()
        .args(["gen-dataset", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(dir.path().join("x"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first_line = stderr.lines().next().unwrap_or("");
    assert!(first_line.starts_with("error:"), "stderr: {stderr}");
    assert!(stderr.contains("learning_rtae"), "stderr: {stderr}");
}

#[test]
fn full_pipeline_produces_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());

    let run = |args: &[&std::ffi::OsStr]| {
        let out = satflow().args(args).output().unwrap();
        assert!(
            out.status.success(),
            "command {:?} failed: {}",
            args,
            String::from_utf8_lossy(&out.stderr)
        );
    };
    let os = std::ffi::OsStr::new;

    let data = dir.path().join("data");
    run(&[os("gen-dataset"), os("--config"), config.as_os_str(), os("--out"), data.as_os_str()]);

    let train_dir = dir.path().join("trained");
    let train_bin = data.join("train.bin");
    run(&[
        os("train"),
        os("--config"),
        config.as_os_str(),
        os("--dataset"),
        train_bin.as_os_str(),
        os("--out"),
        train_dir.as_os_str(),
    ]);
    assert!(train_dir.join("model.bin").exists());
    let report = fs::read_to_string(train_dir.join("train_report.csv")).unwrap();
    assert!(report.starts_with("epoch,l_dd,l_pi,beta,val_l_dd,val_l_pi,val_total\n"));
    assert_eq!(report.lines().count(), 4, "3 epochs + header");

    let eval_dir = dir.path().join("eval");
    let model_bin = train_dir.join("model.bin");
    let test_bin = data.join("test.bin");
    run(&[
        os("eval-model"),
        os("--config"),
        config.as_os_str(),
        os("--model"),
        model_bin.as_os_str(),
        os("--dataset"),
        test_bin.as_os_str(),
        os("--label"),
        os("tiny_ld"),
        os("--out"),
        eval_dir.as_os_str(),
    ]);
    let table = fs::read_to_string(eval_dir.join("regression_metrics.csv")).unwrap();
    assert!(table.starts_with("experiment,mre,physics,mre_selfloop,physics_selfloop\n"));
    assert!(table.lines().nth(1).unwrap().starts_with("tiny_ld,"));

    let mpc_dir = dir.path().join("mpc");
    run(&[
        os("mpc-run"),
        os("--config"),
        config.as_os_str(),
        os("--exact"),
        os("--out"),
        mpc_dir.as_os_str(),
    ]);
    let cl = fs::read_to_string(mpc_dir.join("closed_loop.csv")).unwrap();
    // 3 s at 0.1 s control period: 30 steps + final record + header
    assert_eq!(cl.lines().count(), 32);
    assert!(mpc_dir.join("ape.csv").exists());

    let rob_dir = dir.path().join("rob");
    run(&[
        os("robustness"),
        os("--config"),
        config.as_os_str(),
        os("--exact"),
        os("--label"),
        os("tiny_exact"),
        os("--out"),
        rob_dir.as_os_str(),
    ]);
    let rob = fs::read_to_string(rob_dir.join("robustness.csv")).unwrap();
    assert!(rob.starts_with("experiment_variable,mae,final_error,spread\n"));
    assert_eq!(rob.lines().count(), 5, "four variable groups");

    let report_dir = dir.path().join("report");
    run(&[
        os("report"),
        os("--config"),
        config.as_os_str(),
        os("--inputs"),
        eval_dir.as_os_str(),
        os("--inputs"),
        rob_dir.as_os_str(),
        os("--out"),
        report_dir.as_os_str(),
    ]);
    assert!(report_dir.join("table_regression.csv").exists());
    assert!(report_dir.join("table_robustness.csv").exists());
    let manifest = fs::read_to_string(report_dir.join("manifest.txt")).unwrap();
    assert!(manifest.lines().count() >= 3);

    // every output directory carries the resolved config
    for d in [&data, &train_dir, &eval_dir, &mpc_dir, &rob_dir, &report_dir] {
        assert!(d.join("config.toml").exists(), "{} lacks config echo", d.display());
    }
}

#[test]
fn mpc_run_duration_override_sets_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out_dir = dir.path().join("mpc");
    let out = satflow()
        .args(["mpc-run", "--exact", "--duration", "2.0", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());
    let cl = fs::read_to_string(out_dir.join("closed_loop.csv")).unwrap();
    assert_eq!(cl.lines().count(), 22, "20 steps + final + header");
}
