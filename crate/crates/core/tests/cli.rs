//! End-to-end command-line behavior: determinism, report contracts, exit
//! codes, and export formats.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fieldgen"))
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut entries: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    entries.sort();
    entries
}

fn write_tiny_config(path: &Path) {
    std::fs::write(
        path,
        "model.n_c = 4\nmodel.n_g = 16\nmodel.heads = 2\nmodel.attn_layers = 1\n\
         model.mamba_layers = 1\nmodel.state_width = 4\nmodel.k = 3\n\
         train.epochs = 40\ntrain.lr = 0.003\nfinetune.steps = 5\n",
    )
    .unwrap();
}

#[test]
fn gen_data_same_seed_writes_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let status = bin()
            .args([
                "gen-data",
                "--case",
                "gaussian",
                "--seed",
                "7",
                "--n-bd",
                "20",
                "--n-q",
                "10",
                "--t-steps",
                "2",
            ])
            .arg("--out")
            .arg(dir.path().join(name))
            .status()
            .unwrap();
        assert!(status.success());
    }
    assert_eq!(
        read_dir_bytes(&dir.path().join("a")),
        read_dir_bytes(&dir.path().join("b"))
    );
}

#[test]
fn usage_errors_exit_1_runtime_errors_exit_2() {
    // unknown subcommand
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));

    // bad flag value is a usage error
    let out = bin()
        .args(["gen-data", "--case", "nonsense", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));

    // missing checkpoint file is a runtime failure
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(dir.path().join("absent.ckpt"))
        .arg("--data")
        .arg(dir.path().join("absent-data"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // unknown config key is a usage error
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "no.such.key = 1\n").unwrap();
    let data = dir.path().join("d");
    assert!(bin()
        .args(["gen-data", "--case", "uniform", "--n-bd", "8", "--n-q", "4"])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("m.ckpt"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_enumerates_every_config_key() {
    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    for (key, _) in fieldgen::config::KEY_DESCRIPTIONS {
        assert!(text.contains(key), "--help is missing {key}");
    }
}

#[test]
fn pipeline_train_eval_finetune_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg);

    assert!(bin()
        .args([
            "gen-data", "--case", "gaussian", "--seed", "3", "--n-bd", "24", "--n-q", "12",
            "--t-steps", "3",
        ])
        .arg("--out")
        .arg(&data)
        .status()
        .unwrap()
        .success());

    let ckpt = dir.path().join("model.ckpt");
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ckpt)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    assert!(dir.path().join("model.log.csv").exists());
    let log = std::fs::read_to_string(dir.path().join("model.log.csv")).unwrap();
    assert!(log.starts_with("step,epoch,loss\n"));

    // eval with ground truth
    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = String::from_utf8_lossy(&out.stdout);
    assert!(report.contains("mse.total = "));
    assert!(report.contains("r.continuity = "));

    // residual-only path
    let report_file = dir.path().join("report.txt");
    let out = bin()
        .args(["eval", "--no-gt", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&report_file)
        .output()
        .unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("mse = n/a"));
    assert!(!text.contains("mse.total"));
    assert!(text.contains("r.total = "));
    assert_eq!(std::fs::read_to_string(&report_file).unwrap(), text);

    // fine-tune and evaluate the refined parameters
    let ft = dir.path().join("ft.ckpt");
    let out = bin()
        .args(["finetune", "--config"])
        .arg(&cfg)
        .arg("--ckpt")
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ft)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let history = std::fs::read_to_string(dir.path().join("ft.history.csv")).unwrap();
    assert!(history.starts_with("step,loss,l_selfsup,r_continuity,r_momentum_x,r_momentum_y,mse_vs_gt\n"));
    assert_eq!(history.lines().count(), 5 + 2); // header + steps + final state

    let out = bin()
        .args(["eval", "--ckpt"])
        .arg(&ckpt)
        .arg("--ft")
        .arg(&ft)
        .arg("--data")
        .arg(&data)
        .output()
        .unwrap();
    assert!(out.status.success());

    // exports
    let csv = dir.path().join("rho.csv");
    assert!(bin()
        .args(["export", "--channel", "rho", "--step", "1", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&csv)
        .status()
        .unwrap()
        .success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("x,y,value\n"));
    assert_eq!(text.lines().count(), 13);

    let ppm = dir.path().join("rho.ppm");
    assert!(bin()
        .args(["export", "--channel", "rho", "--step", "3", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(&ppm)
        .status()
        .unwrap()
        .success());
    let bytes = std::fs::read(&ppm).unwrap();
    assert!(bytes.starts_with(b"P6\n256 256\n255\n"));
    assert_eq!(bytes.len(), 15 + 256 * 256 * 3);

    // bad step index is a usage error
    let out = bin()
        .args(["export", "--channel", "rho", "--step", "9", "--ckpt"])
        .arg(&ckpt)
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("x.csv"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn analyze_writes_expected_csvs_and_is_thread_invariant() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    write_tiny_config(&cfg);
    let mut data_args = Vec::new();
    for i in 0..4 {
        let d = dir.path().join(format!("d{i}"));
        assert!(bin()
            .args([
                "gen-data", "--case", "gaussian", "--n-bd", "20", "--n-q", "10", "--t-steps",
                "2", "--sigma", &format!("{}", 0.15 + 0.05 * i as f64), "--seed",
                &format!("{i}"),
            ])
            .arg("--out")
            .arg(&d)
            .status()
            .unwrap()
            .success());
        data_args.push(d);
    }
    let ckpt = dir.path().join("model.ckpt");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(&data_args[0])
        .arg("--out")
        .arg(&ckpt)
        .status()
        .unwrap()
        .success());

    let data_list = data_args
        .iter()
        .map(|p| p.to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join(",");
    let run = |out_name: &str, threads: &str| {
        let out_dir = dir.path().join(out_name);
        assert!(bin()
            .args(["analyze", "--threads", threads, "--ckpt"])
            .arg(&ckpt)
            .arg("--data")
            .arg(&data_list)
            .arg("--out-dir")
            .arg(&out_dir)
            .status()
            .unwrap()
            .success());
        out_dir
    };
    let serial = run("a1", "1");
    for f in ["evr.csv", "clusters.csv", "silhouette.csv", "ablation_seg0.csv", "ablation_full.csv"] {
        assert!(serial.join(f).exists(), "missing {f}");
    }
    let evr = std::fs::read_to_string(serial.join("evr.csv")).unwrap();
    assert!(evr.starts_with("component,evr\n"));

    let parallel = run("a2", "3");
    assert_eq!(
        read_dir_bytes(&serial),
        read_dir_bytes(&parallel),
        "analysis outputs depend on --threads"
    );
}
