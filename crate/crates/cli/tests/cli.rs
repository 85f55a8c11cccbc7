//! End-to-end exercise of the gseg binary: generate data, train, evaluate,
//! predict, audit, and the exit-code contract.

use std::process::{Command, Output};

fn gseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gseg"))
        .args(args)
        .output()
        .expect("binary spawns")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

const TINY_CFG: &str = "\
group = p4
base_width = 2
blocks_per_stage = 1
epochs = 2
batch_size = 4
precision = f32
seed = 3
";

#[test]
fn full_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    std::fs::write(&cfg, TINY_CFG).unwrap();
    let cfg = cfg.to_str().unwrap();
    let data = root.join("data");
    let data_s = data.to_str().unwrap();

    let out = gseg(&[
        "gen-data", "--n", "10", "--size", "32", "--seed", "5", "--out", data_s,
    ]);
    assert_ok(&out, "gen-data");
    for i in 0..10 {
        assert!(data.join(format!("img_{i:05}.ppm")).exists());
        assert!(data.join(format!("msk_{i:05}.pgm")).exists());
    }

    // same seed reproduces every byte
    let data2 = root.join("data2");
    let out = gseg(&[
        "gen-data",
        "--n",
        "10",
        "--size",
        "32",
        "--seed",
        "5",
        "--out",
        data2.to_str().unwrap(),
    ]);
    assert_ok(&out, "gen-data (repeat)");
    for name in ["img_00003.ppm", "msk_00007.pgm"] {
        assert_eq!(
            std::fs::read(data.join(name)).unwrap(),
            std::fs::read(data2.join(name)).unwrap(),
            "{name} differs between identically seeded runs"
        );
    }

    let model = root.join("net.gseg");
    let model_s = model.to_str().unwrap();
    let out = gseg(&[
        "train",
        "--config",
        cfg,
        "--data",
        data_s,
        "--out",
        model_s,
        "--augment",
    ]);
    assert_ok(&out, "train");
    assert!(model.exists());
    let log = std::fs::read_to_string(root.join("net.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(
        lines.next().unwrap(),
        "epoch,lr,train_loss,val_JA,val_DI,val_AC,val_SE,val_SP"
    );
    assert_eq!(lines.count(), 2, "one row per epoch");

    let out = gseg(&["eval", "--model", model_s, "--data", data_s]);
    assert_ok(&out, "eval");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    for key in ["JA ", "DI ", "AC ", "SE ", "SP "] {
        assert!(text.contains(key), "missing {key} in: {text}");
    }
    // pooled averaging is reachable through the config
    let pooled_cfg = root.join("pooled.cfg");
    std::fs::write(&pooled_cfg, "metric_averaging = pooled\n").unwrap();
    let out = gseg(&[
        "eval",
        "--model",
        model_s,
        "--data",
        data_s,
        "--config",
        pooled_cfg.to_str().unwrap(),
    ]);
    assert_ok(&out, "eval (pooled)");

    let pred = root.join("pred.pgm");
    let image = data.join("img_00000.ppm");
    let out = gseg(&[
        "predict",
        "--model",
        model_s,
        "--image",
        image.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
    ]);
    assert_ok(&out, "predict");
    let bytes = std::fs::read(&pred).unwrap();
    assert!(bytes.starts_with(b"P5\n32 32\n255\n"));
    let payload = &bytes[bytes.len() - 32 * 32..];
    assert!(
        payload.iter().all(|&b| b == 0 || b == 255),
        "mask is binary"
    );

    let out = gseg(&["check-equivariance", "--config", cfg, "--trials", "1"]);
    assert_ok(&out, "check-equivariance");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("full_network"), "{text}");

    let out = gseg(&["gradcheck", "--config", cfg, "--seed", "1"]);
    assert_ok(&out, "gradcheck");

    let out = gseg(&["params", "--config", cfg]);
    assert_ok(&out, "params");
    let text = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(text.contains("plain twin"), "{text}");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&gseg(&["no-such-command"])), 2);
    assert_eq!(code(&gseg(&[])), 2);
    assert_eq!(
        code(&gseg(&["gen-data", "--n", "1"])),
        2,
        "missing required args"
    );
}

#[test]
fn runtime_errors_exit_1_without_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = gseg(&[
        "eval",
        "--model",
        root.join("missing.gseg").to_str().unwrap(),
        "--data",
        root.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    // a config with an unknown key is rejected, not half-applied
    let cfg = root.join("bad.cfg");
    std::fs::write(&cfg, "group = p4\nwat = 1\n").unwrap();
    let out = gseg(&["params", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("wat"));

    // failed prediction leaves nothing behind
    let bad_model = root.join("bad.gseg");
    std::fs::write(&bad_model, b"XSEG____junk").unwrap();
    let target = root.join("out.pgm");
    let img = root.join("img.ppm");
    std::fs::write(&img, b"P6\n4 4\n255\n").unwrap(); // truncated on purpose
    let out = gseg(&[
        "predict",
        "--model",
        bad_model.to_str().unwrap(),
        "--image",
        img.to_str().unwrap(),
        "--out",
        target.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
    assert!(!target.exists(), "no partial output file");
}

#[test]
fn gen_data_rejects_bad_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = gseg(&[
        "gen-data",
        "--n",
        "1",
        "--size",
        "31",
        "--seed",
        "0",
        "--out",
        dir.path().join("d").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 1);
}
