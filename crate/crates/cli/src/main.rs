//! `gseg`: dataset generation, training, evaluation, prediction, and the
//! equivariance/gradient audits, over one shared config format.
//!
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use gseg_core::config::{parse_config, FullConfig, MetricAveraging, Precision};
use gseg_core::data::{gen_synthetic, load_dataset, split_dataset};
use gseg_core::metrics::{evaluate, evaluate_pooled, Metrics};
use gseg_core::model_io::{load_model, save_model};
use gseg_core::pnm::{read_ppm, write_pgm};
use gseg_core::segnet::SegNet;
use gseg_core::train::{train, write_log};
use gseg_core::{audit, Scalar, Tensor};

#[derive(Parser)]
#[command(
    name = "gseg",
    version,
    about = "Group-equivariant segmentation engine"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic lesion dataset (PPM images + PGM masks)
    GenData {
        /// Number of image/mask pairs
        #[arg(long)]
        n: usize,
        /// Square image side in pixels (even, ≥ 32)
        #[arg(long)]
        size: usize,
        /// Master seed; sample i derives its own seed from it
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (created if absent)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network; writes the model and a CSV log next to it
    Train {
        /// Config file path, or "default"
        #[arg(long)]
        config: String,
        /// Dataset directory from gen-data
        #[arg(long)]
        data: PathBuf,
        /// Output model file; the log lands at the same path with .csv
        #[arg(long)]
        out: PathBuf,
        /// Random dihedral augmentation of every sample visit
        #[arg(long)]
        augment: bool,
    },
    /// Evaluate a model on a dataset and print the five metrics
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Config file path or "default"; sets the metric averaging mode
        #[arg(long, default_value = "default")]
        config: String,
    },
    /// Predict a mask for one image
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// Input image (P6 PPM)
        #[arg(long)]
        image: PathBuf,
        /// Output mask (P5 PGM)
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit per-layer and whole-network equivariance
    CheckEquivariance {
        /// Config file path, or "default"
        #[arg(long)]
        config: String,
        /// Randomized instances per layer check
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Max tolerated deviation
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Compare tape gradients against central finite differences
    Gradcheck {
        /// Config file path, or "default"
        #[arg(long)]
        config: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print parameter counts for the configured net and its plain twin
    Params {
        /// Config file path, or "default"
        #[arg(long)]
        config: String,
    },
}

fn load_config(arg: &str) -> Result<FullConfig> {
    if arg == "default" {
        return Ok(FullConfig::default());
    }
    Ok(parse_config(Path::new(arg))?)
}

fn print_metrics(m: &Metrics) {
    println!("JA {:.6}", m.jaccard);
    println!("DI {:.6}", m.dice);
    println!("AC {:.6}", m.accuracy);
    println!("SE {:.6}", m.sensitivity);
    println!("SP {:.6}", m.specificity);
}

fn cmd_train<F: Scalar>(cfg: &FullConfig, data: &Path, out: &Path) -> Result<()> {
    let records = load_dataset::<F>(data)?;
    let (tr, va) = split_dataset(records, cfg.val_split, cfg.train.seed)?;
    let unpack = |rs: Vec<gseg_core::data::SampleRecord<F>>| -> Vec<(Tensor<F>, Tensor<F>)> {
        rs.into_iter().map(|r| (r.image, r.mask)).collect()
    };
    let (tr, va) = (unpack(tr), unpack(va));
    let mut net = SegNet::<F>::build(&cfg.net, cfg.train.seed)?;
    eprintln!(
        "training {} params on {} samples ({} held out) for {} epochs",
        net.count_params(),
        tr.len(),
        va.len(),
        cfg.train.epochs
    );
    let logs = train(&mut net, &tr, &va, &cfg.train)?;
    save_model(&net, out)?;
    write_log(out.with_extension("csv"), &logs)?;
    if let Some(last) = logs.last() {
        eprintln!("final train loss {:.6}", last.train_loss);
        if let Some(m) = &last.val {
            eprintln!("final val JA {:.6}", m.jaccard);
        }
    }
    Ok(())
}

fn cmd_eval(cfg: &FullConfig, model: &Path, data: &Path) -> Result<()> {
    let net: SegNet<f64> = load_model(model)?;
    let pairs: Vec<(Tensor<f64>, Tensor<f64>)> = load_dataset::<f64>(data)?
        .into_iter()
        .map(|r| (r.image, r.mask))
        .collect();
    let m = match cfg.metric_averaging {
        MetricAveraging::PerImage => evaluate(&net, &pairs)?,
        MetricAveraging::Pooled => evaluate_pooled(&net, &pairs)?,
    };
    print_metrics(&m);
    Ok(())
}

fn cmd_predict(model: &Path, image: &Path, out: &Path) -> Result<()> {
    let net: SegNet<f64> = load_model(model)?;
    let img = read_ppm::<f64>(image)?;
    let d = img.dims().to_vec();
    let batch = img.reshape(&[1, d[0], d[1], d[2]])?;
    let mask = net.predict(&batch)?;
    write_pgm(out, &mask.reshape(&[1, d[1], d[2]])?)?;
    Ok(())
}

fn cmd_check_equivariance(cfg: &FullConfig, trials: usize, tol: f64) -> Result<ExitCode> {
    let group = cfg.net.effective_group();
    let report = audit::layer_equivariance::<f64>(group, trials, 0)?;
    let size = 4 * cfg.net.spatial_divisor();
    let full = audit::net_equivariance::<f64>(&cfg.net, trials, size, 0)?;
    let mut pass = true;
    println!(
        "group {:?}, {trials} trial(s), tolerance {tol:.1e}",
        group.kind()
    );
    for line in &report {
        let ok = line.max_dev < tol;
        pass &= ok;
        println!(
            "{:<14} max deviation {:.3e}  {}",
            line.name,
            line.max_dev,
            if ok { "ok" } else { "FAIL" }
        );
    }
    let ok = full < tol;
    pass &= ok;
    println!(
        "{:<14} max deviation {:.3e}  {}",
        "full_network",
        full,
        if ok { "ok" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_gradcheck(cfg: &FullConfig, seed: u64) -> Result<ExitCode> {
    let size = 2 * cfg.net.spatial_divisor();
    let err = audit::gradcheck_net::<f64>(&cfg.net, size, 2, 1e-5, seed)?;
    let pass = err < 1e-4;
    println!(
        "max relative gradient error {:.3e}  {}",
        err,
        if pass { "ok" } else { "FAIL" }
    );
    Ok(if pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_params(cfg: &FullConfig) -> Result<()> {
    let net = SegNet::<f64>::build(&cfg.net, 0)?;
    let twin = SegNet::<f64>::build(&cfg.net.plain_twin(), 0)?;
    let (a, b) = (net.count_params(), twin.count_params());
    println!(
        "configured net: {a} parameters ({})",
        if cfg.net.equivariant {
            "equivariant"
        } else {
            "plain"
        }
    );
    println!("plain twin:     {b} parameters");
    println!("ratio:          {:.4}", a as f64 / b as f64);
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::GenData { n, size, seed, out } => {
            gen_synthetic(n, size, seed, &out)
                .with_context(|| format!("generating {n} samples in {}", out.display()))?;
            eprintln!("wrote {n} image/mask pairs to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Train {
            config,
            data,
            out,
            augment,
        } => {
            let mut cfg = load_config(&config)?;
            cfg.train.augment |= augment;
            match cfg.precision {
                Precision::F32 => cmd_train::<f32>(&cfg, &data, &out)?,
                Precision::F64 => cmd_train::<f64>(&cfg, &data, &out)?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Eval {
            model,
            data,
            config,
        } => {
            cmd_eval(&load_config(&config)?, &model, &data)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Predict { model, image, out } => {
            cmd_predict(&model, &image, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::CheckEquivariance {
            config,
            trials,
            tol,
        } => cmd_check_equivariance(&load_config(&config)?, trials, tol),
        Cmd::Gradcheck { config, seed } => cmd_gradcheck(&load_config(&config)?, seed),
        Cmd::Params { config } => {
            cmd_params(&load_config(&config)?)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
