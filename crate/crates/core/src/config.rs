//! `key = value` configuration with `#` comments. Unknown keys are
//! rejected; absent keys take the documented defaults. The same grammar is
//! embedded verbatim in model files, so configs round-trip through both
//! `render` and serialization.

use std::path::Path;

use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::segnet::{Downsample, SegNetConfig};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MetricAveraging {
    PerImage,
    Pooled,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FullConfig {
    pub net: SegNetConfig,
    pub train: TrainConfig,
    pub val_split: f64,
    pub precision: Precision,
    pub metric_averaging: MetricAveraging,
}

impl Default for FullConfig {
    fn default() -> Self {
        FullConfig {
            net: SegNetConfig::default(),
            train: TrainConfig::default(),
            val_split: 0.2,
            precision: Precision::F64,
            metric_averaging: MetricAveraging::PerImage,
        }
    }
}

fn bad(line_no: usize, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("line {line_no}: {msg}"))
}

fn parse_num<T: std::str::FromStr>(line_no: usize, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| bad(line_no, format!("cannot parse {key} value {value:?}")))
}

fn parse_bool(line_no: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(
            line_no,
            format!("{key} wants true or false, got {value:?}"),
        )),
    }
}

fn parse_ds_weights(line_no: usize, value: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(bad(
            line_no,
            format!("ds_weights wants three comma-separated reals, got {value:?}"),
        ));
    }
    let mut out = [0.0; 3];
    for (slot, part) in out.iter_mut().zip(&parts) {
        *slot = parse_num(line_no, "ds_weights", part)?;
    }
    Ok(out)
}

/// Parse configuration text; every key is optional.
pub fn parse_config_str(text: &str) -> Result<FullConfig> {
    let mut cfg = FullConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| bad(line_no, format!("expected `key = value`, got {line:?}")))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "group" => {
                cfg.net.group = match value {
                    "p1" => GroupSpec::p1(),
                    "p4" => GroupSpec::p4(),
                    "p4m" => GroupSpec::p4m(),
                    _ => return Err(bad(line_no, format!("unknown group {value:?}"))),
                }
            }
            "equivariant" => cfg.net.equivariant = parse_bool(line_no, key, value)?,
            "base_width" => cfg.net.base_width = parse_num(line_no, key, value)?,
            "num_stages" => cfg.net.num_stages = parse_num(line_no, key, value)?,
            "blocks_per_stage" => cfg.net.blocks_per_stage = parse_num(line_no, key, value)?,
            "downsample" => {
                cfg.net.downsample = match value {
                    "pool" => Downsample::Pool,
                    "strided_conv" => Downsample::StridedConv,
                    _ => return Err(bad(line_no, format!("unknown downsample {value:?}"))),
                }
            }
            "ds_weights" => cfg.net.ds_weights = parse_ds_weights(line_no, value)?,
            "fuse_prediction" => cfg.net.fuse_prediction = parse_bool(line_no, key, value)?,
            "epochs" => cfg.train.epochs = parse_num(line_no, key, value)?,
            "batch_size" => cfg.train.batch_size = parse_num(line_no, key, value)?,
            "lr" => cfg.train.lr = parse_num(line_no, key, value)?,
            "momentum" => cfg.train.momentum = parse_num(line_no, key, value)?,
            "decay_epoch" => cfg.train.decay_epoch = parse_num(line_no, key, value)?,
            "decay_factor" => cfg.train.decay_factor = parse_num(line_no, key, value)?,
            "augment" => cfg.train.augment = parse_bool(line_no, key, value)?,
            "seed" => cfg.train.seed = parse_num(line_no, key, value)?,
            "val_split" => cfg.val_split = parse_num(line_no, key, value)?,
            "precision" => {
                cfg.precision = match value {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => {
                        return Err(bad(
                            line_no,
                            format!("precision wants f32 or f64, got {value:?}"),
                        ))
                    }
                }
            }
            "metric_averaging" => {
                cfg.metric_averaging = match value {
                    "per_image" => MetricAveraging::PerImage,
                    "pooled" => MetricAveraging::Pooled,
                    _ => {
                        return Err(bad(
                            line_no,
                            format!("metric_averaging wants per_image or pooled, got {value:?}"),
                        ))
                    }
                }
            }
            _ => return Err(bad(line_no, format!("unknown key {key:?}"))),
        }
    }
    cfg.net.validate()?;
    if !(0.0..1.0).contains(&cfg.val_split) {
        return Err(Error::Config(format!(
            "val_split must be in [0, 1), got {}",
            cfg.val_split
        )));
    }
    if !(0.0..=1.0).contains(&cfg.train.momentum) {
        return Err(Error::Config(format!(
            "momentum must be in [0, 1], got {}",
            cfg.train.momentum
        )));
    }
    Ok(cfg)
}

pub fn parse_config(path: impl AsRef<Path>) -> Result<FullConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config_str(&text)
}

/// Emit the architecture keys only (what a model file embeds);
/// `parse_config_str(render_net_config(net)).net == *net`.
pub fn render_net_config(net: &SegNetConfig) -> String {
    let group = match net.group.order() {
        1 => "p1",
        4 => "p4",
        _ => "p4m",
    };
    let downsample = match net.downsample {
        Downsample::Pool => "pool",
        Downsample::StridedConv => "strided_conv",
    };
    format!(
        "group = {group}\n\
         equivariant = {}\n\
         base_width = {}\n\
         num_stages = {}\n\
         blocks_per_stage = {}\n\
         downsample = {downsample}\n\
         ds_weights = {},{},{}\n\
         fuse_prediction = {}\n",
        net.equivariant,
        net.base_width,
        net.num_stages,
        net.blocks_per_stage,
        net.ds_weights[0],
        net.ds_weights[1],
        net.ds_weights[2],
        net.fuse_prediction,
    )
}

/// Emit every key; `parse_config_str(render_config(cfg)) == *cfg`.
pub fn render_config(cfg: &FullConfig) -> String {
    let precision = match cfg.precision {
        Precision::F32 => "f32",
        Precision::F64 => "f64",
    };
    let averaging = match cfg.metric_averaging {
        MetricAveraging::PerImage => "per_image",
        MetricAveraging::Pooled => "pooled",
    };
    format!(
        "{}\
         epochs = {}\n\
         batch_size = {}\n\
         lr = {}\n\
         momentum = {}\n\
         decay_epoch = {}\n\
         decay_factor = {}\n\
         augment = {}\n\
         seed = {}\n\
         val_split = {}\n\
         precision = {precision}\n\
         metric_averaging = {averaging}\n",
        render_net_config(&cfg.net),
        cfg.train.epochs,
        cfg.train.batch_size,
        cfg.train.lr,
        cfg.train.momentum,
        cfg.train.decay_epoch,
        cfg.train.decay_factor,
        cfg.train.augment,
        cfg.train.seed,
        cfg.val_split,
    )
}
