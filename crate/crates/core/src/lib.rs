//! Numerical engine for group-equivariant (p4/p4m) segmentation networks.

pub mod audit;
pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
mod fsio;
pub mod glayers;
pub mod group;
pub mod metrics;
pub mod model_io;
pub mod pnm;
pub mod scalar;
pub mod segnet;
pub mod tensor;
pub mod train;
pub mod transform;

pub use audit::{gradcheck_net, layer_equivariance, net_equivariance, Deviation};
pub use autograd::{finite_diff_check, CoordSample, Tape, VarId};
pub use config::{
    parse_config, parse_config_str, render_config, FullConfig, MetricAveraging, Precision,
};
pub use data::{gen_synthetic, load_dataset, split_dataset, SampleRecord};
pub use error::{Error, Result};
pub use glayers::GConv2d;
pub use group::{GroupKind, GroupSpec, StabilizerElement, IDENTITY};
pub use metrics::{evaluate, evaluate_pooled, metrics, ConfusionCounts, Metrics};
pub use model_io::{load_model, save_model};
pub use scalar::Scalar;
pub use segnet::{Downsample, SegNet, SegNetConfig};
pub use tensor::Tensor;
pub use train::{train, write_log, EpochLog, TrainConfig};
pub use transform::{transform_feature_g, transform_feature_z2};

/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Double-precision tensor.
pub type Tensor64 = Tensor<f64>;
