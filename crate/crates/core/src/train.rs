//! Mini-batch SGD with momentum, the step-decay schedule, dihedral data
//! augmentation, and the deterministic epoch loop with per-epoch logging.

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::group::{GroupSpec, StabilizerElement};
use crate::metrics::{evaluate, Metrics};
use crate::scalar::Scalar;
use crate::segnet::{NamedTensor, SegNet};
use crate::tensor::Tensor;
use crate::transform::transform_feature_z2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub decay_epoch: usize,
    pub decay_factor: f64,
    pub augment: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 70,
            batch_size: 8,
            lr: 0.01,
            momentum: 0.9,
            decay_epoch: 60,
            decay_factor: 0.1,
            augment: false,
            seed: 0,
        }
    }
}

/// Constant learning rate until `decay_epoch`, then scaled once.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.decay_epoch {
        cfg.lr
    } else {
        cfg.lr * cfg.decay_factor
    }
}

/// Classical momentum: `v ← momentum·v + g; w ← w − lr·v`.
pub fn sgd_step<F: Scalar>(
    params: &mut [NamedTensor<F>],
    grads: &[Tensor<F>],
    velocity: &mut [Tensor<F>],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::shape(format!(
            "optimizer state mismatch: {} params, {} grads, {} velocities",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let m = F::of_f64(momentum);
    let step = F::of_f64(lr);
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        if g.dims() != p.tensor.dims() || v.dims() != p.tensor.dims() {
            return Err(Error::shape(format!(
                "optimizer shapes for {} disagree: param {:?}, grad {:?}, velocity {:?}",
                p.name,
                p.tensor.dims(),
                g.dims(),
                v.dims()
            )));
        }
        if !g.all_finite() {
            return Err(Error::non_finite(format!("gradient of {}", p.name)));
        }
        for ((w, &gv), vv) in p
            .tensor
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(v.data_mut())
        {
            *vv = m * *vv + gv;
            *w = *w - step * *vv;
        }
    }
    Ok(())
}

/// The dihedral element a given seed selects (uniform over all eight).
pub(crate) fn dihedral_draw(seed: u64) -> StabilizerElement {
    let idx = StdRng::seed_from_u64(seed).gen_range(0..8usize);
    GroupSpec::p4m().elements()[idx]
}

/// Apply one uniformly random dihedral transform to image and mask jointly.
pub fn augment<F: Scalar>(
    image: &Tensor<F>,
    mask: &Tensor<F>,
    seed: u64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let g = dihedral_draw(seed);
    Ok((
        transform_feature_z2(g, image)?,
        transform_feature_z2(g, mask)?,
    ))
}

#[derive(Clone, Debug)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<Metrics>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,lr,train_loss,val_JA,val_DI,val_AC,val_SE,val_SP";

    pub fn csv_row(&self) -> String {
        let head = format!("{},{},{}", self.epoch, self.lr, self.train_loss);
        match &self.val {
            Some(m) => format!(
                "{head},{},{},{},{},{}",
                m.jaccard, m.dice, m.accuracy, m.sensitivity, m.specificity
            ),
            None => format!("{head},,,,,"),
        }
    }
}

/// Render per-epoch logs as CSV and write the file atomically.
pub fn write_log(path: impl AsRef<std::path::Path>, logs: &[EpochLog]) -> Result<()> {
    let mut text = String::from(EpochLog::CSV_HEADER);
    text.push('\n');
    for log in logs {
        text.push_str(&log.csv_row());
        text.push('\n');
    }
    crate::fsio::atomic_write(path.as_ref(), text.as_bytes())
}

fn assemble_batch<F: Scalar>(
    data: &[(Tensor<F>, Tensor<F>)],
    picks: &[usize],
    do_augment: bool,
    rng: &mut StdRng,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (im0, ms0) = &data[picks[0]];
    if im0.rank() != 3 || ms0.rank() != 3 {
        return Err(Error::shape(format!(
            "samples must be ([C,H,W], [1,H,W]), got {:?} and {:?}",
            im0.dims(),
            ms0.dims()
        )));
    }
    let mut idims = vec![picks.len()];
    idims.extend_from_slice(im0.dims());
    let mut mdims = vec![picks.len()];
    mdims.extend_from_slice(ms0.dims());
    let mut images = Tensor::zeros(&idims);
    let mut masks = Tensor::zeros(&mdims);
    let isz = im0.len();
    let msz = ms0.len();
    for (slot, &i) in picks.iter().enumerate() {
        let (im, ms) = &data[i];
        if im.dims() != im0.dims() || ms.dims() != ms0.dims() {
            return Err(Error::shape(format!(
                "sample {i} has shape {:?}/{:?}, expected {:?}/{:?}",
                im.dims(),
                ms.dims(),
                im0.dims(),
                ms0.dims()
            )));
        }
        let (im, ms) = if do_augment {
            augment(im, ms, rng.gen())?
        } else {
            (im.clone(), ms.clone())
        };
        images.data_mut()[slot * isz..(slot + 1) * isz].copy_from_slice(im.data());
        masks.data_mut()[slot * msz..(slot + 1) * msz].copy_from_slice(ms.data());
    }
    Ok((images, masks))
}

fn step<F: Scalar>(
    net: &mut SegNet<F>,
    images: &Tensor<F>,
    masks: &Tensor<F>,
    lr: f64,
    momentum: f64,
    velocity: &mut [Tensor<F>],
    epoch: usize,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let out = net.forward(&mut tape, x, true)?;
    let loss = net.loss(&mut tape, &out, masks)?;
    let loss_val = tape.value(loss).item()?.as_f64();
    if !loss_val.is_finite() {
        return Err(Error::non_finite(format!(
            "training diverged at epoch {epoch}: loss"
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<Tensor<F>> = out
        .param_vars
        .iter()
        .zip(net.params())
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(&p.tensor))
        })
        .collect();
    sgd_step(net.params_mut(), &grads, velocity, lr, momentum)?;
    net.apply_bn_updates(&out.bn_updates);
    Ok(loss_val)
}

/// Shuffled mini-batch SGD over `([3,H,W], [1,H,W])` pairs. Fully
/// deterministic for a fixed config; augmentation draws one dihedral
/// transform per sample per visit when enabled. Validation metrics are
/// logged per epoch when `val_data` is non-empty.
pub fn train<F: Scalar>(
    net: &mut SegNet<F>,
    train_data: &[(Tensor<F>, Tensor<F>)],
    val_data: &[(Tensor<F>, Tensor<F>)],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if train_data.is_empty() {
        return Err(Error::arg("training dataset is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::arg("batch_size must be ≥ 1"));
    }
    let mut velocity: Vec<Tensor<F>> = net
        .params()
        .iter()
        .map(|p| Tensor::zeros_like(&p.tensor))
        .collect();
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, masks) = assemble_batch(train_data, chunk, cfg.augment, &mut rng)?;
            loss_sum += step(net, &images, &masks, lr, cfg.momentum, &mut velocity, epoch)?;
            batches += 1;
        }
        let val = if val_data.is_empty() {
            None
        } else {
            Some(evaluate(net, val_data)?)
        };
        logs.push(EpochLog {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val,
        });
    }
    Ok(logs)
}
