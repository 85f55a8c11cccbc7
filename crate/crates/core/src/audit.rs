//! Equivariance and gradient audits: each check builds a fresh randomized
//! instance of a layer (or a whole network), pushes a transformed copy of the
//! input through it, and measures how far the output drifts from the
//! group-transformed original. Used by the CLI audit commands and the
//! acceptance suite.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autograd::{finite_diff_check, CoordSample, Tape, VarId};
use crate::error::Result;
use crate::glayers::{g_batch_norm_train, g_max_pool, g_projection, g_upsample, GConv2d};
use crate::group::GroupSpec;
use crate::scalar::Scalar;
use crate::segnet::{SegNet, SegNetConfig};
use crate::tensor::Tensor;
use crate::transform::{transform_feature_g, transform_feature_z2};

/// Worst deviation seen for one named check.
#[derive(Debug, Clone)]
pub struct Deviation {
    pub name: String,
    pub max_dev: f64,
}

fn rand_tensor<F: Scalar>(dims: &[usize], lo: f64, hi: f64, rng: &mut StdRng) -> Tensor<F> {
    let n = dims.iter().product();
    let data = (0..n).map(|_| F::of_f64(rng.gen_range(lo..hi))).collect();
    Tensor::from_vec(dims, data).expect("dims match data")
}

/// Apply the regular representation to a flattened `[B, K·S, H, W]` map.
fn transform_g_flat<F: Scalar>(
    g: crate::group::StabilizerElement,
    x: &Tensor<F>,
    group: GroupSpec,
) -> Result<Tensor<F>> {
    let d = x.dims().to_vec();
    let s = group.order();
    let r5 = x.clone().reshape(&[d[0], d[1] / s, s, d[2], d[3]])?;
    transform_feature_g(g, &r5, group)?.reshape(&d)
}

fn run_conv<F: Scalar>(layer: &GConv2d, x: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let wc = tape.constant(w.clone());
    let y = layer.apply(&mut tape, xc, wc)?;
    Ok(tape.value(y).clone())
}

fn run_unary<F: Scalar>(
    x: &Tensor<F>,
    f: impl FnOnce(&mut Tape<F>, VarId) -> Result<VarId>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let y = f(&mut tape, xc)?;
    Ok(tape.value(y).clone())
}

/// Max deviation from exact equivariance for each layer type under every
/// element of `group`, over `trials` randomized instances.
pub fn layer_equivariance<F: Scalar>(
    group: GroupSpec,
    trials: usize,
    seed: u64,
) -> Result<Vec<Deviation>> {
    let mut rng = StdRng::seed_from_u64(seed);
    let s = group.order();
    let (b, k, h) = (2, 2, 8);
    let mut report: Vec<Deviation> = [
        "conv_z2_to_g",
        "conv_g_to_g",
        "upsample",
        "projection",
        "max_pool",
        "batch_norm",
    ]
    .iter()
    .map(|n| Deviation {
        name: n.to_string(),
        max_dev: 0.0,
    })
    .collect();

    for _ in 0..trials {
        // lifting convolution: plane input, group-transformed output
        let layer = GConv2d::z2_to_g(group, 3, k, 3, 1, 1)?;
        let w = Tensor::<F>::he_uniform(&layer.weight_dims(), layer.fan_in(), &mut rng);
        let x = rand_tensor::<F>(&[b, 3, h, h], -1.0, 1.0, &mut rng);
        let y = run_conv(&layer, &x, &w)?;
        for g in group.elements() {
            let yt = run_conv(&layer, &transform_feature_z2(g, &x)?, &w)?;
            let dev = yt.max_abs_diff(&transform_g_flat(g, &y, group)?)?;
            report[0].max_dev = report[0].max_dev.max(dev);
        }

        // group-to-group convolution and the three weightless G-ops
        let layer = GConv2d::g_to_g(group, k, k, 3, 1, 1)?;
        let w = Tensor::<F>::he_uniform(&layer.weight_dims(), layer.fan_in(), &mut rng);
        let x = rand_tensor::<F>(&[b, k * s, h, h], -1.0, 1.0, &mut rng);
        let y = run_conv(&layer, &x, &w)?;
        let up = run_unary(&x, |t, v| g_upsample(t, v, 2, group))?;
        let proj = run_unary(&x, |t, v| g_projection(t, v, group))?;
        let pool = run_unary(&x, |t, v| g_max_pool(t, v, group))?;
        let gamma = rand_tensor::<F>(&[k], 0.5, 1.5, &mut rng);
        let beta = rand_tensor::<F>(&[k], -0.5, 0.5, &mut rng);
        let bn = run_unary(&x, |t, v| {
            let gc = t.constant(gamma.clone());
            let bc = t.constant(beta.clone());
            Ok(g_batch_norm_train(t, v, gc, bc, group)?.0)
        })?;

        for g in group.elements() {
            let xt = transform_g_flat(g, &x, group)?;
            let yt = run_conv(&layer, &xt, &w)?;
            report[1].max_dev = report[1]
                .max_dev
                .max(yt.max_abs_diff(&transform_g_flat(g, &y, group)?)?);

            let upt = run_unary(&xt, |t, v| g_upsample(t, v, 2, group))?;
            report[2].max_dev = report[2]
                .max_dev
                .max(upt.max_abs_diff(&transform_g_flat(g, &up, group)?)?);

            // projection collapses the group axis: the result moves like a
            // plane feature map
            let projt = run_unary(&xt, |t, v| g_projection(t, v, group))?;
            report[3].max_dev = report[3]
                .max_dev
                .max(projt.max_abs_diff(&transform_feature_z2(g, &proj)?)?);

            let poolt = run_unary(&xt, |t, v| g_max_pool(t, v, group))?;
            report[4].max_dev = report[4]
                .max_dev
                .max(poolt.max_abs_diff(&transform_g_flat(g, &pool, group)?)?);

            let bnt = run_unary(&xt, |t, v| {
                let gc = t.constant(gamma.clone());
                let bc = t.constant(beta.clone());
                Ok(g_batch_norm_train(t, v, gc, bc, group)?.0)
            })?;
            report[5].max_dev = report[5]
                .max_dev
                .max(bnt.max_abs_diff(&transform_g_flat(g, &bn, group)?)?);
        }
    }
    Ok(report)
}

fn head_logits<F: Scalar>(net: &SegNet<F>, x: &Tensor<F>) -> Result<[Tensor<F>; 3]> {
    let mut tape = Tape::new();
    let xc = tape.constant(x.clone());
    let pvars: Vec<VarId> = net
        .params()
        .iter()
        .map(|p| tape.constant(p.tensor.clone()))
        .collect();
    let out = net.forward_with(&mut tape, xc, &pvars, false)?;
    Ok([out.main, out.aux_half, out.aux_quarter].map(|v| tape.value(v).clone()))
}

/// Max deviation of the network's head logits from exact equivariance under
/// the configured group, over `trials` random inputs. Running statistics are
/// randomized first: inference-mode equivariance must hold for any buffer
/// content, not just the fresh 0/1 initialization.
pub fn net_equivariance<F: Scalar>(
    config: &SegNetConfig,
    trials: usize,
    size: usize,
    seed: u64,
) -> Result<f64> {
    let mut net = SegNet::<F>::build(config, seed)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x0BAD_5EED);
    for b in net.buffers_mut() {
        let lo = if b.name.ends_with("running_var") {
            0.5
        } else {
            -1.0
        };
        for v in b.tensor.data_mut() {
            *v = F::of_f64(rng.gen_range(lo..lo + 1.5));
        }
    }
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let x = rand_tensor::<F>(
            &[1, crate::segnet::IN_CHANNELS, size, size],
            0.0,
            1.0,
            &mut rng,
        );
        let logits = head_logits(&net, &x)?;
        for g in config.effective_group().elements() {
            let moved = head_logits(&net, &transform_feature_z2(g, &x)?)?;
            for (base, got) in logits.iter().zip(&moved) {
                worst = worst.max(got.max_abs_diff(&transform_feature_z2(g, base)?)?);
            }
        }
    }
    Ok(worst)
}

/// Central-difference check of the loss gradient through every parameter of
/// a freshly built network. Probes `per_tensor` coordinates per parameter;
/// returns the max relative error.
pub fn gradcheck_net<F: Scalar>(
    config: &SegNetConfig,
    size: usize,
    per_tensor: usize,
    epsilon: f64,
    seed: u64,
) -> Result<f64> {
    let net = SegNet::<F>::build(config, seed)?;
    let mut rng = StdRng::seed_from_u64(seed ^ 0x6BAD_C4EC);
    let x = rand_tensor::<F>(
        &[1, crate::segnet::IN_CHANNELS, size, size],
        0.0,
        1.0,
        &mut rng,
    );
    let target = rand_tensor::<F>(&[1, 1, size, size], 0.0, 1.0, &mut rng).map(|v| {
        if v.as_f64() >= 0.5 {
            F::one()
        } else {
            F::zero()
        }
    });
    let params: Vec<Tensor<F>> = net.params().iter().map(|p| p.tensor.clone()).collect();
    finite_diff_check(
        &params,
        epsilon,
        CoordSample::Random {
            per_tensor,
            seed: seed ^ 0xC0DE,
        },
        |tape, ids| {
            let xc = tape.constant(x.clone());
            let out = net.forward_with(tape, xc, ids, true)?;
            net.loss(tape, &out, &target)
        },
    )
}
