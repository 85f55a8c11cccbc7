//! Group-equivariant layers: Z²→G and G→G convolution by filter expansion,
//! plus G-upsampling, G-projection, G-max-pooling and G-batch-norm.
//!
//! A G-feature map with K channels over a group of order S lives on the tape
//! as a plain `[B, K·S, H, W]` tensor — the row-major flattening of
//! `[B, K, S, H, W]`, so channel `k·S + s` is G-channel `k` at stabilizer
//! slot `s`. Both convolutions expand their compact weights into an ordinary
//! convolution kernel with a precomputed gather map, then defer to `conv2d`;
//! the gather's scatter-add backward automatically sums weight gradients
//! over all tied positions.

use std::sync::Arc;

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::group::GroupSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// For each group element, the spatial permutation `q ↦ act(g⁻¹, q)` on a
/// `k×k` kernel grid, as flat indices.
fn inverse_action_tables(group: GroupSpec, k: usize) -> Result<Vec<Vec<usize>>> {
    group
        .elements()
        .iter()
        .map(|g| {
            let inv = g.inverse();
            (0..k * k)
                .map(|q| {
                    let (r, c) = inv.act_on_offset((q / k, q % k), k)?;
                    Ok(r * k + c)
                })
                .collect()
        })
        .collect()
}

/// Gather map realizing `expand_filter_z2`: source indices into a
/// `[K, C, k, k]` weight for each element of the `[K, S, C, k, k]` expansion.
fn build_map_z2(group: GroupSpec, k_out: usize, c_in: usize, k: usize) -> Result<Vec<u32>> {
    let tables = inverse_action_tables(group, k)?;
    let kk = k * k;
    if k_out * c_in * kk > u32::MAX as usize {
        return Err(Error::arg("weight tensor too large to expand"));
    }
    let mut map = Vec::with_capacity(k_out * tables.len() * c_in * kk);
    for ko in 0..k_out {
        for table in &tables {
            for c in 0..c_in {
                let base = (ko * c_in + c) * kk;
                map.extend(table.iter().map(|&q| (base + q) as u32));
            }
        }
    }
    Ok(map)
}

/// Gather map realizing `expand_filter_g`: source indices into a
/// `[K, C, S, k, k]` weight for each element of the `[K, S, C, S, k, k]`
/// expansion, whose slice at output element g has input-group channel h
/// equal to the weight's channel g⁻¹h, spatially transformed by g.
fn build_map_g(group: GroupSpec, k_out: usize, c_in: usize, k: usize) -> Result<Vec<u32>> {
    let tables = inverse_action_tables(group, k)?;
    let elems = group.elements();
    let s = elems.len();
    let kk = k * k;
    if k_out * c_in * s * kk > u32::MAX as usize {
        return Err(Error::arg("weight tensor too large to expand"));
    }
    let mut map = Vec::with_capacity(k_out * s * c_in * s * kk);
    for ko in 0..k_out {
        for (gi, g) in elems.iter().enumerate() {
            let inv = g.inverse();
            let table = &tables[gi];
            for c in 0..c_in {
                for &h in &elems {
                    let src_s = group.index_of(inv.compose(h)).expect("closure");
                    let base = ((ko * c_in + c) * s + src_s) * kk;
                    map.extend(table.iter().map(|&q| (base + q) as u32));
                }
            }
        }
    }
    Ok(map)
}

/// Expand `[K, C, k, k]` plane weights into per-element kernels
/// `[K, S, C, k, k]`: slice `g` is the kernel spatially transformed by `g`.
pub fn expand_filter_z2<F: Scalar>(w: &Tensor<F>, group: GroupSpec) -> Result<Tensor<F>> {
    let d = w.dims().to_vec();
    if d.len() != 4 || d[2] != d[3] {
        return Err(Error::shape(format!("want weights [K,C,k,k], got {d:?}")));
    }
    let map = build_map_z2(group, d[0], d[1], d[2])?;
    let data = map.iter().map(|&i| w.data()[i as usize]).collect();
    Tensor::from_vec(&[d[0], group.order(), d[1], d[2], d[3]], data)
}

/// Expand `[K, C, S, k, k]` group weights into `[K, S, C, S, k, k]` — the
/// regular-representation twist combining an input-slot permutation with the
/// spatial kernel transform.
pub fn expand_filter_g<F: Scalar>(w: &Tensor<F>, group: GroupSpec) -> Result<Tensor<F>> {
    let d = w.dims().to_vec();
    let s = group.order();
    if d.len() != 5 || d[2] != s || d[3] != d[4] {
        return Err(Error::shape(format!(
            "want weights [K,C,{s},k,k], got {d:?}"
        )));
    }
    let map = build_map_g(group, d[0], d[1], d[3])?;
    let data = map.iter().map(|&i| w.data()[i as usize]).collect();
    Tensor::from_vec(&[d[0], s, d[1], s, d[3], d[4]], data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum GConvKind {
    Z2ToG,
    GToG,
}

/// A group convolution layer: compact weights, a cached expansion map, and
/// the conv geometry. `apply` records gather + conv2d on a tape.
#[derive(Clone)]
pub struct GConv2d {
    group: GroupSpec,
    kind: GConvKind,
    k_out: usize,
    c_in: usize,
    k: usize,
    stride: usize,
    pad: usize,
    map: Arc<Vec<u32>>,
}

impl GConv2d {
    /// Convolution lifting a plane image `[B, C, H, W]` into the group:
    /// output `[B, K·S, H', W']`.
    pub fn z2_to_g(
        group: GroupSpec,
        c_in: usize,
        k_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(GConv2d {
            group,
            kind: GConvKind::Z2ToG,
            k_out,
            c_in,
            k,
            stride,
            pad,
            map: Arc::new(build_map_z2(group, k_out, c_in, k)?),
        })
    }

    /// Convolution on a G-feature map `[B, C·S, H, W] → [B, K·S, H', W']`.
    pub fn g_to_g(
        group: GroupSpec,
        c_in: usize,
        k_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(GConv2d {
            group,
            kind: GConvKind::GToG,
            k_out,
            c_in,
            k,
            stride,
            pad,
            map: Arc::new(build_map_g(group, k_out, c_in, k)?),
        })
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    /// Output G-channels (before the ×|S| orientation expansion).
    pub fn out_channels(&self) -> usize {
        self.k_out
    }

    /// Shape of the compact (learnable) weight tensor.
    pub fn weight_dims(&self) -> Vec<usize> {
        match self.kind {
            GConvKind::Z2ToG => vec![self.k_out, self.c_in, self.k, self.k],
            GConvKind::GToG => vec![self.k_out, self.c_in, self.group.order(), self.k, self.k],
        }
    }

    /// Fan-in of one output unit after expansion (for He initialization).
    pub fn fan_in(&self) -> usize {
        let s = match self.kind {
            GConvKind::Z2ToG => 1,
            GConvKind::GToG => self.group.order(),
        };
        self.c_in * s * self.k * self.k
    }

    /// Record the layer on `tape`: expand `w` with the cached map, then run
    /// the plain convolution against it.
    pub fn apply<F: Scalar>(&self, tape: &mut Tape<F>, x: VarId, w: VarId) -> Result<VarId> {
        if tape.value(w).dims() != self.weight_dims() {
            return Err(Error::shape(format!(
                "layer wants weights {:?}, got {:?}",
                self.weight_dims(),
                tape.value(w).dims()
            )));
        }
        let s = self.group.order();
        let flat_c = match self.kind {
            GConvKind::Z2ToG => self.c_in,
            GConvKind::GToG => self.c_in * s,
        };
        let expanded = tape.gather(
            w,
            Arc::clone(&self.map),
            &[self.k_out * s, flat_c, self.k, self.k],
        )?;
        tape.conv2d(x, expanded, self.stride, self.pad)
    }
}

fn check_g_channels<F: Scalar>(tape: &Tape<F>, x: VarId, group: GroupSpec) -> Result<()> {
    let d = tape.value(x).dims();
    if d.len() != 4 || d[1] % group.order() != 0 {
        return Err(Error::shape(format!(
            "G-feature map must be [B, K·{}, H, W], got {d:?}",
            group.order()
        )));
    }
    Ok(())
}

/// Nearest-neighbor upsampling applied to every (batch, channel, group)
/// slice; the group axis is untouched.
pub fn g_upsample<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    factor: usize,
    group: GroupSpec,
) -> Result<VarId> {
    check_g_channels(tape, x, group)?;
    tape.upsample_nearest(x, factor)
}

/// Mean over the group axis: `[B, K·S, H, W] → [B, K, H, W]`.
pub fn g_projection<F: Scalar>(tape: &mut Tape<F>, x: VarId, group: GroupSpec) -> Result<VarId> {
    check_g_channels(tape, x, group)?;
    tape.group_mean(x, group.order())
}

/// Non-overlapping 2×2 spatial max per (batch, channel, group) slice.
pub fn g_max_pool<F: Scalar>(tape: &mut Tape<F>, x: VarId, group: GroupSpec) -> Result<VarId> {
    check_g_channels(tape, x, group)?;
    tape.max_pool2(x)
}

/// Batch norm with statistics pooled over batch, group and space per
/// K-channel — the pooling over the group axis is what preserves
/// equivariance. Returns the batch statistics for running-average updates.
pub fn g_batch_norm_train<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    group: GroupSpec,
) -> Result<(VarId, Tensor<F>, Tensor<F>)> {
    check_g_channels(tape, x, group)?;
    tape.batch_norm_train(x, gamma, beta, group.order())
}

/// Batch norm against fixed running statistics (inference mode).
pub fn g_batch_norm_eval<F: Scalar>(
    tape: &mut Tape<F>,
    x: VarId,
    gamma: VarId,
    beta: VarId,
    group: GroupSpec,
    mean: &Tensor<F>,
    var: &Tensor<F>,
) -> Result<VarId> {
    check_g_channels(tape, x, group)?;
    tape.batch_norm_eval(x, gamma, beta, group.order(), mean, var)
}
