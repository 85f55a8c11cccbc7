//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation into a flat list of nodes; inputs of a
//! node always precede it, so one reverse sweep over the list implements
//! backpropagation. Values are immutable once written by their producing op.
//! The op set is exactly what the segmentation network needs — no
//! broadcasting beyond per-channel bias/affine, no higher-order derivatives.

use std::sync::Arc;

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
pub type VarId = usize;

/// Epsilon added to batch variance before the inverse square root.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    k_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
}

enum Op<F: Scalar> {
    Leaf,
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, F),
    Relu(VarId),
    Sigmoid(VarId),
    /// `x + bias[c]` broadcast over axis 1.
    AddBias(VarId, VarId),
    Conv2d {
        x: VarId,
        w: VarId,
        dims: ConvDims,
    },
    /// Non-overlapping 2×2 max; `argmax` holds the flat input index each
    /// output element was taken from (ties broken toward the first element
    /// in row-major window order).
    MaxPool2 {
        x: VarId,
        argmax: Vec<u32>,
    },
    Upsample {
        x: VarId,
        factor: usize,
    },
    Pad2d {
        x: VarId,
        top: usize,
        left: usize,
    },
    /// `out[i] = x[map[i]]`; backward scatter-adds.
    Gather {
        x: VarId,
        map: Arc<Vec<u32>>,
    },
    /// Concatenation along axis 1.
    ConcatCh(VarId, VarId),
    /// Mean over each consecutive block of `order` axis-1 channels.
    GroupMean {
        x: VarId,
        order: usize,
    },
    BatchNorm {
        x: VarId,
        gamma: VarId,
        beta: VarId,
        group_size: usize,
        xhat: Tensor<F>,
        inv_std: Vec<F>,
        train: bool,
    },
    /// Mean binary cross-entropy from logits, log-sum-exp form.
    BceMean {
        z: VarId,
        target: Tensor<F>,
    },
    /// `Σ coeffs[i]·x[i]` — scalarizer for gradient checks and loss mixing.
    DotConst {
        x: VarId,
        coeffs: Tensor<F>,
    },
}

struct Node<F: Scalar> {
    value: Tensor<F>,
    grad: Option<Tensor<F>>,
    requires_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a differentiable leaf (parameter or input under test).
    pub fn var(&mut self, value: Tensor<F>) -> VarId {
        self.push(value, Op::Leaf, true)
    }

    /// Register a non-differentiable leaf (data, targets).
    pub fn constant(&mut self, value: Tensor<F>) -> VarId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: VarId) -> &Tensor<F> {
        &self.nodes[id].value
    }

    /// Gradient of the last [`Tape::backward`] root w.r.t. node `id`, if any
    /// was accumulated.
    pub fn grad(&self, id: VarId) -> Option<&Tensor<F>> {
        self.nodes[id].grad.as_ref()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> VarId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn requires(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    fn check_same_dims(&self, a: VarId, b: VarId) -> Result<()> {
        if self.value(a).dims() != self.value(b).dims() {
            return Err(Error::shape(format!(
                "operand shapes differ: {:?} vs {:?}",
                self.value(a).dims(),
                self.value(b).dims()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_dims(a, b)?;
        let mut v = self.value(a).clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += x;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Add(a, b), req))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_dims(a, b)?;
        let mut v = self.value(a).clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o -= x;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Sub(a, b), req))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.check_same_dims(a, b)?;
        let mut v = self.value(a).clone();
        for (o, &x) in v.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= x;
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, Op::Mul(a, b), req))
    }

    pub fn scale(&mut self, x: VarId, c: F) -> VarId {
        let v = self.value(x).map(|t| t * c);
        let req = self.requires(x);
        self.push(v, Op::Scale(x, c), req)
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self
            .value(x)
            .map(|t| if t > F::zero() { t } else { F::zero() });
        let req = self.requires(x);
        self.push(v, Op::Relu(x), req)
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(sigmoid_stable);
        let req = self.requires(x);
        self.push(v, Op::Sigmoid(x), req)
    }

    /// `out[b,c,…] = x[b,c,…] + bias[c]` for any rank ≥ 2.
    pub fn add_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() < 2 {
            return Err(Error::shape(format!("add_bias input rank < 2: {xd:?}")));
        }
        let c = xd[1];
        if self.value(bias).dims() != [c] {
            return Err(Error::shape(format!(
                "bias shape {:?} does not match {c} channels",
                self.value(bias).dims()
            )));
        }
        let inner: usize = xd[2..].iter().product();
        let mut v = self.value(x).clone();
        {
            let bv = self.nodes[bias].value.data().to_vec();
            for chunk in v.data_mut().chunks_exact_mut(c * inner) {
                for (ci, &bc) in bv.iter().enumerate() {
                    for o in &mut chunk[ci * inner..(ci + 1) * inner] {
                        *o += bc;
                    }
                }
            }
        }
        let req = self.requires(x) || self.requires(bias);
        Ok(self.push(v, Op::AddBias(x, bias), req))
    }

    /// Cross-correlation of `x: [B,C,H,W]` with `w: [K,C,k,k]`, zero padding.
    /// Requires odd `k` and an integral output extent.
    pub fn conv2d(&mut self, x: VarId, w: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let dims = conv_dims(self.value(x).dims(), self.value(w).dims(), stride, pad)?;
        let xv = self.value(x);
        let wv = self.value(w);
        let mut y = Tensor::zeros(&[dims.batch, dims.k_out, dims.h_out, dims.w_out]);
        let ck2 = dims.c_in * dims.k * dims.k;
        let npos = dims.h_out * dims.w_out;
        let in_plane = dims.c_in * dims.h_in * dims.w_in;
        let out_plane = dims.k_out * npos;
        let mut col = vec![F::zero(); ck2 * npos];
        for b in 0..dims.batch {
            im2col(&xv.data()[b * in_plane..][..in_plane], &dims, &mut col);
            F::gemm(
                false,
                false,
                dims.k_out,
                ck2,
                npos,
                wv.data(),
                &col,
                &mut y.data_mut()[b * out_plane..][..out_plane],
                false,
            );
        }
        let req = self.requires(x) || self.requires(w);
        Ok(self.push(y, Op::Conv2d { x, w, dims }, req))
    }

    /// Non-overlapping 2×2 max over the trailing two axes (must be even).
    pub fn max_pool2(&mut self, x: VarId) -> Result<VarId> {
        let (planes, h, w) = plane_split(self.value(x).dims())?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "max_pool2 needs even spatial extents, got {h}×{w}"
            )));
        }
        if self.value(x).len() > u32::MAX as usize {
            return Err(Error::arg("max_pool2 input too large"));
        }
        let (h2, w2) = (h / 2, w / 2);
        let mut out_dims = self.value(x).dims().to_vec();
        let n = out_dims.len();
        out_dims[n - 2] = h2;
        out_dims[n - 1] = w2;
        let mut y = Tensor::zeros(&out_dims);
        let mut argmax = vec![0u32; planes * h2 * w2];
        let xv = self.value(x).data();
        {
            let yv = y.data_mut();
            for p in 0..planes {
                for oh in 0..h2 {
                    for ow in 0..w2 {
                        let base = p * h * w + 2 * oh * w + 2 * ow;
                        // row-major window order; strictly-greater keeps the first
                        let mut best = base;
                        for &cand in &[base + 1, base + w, base + w + 1] {
                            if xv[cand] > xv[best] {
                                best = cand;
                            }
                        }
                        let o = p * h2 * w2 + oh * w2 + ow;
                        yv[o] = xv[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(y, Op::MaxPool2 { x, argmax }, req))
    }

    /// Nearest-neighbor upsampling: each pixel becomes a `factor×factor` block.
    pub fn upsample_nearest(&mut self, x: VarId, factor: usize) -> Result<VarId> {
        if factor == 0 {
            return Err(Error::arg("upsample factor must be ≥ 1"));
        }
        let (planes, h, w) = plane_split(self.value(x).dims())?;
        let (h2, w2) = (h * factor, w * factor);
        let mut out_dims = self.value(x).dims().to_vec();
        let n = out_dims.len();
        out_dims[n - 2] = h2;
        out_dims[n - 1] = w2;
        let mut y = Tensor::zeros(&out_dims);
        let xv = self.value(x).data();
        {
            let yv = y.data_mut();
            for p in 0..planes {
                for oh in 0..h2 {
                    let src = &xv[p * h * w + (oh / factor) * w..][..w];
                    let dst = &mut yv[p * h2 * w2 + oh * w2..][..w2];
                    for (ow, o) in dst.iter_mut().enumerate() {
                        *o = src[ow / factor];
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(y, Op::Upsample { x, factor }, req))
    }

    /// Zero-pad the trailing two axes (possibly asymmetrically).
    pub fn pad2d(
        &mut self,
        x: VarId,
        top: usize,
        bottom: usize,
        left: usize,
        right: usize,
    ) -> Result<VarId> {
        let (planes, h, w) = plane_split(self.value(x).dims())?;
        let (h2, w2) = (h + top + bottom, w + left + right);
        let mut out_dims = self.value(x).dims().to_vec();
        let n = out_dims.len();
        out_dims[n - 2] = h2;
        out_dims[n - 1] = w2;
        let mut y = Tensor::zeros(&out_dims);
        let xv = self.value(x).data();
        {
            let yv = y.data_mut();
            for p in 0..planes {
                for row in 0..h {
                    let src = &xv[p * h * w + row * w..][..w];
                    let dst = &mut yv[p * h2 * w2 + (row + top) * w2 + left..][..w];
                    dst.copy_from_slice(src);
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(y, Op::Pad2d { x, top, left }, req))
    }

    /// `out[i] = x[map[i]]` with an explicit output shape. Indices may
    /// repeat; backward scatter-adds into the source.
    pub fn gather(&mut self, x: VarId, map: Arc<Vec<u32>>, out_dims: &[usize]) -> Result<VarId> {
        let want: usize = out_dims.iter().product();
        if map.len() != want {
            return Err(Error::shape(format!(
                "gather map has {} entries for output shape {out_dims:?}",
                map.len()
            )));
        }
        let n = self.value(x).len();
        if map.iter().any(|&i| i as usize >= n) {
            return Err(Error::arg(format!(
                "gather map indexes outside a source of {n} elements"
            )));
        }
        let xv = self.value(x).data();
        let data = map.iter().map(|&i| xv[i as usize]).collect();
        let y = Tensor::from_vec(out_dims, data)?;
        let req = self.requires(x);
        Ok(self.push(y, Op::Gather { x, map }, req))
    }

    /// Concatenate along axis 1; all other extents must agree.
    pub fn concat_ch(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let ad = self.value(a).dims().to_vec();
        let bd = self.value(b).dims().to_vec();
        let compatible =
            ad.len() == bd.len() && ad.len() >= 2 && ad[0] == bd[0] && ad[2..] == bd[2..];
        if !compatible {
            return Err(Error::shape(format!(
                "cannot concatenate {ad:?} and {bd:?} along axis 1"
            )));
        }
        let inner: usize = ad[2..].iter().product();
        let (ca, cb) = (ad[1], bd[1]);
        let mut out_dims = ad.clone();
        out_dims[1] = ca + cb;
        let mut y = Tensor::zeros(&out_dims);
        {
            let av = self.nodes[a].value.data();
            let bv = self.nodes[b].value.data();
            let yv = y.data_mut();
            let stride = (ca + cb) * inner;
            for bi in 0..ad[0] {
                yv[bi * stride..][..ca * inner]
                    .copy_from_slice(&av[bi * ca * inner..][..ca * inner]);
                yv[bi * stride + ca * inner..][..cb * inner]
                    .copy_from_slice(&bv[bi * cb * inner..][..cb * inner]);
            }
        }
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(y, Op::ConcatCh(a, b), req))
    }

    /// Mean over each consecutive block of `order` axis-1 channels:
    /// `[B, K·order, …] → [B, K, …]`.
    pub fn group_mean(&mut self, x: VarId, order: usize) -> Result<VarId> {
        let xd = self.value(x).dims().to_vec();
        if xd.len() < 2 || order == 0 || xd[1] % order != 0 {
            return Err(Error::shape(format!(
                "group_mean of {order} does not divide shape {xd:?}"
            )));
        }
        let k = xd[1] / order;
        let inner: usize = xd[2..].iter().product();
        let mut out_dims = xd.clone();
        out_dims[1] = k;
        let mut y = Tensor::zeros(&out_dims);
        let inv = F::of_f64(1.0 / order as f64);
        let xv = self.value(x).data();
        {
            let yv = y.data_mut();
            for b in 0..xd[0] {
                for ki in 0..k {
                    let dst = &mut yv[(b * k + ki) * inner..][..inner];
                    for s in 0..order {
                        let src = &xv[(b * xd[1] + ki * order + s) * inner..][..inner];
                        for (o, &v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    for o in dst.iter_mut() {
                        *o *= inv;
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(y, Op::GroupMean { x, order }, req))
    }

    /// Batch normalization in training mode. Statistics are pooled per
    /// channel group over every other axis: with `group_size` = the group
    /// order, channels `k·group_size..(k+1)·group_size` share the k-th
    /// statistic (pooling over the group axis preserves equivariance).
    /// Returns the node plus the biased batch mean and variance (shape `[K]`)
    /// for the caller's running-statistics update.
    pub fn batch_norm_train(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        group_size: usize,
    ) -> Result<(VarId, Tensor<F>, Tensor<F>)> {
        let (k, n_per) = self.check_bn(x, gamma, beta, group_size)?;
        let xv = self.value(x);
        let mut mean = vec![F::zero(); k];
        self.bn_reduce(
            x,
            group_size,
            |acc: &mut Vec<F>, ki, v| acc[ki] += v,
            &mut mean,
        );
        let scale = F::of_f64(1.0 / n_per as f64);
        for m in &mut mean {
            *m *= scale;
        }
        let mut var = vec![F::zero(); k];
        {
            let mean_ref = &mean;
            self.bn_reduce(
                x,
                group_size,
                |acc: &mut Vec<F>, ki, v| {
                    let d = v - mean_ref[ki];
                    acc[ki] += d * d;
                },
                &mut var,
            );
        }
        for v in &mut var {
            *v *= scale;
        }
        let inv_std: Vec<F> = var
            .iter()
            .map(|&v| F::one() / (v + F::of_f64(BN_EPS)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros_like(xv);
        let mut y = Tensor::zeros_like(xv);
        self.bn_normalize(
            x, gamma, beta, group_size, &mean, &inv_std, &mut xhat, &mut y,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        let mean_t = Tensor::from_vec(&[k], mean)?;
        let var_t = Tensor::from_vec(&[k], var)?;
        let id = self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_size,
                xhat,
                inv_std,
                train: true,
            },
            req,
        );
        Ok((id, mean_t, var_t))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        group_size: usize,
        mean: &Tensor<F>,
        var: &Tensor<F>,
    ) -> Result<VarId> {
        let (k, _) = self.check_bn(x, gamma, beta, group_size)?;
        if mean.dims() != [k] || var.dims() != [k] {
            return Err(Error::shape(format!(
                "running stats must have shape [{k}], got {:?} and {:?}",
                mean.dims(),
                var.dims()
            )));
        }
        if var.data().iter().any(|&v| v < F::zero()) {
            return Err(Error::arg("negative running variance"));
        }
        let inv_std: Vec<F> = var
            .data()
            .iter()
            .map(|&v| F::one() / (v + F::of_f64(BN_EPS)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros_like(self.value(x));
        let mut y = Tensor::zeros_like(self.value(x));
        self.bn_normalize(
            x,
            gamma,
            beta,
            group_size,
            mean.data(),
            &inv_std,
            &mut xhat,
            &mut y,
        );
        let req = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_size,
                xhat,
                inv_std,
                train: false,
            },
            req,
        ))
    }

    fn check_bn(
        &self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        group_size: usize,
    ) -> Result<(usize, usize)> {
        let xd = self.value(x).dims();
        if xd.len() < 2 {
            return Err(Error::shape(format!("batch_norm input rank < 2: {xd:?}")));
        }
        if group_size == 0 || xd[1] % group_size != 0 {
            return Err(Error::shape(format!(
                "group size {group_size} does not divide {} channels",
                xd[1]
            )));
        }
        let k = xd[1] / group_size;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).dims() != [k] {
                return Err(Error::shape(format!(
                    "{name} must have shape [{k}], got {:?}",
                    self.value(id).dims()
                )));
            }
        }
        let n_per = self.value(x).len() / k;
        Ok((k, n_per))
    }

    fn bn_reduce(
        &self,
        x: VarId,
        group_size: usize,
        mut fold: impl FnMut(&mut Vec<F>, usize, F),
        acc: &mut Vec<F>,
    ) {
        let xd = self.value(x).dims();
        let c = xd[1];
        let inner: usize = xd[2..].iter().product();
        let xv = self.value(x).data();
        for b in 0..xd[0] {
            for ci in 0..c {
                let ki = ci / group_size;
                for &v in &xv[(b * c + ci) * inner..][..inner] {
                    fold(acc, ki, v);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_normalize(
        &self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        group_size: usize,
        mean: &[F],
        inv_std: &[F],
        xhat: &mut Tensor<F>,
        y: &mut Tensor<F>,
    ) {
        let xd = self.value(x).dims();
        let c = xd[1];
        let inner: usize = xd[2..].iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let xh = xhat.data_mut();
        let yv = y.data_mut();
        for b in 0..xd[0] {
            for ci in 0..c {
                let ki = ci / group_size;
                let base = (b * c + ci) * inner;
                for i in base..base + inner {
                    let h = (xv[i] - mean[ki]) * inv_std[ki];
                    xh[i] = h;
                    yv[i] = gv[ki] * h + bv[ki];
                }
            }
        }
    }

    /// Mean binary cross-entropy from logits against a {0,1} target, in the
    /// numerically stable form `max(z,0) − z·t + ln(1 + e^(−|z|))`.
    pub fn bce_mean(&mut self, logits: VarId, target: &Tensor<F>) -> Result<VarId> {
        if self.value(logits).dims() != target.dims() {
            return Err(Error::shape(format!(
                "logits {:?} vs target {:?}",
                self.value(logits).dims(),
                target.dims()
            )));
        }
        if target
            .data()
            .iter()
            .any(|&t| t != F::zero() && t != F::one())
        {
            return Err(Error::arg("bce target values must be exactly 0 or 1"));
        }
        let n = target.len();
        if n == 0 {
            return Err(Error::shape("bce on an empty tensor"));
        }
        let mut total = 0.0f64;
        for (&z, &t) in self.value(logits).data().iter().zip(target.data()) {
            let z = z.as_f64();
            total += z.max(0.0) - z * t.as_f64() + (-z.abs()).exp().ln_1p();
        }
        let v = Tensor::from_vec(&[1], vec![F::of_f64(total / n as f64)])?;
        let req = self.requires(logits);
        Ok(self.push(
            v,
            Op::BceMean {
                z: logits,
                target: target.clone(),
            },
            req,
        ))
    }

    /// `Σ coeffs[i]·x[i]` as a single-element tensor.
    pub fn dot_const(&mut self, x: VarId, coeffs: &Tensor<F>) -> Result<VarId> {
        if self.value(x).dims() != coeffs.dims() {
            return Err(Error::shape(format!(
                "dot_const shapes differ: {:?} vs {:?}",
                self.value(x).dims(),
                coeffs.dims()
            )));
        }
        let total: f64 = self
            .value(x)
            .data()
            .iter()
            .zip(coeffs.data())
            .map(|(&a, &b)| a.as_f64() * b.as_f64())
            .sum();
        let v = Tensor::from_vec(&[1], vec![F::of_f64(total)])?;
        let req = self.requires(x);
        Ok(self.push(
            v,
            Op::DotConst {
                x,
                coeffs: coeffs.clone(),
            },
            req,
        ))
    }

    /// Reverse sweep from a single-element root. Gradients from any earlier
    /// sweep are cleared first; afterwards `grad(id)` is populated for every
    /// node on a differentiable path from a `var` leaf to the root.
    pub fn backward(&mut self, root: VarId) -> Result<()> {
        if root >= self.nodes.len() {
            return Err(Error::arg(format!("backward root {root} out of range")));
        }
        if self.nodes[root].value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must be a single element, got {:?}",
                self.nodes[root].value.dims()
            )));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        self.nodes[root].grad = Some(Tensor::filled(&[1], F::one()));
        for i in (0..=root).rev() {
            if self.nodes[i].grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            for (j, contrib) in self.local_grads(i)? {
                self.accumulate(j, contrib);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, j: VarId, contrib: Tensor<F>) {
        let node = &mut self.nodes[j];
        match &mut node.grad {
            Some(g) => {
                for (o, &c) in g.data_mut().iter_mut().zip(contrib.data()) {
                    *o += c;
                }
            }
            None => node.grad = Some(contrib),
        }
    }

    /// Gradient contributions of node `i` to each of its inputs that require
    /// a gradient.
    fn local_grads(&self, i: usize) -> Result<Vec<(VarId, Tensor<F>)>> {
        let node = &self.nodes[i];
        let dy = node.grad.as_ref().expect("caller checked");
        let mut out: Vec<(VarId, Tensor<F>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for &j in &[*a, *b] {
                    if self.requires(j) {
                        out.push((j, dy.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    out.push((*a, dy.clone()));
                }
                if self.requires(*b) {
                    out.push((*b, dy.map(|g| -g)));
                }
            }
            Op::Mul(a, b) => {
                for (j, other) in [(*a, *b), (*b, *a)] {
                    if self.requires(j) {
                        let mut d = dy.clone();
                        for (o, &v) in d.data_mut().iter_mut().zip(self.value(other).data()) {
                            *o *= v;
                        }
                        out.push((j, d));
                    }
                }
            }
            Op::Scale(x, c) => {
                if self.requires(*x) {
                    out.push((*x, dy.map(|g| g * *c)));
                }
            }
            Op::Relu(x) => {
                if self.requires(*x) {
                    let mut d = dy.clone();
                    for (o, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= F::zero() {
                            *o = F::zero();
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::Sigmoid(x) => {
                if self.requires(*x) {
                    let mut d = dy.clone();
                    for (o, &y) in d.data_mut().iter_mut().zip(node.value.data()) {
                        *o *= y * (F::one() - y);
                    }
                    out.push((*x, d));
                }
            }
            Op::AddBias(x, bias) => {
                if self.requires(*x) {
                    out.push((*x, dy.clone()));
                }
                if self.requires(*bias) {
                    let xd = self.value(*x).dims();
                    let c = xd[1];
                    let inner: usize = xd[2..].iter().product();
                    let mut db = Tensor::zeros(&[c]);
                    for chunk in dy.data().chunks_exact(c * inner) {
                        for ci in 0..c {
                            let mut s = F::zero();
                            for &g in &chunk[ci * inner..(ci + 1) * inner] {
                                s += g;
                            }
                            db.data_mut()[ci] += s;
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::Conv2d { x, w, dims } => {
                let d = *dims;
                let ck2 = d.c_in * d.k * d.k;
                let npos = d.h_out * d.w_out;
                let in_plane = d.c_in * d.h_in * d.w_in;
                let out_plane = d.k_out * npos;
                let need_dx = self.requires(*x);
                let need_dw = self.requires(*w);
                let mut dx = need_dx.then(|| Tensor::zeros_like(self.value(*x)));
                let mut dw = need_dw.then(|| Tensor::zeros_like(self.value(*w)));
                let mut col = vec![F::zero(); ck2 * npos];
                let mut dcol = vec![F::zero(); ck2 * npos];
                for b in 0..d.batch {
                    let dyb = &dy.data()[b * out_plane..][..out_plane];
                    if let Some(dw) = dw.as_mut() {
                        im2col(
                            &self.value(*x).data()[b * in_plane..][..in_plane],
                            &d,
                            &mut col,
                        );
                        // dW[K, Ck²] += dY_b[K, n] · col_bᵀ[n, Ck²]
                        F::gemm(
                            false,
                            true,
                            d.k_out,
                            npos,
                            ck2,
                            dyb,
                            &col,
                            dw.data_mut(),
                            true,
                        );
                    }
                    if let Some(dx) = dx.as_mut() {
                        // dcol[Ck², n] = Wᵀ[Ck², K] · dY_b[K, n]
                        F::gemm(
                            true,
                            false,
                            ck2,
                            d.k_out,
                            npos,
                            self.value(*w).data(),
                            dyb,
                            &mut dcol,
                            false,
                        );
                        col2im_add(&dcol, &d, &mut dx.data_mut()[b * in_plane..][..in_plane]);
                    }
                }
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                if let Some(dw) = dw {
                    out.push((*w, dw));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.requires(*x) {
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src as usize] += dy.data()[o];
                    }
                    out.push((*x, dx));
                }
            }
            Op::Upsample { x, factor } => {
                if self.requires(*x) {
                    let f = *factor;
                    let (planes, h, w) = plane_split(self.value(*x).dims())?;
                    let (h2, w2) = (h * f, w * f);
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let dxv = dx.data_mut();
                    for p in 0..planes {
                        for oh in 0..h2 {
                            let src = &dy.data()[p * h2 * w2 + oh * w2..][..w2];
                            let dst = &mut dxv[p * h * w + (oh / f) * w..][..w];
                            for (ow, &g) in src.iter().enumerate() {
                                dst[ow / f] += g;
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Pad2d { x, top, left } => {
                if self.requires(*x) {
                    let (planes, h, w) = plane_split(self.value(*x).dims())?;
                    let (_, h2, w2) = plane_split(node.value.dims())?;
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let dxv = dx.data_mut();
                    for p in 0..planes {
                        for row in 0..h {
                            let src = &dy.data()[p * h2 * w2 + (row + top) * w2 + left..][..w];
                            dxv[p * h * w + row * w..][..w].copy_from_slice(src);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gather { x, map } => {
                if self.requires(*x) {
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let dxv = dx.data_mut();
                    for (o, &src) in map.iter().enumerate() {
                        dxv[src as usize] += dy.data()[o];
                    }
                    out.push((*x, dx));
                }
            }
            Op::ConcatCh(a, b) => {
                let ad = self.value(*a).dims();
                let bd = self.value(*b).dims();
                let inner: usize = ad[2..].iter().product();
                let (ca, cb) = (ad[1], bd[1]);
                let stride = (ca + cb) * inner;
                if self.requires(*a) {
                    let mut da = Tensor::zeros_like(self.value(*a));
                    for bi in 0..ad[0] {
                        da.data_mut()[bi * ca * inner..][..ca * inner]
                            .copy_from_slice(&dy.data()[bi * stride..][..ca * inner]);
                    }
                    out.push((*a, da));
                }
                if self.requires(*b) {
                    let mut db = Tensor::zeros_like(self.value(*b));
                    for bi in 0..bd[0] {
                        db.data_mut()[bi * cb * inner..][..cb * inner]
                            .copy_from_slice(&dy.data()[bi * stride + ca * inner..][..cb * inner]);
                    }
                    out.push((*b, db));
                }
            }
            Op::GroupMean { x, order } => {
                if self.requires(*x) {
                    let xd = self.value(*x).dims();
                    let k = xd[1] / order;
                    let inner: usize = xd[2..].iter().product();
                    let inv = F::of_f64(1.0 / *order as f64);
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let dxv = dx.data_mut();
                    for b in 0..xd[0] {
                        for ki in 0..k {
                            let src = &dy.data()[(b * k + ki) * inner..][..inner];
                            for s in 0..*order {
                                let dst = &mut dxv[(b * xd[1] + ki * order + s) * inner..][..inner];
                                for (o, &g) in dst.iter_mut().zip(src) {
                                    *o += g * inv;
                                }
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                group_size,
                xhat,
                inv_std,
                train,
            } => {
                let xd = self.value(*x).dims();
                let c = xd[1];
                let inner: usize = xd[2..].iter().product();
                let k = c / group_size;
                let n_per = self.value(*x).len() / k;
                let gv = self.value(*gamma).data();
                // per-statistic reductions Σdy and Σdy·x̂
                let mut sum_dy = vec![F::zero(); k];
                let mut sum_dy_xhat = vec![F::zero(); k];
                for b in 0..xd[0] {
                    for ci in 0..c {
                        let ki = ci / group_size;
                        let base = (b * c + ci) * inner;
                        for i in base..base + inner {
                            sum_dy[ki] += dy.data()[i];
                            sum_dy_xhat[ki] += dy.data()[i] * xhat.data()[i];
                        }
                    }
                }
                if self.requires(*beta) {
                    out.push((*beta, Tensor::from_vec(&[k], sum_dy.clone())?));
                }
                if self.requires(*gamma) {
                    out.push((*gamma, Tensor::from_vec(&[k], sum_dy_xhat.clone())?));
                }
                if self.requires(*x) {
                    let mut dx = Tensor::zeros_like(self.value(*x));
                    let dxv = dx.data_mut();
                    let n = F::of_f64(n_per as f64);
                    for b in 0..xd[0] {
                        for ci in 0..c {
                            let ki = ci / group_size;
                            let a = gv[ki] * inv_std[ki];
                            let base = (b * c + ci) * inner;
                            for i in base..base + inner {
                                let g = dy.data()[i];
                                dxv[i] = if *train {
                                    // statistics depend on x: subtract the
                                    // mean-gradient and variance-gradient terms
                                    a * (g - sum_dy[ki] / n - xhat.data()[i] * sum_dy_xhat[ki] / n)
                                } else {
                                    a * g
                                };
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::BceMean { z, target } => {
                if self.requires(*z) {
                    let g = dy.data()[0];
                    let n = F::of_f64(target.len() as f64);
                    let mut dz = Tensor::zeros_like(self.value(*z));
                    let zv = self.value(*z).data();
                    for (i, o) in dz.data_mut().iter_mut().enumerate() {
                        *o = g * (sigmoid_stable(zv[i]) - target.data()[i]) / n;
                    }
                    out.push((*z, dz));
                }
            }
            Op::DotConst { x, coeffs } => {
                if self.requires(*x) {
                    let g = dy.data()[0];
                    out.push((*x, coeffs.map(|c| c * g)));
                }
            }
        }
        Ok(out)
    }
}

fn sigmoid_stable<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn plane_split(dims: &[usize]) -> Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        return Err(Error::shape(format!(
            "spatial op needs rank ≥ 2, got {dims:?}"
        )));
    }
    let h = dims[dims.len() - 2];
    let w = dims[dims.len() - 1];
    Ok((dims[..dims.len() - 2].iter().product(), h, w))
}

fn conv_dims(xd: &[usize], wd: &[usize], stride: usize, pad: usize) -> Result<ConvDims> {
    if xd.len() != 4 || wd.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d wants x[B,C,H,W] and w[K,C,k,k], got {xd:?} and {wd:?}"
        )));
    }
    let (batch, c_in, h_in, w_in) = (xd[0], xd[1], xd[2], xd[3]);
    let (k_out, wc, k1, k2) = (wd[0], wd[1], wd[2], wd[3]);
    if k1 != k2 {
        return Err(Error::shape(format!(
            "kernel must be square, got {k1}×{k2}"
        )));
    }
    if k1 % 2 == 0 {
        return Err(Error::arg(format!("kernel size must be odd, got {k1}")));
    }
    if wc != c_in {
        return Err(Error::shape(format!(
            "weight expects {wc} input channels, tensor has {c_in}"
        )));
    }
    if stride == 0 {
        return Err(Error::arg("stride must be ≥ 1"));
    }
    let fits = |extent: usize| -> Result<usize> {
        let span = (extent + 2 * pad)
            .checked_sub(k1)
            .ok_or_else(|| Error::shape(format!("kernel {k1} exceeds padded extent")))?;
        if span % stride != 0 {
            return Err(Error::shape(format!(
                "output extent ({extent} + 2·{pad} − {k1}) / {stride} is not integral"
            )));
        }
        Ok(span / stride + 1)
    };
    Ok(ConvDims {
        batch,
        c_in,
        h_in,
        w_in,
        k_out,
        k: k1,
        stride,
        pad,
        h_out: fits(h_in)?,
        w_out: fits(w_in)?,
    })
}

/// Unfold one image `[C,H,W]` into `col[C·k², H'·W']` for GEMM.
fn im2col<F: Scalar>(x: &[F], d: &ConvDims, col: &mut [F]) {
    let npos = d.h_out * d.w_out;
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &x[c * d.h_in * d.w_in..][..d.h_in * d.w_in];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let dst = &mut col[row * npos..][..npos];
                let mut idx = 0;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as i64 - d.pad as i64;
                    if ih < 0 || ih >= d.h_in as i64 {
                        dst[idx..idx + d.w_out].fill(F::zero());
                        idx += d.w_out;
                        continue;
                    }
                    let xrow = &xc[ih as usize * d.w_in..][..d.w_in];
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kj) as i64 - d.pad as i64;
                        dst[idx] = if iw >= 0 && iw < d.w_in as i64 {
                            xrow[iw as usize]
                        } else {
                            F::zero()
                        };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add `col` back into one image `[C,H,W]`.
fn col2im_add<F: Scalar>(col: &[F], d: &ConvDims, dx: &mut [F]) {
    let npos = d.h_out * d.w_out;
    let mut row = 0;
    for c in 0..d.c_in {
        let xc = &mut dx[c * d.h_in * d.w_in..][..d.h_in * d.w_in];
        for ki in 0..d.k {
            for kj in 0..d.k {
                let src = &col[row * npos..][..npos];
                let mut idx = 0;
                for oh in 0..d.h_out {
                    let ih = (oh * d.stride + ki) as i64 - d.pad as i64;
                    if ih < 0 || ih >= d.h_in as i64 {
                        idx += d.w_out;
                        continue;
                    }
                    let base = ih as usize * d.w_in;
                    for ow in 0..d.w_out {
                        let iw = (ow * d.stride + kj) as i64 - d.pad as i64;
                        if iw >= 0 && iw < d.w_in as i64 {
                            xc[base + iw as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Which coordinates [`finite_diff_check`] perturbs.
pub enum CoordSample {
    /// Every coordinate of every parameter.
    All,
    /// A deterministic subsample of up to `per_tensor` coordinates from each
    /// parameter (for networks too large to probe exhaustively).
    Random { per_tensor: usize, seed: u64 },
}

/// Central-difference verification of the tape gradient.
///
/// `f` must rebuild the same scalar-valued computation from fresh leaves on
/// every call. Returns the maximum over all probed coordinates of
/// `|numeric − analytic| / max(1, |numeric|, |analytic|)`.
pub fn finite_diff_check<F, G>(
    params: &[Tensor<F>],
    epsilon: f64,
    sample: CoordSample,
    f: G,
) -> Result<f64>
where
    F: Scalar,
    G: Fn(&mut Tape<F>, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = params.iter().map(|p| tape.var(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    if tape.value(root).len() != 1 {
        return Err(Error::shape(format!(
            "finite_diff_check needs a scalar objective, got {:?}",
            tape.value(root).dims()
        )));
    }
    if !tape.value(root).all_finite() {
        return Err(Error::non_finite("objective value"));
    }
    tape.backward(root)?;
    let grads: Vec<Tensor<F>> = ids
        .iter()
        .zip(params)
        .map(|(&id, p)| {
            tape.grad(id)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros_like(p))
        })
        .collect();
    if grads.iter().any(|g| !g.all_finite()) {
        return Err(Error::non_finite("tape gradient"));
    }
    drop(tape);

    let eval = |theta: &[Tensor<F>]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<VarId> = theta.iter().map(|p| t.constant(p.clone())).collect();
        let r = f(&mut t, &ids)?;
        let v = t.value(r).item()?.as_f64();
        if !v.is_finite() {
            return Err(Error::non_finite("objective under perturbation"));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<F>> = params.to_vec();
    let mut max_rel = 0.0f64;
    for pi in 0..params.len() {
        let len = params[pi].len();
        let coords: Vec<usize> = match sample {
            CoordSample::All => (0..len).collect(),
            CoordSample::Random { per_tensor, seed } => {
                let per_tensor_seed =
                    seed.wrapping_add((pi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut rng = StdRng::seed_from_u64(per_tensor_seed);
                rand::seq::index::sample(&mut rng, len, per_tensor.min(len)).into_vec()
            }
        };
        for j in coords {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + F::of_f64(epsilon);
            let up = eval(&work)?;
            work[pi].data_mut()[j] = orig - F::of_f64(epsilon);
            let down = eval(&work)?;
            work[pi].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * epsilon);
            let analytic = grads[pi].data()[j].as_f64();
            let rel = (numeric - analytic).abs() / 1.0f64.max(numeric.abs()).max(analytic.abs());
            max_rel = max_rel.max(rel);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(rng: &mut StdRng, dims: &[usize]) -> Tensor<f64> {
        let data = (0..dims.iter().product())
            .map(|_| {
                // keep magnitudes in [0.1, 1] so ReLU kinks and pooling ties
                // stay far from the finite-difference step
                let mag = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.5) {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    }

    /// Exhaustive FD over all coordinates; params move through a scalarizing
    /// dot against fixed pseudo-random coefficients.
    fn fd_all<G>(params: &[Tensor<f64>], f: G) -> f64
    where
        G: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
    {
        finite_diff_check(params, 1e-5, CoordSample::All, f).unwrap()
    }

    fn coeffs_for(dims: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        rand_tensor(&mut rng, dims)
    }

    #[test]
    fn elementwise_forward_examples() {
        let mut t = Tape::<f64>::new();
        let a = t.var(Tensor::from_vec(&[2], vec![-1.0, 2.0]).unwrap());
        let r = t.relu(a);
        assert_eq!(t.value(r).data(), &[0.0, 2.0]);
        let z = t.var(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let sg = t.sigmoid(z);
        assert_eq!(t.value(sg).data(), &[0.5]);
        let p = t.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let q = t.var(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let s = t.add(p, q).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let d = t.sub(q, p).unwrap();
        assert_eq!(t.value(d).data(), &[2.0, 2.0]);
        let m = t.mul(p, q).unwrap();
        assert_eq!(t.value(m).data(), &[3.0, 8.0]);
    }

    #[test]
    fn conv_identity_and_delta_kernels() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[1, 1, 1, 1], vec![5.0]).unwrap());
        let w = t.var(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = t.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(t.value(y).data(), &[5.0]);

        let mut rng = StdRng::seed_from_u64(1);
        let xv = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let mut delta = Tensor::<f64>::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            delta.set(&[c, c, 1, 1], 1.0); // center tap, channel-diagonal
        }
        let mut t = Tape::<f64>::new();
        let x = t.var(xv.clone());
        let w = t.var(delta);
        let y = t.conv2d(x, w, 1, 1).unwrap();
        assert!(t.value(y).max_abs_diff(&xv).unwrap() < 1e-15);
    }

    /// Direct six-nested-loop cross-correlation oracle.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let (b, c, h, wid) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (ko, k) = (w.dims()[0], w.dims()[2]);
        let h2 = (h + 2 * pad - k) / stride + 1;
        let w2 = (wid + 2 * pad - k) / stride + 1;
        let mut y = Tensor::zeros(&[b, ko, h2, w2]);
        for bi in 0..b {
            for ko_i in 0..ko {
                for oh in 0..h2 {
                    for ow in 0..w2 {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let ih = (oh * stride + ki) as i64 - pad as i64;
                                    let iw = (ow * stride + kj) as i64 - pad as i64;
                                    if ih >= 0
                                        && iw >= 0
                                        && (ih as usize) < h
                                        && (iw as usize) < wid
                                    {
                                        acc += x.at(&[bi, ci, ih as usize, iw as usize])
                                            * w.at(&[ko_i, ci, ki, kj]);
                                    }
                                }
                            }
                        }
                        y.set(&[bi, ko_i, oh, ow], acc);
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = StdRng::seed_from_u64(2);
        let xv = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let wv = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        for &(s, p) in &[(1, 0), (1, 1), (2, 0), (2, 1)] {
            let mut t = Tape::<f64>::new();
            let x = t.var(xv.clone());
            let w = t.var(wv.clone());
            let y = t.conv2d(x, w, s, p).unwrap();
            let want = conv_oracle(&xv, &wv, s, p);
            assert!(
                t.value(y).max_abs_diff(&want).unwrap() < 1e-12,
                "stride {s} pad {p}"
            );
        }
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::zeros(&[1, 1, 5, 5]));
        let w_even = t.var(Tensor::zeros(&[1, 1, 2, 2]));
        assert!(t.conv2d(x, w_even, 1, 0).is_err());
        let w = t.var(Tensor::zeros(&[1, 1, 3, 3]));
        // (5 + 0 − 3) % 3 ≠ 0
        assert!(t.conv2d(x, w, 3, 0).is_err());
        let w_mismatch = t.var(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(t.conv2d(x, w_mismatch, 1, 1).is_err());
    }

    #[test]
    fn pool_examples_and_oracle() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = t.max_pool2(x).unwrap();
        assert_eq!(t.value(y).data(), &[4.0]);

        let c = t.var(Tensor::filled(&[1, 1, 4, 4], 0.7));
        let yc = t.max_pool2(c).unwrap();
        assert_eq!(t.value(yc).data(), &[0.7; 4]);

        let mut rng = StdRng::seed_from_u64(3);
        let xv = rand_tensor(&mut rng, &[2, 3, 4, 4]);
        let mut t = Tape::<f64>::new();
        let x = t.var(xv.clone());
        let y = t.max_pool2(x).unwrap();
        for b in 0..2 {
            for ch in 0..3 {
                for oh in 0..2 {
                    for ow in 0..2 {
                        let want = (0..2)
                            .flat_map(|i| (0..2).map(move |j| (i, j)))
                            .map(|(i, j)| xv.at(&[b, ch, 2 * oh + i, 2 * ow + j]))
                            .fold(f64::NEG_INFINITY, f64::max);
                        assert_eq!(t.value(y).at(&[b, ch, oh, ow]), want);
                    }
                }
            }
        }

        let odd = t.var(Tensor::<f64>::zeros(&[1, 1, 3, 4]));
        assert!(t.max_pool2(odd).is_err());
    }

    #[test]
    fn pool_tie_routes_to_first_element() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::filled(&[1, 1, 2, 2], 5.0));
        let y = t.max_pool2(x).unwrap();
        let s = t.dot_const(y, &Tensor::filled(&[1, 1, 1, 1], 1.0)).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn upsample_examples() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[1, 1, 1, 1], vec![7.0]).unwrap());
        let y = t.upsample_nearest(x, 2).unwrap();
        assert_eq!(t.value(y).dims(), &[1, 1, 2, 2]);
        assert_eq!(t.value(y).data(), &[7.0; 4]);
        let same = t.upsample_nearest(x, 1).unwrap();
        assert_eq!(t.value(same).data(), &[7.0]);

        let mut rng = StdRng::seed_from_u64(4);
        let xv = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let mut t = Tape::<f64>::new();
        let x = t.var(xv.clone());
        let y = t.upsample_nearest(x, 2).unwrap();
        let sum_in: f64 = xv.data().iter().sum();
        let sum_out: f64 = t.value(y).data().iter().sum();
        assert!((sum_out - 4.0 * sum_in).abs() < 1e-12);
    }

    #[test]
    fn bce_examples() {
        let mut t = Tape::<f64>::new();
        let z = t.var(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        let l = t
            .bce_mean(z, &Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        assert!((t.value(l).data()[0] - 2.0f64.ln()).abs() < 1e-15);

        let big = t.var(Tensor::from_vec(&[1], vec![20.0]).unwrap());
        let l2 = t
            .bce_mean(big, &Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        let v = t.value(l2).data()[0];
        assert!(v.is_finite() && v < 1e-8);

        // extreme negative logit with target 1: large but finite loss
        let neg = t.var(Tensor::from_vec(&[1], vec![-500.0]).unwrap());
        let l3 = t
            .bce_mean(neg, &Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        assert!((t.value(l3).data()[0] - 500.0).abs() < 1e-9);

        let bad = t.var(Tensor::from_vec(&[1], vec![0.0]).unwrap());
        assert!(t
            .bce_mean(bad, &Tensor::from_vec(&[1], vec![0.5]).unwrap())
            .is_err());
    }

    #[test]
    fn bce_matches_naive_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        let n = 64;
        let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let tgt: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.5))).collect();
        let naive = z
            .iter()
            .zip(&tgt)
            .map(|(&zi, &ti)| {
                let s = 1.0 / (1.0 + (-zi).exp());
                -(ti * s.ln() + (1.0 - ti) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / n as f64;
        let mut t = Tape::<f64>::new();
        let zi = t.var(Tensor::from_vec(&[n], z).unwrap());
        let l = t
            .bce_mean(zi, &Tensor::from_vec(&[n], tgt).unwrap())
            .unwrap();
        assert!((t.value(l).data()[0] - naive).abs() < 1e-9);
    }

    #[test]
    fn batch_norm_forward_contract() {
        // variance chosen so var + eps = 1 and normalization is the identity
        let a = (1.0f64 - BN_EPS).sqrt();
        let xv = Tensor::from_vec(&[2, 1, 1, 2], vec![a, -a, -a, a]).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.var(xv.clone());
        let g = t.var(Tensor::filled(&[1], 1.0));
        let b = t.var(Tensor::filled(&[1], 0.0));
        let (y, mean, var) = t.batch_norm_train(x, g, b, 1).unwrap();
        assert!(t.value(y).max_abs_diff(&xv).unwrap() < 1e-12);
        assert!(mean.data()[0].abs() < 1e-15);
        assert!((var.data()[0] - (1.0 - BN_EPS)).abs() < 1e-12);

        // generic input: per-channel output stats are (0, ~1) in train mode
        let mut rng = StdRng::seed_from_u64(6);
        let xv = rand_tensor(&mut rng, &[4, 3, 5, 5]);
        let mut t = Tape::<f64>::new();
        let x = t.var(xv);
        let g = t.var(Tensor::filled(&[3], 1.0));
        let b = t.var(Tensor::filled(&[3], 0.0));
        let (y, _, _) = t.batch_norm_train(x, g, b, 1).unwrap();
        let yv = t.value(y);
        let n = 4 * 5 * 5;
        for c in 0..3 {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for bi in 0..4 {
                for i in 0..25 {
                    let v = yv.data()[(bi * 3 + c) * 25 + i];
                    s += v;
                    s2 += v * v;
                }
            }
            let m = s / n as f64;
            let v = s2 / n as f64 - m * m;
            assert!(m.abs() < 1e-12, "channel {c} mean {m}");
            assert!((v - 1.0).abs() < 1e-4, "channel {c} var {v}");
        }
    }

    #[test]
    fn batch_norm_group_pooling() {
        // group_size 2: channels {0,1} share stats, {2,3} share stats
        let xv = Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 3.0, 10.0, 30.0]).unwrap();
        let mut t = Tape::<f64>::new();
        let x = t.var(xv);
        let g = t.var(Tensor::filled(&[2], 1.0));
        let b = t.var(Tensor::filled(&[2], 0.0));
        let (_, mean, _) = t.batch_norm_train(x, g, b, 2).unwrap();
        assert_eq!(mean.data(), &[2.0, 20.0]);
    }

    #[test]
    fn gather_and_scatter_add() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[4], vec![10.0, 20.0, 30.0, 40.0]).unwrap());
        let map = Arc::new(vec![0u32, 2, 2, 3, 1, 0]);
        let y = t.gather(x, map, &[6]).unwrap();
        assert_eq!(t.value(y).data(), &[10.0, 30.0, 30.0, 40.0, 20.0, 10.0]);
        let s = t
            .dot_const(
                y,
                &Tensor::from_vec(&[6], vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0]).unwrap(),
            )
            .unwrap();
        t.backward(s).unwrap();
        // index 0 and 2 were gathered twice
        assert_eq!(t.grad(x).unwrap().data(), &[2.0, 1.0, 2.0, 1.0]);

        let bad = Arc::new(vec![7u32]);
        assert!(t.gather(x, bad, &[1]).is_err());
    }

    #[test]
    fn concat_and_group_mean_values() {
        let mut t = Tape::<f64>::new();
        let a = t.var(Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = t.var(Tensor::from_vec(&[1, 1, 1, 2], vec![9.0, 8.0]).unwrap());
        let c = t.concat_ch(a, b).unwrap();
        assert_eq!(t.value(c).dims(), &[1, 3, 1, 2]);
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 9.0, 8.0]);
        assert!(t.concat_ch(a, c).is_ok());
        let bad = t.var(Tensor::<f64>::zeros(&[2, 1, 1, 2]));
        assert!(t.concat_ch(a, bad).is_err());

        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[1, 4, 1, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let m = t.group_mean(x, 4).unwrap();
        assert_eq!(t.value(m).dims(), &[1, 1, 1, 1]);
        assert_eq!(t.value(m).data(), &[2.5]);
    }

    #[test]
    fn backward_requires_scalar_root_and_clears_state() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let y = t.relu(x);
        assert!(t.backward(y).is_err());
        let s1 = t
            .dot_const(y, &Tensor::from_vec(&[2], vec![1.0, 0.0]).unwrap())
            .unwrap();
        let s2 = t
            .dot_const(y, &Tensor::from_vec(&[2], vec![0.0, 1.0]).unwrap())
            .unwrap();
        t.backward(s1).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[1.0, 0.0]);
        t.backward(s2).unwrap();
        // previous sweep does not leak into this one
        assert_eq!(t.grad(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn constants_accumulate_no_grad() {
        let mut t = Tape::<f64>::new();
        let x = t.var(Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let c = t.constant(Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap());
        let y = t.mul(x, c).unwrap();
        let s = t.dot_const(y, &Tensor::filled(&[2], 1.0)).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(t.grad(c).is_none());
    }

    #[test]
    fn adjoint_is_linear() {
        let mut rng = StdRng::seed_from_u64(7);
        let xv = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let wv = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let ca = coeffs_for(&[1, 2, 4, 4], 100);
        let cb = coeffs_for(&[1, 2, 4, 4], 101);
        let run = |co: &Tensor<f64>| -> (Tensor<f64>, Tensor<f64>) {
            let mut t = Tape::<f64>::new();
            let x = t.var(xv.clone());
            let w = t.var(wv.clone());
            let y = t.conv2d(x, w, 1, 1).unwrap();
            let s = t.dot_const(y, co).unwrap();
            t.backward(s).unwrap();
            (t.grad(x).unwrap().clone(), t.grad(w).unwrap().clone())
        };
        let (gxa, gwa) = run(&ca);
        let (gxb, gwb) = run(&cb);
        let mut csum = ca.clone();
        for (o, &v) in csum.data_mut().iter_mut().zip(cb.data()) {
            *o += v;
        }
        let (gxs, gws) = run(&csum);
        let mut expect_x = gxa.clone();
        for (o, &v) in expect_x.data_mut().iter_mut().zip(gxb.data()) {
            *o += v;
        }
        let mut expect_w = gwa.clone();
        for (o, &v) in expect_w.data_mut().iter_mut().zip(gwb.data()) {
            *o += v;
        }
        assert!(gxs.max_abs_diff(&expect_x).unwrap() < 1e-12);
        assert!(gws.max_abs_diff(&expect_w).unwrap() < 1e-12);
    }

    #[test]
    fn fd_quadratic_is_exact() {
        let mut rng = StdRng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, &[7]);
        let err = fd_all(&[x], |t, ids| {
            let sq = t.mul(ids[0], ids[0])?;
            t.dot_const(sq, &Tensor::filled(&[7], 1.0))
        });
        assert!(err < 1e-8, "sum of squares err {err}");
    }

    #[test]
    fn fd_zero_function() {
        let mut rng = StdRng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, &[5]);
        let err = fd_all(&[x], |t, ids| t.dot_const(ids[0], &Tensor::zeros(&[5])));
        assert_eq!(err, 0.0);
    }

    #[test]
    fn fd_elementwise_ops() {
        let mut rng = StdRng::seed_from_u64(10);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[2, 3]);
        let co = coeffs_for(&[2, 3], 110);

        let err = fd_all(&[a.clone(), b.clone()], |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            t.dot_const(s, &co)
        });
        assert!(err < 1e-8, "add {err}");

        let err = fd_all(&[a.clone(), b.clone()], |t, ids| {
            let s = t.sub(ids[0], ids[1])?;
            t.dot_const(s, &co)
        });
        assert!(err < 1e-8, "sub {err}");

        let err = fd_all(&[a.clone(), b.clone()], |t, ids| {
            let s = t.mul(ids[0], ids[1])?;
            t.dot_const(s, &co)
        });
        assert!(err < 1e-8, "mul {err}");

        let err = fd_all(&[a.clone()], |t, ids| {
            let s = t.scale(ids[0], -1.7);
            t.dot_const(s, &co)
        });
        assert!(err < 1e-8, "scale {err}");

        let err = fd_all(&[a.clone()], |t, ids| {
            let s = t.relu(ids[0]);
            t.dot_const(s, &co)
        });
        assert!(err < 1e-4, "relu {err}");

        let err = fd_all(&[a], |t, ids| {
            let s = t.sigmoid(ids[0]);
            t.dot_const(s, &co)
        });
        assert!(err < 1e-4, "sigmoid {err}");
    }

    #[test]
    fn fd_conv_and_bias() {
        let mut rng = StdRng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let bias = rand_tensor(&mut rng, &[3]);
        for &(s, p) in &[(1usize, 1usize), (1, 0), (2, 1), (2, 0)] {
            let h2 = (5 + 2 * p - 3) / s + 1;
            let co = coeffs_for(&[2, 3, h2, h2], 120 + s as u64 * 10 + p as u64);
            let err = fd_all(&[x.clone(), w.clone(), bias.clone()], |t, ids| {
                let y = t.conv2d(ids[0], ids[1], s, p)?;
                let yb = t.add_bias(y, ids[2])?;
                t.dot_const(yb, &co)
            });
            assert!(err < 1e-4, "conv s{s} p{p}: {err}");
        }
    }

    #[test]
    fn fd_pool_upsample_pad() {
        let mut rng = StdRng::seed_from_u64(12);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);

        let co = coeffs_for(&[2, 2, 2, 2], 130);
        let err = fd_all(&[x.clone()], |t, ids| {
            let y = t.max_pool2(ids[0])?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-4, "max_pool2 {err}");

        let co = coeffs_for(&[2, 2, 8, 8], 131);
        let err = fd_all(&[x.clone()], |t, ids| {
            let y = t.upsample_nearest(ids[0], 2)?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-8, "upsample {err}");

        let co = coeffs_for(&[2, 2, 5, 7], 132);
        let err = fd_all(&[x], |t, ids| {
            let y = t.pad2d(ids[0], 1, 0, 2, 1)?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-8, "pad2d {err}");
    }

    #[test]
    fn fd_gather_concat_group_mean() {
        let mut rng = StdRng::seed_from_u64(13);
        let x = rand_tensor(&mut rng, &[6]);
        let map = Arc::new(vec![0u32, 3, 3, 5, 1, 1, 2, 4]);
        let co = coeffs_for(&[8], 140);
        let err = fd_all(&[x], |t, ids| {
            let y = t.gather(ids[0], Arc::clone(&map), &[8])?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-8, "gather {err}");

        let a = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[2, 1, 3, 3]);
        let co = coeffs_for(&[2, 3, 3, 3], 141);
        let err = fd_all(&[a, b], |t, ids| {
            let y = t.concat_ch(ids[0], ids[1])?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-8, "concat {err}");

        let x = rand_tensor(&mut rng, &[2, 6, 2, 2]);
        let co = coeffs_for(&[2, 2, 2, 2], 142);
        let err = fd_all(&[x], |t, ids| {
            let y = t.group_mean(ids[0], 3)?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-8, "group_mean {err}");
    }

    #[test]
    fn fd_batch_norm_both_modes() {
        let mut rng = StdRng::seed_from_u64(14);
        let x = rand_tensor(&mut rng, &[3, 4, 3, 3]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let co = coeffs_for(&[3, 4, 3, 3], 150);

        let err = fd_all(&[x.clone(), gamma.clone(), beta.clone()], |t, ids| {
            let (y, _, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 2)?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-4, "bn train {err}");

        let mean = Tensor::from_vec(&[2], vec![0.1, -0.2]).unwrap();
        let var = Tensor::from_vec(&[2], vec![0.5, 1.5]).unwrap();
        let err = fd_all(&[x, gamma, beta], |t, ids| {
            let y = t.batch_norm_eval(ids[0], ids[1], ids[2], 2, &mean, &var)?;
            t.dot_const(y, &co)
        });
        assert!(err < 1e-4, "bn eval {err}");
    }

    #[test]
    fn fd_bce() {
        let mut rng = StdRng::seed_from_u64(15);
        let z = rand_tensor(&mut rng, &[3, 4]);
        let tgt = Tensor::from_vec(
            &[3, 4],
            (0..12).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        )
        .unwrap();
        let err = fd_all(&[z], |t, ids| t.bce_mean(ids[0], &tgt));
        assert!(err < 1e-4, "bce {err}");
    }

    #[test]
    fn fd_composite_chain() {
        // conv → bn → relu → pool → upsample → bce: one small end-to-end chain
        let mut rng = StdRng::seed_from_u64(16);
        let x = rand_tensor(&mut rng, &[2, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let gamma = rand_tensor(&mut rng, &[2]);
        let beta = rand_tensor(&mut rng, &[2]);
        let tgt = Tensor::from_vec(
            &[2, 2, 4, 4],
            (0..64).map(|_| f64::from(rng.gen_bool(0.5))).collect(),
        )
        .unwrap();
        let err = fd_all(&[x, w, gamma, beta], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1, 1)?;
            let (y, _, _) = t.batch_norm_train(y, ids[2], ids[3], 1)?;
            let y = t.relu(y);
            let y = t.max_pool2(y)?;
            let y = t.upsample_nearest(y, 2)?;
            t.bce_mean(y, &tgt)
        });
        assert!(err < 1e-4, "composite {err}");
    }

    #[test]
    fn fd_random_subsample_agrees() {
        let mut rng = StdRng::seed_from_u64(17);
        let x = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 2, 3, 3]);
        let co = coeffs_for(&[1, 2, 4, 4], 160);
        let f = |t: &mut Tape<f64>, ids: &[VarId]| {
            let y = t.conv2d(ids[0], ids[1], 1, 1)?;
            t.dot_const(y, &co)
        };
        let err = finite_diff_check(
            &[x, w],
            1e-5,
            CoordSample::Random {
                per_tensor: 5,
                seed: 99,
            },
            f,
        )
        .unwrap();
        assert!(err < 1e-4, "sampled {err}");
    }
}
