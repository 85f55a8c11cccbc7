//! The deeply supervised, U-Net-connected, rotation-equivariant FCN, at a
//! configurable miniature scale, plus its parameter-matched plain twin.
//!
//! Layout: a Z²→G stem, `num_stages` residual stages (widths doubling per
//! stage) separated by three-or-more downsamplings, then exactly three
//! decoder stages of 2× G-upsampling + long-skip concatenation + G-conv.
//! Each decoder stage feeds one supervision head (G-projection → 1×1 conv →
//! nearest upsampling to full resolution); the deepest tap is the weakest
//! supervised. The plain twin is simply the P1 instantiation of the same
//! plan at `round(width·√|S|)` channels, so every code path is shared.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::autograd::{Tape, VarId};
use crate::error::{Error, Result};
use crate::glayers::{
    g_batch_norm_eval, g_batch_norm_train, g_max_pool, g_projection, g_upsample, GConv2d,
};
use crate::group::GroupSpec;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Input images are RGB.
pub const IN_CHANNELS: usize = 3;

/// Momentum of the running-statistics update after each training step.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Downsample {
    /// Stride-1 G-conv followed by 2×2 G-max-pooling: exactly equivariant.
    Pool,
    /// Stride-2 G-conv (asymmetrically padded). The strided sample lattice
    /// is not rotation-stable, so this variant is only approximately
    /// equivariant on even grids; it exists for architecture comparisons.
    StridedConv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegNetConfig {
    pub group: GroupSpec,
    /// When false the net is built over the trivial group (a plain CNN)
    /// regardless of `group`.
    pub equivariant: bool,
    /// Channels of the first stage; stage i has `base_width · 2^i`.
    pub base_width: usize,
    pub num_stages: usize,
    pub blocks_per_stage: usize,
    pub downsample: Downsample,
    /// Deep-supervision weights for (main, half-res, quarter-res) heads;
    /// must sum to 1.
    pub ds_weights: [f64; 3],
    /// Combine all three heads at inference (otherwise main head only).
    pub fuse_prediction: bool,
}

impl Default for SegNetConfig {
    fn default() -> Self {
        SegNetConfig {
            group: GroupSpec::p4m(),
            equivariant: true,
            base_width: 8,
            num_stages: 4,
            blocks_per_stage: 2,
            downsample: Downsample::Pool,
            ds_weights: [0.7, 0.2, 0.1],
            fuse_prediction: true,
        }
    }
}

impl SegNetConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.ds_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "ds_weights must sum to 1, got {:?} (sum {sum})",
                self.ds_weights
            )));
        }
        if self.ds_weights.iter().any(|&w| w < 0.0) {
            return Err(Error::Config("ds_weights must be non-negative".into()));
        }
        if self.base_width == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config(
                "base_width and blocks_per_stage must be ≥ 1".into(),
            ));
        }
        if self.num_stages < 4 {
            return Err(Error::Config(format!(
                "num_stages must be ≥ 4 (three decoder stages need that many skips), got {}",
                self.num_stages
            )));
        }
        Ok(())
    }

    /// The group the built layers actually use.
    pub fn effective_group(&self) -> GroupSpec {
        if self.equivariant {
            self.group
        } else {
            GroupSpec::p1()
        }
    }

    /// The parameter-matched plain network: same plan over the trivial
    /// group at `round(base_width · √|S|)` channels (a G→G layer carries
    /// |S|× the weights of a plain one, and parameter counts are quadratic
    /// in width). The twin of a plain config is the config itself.
    pub fn plain_twin(&self) -> SegNetConfig {
        if !self.equivariant {
            return self.clone();
        }
        let s = self.group.order() as f64;
        SegNetConfig {
            equivariant: false,
            base_width: ((self.base_width as f64) * s.sqrt()).round() as usize,
            ..self.clone()
        }
    }

    /// Spatial extent must be divisible by this for the halvings to land.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.num_stages - 1)
    }
}

pub struct NamedTensor<F: Scalar> {
    pub name: String,
    pub tensor: Tensor<F>,
}

#[derive(Clone, Copy)]
struct BnUnit {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

struct ConvUnit {
    layer: GConv2d,
    w: usize,
    bn: BnUnit,
}

struct Block {
    conv1: ConvUnit,
    conv2: ConvUnit,
}

struct DecStage {
    conv: ConvUnit,
    skip: usize,
}

struct Head {
    w: usize,
    b: usize,
    upsample: usize,
}

/// One pending running-statistics update produced by a training-mode
/// forward pass; apply with [`SegNet::apply_bn_updates`] after the step
/// (the network is immutable during forward).
pub struct BnUpdate<F: Scalar> {
    mean_buf: usize,
    var_buf: usize,
    mean: Tensor<F>,
    var: Tensor<F>,
}

/// Logit heads of one forward pass, plus the parameter nodes (aligned with
/// [`SegNet::params`]) when the network registered them itself.
pub struct ForwardOut<F: Scalar> {
    pub main: VarId,
    pub aux_half: VarId,
    pub aux_quarter: VarId,
    pub param_vars: Vec<VarId>,
    pub bn_updates: Vec<BnUpdate<F>>,
}

pub struct SegNet<F: Scalar> {
    config: SegNetConfig,
    group: GroupSpec,
    stem: ConvUnit,
    stages: Vec<Vec<Block>>,
    downs: Vec<ConvUnit>,
    decoder: Vec<DecStage>,
    heads: Vec<Head>,
    params: Vec<NamedTensor<F>>,
    buffers: Vec<NamedTensor<F>>,
}

struct Builder<F: Scalar> {
    params: Vec<NamedTensor<F>>,
    buffers: Vec<NamedTensor<F>>,
    rng: StdRng,
}

impl<F: Scalar> Builder<F> {
    fn param(&mut self, name: String, tensor: Tensor<F>) -> usize {
        self.params.push(NamedTensor { name, tensor });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, tensor: Tensor<F>) -> usize {
        self.buffers.push(NamedTensor { name, tensor });
        self.buffers.len() - 1
    }

    fn conv_unit(&mut self, name: &str, layer: GConv2d) -> ConvUnit {
        let w = Tensor::he_uniform(&layer.weight_dims(), layer.fan_in(), &mut self.rng);
        let w = self.param(format!("{name}.w"), w);
        let k = layer.out_channels();
        let bn = BnUnit {
            gamma: self.param(format!("{name}.bn.gamma"), Tensor::filled(&[k], F::one())),
            beta: self.param(format!("{name}.bn.beta"), Tensor::zeros(&[k])),
            mean: self.buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[k])),
            var: self.buffer(
                format!("{name}.bn.running_var"),
                Tensor::filled(&[k], F::one()),
            ),
        };
        ConvUnit { layer, w, bn }
    }
}

impl<F: Scalar> SegNet<F> {
    /// Deterministically construct and He-initialize the network.
    pub fn build(config: &SegNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let group = config.effective_group();
        let n = config.num_stages;
        let width = |i: usize| config.base_width << i;
        let mut b = Builder::<F> {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: StdRng::seed_from_u64(seed),
        };

        let stem = b.conv_unit(
            "stem",
            GConv2d::z2_to_g(group, IN_CHANNELS, width(0), 3, 1, 1)?,
        );

        let mut stages = Vec::with_capacity(n);
        let mut downs = Vec::with_capacity(n - 1);
        for i in 0..n {
            let mut blocks = Vec::with_capacity(config.blocks_per_stage);
            for j in 0..config.blocks_per_stage {
                let name = format!("enc{i}.b{j}");
                blocks.push(Block {
                    conv1: b.conv_unit(
                        &format!("{name}.c1"),
                        GConv2d::g_to_g(group, width(i), width(i), 3, 1, 1)?,
                    ),
                    conv2: b.conv_unit(
                        &format!("{name}.c2"),
                        GConv2d::g_to_g(group, width(i), width(i), 3, 1, 1)?,
                    ),
                });
            }
            stages.push(blocks);
            if i + 1 < n {
                let layer = match config.downsample {
                    Downsample::Pool => GConv2d::g_to_g(group, width(i), width(i + 1), 3, 1, 1)?,
                    Downsample::StridedConv => {
                        GConv2d::g_to_g(group, width(i), width(i + 1), 3, 2, 0)?
                    }
                };
                downs.push(b.conv_unit(&format!("down{i}"), layer));
            }
        }

        let mut decoder = Vec::with_capacity(3);
        for j in 1..=3 {
            let out_w = width(n - 1 - j);
            decoder.push(DecStage {
                conv: b.conv_unit(
                    &format!("dec{j}"),
                    GConv2d::g_to_g(group, 3 * out_w, out_w, 3, 1, 1)?,
                ),
                skip: n - 1 - j,
            });
        }

        let mut heads = Vec::with_capacity(3);
        for (j, tap_stage) in [(0usize, n - 4), (1, n - 3), (2, n - 2)] {
            let c = width(tap_stage);
            let wt = Tensor::he_uniform(&[1, c, 1, 1], c, &mut b.rng);
            heads.push(Head {
                w: b.param(format!("head{j}.w"), wt),
                b: b.param(format!("head{j}.b"), Tensor::zeros(&[1])),
                upsample: 1 << tap_stage,
            });
        }

        Ok(SegNet {
            config: config.clone(),
            group,
            stem,
            stages,
            downs,
            decoder,
            heads,
            params: b.params,
            buffers: b.buffers,
        })
    }

    pub fn config(&self) -> &SegNetConfig {
        &self.config
    }

    pub fn group(&self) -> GroupSpec {
        self.group
    }

    pub fn params(&self) -> &[NamedTensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<F>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<F>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<F>] {
        &mut self.buffers
    }

    /// Total learnable scalar count (weights, biases, norm affine).
    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    fn check_input(&self, dims: &[usize]) -> Result<()> {
        let div = self.config.spatial_divisor();
        let ok = dims.len() == 4
            && dims[1] == IN_CHANNELS
            && dims[2] == dims[3]
            && dims[2] % div == 0
            && dims[2] >= div;
        if !ok {
            return Err(Error::shape(format!(
                "input must be [B, {IN_CHANNELS}, H, H] with H a multiple of {div}, got {dims:?}"
            )));
        }
        Ok(())
    }

    /// Forward pass with caller-supplied parameter nodes (one per entry of
    /// [`SegNet::params`], same order). `train` selects batch statistics
    /// (returning pending running-stat updates) versus running statistics.
    pub fn forward_with(
        &self,
        tape: &mut Tape<F>,
        x: VarId,
        pvars: &[VarId],
        train: bool,
    ) -> Result<ForwardOut<F>> {
        if pvars.len() != self.params.len() {
            return Err(Error::arg(format!(
                "expected {} parameter nodes, got {}",
                self.params.len(),
                pvars.len()
            )));
        }
        self.check_input(self.value_dims(tape, x))?;
        let mut updates = Vec::new();
        let mut cur = self.unit(tape, &self.stem, x, pvars, train, &mut updates, true)?;

        let mut skips = Vec::with_capacity(self.downs.len());
        for (i, stage) in self.stages.iter().enumerate() {
            for block in stage {
                let mut y = self.unit(tape, &block.conv1, cur, pvars, train, &mut updates, true)?;
                y = self.unit(tape, &block.conv2, y, pvars, train, &mut updates, false)?;
                let summed = tape.add(y, cur)?;
                cur = tape.relu(summed);
            }
            if i < self.downs.len() {
                skips.push(cur);
                cur = match self.config.downsample {
                    Downsample::Pool => {
                        let y =
                            self.unit(tape, &self.downs[i], cur, pvars, train, &mut updates, true)?;
                        g_max_pool(tape, y, self.group)?
                    }
                    Downsample::StridedConv => {
                        let padded = tape.pad2d(cur, 1, 0, 1, 0)?;
                        self.unit(
                            tape,
                            &self.downs[i],
                            padded,
                            pvars,
                            train,
                            &mut updates,
                            true,
                        )?
                    }
                };
            }
        }

        let mut taps = Vec::with_capacity(3);
        for dec in &self.decoder {
            cur = g_upsample(tape, cur, 2, self.group)?;
            cur = tape.concat_ch(cur, skips[dec.skip])?;
            cur = self.unit(tape, &dec.conv, cur, pvars, train, &mut updates, true)?;
            taps.push(cur);
        }

        // taps run deep→shallow: quarter, half, full resolution
        let logits: Vec<VarId> = self
            .heads
            .iter()
            .zip([taps[2], taps[1], taps[0]])
            .map(|(head, tap)| self.head(tape, head, tap, pvars))
            .collect::<Result<_>>()?;

        Ok(ForwardOut {
            main: logits[0],
            aux_half: logits[1],
            aux_quarter: logits[2],
            param_vars: Vec::new(),
            bn_updates: updates,
        })
    }

    /// Forward pass that registers the stored parameters on the tape itself;
    /// the resulting nodes are reported in `param_vars` for gradient reads.
    pub fn forward(&self, tape: &mut Tape<F>, x: VarId, train: bool) -> Result<ForwardOut<F>> {
        let pvars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.var(p.tensor.clone()))
            .collect();
        let mut out = self.forward_with(tape, x, &pvars, train)?;
        out.param_vars = pvars;
        Ok(out)
    }

    fn value_dims<'t>(&self, tape: &'t Tape<F>, x: VarId) -> &'t [usize] {
        tape.value(x).dims()
    }

    #[allow(clippy::too_many_arguments)]
    fn unit(
        &self,
        tape: &mut Tape<F>,
        unit: &ConvUnit,
        x: VarId,
        pvars: &[VarId],
        train: bool,
        updates: &mut Vec<BnUpdate<F>>,
        relu: bool,
    ) -> Result<VarId> {
        let y = unit.layer.apply(tape, x, pvars[unit.w])?;
        let y = if train {
            let (y, mean, var) = g_batch_norm_train(
                tape,
                y,
                pvars[unit.bn.gamma],
                pvars[unit.bn.beta],
                self.group,
            )?;
            updates.push(BnUpdate {
                mean_buf: unit.bn.mean,
                var_buf: unit.bn.var,
                mean,
                var,
            });
            y
        } else {
            g_batch_norm_eval(
                tape,
                y,
                pvars[unit.bn.gamma],
                pvars[unit.bn.beta],
                self.group,
                &self.buffers[unit.bn.mean].tensor,
                &self.buffers[unit.bn.var].tensor,
            )?
        };
        Ok(if relu { tape.relu(y) } else { y })
    }

    fn head(&self, tape: &mut Tape<F>, head: &Head, tap: VarId, pvars: &[VarId]) -> Result<VarId> {
        let proj = g_projection(tape, tap, self.group)?;
        let y = tape.conv2d(proj, pvars[head.w], 1, 0)?;
        let y = tape.add_bias(y, pvars[head.b])?;
        if head.upsample > 1 {
            tape.upsample_nearest(y, head.upsample)
        } else {
            Ok(y)
        }
    }

    /// Deep-supervision loss: `Σ ds_weights[i] · bce(head_i, target)`.
    pub fn loss(
        &self,
        tape: &mut Tape<F>,
        out: &ForwardOut<F>,
        target: &Tensor<F>,
    ) -> Result<VarId> {
        let heads = [out.main, out.aux_half, out.aux_quarter];
        let mut total: Option<VarId> = None;
        for (&head, &w) in heads.iter().zip(&self.config.ds_weights) {
            let l = tape.bce_mean(head, target)?;
            let scaled = tape.scale(l, F::of_f64(w));
            total = Some(match total {
                Some(t) => tape.add(t, scaled)?,
                None => scaled,
            });
        }
        Ok(total.expect("three heads"))
    }

    /// Fold pending batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate<F>]) {
        let m = F::of_f64(BN_MOMENTUM);
        let keep = F::one() - m;
        for u in updates {
            for (buf, fresh) in [(u.mean_buf, &u.mean), (u.var_buf, &u.var)] {
                let old = self.buffers[buf].tensor.data_mut();
                for (o, &v) in old.iter_mut().zip(fresh.data()) {
                    *o = keep * *o + m * v;
                }
            }
        }
    }

    /// Binary mask prediction: sigmoid each head, combine with `ds_weights`
    /// (or use the main head alone when fusion is off), threshold at 0.5
    /// with ties labeled 1.
    pub fn predict(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let probs = self.predict_probs(image)?;
        Ok(probs.map(|p| {
            if p.as_f64() >= 0.5 {
                F::one()
            } else {
                F::zero()
            }
        }))
    }

    /// The combined probability map that [`SegNet::predict`] thresholds.
    pub fn predict_probs(&self, image: &Tensor<F>) -> Result<Tensor<F>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        // no gradients wanted at inference: parameters go on as constants
        let pvars: Vec<VarId> = self
            .params
            .iter()
            .map(|p| tape.constant(p.tensor.clone()))
            .collect();
        let out = self.forward_with(&mut tape, x, &pvars, false)?;
        let heads = [out.main, out.aux_half, out.aux_quarter];
        let mut combined: Option<Tensor<F>> = None;
        if self.config.fuse_prediction {
            for (&h, &w) in heads.iter().zip(&self.config.ds_weights) {
                let p = tape.sigmoid(h);
                let scaled = tape.value(p).map(|v| v * F::of_f64(w));
                combined = Some(match combined {
                    Some(mut acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(scaled.data()) {
                            *a += b;
                        }
                        acc
                    }
                    None => scaled,
                });
            }
        } else {
            let p = tape.sigmoid(out.main);
            combined = Some(tape.value(p).clone());
        }
        Ok(combined.expect("at least one head"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_diff_check, CoordSample};
    use crate::group::StabilizerElement;
    use crate::transform::transform_feature_z2;
    use rand::Rng;

    fn tiny_config(group: GroupSpec) -> SegNetConfig {
        SegNetConfig {
            group,
            base_width: 2,
            blocks_per_stage: 1,
            ..SegNetConfig::default()
        }
    }

    fn rand_image(seed: u64, b: usize, h: usize) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let dims = [b, IN_CHANNELS, h, h];
        let data = (0..dims.iter().product())
            .map(|_| rng.gen_range(0.0..1.0))
            .collect();
        Tensor::from_vec(&dims, data).unwrap()
    }

    fn rand_mask(seed: u64, b: usize, h: usize) -> Tensor<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        let dims = [b, 1, h, h];
        let data = (0..dims.iter().product())
            .map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(&dims, data).unwrap()
    }

    fn eval_logits(net: &SegNet<f64>, x: &Tensor<f64>) -> [Tensor<f64>; 3] {
        let mut t = Tape::new();
        let xi = t.constant(x.clone());
        let out = net.forward(&mut t, xi, false).unwrap();
        [
            t.value(out.main).clone(),
            t.value(out.aux_half).clone(),
            t.value(out.aux_quarter).clone(),
        ]
    }

    #[test]
    fn config_validation() {
        assert!(SegNetConfig::default().validate().is_ok());
        let cases = [
            SegNetConfig {
                ds_weights: [0.5, 0.5, 0.5],
                ..Default::default()
            },
            SegNetConfig {
                num_stages: 3,
                ..Default::default()
            },
            SegNetConfig {
                base_width: 0,
                ..Default::default()
            },
            SegNetConfig {
                ds_weights: [1.5, -0.3, -0.2],
                ..Default::default()
            },
        ];
        for bad in cases {
            assert!(bad.validate().is_err(), "{bad:?} should be rejected");
        }
    }

    #[test]
    fn plain_twin_widths() {
        let twin = SegNetConfig::default().plain_twin();
        assert!(!twin.equivariant);
        assert_eq!(twin.base_width, 23); // 8·√8 ≈ 22.6
        assert_eq!(twin.plain_twin(), twin);
        let p4 = SegNetConfig {
            group: GroupSpec::p4(),
            ..Default::default()
        };
        assert_eq!(p4.plain_twin().base_width, 16);
    }

    #[test]
    fn build_is_deterministic() {
        let cfg = tiny_config(GroupSpec::p4());
        let a = SegNet::<f64>::build(&cfg, 7).unwrap();
        let b = SegNet::<f64>::build(&cfg, 7).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for (pa, pb) in a.params.iter().zip(&b.params) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let c = SegNet::<f64>::build(&cfg, 8).unwrap();
        assert_ne!(a.params[0].tensor.data(), c.params[0].tensor.data());
    }

    #[test]
    fn forward_shapes() {
        for downsample in [Downsample::Pool, Downsample::StridedConv] {
            let cfg = SegNetConfig {
                downsample,
                ..tiny_config(GroupSpec::p4())
            };
            let net = SegNet::<f64>::build(&cfg, 1).unwrap();
            let mut t = Tape::new();
            let xi = t.constant(rand_image(3, 2, 16));
            let out = net.forward(&mut t, xi, false).unwrap();
            for id in [out.main, out.aux_half, out.aux_quarter] {
                assert_eq!(t.value(id).dims(), &[2, 1, 16, 16]);
                assert!(t.value(id).all_finite());
            }
        }
    }

    #[test]
    fn forward_rejects_bad_inputs() {
        let net = SegNet::<f64>::build(&tiny_config(GroupSpec::p4()), 1).unwrap();
        for dims in [
            vec![1, 3, 12, 12], // not divisible by 8
            vec![1, 3, 16, 8],  // not square
            vec![1, 1, 16, 16], // not RGB
            vec![3, 16, 16],    // wrong rank
        ] {
            let mut t = Tape::new();
            let xi = t.constant(Tensor::<f64>::zeros(&dims));
            assert!(net.forward(&mut t, xi, false).is_err(), "{dims:?}");
        }
    }

    #[test]
    fn param_count_example() {
        // a single plain 3×3 conv from 2 to 4 channels plus a bias: 76
        let layer = GConv2d::z2_to_g(GroupSpec::p1(), 2, 4, 3, 1, 1).unwrap();
        let weights: usize = layer.weight_dims().iter().product();
        assert_eq!(weights + 4, 76);
    }

    #[test]
    fn param_parity_at_defaults() {
        let cfg = SegNetConfig::default();
        let eq = SegNet::<f32>::build(&cfg, 0).unwrap().count_params();
        let plain = SegNet::<f32>::build(&cfg.plain_twin(), 0)
            .unwrap()
            .count_params();
        let rel = (eq as f64 - plain as f64).abs() / eq as f64;
        assert!(rel <= 0.10, "parameter mismatch {rel:.4}: {eq} vs {plain}");
    }

    #[test]
    fn full_net_equivariance() {
        for group in [GroupSpec::p4(), GroupSpec::p4m()] {
            let net = SegNet::<f64>::build(&tiny_config(group), 11).unwrap();
            let x = rand_image(5, 1, 16);
            let base = eval_logits(&net, &x);
            for g in group.elements() {
                let moved = eval_logits(&net, &transform_feature_z2(g, &x).unwrap());
                for (a, b) in moved.iter().zip(&base) {
                    let want = transform_feature_z2(g, b).unwrap();
                    let dev = a.max_abs_diff(&want).unwrap();
                    assert!(dev < 1e-10, "{:?} {g:?}: {dev:e}", group.kind());
                }
            }
        }
    }

    #[test]
    fn plain_twin_is_not_equivariant() {
        let cfg = tiny_config(GroupSpec::p4()).plain_twin();
        let net = SegNet::<f64>::build(&cfg, 11).unwrap();
        let x = rand_image(5, 1, 16);
        let g = StabilizerElement::new(0, 1).unwrap();
        let moved = eval_logits(&net, &transform_feature_z2(g, &x).unwrap());
        let want = transform_feature_z2(g, &eval_logits(&net, &x)[0]).unwrap();
        let dev = moved[0].max_abs_diff(&want).unwrap();
        assert!(dev > 0.01, "plain net unexpectedly equivariant: {dev:e}");
    }

    #[test]
    fn loss_weight_conventions() {
        let cfg = SegNetConfig {
            ds_weights: [1.0, 0.0, 0.0],
            ..tiny_config(GroupSpec::p4())
        };
        let net = SegNet::<f64>::build(&cfg, 2).unwrap();
        let x = rand_image(6, 1, 16);
        let target = rand_mask(7, 1, 16);
        let mut t = Tape::new();
        let xi = t.constant(x);
        let out = net.forward(&mut t, xi, true).unwrap();
        let loss = net.loss(&mut t, &out, &target).unwrap();
        let main_only = t.bce_mean(out.main, &target).unwrap();
        assert_eq!(
            t.value(loss).item().unwrap(),
            t.value(main_only).item().unwrap()
        );

        // identical heads collapse to a single unweighted term
        let net = SegNet::<f64>::build(&tiny_config(GroupSpec::p4()), 2).unwrap();
        let same = ForwardOut {
            main: out.main,
            aux_half: out.main,
            aux_quarter: out.main,
            param_vars: Vec::new(),
            bn_updates: Vec::new(),
        };
        let collapsed = net.loss(&mut t, &same, &target).unwrap();
        let direct = t.value(main_only).item().unwrap();
        let got = t.value(collapsed).item().unwrap();
        assert!((got - direct).abs() <= 1e-12 * direct.abs());
    }

    #[test]
    fn zeroed_heads_emit_bias() {
        let cfg = tiny_config(GroupSpec::p4m());
        let mut net = SegNet::<f64>::build(&cfg, 3).unwrap();
        let biases = [0.37, -0.25, 0.11];
        for p in net.params_mut() {
            if p.name.starts_with("head") && p.name.ends_with(".w") {
                p.tensor = Tensor::zeros(p.tensor.dims());
            }
            for (j, &v) in biases.iter().enumerate() {
                if p.name == format!("head{j}.b") {
                    p.tensor = Tensor::filled(&[1], v);
                }
            }
        }
        let logits = eval_logits(&net, &rand_image(9, 1, 16));
        for (head, &want) in logits.iter().zip(&biases) {
            for &v in head.data() {
                assert!((v - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn predict_threshold_and_ties() {
        // zero head weights and biases → every head probability is exactly
        // 0.5; with binary-exact fusion weights the combined map is exactly
        // 0.5 too, and the tie labels everything lesion
        let cfg = SegNetConfig {
            ds_weights: [0.5, 0.25, 0.25],
            ..tiny_config(GroupSpec::p4())
        };
        let mut net = SegNet::<f64>::build(&cfg, 4).unwrap();
        for p in net.params_mut() {
            if p.name.starts_with("head") {
                p.tensor = Tensor::zeros(p.tensor.dims());
            }
        }
        let mask = net.predict(&rand_image(10, 1, 16)).unwrap();
        assert_eq!(mask.dims(), &[1, 1, 16, 16]);
        assert!(mask.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn predict_is_equivariant() {
        let net = SegNet::<f64>::build(&tiny_config(GroupSpec::p4m()), 12).unwrap();
        let x = rand_image(13, 1, 16);
        let g = StabilizerElement::new(1, 3).unwrap();
        let probs = net.predict_probs(&x).unwrap();
        let probs_moved = net
            .predict_probs(&transform_feature_z2(g, &x).unwrap())
            .unwrap();
        let dev = probs_moved
            .max_abs_diff(&transform_feature_z2(g, &probs).unwrap())
            .unwrap();
        assert!(dev < 1e-10, "probability maps deviate by {dev:e}");
        let mask = net.predict(&x).unwrap();
        let mask_moved = net.predict(&transform_feature_z2(g, &x).unwrap()).unwrap();
        assert_eq!(
            mask_moved.data(),
            transform_feature_z2(g, &mask).unwrap().data()
        );
    }

    #[test]
    fn bn_buffers_update() {
        let cfg = tiny_config(GroupSpec::p4());
        let mut net = SegNet::<f64>::build(&cfg, 5).unwrap();
        let mut t = Tape::new();
        let xi = t.constant(rand_image(14, 2, 16));
        let out = net.forward(&mut t, xi, true).unwrap();
        assert_eq!(out.bn_updates.len(), net.buffers.len() / 2);
        net.apply_bn_updates(&out.bn_updates);
        // buffers start at (0, 1), so one update lands at 0.9·init + 0.1·batch
        let stem_mean = &net.buffers[0];
        assert!(stem_mean.name.contains("running_mean"));
        for (&have, &batch) in stem_mean
            .tensor
            .data()
            .iter()
            .zip(out.bn_updates[0].mean.data())
        {
            assert!((have - 0.1 * batch).abs() < 1e-15);
        }
        let stem_var = &net.buffers[1];
        assert!(stem_var.name.contains("running_var"));
        for (&have, &batch) in stem_var
            .tensor
            .data()
            .iter()
            .zip(out.bn_updates[0].var.data())
        {
            assert!((have - (0.9 + 0.1 * batch)).abs() < 1e-15);
        }
    }

    #[test]
    fn gradcheck_whole_net() {
        let cfg = tiny_config(GroupSpec::p4());
        let net = SegNet::<f64>::build(&cfg, 6).unwrap();
        let x = rand_image(15, 1, 8);
        let target = rand_mask(16, 1, 8);
        let leaves: Vec<Tensor<f64>> = net.params().iter().map(|p| p.tensor.clone()).collect();
        let err = finite_diff_check(
            &leaves,
            1e-5,
            CoordSample::Random {
                per_tensor: 2,
                seed: 99,
            },
            |t, ids| {
                let xi = t.constant(x.clone());
                let out = net.forward_with(t, xi, ids, true)?;
                net.loss(t, &out, &target)
            },
        )
        .unwrap();
        assert!(err < 1e-4, "relative gradient error {err:e}");
    }
}
