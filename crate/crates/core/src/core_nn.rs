//! Shared neural building blocks: conv units (standard and depthwise
//! separable), batch-norm, a small residual backbone emitting stride-8/16/32
//! maps, and parameter accounting.

use std::collections::BTreeMap;

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ops::channel_stats;
use crate::nn::params::{full, kaiming_conv, zeros};
use crate::nn::{BufferId, Elem, ParamId, ParamStore, Tape, Tid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    BatchNorm,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

/// Specification of one conv unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub depthwise_separable: bool,
    pub normalization: Normalization,
    pub activation: Activation,
}

impl ConvSpec {
    pub fn plain(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            depthwise_separable: false,
            normalization: Normalization::None,
            activation: Activation::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 {
            return Err(Error::InvalidSpec {
                context: "ConvSpec",
                field: "in_channels",
                reason: "must be positive".into(),
            });
        }
        if self.out_channels == 0 {
            return Err(Error::InvalidSpec {
                context: "ConvSpec",
                field: "out_channels",
                reason: "must be positive".into(),
            });
        }
        if !matches!(self.kernel, 1 | 3 | 5 | 7) {
            return Err(Error::InvalidSpec {
                context: "ConvSpec",
                field: "kernel",
                reason: format!("must be one of 1/3/5/7, got {}", self.kernel),
            });
        }
        if !matches!(self.stride, 1 | 2) {
            return Err(Error::InvalidSpec {
                context: "ConvSpec",
                field: "stride",
                reason: format!("must be 1 or 2, got {}", self.stride),
            });
        }
        Ok(())
    }

    /// Closed-form trainable-value count (convolution weights plus norm
    /// affine parameters; conv units carry no bias).
    pub fn param_count(&self) -> usize {
        let k2 = self.kernel * self.kernel;
        let conv = if self.depthwise_separable {
            k2 * self.in_channels + self.in_channels * self.out_channels
        } else {
            k2 * self.in_channels * self.out_channels
        };
        let norm = match self.normalization {
            Normalization::BatchNorm => 2 * self.out_channels,
            Normalization::None => 0,
        };
        conv + norm
    }
}

/// Batch-norm layer state: affine parameters plus running statistics.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub run_mean: BufferId,
    pub run_var: BufferId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new<F: Elem>(store: &mut ParamStore<F>, prefix: &str, channels: usize) -> Self {
        Self {
            gamma: store.add_param(format!("{prefix}.gamma"), full(&[channels], F::one())),
            beta: store.add_param(format!("{prefix}.beta"), zeros(&[channels])),
            run_mean: store.add_buffer(format!("{prefix}.run_mean"), zeros(&[channels])),
            run_var: store.add_buffer(format!("{prefix}.run_var"), full(&[channels], F::one())),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward<F: Elem>(&self, store: &mut ParamStore<F>, tape: &mut Tape<F>, x: Tid) -> Tid {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        let eps = F::lit(self.eps);
        if tape.train {
            let (mean, var) = channel_stats(tape.value(x).view());
            if tape.update_norm_stats {
                let m = F::lit(self.momentum);
                let one_m = F::one() - m;
                for (r, &s) in store.buffer_mut(self.run_mean).iter_mut().zip(mean.iter()) {
                    *r = one_m * *r + m * s;
                }
                for (r, &s) in store.buffer_mut(self.run_var).iter_mut().zip(var.iter()) {
                    *r = one_m * *r + m * s;
                }
            }
            tape.batch_norm(x, gamma, beta, mean, var, eps, true)
        } else {
            let mean: Array1<F> =
                store.buffer(self.run_mean).to_owned().into_dimensionality().expect("1-d buffer");
            let var: Array1<F> =
                store.buffer(self.run_var).to_owned().into_dimensionality().expect("1-d buffer");
            tape.batch_norm(x, gamma, beta, mean, var, eps, false)
        }
    }
}

#[derive(Debug)]
enum ConvKind {
    Standard { weight: ParamId },
    DepthwiseSeparable { dw_weight: ParamId, pw_weight: ParamId },
}

/// A built conv unit: (depthwise-separable) convolution, optional
/// batch-norm, optional ReLU.
#[derive(Debug)]
pub struct ConvUnit {
    kind: ConvKind,
    norm: Option<BatchNorm>,
    activation: Activation,
    stride: usize,
    pub spec: ConvSpec,
}

/// Builds a conv unit per `spec` under `prefix` in the store.
pub fn build_conv<F: Elem, R: Rng>(
    spec: ConvSpec,
    store: &mut ParamStore<F>,
    prefix: &str,
    rng: &mut R,
) -> Result<ConvUnit> {
    spec.validate()?;
    let k = spec.kernel;
    let kind = if spec.depthwise_separable {
        let dw = kaiming_conv(&[spec.in_channels, k, k], k * k, rng);
        let pw = kaiming_conv(&[spec.out_channels, spec.in_channels, 1, 1], spec.out_channels, rng);
        ConvKind::DepthwiseSeparable {
            dw_weight: store.add_param(format!("{prefix}.dw_weight"), dw),
            pw_weight: store.add_param(format!("{prefix}.pw_weight"), pw),
        }
    } else {
        let w = kaiming_conv(
            &[spec.out_channels, spec.in_channels, k, k],
            k * k * spec.out_channels,
            rng,
        );
        ConvKind::Standard { weight: store.add_param(format!("{prefix}.weight"), w) }
    };
    let norm = match spec.normalization {
        Normalization::BatchNorm => {
            Some(BatchNorm::new(store, &format!("{prefix}.bn"), spec.out_channels))
        }
        Normalization::None => None,
    };
    Ok(ConvUnit { kind, norm, activation: spec.activation, stride: spec.stride, spec })
}

impl ConvUnit {
    pub fn forward<F: Elem>(&self, store: &mut ParamStore<F>, tape: &mut Tape<F>, x: Tid) -> Tid {
        let in_ch = tape.value(x).shape()[1];
        assert_eq!(
            in_ch, self.spec.in_channels,
            "conv unit expects {} input channels, got {in_ch}",
            self.spec.in_channels
        );
        let mut y = match &self.kind {
            ConvKind::Standard { weight } => {
                let w = tape.param(store, *weight);
                tape.conv2d(x, w, None, self.stride)
            }
            ConvKind::DepthwiseSeparable { dw_weight, pw_weight } => {
                let dw = tape.param(store, *dw_weight);
                let mid = tape.depthwise_conv2d(x, dw, self.stride);
                let pw = tape.param(store, *pw_weight);
                tape.conv2d(mid, pw, None, 1)
            }
        };
        if let Some(bn) = &self.norm {
            y = bn.forward(store, tape, y);
        }
        if self.activation == Activation::Relu {
            y = tape.relu(y);
        }
        y
    }

    /// Weight identity-reset helpers used by tests.
    pub fn pointwise_param(&self) -> Option<ParamId> {
        match &self.kind {
            ConvKind::DepthwiseSeparable { pw_weight, .. } => Some(*pw_weight),
            ConvKind::Standard { .. } => None,
        }
    }

    pub fn weight_params(&self) -> Vec<ParamId> {
        match &self.kind {
            ConvKind::Standard { weight } => vec![*weight],
            ConvKind::DepthwiseSeparable { dw_weight, pw_weight } => vec![*dw_weight, *pw_weight],
        }
    }
}

/// Bare convolution with optional bias, for heads and attention blocks that
/// manage their own normalization.
#[derive(Debug)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub in_channels: usize,
}

impl Conv2dLayer {
    pub fn new<F: Elem, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = kaiming_conv(&[out_ch, in_ch, kernel, kernel], kernel * kernel * out_ch, rng);
        Self {
            weight: store.add_param(format!("{prefix}.weight"), w),
            bias: bias.then(|| store.add_param(format!("{prefix}.bias"), zeros(&[out_ch]))),
            stride,
            in_channels: in_ch,
        }
    }

    pub fn forward<F: Elem>(&self, store: &mut ParamStore<F>, tape: &mut Tape<F>, x: Tid) -> Tid {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|bid| tape.param(store, bid));
        tape.conv2d(x, w, b, self.stride)
    }
}

/// Residual backbone specification. Each stage downsamples by exactly 2;
/// the stem supplies the remaining stride so the last three stages emit
/// maps at strides 8, 16 and 32.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub input_channels: usize,
}

impl BackboneSpec {
    /// Desk-scale preset: 3 stages of one block each.
    pub fn desk() -> Self {
        Self { stage_channels: vec![32, 64, 128], blocks_per_stage: vec![1, 1, 1], input_channels: 3 }
    }

    /// ResNet-18 channel plan.
    pub fn paper() -> Self {
        Self {
            stage_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::InvalidSpec {
                context: "BackboneSpec",
                field: "blocks_per_stage",
                reason: "must have the same length as stage_channels".into(),
            });
        }
        if self.stage_channels.len() < 3 {
            return Err(Error::InvalidSpec {
                context: "BackboneSpec",
                field: "stage_channels",
                reason: "need at least 3 stages".into(),
            });
        }
        if self.stage_channels.len() > 5 {
            return Err(Error::InvalidSpec {
                context: "BackboneSpec",
                field: "stage_channels",
                reason: "at most 5 stages fit under a stride-32 pyramid".into(),
            });
        }
        if self.stage_channels.iter().any(|&c| c == 0) || self.blocks_per_stage.iter().any(|&b| b == 0)
        {
            return Err(Error::InvalidSpec {
                context: "BackboneSpec",
                field: "stage_channels",
                reason: "stage channels and block counts must be positive".into(),
            });
        }
        if self.input_channels == 0 {
            return Err(Error::InvalidSpec {
                context: "BackboneSpec",
                field: "input_channels",
                reason: "must be positive".into(),
            });
        }
        Ok(())
    }

    /// Channels of the emitted C3/C4/C5 maps.
    pub fn out_channels(&self) -> [usize; 3] {
        let n = self.stage_channels.len();
        [self.stage_channels[n - 3], self.stage_channels[n - 2], self.stage_channels[n - 1]]
    }
}

#[derive(Debug)]
struct ResidualBlock {
    conv1: ConvUnit,
    conv2: ConvUnit,
    skip: Option<ConvUnit>,
}

impl ResidualBlock {
    fn new<F: Elem, R: Rng>(
        store: &mut ParamStore<F>,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let conv1 = build_conv(
            ConvSpec {
                in_channels: in_ch,
                out_channels: out_ch,
                kernel: 3,
                stride,
                depthwise_separable: false,
                normalization: Normalization::BatchNorm,
                activation: Activation::Relu,
            },
            store,
            &format!("{prefix}.conv1"),
            rng,
        )?;
        let conv2 = build_conv(
            ConvSpec {
                in_channels: out_ch,
                out_channels: out_ch,
                kernel: 3,
                stride: 1,
                depthwise_separable: false,
                normalization: Normalization::BatchNorm,
                activation: Activation::None,
            },
            store,
            &format!("{prefix}.conv2"),
            rng,
        )?;
        let skip = if stride != 1 || in_ch != out_ch {
            Some(build_conv(
                ConvSpec {
                    in_channels: in_ch,
                    out_channels: out_ch,
                    kernel: 1,
                    stride,
                    depthwise_separable: false,
                    normalization: Normalization::BatchNorm,
                    activation: Activation::None,
                },
                store,
                &format!("{prefix}.skip"),
                rng,
            )?)
        } else {
            None
        };
        Ok(Self { conv1, conv2, skip })
    }

    fn forward<F: Elem>(&self, store: &mut ParamStore<F>, tape: &mut Tape<F>, x: Tid) -> Tid {
        let y = self.conv1.forward(store, tape, x);
        let y = self.conv2.forward(store, tape, y);
        let identity = match &self.skip {
            Some(s) => s.forward(store, tape, x),
            None => x,
        };
        let sum = tape.add(y, identity);
        tape.relu(sum)
    }
}

/// Residual backbone emitting `[C3, C4, C5]` at strides 8/16/32.
#[derive(Debug)]
pub struct Backbone {
    stem: Vec<ConvUnit>,
    stages: Vec<Vec<ResidualBlock>>,
    pub spec: BackboneSpec,
}

pub fn build_backbone<F: Elem, R: Rng>(
    spec: &BackboneSpec,
    store: &mut ParamStore<F>,
    prefix: &str,
    rng: &mut R,
) -> Result<Backbone> {
    spec.validate()?;
    let num_stages = spec.stage_channels.len();
    let stem_stride_total = 32usize >> num_stages;
    let stem_convs = stem_stride_total.trailing_zeros().max(1) as usize;
    let stem_ch = (spec.stage_channels[0] / 2).max(8);

    let mut stem = Vec::new();
    let mut in_ch = spec.input_channels;
    for i in 0..stem_convs {
        let stride = if stem_stride_total == 1 { 1 } else { 2 };
        stem.push(build_conv(
            ConvSpec {
                in_channels: in_ch,
                out_channels: stem_ch,
                kernel: 3,
                stride,
                depthwise_separable: false,
                normalization: Normalization::BatchNorm,
                activation: Activation::Relu,
            },
            store,
            &format!("{prefix}.stem{i}"),
            rng,
        )?);
        in_ch = stem_ch;
    }

    let mut stages = Vec::new();
    for (si, (&ch, &blocks)) in
        spec.stage_channels.iter().zip(spec.blocks_per_stage.iter()).enumerate()
    {
        let mut stage = Vec::new();
        for bi in 0..blocks {
            let stride = if bi == 0 { 2 } else { 1 };
            let block_in = if bi == 0 { in_ch } else { ch };
            stage.push(ResidualBlock::new(
                store,
                &format!("{prefix}.stage{si}.block{bi}"),
                block_in,
                ch,
                stride,
                rng,
            )?);
        }
        in_ch = ch;
        stages.push(stage);
    }

    Ok(Backbone { stem, stages, spec: spec.clone() })
}

impl Backbone {
    /// Runs the backbone; returns `[C3, C4, C5]`.
    ///
    /// The shape check happens before any compute.
    pub fn forward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        image: Tid,
    ) -> Result<[Tid; 3]> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.input_channels {
            return Err(Error::Shape {
                context: "backbone",
                reason: format!(
                    "expected (B, {}, H, W), got {shape:?}",
                    self.spec.input_channels
                ),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::Shape {
                context: "backbone",
                reason: format!("input {h}x{w} not divisible by 32"),
            });
        }

        let mut x = image;
        for conv in &self.stem {
            x = conv.forward(store, tape, x);
        }
        let mut outs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in stage {
                x = block.forward(store, tape, x);
            }
            outs.push(x);
        }
        let n = outs.len();
        Ok([outs[n - 3], outs[n - 2], outs[n - 1]])
    }
}

/// Deterministic parameter accounting over a store.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub per_module_counts: BTreeMap<String, usize>,
    pub total_params: usize,
    pub model_size_bytes: usize,
}

/// Counts trainable values grouped by top-level module prefix.
/// `model_size_bytes` assumes 32-bit floats.
pub fn count_parameters<F: Elem>(store: &ParamStore<F>) -> ParameterReport {
    let mut per_module_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut total = 0usize;
    for (_, name, value) in store.iter_params() {
        let module = name.split('.').next().unwrap_or(name).to_string();
        *per_module_counts.entry(module).or_insert(0) += value.len();
        total += value.len();
    }
    ParameterReport {
        per_module_counts,
        total_params: total,
        model_size_bytes: total * 4,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    #[test]
    fn standard_vs_ds_param_counts_256_k3() {
        let standard = ConvSpec::plain(256, 256, 3, 1);
        assert_eq!(standard.param_count(), 589_824);
        let ds = ConvSpec { depthwise_separable: true, ..standard };
        assert_eq!(ds.param_count(), 67_840);
        assert!(standard.param_count() as f64 / ds.param_count() as f64 > 8.0);
    }

    #[test]
    fn built_layer_count_matches_closed_form_sweep() {
        let mut r = rng();
        for _ in 0..40 {
            let kernel = [1usize, 3, 5, 7][r.random_range(0..4)];
            let spec = ConvSpec {
                in_channels: r.random_range(8..=256),
                out_channels: r.random_range(8..=256),
                kernel,
                stride: [1, 2][r.random_range(0..2)],
                depthwise_separable: r.random::<bool>(),
                normalization: if r.random::<bool>() {
                    Normalization::BatchNorm
                } else {
                    Normalization::None
                },
                activation: if r.random::<bool>() { Activation::Relu } else { Activation::None },
            };
            let mut store = ParamStore::<f32>::new();
            build_conv(spec, &mut store, "conv", &mut r).unwrap();
            assert_eq!(store.total_trainable(), spec.param_count(), "spec {spec:?}");
        }
    }

    #[test]
    fn invalid_spec_names_offending_field() {
        let mut store = ParamStore::<f32>::new();
        let bad = ConvSpec { kernel: 4, ..ConvSpec::plain(8, 8, 3, 1) };
        let err = build_conv(bad, &mut store, "conv", &mut rng()).unwrap_err();
        assert!(err.to_string().contains("kernel"), "{err}");
        let bad = ConvSpec { stride: 3, ..ConvSpec::plain(8, 8, 3, 1) };
        let err = build_conv(bad, &mut store, "conv", &mut rng()).unwrap_err();
        assert!(err.to_string().contains("stride"), "{err}");
    }

    #[test]
    fn same_padding_shape_law() {
        let mut r = rng();
        for _ in 0..20 {
            let spec = ConvSpec {
                in_channels: 3,
                out_channels: 4,
                kernel: [1usize, 3, 5, 7][r.random_range(0..4)],
                stride: [1, 2][r.random_range(0..2)],
                depthwise_separable: r.random::<bool>(),
                normalization: Normalization::None,
                activation: Activation::None,
            };
            let h = r.random_range(4..33);
            let w = r.random_range(4..33);
            let mut store = ParamStore::<f32>::new();
            let unit = build_conv(spec, &mut store, "conv", &mut r).unwrap();
            let mut tape = Tape::new(true);
            let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, h, w])));
            let y = unit.forward(&mut store, &mut tape, x);
            let s = tape.value(y).shape().to_vec();
            let expect = |n: usize| n.div_ceil(spec.stride);
            assert_eq!(s, vec![1, 4, expect(h), expect(w)], "spec {spec:?} in {h}x{w}");
        }
    }

    #[test]
    fn one_by_one_conv_preserves_spatial_dims() {
        let mut store = ParamStore::<f32>::new();
        let unit = build_conv(ConvSpec::plain(6, 6, 1, 1), &mut store, "conv", &mut rng()).unwrap();
        let mut tape = Tape::new(true);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 6, 9, 11]), |ix| {
            (ix[1] as f32 * 0.3) - (ix[2] + ix[3]) as f32 * 0.01
        });
        let x = tape.constant(x0);
        let y = unit.forward(&mut store, &mut tape, x);
        assert_eq!(tape.value(y).shape(), &[1, 6, 9, 11]);
    }

    #[test]
    fn ds_conv_k7_identity_pointwise_constant_input() {
        let mut store = ParamStore::<f32>::new();
        let spec = ConvSpec {
            in_channels: 4,
            out_channels: 4,
            kernel: 7,
            stride: 1,
            depthwise_separable: true,
            normalization: Normalization::None,
            activation: Activation::None,
        };
        let unit = build_conv(spec, &mut store, "conv", &mut rng()).unwrap();
        // Pointwise stage = identity.
        let pw = unit.pointwise_param().unwrap();
        let mut ident = ArrayD::<f32>::zeros(IxDyn(&[4, 4, 1, 1]));
        for c in 0..4 {
            ident[[c, c, 0, 0]] = 1.0;
        }
        store.value_mut(pw).assign(&ident);

        let mut tape = Tape::new(true);
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[1, 4, 16, 16]), 0.7f32));
        let y = unit.forward(&mut store, &mut tape, x);
        let out = tape.value(y);
        // Interior positions see the full kernel support, so the filtered
        // constant field stays constant per channel there.
        for c in 0..4 {
            let v = out[[0, c, 8, 8]];
            for i in 3..13 {
                for j in 3..13 {
                    assert!((out[[0, c, i, j]] - v).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn ds_conv_is_linear_without_norm_or_activation() {
        let mut r = rng();
        let spec = ConvSpec {
            in_channels: 5,
            out_channels: 7,
            kernel: 5,
            stride: 1,
            depthwise_separable: true,
            normalization: Normalization::None,
            activation: Activation::None,
        };
        let mut store = ParamStore::<f32>::new();
        let unit = build_conv(spec, &mut store, "conv", &mut r).unwrap();
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 5, 8, 8]), |_| r.random::<f32>() - 0.5);
        let a = 3.25f32;

        let mut t1 = Tape::new(true);
        let x = t1.constant(x0.clone());
        let y1 = unit.forward(&mut store, &mut t1, x);
        let mut t2 = Tape::new(true);
        let xs = t2.constant(x0.mapv(|e| a * e));
        let y2 = unit.forward(&mut store, &mut t2, xs);

        let scaled = t1.value(y1).mapv(|e| a * e);
        let err = (&scaled - &t2.value(y2).to_owned()).iter().fold(0f32, |m, &d| m.max(d.abs()));
        assert!(err < 1e-4, "linearity violated: {err}");
    }

    #[test]
    fn backbone_desk_shapes_and_determinism() {
        let spec = BackboneSpec::desk();
        let mut store = ParamStore::<f32>::new();
        let bb = build_backbone(&spec, &mut store, "backbone", &mut rng()).unwrap();
        let mut r = rng();
        let img = ArrayD::from_shape_fn(IxDyn(&[1, 3, 256, 256]), |_| r.random::<f32>());

        let mut tape = Tape::inference();
        let x = tape.constant(img.clone());
        let [c3, c4, c5] = bb.forward(&mut store, &mut tape, x).unwrap();
        assert_eq!(tape.value(c3).shape(), &[1, 32, 32, 32]);
        assert_eq!(tape.value(c4).shape(), &[1, 64, 16, 16]);
        assert_eq!(tape.value(c5).shape(), &[1, 128, 8, 8]);

        // Bit-identical repeat.
        let mut tape2 = Tape::inference();
        let x2 = tape2.constant(img);
        let [d3, _, _] = bb.forward(&mut store, &mut tape2, x2).unwrap();
        assert_eq!(tape.value(c3).as_slice_memory_order(), tape2.value(d3).as_slice_memory_order());
    }

    #[test]
    fn backbone_paper_shapes() {
        let spec = BackboneSpec::paper();
        let mut store = ParamStore::<f32>::new();
        let bb = build_backbone(&spec, &mut store, "backbone", &mut rng()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 512, 704])));
        let [c3, c4, c5] = bb.forward(&mut store, &mut tape, x).unwrap();
        assert_eq!(tape.value(c3).shape(), &[1, 128, 64, 88]);
        assert_eq!(tape.value(c4).shape(), &[1, 256, 32, 44]);
        assert_eq!(tape.value(c5).shape(), &[1, 512, 16, 22]);
    }

    #[test]
    fn backbone_rejects_indivisible_input() {
        let spec = BackboneSpec::desk();
        let mut store = ParamStore::<f32>::new();
        let bb = build_backbone(&spec, &mut store, "backbone", &mut rng()).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 250, 256])));
        let err = bb.forward(&mut store, &mut tape, x).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn backbone_batch_independence() {
        let spec = BackboneSpec::desk();
        let mut store = ParamStore::<f32>::new();
        let bb = build_backbone(&spec, &mut store, "backbone", &mut rng()).unwrap();
        let mut r = rng();
        let one = ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| r.random::<f32>());
        let mut batch = ArrayD::zeros(IxDyn(&[4, 3, 64, 64]));
        for b in 0..4 {
            batch.index_axis_mut(ndarray::Axis(0), b).assign(&one.index_axis(ndarray::Axis(0), 0));
        }
        let mut tape = Tape::inference();
        let x = tape.constant(batch);
        let maps = bb.forward(&mut store, &mut tape, x).unwrap();
        for m in maps {
            let v = tape.value(m);
            let first = v.index_axis(ndarray::Axis(0), 0).to_owned();
            for b in 1..4 {
                let s = v.index_axis(ndarray::Axis(0), b);
                let diff =
                    (&first - &s).iter().fold(0f32, |mx, &d| mx.max(d.abs()));
                assert!(diff < 1e-6, "batch slice {b} differs by {diff}");
            }
        }
    }

    #[test]
    fn count_parameters_reports() {
        // Single standard conv 256->256 k3, no norm.
        let mut store = ParamStore::<f32>::new();
        build_conv(ConvSpec::plain(256, 256, 3, 1), &mut store, "conv", &mut rng()).unwrap();
        let report = count_parameters(&store);
        assert_eq!(report.total_params, 589_824);
        assert_eq!(report.model_size_bytes, 2_359_296);
        assert_eq!(report.per_module_counts["conv"], 589_824);

        // Empty model.
        let empty = ParamStore::<f32>::new();
        let report = count_parameters(&empty);
        assert_eq!(report.total_params, 0);

        // Re-invocation yields identical counts.
        let again = count_parameters(&empty);
        assert_eq!(report, again);
    }
}
