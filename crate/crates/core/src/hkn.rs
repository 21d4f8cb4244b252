//! Heterogeneous knowledge neck: a five-level feature pyramid (P3-P7) with
//! coordinate attention on the lateral paths and a configurable smoothing
//! conv (standard or depthwise-separable) after top-down fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_nn::{build_conv, Activation, Conv2dLayer, ConvSpec, ConvUnit, Normalization};
use crate::error::{Error, Result};
use crate::fca::{Fca, FcaSpec};
use crate::nn::{Elem, ParamStore, Tape, Tid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    DsConvK3,
    DsConvK5,
    DsConvK7,
    StandardK3,
    None,
}

impl Smoothing {
    fn kernel(self) -> Option<(usize, bool)> {
        match self {
            Smoothing::DsConvK3 => Some((3, true)),
            Smoothing::DsConvK5 => Some((5, true)),
            Smoothing::DsConvK7 => Some((7, true)),
            Smoothing::StandardK3 => Some((3, false)),
            Smoothing::None => None,
        }
    }
}

/// Pyramid strides available to the neck, one per level starting at P3.
pub const PYRAMID_STRIDES: [usize; 5] = [8, 16, 32, 64, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeckSpec {
    pub out_channels: usize,
    /// Number of pyramid levels starting at P3; 5 is the standard P3-P7
    /// pyramid, 3 and 4 exist for the ablation grid.
    pub levels: usize,
    pub fca_enabled: bool,
    pub smoothing: Smoothing,
}

impl NeckSpec {
    /// P3-P7, attention on, depthwise-separable k7 smoothing.
    pub fn desk() -> Self {
        Self { out_channels: 64, levels: 5, fca_enabled: true, smoothing: Smoothing::DsConvK7 }
    }

    pub fn paper() -> Self {
        Self { out_channels: 256, levels: 5, fca_enabled: true, smoothing: Smoothing::DsConvK7 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.out_channels == 0 {
            return Err(Error::InvalidSpec {
                context: "NeckSpec",
                field: "out_channels",
                reason: "must be positive".into(),
            });
        }
        if !(3..=5).contains(&self.levels) {
            return Err(Error::InvalidSpec {
                context: "NeckSpec",
                field: "levels",
                reason: format!("must be 3, 4 or 5, got {}", self.levels),
            });
        }
        Ok(())
    }

    pub fn strides(&self) -> &'static [usize] {
        &PYRAMID_STRIDES[..self.levels]
    }

    /// Table-style row label ("P3-P7+FCA+DS conv7x7").
    pub fn label(&self) -> String {
        let mut s = format!("P3-P{}", 2 + self.levels);
        if self.fca_enabled {
            s.push_str("+FCA");
        }
        match self.smoothing {
            Smoothing::DsConvK3 => s.push_str("+DS conv3x3"),
            Smoothing::DsConvK5 => s.push_str("+DS conv5x5"),
            Smoothing::DsConvK7 => s.push_str("+DS conv7x7"),
            Smoothing::StandardK3 => {}
            Smoothing::None => s.push_str("+no-smooth"),
        }
        s
    }

    /// Closed-form parameter count given backbone output channels.
    pub fn param_count(&self, in_channels: [usize; 3]) -> usize {
        let c = self.out_channels;
        let mut total = 0;
        for ic in in_channels {
            total += ic * c + c; // lateral 1x1 with bias
        }
        if self.fca_enabled {
            total += 3 * FcaSpec::new(c).param_count();
        }
        if let Some((k, ds)) = self.smoothing.kernel() {
            let per = if ds { k * k * c + c * c } else { k * k * c * c + c };
            total += 3 * per;
        }
        if self.levels >= 4 {
            total += 9 * c * c + c; // p6
        }
        if self.levels >= 5 {
            total += 9 * c * c + c; // p7
        }
        total
    }
}

/// Multi-level features produced by the neck.
pub struct PyramidFeatures {
    pub maps: Vec<Tid>,
    pub strides: Vec<usize>,
}

/// Built neck.
#[derive(Debug)]
pub struct Neck {
    pub spec: NeckSpec,
    pub in_channels: [usize; 3],
    laterals: Vec<Conv2dLayer>,
    fca: Vec<Fca>,
    smoothing: Vec<SmoothingConv>,
    p6: Option<Conv2dLayer>,
    p7: Option<Conv2dLayer>,
}

#[derive(Debug)]
enum SmoothingConv {
    Unit(ConvUnit),
    Plain(Conv2dLayer),
    None,
}

pub fn build_neck<F: Elem, R: Rng>(
    spec: NeckSpec,
    in_channels: [usize; 3],
    store: &mut ParamStore<F>,
    prefix: &str,
    rng: &mut R,
) -> Result<Neck> {
    spec.validate()?;
    let c = spec.out_channels;

    let mut laterals = Vec::new();
    for (i, &ic) in in_channels.iter().enumerate() {
        laterals.push(Conv2dLayer::new(
            store,
            &format!("{prefix}.lateral{i}"),
            ic,
            c,
            1,
            1,
            true,
            rng,
        ));
    }

    let mut fca = Vec::new();
    if spec.fca_enabled {
        for i in 0..3 {
            fca.push(Fca::new(FcaSpec::new(c), store, &format!("{prefix}.fca{i}"), rng));
        }
    }

    let mut smoothing = Vec::new();
    for i in 0..3 {
        smoothing.push(match spec.smoothing.kernel() {
            Some((k, true)) => SmoothingConv::Unit(build_conv(
                ConvSpec {
                    in_channels: c,
                    out_channels: c,
                    kernel: k,
                    stride: 1,
                    depthwise_separable: true,
                    normalization: Normalization::None,
                    activation: Activation::None,
                },
                store,
                &format!("{prefix}.smooth{i}"),
                rng,
            )?),
            Some((k, false)) => SmoothingConv::Plain(Conv2dLayer::new(
                store,
                &format!("{prefix}.smooth{i}"),
                c,
                c,
                k,
                1,
                true,
                rng,
            )),
            None => SmoothingConv::None,
        });
    }

    let p6 = (spec.levels >= 4)
        .then(|| Conv2dLayer::new(store, &format!("{prefix}.p6"), c, c, 3, 2, true, rng));
    let p7 = (spec.levels >= 5)
        .then(|| Conv2dLayer::new(store, &format!("{prefix}.p7"), c, c, 3, 2, true, rng));

    Ok(Neck { spec, in_channels, laterals, fca, smoothing, p6, p7 })
}

impl Neck {
    /// `[C3, C4, C5]` -> pyramid of `spec.levels` maps.
    pub fn forward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        inputs: &[Tid],
    ) -> Result<PyramidFeatures> {
        if inputs.len() != 3 {
            return Err(Error::Shape {
                context: "neck",
                reason: format!("expected 3 input maps, got {}", inputs.len()),
            });
        }
        for (i, &t) in inputs.iter().enumerate() {
            let s = tape.value(t).shape().to_vec();
            if s.len() != 4 || s[1] != self.in_channels[i] {
                return Err(Error::Shape {
                    context: "neck",
                    reason: format!(
                        "input {i}: expected (B, {}, H, W), got {s:?}",
                        self.in_channels[i]
                    ),
                });
            }
        }

        // Lateral projections, optional coordinate attention.
        let mut lat = Vec::with_capacity(3);
        for i in 0..3 {
            let mut x = self.laterals[i].forward(store, tape, inputs[i]);
            if self.spec.fca_enabled {
                x = self.fca[i].forward(store, tape, x)?;
            }
            lat.push(x);
        }

        // Top-down fusion: nearest x2 upsample + add.
        let mut fused = vec![lat[2]];
        for i in (0..2).rev() {
            let up = tape.upsample_nearest_x2(fused[fused.len() - 1]);
            fused.push(tape.add(lat[i], up));
        }
        fused.reverse(); // [P3, P4, P5] pre-smoothing

        let mut maps = Vec::with_capacity(self.spec.levels);
        for (i, &f) in fused.iter().enumerate() {
            maps.push(match &self.smoothing[i] {
                SmoothingConv::Unit(u) => u.forward(store, tape, f),
                SmoothingConv::Plain(c) => c.forward(store, tape, f),
                SmoothingConv::None => f,
            });
        }

        if let Some(p6) = &self.p6 {
            let t = p6.forward(store, tape, maps[2]);
            maps.push(t);
        }
        if let Some(p7) = &self.p7 {
            let r = tape.relu(maps[3]);
            let t = p7.forward(store, tape, r);
            maps.push(t);
        }

        Ok(PyramidFeatures { maps, strides: self.spec.strides().to_vec() })
    }
}

/// The neck design grid: pyramid depth sweep, smoothing-kernel sweep, and
/// the attention on/off pairings.
pub fn neck_ablation_variants(base: NeckSpec) -> Vec<NeckSpec> {
    let c = base.out_channels;
    let mk = |levels, fca_enabled, smoothing| NeckSpec {
        out_channels: c,
        levels,
        fca_enabled,
        smoothing,
    };
    vec![
        mk(3, false, Smoothing::StandardK3),
        mk(4, false, Smoothing::StandardK3),
        mk(5, false, Smoothing::StandardK3),
        mk(5, false, Smoothing::DsConvK3),
        mk(5, false, Smoothing::DsConvK5),
        mk(5, false, Smoothing::DsConvK7),
        mk(5, true, Smoothing::StandardK3),
        mk(5, true, Smoothing::DsConvK7),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_map(shape: [usize; 4], r: &mut ChaCha8Rng) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(&shape), |_| r.random::<f32>() - 0.5)
    }

    fn desk_inputs(tape: &mut Tape<f32>, r: &mut ChaCha8Rng) -> Vec<crate::nn::Tid> {
        vec![
            tape.constant(rand_map([1, 32, 32, 32], r)),
            tape.constant(rand_map([1, 64, 16, 16], r)),
            tape.constant(rand_map([1, 128, 8, 8], r)),
        ]
    }

    #[test]
    fn pyramid_shapes_for_256_input() {
        let mut r = rng(1);
        let mut store = ParamStore::<f32>::new();
        let neck = build_neck(NeckSpec::desk(), [32, 64, 128], &mut store, "neck", &mut r).unwrap();
        let mut tape = Tape::inference();
        let inputs = desk_inputs(&mut tape, &mut r);
        let pyr = neck.forward(&mut store, &mut tape, &inputs).unwrap();
        assert_eq!(pyr.maps.len(), 5);
        assert_eq!(pyr.strides, vec![8, 16, 32, 64, 128]);
        let sizes: Vec<usize> = pyr.maps.iter().map(|&m| tape.value(m).shape()[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        for &m in &pyr.maps {
            assert_eq!(tape.value(m).shape()[1], 64);
        }
    }

    #[test]
    fn wrong_input_count_is_shape_error() {
        let mut r = rng(2);
        let mut store = ParamStore::<f32>::new();
        let neck = build_neck(NeckSpec::desk(), [32, 64, 128], &mut store, "neck", &mut r).unwrap();
        let mut tape = Tape::inference();
        let x = tape.constant(rand_map([1, 32, 32, 32], &mut r));
        assert!(neck.forward(&mut store, &mut tape, &[x, x]).is_err());
    }

    /// Independent loop-based FPN: lateral 1x1 (+bias), top-down nearest
    /// upsample + add, 3x3 smoothing (+bias), P6 = s2 conv on P5,
    /// P7 = s2 conv on relu(P6).
    struct RefFpn {
        lat_w: Vec<Array4<f32>>,
        lat_b: Vec<Array1<f32>>,
        smooth_w: Vec<Array4<f32>>,
        smooth_b: Vec<Array1<f32>>,
        p6_w: Array4<f32>,
        p6_b: Array1<f32>,
        p7_w: Array4<f32>,
        p7_b: Array1<f32>,
    }

    fn conv_ref(x: &Array4<f32>, w: &Array4<f32>, b: &Array1<f32>, stride: usize) -> Array4<f32> {
        let (bs, cin, h, wd) = x.dim();
        let (cout, cin2, k, _) = w.dim();
        assert_eq!(cin, cin2);
        let pad = (k as isize - 1) / 2;
        let (ho, wo) = (h.div_ceil(stride), wd.div_ceil(stride));
        let mut out = Array4::<f32>::zeros((bs, cout, ho, wo));
        for bi in 0..bs {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b[co];
                        for ci in 0..cin {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[co, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, co, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    fn upsample_ref(x: &Array4<f32>) -> Array4<f32> {
        let (b, c, h, w) = x.dim();
        Array4::from_shape_fn((b, c, 2 * h, 2 * w), |(bi, ci, i, j)| x[[bi, ci, i / 2, j / 2]])
    }

    impl RefFpn {
        fn extract(neck: &Neck, store: &ParamStore<f32>) -> Self {
            let get4 = |id| {
                store
                    .value(id)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix4>()
                    .unwrap()
            };
            let get1 = |id| {
                store
                    .value(id)
                    .to_owned()
                    .into_dimensionality::<ndarray::Ix1>()
                    .unwrap()
            };
            let smooth = |sc: &SmoothingConv| match sc {
                SmoothingConv::Plain(c) => (get4(c.weight), get1(c.bias.unwrap())),
                _ => panic!("reference FPN expects standard smoothing"),
            };
            RefFpn {
                lat_w: neck.laterals.iter().map(|l| get4(l.weight)).collect(),
                lat_b: neck.laterals.iter().map(|l| get1(l.bias.unwrap())).collect(),
                smooth_w: neck.smoothing.iter().map(|s| smooth(s).0).collect(),
                smooth_b: neck.smoothing.iter().map(|s| smooth(s).1).collect(),
                p6_w: get4(neck.p6.as_ref().unwrap().weight),
                p6_b: get1(neck.p6.as_ref().unwrap().bias.unwrap()),
                p7_w: get4(neck.p7.as_ref().unwrap().weight),
                p7_b: get1(neck.p7.as_ref().unwrap().bias.unwrap()),
            }
        }

        fn forward(&self, inputs: &[Array4<f32>]) -> Vec<Array4<f32>> {
            let lat: Vec<Array4<f32>> = (0..3)
                .map(|i| conv_ref(&inputs[i], &self.lat_w[i], &self.lat_b[i], 1))
                .collect();
            let p5 = lat[2].clone();
            let p4 = &lat[1] + &upsample_ref(&p5);
            let p3 = &lat[0] + &upsample_ref(&p4);
            let fused = [p3, p4, p5];
            let mut out: Vec<Array4<f32>> = (0..3)
                .map(|i| conv_ref(&fused[i], &self.smooth_w[i], &self.smooth_b[i], 1))
                .collect();
            let p6 = conv_ref(&out[2], &self.p6_w, &self.p6_b, 2);
            let p7 = conv_ref(&p6.mapv(|v| v.max(0.0)), &self.p7_w, &self.p7_b, 2);
            out.push(p6);
            out.push(p7);
            out
        }
    }

    #[test]
    fn plain_config_matches_reference_fpn() {
        let mut r = rng(3);
        let spec = NeckSpec {
            out_channels: 16,
            levels: 5,
            fca_enabled: false,
            smoothing: Smoothing::StandardK3,
        };
        let mut store = ParamStore::<f32>::new();
        let neck = build_neck(spec, [8, 12, 16], &mut store, "neck", &mut r).unwrap();

        let c3 = rand_map([2, 8, 16, 16], &mut r);
        let c4 = rand_map([2, 12, 8, 8], &mut r);
        let c5 = rand_map([2, 16, 4, 4], &mut r);

        let mut tape = Tape::inference();
        let inputs =
            vec![tape.constant(c3.clone()), tape.constant(c4.clone()), tape.constant(c5.clone())];
        let pyr = neck.forward(&mut store, &mut tape, &inputs).unwrap();

        let refneck = RefFpn::extract(&neck, &store);
        let to4 = |a: ArrayD<f32>| a.into_dimensionality::<ndarray::Ix4>().unwrap();
        let expect = refneck.forward(&[to4(c3), to4(c4), to4(c5)]);
        for (lvl, (&got, want)) in pyr.maps.iter().zip(expect.iter()).enumerate() {
            let g = tape.value(got);
            let mut worst = 0f32;
            for (a, b) in g.iter().zip(want.iter()) {
                worst = worst.max((a - b).abs());
            }
            assert!(worst < 1e-6, "level {lvl} differs from reference FPN by {worst}");
        }
    }

    #[test]
    fn ds_k7_has_fewer_params_than_standard_k3() {
        let mut r = rng(4);
        let base = NeckSpec {
            out_channels: 256,
            levels: 5,
            fca_enabled: true,
            smoothing: Smoothing::StandardK3,
        };
        let ds = NeckSpec { smoothing: Smoothing::DsConvK7, ..base };
        let ins = [128usize, 256, 512];

        let mut s1 = ParamStore::<f32>::new();
        build_neck(base, ins, &mut s1, "neck", &mut r).unwrap();
        let mut s2 = ParamStore::<f32>::new();
        build_neck(ds, ins, &mut s2, "neck", &mut r).unwrap();
        assert!(s2.total_trainable() < s1.total_trainable());
        assert_eq!(s1.total_trainable(), base.param_count(ins));
        assert_eq!(s2.total_trainable(), ds.param_count(ins));
    }

    #[test]
    fn smoothing_kernel_changes_params_by_closed_form_delta() {
        let ins = [32usize, 64, 128];
        let c = 64usize;
        let mk = |s| NeckSpec { out_channels: c, levels: 5, fca_enabled: false, smoothing: s };
        let mut r = rng(5);
        let count = |spec: NeckSpec, r: &mut ChaCha8Rng| {
            let mut store = ParamStore::<f32>::new();
            build_neck(spec, ins, &mut store, "neck", r).unwrap();
            store.total_trainable()
        };
        let k3 = count(mk(Smoothing::DsConvK3), &mut r);
        let k5 = count(mk(Smoothing::DsConvK5), &mut r);
        let k7 = count(mk(Smoothing::DsConvK7), &mut r);
        // Three smoothing convs; depthwise stage grows by (k'^2 - k^2) * c.
        assert_eq!(k5 - k3, 3 * (25 - 9) * c);
        assert_eq!(k7 - k5, 3 * (49 - 25) * c);
    }

    #[test]
    fn ablation_variants_match_design_grid() {
        let variants = neck_ablation_variants(NeckSpec::desk());
        assert_eq!(variants.len(), 8);
        // Deterministic and duplicate-free.
        let again = neck_ablation_variants(NeckSpec::desk());
        assert_eq!(variants, again);
        for (i, a) in variants.iter().enumerate() {
            for b in &variants[i + 1..] {
                assert_ne!(a, b);
            }
        }
        let labels: Vec<String> = variants.iter().map(|v| v.label()).collect();
        assert_eq!(
            labels,
            vec![
                "P3-P5",
                "P3-P6",
                "P3-P7",
                "P3-P7+DS conv3x3",
                "P3-P7+DS conv5x5",
                "P3-P7+DS conv7x7",
                "P3-P7+FCA",
                "P3-P7+FCA+DS conv7x7",
            ]
        );
    }

    #[test]
    fn every_variant_builds_and_emits_named_levels() {
        let mut r = rng(6);
        for spec in neck_ablation_variants(NeckSpec {
            out_channels: 16,
            levels: 5,
            fca_enabled: true,
            smoothing: Smoothing::DsConvK7,
        }) {
            let mut store = ParamStore::<f32>::new();
            let neck = build_neck(spec, [8, 12, 16], &mut store, "neck", &mut r).unwrap();
            let mut tape = Tape::inference();
            let inputs = vec![
                tape.constant(rand_map([1, 8, 16, 16], &mut r)),
                tape.constant(rand_map([1, 12, 8, 8], &mut r)),
                tape.constant(rand_map([1, 16, 4, 4], &mut r)),
            ];
            let pyr = neck.forward(&mut store, &mut tape, &inputs).unwrap();
            assert_eq!(pyr.maps.len(), spec.levels, "{}", spec.label());
            assert_eq!(pyr.strides.len(), spec.levels);
            // Stride doubling and shape conservation at every level.
            let mut prev = None;
            for (li, &m) in pyr.maps.iter().enumerate() {
                let s = tape.value(m).shape().to_vec();
                assert_eq!(s[1], 16);
                if let Some(p) = prev {
                    assert_eq!(s[2], usize::div_ceil(p, 2), "level {li} of {}", spec.label());
                }
                prev = Some(s[2]);
                assert_eq!(pyr.strides[li], PYRAMID_STRIDES[li]);
            }
        }
        let _ = Array2::<f32>::zeros((1, 1));
    }
}
