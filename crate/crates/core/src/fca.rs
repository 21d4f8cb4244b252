//! Feature coordinate attention: directional pooling encodes position along
//! height and width, a shared bottleneck captures cross-channel
//! dependencies, and the input map is reweighted by per-row and per-column
//! sigmoid gates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_nn::{BatchNorm, Conv2dLayer};
use crate::error::{Error, Result};
use crate::nn::{Elem, ParamStore, Tape, Tid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FcaSpec {
    pub channels: usize,
    pub reduction: usize,
    pub min_bottleneck: usize,
}

impl FcaSpec {
    pub fn new(channels: usize) -> Self {
        Self { channels, reduction: 32, min_bottleneck: 8 }
    }

    pub fn bottleneck(&self) -> usize {
        (self.channels / self.reduction).max(self.min_bottleneck).max(1)
    }

    /// Closed-form trainable-value count: the three 1x1 convs plus the
    /// bottleneck norm. `f_h`/`f_w` carry biases, `f1` does not (norm
    /// follows it).
    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let mid = self.bottleneck();
        let f1 = c * mid;
        let norm = 2 * mid;
        let fh = mid * c + c;
        let fw = mid * c + c;
        f1 + norm + fh + fw
    }
}

/// Height/width mean encodings of a feature map.
pub struct DirectionalEncoding {
    /// `(B, C, H, 1)`
    pub z_h: Tid,
    /// `(B, C, 1, W)`
    pub z_w: Tid,
}

/// Per-row and per-column means over the spatial axes.
pub fn directional_pool<F: Elem>(tape: &mut Tape<F>, x: Tid) -> Result<DirectionalEncoding> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape {
            context: "directional_pool",
            reason: format!("expected rank-4 input, got {shape:?}"),
        });
    }
    if shape[2] == 0 || shape[3] == 0 {
        return Err(Error::Shape {
            context: "directional_pool",
            reason: format!("zero-size spatial dim in {shape:?}"),
        });
    }
    let z_h = tape.mean_axis_keep(x, 3);
    let z_w = tape.mean_axis_keep(x, 2);
    Ok(DirectionalEncoding { z_h, z_w })
}

/// Built feature-coordinate-attention block.
#[derive(Debug)]
pub struct Fca {
    pub spec: FcaSpec,
    f1: Conv2dLayer,
    bn: BatchNorm,
    f_h: Conv2dLayer,
    f_w: Conv2dLayer,
}

impl Fca {
    pub fn new<F: Elem, R: Rng>(
        spec: FcaSpec,
        store: &mut ParamStore<F>,
        prefix: &str,
        rng: &mut R,
    ) -> Self {
        let mid = spec.bottleneck();
        let f1 = Conv2dLayer::new(store, &format!("{prefix}.f1"), spec.channels, mid, 1, 1, false, rng);
        let bn = BatchNorm::new(store, &format!("{prefix}.bn"), mid);
        let f_h = Conv2dLayer::new(store, &format!("{prefix}.f_h"), mid, spec.channels, 1, 1, true, rng);
        let f_w = Conv2dLayer::new(store, &format!("{prefix}.f_w"), mid, spec.channels, 1, 1, true, rng);
        Self { spec, f1, bn, f_h, f_w }
    }

    /// `out[b,c,i,j] = x[b,c,i,j] * g_h[b,c,i] * g_w[b,c,j]`.
    ///
    /// Pipeline: directional pool -> concat along the spatial axis (z_w
    /// transposed) -> 1x1 conv -> batch-norm -> hard-swish -> split -> 1x1
    /// convs -> sigmoid gates.
    pub fn forward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        x: Tid,
    ) -> Result<Tid> {
        let shape = tape.value(x).shape().to_vec();
        if shape.len() != 4 || shape[1] != self.spec.channels {
            return Err(Error::Shape {
                context: "fca_forward",
                reason: format!("expected (B, {}, H, W), got {shape:?}", self.spec.channels),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let enc = directional_pool(tape, x)?;
        let z_w_t = tape.permute(enc.z_w, &[0, 1, 3, 2]); // (B, C, W, 1)
        let cat = tape.concat(2, &[enc.z_h, z_w_t]); // (B, C, H+W, 1)

        let mid = self.f1.forward(store, tape, cat);
        let mid = self.bn.forward(store, tape, mid);
        let mid = tape.hard_swish(mid);

        let part_h = tape.slice_axis(mid, 2, 0, h);
        let part_w = tape.slice_axis(mid, 2, h, h + w);
        let gh_logit = self.f_h.forward(store, tape, part_h);
        let g_h = tape.sigmoid(gh_logit); // (B, C, H, 1)
        let gw_logit = self.f_w.forward(store, tape, part_w);
        let g_w_col = tape.sigmoid(gw_logit); // (B, C, W, 1)
        let g_w = tape.permute(g_w_col, &[0, 1, 3, 2]); // (B, C, 1, W)

        let xh = tape.mul_broadcast(x, g_h);
        Ok(tape.mul_broadcast(xh, g_w))
    }

    /// Zeroes the gate convs (weights and biases) so both gates are 0.5
    /// everywhere. Test hook.
    pub fn zero_gates<F: Elem>(&self, store: &mut ParamStore<F>) {
        store.value_mut(self.f_h.weight).fill(F::zero());
        store.value_mut(self.f_w.weight).fill(F::zero());
        if let Some(b) = self.f_h.bias {
            store.value_mut(b).fill(F::zero());
        }
        if let Some(b) = self.f_w.bias {
            store.value_mut(b).fill(F::zero());
        }
    }
}

/// Step-by-step scalar reference of the attention pipeline, kept as an
/// independent oracle for the tensor implementation.
pub mod reference {
    use ndarray::{Array1, Array2, Array4};

    use super::Fca;
    use crate::nn::{Elem, ParamStore};

    pub struct FcaWeights<F> {
        pub w1: Array2<F>,     // (mid, C)
        pub gamma: Array1<F>,  // (mid,)
        pub beta: Array1<F>,   // (mid,)
        pub wh: Array2<F>,     // (C, mid)
        pub bh: Array1<F>,     // (C,)
        pub ww: Array2<F>,     // (C, mid)
        pub bw: Array1<F>,     // (C,)
        pub eps: F,
    }

    pub fn extract_weights<F: Elem>(fca: &Fca, store: &ParamStore<F>) -> FcaWeights<F> {
        let to2 = |id| {
            let v = store.value(id).to_owned();
            let s = v.shape().to_vec();
            crate::nn::tape::reshape_std(v, &[s[0], s[1]])
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let to1 = |id| {
            store.value(id).to_owned().into_dimensionality::<ndarray::Ix1>().unwrap()
        };
        FcaWeights {
            w1: to2(fca.f1.weight),
            gamma: to1(fca.bn.gamma),
            beta: to1(fca.bn.beta),
            wh: to2(fca.f_h.weight),
            bh: to1(fca.f_h.bias.unwrap()),
            ww: to2(fca.f_w.weight),
            bw: to1(fca.f_w.bias.unwrap()),
            eps: F::lit(fca.bn.eps),
        }
    }

    /// Loop-based forward in training mode (batch statistics in the norm).
    pub fn fca_forward_scalar<F: Elem>(x: &Array4<F>, w: &FcaWeights<F>) -> Array4<F> {
        let (b, c, h, wd) = x.dim();
        let mid = w.w1.dim().0;
        let sigmoid = |v: F| F::one() / (F::one() + (-v).exp());
        let hswish = |v: F| {
            let r = (v + F::lit(3.0)).max(F::zero()).min(F::lit(6.0));
            v * r / F::lit(6.0)
        };

        // Directional means.
        let mut zh = ndarray::Array3::<F>::zeros((b, c, h));
        let mut zw = ndarray::Array3::<F>::zeros((b, c, wd));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    let mut acc = F::zero();
                    for j in 0..wd {
                        acc = acc + x[[bi, ci, i, j]];
                    }
                    zh[[bi, ci, i]] = acc / F::lit(wd as f64);
                }
                for j in 0..wd {
                    let mut acc = F::zero();
                    for i in 0..h {
                        acc = acc + x[[bi, ci, i, j]];
                    }
                    zw[[bi, ci, j]] = acc / F::lit(h as f64);
                }
            }
        }

        // Concatenate along the spatial axis, 1x1 conv to the bottleneck.
        let p = h + wd;
        let mut pre = ndarray::Array3::<F>::zeros((b, mid, p));
        for bi in 0..b {
            for m in 0..mid {
                for pi in 0..p {
                    let mut acc = F::zero();
                    for ci in 0..c {
                        let z = if pi < h { zh[[bi, ci, pi]] } else { zw[[bi, ci, pi - h]] };
                        acc = acc + w.w1[[m, ci]] * z;
                    }
                    pre[[bi, m, pi]] = acc;
                }
            }
        }

        // Batch norm over (batch, position) per bottleneck channel.
        let n = F::lit((b * p) as f64);
        let mut g = ndarray::Array3::<F>::zeros((b, mid, p));
        for m in 0..mid {
            let mut mean = F::zero();
            for bi in 0..b {
                for pi in 0..p {
                    mean = mean + pre[[bi, m, pi]];
                }
            }
            mean = mean / n;
            let mut var = F::zero();
            for bi in 0..b {
                for pi in 0..p {
                    let d = pre[[bi, m, pi]] - mean;
                    var = var + d * d;
                }
            }
            var = var / n;
            let istd = F::one() / (var + w.eps).sqrt();
            for bi in 0..b {
                for pi in 0..p {
                    let xn = (pre[[bi, m, pi]] - mean) * istd;
                    g[[bi, m, pi]] = hswish(w.gamma[m] * xn + w.beta[m]);
                }
            }
        }

        // Split, gate convs, sigmoid, reweight.
        let mut out = Array4::<F>::zeros((b, c, h, wd));
        for bi in 0..b {
            for ci in 0..c {
                for i in 0..h {
                    let mut ah = w.bh[ci];
                    for m in 0..mid {
                        ah = ah + w.wh[[ci, m]] * g[[bi, m, i]];
                    }
                    let gh = sigmoid(ah);
                    for j in 0..wd {
                        let mut aw = w.bw[ci];
                        for m in 0..mid {
                            aw = aw + w.ww[[ci, m]] * g[[bi, m, h + j]];
                        }
                        let gw = sigmoid(aw);
                        out[[bi, ci, i, j]] = x[[bi, ci, i, j]] * gh * gw;
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_grad, max_rel_err};
    use ndarray::{Array4, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand4(shape: [usize; 4], r: &mut ChaCha8Rng) -> ArrayD<f32> {
        ArrayD::from_shape_fn(IxDyn(&shape), |_| r.random::<f32>() * 2.0 - 1.0)
    }

    #[test]
    fn directional_pool_two_by_two() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let enc = directional_pool(&mut tape, x).unwrap();
        let zh = tape.value(enc.z_h);
        let zw = tape.value(enc.z_w);
        assert_eq!(zh.shape(), &[1, 1, 2, 1]);
        assert_eq!(zw.shape(), &[1, 1, 1, 2]);
        assert_eq!(zh[[0, 0, 0, 0]], 1.5);
        assert_eq!(zh[[0, 0, 1, 0]], 3.5);
        assert_eq!(zw[[0, 0, 0, 0]], 2.0);
        assert_eq!(zw[[0, 0, 0, 1]], 3.0);
    }

    #[test]
    fn directional_pool_constant_map() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 3, 4, 5]), 0.37f32));
        let enc = directional_pool(&mut tape, x).unwrap();
        for &v in tape.value(enc.z_h).iter() {
            assert!((v - 0.37).abs() < 1e-7);
        }
        for &v in tape.value(enc.z_w).iter() {
            assert!((v - 0.37).abs() < 1e-7);
        }
    }

    #[test]
    fn directional_pool_matches_loop_oracle() {
        let mut r = rng(11);
        for _ in 0..100 {
            let x0 = rand4([1, 3, 8, 8], &mut r);
            let mut tape = Tape::<f32>::inference();
            let x = tape.constant(x0.clone());
            let enc = directional_pool(&mut tape, x).unwrap();
            let zh = tape.value(enc.z_h);
            let zw = tape.value(enc.z_w);
            for c in 0..3 {
                for i in 0..8 {
                    let mut acc = 0.0f32;
                    for j in 0..8 {
                        acc += x0[[0, c, i, j]];
                    }
                    assert!((zh[[0, c, i, 0]] - acc / 8.0).abs() < 1e-6);
                }
                for j in 0..8 {
                    let mut acc = 0.0f32;
                    for i in 0..8 {
                        acc += x0[[0, c, i, j]];
                    }
                    assert!((zw[[0, c, 0, j]] - acc / 8.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn directional_pool_rejects_empty_spatial() {
        let mut tape = Tape::<f32>::inference();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 2, 0, 4])));
        assert!(directional_pool(&mut tape, x).is_err());
    }

    #[test]
    fn zeroed_gates_quarter_input() {
        let mut r = rng(12);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
        fca.zero_gates(&mut store);
        let x0 = rand4([2, 8, 5, 6], &mut r);
        let mut tape = Tape::new(true);
        let x = tape.constant(x0.clone());
        let y = fca.forward(&mut store, &mut tape, x).unwrap();
        let out = tape.value(y);
        for (o, i) in out.iter().zip(x0.iter()) {
            assert!((o - i * 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn output_magnitude_never_exceeds_input() {
        let mut r = rng(13);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(16), &mut store, "fca", &mut r);
        let x0 = rand4([2, 16, 7, 5], &mut r);
        let mut tape = Tape::new(true);
        let x = tape.constant(x0.clone());
        let y = fca.forward(&mut store, &mut tape, x).unwrap();
        for (o, i) in tape.value(y).iter().zip(x0.iter()) {
            assert!(o.abs() <= i.abs() + 1e-7);
        }
    }

    #[test]
    fn forward_matches_scalar_oracle() {
        let mut r = rng(14);
        for case in 0..20 {
            let mut store = ParamStore::<f32>::new();
            let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
            let x0 = rand4([2, 8, 4, 6], &mut r);
            let mut tape = Tape::new(true);
            let x = tape.constant(x0.clone());
            let y = fca.forward(&mut store, &mut tape, x).unwrap();

            let w = reference::extract_weights(&fca, &store);
            let x4 = x0.clone().into_dimensionality::<ndarray::Ix4>().unwrap();
            let expect = reference::fca_forward_scalar(&x4, &w);
            let got = tape.value(y);
            for (g, e) in got.iter().zip(expect.iter()) {
                assert!((g - e).abs() < 1e-5, "case {case}: {g} vs {e}");
            }
        }
    }

    #[test]
    fn attention_is_rank_one_per_channel() {
        let mut r = rng(15);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
        let x0 = rand4([1, 8, 5, 5], &mut r).mapv(|v| v + 2.5); // keep x away from 0
        let mut tape = Tape::new(true);
        let x = tape.constant(x0.clone());
        let y = fca.forward(&mut store, &mut tape, x).unwrap();
        let ratio = tape.value(y).to_owned() / &x0;
        // ratio[i][j] * ratio[k][l] == ratio[i][l] * ratio[k][j] for rank-1 maps
        for c in 0..8 {
            for i in 0..4 {
                for j in 0..4 {
                    let a = ratio[[0, c, i, j]] * ratio[[0, c, i + 1, j + 1]];
                    let b = ratio[[0, c, i, j + 1]] * ratio[[0, c, i + 1, j]];
                    assert!((a - b).abs() < 1e-5, "not rank-1 at c{c} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn row_permutation_permutes_gh_and_preserves_gw() {
        let mut r = rng(16);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
        let x0 = rand4([1, 8, 4, 6], &mut r).mapv(|v| v + 3.0);
        // Reversed rows.
        let mut xp = x0.clone();
        for i in 0..4 {
            xp.index_axis_mut(ndarray::Axis(2), i)
                .assign(&x0.index_axis(ndarray::Axis(2), 3 - i));
        }

        let run = |input: &ArrayD<f32>, store: &mut ParamStore<f32>| {
            let mut tape = Tape::new(true);
            let x = tape.constant(input.clone());
            let y = fca.forward(store, &mut tape, x).unwrap();
            tape.value(y).to_owned() / input
        };
        let ratio = run(&x0, &mut store);
        let ratio_p = run(&xp, &mut store);
        // Gate product at permuted rows must equal the original rows' product.
        for c in 0..8 {
            for i in 0..4 {
                for j in 0..6 {
                    let a = ratio[[0, c, i, j]];
                    let b = ratio_p[[0, c, 3 - i, j]];
                    assert!((a - b).abs() < 1e-5, "row equivariance broken at c{c} ({i},{j})");
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // f64 block on a 4x4 map; checks d(sum out)/dx and /d(f1 weights).
        let mut r = rng(17);
        let mut store = ParamStore::<f64>::new();
        let fca = Fca::new(FcaSpec::new(4), &mut store, "fca", &mut r);
        let x0 = ArrayD::from_shape_fn(IxDyn(&[1, 4, 4, 4]), |_| r.random::<f64>() * 2.0 - 1.0);

        let mut tape = Tape::new(true);
        let x = tape.constant_with_grad(x0.clone());
        let y = fca.forward(&mut store, &mut tape, x).unwrap();
        let loss = tape.mean_all(y);
        tape.backward(loss);
        let gx = tape.grad(x).unwrap().clone();
        tape.collect_param_grads(&mut store);
        let gw1 = store.grad(fca.f1.weight).clone();

        let nx = finite_diff_grad(
            |xv| {
                let mut t = Tape::new(true);
                let xt = t.constant(xv.clone());
                let y = fca.forward(&mut store, &mut t, xt).unwrap();
                let l = t.mean_all(y);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(&gx, &nx, 1e-4) < 1e-4, "dx mismatch");

        let w0 = store.value(fca.f1.weight).clone();
        let nw = finite_diff_grad(
            |wv| {
                store.value_mut(fca.f1.weight).assign(wv);
                let mut t = Tape::new(true);
                let xt = t.constant(x0.clone());
                let y = fca.forward(&mut store, &mut t, xt).unwrap();
                let l = t.mean_all(y);
                t.scalar(l)
            },
            &w0,
            1e-6,
        );
        store.value_mut(fca.f1.weight).assign(&w0);
        assert!(max_rel_err(&gw1, &nw, 1e-4) < 1e-4, "dW1 mismatch");
    }

    #[test]
    fn param_count_matches_closed_form() {
        for channels in [8usize, 64, 256] {
            let spec = FcaSpec::new(channels);
            let mut store = ParamStore::<f32>::new();
            Fca::new(spec, &mut store, "fca", &mut rng(18));
            assert_eq!(store.total_trainable(), spec.param_count(), "channels {channels}");
        }
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let mut r = rng(19);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
        let mut tape = Tape::new(true);
        let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 6, 4, 4])));
        assert!(fca.forward(&mut store, &mut tape, x).is_err());
    }

    #[test]
    fn eval_mode_uses_running_stats() {
        let mut r = rng(20);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(8), &mut store, "fca", &mut r);
        let x0 = rand4([2, 8, 4, 4], &mut r);
        // Warm the running stats.
        for _ in 0..10 {
            let mut tape = Tape::new(true);
            let x = tape.constant(x0.clone());
            fca.forward(&mut store, &mut tape, x).unwrap();
        }
        // Eval forward must not change buffers and must be repeatable.
        let before = store.weights_hash();
        let mut t1 = Tape::inference();
        let x1 = t1.constant(x0.clone());
        let y1 = fca.forward(&mut store, &mut t1, x1).unwrap();
        let mut t2 = Tape::inference();
        let x2 = t2.constant(x0.clone());
        let y2 = fca.forward(&mut store, &mut t2, x2).unwrap();
        assert_eq!(store.weights_hash(), before);
        assert_eq!(
            t1.value(y1).as_slice_memory_order(),
            t2.value(y2).as_slice_memory_order()
        );
    }

    /// Check the Array4 helper type used by the oracle is what forward sees.
    #[test]
    fn oracle_weights_shapes() {
        let mut r = rng(21);
        let mut store = ParamStore::<f32>::new();
        let fca = Fca::new(FcaSpec::new(64), &mut store, "fca", &mut r);
        let w = reference::extract_weights(&fca, &store);
        assert_eq!(w.w1.dim(), (8, 64));
        assert_eq!(w.wh.dim(), (64, 8));
        let _ = Array4::<f32>::zeros((1, 64, 2, 2));
    }
}
