use ndarray::{ArcArray, ArrayD, Axis, IxDyn};

use super::params::{ParamId, ParamStore};
use super::Elem;

pub type Value<F> = ArcArray<F, IxDyn>;

/// Tensor handle into a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tid(pub(crate) usize);

type BackFn<F> = Box<dyn FnOnce(&ArrayD<F>) -> Vec<(Tid, ArrayD<F>)>>;

struct Node<F: Elem> {
    value: Value<F>,
    grad: Option<ArrayD<F>>,
    requires_grad: bool,
    back: Option<BackFn<F>>,
}

/// Single-use computation tape. Build one per forward pass.
pub struct Tape<F: Elem> {
    nodes: Vec<Node<F>>,
    param_binds: Vec<(ParamId, Tid)>,
    /// Training mode: layers consult this for batch-norm statistics.
    pub train: bool,
    /// When false no backward closures are recorded (cheap inference).
    pub grad_enabled: bool,
    /// Whether norm layers may write running statistics.
    pub update_norm_stats: bool,
}

impl<F: Elem> Tape<F> {
    pub fn new(train: bool) -> Self {
        Self {
            nodes: Vec::new(),
            param_binds: Vec::new(),
            train,
            grad_enabled: train,
            update_norm_stats: train,
        }
    }

    pub fn inference() -> Self {
        Self::new(false)
    }

    /// Frozen-teacher mode for distillation: batch statistics in the norm
    /// layers (so a warm-started student reproduces the teacher exactly),
    /// but no gradients and no state writes.
    pub fn frozen_batchstats() -> Self {
        Self {
            nodes: Vec::new(),
            param_binds: Vec::new(),
            train: true,
            grad_enabled: false,
            update_norm_stats: false,
        }
    }

    pub fn value(&self, t: Tid) -> &Value<F> {
        &self.nodes[t.0].value
    }

    pub fn scalar(&self, t: Tid) -> F {
        *self.nodes[t.0].value.first().expect("scalar tensor")
    }

    pub fn requires_grad(&self, t: Tid) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn push(&mut self, value: ArrayD<F>, requires_grad: bool, back: Option<BackFn<F>>) -> Tid {
        // Every node value is stored in standard (C) layout so kernels can
        // take flat slices.
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value: value.into_shared(), grad: None, requires_grad, back });
        Tid(self.nodes.len() - 1)
    }

    /// Records an op output. The closure is dropped when no input needs
    /// gradients, so inference pays nothing for the tape.
    pub fn record(
        &mut self,
        value: ArrayD<F>,
        parents: &[Tid],
        back: impl FnOnce() -> BackFn<F>,
    ) -> Tid {
        let requires = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let back = if requires { Some(back()) } else { None };
        self.push(value, requires, back)
    }

    /// Leaf tensor that never needs gradients.
    pub fn constant(&mut self, value: ArrayD<F>) -> Tid {
        self.push(value, false, None)
    }

    /// Leaf tensor that accumulates a gradient without being bound to a
    /// parameter store (testing hook for input gradients).
    pub fn constant_with_grad(&mut self, value: ArrayD<F>) -> Tid {
        let requires = self.grad_enabled;
        self.push(value, requires, None)
    }

    /// Leaf bound to a stored parameter; gradients flow back to the store.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Tid {
        let requires = self.grad_enabled && store.is_trainable(id);
        let t = self.push(store.value(id).clone(), requires, None);
        if requires {
            self.param_binds.push((id, t));
        }
        t
    }

    /// Reverse pass from `root` (seeded with ones).
    pub fn backward(&mut self, root: Tid) {
        let seed = ArrayD::ones(self.nodes[root.0].value.raw_dim());
        self.accumulate(root, seed);
        for i in (0..=root.0).rev() {
            if self.nodes[i].back.is_none() {
                continue;
            }
            let back = self.nodes[i].back.take().expect("checked");
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let g = if g.is_standard_layout() { g } else { g.as_standard_layout().to_owned() };
            for (pid, pg) in back(&g) {
                if self.nodes[pid.0].requires_grad {
                    self.accumulate(pid, pg);
                }
            }
        }
    }

    fn accumulate(&mut self, t: Tid, g: ArrayD<F>) {
        match &mut self.nodes[t.0].grad {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Moves accumulated leaf gradients into the parameter store.
    pub fn collect_param_grads(&mut self, store: &mut ParamStore<F>) {
        for (pid, tid) in std::mem::take(&mut self.param_binds) {
            if let Some(g) = self.nodes[tid.0].grad.take() {
                store.accumulate_grad(pid, &g);
            }
        }
    }

    /// Gradient of a leaf / intermediate (testing hook).
    pub fn grad(&self, t: Tid) -> Option<&ArrayD<F>> {
        self.nodes[t.0].grad.as_ref()
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Tid, b: Tid) -> Tid {
        let v = self.nodes[a.0].value.to_owned() + &self.nodes[b.0].value;
        self.record(v, &[a, b], || {
            Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])
        })
    }

    /// `a * b` where `b` broadcasts against `a` (size-1 dims in `b`).
    pub fn mul_broadcast(&mut self, a: Tid, b: Tid) -> Tid {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let v = av.to_owned() * &bv;
        assert_eq!(v.shape(), av.shape(), "mul_broadcast: rhs must broadcast into lhs");
        self.record(v, &[a, b], || {
            Box::new(move |g| {
                let da = g * &bv;
                let db_full = g * &av.to_owned();
                let db = reduce_to_shape(db_full, bv.shape());
                vec![(a, da), (b, db)]
            })
        })
    }

    pub fn relu(&mut self, x: Tid) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let v = xv.mapv(|e| if e > F::zero() { e } else { F::zero() });
        self.record(v, &[x], || {
            Box::new(move |g| {
                let mut dx = g.clone();
                ndarray::Zip::from(&mut dx).and(&xv).for_each(|d, &e| {
                    if e <= F::zero() {
                        *d = F::zero();
                    }
                });
                vec![(x, dx)]
            })
        })
    }

    pub fn sigmoid(&mut self, x: Tid) -> Tid {
        let v = self.nodes[x.0].value.mapv(|e| F::one() / (F::one() + (-e).exp()));
        let out = v.clone().into_shared();
        let t = self.record(v, &[x], || {
            Box::new(move |g| {
                let dx = ndarray::Zip::from(g)
                    .and(&out)
                    .map_collect(|&g, &y| g * y * (F::one() - y));
                vec![(x, dx)]
            })
        });
        t
    }

    /// `x * relu6(x + 3) / 6`
    pub fn hard_swish(&mut self, x: Tid) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let three = F::lit(3.0);
        let six = F::lit(6.0);
        let v = xv.mapv(|e| {
            let r = (e + three).max(F::zero()).min(six);
            e * r / six
        });
        self.record(v, &[x], || {
            Box::new(move |g| {
                let two = F::lit(2.0);
                let dx = ndarray::Zip::from(g).and(&xv).map_collect(|&g, &e| {
                    let d = if e <= -three {
                        F::zero()
                    } else if e >= three {
                        F::one()
                    } else {
                        (two * e + three) / six
                    };
                    g * d
                });
                vec![(x, dx)]
            })
        })
    }

    // ---- shape ----

    pub fn reshape(&mut self, x: Tid, shape: &[usize]) -> Tid {
        let in_shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let v = reshape_std(self.nodes[x.0].value.to_owned(), shape);
        self.record(v, &[x], || {
            Box::new(move |g| vec![(x, reshape_std(g.clone(), &in_shape))])
        })
    }

    pub fn permute(&mut self, x: Tid, axes: &[usize]) -> Tid {
        let axes_owned: Vec<usize> = axes.to_vec();
        let v = self.nodes[x.0].value.to_owned().permuted_axes(IxDyn(axes)).as_standard_layout().to_owned();
        self.record(v, &[x], || {
            Box::new(move |g| {
                let mut inv = vec![0usize; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let dx = g.clone().permuted_axes(IxDyn(&inv)).as_standard_layout().to_owned();
                vec![(x, dx)]
            })
        })
    }

    pub fn concat(&mut self, axis: usize, parts: &[Tid]) -> Tid {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let extents: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].value.shape()[axis]).collect();
        let parts_owned: Vec<Tid> = parts.to_vec();
        self.record(v, parts, || {
            Box::new(move |g| {
                let mut out = Vec::with_capacity(parts_owned.len());
                let mut start = 0usize;
                for (i, &e) in extents.iter().enumerate() {
                    let sl = g
                        .slice_axis(Axis(axis), ndarray::Slice::from(start..start + e))
                        .to_owned();
                    out.push((parts_owned[i], sl));
                    start += e;
                }
                out
            })
        })
    }

    pub fn slice_axis(&mut self, x: Tid, axis: usize, start: usize, end: usize) -> Tid {
        let in_shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        let v = self.nodes[x.0]
            .value
            .slice_axis(Axis(axis), ndarray::Slice::from(start..end))
            .to_owned();
        self.record(v, &[x], || {
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                dx.slice_axis_mut(Axis(axis), ndarray::Slice::from(start..end)).assign(g);
                vec![(x, dx)]
            })
        })
    }

    /// Mean along `axis`, keeping it as a size-1 dim.
    pub fn mean_axis_keep(&mut self, x: Tid, axis: usize) -> Tid {
        let n = self.nodes[x.0].value.shape()[axis];
        let v = self.nodes[x.0]
            .value
            .mean_axis(Axis(axis))
            .expect("non-empty axis")
            .insert_axis(Axis(axis));
        self.record(v, &[x], || {
            Box::new(move |g| {
                let scale = F::one() / F::lit(n as f64);
                let shape: Vec<usize> = g
                    .shape()
                    .iter()
                    .enumerate()
                    .map(|(i, &s)| if i == axis { n } else { s })
                    .collect();
                let dx = (g * scale).broadcast(IxDyn(&shape)).expect("broadcast").to_owned();
                vec![(x, dx)]
            })
        })
    }

    /// Nearest-neighbour 2x upsample of a `(B, C, H, W)` map.
    pub fn upsample_nearest_x2(&mut self, x: Tid) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let s = xv.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut v = ArrayD::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
        {
            let xs = xv.as_slice_memory_order().expect("standard layout");
            let vs = v.as_slice_mut().expect("standard layout");
            let (hw_in, w_in) = (h * w, w);
            let (hw_out, w_out) = (4 * h * w, 2 * w);
            for bc in 0..b * c {
                let src = &xs[bc * hw_in..(bc + 1) * hw_in];
                let dst = &mut vs[bc * hw_out..(bc + 1) * hw_out];
                for i in 0..h {
                    for j in 0..w {
                        let e = src[i * w_in + j];
                        let base = 2 * i * w_out + 2 * j;
                        dst[base] = e;
                        dst[base + 1] = e;
                        dst[base + w_out] = e;
                        dst[base + w_out + 1] = e;
                    }
                }
            }
        }
        self.record(v, &[x], || {
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&[b, c, h, w]));
                {
                    let gs = g.as_slice_memory_order().expect("standard layout");
                    let ds = dx.as_slice_mut().expect("standard layout");
                    let (hw_in, w_in) = (h * w, w);
                    let (hw_out, w_out) = (4 * h * w, 2 * w);
                    for bc in 0..b * c {
                        let gsl = &gs[bc * hw_out..(bc + 1) * hw_out];
                        let dsl = &mut ds[bc * hw_in..(bc + 1) * hw_in];
                        for i in 0..h {
                            for j in 0..w {
                                let base = 2 * i * w_out + 2 * j;
                                dsl[i * w_in + j] = gsl[base]
                                    + gsl[base + 1]
                                    + gsl[base + w_out]
                                    + gsl[base + w_out + 1];
                            }
                        }
                    }
                }
                vec![(x, dx)]
            })
        })
    }

    /// Softmax along the last axis (max-shifted for stability).
    pub fn softmax_last(&mut self, x: Tid) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let v = softmax_last_value(&xv.to_owned());
        let out = v.clone().into_shared();
        self.record(v, &[x], || {
            Box::new(move |g| {
                let last = out.ndim() - 1;
                // dx = y * (g - sum(g*y, last, keep))
                let gy = g * &out.to_owned();
                let s = gy.sum_axis(Axis(last)).insert_axis(Axis(last));
                let dx = &out.to_owned() * &(g - &s);
                vec![(x, dx)]
            })
        })
    }

    /// Row gather: `x` is `(M, ...)`, output `(len(idx), ...)`.
    pub fn gather_rows(&mut self, x: Tid, idx: &[usize]) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let idx_owned: Vec<usize> = idx.to_vec();
        let views: Vec<_> = idx.iter().map(|&i| xv.index_axis(Axis(0), i)).collect();
        let mut shape: Vec<usize> = xv.shape().to_vec();
        shape[0] = idx.len();
        let v = if idx.is_empty() {
            ArrayD::zeros(IxDyn(&shape))
        } else {
            ndarray::stack(Axis(0), &views).expect("gather shapes")
        };
        let in_shape: Vec<usize> = xv.shape().to_vec();
        self.record(v, &[x], || {
            Box::new(move |g| {
                let mut dx = ArrayD::zeros(IxDyn(&in_shape));
                for (row, &i) in idx_owned.iter().enumerate() {
                    let mut dst = dx.index_axis_mut(Axis(0), i);
                    dst += &g.index_axis(Axis(0), row);
                }
                vec![(x, dx)]
            })
        })
    }

    /// `(B, C, H, W)` -> `(B, H*W, C)`
    pub fn flatten_spatial(&mut self, x: Tid) -> Tid {
        let s = self.nodes[x.0].value.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let t = self.permute(x, &[0, 2, 3, 1]);
        self.reshape(t, &[b, h * w, c])
    }

    /// Scalar `sum_i w_i * x_i` over scalar inputs.
    pub fn weighted_sum_scalars(&mut self, terms: &[(Tid, F)]) -> Tid {
        let mut acc = F::zero();
        for &(t, w) in terms {
            acc = acc + w * self.scalar(t);
        }
        let terms_owned: Vec<(Tid, F)> = terms.to_vec();
        let parents: Vec<Tid> = terms.iter().map(|&(t, _)| t).collect();
        self.record(ArrayD::from_elem(IxDyn(&[]), acc), &parents, || {
            Box::new(move |g| {
                let gs = *g.first().expect("scalar");
                terms_owned
                    .iter()
                    .map(|&(t, w)| (t, ArrayD::from_elem(IxDyn(&[]), gs * w)))
                    .collect()
            })
        })
    }

    /// Custom op producing a scalar with precomputed parent gradients.
    pub fn custom_scalar(&mut self, parents: &[Tid], value: F, grads: Vec<ArrayD<F>>) -> Tid {
        let parents_owned: Vec<Tid> = parents.to_vec();
        self.record(ArrayD::from_elem(IxDyn(&[]), value), parents, || {
            Box::new(move |g| {
                let gs = *g.first().expect("scalar");
                parents_owned
                    .iter()
                    .zip(grads)
                    .map(|(&p, pg)| (p, pg.mapv(|e| e * gs)))
                    .collect()
            })
        })
    }

    /// Dot product with a fixed vector along the last axis:
    /// `out[..] = sum_k x[.., k] * v[k]` (collapses the last dim).
    pub fn dot_last(&mut self, x: Tid, v: &[F]) -> Tid {
        let xv = self.nodes[x.0].value.clone();
        let shape = xv.shape().to_vec();
        let n1 = *shape.last().expect("dot_last needs rank >= 1");
        assert_eq!(n1, v.len(), "dot_last vector length");
        let out_shape = &shape[..shape.len() - 1];
        let rows = xv.len() / n1;
        let mut out = ArrayD::<F>::zeros(IxDyn(out_shape));
        {
            let xs = xv.as_slice_memory_order().expect("dot_last layout");
            let os = out.as_slice_mut().expect("dot_last out layout");
            for row in 0..rows {
                let seg = &xs[row * n1..(row + 1) * n1];
                let mut acc = F::zero();
                for (a, b) in seg.iter().zip(v.iter()) {
                    acc = acc + *a * *b;
                }
                os[row] = acc;
            }
        }
        let v_owned: Vec<F> = v.to_vec();
        self.record(out, &[x], || {
            Box::new(move |g| {
                let mut dx = ArrayD::<F>::zeros(IxDyn(&shape));
                {
                    let gs = g.as_slice_memory_order().expect("grad layout");
                    let ds = dx.as_slice_mut().expect("dx layout");
                    for row in 0..rows {
                        let gv = gs[row];
                        for (k, &b) in v_owned.iter().enumerate() {
                            ds[row * n1 + k] = gv * b;
                        }
                    }
                }
                vec![(x, dx)]
            })
        })
    }

    pub fn mean_all(&mut self, x: Tid) -> Tid {
        let n = self.nodes[x.0].value.len();
        let v = self.nodes[x.0].value.iter().fold(F::zero(), |a, &b| a + b) / F::lit(n as f64);
        let shape: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
        self.record(ArrayD::from_elem(IxDyn(&[]), v), &[x], || {
            Box::new(move |g| {
                let gs = *g.first().expect("scalar") / F::lit(n as f64);
                vec![(x, ArrayD::from_elem(IxDyn(&shape), gs))]
            })
        })
    }
}

/// Reshape that assumes (and produces) standard layout.
pub fn reshape_std<F: Elem>(arr: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    let arr = if arr.is_standard_layout() { arr } else { arr.as_standard_layout().to_owned() };
    let (vec, offset) = arr.into_raw_vec_and_offset();
    debug_assert!(offset.unwrap_or(0) == 0);
    ArrayD::from_shape_vec(IxDyn(shape), vec).expect("reshape element count")
}

/// Sum `x` down to `shape` (inverse of broadcasting).
pub fn reduce_to_shape<F: Elem>(mut x: ArrayD<F>, shape: &[usize]) -> ArrayD<F> {
    assert_eq!(x.ndim(), shape.len(), "reduce_to_shape rank mismatch");
    for ax in 0..shape.len() {
        if shape[ax] == 1 && x.shape()[ax] != 1 {
            x = x.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    x
}

pub fn softmax_last_value<F: Elem>(x: &ArrayD<F>) -> ArrayD<F> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|e| (e - max).exp());
        let sum = row.iter().fold(F::zero(), |a, &b| a + b);
        row.mapv_inplace(|e| e / sum);
    }
    out
}
