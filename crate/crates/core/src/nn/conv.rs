//! im2col convolution and depthwise convolution tape ops.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayD, ArrayView2, ArrayViewMut2, Axis, IxDyn};

use super::tape::{Tape, Tid};
use super::Elem;

/// Output extent under same-padding: `(n + 2p - k)/s + 1 == ceil(n/s)`.
pub fn conv_out_dim(n: usize, k: usize, stride: usize) -> usize {
    let pad = (k - 1) / 2;
    (n + 2 * pad - k) / stride + 1
}

struct ConvGeom {
    k: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(h: usize, w: usize, k: usize, stride: usize) -> Self {
        let pad = (k - 1) / 2;
        Self { k, stride, pad, h, w, ho: conv_out_dim(h, k, stride), wo: conv_out_dim(w, k, stride) }
    }

    /// Valid `wo` range `[lo, hi)` and the input offset of `wo = lo` for a
    /// kernel column `kj`, so `wi = wo*stride + kj - pad` stays in bounds.
    fn col_range(&self, kj: usize) -> (usize, usize, usize) {
        let s = self.stride as isize;
        let pad = self.pad as isize;
        let kj = kj as isize;
        let w = self.w as isize;
        let mut lo = if pad > kj { (pad - kj + s - 1) / s } else { 0 };
        let max_wi = w - 1 + pad - kj;
        if max_wi < 0 {
            return (0, 0, 0);
        }
        let hi = (max_wi / s + 1).min(self.wo as isize);
        if lo > hi {
            lo = hi;
        }
        let src0 = lo * s + kj - pad;
        if hi <= lo {
            return (lo as usize, hi.max(lo) as usize, 0);
        }
        (lo as usize, hi as usize, src0 as usize)
    }
}

fn im2col<F: Elem>(x: &[F], c_in: usize, g: &ConvGeom, col: &mut [F]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let hw_out = ho * wo;
    col.fill(F::zero());
    for c in 0..c_in {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw_out;
                let (lo, hi, src0) = g.col_range(kj);
                if hi <= lo {
                    continue;
                }
                for ho_i in 0..ho {
                    let hi_i = (ho_i * g.stride + ki) as isize - g.pad as isize;
                    if hi_i < 0 || hi_i >= h as isize {
                        continue;
                    }
                    let src = &plane[hi_i as usize * w..(hi_i as usize + 1) * w];
                    let dst = &mut col[row + ho_i * wo..row + (ho_i + 1) * wo];
                    if g.stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[src0..src0 + (hi - lo)]);
                    } else {
                        let mut si = src0;
                        for d in dst[lo..hi].iter_mut() {
                            *d = src[si];
                            si += g.stride;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<F: Elem>(col: &[F], c_in: usize, g: &ConvGeom, x: &mut [F]) {
    let (h, w, ho, wo) = (g.h, g.w, g.ho, g.wo);
    let hw_out = ho * wo;
    for c in 0..c_in {
        let plane = &mut x[c * h * w..(c + 1) * h * w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = ((c * g.k + ki) * g.k + kj) * hw_out;
                let (lo, hi, src0) = g.col_range(kj);
                if hi <= lo {
                    continue;
                }
                for ho_i in 0..ho {
                    let hi_i = (ho_i * g.stride + ki) as isize - g.pad as isize;
                    if hi_i < 0 || hi_i >= h as isize {
                        continue;
                    }
                    let src = &col[row + ho_i * wo..row + (ho_i + 1) * wo];
                    let dst = &mut plane[hi_i as usize * w..(hi_i as usize + 1) * w];
                    if g.stride == 1 {
                        for (d, &s) in dst[src0..src0 + (hi - lo)].iter_mut().zip(&src[lo..hi]) {
                            *d = *d + s;
                        }
                    } else {
                        let mut si = src0;
                        for &s in src[lo..hi].iter() {
                            dst[si] = dst[si] + s;
                            si += g.stride;
                        }
                    }
                }
            }
        }
    }
}

impl<F: Elem> Tape<F> {
    /// Same-padding 2-D convolution. `x`: `(B, Cin, H, W)`, `w`:
    /// `(Cout, Cin, k, k)`, optional `bias`: `(Cout,)`.
    pub fn conv2d(&mut self, x: Tid, w: Tid, bias: Option<Tid>, stride: usize) -> Tid {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input rank");
        assert_eq!(ws.len(), 4, "conv2d weight rank");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch");
        let (b, c_in, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let (c_out, k) = (ws[0], ws[2]);
        let geom = ConvGeom::new(h, w_dim, k, stride);
        let (ho, wo) = (geom.ho, geom.wo);
        let ckk = c_in * k * k;
        let hw_out = ho * wo;

        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c_out, ho, wo]));
        let bias_v = bias.map(|bt| self.value(bt).to_owned());
        {
            let xsl = xv.as_slice_memory_order().expect("conv input layout");
            let wsl = wv.as_slice_memory_order().expect("conv weight layout");
            let osl = out.as_slice_mut().expect("conv output layout");
            let w_mat = ArrayView2::from_shape((c_out, ckk), wsl).expect("weight view");
            let mut col = vec![F::zero(); ckk * hw_out];
            for bi in 0..b {
                im2col(&xsl[bi * c_in * h * w_dim..], c_in, &geom, &mut col);
                let col_mat = ArrayView2::from_shape((ckk, hw_out), &col).expect("col view");
                let mut o_mat = ArrayViewMut2::from_shape(
                    (c_out, hw_out),
                    &mut osl[bi * c_out * hw_out..(bi + 1) * c_out * hw_out],
                )
                .expect("out view");
                general_mat_mul(F::one(), &w_mat, &col_mat, F::zero(), &mut o_mat);
            }
            if let Some(bv) = &bias_v {
                let bsl = bv.as_slice().expect("bias layout");
                for bi in 0..b {
                    for co in 0..c_out {
                        let seg = &mut osl[(bi * c_out + co) * hw_out..(bi * c_out + co + 1) * hw_out];
                        let add = bsl[co];
                        for e in seg.iter_mut() {
                            *e = *e + add;
                        }
                    }
                }
            }
        }

        let mut parents = vec![x, w];
        if let Some(bt) = bias {
            parents.push(bt);
        }
        self.record(out, &parents, move || {
            Box::new(move |g| {
                let gsl = g.as_slice_memory_order().expect("grad layout");
                let xsl = xv.as_slice_memory_order().expect("conv input layout");
                let wsl = wv.as_slice_memory_order().expect("conv weight layout");
                let w_mat = ArrayView2::from_shape((c_out, ckk), wsl).expect("weight view");

                let mut dw = ArrayD::<F>::zeros(IxDyn(&[c_out, c_in, k, k]));
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, c_in, h, w_dim]));
                {
                    let dwsl = dw.as_slice_mut().expect("dw layout");
                    let mut dw_mat =
                        ArrayViewMut2::from_shape((c_out, ckk), dwsl).expect("dw view");
                    let dxsl = dx.as_slice_mut().expect("dx layout");
                    let mut col = vec![F::zero(); ckk * hw_out];
                    let mut dcol = vec![F::zero(); ckk * hw_out];
                    for bi in 0..b {
                        let g_mat = ArrayView2::from_shape(
                            (c_out, hw_out),
                            &gsl[bi * c_out * hw_out..(bi + 1) * c_out * hw_out],
                        )
                        .expect("g view");
                        im2col(&xsl[bi * c_in * h * w_dim..], c_in, &geom, &mut col);
                        let col_mat =
                            ArrayView2::from_shape((ckk, hw_out), &col).expect("col view");
                        // dW += g . col^T
                        general_mat_mul(F::one(), &g_mat, &col_mat.t(), F::one(), &mut dw_mat);
                        // dcol = W^T . g
                        let mut dcol_mat =
                            ArrayViewMut2::from_shape((ckk, hw_out), &mut dcol).expect("dcol");
                        general_mat_mul(F::one(), &w_mat.t(), &g_mat, F::zero(), &mut dcol_mat);
                        col2im(
                            &dcol,
                            c_in,
                            &geom,
                            &mut dxsl[bi * c_in * h * w_dim..(bi + 1) * c_in * h * w_dim],
                        );
                    }
                }
                let mut grads = vec![(x, dx), (w, dw)];
                if let Some(bt) = bias {
                    let db = g
                        .sum_axis(Axis(3))
                        .sum_axis(Axis(2))
                        .sum_axis(Axis(0))
                        .into_dyn();
                    grads.push((bt, db));
                }
                grads
            })
        })
    }

    /// Depthwise (per-channel) same-padding convolution. `x`: `(B, C, H, W)`,
    /// `w`: `(C, k, k)`.
    pub fn depthwise_conv2d(&mut self, x: Tid, w: Tid, stride: usize) -> Tid {
        let xv = self.value(x).clone();
        let wv = self.value(w).clone();
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "depthwise input rank");
        assert_eq!(ws.len(), 3, "depthwise weight rank");
        assert_eq!(xs[1], ws[0], "depthwise channel mismatch");
        let (b, c, h, w_dim) = (xs[0], xs[1], xs[2], xs[3]);
        let k = ws[1];
        let geom = ConvGeom::new(h, w_dim, k, stride);
        let (ho, wo) = (geom.ho, geom.wo);

        let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let xsl = xv.as_slice_memory_order().expect("dw input layout");
            let wsl = wv.as_slice_memory_order().expect("dw weight layout");
            let osl = out.as_slice_mut().expect("dw output layout");
            for bi in 0..b {
                for ci in 0..c {
                    let plane = &xsl[(bi * c + ci) * h * w_dim..(bi * c + ci + 1) * h * w_dim];
                    let oplane = &mut osl[(bi * c + ci) * ho * wo..(bi * c + ci + 1) * ho * wo];
                    dw_plane_forward(plane, oplane, &wsl[ci * k * k..(ci + 1) * k * k], &geom);
                }
            }
        }

        self.record(out, &[x, w], move || {
            Box::new(move |g| {
                let gsl = g.as_slice_memory_order().expect("grad layout");
                let xsl = xv.as_slice_memory_order().expect("dw input layout");
                let wsl = wv.as_slice_memory_order().expect("dw weight layout");
                let mut dw = ArrayD::<F>::zeros(IxDyn(&[c, k, k]));
                let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, c, h, w_dim]));
                {
                    let dwsl = dw.as_slice_mut().expect("dw grad layout");
                    let dxsl = dx.as_slice_mut().expect("dx layout");
                    for bi in 0..b {
                        for ci in 0..c {
                            let base_in = (bi * c + ci) * h * w_dim;
                            let base_out = (bi * c + ci) * ho * wo;
                            dw_plane_backward(
                                &xsl[base_in..base_in + h * w_dim],
                                &gsl[base_out..base_out + ho * wo],
                                &wsl[ci * k * k..(ci + 1) * k * k],
                                &mut dwsl[ci * k * k..(ci + 1) * k * k],
                                &mut dxsl[base_in..base_in + h * w_dim],
                                &geom,
                            );
                        }
                    }
                }
                vec![(x, dx), (w, dw)]
            })
        })
    }
}

fn dw_plane_forward<F: Elem>(x: &[F], out: &mut [F], w: &[F], g: &ConvGeom) {
    let (h, width, ho, wo) = (g.h, g.w, g.ho, g.wo);
    for ki in 0..g.k {
        for kj in 0..g.k {
            let wgt = w[ki * g.k + kj];
            let (lo, hi, src0) = g.col_range(kj);
            if hi <= lo {
                continue;
            }
            for ho_i in 0..ho {
                let hi_i = (ho_i * g.stride + ki) as isize - g.pad as isize;
                if hi_i < 0 || hi_i >= h as isize {
                    continue;
                }
                let src = &x[hi_i as usize * width..(hi_i as usize + 1) * width];
                let dst = &mut out[ho_i * wo..(ho_i + 1) * wo];
                if g.stride == 1 {
                    for (d, &s) in dst[lo..hi].iter_mut().zip(&src[src0..src0 + (hi - lo)]) {
                        *d = *d + wgt * s;
                    }
                } else {
                    let mut si = src0;
                    for d in dst[lo..hi].iter_mut() {
                        *d = *d + wgt * src[si];
                        si += g.stride;
                    }
                }
            }
        }
    }
}

fn dw_plane_backward<F: Elem>(
    x: &[F],
    gout: &[F],
    w: &[F],
    dw: &mut [F],
    dx: &mut [F],
    g: &ConvGeom,
) {
    let (h, width, ho, wo) = (g.h, g.w, g.ho, g.wo);
    for ki in 0..g.k {
        for kj in 0..g.k {
            let wgt = w[ki * g.k + kj];
            let mut wacc = F::zero();
            let (lo, hi, src0) = g.col_range(kj);
            if hi <= lo {
                continue;
            }
            for ho_i in 0..ho {
                let hi_i = (ho_i * g.stride + ki) as isize - g.pad as isize;
                if hi_i < 0 || hi_i >= h as isize {
                    continue;
                }
                let src = &x[hi_i as usize * width..(hi_i as usize + 1) * width];
                let grow = &gout[ho_i * wo..(ho_i + 1) * wo];
                let dxrow = &mut dx[hi_i as usize * width..(hi_i as usize + 1) * width];
                if g.stride == 1 {
                    for ((&gv, &sv), dxe) in grow[lo..hi]
                        .iter()
                        .zip(&src[src0..src0 + (hi - lo)])
                        .zip(dxrow[src0..src0 + (hi - lo)].iter_mut())
                    {
                        wacc = wacc + gv * sv;
                        *dxe = *dxe + wgt * gv;
                    }
                } else {
                    let mut si = src0;
                    for &gv in grow[lo..hi].iter() {
                        wacc = wacc + gv * src[si];
                        dxrow[si] = dxrow[si] + wgt * gv;
                        si += g.stride;
                    }
                }
            }
            dw[ki * g.k + kj] = dw[ki * g.k + kj] + wacc;
        }
    }
}
