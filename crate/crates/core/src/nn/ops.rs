//! Normalization tape ops.

use ndarray::{Array1, ArrayD, ArrayViewD, IxDyn};

use super::tape::{Tape, Tid};
use super::Elem;

/// Per-channel statistics of a `(B, C, H, W)` tensor over `(B, H, W)`.
/// Variance is the biased (population) estimate.
pub fn channel_stats<F: Elem>(x: ArrayViewD<'_, F>) -> (Array1<F>, Array1<F>) {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let m = F::lit((b * h * w) as f64);
    let xs = x.as_slice_memory_order().expect("bn input layout");
    let mut mean = Array1::<F>::zeros(c);
    let mut var = Array1::<F>::zeros(c);
    for ci in 0..c {
        let mut acc = F::zero();
        for bi in 0..b {
            let seg = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for &e in seg {
                acc = acc + e;
            }
        }
        mean[ci] = acc / m;
    }
    for ci in 0..c {
        let mu = mean[ci];
        let mut acc = F::zero();
        for bi in 0..b {
            let seg = &xs[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for &e in seg {
                let d = e - mu;
                acc = acc + d * d;
            }
        }
        var[ci] = acc / m;
    }
    (mean, var)
}

impl<F: Elem> Tape<F> {
    /// Batch normalization with externally supplied statistics.
    ///
    /// `batch_stats = true` means `mean`/`var` were computed from `x` itself
    /// (training); the backward pass then includes the statistic terms.
    pub fn batch_norm(
        &mut self,
        x: Tid,
        gamma: Tid,
        beta: Tid,
        mean: Array1<F>,
        var: Array1<F>,
        eps: F,
        batch_stats: bool,
    ) -> Tid {
        let xv = self.value(x).clone();
        let gv = self.value(gamma).to_owned();
        let bv = self.value(beta).to_owned();
        let s = xv.shape().to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let istd: Array1<F> = var.mapv(|v| F::one() / (v + eps).sqrt());

        let mut xhat = ArrayD::<F>::zeros(IxDyn(&s));
        let mut out = ArrayD::<F>::zeros(IxDyn(&s));
        {
            let xs = xv.as_slice_memory_order().expect("bn layout");
            let xh = xhat.as_slice_mut().expect("bn layout");
            let os = out.as_slice_mut().expect("bn layout");
            let gsl = gv.as_slice().expect("gamma layout");
            let bsl = bv.as_slice().expect("beta layout");
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    let (mu, is, ga, be) = (mean[ci], istd[ci], gsl[ci], bsl[ci]);
                    for i in base..base + h * w {
                        let xn = (xs[i] - mu) * is;
                        xh[i] = xn;
                        os[i] = ga * xn + be;
                    }
                }
            }
        }
        let xhat_sh = xhat.into_shared();

        self.record(out, &[x, gamma, beta], move || {
            Box::new(move |g| {
                let gs = g.as_slice_memory_order().expect("bn grad layout");
                let xh = xhat_sh.as_slice_memory_order().expect("bn layout");
                let gsl = gv.as_slice().expect("gamma layout");
                let m = F::lit((b * h * w) as f64);

                let mut dgamma = Array1::<F>::zeros(c);
                let mut dbeta = Array1::<F>::zeros(c);
                for bi in 0..b {
                    for ci in 0..c {
                        let base = (bi * c + ci) * h * w;
                        let mut ag = F::zero();
                        let mut ab = F::zero();
                        for i in base..base + h * w {
                            ag = ag + gs[i] * xh[i];
                            ab = ab + gs[i];
                        }
                        dgamma[ci] = dgamma[ci] + ag;
                        dbeta[ci] = dbeta[ci] + ab;
                    }
                }

                let mut dx = ArrayD::<F>::zeros(IxDyn(&[b, c, h, w]));
                {
                    let dxs = dx.as_slice_mut().expect("bn layout");
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * h * w;
                            let k = gsl[ci] * istd[ci];
                            if batch_stats {
                                let mg = dbeta[ci] / m;
                                let mgx = dgamma[ci] / m;
                                for i in base..base + h * w {
                                    dxs[i] = k * (gs[i] - mg - xh[i] * mgx);
                                }
                            } else {
                                for i in base..base + h * w {
                                    dxs[i] = k * gs[i];
                                }
                            }
                        }
                    }
                }
                vec![(x, dx), (gamma, dgamma.into_dyn()), (beta, dbeta.into_dyn())]
            })
        })
    }
}
