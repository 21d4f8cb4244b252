//! Minimal reverse-mode autodiff over `ndarray`, tuned for single-threaded
//! CPU training of small dense detectors.
//!
//! The tape records one forward pass; [`Tape::backward`] replays it in
//! reverse. Everything is generic over [`Elem`] so gradient checks can run
//! in `f64` while training runs in `f32`.

pub mod conv;
pub mod ops;
pub mod params;
pub mod tape;

use ndarray::{LinalgScalar, NdFloat};
use num_traits::FromPrimitive;

/// Scalar element type for tensors: `f32` in production, `f64` in
/// high-precision tests.
pub trait Elem: NdFloat + LinalgScalar + FromPrimitive + Send + Sync + 'static {
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }
    fn as_f64(self) -> f64;
}

impl Elem for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}

pub use params::{BufferId, ParamId, ParamStore};
pub use tape::{Tape, Tid};

use ndarray::ArrayD;

/// Central finite-difference gradient of a scalar function, for checking
/// analytic gradients in tests.
pub fn finite_diff_grad<F: Elem>(
    mut f: impl FnMut(&ArrayD<F>) -> F,
    x: &ArrayD<F>,
    h: F,
) -> ArrayD<F> {
    let mut grad = ArrayD::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in 0..x.len() {
        let orig = xp.as_slice_mut().unwrap()[idx];
        xp.as_slice_mut().unwrap()[idx] = orig + h;
        let fp = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig - h;
        let fm = f(&xp);
        xp.as_slice_mut().unwrap()[idx] = orig;
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (F::lit(2.0) * h);
    }
    grad
}

/// Max relative error between two gradient arrays, with an absolute floor to
/// keep near-zero entries from blowing up the ratio.
pub fn max_rel_err<F: Elem>(a: &ArrayD<F>, b: &ArrayD<F>, floor: F) -> F {
    let mut worst = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let denom = x.abs().max(y.abs()).max(floor);
        let rel = (x - y).abs() / denom;
        if rel > worst {
            worst = rel;
        }
    }
    worst
}
