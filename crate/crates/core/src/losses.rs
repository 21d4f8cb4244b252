//! The four training losses: fault classification (joint
//! quality-classification BCE), fault distribution (two-bin cross-entropy on
//! the bracketing discretization points), fault regression (GIoU), and the
//! temperature-softened KL distillation term, plus their weighted total.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hkh::HeadSpec;
use crate::nn::tape::softmax_last_value;
use crate::nn::{Elem, Tape, Tid};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Fault-distribution loss weight.
    pub lambda1: f64,
    /// Fault-regression (GIoU) loss weight.
    pub lambda2: f64,
    /// Distillation temperature.
    pub tau: f64,
    /// Distillation term weight; 0 reproduces teacher-phase training.
    pub hkd_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda1: 0.25, lambda2: 2.0, tau: 15.0, hkd_weight: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::Validation(format!("tau must be > 0, got {}", self.tau)));
        }
        if self.hkd_weight < 0.0 {
            return Err(Error::Validation(format!(
                "hkd_weight must be >= 0, got {}",
                self.hkd_weight
            )));
        }
        Ok(())
    }
}

/// The loss-weight pairs swept by the hyperparameter ablation harness.
pub fn lambda_sweep_grid() -> Vec<(f64, f64)> {
    vec![(0.25, 2.0), (0.5, 1.0), (1.0, 1.0)]
}

/// One batch's loss components (weighted total included).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub fcl: f64,
    pub fdl: f64,
    pub frl: f64,
    pub hkd: f64,
    pub total: f64,
}

impl LossBundle {
    /// Every component must be finite; the offending component is named.
    pub fn validate_finite(&self, iteration: u64) -> Result<()> {
        for (name, v) in [
            ("fcl", self.fcl),
            ("fdl", self.fdl),
            ("frl", self.frl),
            ("hkd", self.hkd),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name.into(), iteration });
            }
        }
        Ok(())
    }
}

const FOCAL_BETA: f64 = 2.0;

/// Quality-focal classification loss over all locations:
/// `sum |q - sigmoid(s)|^beta * BCE(sigmoid(s), q) / max(1, #positives)`.
///
/// `targets` carries the IoU quality at each positive's class entry and 0
/// elsewhere.
pub fn fcl<F: Elem>(
    tape: &mut Tape<F>,
    cls_logits: Tid,
    targets: &Array2<F>,
    num_positives: usize,
) -> Result<Tid> {
    let logits = tape.value(cls_logits).to_owned();
    let shape = logits.shape().to_vec();
    if shape != [targets.nrows(), targets.ncols()] {
        return Err(Error::Validation(format!(
            "fcl: logits {shape:?} vs targets {:?}",
            targets.dim()
        )));
    }
    if targets.iter().any(|q| q.as_f64() < 0.0 || q.as_f64() > 1.0) {
        return Err(Error::Validation("fcl: quality targets must lie in [0,1]".into()));
    }
    let norm = (num_positives.max(1)) as f64;
    let beta = FOCAL_BETA;

    let mut value = 0.0f64;
    let mut grad = ArrayD::<F>::zeros(IxDyn(&shape));
    {
        let ls = logits.as_slice().expect("logits layout");
        let ts = targets.as_slice().expect("targets layout");
        let gs = grad.as_slice_mut().expect("grad layout");
        for i in 0..ls.len() {
            let s = ls[i].as_f64();
            let q = ts[i].as_f64();
            let p = 1.0 / (1.0 + (-s).exp());
            let bce = s.max(0.0) - s * q + (1.0 + (-s.abs()).exp()).ln();
            let diff = (q - p).abs();
            let m = diff.powf(beta);
            value += m * bce;
            let dm = beta * diff.powf(beta - 1.0) * (p - q).signum() * p * (1.0 - p);
            let d = (dm * bce + m * (p - q)) / norm;
            gs[i] = F::lit(d);
        }
    }
    value /= norm;
    Ok(tape.custom_scalar(&[cls_logits], F::lit(value), vec![grad]))
}

/// Fault-distribution loss: cross-entropy against the two discretization
/// points bracketing each continuous target distance, linearly weighted,
/// averaged over edges and positives.
///
/// Targets outside `[eps_min, eps_max]` are clamped; the clamp count is
/// returned for the training log.
pub fn fdl<F: Elem>(
    tape: &mut Tape<F>,
    edge_logits: Tid,
    target_distances: &Array2<f64>,
    spec: &HeadSpec,
) -> (Tid, usize) {
    let logits = tape.value(edge_logits).to_owned();
    let shape = logits.shape().to_vec();
    let p = target_distances.nrows();
    assert_eq!(shape, vec![p, 4, spec.bins + 1], "fdl logits shape");
    if p == 0 {
        let zero = tape.custom_scalar(
            &[edge_logits],
            F::zero(),
            vec![ArrayD::zeros(IxDyn(&shape))],
        );
        return (zero, 0);
    }

    let probs = softmax_last_value(&logits);
    let n1 = spec.bins + 1;
    let n = spec.bins;
    let norm = (p * 4) as f64;
    let mut clamped = 0usize;
    let mut value = 0.0f64;
    let mut grad = ArrayD::<F>::zeros(IxDyn(&shape));
    {
        let ps = probs.as_slice().expect("probs layout");
        let gs = grad.as_slice_mut().expect("grad layout");
        for row in 0..p * 4 {
            let eps = target_distances[[row / 4, row % 4]];
            let mut u = (eps - spec.range.0) / spec.delta();
            if u < 0.0 || u > n as f64 {
                clamped += 1;
                u = u.clamp(0.0, n as f64);
            }
            let i = (u.floor() as usize).min(n - 1);
            let wi = (i + 1) as f64 - u;
            let wi1 = u - i as f64;
            let seg = &ps[row * n1..(row + 1) * n1];
            let pi = (seg[i].as_f64()).max(f64::MIN_POSITIVE);
            let pi1 = (seg[i + 1].as_f64()).max(f64::MIN_POSITIVE);
            value -= wi * pi.ln() + wi1 * pi1.ln();
            // d/dz_j = (P(j) - twohot_j) / norm
            for j in 0..n1 {
                let two_hot = if j == i {
                    wi
                } else if j == i + 1 {
                    wi1
                } else {
                    0.0
                };
                gs[row * n1 + j] = F::lit((seg[j].as_f64() - two_hot) / norm);
            }
        }
    }
    value /= norm;
    let t = tape.custom_scalar(&[edge_logits], F::lit(value), vec![grad]);
    (t, clamped)
}

/// Generalized IoU of two `(x1, y1, x2, y2)` boxes. Degenerate boxes count
/// as zero-area.
pub fn giou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = (area_a + area_b - inter).max(f64::MIN_POSITIVE);
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let encl = (cw * ch).max(f64::MIN_POSITIVE);
    inter / union - (encl - union) / encl
}

/// GIoU loss (`1 - GIoU`) over explicit box pairs, weighted and normalized
/// by the weight sum.
pub fn frl_giou_value(pred: &Array2<f64>, target: &Array2<f64>, weights: &Array1<f64>) -> f64 {
    assert_eq!(pred.nrows(), target.nrows());
    let wsum: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut acc = 0.0;
    for i in 0..pred.nrows() {
        let a = [pred[[i, 0]], pred[[i, 1]], pred[[i, 2]], pred[[i, 3]]];
        let b = [target[[i, 0]], target[[i, 1]], target[[i, 2]], target[[i, 3]]];
        acc += weights[i] * (1.0 - giou_xyxy(a, b));
    }
    acc / wsum
}

/// GIoU regression loss as a tape op over predicted distances
/// (stride units, `t, b, l, r`). Boxes are decoded around the fixed
/// locations; gradients flow to the distances.
pub fn frl_giou_from_distances<F: Elem>(
    tape: &mut Tape<F>,
    distances: Tid,
    locations: &Array2<f64>,
    strides: &Array1<f64>,
    target_boxes: &Array2<f64>,
    weights: &Array1<f64>,
) -> Tid {
    let dist = tape.value(distances).to_owned();
    let p = target_boxes.nrows();
    assert_eq!(dist.shape(), &[p, 4], "frl distances shape");
    let mut grad = ArrayD::<F>::zeros(IxDyn(&[p, 4]));
    if p == 0 {
        return tape.custom_scalar(&[distances], F::zero(), vec![grad]);
    }
    let wsum: f64 = weights.iter().sum::<f64>().max(f64::MIN_POSITIVE);
    let mut value = 0.0f64;
    for i in 0..p {
        let (x, y, s) = (locations[[i, 0]], locations[[i, 1]], strides[i]);
        let (t, b, l, r) = (
            dist[[i, 0]].as_f64(),
            dist[[i, 1]].as_f64(),
            dist[[i, 2]].as_f64(),
            dist[[i, 3]].as_f64(),
        );
        let a = [x - l * s, y - t * s, x + r * s, y + b * s];
        let tb = [
            target_boxes[[i, 0]],
            target_boxes[[i, 1]],
            target_boxes[[i, 2]],
            target_boxes[[i, 3]],
        ];
        let (giou, dgiou) = giou_with_grad(a, tb);
        value += weights[i] * (1.0 - giou);
        // Chain to distances: dx1/dl = -s, dy1/dt = -s, dx2/dr = s, dy2/db = s.
        let scale = -weights[i] / wsum;
        grad[[i, 0]] = F::lit(scale * dgiou[1] * (-s));
        grad[[i, 1]] = F::lit(scale * dgiou[3] * s);
        grad[[i, 2]] = F::lit(scale * dgiou[0] * (-s));
        grad[[i, 3]] = F::lit(scale * dgiou[2] * s);
    }
    value /= wsum;
    tape.custom_scalar(&[distances], F::lit(value), vec![grad])
}

/// GIoU and its gradient with respect to the first box's corners.
fn giou_with_grad(a: [f64; 4], b: [f64; 4]) -> (f64, [f64; 4]) {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let wa = (a[2] - a[0]).max(0.0);
    let ha = (a[3] - a[1]).max(0.0);
    let area_a = wa * ha;
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = (area_a + area_b - inter).max(f64::MIN_POSITIVE);
    let cw = a[2].max(b[2]) - a[0].min(b[0]);
    let ch = a[3].max(b[3]) - a[1].min(b[1]);
    let encl = (cw * ch).max(f64::MIN_POSITIVE);
    let giou = inter / union - (encl - union) / encl;

    // Per-corner partials of iw/ih, areaA, cw/ch (subgradients at ties).
    let diw = [
        if iw > 0.0 && a[0] > b[0] { -1.0 } else { 0.0 },
        0.0,
        if iw > 0.0 && a[2] < b[2] { 1.0 } else { 0.0 },
        0.0,
    ];
    let dih = [
        0.0,
        if ih > 0.0 && a[1] > b[1] { -1.0 } else { 0.0 },
        0.0,
        if ih > 0.0 && a[3] < b[3] { 1.0 } else { 0.0 },
    ];
    let darea = [
        if wa > 0.0 { -ha } else { 0.0 },
        if ha > 0.0 { -wa } else { 0.0 },
        if wa > 0.0 { ha } else { 0.0 },
        if ha > 0.0 { wa } else { 0.0 },
    ];
    let dcw = [
        if a[0] < b[0] { -1.0 } else { 0.0 },
        0.0,
        if a[2] > b[2] { 1.0 } else { 0.0 },
        0.0,
    ];
    let dch = [
        0.0,
        if a[1] < b[1] { -1.0 } else { 0.0 },
        0.0,
        if a[3] > b[3] { 1.0 } else { 0.0 },
    ];

    let mut grad = [0.0f64; 4];
    for v in 0..4 {
        let dinter = diw[v] * ih + iw * dih[v];
        let dunion = darea[v] - dinter;
        let dencl = dcw[v] * ch + cw * dch[v];
        // d(I/U) + d(U/C)     (GIoU = I/U - 1 + U/C)
        grad[v] = (dinter * union - inter * dunion) / (union * union)
            + (dunion * encl - union * dencl) / (encl * encl);
    }
    (giou, grad)
}

/// Temperature-softened KL distillation over edge distributions:
/// `tau^2 * sum KL(p_T^tau || p_S^tau) / max(1, #locations)`, edges summed
/// per location.
pub fn hkd<F: Elem>(
    tape: &mut Tape<F>,
    student_edges: Tid,
    teacher_edges: &ArrayD<F>,
    tau: f64,
) -> Result<Tid> {
    if tau <= 0.0 {
        return Err(Error::Validation(format!("hkd: tau must be > 0, got {tau}")));
    }
    let zs = tape.value(student_edges).to_owned();
    if zs.shape() != teacher_edges.shape() {
        return Err(Error::Validation(format!(
            "hkd: student logits {:?} vs teacher {:?}",
            zs.shape(),
            teacher_edges.shape()
        )));
    }
    let shape = zs.shape().to_vec();
    let locations = shape[0];
    let mut grad = ArrayD::<F>::zeros(IxDyn(&shape));
    if locations == 0 {
        return Ok(tape.custom_scalar(&[student_edges], F::zero(), vec![grad]));
    }
    let tauf = F::lit(tau);
    let ps = softmax_last_value(&zs.mapv(|v| v / tauf));
    let pt = softmax_last_value(&teacher_edges.mapv(|v| v / tauf));
    let norm = locations.max(1) as f64;
    let n1 = shape[shape.len() - 1];
    let rows = zs.len() / n1;
    let mut value = 0.0f64;
    {
        let pss = ps.as_slice().expect("ps layout");
        let pts = pt.as_slice().expect("pt layout");
        let gs = grad.as_slice_mut().expect("grad layout");
        for row in 0..rows {
            for j in 0..n1 {
                let idx = row * n1 + j;
                let (s, t) = (pss[idx].as_f64(), pts[idx].as_f64());
                if t > 0.0 {
                    value += t * (t.max(f64::MIN_POSITIVE).ln() - s.max(f64::MIN_POSITIVE).ln());
                }
                gs[idx] = F::lit(tau * (s - t) / norm);
            }
        }
    }
    value = value * tau * tau / norm;
    Ok(tape.custom_scalar(&[student_edges], F::lit(value), vec![grad]))
}

/// Weighted total `fcl + lambda1*fdl + lambda2*frl + hkd_weight*hkd` as a
/// tape node, plus the readout bundle.
pub fn total_loss<F: Elem>(
    tape: &mut Tape<F>,
    fcl: Tid,
    fdl: Tid,
    frl: Tid,
    hkd: Option<Tid>,
    weights: &LossWeights,
    iteration: u64,
) -> Result<(Tid, LossBundle)> {
    weights.validate()?;
    let mut terms = vec![
        (fcl, F::one()),
        (fdl, F::lit(weights.lambda1)),
        (frl, F::lit(weights.lambda2)),
    ];
    if let Some(h) = hkd {
        terms.push((h, F::lit(weights.hkd_weight)));
    }
    let total = tape.weighted_sum_scalars(&terms);
    let bundle = LossBundle {
        fcl: tape.scalar(fcl).as_f64(),
        fdl: tape.scalar(fdl).as_f64(),
        frl: tape.scalar(frl).as_f64(),
        hkd: hkd.map(|h| tape.scalar(h).as_f64()).unwrap_or(0.0),
        total: tape.scalar(total).as_f64(),
    };
    bundle.validate_finite(iteration)?;
    Ok((total, bundle))
}
