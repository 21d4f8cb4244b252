//! Heterogeneous knowledge head: one head shared across pyramid levels
//! producing joint classification-quality scores and general-distribution
//! edge logits, plus the codec between distributions, distances and boxes,
//! label assignment and detection post-processing.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::core_nn::{build_conv, Activation, Conv2dLayer, ConvSpec, ConvUnit, Normalization};
use crate::error::{Error, Result};
use crate::hkn::PyramidFeatures;
use crate::nn::params::full;
use crate::nn::tape::softmax_last_value;
use crate::nn::{Elem, ParamId, ParamStore, Tape, Tid};

/// Classification-branch final bias, `-ln((1-p)/p)` at prior `p = 0.01`.
pub const CLS_BIAS_PRIOR: f64 = -4.595;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub num_classes: usize,
    pub in_channels: usize,
    pub stacked_convs: usize,
    /// Number of sub-intervals `n`; each edge predicts `n + 1` logits.
    pub bins: usize,
    /// Regression range `[eps_min, eps_max]` in stride units.
    pub range: (f64, f64),
}

impl HeadSpec {
    pub fn desk(num_classes: usize, in_channels: usize) -> Self {
        Self { num_classes, in_channels, stacked_convs: 2, bins: 16, range: (0.0, 16.0) }
    }

    pub fn paper(num_classes: usize, in_channels: usize) -> Self {
        Self { stacked_convs: 4, ..Self::desk(num_classes, in_channels) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 || self.stacked_convs == 0 {
            return Err(Error::InvalidSpec {
                context: "HeadSpec",
                field: "num_classes",
                reason: "num_classes, in_channels and stacked_convs must be positive".into(),
            });
        }
        if self.bins < 2 {
            return Err(Error::InvalidSpec {
                context: "HeadSpec",
                field: "bins",
                reason: format!("need at least 2 sub-intervals, got {}", self.bins),
            });
        }
        if !(self.range.0 < self.range.1) {
            return Err(Error::InvalidSpec {
                context: "HeadSpec",
                field: "range",
                reason: format!("eps_min must be below eps_max, got {:?}", self.range),
            });
        }
        Ok(())
    }

    /// Spacing between discretization points.
    pub fn delta(&self) -> f64 {
        (self.range.1 - self.range.0) / self.bins as f64
    }

    /// The `n + 1` discretization points.
    pub fn bin_values(&self) -> Vec<f64> {
        (0..=self.bins).map(|i| self.range.0 + i as f64 * self.delta()).collect()
    }
}

/// Per-location edge-distribution logits, `(locations, 4, n+1)`, edge order
/// `(t, b, l, r)`.
#[derive(Debug, Clone)]
pub struct EdgeDistributionSet<F> {
    pub logits: ArrayD<F>,
}

impl<F: Elem> EdgeDistributionSet<F> {
    /// SoftMax along the last axis.
    pub fn probabilities(&self) -> ArrayD<F> {
        softmax_last_value(&self.logits)
    }
}

/// Dense head shared across pyramid levels.
#[derive(Debug)]
pub struct Head {
    pub spec: HeadSpec,
    cls_convs: Vec<ConvUnit>,
    reg_convs: Vec<ConvUnit>,
    cls_pred: Conv2dLayer,
    reg_pred: Conv2dLayer,
    scales: Vec<ParamId>,
}

pub fn build_head<F: Elem, R: Rng>(
    spec: HeadSpec,
    levels: usize,
    store: &mut ParamStore<F>,
    prefix: &str,
    rng: &mut R,
) -> Result<Head> {
    spec.validate()?;
    let c = spec.in_channels;
    let tower = |store: &mut ParamStore<F>, rng: &mut R, branch: &str| -> Result<Vec<ConvUnit>> {
        (0..spec.stacked_convs)
            .map(|i| {
                build_conv(
                    ConvSpec {
                        in_channels: c,
                        out_channels: c,
                        kernel: 3,
                        stride: 1,
                        depthwise_separable: false,
                        normalization: Normalization::BatchNorm,
                        activation: Activation::Relu,
                    },
                    store,
                    &format!("{prefix}.{branch}{i}"),
                    rng,
                )
            })
            .collect()
    };
    let cls_convs = tower(store, rng, "cls")?;
    let reg_convs = tower(store, rng, "reg")?;
    let cls_pred =
        Conv2dLayer::new(store, &format!("{prefix}.cls_pred"), c, spec.num_classes, 3, 1, true, rng);
    // Rare-positive prior keeps the classification loss sane at init.
    store.value_mut(cls_pred.bias.unwrap()).fill(F::lit(CLS_BIAS_PRIOR));
    let reg_pred = Conv2dLayer::new(
        store,
        &format!("{prefix}.reg_pred"),
        c,
        4 * (spec.bins + 1),
        3,
        1,
        true,
        rng,
    );
    let scales = (0..levels)
        .map(|l| store.add_param(format!("{prefix}.scale{l}"), full(&[1, 1, 1, 1], F::one())))
        .collect();
    Ok(Head { spec, cls_convs, reg_convs, cls_pred, reg_pred, scales })
}

/// Everything the losses and the decoder need from one forward pass.
pub struct HeadOutputs<F> {
    /// `(B, N, num_classes)` raw logits.
    pub cls_logits: Tid,
    /// `(B, N, 4, n+1)` edge logits after the per-level scale.
    pub edge_logits: Tid,
    /// `(N, 2)` image-space `(x, y)` cell centers, level-major order.
    pub locations: Array2<F>,
    /// `(N,)` stride of each location.
    pub strides: Array1<F>,
    /// Level index of each location.
    pub level_of: Vec<usize>,
}

impl Head {
    /// Applies the shared head to every pyramid level and flattens the
    /// results into per-location rows (level-major, row-major within a
    /// level).
    pub fn forward<F: Elem>(
        &self,
        store: &mut ParamStore<F>,
        tape: &mut Tape<F>,
        pyramid: &PyramidFeatures,
    ) -> Result<HeadOutputs<F>> {
        if pyramid.maps.len() != self.scales.len() {
            return Err(Error::Shape {
                context: "head",
                reason: format!(
                    "head built for {} levels, pyramid has {}",
                    self.scales.len(),
                    pyramid.maps.len()
                ),
            });
        }
        let k = self.spec.num_classes;
        let n1 = self.spec.bins + 1;
        let mut cls_parts = Vec::new();
        let mut edge_parts = Vec::new();
        let mut locations = Vec::new();
        let mut strides = Vec::new();
        let mut level_of = Vec::new();

        for (li, &map) in pyramid.maps.iter().enumerate() {
            let s = tape.value(map).shape().to_vec();
            if s[1] != self.spec.in_channels {
                return Err(Error::Shape {
                    context: "head",
                    reason: format!(
                        "level {li}: expected {} channels, got {}",
                        self.spec.in_channels, s[1]
                    ),
                });
            }
            let (h, w) = (s[2], s[3]);

            let mut cls_feat = map;
            for conv in &self.cls_convs {
                cls_feat = conv.forward(store, tape, cls_feat);
            }
            let cls_map = self.cls_pred.forward(store, tape, cls_feat); // (B,K,H,W)
            cls_parts.push(tape.flatten_spatial(cls_map)); // (B,HW,K)

            let mut reg_feat = map;
            for conv in &self.reg_convs {
                reg_feat = conv.forward(store, tape, reg_feat);
            }
            let reg_map = self.reg_pred.forward(store, tape, reg_feat); // (B,4(n+1),H,W)
            let scale = tape.param(store, self.scales[li]);
            let reg_scaled = tape.mul_broadcast(reg_map, scale);
            edge_parts.push(tape.flatten_spatial(reg_scaled)); // (B,HW,4(n+1))

            let stride = pyramid.strides[li] as f64;
            for i in 0..h {
                for j in 0..w {
                    locations.push([
                        F::lit((j as f64 + 0.5) * stride),
                        F::lit((i as f64 + 0.5) * stride),
                    ]);
                    strides.push(F::lit(stride));
                    level_of.push(li);
                }
            }
        }

        let cls_logits = tape.concat(1, &cls_parts);
        let edges_flat = tape.concat(1, &edge_parts);
        let bshape = tape.value(edges_flat).shape().to_vec();
        let (b, n) = (bshape[0], bshape[1]);
        let edge_logits = tape.reshape(edges_flat, &[b, n, 4, n1]);

        let _ = k;
        Ok(HeadOutputs {
            cls_logits,
            edge_logits,
            locations: Array2::from_shape_vec(
                (locations.len(), 2),
                locations.into_iter().flatten().collect(),
            )
            .expect("locations shape"),
            strides: Array1::from_vec(strides),
            level_of,
        })
    }
}

/// Expected edge distances (Sum p_i * eps_i) of a `(..., n+1)` logit array;
/// collapses the last axis.
pub fn distribution_expectation<F: Elem>(logits: &ArrayD<F>, spec: &HeadSpec) -> ArrayD<F> {
    let probs = softmax_last_value(logits);
    let bins: Vec<F> = spec.bin_values().iter().map(|&v| F::lit(v)).collect();
    let shape = &logits.shape()[..logits.ndim() - 1];
    let mut out = ArrayD::<F>::zeros(IxDyn(shape));
    let n1 = spec.bins + 1;
    let psl = probs.as_slice().expect("softmax layout");
    for (row, o) in out.iter_mut().enumerate() {
        let seg = &psl[row * n1..(row + 1) * n1];
        let mut acc = F::zero();
        for (p, b) in seg.iter().zip(bins.iter()) {
            acc = acc + *p * *b;
        }
        *o = acc;
    }
    out
}

/// Two-hot projection of a continuous distance onto the bracketing bins
/// (the distribution with minimal fault-distribution loss).
pub fn project_to_bins<F: Elem>(distance: f64, spec: &HeadSpec) -> Vec<F> {
    let n = spec.bins;
    let u = ((distance - spec.range.0) / spec.delta()).clamp(0.0, n as f64);
    let i = (u.floor() as usize).min(n - 1);
    let mut probs = vec![F::zero(); n + 1];
    probs[i] = F::lit((i + 1) as f64 - u);
    probs[i + 1] = F::lit(u - i as f64);
    probs
}

/// Decodes per-location distances (stride units, order `t, b, l, r`) into
/// `(x1, y1, x2, y2)` boxes. When `image_size = (w, h)` is given, boxes are
/// clipped to the image.
pub fn decode_boxes<F: Elem>(
    locations: &Array2<F>,
    strides: &Array1<F>,
    distances: &Array2<F>,
    image_size: Option<(usize, usize)>,
) -> Array2<F> {
    let n = locations.nrows();
    assert_eq!(distances.nrows(), n);
    assert_eq!(strides.len(), n);
    let mut out = Array2::<F>::zeros((n, 4));
    for i in 0..n {
        let (x, y, s) = (locations[[i, 0]], locations[[i, 1]], strides[i]);
        let (t, b, l, r) =
            (distances[[i, 0]], distances[[i, 1]], distances[[i, 2]], distances[[i, 3]]);
        let mut x1 = x - l * s;
        let mut y1 = y - t * s;
        let mut x2 = x + r * s;
        let mut y2 = y + b * s;
        if let Some((w, h)) = image_size {
            let (wf, hf) = (F::lit(w as f64), F::lit(h as f64));
            x1 = x1.max(F::zero()).min(wf);
            y1 = y1.max(F::zero()).min(hf);
            x2 = x2.max(F::zero()).min(wf);
            y2 = y2.max(F::zero()).min(hf);
        }
        out[[i, 0]] = x1;
        out[[i, 1]] = y1;
        out[[i, 2]] = x2;
        out[[i, 3]] = y2;
    }
    out
}

/// Distances (stride units, `t, b, l, r`) from a location to a box's edges.
pub fn encode_distances(location: [f64; 2], stride: f64, gt: [f64; 4]) -> [f64; 4] {
    let (x, y) = (location[0], location[1]);
    [
        (y - gt[1]) / stride,
        (gt[3] - y) / stride,
        (x - gt[0]) / stride,
        (gt[2] - x) / stride,
    ]
}

/// Ground-truth box with class label, image pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: usize,
}

impl GtBox {
    pub fn area(&self) -> f64 {
        (self.x2 - self.x1).max(0.0) * (self.y2 - self.y1).max(0.0)
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Per-location training target.
#[derive(Debug, Clone, PartialEq)]
pub enum LocTarget {
    Negative,
    Positive { class_id: usize, gt_box: [f64; 4], quality: f64 },
}

/// Location-to-target map over one image.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub targets: Vec<LocTarget>,
}

impl Assignment {
    pub fn positive_indices(&self) -> Vec<usize> {
        self.targets
            .iter()
            .enumerate()
            .filter(|(_, t)| matches!(t, LocTarget::Positive { .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn num_positives(&self) -> usize {
        self.positive_indices().len()
    }

    /// Sets each positive's quality target to IoU(decoded prediction, gt),
    /// clamped to [0, 1].
    pub fn update_qualities(&mut self, pred_boxes: &Array2<f64>) {
        for (i, t) in self.targets.iter_mut().enumerate() {
            if let LocTarget::Positive { gt_box, quality, .. } = t {
                let p = [
                    pred_boxes[[i, 0]],
                    pred_boxes[[i, 1]],
                    pred_boxes[[i, 2]],
                    pred_boxes[[i, 3]],
                ];
                *quality = iou_xyxy(p, *gt_box).clamp(0.0, 1.0);
            }
        }
    }
}

/// Scale range (pixels of max edge distance) owned by each pyramid level.
fn level_range(level: usize, num_levels: usize) -> (f64, f64) {
    const BOUNDS: [f64; 6] = [0.0, 64.0, 128.0, 256.0, 512.0, f64::INFINITY];
    let lo = BOUNDS[level];
    let hi = if level + 1 >= num_levels { f64::INFINITY } else { BOUNDS[level + 1] };
    (lo, hi)
}

/// Center-sampled scale-ranged assignment: a location is positive for a box
/// when it lies strictly inside it, within 1.5 strides of its center, and
/// the max edge distance falls in the location's level range. Ties go to
/// the smallest box.
pub fn assign_targets<F: Elem>(
    locations: &Array2<F>,
    strides: &Array1<F>,
    level_of: &[usize],
    num_levels: usize,
    gt_boxes: &[GtBox],
) -> Assignment {
    let n = locations.nrows();
    let mut targets = vec![LocTarget::Negative; n];
    for i in 0..n {
        let x = locations[[i, 0]].as_f64();
        let y = locations[[i, 1]].as_f64();
        let s = strides[i].as_f64();
        let (lo, hi) = level_range(level_of[i], num_levels);
        let radius = 1.5 * s;
        let mut best: Option<(f64, &GtBox)> = None;
        for gt in gt_boxes {
            let inside = x > gt.x1 && x < gt.x2 && y > gt.y1 && y < gt.y2;
            if !inside {
                continue;
            }
            let cx = 0.5 * (gt.x1 + gt.x2);
            let cy = 0.5 * (gt.y1 + gt.y2);
            if (x - cx).abs() >= radius || (y - cy).abs() >= radius {
                continue;
            }
            let dists = [y - gt.y1, gt.y2 - y, x - gt.x1, gt.x2 - x];
            let max_dist = dists.iter().cloned().fold(0.0, f64::max);
            if max_dist < lo || max_dist >= hi {
                continue;
            }
            let area = gt.area();
            if best.map_or(true, |(a, _)| area < a) {
                best = Some((area, gt));
            }
        }
        if let Some((_, gt)) = best {
            targets[i] = LocTarget::Positive {
                class_id: gt.class_id,
                gt_box: gt.corners(),
                quality: 1.0,
            };
        }
    }
    Assignment { targets }
}

pub fn iou_xyxy(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Final detection: decoded box, class, joint classification-quality score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
    #[serde(rename = "class")]
    pub class_id: usize,
    pub score: f32,
}

/// Threshold filter, per-class NMS, global top-k.
pub fn postprocess(
    class_scores: &Array2<f32>,
    boxes: &Array2<f32>,
    score_threshold: f32,
    nms_iou: f32,
    top_k: usize,
) -> Vec<Detection> {
    let (n, k) = class_scores.dim();
    assert_eq!(boxes.nrows(), n);
    let mut out = Vec::new();
    for class_id in 0..k {
        let mut cands: Vec<Detection> = (0..n)
            .filter_map(|i| {
                let score = class_scores[[i, class_id]];
                let b = [boxes[[i, 0]], boxes[[i, 1]], boxes[[i, 2]], boxes[[i, 3]]];
                (score >= score_threshold && b[0] < b[2] && b[1] < b[3])
                    .then_some(Detection { bbox: b, class_id, score })
            })
            .collect();
        cands.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut keep: Vec<Detection> = Vec::new();
        'cand: for c in cands {
            for k in &keep {
                let i = iou_xyxy(
                    [c.bbox[0] as f64, c.bbox[1] as f64, c.bbox[2] as f64, c.bbox[3] as f64],
                    [k.bbox[0] as f64, k.bbox[1] as f64, k.bbox[2] as f64, k.bbox[3] as f64],
                );
                if i > nms_iou as f64 {
                    continue 'cand;
                }
            }
            keep.push(c);
        }
        out.extend(keep);
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out.truncate(top_k);
    out
}

/// JSON-lines serialization, one object per detection.
pub fn detections_to_jsonl(image_id: &str, detections: &[Detection]) -> String {
    let mut s = String::new();
    for d in detections {
        let rec = serde_json::json!({
            "image_id": image_id,
            "box": d.bbox,
            "class": d.class_id,
            "score": d.score,
        });
        s.push_str(&rec.to_string());
        s.push('\n');
    }
    s
}
