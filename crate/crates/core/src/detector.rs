//! Full detector assembly: backbone -> neck -> head over one parameter
//! store, with single-image inference.

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::SideConfig;
use crate::core_nn::{build_backbone, count_parameters, Backbone, ParameterReport};
use crate::error::Result;
use crate::hkh::{
    build_head, decode_boxes, distribution_expectation, postprocess, Detection, Head, HeadOutputs,
};
use crate::hkn::{build_neck, Neck};
use crate::nn::{ParamStore, Tape, Tid};

pub struct Detector {
    pub store: ParamStore<f32>,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
    pub side: SideConfig,
    pub num_classes: usize,
}

pub fn build_detector(side: &SideConfig, num_classes: usize, seed: u64) -> Result<Detector> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let backbone_spec = side.backbone_spec();
    let backbone = build_backbone(&backbone_spec, &mut store, "backbone", &mut rng)?;
    let neck = build_neck(
        side.neck_spec(),
        backbone_spec.out_channels(),
        &mut store,
        "neck",
        &mut rng,
    )?;
    let head = build_head(
        side.head_spec(num_classes),
        side.neck_levels,
        &mut store,
        "head",
        &mut rng,
    )?;
    Ok(Detector { store, backbone, neck, head, side: side.clone(), num_classes })
}

impl Detector {
    pub fn forward(&mut self, tape: &mut Tape<f32>, images: Tid) -> Result<HeadOutputs<f32>> {
        let maps = self.backbone.forward(&mut self.store, tape, images)?;
        let pyramid = self.neck.forward(&mut self.store, tape, &maps)?;
        self.head.forward(&mut self.store, tape, &pyramid)
    }

    pub fn parameter_report(&self) -> ParameterReport {
        count_parameters(&self.store)
    }

    /// Runs one preprocessed image `(3, H, W)` in eval mode and returns
    /// post-processed detections clipped to `content (H, W)`.
    pub fn infer(
        &mut self,
        tensor: &ArrayD<f32>,
        content: (usize, usize),
        score_threshold: f32,
        nms_iou: f32,
    ) -> Result<Vec<Detection>> {
        let mut tape = Tape::inference();
        let s = tensor.shape();
        let batched = tensor.to_owned().into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
            .expect("batch reshape");
        let images = tape.constant(batched);
        let out = self.forward(&mut tape, images)?;
        let n = out.locations.nrows();
        let k = self.num_classes;

        let cls = tape.value(out.cls_logits);
        let mut scores = Array2::<f32>::zeros((n, k));
        for i in 0..n {
            for c in 0..k {
                scores[[i, c]] = 1.0 / (1.0 + (-cls[[0, i, c]]).exp());
            }
        }

        let edges = tape.value(out.edge_logits).to_owned();
        let spec = &self.head.spec;
        let flat = crate::nn::tape::reshape_std(edges, &[n, 4, spec.bins + 1]);
        let exp = distribution_expectation(&flat, spec);
        let distances =
            Array2::from_shape_vec((n, 4), exp.iter().cloned().collect()).expect("distance shape");
        let strides = Array1::from_vec(out.strides.to_vec());
        let boxes =
            decode_boxes(&out.locations, &strides, &distances, Some((content.1, content.0)));

        Ok(postprocess(&scores, &boxes, score_threshold, nms_iou, 100))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_detector_builds_and_infers() {
        let side = SideConfig::default();
        let mut det = build_detector(&side, 2, 7).unwrap();
        let report = det.parameter_report();
        assert!(report.total_params > 100_000, "unexpectedly tiny: {}", report.total_params);
        assert_eq!(report.model_size_bytes, report.total_params * 4);
        assert!(report.per_module_counts.contains_key("backbone"));
        assert!(report.per_module_counts.contains_key("neck"));
        assert!(report.per_module_counts.contains_key("head"));

        let tensor = ArrayD::from_shape_fn(IxDyn(&[3, 64, 64]), |ix| {
            ((ix[1] * 7 + ix[2]) % 13) as f32 * 0.1 - 0.6
        });
        let dets = det.infer(&tensor, (64, 64), 0.05, 0.6).unwrap();
        for d in &dets {
            assert!(d.bbox[0] >= 0.0 && d.bbox[2] <= 64.0);
            assert!((0.0..=1.0).contains(&d.score));
        }
    }

    #[test]
    fn teacher_and_student_sides_share_head_geometry() {
        let c = crate::config::DistillConfig::desk();
        let t = build_detector(&c.teacher, 2, 1).unwrap();
        let s = build_detector(&c.student, 2, 2).unwrap();
        assert_eq!(t.head.spec.bins, s.head.spec.bins);
        assert_eq!(t.head.spec.range, s.head.spec.range);
        // Heterogeneous necks differ in size.
        assert_ne!(
            t.parameter_report().per_module_counts["neck"],
            s.parameter_report().per_module_counts["neck"]
        );
    }
}
