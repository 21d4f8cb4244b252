//! Image-level fault metrics (correct / missing / false detection rates),
//! their means over datasets, and inference benchmarking.

use std::time::Instant;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hkh::Detection;

/// Image-level confusion counts. `m`/`n` are ground-truth fault/normal
/// image counts; `b` counts normal images flagged as fault; `d` counts
/// fault images flagged as normal.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub m: u64,
    pub n: u64,
    pub b: u64,
    pub d: u64,
}

impl ConfusionCounts {
    pub fn merge(self, other: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts {
            m: self.m + other.m,
            n: self.n + other.n,
            b: self.b + other.b,
            d: self.d + other.d,
        }
    }

    fn total(&self) -> u64 {
        self.m + self.n
    }

    /// Missing detection rate: fault images predicted normal.
    pub fn mdr_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.d, self.total().max(1))
    }

    /// False detection rate: normal images predicted fault.
    pub fn fdr_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.b, self.total().max(1))
    }

    pub fn cdr_ratio(&self) -> Ratio<u64> {
        Ratio::new(self.total() - self.b - self.d, self.total().max(1))
    }
}

/// The published index formulas print `MDR = b/(m+n)` and `FDR = d/(m+n)`
/// with `b` drawn from the fault-predicted pile and `d` from the
/// normal-predicted pile, which swaps the usual reading of the letters. We
/// bind the semantics instead (missing = fault predicted normal, false =
/// normal predicted fault); the headline CDR is identical either way.
pub const METHODOLOGY_NOTE: &str = "MDR counts fault images predicted normal and FDR counts \
normal images predicted fault; the source formulas' b/d letters appear swapped relative to \
this semantic binding, which leaves CDR unchanged.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub name: String,
    pub counts: ConfusionCounts,
    pub cdr: f64,
    pub mdr: f64,
    pub fdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_dataset: Vec<DatasetMetrics>,
    pub mcdr: f64,
    pub mmdr: f64,
    pub mfdr: f64,
    pub methodology_note: String,
}

/// True iff any detection carries a fault class at or above the threshold.
pub fn image_fault_decision(
    detections: &[Detection],
    score_threshold: f32,
    fault_classes: &[usize],
) -> bool {
    detections
        .iter()
        .any(|d| d.score >= score_threshold && fault_classes.contains(&d.class_id))
}

/// Counts one dataset's `(predicted_fault, actually_fault)` decisions.
pub fn count_decisions(decisions: &[(bool, bool)]) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for &(predicted, actual) in decisions {
        if actual {
            c.m += 1;
            if !predicted {
                c.d += 1;
            }
        } else {
            c.n += 1;
            if predicted {
                c.b += 1;
            }
        }
    }
    c
}

/// Metrics for a single dataset.
pub fn compute_metrics(decisions: &[(bool, bool)]) -> Result<MetricReport> {
    compute_metrics_multi(&[("dataset".to_string(), decisions.to_vec())])
}

/// Metrics per dataset plus unweighted means across datasets, computed in
/// exact rational arithmetic before the float conversion.
pub fn compute_metrics_multi(datasets: &[(String, Vec<(bool, bool)>)]) -> Result<MetricReport> {
    if datasets.is_empty() || datasets.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::Validation("compute_metrics: empty decision list".into()));
    }
    let mut per_dataset = Vec::new();
    let mut sum_cdr = Ratio::new(0u64, 1u64);
    let mut sum_mdr = Ratio::new(0u64, 1u64);
    let mut sum_fdr = Ratio::new(0u64, 1u64);
    for (name, decisions) in datasets {
        let counts = count_decisions(decisions);
        let (cdr, mdr, fdr) = (counts.cdr_ratio(), counts.mdr_ratio(), counts.fdr_ratio());
        debug_assert_eq!(cdr + mdr + fdr, Ratio::new(1, 1));
        sum_cdr += cdr;
        sum_mdr += mdr;
        sum_fdr += fdr;
        per_dataset.push(DatasetMetrics {
            name: name.clone(),
            counts,
            cdr: ratio_f64(cdr),
            mdr: ratio_f64(mdr),
            fdr: ratio_f64(fdr),
        });
    }
    let k = Ratio::new(datasets.len() as u64, 1u64);
    Ok(MetricReport {
        per_dataset,
        mcdr: ratio_f64(sum_cdr / k),
        mmdr: ratio_f64(sum_mdr / k),
        mfdr: ratio_f64(sum_fdr / k),
        methodology_note: METHODOLOGY_NOTE.to_string(),
    })
}

fn ratio_f64(r: Ratio<u64>) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

/// Wall-clock and memory snapshot of repeated single-image inference.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceBenchmark {
    pub seconds_per_image: f64,
    pub peak_memory_bytes: u64,
    pub trials: usize,
    pub hardware: String,
}

/// Median wall-clock of `trials` runs of `run_once` after `warmup` runs,
/// with the process peak-RSS high-water mark and a hardware fingerprint.
/// The numbers are environment-bound and never compared across machines.
pub fn benchmark_inference(
    mut run_once: impl FnMut(),
    warmup: usize,
    trials: usize,
) -> InferenceBenchmark {
    for _ in 0..warmup {
        run_once();
    }
    let mut times = Vec::with_capacity(trials.max(1));
    for _ in 0..trials.max(1) {
        let t0 = Instant::now();
        run_once();
        times.push(t0.elapsed().as_secs_f64());
    }
    InferenceBenchmark {
        seconds_per_image: median(&mut times),
        peak_memory_bytes: peak_memory_bytes(),
        trials: trials.max(1),
        hardware: hardware_fingerprint(),
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let k = values.len();
    if k == 0 {
        return 0.0;
    }
    if k % 2 == 1 {
        values[k / 2]
    } else {
        0.5 * (values[k / 2 - 1] + values[k / 2])
    }
}

/// Linux peak-RSS (VmHWM) in bytes; 0 where unavailable.
pub fn peak_memory_bytes() -> u64 {
    let Ok(status) = std::fs::read_to_string("/proc/self/status") else {
        return 0;
    };
    for line in status.lines() {
        if let Some(rest) = line.strip_prefix("VmHWM:") {
            let kb: u64 = rest
                .trim()
                .trim_end_matches("kB")
                .trim()
                .parse()
                .unwrap_or(0);
            return kb * 1024;
        }
    }
    0
}

pub fn hardware_fingerprint() -> String {
    let model = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .map(|l| l.split(':').nth(1).unwrap_or("").trim().to_string())
        })
        .unwrap_or_else(|| "unknown-cpu".to_string());
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    format!("{model} x{cores}")
}

/// Debug-only average precision at IoU 0.5 (not a headline metric).
///
/// `per_image`: detections and ground truths per image.
pub fn debug_ap50(per_image: &[(Vec<Detection>, Vec<crate::hkh::GtBox>)], num_classes: usize) -> f64 {
    let mut aps = Vec::new();
    for class_id in 0..num_classes {
        let mut scored: Vec<(f32, usize, [f64; 4])> = Vec::new(); // (score, image, box)
        let mut gt_count = 0usize;
        for (img_idx, (dets, gts)) in per_image.iter().enumerate() {
            gt_count += gts.iter().filter(|g| g.class_id == class_id).count();
            for d in dets.iter().filter(|d| d.class_id == class_id) {
                scored.push((
                    d.score,
                    img_idx,
                    [d.bbox[0] as f64, d.bbox[1] as f64, d.bbox[2] as f64, d.bbox[3] as f64],
                ));
            }
        }
        if gt_count == 0 {
            continue;
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut matched: Vec<Vec<bool>> = per_image
            .iter()
            .map(|(_, gts)| vec![false; gts.len()])
            .collect();
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
        for (_, img_idx, bbox) in scored {
            let gts = &per_image[img_idx].1;
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts.iter().enumerate() {
                if g.class_id != class_id || matched[img_idx][gi] {
                    continue;
                }
                let iou = crate::hkh::iou_xyxy(bbox, [g.x1, g.y1, g.x2, g.y2]);
                if iou >= 0.5 && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((gi, iou));
                }
            }
            if let Some((gi, _)) = best {
                matched[img_idx][gi] = true;
                tp += 1;
            } else {
                fp += 1;
            }
            curve.push((tp as f64 / gt_count as f64, tp as f64 / (tp + fp) as f64));
        }
        // All-point interpolation.
        let mut ap = 0.0;
        let mut prev_recall = 0.0;
        for i in 0..curve.len() {
            let max_prec =
                curve[i..].iter().map(|&(_, p)| p).fold(0.0, f64::max);
            ap += (curve[i].0 - prev_recall) * max_prec;
            prev_recall = curve[i].0;
        }
        aps.push(ap);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Aligned-text table in the published column order.
pub fn format_report_table(
    report: &MetricReport,
    bench: Option<&InferenceBenchmark>,
    model_size_bytes: usize,
) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<14} {:>9} {:>9} {:>9} {:>12} {:>12} {:>12}\n",
        "dataset", "mCDR(%)", "mMDR(%)", "mFDR(%)", "memory(MB)", "infer(s/img)", "model(MB)"
    ));
    for d in &report.per_dataset {
        s.push_str(&format!(
            "{:<14} {:>9.2} {:>9.2} {:>9.2} {:>12} {:>12} {:>12}\n",
            d.name,
            d.cdr * 100.0,
            d.mdr * 100.0,
            d.fdr * 100.0,
            "-",
            "-",
            "-"
        ));
    }
    let mem = bench
        .map(|b| format!("{:.1}", b.peak_memory_bytes as f64 / (1024.0 * 1024.0)))
        .unwrap_or_else(|| "-".into());
    let inf = bench.map(|b| format!("{:.4}", b.seconds_per_image)).unwrap_or_else(|| "-".into());
    s.push_str(&format!(
        "{:<14} {:>9.2} {:>9.2} {:>9.2} {:>12} {:>12} {:>12.1}\n",
        "mean",
        report.mcdr * 100.0,
        report.mmdr * 100.0,
        report.mfdr * 100.0,
        mem,
        inf,
        model_size_bytes as f64 / (1024.0 * 1024.0)
    ));
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hand_case_eight_two() {
        // m=8 fault, n=2 normal, one false (normal->fault), one missing.
        let mut decisions = Vec::new();
        decisions.extend(std::iter::repeat_n((true, true), 7)); // correct faults
        decisions.push((false, true)); // missing
        decisions.push((true, false)); // false alarm
        decisions.push((false, false)); // correct normal
        let r = compute_metrics(&decisions).unwrap();
        let d = &r.per_dataset[0];
        assert_eq!(d.counts, ConfusionCounts { m: 8, n: 2, b: 1, d: 1 });
        assert_eq!(d.mdr, 0.1);
        assert_eq!(d.fdr, 0.1);
        assert_eq!(d.cdr, 0.8);
    }

    #[test]
    fn all_correct_is_perfect() {
        let decisions = vec![(true, true), (false, false), (true, true)];
        let r = compute_metrics(&decisions).unwrap();
        assert_eq!(r.mcdr, 1.0);
        assert_eq!(r.mmdr, 0.0);
        assert_eq!(r.mfdr, 0.0);
    }

    #[test]
    fn empty_list_is_validation_error() {
        assert!(compute_metrics(&[]).is_err());
    }

    #[test]
    fn rates_sum_to_one_exactly_and_match_brute_force() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let k = r.random_range(1..50);
            let decisions: Vec<(bool, bool)> =
                (0..k).map(|_| (r.random::<bool>(), r.random::<bool>())).collect();
            let counts = count_decisions(&decisions);
            // Exact rational identity.
            assert_eq!(
                counts.cdr_ratio() + counts.mdr_ratio() + counts.fdr_ratio(),
                num_rational::Ratio::new(1, 1)
            );
            // Brute-force confusion oracle.
            let m = decisions.iter().filter(|&&(_, a)| a).count() as u64;
            let n = decisions.len() as u64 - m;
            let b = decisions.iter().filter(|&&(p, a)| p && !a).count() as u64;
            let d = decisions.iter().filter(|&&(p, a)| !p && a).count() as u64;
            assert_eq!(counts, ConfusionCounts { m, n, b, d });
            assert!(counts.b <= counts.n && counts.d <= counts.m);
        }
    }

    #[test]
    fn permutation_invariant_over_image_order() {
        let decisions =
            vec![(true, true), (false, true), (true, false), (false, false), (true, true)];
        let mut shuffled = decisions.clone();
        shuffled.reverse();
        assert_eq!(
            compute_metrics(&decisions).unwrap().mcdr,
            compute_metrics(&shuffled).unwrap().mcdr
        );
    }

    #[test]
    fn mean_over_datasets_is_unweighted() {
        let a = vec![(true, true); 10]; // CDR 1.0
        let mut b = vec![(true, true), (false, true)]; // CDR 0.5
        b[1] = (false, true);
        let r = compute_metrics_multi(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(r.mcdr, 0.75);
    }

    #[test]
    fn fault_decision_rules() {
        let det = |class_id, score| Detection { bbox: [0.0, 0.0, 1.0, 1.0], class_id, score };
        assert!(!image_fault_decision(&[], 0.3, &[1]));
        assert!(image_fault_decision(&[det(1, 0.9)], 0.3, &[1]));
        assert!(!image_fault_decision(&[det(0, 0.99)], 0.3, &[1]));
        assert!(!image_fault_decision(&[det(1, 0.2)], 0.3, &[1]));
    }

    #[test]
    fn raising_threshold_never_increases_false_count() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        // Random detections on 40 normal images; count flagged images as the
        // threshold rises.
        let images: Vec<Vec<Detection>> = (0..40)
            .map(|_| {
                (0..r.random_range(0..4))
                    .map(|_| Detection {
                        bbox: [0.0, 0.0, 5.0, 5.0],
                        class_id: r.random_range(0..2),
                        score: r.random::<f32>(),
                    })
                    .collect()
            })
            .collect();
        let mut prev = usize::MAX;
        for t in [0.0f32, 0.2, 0.4, 0.6, 0.8, 1.0] {
            let b = images.iter().filter(|d| image_fault_decision(d, t, &[1])).count();
            assert!(b <= prev, "threshold {t} raised false count");
            prev = b;
        }
    }

    #[test]
    fn median_handles_outliers_and_single_trial() {
        let mut times = vec![1.0, 1.1, 0.9, 100.0, 1.05];
        assert!((median(&mut times) - 1.05).abs() < 1e-12);
        let mut one = vec![42.0];
        assert_eq!(median(&mut one), 42.0);
    }

    #[test]
    fn benchmark_reports_hardware_and_memory() {
        let b = benchmark_inference(|| std::hint::black_box(()), 0, 1);
        assert_eq!(b.trials, 1);
        assert!(!b.hardware.is_empty());
        assert!(b.seconds_per_image >= 0.0);
        // Linux high-water mark should be present in this environment.
        assert!(b.peak_memory_bytes > 0);
    }

    #[test]
    fn ap50_perfect_and_empty() {
        use crate::hkh::GtBox;
        let gt = GtBox { x1: 10.0, y1: 10.0, x2: 50.0, y2: 50.0, class_id: 0 };
        let hit = Detection { bbox: [10.0, 10.0, 50.0, 50.0], class_id: 0, score: 0.9 };
        let per_image = vec![(vec![hit], vec![gt])];
        assert!((debug_ap50(&per_image, 1) - 1.0).abs() < 1e-12);
        let per_image_empty: Vec<(Vec<Detection>, Vec<GtBox>)> = vec![(vec![], vec![gt])];
        assert_eq!(debug_ap50(&per_image_empty, 1), 0.0);
    }

    #[test]
    fn report_table_has_published_column_order() {
        let r = compute_metrics(&[(true, true), (false, false)]).unwrap();
        let table = format_report_table(&r, None, 4 * 1024 * 1024);
        let header = table.lines().next().unwrap();
        let cols: Vec<&str> = header.split_whitespace().collect();
        assert_eq!(
            cols,
            vec!["dataset", "mCDR(%)", "mMDR(%)", "mFDR(%)", "memory(MB)", "infer(s/img)", "model(MB)"]
        );
        assert!(r.methodology_note.contains("swapped"));
    }
}
