//! Two-phase heterogeneous self-distillation: train the teacher without
//! distillation, freeze it, then train the student with the softened-KL
//! edge term against the frozen teacher. Owns the optimizer, the step
//! schedule, augmentation wiring, evaluation and the ablation harness.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{DataConfig, DistillConfig, SideConfig};
use crate::data_io::{
    load_dataset, load_or_compute_stats, preprocess, AnnotatedImage, ChannelStats,
};
use crate::detector::{build_detector, Detector};
use crate::error::{Error, Result};
use crate::eval_metrics::{
    compute_metrics, debug_ap50, image_fault_decision, MetricReport,
};
use crate::hkh::{assign_targets, encode_distances, LocTarget};
use crate::losses::{fcl, fdl, frl_giou_from_distances, hkd, total_loss, LossBundle, LossWeights};
use crate::nn::tape::reshape_std;
use crate::nn::{Tape, Tid};

/// One CSV row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub iteration: u64,
    pub fcl: f64,
    pub fdl: f64,
    pub frl: f64,
    pub hkd: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "iteration,fcl,fdl,frl,hkd,total";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub role: String,
    pub checkpoint_path: PathBuf,
    pub loss_log_path: PathBuf,
    pub lr_by_epoch: Vec<f64>,
    pub epoch_mean_total: Vec<f64>,
    pub report: MetricReport,
    pub debug_ap50: f64,
    pub clamp_events: u64,
    /// hkd component at the first logged iteration (students only).
    pub initial_hkd: Option<f64>,
    /// Teacher weights hash before and after student training.
    pub teacher_hash: Option<(String, String)>,
    pub total_params: usize,
    pub rows: Vec<LossRow>,
}

/// Deterministic per-(seed, epoch) shuffle rng.
fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 40) ^ 0xA5A5_5A5A)
}

/// Deterministic per-sample augmentation rng.
fn sample_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            ^ ((epoch as u64) << 32)
            ^ (index as u64).wrapping_mul(0xD130_2B97_9AF5_F9E1),
    )
}

fn stack_batch(tensors: &[ArrayD<f32>]) -> ArrayD<f32> {
    let views: Vec<_> = tensors.iter().map(|t| t.view()).collect();
    ndarray::stack(Axis(0), &views).expect("uniform batch shapes")
}

struct BatchTargets {
    cls_targets: Array2<f32>,
    pos_indices: Vec<usize>,
    pos_locations: Array2<f64>,
    pos_strides: Array1<f64>,
    pos_gt_boxes: Array2<f64>,
    pos_qualities: Array1<f64>,
    pos_dist_targets: Array2<f64>,
}

/// Runs assignment per image and assembles the flattened training targets.
/// Quality targets are the IoUs between the current decoded predictions and
/// their ground-truth boxes.
fn build_targets(
    tape: &Tape<f32>,
    outputs: &crate::hkh::HeadOutputs<f32>,
    boxes_per_image: &[Vec<crate::hkh::GtBox>],
    head_spec: &crate::hkh::HeadSpec,
    levels: usize,
    num_classes: usize,
) -> BatchTargets {
    let n = outputs.locations.nrows();
    let b = boxes_per_image.len();

    // Expected distances for the whole batch (values only, no grad).
    let edges_value = tape.value(outputs.edge_logits).to_owned();
    let flat = reshape_std(edges_value, &[b * n, 4, head_spec.bins + 1]);
    let expectation = crate::hkh::distribution_expectation(&flat, head_spec);

    let mut cls_targets = Array2::<f32>::zeros((b * n, num_classes));
    let mut pos_indices = Vec::new();
    let mut pos_locations = Vec::new();
    let mut pos_strides = Vec::new();
    let mut pos_gt = Vec::new();
    let mut pos_quality = Vec::new();
    let mut pos_dist = Vec::new();

    for (bi, gt_boxes) in boxes_per_image.iter().enumerate() {
        let mut assignment =
            assign_targets(&outputs.locations, &outputs.strides, &outputs.level_of, levels, gt_boxes);
        // Decode current predictions at the positives to set quality.
        let mut pred_boxes = Array2::<f64>::zeros((n, 4));
        for i in assignment.positive_indices() {
            let row = bi * n + i;
            let (x, y, s) = (
                outputs.locations[[i, 0]] as f64,
                outputs.locations[[i, 1]] as f64,
                outputs.strides[i] as f64,
            );
            let (t, bo, l, r) = (
                expectation[[row, 0]] as f64,
                expectation[[row, 1]] as f64,
                expectation[[row, 2]] as f64,
                expectation[[row, 3]] as f64,
            );
            pred_boxes[[i, 0]] = x - l * s;
            pred_boxes[[i, 1]] = y - t * s;
            pred_boxes[[i, 2]] = x + r * s;
            pred_boxes[[i, 3]] = y + bo * s;
        }
        assignment.update_qualities(&pred_boxes);

        for (i, target) in assignment.targets.iter().enumerate() {
            if let LocTarget::Positive { class_id, gt_box, quality } = target {
                let row = bi * n + i;
                cls_targets[[row, *class_id]] = *quality as f32;
                pos_indices.push(row);
                let loc = [outputs.locations[[i, 0]] as f64, outputs.locations[[i, 1]] as f64];
                let stride = outputs.strides[i] as f64;
                pos_locations.push(loc);
                pos_strides.push(stride);
                pos_gt.push(*gt_box);
                pos_quality.push(*quality);
                pos_dist.push(encode_distances(loc, stride, *gt_box));
            }
        }
    }

    let p = pos_indices.len();
    BatchTargets {
        cls_targets,
        pos_indices,
        pos_locations: Array2::from_shape_vec((p, 2), pos_locations.into_iter().flatten().collect())
            .expect("pos locations"),
        pos_strides: Array1::from_vec(pos_strides),
        pos_gt_boxes: Array2::from_shape_vec((p, 4), pos_gt.into_iter().flatten().collect())
            .expect("pos boxes"),
        pos_qualities: Array1::from_vec(pos_quality),
        pos_dist_targets: Array2::from_shape_vec((p, 4), pos_dist.into_iter().flatten().collect())
            .expect("pos distances"),
    }
}

/// Assembles the four losses for one batch; returns the tape root, the
/// component bundle and the distribution-target clamp count.
#[allow(clippy::too_many_arguments)]
fn batch_loss(
    tape: &mut Tape<f32>,
    outputs: &crate::hkh::HeadOutputs<f32>,
    targets: &BatchTargets,
    teacher_edges: Option<&ArrayD<f32>>,
    weights: &LossWeights,
    head_spec: &crate::hkh::HeadSpec,
    num_classes: usize,
    iteration: u64,
) -> Result<(Tid, LossBundle, usize)> {
    let shape = tape.value(outputs.cls_logits).shape().to_vec();
    let (b, n) = (shape[0], shape[1]);
    let num_pos = targets.pos_indices.len();

    let cls_flat = tape.reshape(outputs.cls_logits, &[b * n, num_classes]);
    let fcl_t = fcl(tape, cls_flat, &targets.cls_targets, num_pos)?;

    let edge_flat = tape.reshape(outputs.edge_logits, &[b * n, 4, head_spec.bins + 1]);
    let pos_edges = tape.gather_rows(edge_flat, &targets.pos_indices);

    let (fdl_t, clamped) = fdl(tape, pos_edges, &targets.pos_dist_targets, head_spec);

    let bins: Vec<f32> = head_spec.bin_values().iter().map(|&v| v as f32).collect();
    let probs = tape.softmax_last(pos_edges);
    let distances = tape.dot_last(probs, &bins);
    let frl_t = frl_giou_from_distances(
        tape,
        distances,
        &targets.pos_locations,
        &targets.pos_strides,
        &targets.pos_gt_boxes,
        &targets.pos_qualities,
    );

    let hkd_t = match teacher_edges {
        Some(te) => {
            let te_flat = reshape_std(te.to_owned(), &[b * n, 4, head_spec.bins + 1]);
            let mut te_rows = ArrayD::<f32>::zeros(IxDyn(&[
                targets.pos_indices.len(),
                4,
                head_spec.bins + 1,
            ]));
            for (dst, &src) in targets.pos_indices.iter().enumerate() {
                te_rows
                    .index_axis_mut(Axis(0), dst)
                    .assign(&te_flat.index_axis(Axis(0), src));
            }
            Some(hkd(tape, pos_edges, &te_rows, weights.tau)?)
        }
        None => None,
    };

    let (total, bundle) = total_loss(tape, fcl_t, fdl_t, frl_t, hkd_t, weights, iteration)?;
    Ok((total, bundle, clamped))
}

pub struct EvalOutcome {
    pub report: MetricReport,
    pub decisions: Vec<(bool, bool)>,
    pub ap50: f64,
}

/// Eval-mode pass over a split: preprocess, infer, image-level decision.
pub fn evaluate_detector(
    det: &mut Detector,
    samples: &[AnnotatedImage],
    stats: &ChannelStats,
    data: &DataConfig,
) -> Result<EvalOutcome> {
    let mut decisions = Vec::with_capacity(samples.len());
    let mut per_image = Vec::with_capacity(samples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sample in samples {
        let p = preprocess(sample, false, (data.image_size[0], data.image_size[1]), stats, &mut rng);
        let dets = det.infer(
            &p.tensor,
            p.content_size,
            data.eval_score_threshold as f32,
            data.nms_iou as f32,
        )?;
        let predicted =
            image_fault_decision(&dets, data.decision_threshold as f32, &data.fault_classes);
        decisions.push((predicted, sample.image_fault_flag));
        per_image.push((dets, p.boxes));
    }
    let report = compute_metrics(&decisions)?;
    let ap50 = debug_ap50(&per_image, data.num_classes);
    Ok(EvalOutcome { report, decisions, ap50 })
}

enum Phase<'a> {
    Teacher { resume: Option<&'a Path> },
    Student { teacher_checkpoint: &'a Path },
}

/// Teacher phase: no distillation term (`hkd_weight = 0`).
pub fn train_teacher(
    config: &DistillConfig,
    data_root: &Path,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    run_training(config, data_root, out_dir, Phase::Teacher { resume })
}

/// Student phase: frozen teacher supplies softened edge distributions.
pub fn train_student(
    config: &DistillConfig,
    data_root: &Path,
    teacher_checkpoint: &Path,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    run_training(config, data_root, out_dir, Phase::Student { teacher_checkpoint })
}

fn run_training(
    config: &DistillConfig,
    data_root: &Path,
    out_dir: &Path,
    phase: Phase<'_>,
) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let train_samples = load_dataset(data_root, "train")?;
    if train_samples.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    let test_samples = load_dataset(data_root, "test")?;
    let stats = load_or_compute_stats(data_root, &train_samples)?;

    let schedule = &config.schedule;
    let (role, side): (&str, &SideConfig) = match phase {
        Phase::Teacher { .. } => ("teacher", &config.teacher),
        Phase::Student { .. } => ("student", &config.student),
    };
    let mut weights = config.loss.weights();
    if matches!(phase, Phase::Teacher { .. }) {
        weights.hkd_weight = 0.0;
    }

    // Frozen teacher for the student phase.
    let mut teacher: Option<Detector> = None;
    let mut teacher_hash_before = None;
    if let Phase::Student { teacher_checkpoint } = &phase {
        let mut t = build_detector(&config.teacher, config.data.num_classes, schedule.seed)?;
        let ckpt = checkpoint::load(teacher_checkpoint)?;
        checkpoint::apply(&ckpt, &mut t.store)?;
        t.store.freeze_all();
        teacher_hash_before = Some(t.store.weights_hash());
        teacher = Some(t);
    }

    let mut det = build_detector(side, config.data.num_classes, schedule.seed.wrapping_add(1))?;

    // Student warm start copies the teacher weights (architectures must
    // match for this to be meaningful; the fingerprint check enforces it).
    if schedule.warm_start {
        if let Some(t) = &teacher {
            det.store.copy_values_from(&t.store)?;
        }
    }

    // Resume support for the teacher phase.
    let mut start_epoch = 1usize;
    let mut iteration: u64 = 0;
    let mut resume_mode = false;
    if let Phase::Teacher { resume: Some(path) } = &phase {
        let ckpt = checkpoint::load(path)?;
        checkpoint::apply(&ckpt, &mut det.store)?;
        start_epoch = ckpt.manifest.epoch as usize + 1;
        iteration = ckpt.manifest.iteration;
        resume_mode = true;
    }

    let loss_log_path = out_dir.join("loss_log.csv");
    let mut log = if resume_mode {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&loss_log_path)
            .map_err(|e| Error::io(&loss_log_path, e))?
    } else {
        let mut f = fs::File::create(&loss_log_path).map_err(|e| Error::io(&loss_log_path, e))?;
        writeln!(f, "{LOSS_CSV_HEADER}").map_err(|e| Error::io(&loss_log_path, e))?;
        f
    };

    let head_spec = det.head.spec;
    let levels = side.neck_levels;
    let target_size = (config.data.image_size[0], config.data.image_size[1]);
    let mut rows: Vec<LossRow> = Vec::new();
    let mut lr_by_epoch = Vec::new();
    let mut epoch_mean_total = Vec::new();
    let mut clamp_events: u64 = 0;
    let mut initial_hkd = None;

    for epoch in start_epoch..=schedule.epochs {
        let lr = schedule.lr_at_epoch(epoch);
        lr_by_epoch.push(lr);

        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut shuffle_rng(schedule.seed, epoch));

        let mut epoch_total = 0.0;
        let mut epoch_batches = 0usize;

        for chunk in order.chunks(schedule.batch_size) {
            let mut tensors = Vec::with_capacity(chunk.len());
            let mut boxes_per_image = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let mut rng = sample_rng(schedule.seed, epoch, idx);
                let p = preprocess(&train_samples[idx], true, target_size, &stats, &mut rng);
                tensors.push(p.tensor);
                boxes_per_image.push(p.boxes);
            }
            let batch = stack_batch(&tensors);

            // Frozen teacher forward (batch statistics, no writes) so a
            // warm-started student reproduces its logits exactly.
            let teacher_edges: Option<ArrayD<f32>> = match &mut teacher {
                Some(t) => {
                    let mut ttape = Tape::frozen_batchstats();
                    let images = ttape.constant(batch.clone());
                    let tout = t.forward(&mut ttape, images)?;
                    Some(ttape.value(tout.edge_logits).to_owned())
                }
                None => None,
            };

            let mut tape = Tape::new(true);
            let images = tape.constant(batch);
            let outputs = det.forward(&mut tape, images)?;
            let targets = build_targets(
                &tape,
                &outputs,
                &boxes_per_image,
                &head_spec,
                levels,
                config.data.num_classes,
            );
            let (total, bundle, clamped) = match batch_loss(
                &mut tape,
                &outputs,
                &targets,
                teacher_edges.as_ref(),
                &weights,
                &head_spec,
                config.data.num_classes,
                iteration,
            ) {
                Ok(v) => v,
                Err(e) => {
                    dump_state(out_dir, role, epoch, iteration, &e)?;
                    return Err(e);
                }
            };
            clamp_events += clamped as u64;

            tape.backward(total);
            tape.collect_param_grads(&mut det.store);
            det.store.sgd_step(
                lr as f32,
                schedule.momentum as f32,
                schedule.weight_decay as f32,
                schedule.clip_norm as f32,
            );

            if initial_hkd.is_none() {
                initial_hkd = Some(bundle.hkd);
            }
            let row = LossRow {
                iteration,
                fcl: bundle.fcl,
                fdl: bundle.fdl,
                frl: bundle.frl,
                hkd: bundle.hkd,
                total: bundle.total,
            };
            writeln!(
                log,
                "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
                row.iteration, row.fcl, row.fdl, row.frl, row.hkd, row.total
            )
            .map_err(|e| Error::io(&loss_log_path, e))?;
            rows.push(row);
            epoch_total += bundle.total;
            epoch_batches += 1;
            iteration += 1;
        }
        epoch_mean_total.push(epoch_total / epoch_batches.max(1) as f64);

        // The teacher must stay frozen through every epoch.
        if let (Some(t), Some(before)) = (&teacher, &teacher_hash_before) {
            let now = t.store.weights_hash();
            if &now != before {
                return Err(Error::Validation(format!(
                    "teacher weights changed during epoch {epoch}"
                )));
            }
        }
    }
    log.flush().map_err(|e| Error::io(&loss_log_path, e))?;

    let eval = evaluate_detector(&mut det, &test_samples, &stats, &config.data)?;
    let report = eval.report;

    let checkpoint_path = out_dir.join(format!("{role}.ckpt"));
    checkpoint::save(
        &det.store,
        &checkpoint_path,
        serde_json::json!({ "role": role, "config": config }),
        schedule.epochs as u64,
        iteration,
        serde_json::to_value(&report)?,
        true,
    )?;

    let teacher_hash = match (&teacher, teacher_hash_before) {
        (Some(t), Some(before)) => Some((before, t.store.weights_hash())),
        _ => None,
    };

    Ok(TrainOutcome {
        role: role.to_string(),
        checkpoint_path,
        loss_log_path,
        lr_by_epoch,
        epoch_mean_total,
        report,
        debug_ap50: eval.ap50,
        clamp_events,
        initial_hkd: if matches!(phase, Phase::Student { .. }) { initial_hkd } else { None },
        teacher_hash,
        total_params: det.parameter_report().total_params,
        rows,
    })
}

fn dump_state(out_dir: &Path, role: &str, epoch: usize, iteration: u64, err: &Error) -> Result<()> {
    let path = out_dir.join("state_dump.json");
    let dump = serde_json::json!({
        "role": role,
        "epoch": epoch,
        "iteration": iteration,
        "error": err.to_string(),
    });
    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| Error::io(&path, e))
}

/// Rebuilds a detector from a checkpoint's embedded config echo.
pub fn load_detector_from_checkpoint(path: &Path) -> Result<(Detector, checkpoint::Manifest)> {
    let ckpt = checkpoint::load(path)?;
    let role = ckpt.manifest.config["role"].as_str().unwrap_or("teacher").to_string();
    let config: DistillConfig = serde_json::from_value(ckpt.manifest.config["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
    let side = if role == "student" { &config.student } else { &config.teacher };
    let seed = config.schedule.seed.wrapping_add(1);
    let mut det = build_detector(side, config.data.num_classes, seed)?;
    checkpoint::apply(&ckpt, &mut det.store)?;
    Ok((det, ckpt.manifest))
}

// ---- ablation harness ----

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Train one detector without distillation (neck design rows).
    DetectorOnly,
    /// Full two-phase teacher -> student run.
    Distill,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub config: DistillConfig,
    pub mode: AblationMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationResult {
    pub label: String,
    pub fingerprint: String,
    pub cdr: f64,
    pub mdr: f64,
    pub fdr: f64,
    pub params: usize,
    pub wall_clock_s: f64,
    pub status: String,
}

/// Pyramid/smoothing/attention design rows (detector only).
pub fn grid_neck(base: &DistillConfig) -> Vec<AblationRow> {
    crate::hkn::neck_ablation_variants(base.student.neck_spec())
        .into_iter()
        .map(|spec| {
            let mut config = base.clone();
            config.student.neck_out_channels = spec.out_channels;
            config.student.neck_levels = spec.levels;
            config.student.neck_fca = spec.fca_enabled;
            config.student.neck_smoothing = spec.smoothing;
            AblationRow { label: spec.label(), config, mode: AblationMode::DetectorOnly }
        })
        .collect()
}

/// Neck-design x distillation-loss grid (4 rows).
pub fn grid_components(base: &DistillConfig) -> Vec<AblationRow> {
    let mut rows = Vec::new();
    for (hkn_on, hkh_on) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut config = base.clone();
        for side in [&mut config.teacher, &mut config.student] {
            if hkn_on {
                side.neck_fca = true;
                side.neck_smoothing = crate::hkn::Smoothing::DsConvK7;
            } else {
                side.neck_fca = false;
                side.neck_smoothing = crate::hkn::Smoothing::StandardK3;
            }
        }
        config.loss.hkd_weight = if hkh_on { 1.0 } else { 0.0 };
        let label = format!(
            "HKN={} HKH={}",
            if hkn_on { "on" } else { "off" },
            if hkh_on { "on" } else { "off" }
        );
        rows.push(AblationRow { label, config, mode: AblationMode::Distill });
    }
    rows
}

/// Distillation temperature sweep.
pub fn grid_tau(base: &DistillConfig) -> Vec<AblationRow> {
    [1.0, 5.0, 10.0, 15.0, 20.0]
        .into_iter()
        .map(|tau| {
            let mut config = base.clone();
            config.loss.tau = tau;
            AblationRow { label: format!("tau={tau}"), config, mode: AblationMode::Distill }
        })
        .collect()
}

/// Loss-weight sweep for the distribution/regression balance.
pub fn grid_lambda(base: &DistillConfig) -> Vec<AblationRow> {
    crate::losses::lambda_sweep_grid()
        .into_iter()
        .map(|(l1, l2)| {
            let mut config = base.clone();
            config.loss.lambda1 = l1;
            config.loss.lambda2 = l2;
            AblationRow {
                label: format!("lambda1={l1} lambda2={l2}"),
                config,
                mode: AblationMode::Distill,
            }
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str =
    "label,fingerprint,cdr,mdr,fdr,params,wall_clock_s,status";

/// Runs every row, sharing teacher checkpoints across rows with identical
/// teacher-phase configurations. Failures are recorded per row and do not
/// stop the grid.
pub fn run_ablation(
    rows: &[AblationRow],
    data_root: &Path,
    out_dir: &Path,
) -> Result<Vec<AblationResult>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut teacher_cache: BTreeMap<String, PathBuf> = BTreeMap::new();
    let mut results = Vec::new();

    for (i, row) in rows.iter().enumerate() {
        let cell_dir = out_dir.join(format!("cell_{i:02}"));
        let started = Instant::now();
        let outcome: Result<(MetricReport, usize)> = (|| {
            match row.mode {
                AblationMode::DetectorOnly => {
                    let mut config = row.config.clone();
                    // A detector-only row trains the deployed side without
                    // any distillation term.
                    config.teacher = config.student.clone();
                    let out = train_teacher(&config, data_root, &cell_dir, None)?;
                    Ok((out.report, out.total_params))
                }
                AblationMode::Distill => {
                    let teacher_key = {
                        let mut probe = row.config.clone();
                        probe.student = SideConfig::default();
                        probe.loss.tau = 0.0_f64.max(1.0); // student-only knobs excluded
                        probe.loss.lambda1 = 0.0;
                        probe.loss.lambda2 = 0.0;
                        probe.loss.hkd_weight = 0.0;
                        probe.fingerprint()
                    };
                    let teacher_ckpt = match teacher_cache.get(&teacher_key) {
                        Some(p) => p.clone(),
                        None => {
                            let tdir = out_dir.join(format!("teacher_{teacher_key}"));
                            let out = train_teacher(&row.config, data_root, &tdir, None)?;
                            teacher_cache.insert(teacher_key.clone(), out.checkpoint_path.clone());
                            out.checkpoint_path
                        }
                    };
                    let out = train_student(&row.config, data_root, &teacher_ckpt, &cell_dir)?;
                    Ok((out.report, out.total_params))
                }
            }
        })();

        let wall_clock_s = started.elapsed().as_secs_f64();
        let result = match outcome {
            Ok((report, params)) => AblationResult {
                label: row.label.clone(),
                fingerprint: row.config.fingerprint(),
                cdr: report.mcdr,
                mdr: report.mmdr,
                fdr: report.mfdr,
                params,
                wall_clock_s,
                status: "ok".into(),
            },
            Err(e) => AblationResult {
                label: row.label.clone(),
                fingerprint: row.config.fingerprint(),
                cdr: f64::NAN,
                mdr: f64::NAN,
                fdr: f64::NAN,
                params: 0,
                wall_clock_s,
                status: e.to_string().replace(',', ";"),
            },
        };
        results.push(result);
    }

    let csv_path = out_dir.join("ablation.csv");
    let mut f = fs::File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    writeln!(f, "{ABLATION_CSV_HEADER}").map_err(|e| Error::io(&csv_path, e))?;
    for r in &results {
        writeln!(
            f,
            "{},{},{:.6},{:.6},{:.6},{},{:.3},{}",
            r.label, r.fingerprint, r.cdr, r.mdr, r.fdr, r.params, r.wall_clock_s, r.status
        )
        .map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(results)
}
