//! Dataset ingestion (COCO-style JSON annotations), deterministic
//! preprocessing and augmentation, and a synthetic missing-component scene
//! generator: a key-shaped part sits in a slot on a noisy bracket
//! background; fault images show the empty slot instead.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hkh::GtBox;

pub const CLASS_PRESENT: usize = 0;
pub const CLASS_MISSING: usize = 1;
pub const CLASS_NAMES: [&str; 2] = ["component_present", "component_missing"];

/// One loaded sample.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image_id: String,
    /// `(H, W, 3)` 8-bit pixels.
    pub pixels: Array3<u8>,
    pub boxes: Vec<GtBox>,
    pub image_fault_flag: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_train: usize,
    pub num_test: usize,
    /// `(H, W)`
    pub image_size: (usize, usize),
    pub fault_ratio: f64,
    pub clutter_level: usize,
    pub occlusion_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_train: 300,
            num_test: 100,
            image_size: (256, 256),
            fault_ratio: 0.5,
            clutter_level: 3,
            occlusion_prob: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fault_ratio) && self.fault_ratio != 1.0 {
            return Err(Error::Validation(format!(
                "fault_ratio must lie in (0,1), got {}",
                self.fault_ratio
            )));
        }
        if !(0.0..1.0).contains(&self.occlusion_prob) {
            return Err(Error::Validation(format!(
                "occlusion_prob must lie in [0,1), got {}",
                self.occlusion_prob
            )));
        }
        if self.image_size.0 < 64 || self.image_size.1 < 64 {
            return Err(Error::Validation("image_size must be at least 64x64".into()));
        }
        Ok(())
    }
}

// ---- COCO-style annotation schema ----

#[derive(Debug, Serialize, Deserialize)]
struct CocoImage {
    id: String,
    file_name: String,
    width: usize,
    height: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoAnnotation {
    id: usize,
    image_id: String,
    category_id: usize,
    /// `[x, y, w, h]`
    bbox: [f64; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoCategory {
    id: usize,
    name: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

fn annotation_path(root: &Path, split: &str) -> PathBuf {
    root.join(format!("{split}.json"))
}

// ---- generator ----

struct Scene {
    pixels: Array3<u8>,
    boxes: Vec<GtBox>,
}

fn put_rect(img: &mut Array3<u8>, x1: i64, y1: i64, x2: i64, y2: i64, value: [u8; 3]) {
    let (h, w, _) = img.dim();
    for y in y1.max(0)..y2.min(h as i64) {
        for x in x1.max(0)..x2.min(w as i64) {
            for c in 0..3 {
                img[[y as usize, x as usize, c]] = value[c];
            }
        }
    }
}

fn put_disc(img: &mut Array3<u8>, cx: f64, cy: f64, radius: f64, value: [u8; 3]) {
    let (h, w, _) = img.dim();
    let (x1, x2) = ((cx - radius) as i64, (cx + radius) as i64 + 1);
    let (y1, y2) = ((cy - radius) as i64, (cy + radius) as i64 + 1);
    for y in y1.max(0)..y2.min(h as i64) {
        for x in x1.max(0)..x2.min(w as i64) {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= radius * radius {
                for c in 0..3 {
                    img[[y as usize, x as usize, c]] = value[c];
                }
            }
        }
    }
}

fn render_scene(spec: &SyntheticSpec, fault: bool, rng: &mut ChaCha8Rng) -> Scene {
    let (h, w) = spec.image_size;
    let mut img = Array3::<u8>::zeros((h, w, 3));

    // Noisy mid-gray background.
    let base = rng.random_range(105u8..135u8);
    for y in 0..h {
        for x in 0..w {
            let n = rng.random_range(0..18) as i16 - 9;
            let v = (base as i16 + n).clamp(0, 255) as u8;
            for c in 0..3 {
                img[[y, x, c]] = v;
            }
        }
    }

    // Component slot somewhere comfortably inside the frame.
    let min_side = h.min(w) as f64;
    let bw = rng.random_range((0.22 * min_side) as i64..(0.38 * min_side) as i64);
    let bh = (bw as f64 * rng.random_range(0.62..0.85)) as i64;
    let x1 = rng.random_range((0.08 * w as f64) as i64..(w as i64 - bw - (0.08 * w as f64) as i64));
    let y1 = rng.random_range((0.12 * h as f64) as i64..(h as i64 - bh - (0.12 * h as f64) as i64));
    let (x2, y2) = (x1 + bw, y1 + bh);

    // Axle bar running behind the slot.
    let bar_half = (bh as f64 * 0.22) as i64;
    let bar_cy = y1 + bh / 2;
    let bar_v = rng.random_range(70u8..90u8);
    put_rect(&mut img, 0, bar_cy - bar_half, w as i64, bar_cy + bar_half, [bar_v; 3]);

    // Slot housing: dark frame around the component area.
    let frame = 4i64;
    let housing = rng.random_range(55u8..75u8);
    put_rect(&mut img, x1 - frame, y1 - frame, x2 + frame, y2 + frame, [housing; 3]);

    if fault {
        // Missing component: empty recess, near-black with faint speckle.
        let recess = rng.random_range(18u8..38u8);
        put_rect(&mut img, x1, y1, x2, y2, [recess; 3]);
        for _ in 0..(bw * bh / 60) {
            let px = rng.random_range(x1..x2);
            let py = rng.random_range(y1..y2);
            let v = recess.saturating_add(rng.random_range(0..14));
            put_rect(&mut img, px, py, px + 1, py + 1, [v; 3]);
        }
    } else {
        // Present component: bright key body with a head tab and a notch.
        let body = rng.random_range(195u8..235u8);
        put_rect(&mut img, x1, y1, x2, y2, [body; 3]);
        let tab_w = bw / 3;
        let tab_h = (bh as f64 * 0.3) as i64;
        put_rect(
            &mut img,
            x1 + (bw - tab_w) / 2,
            y1 - tab_h / 2,
            x1 + (bw + tab_w) / 2,
            y1 + tab_h / 2,
            [body.saturating_add(12); 3],
        );
        let notch = rng.random_range(120u8..150u8);
        put_rect(
            &mut img,
            x1 + bw / 2 - 2,
            y1 + bh / 3,
            x1 + bw / 2 + 2,
            y2,
            [notch; 3],
        );
    }

    // Distractors away from the component box.
    for _ in 0..spec.clutter_level {
        for _attempt in 0..20 {
            let cx = rng.random_range(0.0..w as f64);
            let cy = rng.random_range(0.0..h as f64);
            let radius = rng.random_range(2.0..(min_side * 0.06).max(2.5));
            let clear = cx + radius < (x1 - frame) as f64
                || cx - radius > (x2 + frame) as f64
                || cy + radius < (y1 - frame) as f64
                || cy - radius > (y2 + frame) as f64;
            if clear {
                let v = rng.random_range(60u8..180u8);
                if rng.random::<bool>() {
                    put_disc(&mut img, cx, cy, radius, [v; 3]);
                } else {
                    let r = radius as i64;
                    put_rect(
                        &mut img,
                        cx as i64 - r,
                        cy as i64 - r,
                        cx as i64 + r,
                        cy as i64 + r,
                        [v; 3],
                    );
                }
                break;
            }
        }
    }

    // Partial occluder crossing the component.
    if rng.random::<f64>() < spec.occlusion_prob {
        let occ_v = rng.random_range(85u8..110u8);
        let occ_w = (bw as f64 * rng.random_range(0.12..0.25)) as i64;
        let ox = rng.random_range(x1..x2 - occ_w.max(1));
        put_rect(&mut img, ox, 0, ox + occ_w, h as i64, [occ_v; 3]);
    }

    let class_id = if fault { CLASS_MISSING } else { CLASS_PRESENT };
    let boxes = vec![GtBox {
        x1: (x1 - frame) as f64,
        y1: (y1 - frame) as f64,
        x2: (x2 + frame) as f64,
        y2: (y2 + frame) as f64,
        class_id,
    }];
    Scene { pixels: img, boxes }
}

fn per_image_rng(seed: u64, split: &str, index: usize) -> ChaCha8Rng {
    let tag = match split {
        "train" => 1u64,
        "test" => 2u64,
        other => 0xff ^ other.len() as u64,
    };
    ChaCha8Rng::seed_from_u64(seed ^ (tag << 56) ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn save_png(path: &Path, pixels: &Array3<u8>) -> Result<()> {
    let (h, w, _) = pixels.dim();
    let raw: Vec<u8> = pixels.iter().cloned().collect();
    let img = image::RgbImage::from_raw(w as u32, h as u32, raw)
        .expect("raw buffer matches dimensions");
    img.save(path).map_err(|e| Error::dataset(path, format!("png encode: {e}")))
}

/// Writes `num_train`/`num_test` images plus `train.json`/`test.json` under
/// `out_dir`. Same spec and seed produce byte-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<()> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    for (split, count) in [("train", spec.num_train), ("test", spec.num_test)] {
        let num_fault = (count as f64 * spec.fault_ratio).round() as usize;
        let mut images = Vec::new();
        let mut annotations = Vec::new();
        let mut ann_id = 0usize;
        for i in 0..count {
            let fault = i < num_fault;
            let mut rng = per_image_rng(spec.seed, split, i);
            let scene = render_scene(spec, fault, &mut rng);
            let image_id = format!("{split}_{i:05}");
            let file_name = format!("images/{image_id}.png");
            save_png(&out_dir.join(&file_name), &scene.pixels)?;
            images.push(CocoImage {
                id: image_id.clone(),
                file_name,
                width: spec.image_size.1,
                height: spec.image_size.0,
            });
            for b in &scene.boxes {
                annotations.push(CocoAnnotation {
                    id: ann_id,
                    image_id: image_id.clone(),
                    category_id: b.class_id,
                    bbox: [b.x1, b.y1, b.x2 - b.x1, b.y2 - b.y1],
                });
                ann_id += 1;
            }
        }
        let file = CocoFile {
            images,
            annotations,
            categories: CLASS_NAMES
                .iter()
                .enumerate()
                .map(|(id, name)| CocoCategory { id, name: name.to_string() })
                .collect(),
        };
        let path = annotation_path(out_dir, split);
        let json = serde_json::to_string_pretty(&file)?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Loads and validates one split. Malformed boxes and missing files are
/// reported with the offending path or record index.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<AnnotatedImage>> {
    let ann_path = annotation_path(root, split);
    let text = fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
    let file: CocoFile = serde_json::from_str(&text)
        .map_err(|e| Error::dataset(&ann_path, format!("annotation parse: {e}")))?;

    let mut samples = Vec::with_capacity(file.images.len());
    for img_rec in &file.images {
        let img_path = root.join(&img_rec.file_name);
        if !img_path.exists() {
            return Err(Error::dataset(
                &img_path,
                format!("image referenced by `{}` does not exist", img_rec.id),
            ));
        }
        let dyn_img = image::open(&img_path)
            .map_err(|e| Error::dataset(&img_path, format!("decode: {e}")))?
            .to_rgb8();
        let (w, h) = (dyn_img.width() as usize, dyn_img.height() as usize);
        if (h, w) != (img_rec.height, img_rec.width) {
            return Err(Error::dataset(
                &img_path,
                format!(
                    "size mismatch: annotation says {}x{}, file is {h}x{w}",
                    img_rec.height, img_rec.width
                ),
            ));
        }
        let pixels = Array3::from_shape_vec((h, w, 3), dyn_img.into_raw())
            .expect("raw rgb8 buffer matches dimensions");

        let mut boxes = Vec::new();
        for (rec_idx, ann) in
            file.annotations.iter().enumerate().filter(|(_, a)| a.image_id == img_rec.id)
        {
            let [x, y, bw, bh] = ann.bbox;
            let gt = GtBox {
                x1: x,
                y1: y,
                x2: x + bw,
                y2: y + bh,
                class_id: ann.category_id,
            };
            if !(gt.x1 < gt.x2 && gt.y1 < gt.y2) {
                return Err(Error::dataset(
                    &ann_path,
                    format!("record {rec_idx}: degenerate box {:?}", ann.bbox),
                ));
            }
            if gt.x1 < 0.0 || gt.y1 < 0.0 || gt.x2 > w as f64 || gt.y2 > h as f64 {
                return Err(Error::dataset(
                    &ann_path,
                    format!("record {rec_idx}: box {:?} outside {w}x{h}", ann.bbox),
                ));
            }
            boxes.push(gt);
        }
        let image_fault_flag = boxes.iter().any(|b| b.class_id == CLASS_MISSING);
        samples.push(AnnotatedImage {
            image_id: img_rec.id.clone(),
            pixels,
            boxes,
            image_fault_flag,
        });
    }
    Ok(samples)
}

// ---- preprocessing ----

/// Per-channel pixel statistics of a dataset (unit: pixels / 255).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        Self { mean: [0.5; 3], std: [0.25; 3] }
    }
}

/// Two-pass mean/std over every pixel of every sample.
pub fn compute_channel_stats(samples: &[AnnotatedImage]) -> ChannelStats {
    let mut sum = [0.0f64; 3];
    let mut count = 0usize;
    for s in samples {
        for c in 0..3 {
            for v in s.pixels.index_axis(ndarray::Axis(2), c).iter() {
                sum[c] += *v as f64 / 255.0;
            }
        }
        count += s.pixels.dim().0 * s.pixels.dim().1;
    }
    let mean = [sum[0] / count as f64, sum[1] / count as f64, sum[2] / count as f64];
    let mut var = [0.0f64; 3];
    for s in samples {
        for c in 0..3 {
            for v in s.pixels.index_axis(ndarray::Axis(2), c).iter() {
                let d = *v as f64 / 255.0 - mean[c];
                var[c] += d * d;
            }
        }
    }
    let std = [
        (var[0] / count as f64).sqrt().max(1e-6),
        (var[1] / count as f64).sqrt().max(1e-6),
        (var[2] / count as f64).sqrt().max(1e-6),
    ];
    ChannelStats { mean, std }
}

pub fn stats_sidecar_path(root: &Path) -> PathBuf {
    root.join("stats.json")
}

/// Loads cached stats or computes and caches them from the train split.
pub fn load_or_compute_stats(root: &Path, train: &[AnnotatedImage]) -> Result<ChannelStats> {
    let path = stats_sidecar_path(root);
    if path.exists() {
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        return Ok(serde_json::from_str(&text)?);
    }
    let stats = compute_channel_stats(train);
    fs::write(&path, serde_json::to_string_pretty(&stats)?).map_err(|e| Error::io(&path, e))?;
    Ok(stats)
}

/// Mirrors boxes horizontally in an image of width `w` (an involution).
pub fn flip_boxes(boxes: &[GtBox], w: f64) -> Vec<GtBox> {
    boxes
        .iter()
        .map(|b| GtBox { x1: w - b.x2, y1: b.y1, x2: w - b.x1, y2: b.y2, class_id: b.class_id })
        .collect()
}

/// Rounds up to the next multiple of 32 (pyramid stride alignment).
pub fn pad_to_32(n: usize) -> usize {
    n.div_ceil(32) * 32
}

/// Model-ready sample: normalized CHW tensor plus transformed boxes.
pub struct Preprocessed {
    /// `(3, H', W')` with `H'`/`W'` padded to multiples of 32.
    pub tensor: ArrayD<f32>,
    pub boxes: Vec<GtBox>,
    pub flipped: bool,
    /// Content size before padding `(H, W)`.
    pub content_size: (usize, usize),
}

/// Resize (aspect-distorting) to `target (H, W)`, normalize with dataset
/// statistics, pad to stride-32 multiples with zeros, and (train only)
/// flip horizontally with probability 0.5.
pub fn preprocess(
    sample: &AnnotatedImage,
    train_mode: bool,
    target: (usize, usize),
    stats: &ChannelStats,
    rng: &mut ChaCha8Rng,
) -> Preprocessed {
    let (h0, w0, _) = sample.pixels.dim();
    let (th, tw) = target;

    // Resize via the image crate (triangle filter) unless already sized.
    let resized: Array3<u8> = if (h0, w0) == (th, tw) {
        sample.pixels.clone()
    } else {
        let raw: Vec<u8> = sample.pixels.iter().cloned().collect();
        let img = image::RgbImage::from_raw(w0 as u32, h0 as u32, raw).expect("raw buffer");
        let scaled = image::imageops::resize(
            &img,
            tw as u32,
            th as u32,
            image::imageops::FilterType::Triangle,
        );
        Array3::from_shape_vec((th, tw, 3), scaled.into_raw()).expect("resized buffer")
    };
    let sx = tw as f64 / w0 as f64;
    let sy = th as f64 / h0 as f64;
    let mut boxes: Vec<GtBox> = sample
        .boxes
        .iter()
        .map(|b| GtBox {
            x1: b.x1 * sx,
            y1: b.y1 * sy,
            x2: b.x2 * sx,
            y2: b.y2 * sy,
            class_id: b.class_id,
        })
        .collect();

    let flipped = train_mode && rng.random::<f64>() < 0.5;
    let (ph, pw) = (pad_to_32(th), pad_to_32(tw));
    let mut tensor = ArrayD::<f32>::zeros(IxDyn(&[3, ph, pw]));
    for c in 0..3 {
        let mean = stats.mean[c] as f32;
        let std = stats.std[c] as f32;
        for y in 0..th {
            for x in 0..tw {
                let src_x = if flipped { tw - 1 - x } else { x };
                let v = resized[[y, src_x, c]] as f32 / 255.0;
                tensor[[c, y, x]] = (v - mean) / std;
            }
        }
    }
    if flipped {
        boxes = flip_boxes(&boxes, tw as f64);
    }
    Preprocessed { tensor, boxes, flipped, content_size: (th, tw) }
}

/// Generation sanity report used by the post-generation audit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetAudit {
    pub num_images: usize,
    pub num_fault: usize,
    pub mean_box_area_fraction: f64,
    pub mean_aspect_ratio: f64,
}

pub fn audit_dataset(samples: &[AnnotatedImage]) -> DatasetAudit {
    let mut area_frac = 0.0;
    let mut aspect = 0.0;
    let mut boxes = 0usize;
    for s in samples {
        let (h, w, _) = s.pixels.dim();
        for b in &s.boxes {
            area_frac += (b.x2 - b.x1) * (b.y2 - b.y1) / (h * w) as f64;
            aspect += (b.x2 - b.x1) / (b.y2 - b.y1);
            boxes += 1;
        }
    }
    DatasetAudit {
        num_images: samples.len(),
        num_fault: samples.iter().filter(|s| s.image_fault_flag).count(),
        mean_box_area_fraction: area_frac / boxes.max(1) as f64,
        mean_aspect_ratio: aspect / boxes.max(1) as f64,
    }
}
