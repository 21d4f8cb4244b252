//! Run configuration: plain-text TOML with `[teacher]`, `[student]`,
//! `[loss]`, `[schedule]` and `[data]` sections, plus last-wins
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core_nn::BackboneSpec;
use crate::error::{Error, Result};
use crate::hkh::HeadSpec;
use crate::hkn::{NeckSpec, Smoothing};
use crate::losses::LossWeights;

/// Architecture of one side (teacher or student).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SideConfig {
    pub backbone_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub neck_out_channels: usize,
    pub neck_fca: bool,
    pub neck_smoothing: Smoothing,
    pub neck_levels: usize,
    pub head_stacked_convs: usize,
    pub head_bins: usize,
    pub head_range: [f64; 2],
}

impl Default for SideConfig {
    fn default() -> Self {
        Self {
            backbone_channels: vec![32, 64, 128],
            blocks_per_stage: vec![1, 1, 1],
            neck_out_channels: 64,
            neck_fca: true,
            neck_smoothing: Smoothing::DsConvK7,
            neck_levels: 5,
            head_stacked_convs: 2,
            head_bins: 16,
            head_range: [0.0, 16.0],
        }
    }
}

impl SideConfig {
    pub fn backbone_spec(&self) -> BackboneSpec {
        BackboneSpec {
            stage_channels: self.backbone_channels.clone(),
            blocks_per_stage: self.blocks_per_stage.clone(),
            input_channels: 3,
        }
    }

    pub fn neck_spec(&self) -> NeckSpec {
        NeckSpec {
            out_channels: self.neck_out_channels,
            levels: self.neck_levels,
            fca_enabled: self.neck_fca,
            smoothing: self.neck_smoothing,
        }
    }

    pub fn head_spec(&self, num_classes: usize) -> HeadSpec {
        HeadSpec {
            num_classes,
            in_channels: self.neck_out_channels,
            stacked_convs: self.head_stacked_convs,
            bins: self.head_bins,
            range: (self.head_range[0], self.head_range[1]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    pub hkd_weight: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self { lambda1: w.lambda1, lambda2: w.lambda2, tau: w.tau, hkd_weight: w.hkd_weight }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            tau: self.tau,
            hkd_weight: self.hkd_weight,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub seed: u64,
    /// Initialize the student from the teacher checkpoint (requires
    /// matching architectures).
    pub warm_start: bool,
    pub clip_norm: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        // Desk-scale schedule; the published setup uses lr 1e-4.
        Self {
            epochs: 12,
            batch_size: 4,
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-5,
            lr_decay_epochs: vec![8, 11],
            lr_decay_factor: 0.1,
            seed: 7,
            warm_start: false,
            clip_norm: 35.0,
        }
    }
}

impl ScheduleConfig {
    /// Piecewise-constant learning rate for a 1-based epoch index.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&d| epoch >= d).count();
        self.lr * self.lr_decay_factor.powi(drops as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub root: String,
    /// `(H, W)` model input size.
    pub image_size: [usize; 2],
    pub num_classes: usize,
    pub fault_classes: Vec<usize>,
    /// Image-level fault decision threshold.
    pub decision_threshold: f64,
    /// Detection filter threshold for metric-style evaluation.
    pub eval_score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: "data/synth".into(),
            image_size: [256, 256],
            num_classes: 2,
            fault_classes: vec![1],
            decision_threshold: 0.3,
            eval_score_threshold: 0.05,
            nms_iou: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub teacher: SideConfig,
    pub student: SideConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub data: DataConfig,
}

impl DistillConfig {
    /// Desk-scale preset: teacher with standard smoothing, student with the
    /// depthwise-separable k7 neck, both with coordinate attention.
    pub fn desk() -> Self {
        let teacher = SideConfig { neck_smoothing: Smoothing::StandardK3, ..SideConfig::default() };
        Self { teacher, ..Self::default() }
    }

    /// Published configuration: ResNet-18 class backbone, 700x512 inputs
    /// (padded to 704), SGD lr 1e-4, 12-epoch schedule.
    pub fn paper() -> Self {
        let side = SideConfig {
            backbone_channels: vec![64, 128, 256, 512],
            blocks_per_stage: vec![2, 2, 2, 2],
            neck_out_channels: 256,
            head_stacked_convs: 4,
            ..SideConfig::default()
        };
        let teacher = SideConfig { neck_smoothing: Smoothing::StandardK3, ..side.clone() };
        Self {
            teacher,
            student: side,
            loss: LossConfig::default(),
            schedule: ScheduleConfig { lr: 1e-4, ..ScheduleConfig::default() },
            data: DataConfig { image_size: [512, 700], ..DataConfig::default() },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.teacher.head_bins != self.student.head_bins
            || self.teacher.head_range != self.student.head_range
        {
            return Err(Error::Config(
                "teacher and student must share head bins and range (distillation aligns bins)"
                    .into(),
            ));
        }
        if self.schedule.epochs == 0 || self.schedule.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if self.schedule.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        self.teacher.backbone_spec().validate()?;
        self.student.backbone_spec().validate()?;
        self.teacher.neck_spec().validate()?;
        self.student.neck_spec().validate()?;
        self.teacher.head_spec(self.data.num_classes).validate()?;
        self.student.head_spec(self.data.num_classes).validate()?;
        crate::losses::LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            tau: self.loss.tau,
            hkd_weight: self.loss.hkd_weight,
        }
        .validate()?;
        Ok(())
    }

    /// Short hex digest identifying this configuration.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        let out = h.finalize();
        out.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Parses a TOML config file, then applies dotted `key=value` overrides
/// (last wins).
pub fn load_config(path: &Path, overrides: &[String]) -> Result<DistillConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, overrides)
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<DistillConfig> {
    let mut value: toml::Value =
        toml::from_str(text).map_err(|e| Error::Config(format!("toml parse: {e}")))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let config: DistillConfig =
        value.try_into().map_err(|e| Error::Config(format!("config shape: {e}")))?;
    config.validate()?;
    Ok(config)
}

fn apply_override(root: &mut toml::Value, ov: &str) -> Result<()> {
    let (key, raw) = ov
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
    let key = key.trim();
    let raw = raw.trim();
    // Parse the value as a TOML literal; fall back to a bare string.
    let parsed: toml::Value = toml::from_str::<toml::Value>(&format!("v = {raw}"))
        .ok()
        .and_then(|t| t.get("v").cloned())
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    if parts.is_empty() {
        return Err(Error::Config(format!("override `{ov}` has an empty key")));
    }
    let mut cursor = root;
    for part in &parts[..parts.len() - 1] {
        if cursor.get(part).is_none() {
            cursor
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("override `{ov}`: `{part}` not a table")))?
                .insert(part.to_string(), toml::Value::Table(Default::default()));
        }
        cursor = cursor.get_mut(part).expect("just inserted");
    }
    cursor
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{ov}`: parent is not a table")))?
        .insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Effective-config echo written next to every run's outputs.
pub fn write_effective_config(config: &DistillConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let path = out_dir.join("effective_config.toml");
    let text =
        toml::to_string_pretty(config).map_err(|e| Error::Config(format!("serialize: {e}")))?;
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
