//! Model, schedule, split and run configuration.
//!
//! [`RunConfig`] is the flat, serializable record read from JSON config files.
//! The structured configs consumed by the model and training code are derived
//! from it and validated on the way.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::{Error, Result};

/// Spatial reduction from input image to the fused feature map.
pub const TOTAL_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub window: usize,
    pub kv_stride: usize,
    pub expansion: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 64,
            stage_dims: [64, 128, 192, 256],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 8],
            window: 4,
            kv_stride: 2,
            expansion: 4,
        }
    }
}

/// Attention geometry of one stage, derived from its token grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    /// Query window extent (rows, cols).
    pub window: (usize, usize),
    /// Number of windows along each axis.
    pub windows: (usize, usize),
    /// Downsampled key/value grid.
    pub kv_grid: (usize, usize),
    /// Key/value window extent paired with each query window.
    pub kv_window: (usize, usize),
}

impl BackboneConfig {
    /// Window layout for a token grid, or a description of why the grid is
    /// incompatible with the configured window and stride.
    pub fn window_geometry(&self, grid: (usize, usize)) -> std::result::Result<WindowGeometry, String> {
        let axis = |len: usize, name: &str| -> std::result::Result<(usize, usize, usize, usize), String> {
            let w = self.window.min(len);
            if len % w != 0 {
                return Err(format!("{name} extent {len} is not a multiple of window {w}"));
            }
            let n = len / w;
            let kv = len.div_ceil(self.kv_stride);
            if kv % n != 0 {
                return Err(format!(
                    "{name} key/value extent {kv} does not split into {n} windows"
                ));
            }
            Ok((w, n, kv, kv / n))
        };
        let (wh, nh, kh, kwh) = axis(grid.0, "row")?;
        let (ww, nw, kw, kww) = axis(grid.1, "column")?;
        Ok(WindowGeometry {
            window: (wh, ww),
            windows: (nh, nw),
            kv_grid: (kh, kw),
            kv_window: (kwh, kww),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualStreamConfig {
    /// Output widths of the K, L, K, L blocks.
    pub block_channels: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpatialStreamConfig {
    /// Output widths of the five spatial blocks.
    pub block_channels: [usize; 5],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub backbone: BackboneConfig,
    pub residual: ResidualStreamConfig,
    pub spatial: SpatialStreamConfig,
    /// Hidden width of the spatial-attention gate.
    pub attention_channels: usize,
    /// Head dropout rate, applied to pooled features in training mode.
    pub dropout: f64,
    /// Dropout rate at the end of the residual stream.
    pub stream_dropout: f64,
}

impl ModelConfig {
    /// Desk-scale configuration: 64×64 grayscale input, four classes.
    pub fn miniature() -> Self {
        RunConfig::miniature().model()
    }

    pub fn full() -> Self {
        RunConfig::full().model()
    }

    /// Channel width of each of the three fused streams.
    pub fn stream_width(&self) -> usize {
        self.backbone.stage_dims[3]
    }

    pub fn fused_channels(&self) -> usize {
        3 * self.stream_width()
    }

    /// Token grid of stage `i` (after its patch embedding).
    pub fn stage_grid(&self, i: usize) -> (usize, usize) {
        let s = self.input_size >> (i + 2);
        (s, s)
    }

    pub fn feature_extent(&self) -> usize {
        self.input_size / TOTAL_STRIDE
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.num_classes < 2 {
            return bad("in_channels must be ≥ 1 and num_classes ≥ 2".into());
        }
        if self.input_size == 0 || self.input_size % TOTAL_STRIDE != 0 {
            return bad(format!(
                "input_size {} must be a positive multiple of {TOTAL_STRIDE}",
                self.input_size
            ));
        }
        let b = &self.backbone;
        if b.stem_channels == 0 || b.window == 0 || b.kv_stride == 0 || b.expansion == 0 {
            return bad("stem_channels, window, kv_stride and expansion must be positive".into());
        }
        for i in 0..4 {
            let (d, h) = (b.stage_dims[i], b.stage_heads[i]);
            if d == 0 || h == 0 || d % h != 0 {
                return bad(format!("stage {} width {d} is not divisible by {h} heads", i + 1));
            }
            if b.stage_depths[i] == 0 {
                return bad(format!("stage {} needs at least one block", i + 1));
            }
            if let Err(e) = b.window_geometry(self.stage_grid(i)) {
                return bad(format!("stage {} attention: {e}", i + 1));
            }
        }
        let r = &self.residual.block_channels;
        if r.contains(&0) || r.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("residual_channels {r:?} must be positive and non-decreasing"));
        }
        if r[3] != self.stream_width() {
            return bad(format!(
                "residual stream ends at {} channels but the fusion width is {}",
                r[3],
                self.stream_width()
            ));
        }
        if self.spatial.block_channels.contains(&0) || self.attention_channels == 0 {
            return bad("spatial_channels and attention_channels must be positive".into());
        }
        for (name, p) in [("dropout", self.dropout), ("stream_dropout", self.stream_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} {p} must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Weight the loss by inverse class frequency.
    pub class_weighted: bool,
    /// Repeat minority-class samples up to the majority count each epoch.
    pub oversample: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            base_lr: 1e-3,
            decay_factor: 0.85,
            decay_every: 20,
            batch_size: 16,
            epochs: 30,
            class_weighted: false,
            oversample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub test_fraction: f64,
    /// Share of the non-test portion held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            test_fraction: 0.3,
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

/// Sampling bounds for online augmentation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRanges {
    pub rotation_deg: f64,
    pub shear_max_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate_px: f64,
    pub reflect: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            rotation_deg: 3.0,
            shear_max_deg: 30.0,
            scale_min: 1.0,
            scale_max: 1.5,
            translate_px: 5.0,
            reflect: true,
        }
    }
}

/// Flat run configuration as stored in JSON files.
///
/// Files may name a `preset` (`"miniature"` or `"full"`) and override any of
/// the remaining keys; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub input_size: usize,
    pub stem_channels: usize,
    pub stage_dims: [usize; 4],
    pub stage_depths: [usize; 4],
    pub stage_heads: [usize; 4],
    pub window: usize,
    pub kv_stride: usize,
    pub expansion: usize,
    pub residual_channels: [usize; 4],
    pub spatial_channels: [usize; 5],
    pub attention_channels: usize,
    pub dropout: f64,
    pub stream_dropout: f64,

    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub class_weighted: bool,
    pub oversample: bool,

    pub test_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,

    pub augment: bool,
    pub rotation_deg: f64,
    pub shear_max_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translate_px: f64,
    pub reflect: bool,

    /// Images per class produced by the synthetic generator.
    pub synthetic_per_class: usize,
    /// Explicit class order for directory datasets; alphabetical when absent.
    pub class_names: Option<Vec<String>>,
}

impl RunConfig {
    pub fn miniature() -> Self {
        let s = ScheduleConfig::default();
        let p = SplitPlan::default();
        let a = AugmentRanges::default();
        RunConfig {
            in_channels: 1,
            num_classes: 4,
            input_size: 64,
            stem_channels: 32,
            stage_dims: [32, 64, 96, 128],
            stage_depths: [1, 1, 2, 1],
            stage_heads: [1, 2, 4, 8],
            window: 4,
            kv_stride: 2,
            expansion: 4,
            residual_channels: [32, 64, 96, 128],
            spatial_channels: [8, 16, 32, 64, 128],
            attention_channels: 32,
            dropout: 0.3,
            stream_dropout: 0.0,
            base_lr: s.base_lr,
            decay_factor: s.decay_factor,
            decay_every: s.decay_every,
            batch_size: s.batch_size,
            epochs: s.epochs,
            class_weighted: s.class_weighted,
            oversample: s.oversample,
            test_fraction: p.test_fraction,
            val_fraction: p.val_fraction,
            seed: p.seed,
            augment: true,
            rotation_deg: a.rotation_deg,
            shear_max_deg: a.shear_max_deg,
            scale_min: a.scale_min,
            scale_max: a.scale_max,
            translate_px: a.translate_px,
            reflect: a.reflect,
            synthetic_per_class: 500,
            class_names: None,
        }
    }

    /// Full-width configuration for 256×256 inputs.
    pub fn full() -> Self {
        let b = BackboneConfig::default();
        RunConfig {
            input_size: 256,
            stem_channels: b.stem_channels,
            stage_dims: b.stage_dims,
            stage_depths: b.stage_depths,
            stage_heads: b.stage_heads,
            window: b.window,
            kv_stride: b.kv_stride,
            expansion: b.expansion,
            residual_channels: [64, 128, 192, 256],
            spatial_channels: [32, 64, 128, 192, 256],
            attention_channels: 64,
            ..Self::miniature()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "miniature" => Ok(Self::miniature()),
            "full" => Ok(Self::full()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `miniature` or `full`)"
            ))),
        }
    }

    /// Parses a JSON object; keys override the named preset (default
    /// `miniature`).
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let Value::Object(mut map) = value else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let base = match map.remove("preset") {
            None => Self::miniature(),
            Some(Value::String(name)) => Self::preset(&name)?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
        };
        base.with_overrides(map)
    }

    /// Applies `key=value` pairs; values are parsed as JSON, falling back to
    /// a plain string.
    pub fn with_assignments<S: AsRef<str>>(self, pairs: &[S]) -> Result<Self> {
        let mut map = Map::new();
        for pair in pairs {
            let pair = pair.as_ref();
            let (k, v) = pair
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{pair}` is not of the form key=value")))?;
            let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
            map.insert(k.trim().to_string(), v);
        }
        self.with_overrides(map)
    }

    fn with_overrides(self, overrides: Map<String, Value>) -> Result<Self> {
        let Value::Object(mut merged) = serde_json::to_value(&self).expect("config serializes") else {
            unreachable!("config serializes to an object")
        };
        for (k, v) in overrides {
            if !merged.contains_key(&k) {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
            merged.insert(k, v);
        }
        let cfg: RunConfig =
            serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            in_channels: self.in_channels,
            num_classes: self.num_classes,
            input_size: self.input_size,
            backbone: BackboneConfig {
                stem_channels: self.stem_channels,
                stage_dims: self.stage_dims,
                stage_depths: self.stage_depths,
                stage_heads: self.stage_heads,
                window: self.window,
                kv_stride: self.kv_stride,
                expansion: self.expansion,
            },
            residual: ResidualStreamConfig {
                block_channels: self.residual_channels,
            },
            spatial: SpatialStreamConfig {
                block_channels: self.spatial_channels,
            },
            attention_channels: self.attention_channels,
            dropout: self.dropout,
            stream_dropout: self.stream_dropout,
        }
    }

    pub fn schedule(&self) -> ScheduleConfig {
        ScheduleConfig {
            base_lr: self.base_lr,
            decay_factor: self.decay_factor,
            decay_every: self.decay_every,
            batch_size: self.batch_size,
            epochs: self.epochs,
            class_weighted: self.class_weighted,
            oversample: self.oversample,
        }
    }

    pub fn split(&self) -> SplitPlan {
        SplitPlan {
            test_fraction: self.test_fraction,
            val_fraction: self.val_fraction,
            seed: self.seed,
        }
    }

    /// Augmentation bounds, or `None` when augmentation is disabled.
    pub fn augment_ranges(&self) -> Option<AugmentRanges> {
        self.augment.then(|| self.augment_bounds())
    }

    /// Configured augmentation bounds regardless of the `augment` switch.
    pub fn augment_bounds(&self) -> AugmentRanges {
        AugmentRanges {
            rotation_deg: self.rotation_deg,
            shear_max_deg: self.shear_max_deg,
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            translate_px: self.translate_px,
            reflect: self.reflect,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad("decay_factor must lie in (0, 1]");
        }
        if self.decay_every == 0 || self.batch_size == 0 {
            return bad("decay_every and batch_size must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) || !(0.0..1.0).contains(&self.val_fraction) {
            return bad("test_fraction must lie in (0, 1) and val_fraction in [0, 1)");
        }
        if self.rotation_deg < 0.0
            || self.shear_max_deg < 0.0
            || self.translate_px < 0.0
            || self.scale_min <= 0.0
            || self.scale_max < self.scale_min
        {
            return bad("augmentation ranges must be non-negative with 0 < scale_min ≤ scale_max");
        }
        if self.synthetic_per_class == 0 {
            return bad("synthetic_per_class must be positive");
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::Config(format!(
                    "class_names lists {} names for {} classes",
                    names.len(),
                    self.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::miniature().validate().unwrap();
        RunConfig::full().validate().unwrap();
        assert_eq!(ModelConfig::miniature().fused_channels(), 384);
        assert_eq!(ModelConfig::full().fused_channels(), 768);
    }

    #[test]
    fn input_size_must_be_multiple_of_32() {
        let err = RunConfig::miniature().with_assignments(&["input_size=48"]).unwrap_err();
        assert!(err.to_string().contains("multiple of 32"), "{err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_json(r#"{"epochz": 3}"#).unwrap_err();
        assert!(err.to_string().contains("epochz"));
    }

    #[test]
    fn json_overrides_preset() {
        let cfg = RunConfig::from_json(r#"{"preset": "full", "epochs": 3, "dropout": 0.1}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.stage_dims, [64, 128, 192, 256]);
        assert_eq!(cfg.dropout, 0.1);
        let round = RunConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(round, cfg);
    }

    #[test]
    fn assignments_parse_json_values() {
        let cfg = RunConfig::miniature()
            .with_assignments(&["epochs=2", "stage_depths=[1,1,1,1]", "augment=false"])
            .unwrap();
        assert_eq!(cfg.epochs, 2);
        assert_eq!(cfg.stage_depths, [1, 1, 1, 1]);
        assert!(cfg.augment_ranges().is_none());
        assert!(RunConfig::miniature().with_assignments(&["epochs"]).is_err());
    }

    #[test]
    fn heads_must_divide_width() {
        let err = RunConfig::miniature().with_assignments(&["stage_heads=[3,2,4,8]"]).unwrap_err();
        assert!(err.to_string().contains("heads"), "{err}");
    }

    #[test]
    fn window_geometry_on_small_grids() {
        let b = BackboneConfig::default();
        let g = b.window_geometry((8, 8)).unwrap();
        assert_eq!(g.kv_grid, (4, 4));
        assert_eq!(g.windows, (2, 2));
        assert_eq!(g.kv_window, (2, 2));
        let g = b.window_geometry((2, 2)).unwrap();
        assert_eq!((g.window, g.windows, g.kv_window), ((2, 2), (1, 1), (1, 1)));
        let g = b.window_geometry((1, 1)).unwrap();
        assert_eq!(g.kv_grid, (1, 1));
        assert!(b.window_geometry((14, 14)).is_err());
    }
}
