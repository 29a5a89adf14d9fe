//! `section.key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. [`RunConfig::render`] writes every effective setting back out, so
//! a rendered manifest parses to the same config.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use extravar_core::attention::CalibrationPolicy;
use extravar_core::model::{remap_rule, stage_schedule_for, GenerationPlan, MapSelector, ModelConfig};
use extravar_core::reference::ReferenceEntropyStore;
use extravar_core::rope::{AxisMode, RemapRule, RopeConfig, StageSchedule};

use crate::error::{CliError, Result};

pub const KEYS: &[&str] = &[
    "model.layers",
    "model.heads",
    "model.head_dim",
    "model.vocab_size",
    "model.total_steps",
    "model.train_side",
    "model.seed",
    "model.scale_sides",
    "rope.base",
    "rope.high_band_size",
    "rope.axis_mode",
    "rope.head_dim",
    "rope.train_side",
    "stage.total_steps",
    "stage.layout_end",
    "stage.local_end",
    "calibration.tau_h",
    "calibration.epsilon",
    "calibration.alpha_min",
    "calibration.alpha_max",
    "reference.samples",
    "run.target_side",
    "run.remap",
    "run.calibrate",
    "run.ref",
    "run.ref_sha256",
    "run.seed",
    "run.very_low_nope",
    "run.retain_maps",
    "run.parallel",
    "probe.intervention",
];

pub const REMAPS: &[&str] = &["none", "pi", "ntk", "yarn", "stage-aware"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub axis_mode: AxisMode,
    pub stage: StageSchedule,
    pub calibration: CalibrationPolicy,
    pub reference_samples: usize,
    pub target_side: usize,
    pub remap: String,
    pub calibrate: bool,
    pub reference: Option<PathBuf>,
    /// Expected SHA-256 of the reference file, checked before use.
    pub reference_sha256: Option<String>,
    pub seed: u64,
    pub very_low_nope: bool,
    pub retain_maps: Option<MapSelector>,
    pub parallel: bool,
    pub intervention: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let stage = stage_schedule_for(model.total_steps);
        Self {
            axis_mode: AxisMode::TwoDAxial,
            calibration: CalibrationPolicy {
                active_after: stage.local_end,
                ..CalibrationPolicy::default()
            },
            stage,
            reference_samples: 1,
            target_side: model.train_side,
            remap: "stage-aware".into(),
            calibrate: false,
            reference: None,
            reference_sha256: None,
            seed: 0,
            very_low_nope: true,
            retain_maps: None,
            parallel: true,
            intervention: None,
            model,
        }
    }
}

/// Raw `key -> value` assignments, later ones winning.
#[derive(Debug, Clone, Default)]
pub struct Assignments(BTreeMap<String, String>);

impl Assignments {
    /// Parses config-file text.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut out = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::config(format!("{origin}:{}: expected `section.key = value`", i + 1)))?;
            out.set(k.trim(), v.trim())
                .map_err(|e| CliError::config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::config(format!("config file {} does not exist", path.display())),
            _ => CliError::io(path, e),
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        if !KEYS.contains(&key) {
            return Err(format!("unknown key {key:?}"));
        }
        self.0.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim()).map_err(CliError::Config)
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.0
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| CliError::config(format!("{key}: cannot parse {v:?}")))
            })
            .transpose()
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        self.0
            .get(key)
            .map(|v| match v.as_str() {
                "on" | "true" | "yes" | "1" => Ok(true),
                "off" | "false" | "no" | "0" => Ok(false),
                _ => Err(CliError::config(format!("{key}: expected on/off, got {v:?}"))),
            })
            .transpose()
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str).filter(|v| !v.is_empty())
    }
}

fn parse_selector(s: &str) -> Result<Option<MapSelector>> {
    if s == "none" || s.is_empty() {
        return Ok(None);
    }
    let parts: Vec<&str> = s.split(':').collect();
    if parts.len() != 3 {
        return Err(CliError::config(format!(
            "run.retain_maps: expected layer:head:step (each a number or *), got {s:?}"
        )));
    }
    let field = |p: &str| -> Result<Option<usize>> {
        if p == "*" {
            Ok(None)
        } else {
            p.parse()
                .map(Some)
                .map_err(|_| CliError::config(format!("run.retain_maps: bad field {p:?}")))
        }
    };
    Ok(Some(MapSelector {
        layer: field(parts[0])?,
        head: field(parts[1])?,
        step: field(parts[2])?,
    }))
}

fn render_selector(sel: &Option<MapSelector>) -> String {
    match sel {
        None => "none".into(),
        Some(s) => {
            let f = |v: Option<usize>| v.map_or("*".to_string(), |x| x.to_string());
            format!("{}:{}:{}", f(s.layer), f(s.head), f(s.step))
        }
    }
}

fn on_off(b: bool) -> &'static str {
    if b {
        "on"
    } else {
        "off"
    }
}

impl RunConfig {
    pub fn from_assignments(a: &Assignments) -> Result<Self> {
        let d = Self::default();
        let mut model = d.model.clone();
        macro_rules! take {
            ($field:expr, $key:literal) => {
                if let Some(v) = a.get($key)? {
                    $field = v;
                }
            };
        }
        take!(model.layers, "model.layers");
        take!(model.heads, "model.heads");
        take!(model.head_dim, "model.head_dim");
        take!(model.vocab_size, "model.vocab_size");
        take!(model.total_steps, "model.total_steps");
        take!(model.train_side, "model.train_side");
        take!(model.seed, "model.seed");
        take!(model.rope_base, "rope.base");
        take!(model.high_band_size, "rope.high_band_size");
        if let Some(sides) = a.text("model.scale_sides") {
            let parsed: std::result::Result<Vec<usize>, _> = sides.split(',').map(|s| s.trim().parse()).collect();
            model.scale_sides = Some(parsed.map_err(|_| CliError::config(format!("model.scale_sides: cannot parse {sides:?}")))?);
        }
        for (key, value, name) in [
            ("rope.head_dim", model.head_dim, "model.head_dim"),
            ("rope.train_side", model.train_side, "model.train_side"),
            ("stage.total_steps", model.total_steps, "model.total_steps"),
        ] {
            if let Some(v) = a.get::<usize>(key)? {
                if v != value {
                    return Err(CliError::config(format!("{key} = {v} disagrees with {name} = {value}")));
                }
            }
        }
        let axis_mode = match a.text("rope.axis_mode") {
            None | Some("two_d_axial") => AxisMode::TwoDAxial,
            Some("one_d") => AxisMode::OneD,
            Some(other) => {
                return Err(CliError::config(format!(
                    "rope.axis_mode: expected one_d or two_d_axial, got {other:?}"
                )))
            }
        };
        let mut stage = stage_schedule_for(model.total_steps);
        take!(stage.layout_end, "stage.layout_end");
        take!(stage.local_end, "stage.local_end");
        let mut calibration = CalibrationPolicy {
            active_after: stage.local_end,
            ..d.calibration
        };
        take!(calibration.tau_h, "calibration.tau_h");
        take!(calibration.epsilon, "calibration.epsilon");
        take!(calibration.alpha_min, "calibration.alpha_min");
        take!(calibration.alpha_max, "calibration.alpha_max");
        let mut cfg = Self {
            target_side: model.train_side,
            model,
            axis_mode,
            stage,
            calibration,
            ..d
        };
        take!(cfg.reference_samples, "reference.samples");
        take!(cfg.target_side, "run.target_side");
        if let Some(r) = a.text("run.remap") {
            cfg.remap = r.to_string();
        }
        if let Some(v) = a.flag("run.calibrate")? {
            cfg.calibrate = v;
        }
        cfg.reference = a.text("run.ref").map(PathBuf::from);
        cfg.reference_sha256 = a.text("run.ref_sha256").map(str::to_string);
        take!(cfg.seed, "run.seed");
        if let Some(v) = a.flag("run.very_low_nope")? {
            cfg.very_low_nope = v;
        }
        if let Some(s) = a.text("run.retain_maps") {
            cfg.retain_maps = parse_selector(s)?;
        }
        if let Some(v) = a.flag("run.parallel")? {
            cfg.parallel = v;
        }
        cfg.intervention = a.text("probe.intervention").map(str::to_string);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn rope(&self) -> RopeConfig {
        RopeConfig {
            axis_mode: self.axis_mode,
            ..self.model.rope(self.target_side)
        }
    }

    /// Cross-field checks that do not need the model itself.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: extravar_core::Error| CliError::config(e.to_string());
        let m = &self.model;
        if m.layers == 0 || m.heads == 0 {
            return Err(CliError::config("model.layers and model.heads must be positive"));
        }
        if m.vocab_size < 2 {
            return Err(CliError::config("model.vocab_size must be at least 2"));
        }
        if self.target_side < m.train_side {
            return Err(CliError::config(format!(
                "run.target_side = {} is below model.train_side = {}",
                self.target_side, m.train_side
            )));
        }
        self.rope().validate().map_err(cfg)?;
        self.stage.validate().map_err(cfg)?;
        self.calibration.validate().map_err(cfg)?;
        if !REMAPS.contains(&self.remap.as_str()) {
            return Err(CliError::config(format!(
                "run.remap: expected one of {}, got {:?}",
                REMAPS.join(", "),
                self.remap
            )));
        }
        if self.reference_samples == 0 {
            return Err(CliError::config("reference.samples must be at least 1"));
        }
        Ok(())
    }

    /// Model config, after checking it can drive generation.
    pub fn model_config(&self) -> Result<ModelConfig> {
        if self.axis_mode != AxisMode::TwoDAxial {
            return Err(CliError::config("generation needs rope.axis_mode = two_d_axial"));
        }
        self.model.validate().map_err(|e| CliError::config(e.to_string()))?;
        self.model
            .schedule_for(self.target_side)
            .map_err(|e| CliError::config(format!("infeasible scale schedule: {e}")))?;
        Ok(self.model.clone())
    }

    /// Generation plan for this config; `reference` is required when
    /// calibration is on.
    pub fn plan(&self, reference: Option<ReferenceEntropyStore>) -> Result<GenerationPlan> {
        let model = self.model_config()?;
        let mut remap = remap_rule(&model, &self.remap, self.target_side, self.stage)?;
        if let RemapRule::StageAware { very_low_nope, .. } = &mut remap {
            *very_low_nope = self.very_low_nope;
        }
        Ok(GenerationPlan {
            target_side: self.target_side,
            remap,
            schedule: self.stage,
            calibration: self.calibrate.then_some(self.calibration),
            reference,
            interventions: Vec::new(),
            seed: self.seed,
            retain_maps: self.retain_maps,
            retain_logits: false,
        })
    }

    /// Every effective setting as config text.
    pub fn render(&self) -> String {
        let m = &self.model;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("model.layers", m.layers.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.head_dim", m.head_dim.to_string());
        kv("model.vocab_size", m.vocab_size.to_string());
        kv("model.total_steps", m.total_steps.to_string());
        kv("model.train_side", m.train_side.to_string());
        kv("model.seed", m.seed.to_string());
        if let Some(s) = &m.scale_sides {
            kv(
                "model.scale_sides",
                s.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
            );
        }
        kv("rope.base", format!("{:?}", m.rope_base));
        kv("rope.high_band_size", m.high_band_size.to_string());
        kv(
            "rope.axis_mode",
            match self.axis_mode {
                AxisMode::OneD => "one_d",
                AxisMode::TwoDAxial => "two_d_axial",
            }
            .into(),
        );
        kv("stage.layout_end", self.stage.layout_end.to_string());
        kv("stage.local_end", self.stage.local_end.to_string());
        kv("calibration.tau_h", format!("{:?}", self.calibration.tau_h));
        kv("calibration.epsilon", format!("{:?}", self.calibration.epsilon));
        kv("calibration.alpha_min", format!("{:?}", self.calibration.alpha_min));
        kv("calibration.alpha_max", format!("{:?}", self.calibration.alpha_max));
        kv("reference.samples", self.reference_samples.to_string());
        kv("run.target_side", self.target_side.to_string());
        kv("run.remap", self.remap.clone());
        kv("run.calibrate", on_off(self.calibrate).into());
        if let Some(r) = &self.reference {
            kv("run.ref", r.display().to_string());
        }
        if let Some(h) = &self.reference_sha256 {
            kv("run.ref_sha256", h.clone());
        }
        kv("run.seed", self.seed.to_string());
        kv("run.very_low_nope", on_off(self.very_low_nope).into());
        kv("run.retain_maps", render_selector(&self.retain_maps));
        kv("run.parallel", on_off(self.parallel).into());
        if let Some(iv) = &self.intervention {
            kv("probe.intervention", iv.clone());
        }
        out
    }
}
