//! Rotary position embedding: frequency tables, wavelength bands, static
//! (PI / NTK / YaRN / NoPE) remappings and the stage-aware schedule.
//!
//! Pair indices are 1-based (`j = 1..=n`) to match the usual RoPE notation;
//! feature pair `j` occupies features `2(j-1)` and `2(j-1)+1` of its axis
//! block. In two-dimensional axial mode the first half of a head's features
//! carries the height axis and the second half the width axis.

use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;

use crate::error::invalid;
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AxisMode {
    OneD,
    TwoDAxial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Axis {
    Height,
    Width,
    OneD,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Height => "height",
            Axis::Width => "width",
            Axis::OneD => "one_d",
        }
    }
}

/// Static RoPE settings shared by every head.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub base: f64,
    /// Side of the training-time token map, in tokens.
    pub train_side: usize,
    /// Side of the token map being generated; `>= train_side`.
    pub target_side: usize,
    /// Number of shortest-wavelength pairs labelled High.
    pub high_band_size: usize,
    pub axis_mode: AxisMode,
}

impl Default for RopeConfig {
    fn default() -> Self {
        Self {
            head_dim: 64,
            base: 10_000.0,
            train_side: 16,
            target_side: 16,
            high_band_size: 3,
            axis_mode: AxisMode::TwoDAxial,
        }
    }
}

impl RopeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(invalid(alloc::format!(
                "head_dim must be a positive even number, got {}",
                self.head_dim
            )));
        }
        if self.axis_mode == AxisMode::TwoDAxial && !self.head_dim.is_multiple_of(4) {
            return Err(invalid(alloc::format!(
                "two_d_axial needs head_dim divisible by 4, got {}",
                self.head_dim
            )));
        }
        if !(self.base.is_finite() && self.base > 0.0) {
            return Err(invalid("rope base must be a positive finite number"));
        }
        if self.train_side == 0 {
            return Err(invalid("train_side must be positive"));
        }
        if self.target_side < self.train_side {
            return Err(invalid(alloc::format!(
                "target_side {} is smaller than train_side {}",
                self.target_side,
                self.train_side
            )));
        }
        if self.high_band_size == 0 || self.high_band_size > self.pairs_per_axis() {
            return Err(invalid(alloc::format!(
                "high_band_size must be in 1..={}, got {}",
                self.pairs_per_axis(),
                self.high_band_size
            )));
        }
        Ok(())
    }

    pub fn pairs_per_axis(&self) -> usize {
        match self.axis_mode {
            AxisMode::OneD => self.head_dim / 2,
            AxisMode::TwoDAxial => self.head_dim / 4,
        }
    }

    /// Extrapolation ratio `s = L' / L`.
    pub fn ratio(&self) -> f64 {
        self.target_side as f64 / self.train_side as f64
    }

    pub fn axes(&self) -> &'static [Axis] {
        match self.axis_mode {
            AxisMode::OneD => &[Axis::OneD],
            AxisMode::TwoDAxial => &[Axis::Height, Axis::Width],
        }
    }
}

/// Wavelength class of a rotary pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Band {
    High,
    Mid,
    Low,
    VeryLow,
}

impl Band {
    pub const ALL: [Band; 4] = [Band::High, Band::Mid, Band::Low, Band::VeryLow];

    pub fn name(self) -> &'static str {
        match self {
            Band::High => "high",
            Band::Mid => "mid",
            Band::Low => "low",
            Band::VeryLow => "verylow",
        }
    }

    pub fn parse(s: &str) -> Option<Band> {
        match s.to_ascii_lowercase().as_str() {
            "high" => Some(Band::High),
            "mid" => Some(Band::Mid),
            "low" => Some(Band::Low),
            "verylow" | "very_low" | "very-low" => Some(Band::VeryLow),
            _ => None,
        }
    }

    pub fn ordinal(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Band {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrequencyPair {
    /// 1-based pair index.
    pub index: usize,
    /// Radians per token.
    pub theta: f64,
    /// Tokens per full turn, `2π / θ`.
    pub wavelength: f64,
    pub band: Option<Band>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    pub axis: Axis,
    pub pairs: Vec<FrequencyPair>,
    /// Training side used to label the bands, once assigned.
    pub banded_at: Option<usize>,
}

impl FrequencyTable {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn thetas(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.theta).collect()
    }

    pub fn band(&self, j: usize) -> Option<Band> {
        self.pairs.get(j - 1).and_then(|p| p.band)
    }

    /// 1-based indices of the pairs in `band`.
    pub fn band_indices(&self, band: Band) -> Vec<usize> {
        self.pairs
            .iter()
            .filter(|p| p.band == Some(band))
            .map(|p| p.index)
            .collect()
    }

    pub fn band_counts(&self) -> [usize; 4] {
        let mut counts = [0; 4];
        for p in &self.pairs {
            if let Some(b) = p.band {
                counts[b.ordinal()] += 1;
            }
        }
        counts
    }

    /// Width of the rotary block this table drives (`2 × pairs`).
    pub fn rotary_dim(&self) -> usize {
        2 * self.pairs.len()
    }

    /// YaRN ramp thresholds `(λ_lo, λ_hi)` tied to the band boundaries.
    ///
    /// `λ_lo` is the longest High wavelength and `λ_hi` the Mid/Low boundary
    /// `L`. When the Mid band is empty (`L <= λ_lo`) the upper threshold moves
    /// to the shortest non-High wavelength, so the ramp degenerates to a step
    /// between High and everything else.
    pub fn yarn_thresholds(&self) -> Result<(f64, f64)> {
        let train_side = self.banded_at.ok_or(Error::BandsUnassigned)?;
        let lo = self
            .pairs
            .iter()
            .filter(|p| p.band == Some(Band::High))
            .map(|p| p.wavelength)
            .fold(f64::NEG_INFINITY, f64::max);
        let lo = if lo.is_finite() { lo } else { 0.0 };
        let side = train_side as f64;
        if side > lo {
            return Ok((lo, side));
        }
        let next = self
            .pairs
            .iter()
            .filter(|p| p.band != Some(Band::High))
            .map(|p| p.wavelength)
            .fold(f64::INFINITY, f64::min);
        if next.is_finite() && next > lo {
            Ok((lo, next))
        } else {
            // every pair is High: any hi above lo keeps ρ = 1 everywhere
            Ok((lo, 2.0 * lo))
        }
    }
}

/// Per-pair angular frequencies and wavelengths for one axis.
pub fn build_frequency_table(cfg: &RopeConfig, axis: Axis) -> Result<FrequencyTable> {
    cfg.validate()?;
    match (cfg.axis_mode, axis) {
        (AxisMode::OneD, Axis::OneD) | (AxisMode::TwoDAxial, Axis::Height | Axis::Width) => {}
        _ => {
            return Err(invalid(alloc::format!(
                "axis {} does not exist in {:?} mode",
                axis.name(),
                cfg.axis_mode
            )))
        }
    }
    let n = cfg.pairs_per_axis();
    let dim = (2 * n) as f64;
    let pairs = (1..=n)
        .map(|j| {
            let theta = libm::pow(cfg.base, -2.0 * (j - 1) as f64 / dim);
            FrequencyPair {
                index: j,
                theta,
                wavelength: 2.0 * PI / theta,
                band: None,
            }
        })
        .collect();
    Ok(FrequencyTable {
        axis,
        pairs,
        banded_at: None,
    })
}

/// Labels the `m` shortest-wavelength pairs High, then classifies the rest
/// against the training side `L`: Mid below `L`, Low in `[L, 4L]`, VeryLow
/// above `4L`.
pub fn assign_bands(table: &FrequencyTable, train_side: usize, m: usize) -> Result<FrequencyTable> {
    if m > table.len() {
        return Err(invalid(alloc::format!(
            "high band size {m} exceeds {} pairs",
            table.len()
        )));
    }
    let mut order: Vec<usize> = (0..table.len()).collect();
    order.sort_by(|&a, &b| {
        table.pairs[a]
            .wavelength
            .total_cmp(&table.pairs[b].wavelength)
            .then(a.cmp(&b))
    });
    let side = train_side as f64;
    let mut pairs = table.pairs.clone();
    for p in pairs.iter_mut() {
        p.band = Some(if p.wavelength < side {
            Band::Mid
        } else if p.wavelength <= 4.0 * side {
            Band::Low
        } else {
            Band::VeryLow
        });
    }
    for &i in order.iter().take(m) {
        pairs[i].band = Some(Band::High);
    }
    Ok(FrequencyTable {
        axis: table.axis,
        pairs,
        banded_at: Some(train_side),
    })
}

/// Builds and labels the table for every axis of `cfg`, in feature order.
pub fn banded_tables(cfg: &RopeConfig) -> Result<Vec<FrequencyTable>> {
    cfg.axes()
        .iter()
        .map(|&axis| {
            let t = build_frequency_table(cfg, axis)?;
            assign_bands(&t, cfg.train_side, cfg.high_band_size)
        })
        .collect()
}

/// Position interpolation: `θ / s`.
#[inline]
pub fn remap_pi(theta: f64, s: f64) -> f64 {
    theta / s
}

/// NTK-aware base rescaling, `λ^(-2(j-1)/d) θ_j` with `λ = s^(d/(d-2))`.
pub fn remap_ntk(theta: f64, j: usize, dim: usize, s: f64) -> f64 {
    let d = dim as f64;
    let lambda = libm::pow(s, d / (d - 2.0));
    libm::pow(lambda, -2.0 * (j - 1) as f64 / d) * theta
}

/// YaRN mixing coefficient: 1 at or below `lo`, 0 at or above `hi`, linear in
/// wavelength between.
pub fn yarn_mix(wavelength: f64, lo: f64, hi: f64) -> Result<f64> {
    if !(lo < hi) {
        return Err(invalid(alloc::format!(
            "yarn thresholds need lo < hi, got lo={lo} hi={hi}"
        )));
    }
    Ok(if wavelength <= lo {
        1.0
    } else if wavelength >= hi {
        0.0
    } else {
        (hi - wavelength) / (hi - lo)
    })
}

/// `ρ θ + (1 − ρ) θ / s`, clamped to `[θ/s, θ]`.
///
/// Evaluated as `θ/s + ρ (θ − θ/s)` so that `s = 1` reproduces `θ` exactly.
pub fn remap_yarn(theta: f64, rho: f64, s: f64) -> f64 {
    if rho == 1.0 {
        return theta;
    }
    let pi = theta / s;
    if rho == 0.0 {
        return pi;
    }
    let (lo, hi) = if pi <= theta { (pi, theta) } else { (theta, pi) };
    (pi + rho * (theta - pi)).clamp(lo, hi)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stage {
    Layout,
    Local,
    Detail,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Layout => "layout",
            Stage::Local => "local",
            Stage::Detail => "detail",
        }
    }
}

/// Scale-step count and the two stage boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StageSchedule {
    pub total_steps: usize,
    pub layout_end: usize,
    pub local_end: usize,
}

impl Default for StageSchedule {
    fn default() -> Self {
        Self {
            total_steps: 13,
            layout_end: 6,
            local_end: 9,
        }
    }
}

impl StageSchedule {
    pub fn new(total_steps: usize, layout_end: usize, local_end: usize) -> Result<Self> {
        let s = Self {
            total_steps,
            layout_end,
            local_end,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1 <= self.layout_end && self.layout_end <= self.local_end && self.local_end <= self.total_steps) {
            return Err(invalid(alloc::format!(
                "stage schedule needs 1 <= k_l <= k_h <= K, got k_l={} k_h={} K={}",
                self.layout_end,
                self.local_end,
                self.total_steps
            )));
        }
        Ok(())
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.total_steps {
            return Err(Error::StepOutOfRange {
                step: k,
                total: self.total_steps,
            });
        }
        Ok(())
    }

    pub fn stage(&self, k: usize) -> Result<Stage> {
        self.check(k)?;
        Ok(if k < self.layout_end {
            Stage::Layout
        } else if k <= self.local_end {
            Stage::Local
        } else {
            Stage::Detail
        })
    }

    /// PI→YaRN interpolation weight `ω_k`.
    ///
    /// 0 up to and including `k_l`, 1 from `k_h` on, linear between. When
    /// `k_l == k_h` the step at the shared boundary gets 0.
    pub fn weight(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        Ok(if k <= self.layout_end {
            0.0
        } else if k >= self.local_end {
            1.0
        } else {
            (k - self.layout_end) as f64 / (self.local_end - self.layout_end) as f64
        })
    }
}

/// Free-function form of [`StageSchedule::weight`].
pub fn stage_weight(k: usize, schedule: &StageSchedule) -> Result<f64> {
    schedule.weight(k)
}

/// How a frequency table is turned into the frequencies used at step `k`.
#[derive(Debug, Clone, PartialEq)]
pub enum RemapRule {
    Identity,
    NoPe,
    Pi {
        s: f64,
    },
    Ntk {
        s: f64,
    },
    Yarn {
        s: f64,
        lambda_lo: f64,
        lambda_hi: f64,
    },
    StageAware {
        s: f64,
        schedule: StageSchedule,
        lambda_lo: f64,
        lambda_hi: f64,
        /// Map VeryLow pairs to zero frequency at every step.
        very_low_nope: bool,
    },
}

impl RemapRule {
    /// YaRN with thresholds taken from the table's band boundaries.
    pub fn yarn_for(table: &FrequencyTable, s: f64) -> Result<Self> {
        let (lambda_lo, lambda_hi) = table.yarn_thresholds()?;
        Ok(RemapRule::Yarn {
            s,
            lambda_lo,
            lambda_hi,
        })
    }

    /// Stage-aware rule with band-boundary thresholds and VeryLow → NoPE.
    pub fn stage_aware_for(table: &FrequencyTable, s: f64, schedule: StageSchedule) -> Result<Self> {
        let (lambda_lo, lambda_hi) = table.yarn_thresholds()?;
        Ok(RemapRule::StageAware {
            s,
            schedule,
            lambda_lo,
            lambda_hi,
            very_low_nope: true,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            RemapRule::Identity => "none",
            RemapRule::NoPe => "nope",
            RemapRule::Pi { .. } => "pi",
            RemapRule::Ntk { .. } => "ntk",
            RemapRule::Yarn { .. } => "yarn",
            RemapRule::StageAware { .. } => "stage-aware",
        }
    }

    pub fn ratio(&self) -> f64 {
        match *self {
            RemapRule::Identity | RemapRule::NoPe => 1.0,
            RemapRule::Pi { s } | RemapRule::Ntk { s } => s,
            RemapRule::Yarn { s, .. } | RemapRule::StageAware { s, .. } => s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.ratio();
        if !(s.is_finite() && s >= 1.0) {
            return Err(invalid(alloc::format!("extrapolation ratio must be >= 1, got {s}")));
        }
        match self {
            RemapRule::Yarn {
                lambda_lo,
                lambda_hi,
                ..
            }
            | RemapRule::StageAware {
                lambda_lo,
                lambda_hi,
                ..
            } if !(lambda_lo < lambda_hi) => Err(invalid(alloc::format!(
                "yarn thresholds need lo < hi, got lo={lambda_lo} hi={lambda_hi}"
            ))),
            RemapRule::StageAware { schedule, .. } => schedule.validate(),
            _ => Ok(()),
        }
    }

    /// Remapped frequency for every pair of `table` at scale step `k`.
    pub fn frequencies(&self, table: &FrequencyTable, k: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let dim = table.rotary_dim();
        match *self {
            RemapRule::Identity => Ok(table.thetas()),
            RemapRule::NoPe => Ok(alloc::vec![0.0; table.len()]),
            RemapRule::Pi { s } => Ok(table.pairs.iter().map(|p| remap_pi(p.theta, s)).collect()),
            RemapRule::Ntk { s } => Ok(table
                .pairs
                .iter()
                .map(|p| remap_ntk(p.theta, p.index, dim, s))
                .collect()),
            RemapRule::Yarn {
                s,
                lambda_lo,
                lambda_hi,
            } => table
                .pairs
                .iter()
                .map(|p| Ok(remap_yarn(p.theta, yarn_mix(p.wavelength, lambda_lo, lambda_hi)?, s)))
                .collect(),
            RemapRule::StageAware {
                s,
                schedule,
                lambda_lo,
                lambda_hi,
                very_low_nope,
            } => stage_remap_with(table, k, &schedule, s, lambda_lo, lambda_hi, very_low_nope),
        }
    }
}

/// Stage-aware remapping at step `k` with the table's own YaRN thresholds.
///
/// VeryLow pairs get frequency 0; every other pair gets
/// `(1 − ω_k) θ/s + ω_k φ_YaRN(θ)`.
pub fn stage_remap(table: &FrequencyTable, k: usize, schedule: &StageSchedule, s: f64) -> Result<Vec<f64>> {
    let (lo, hi) = table.yarn_thresholds()?;
    stage_remap_with(table, k, schedule, s, lo, hi, true)
}

fn stage_remap_with(
    table: &FrequencyTable,
    k: usize,
    schedule: &StageSchedule,
    s: f64,
    lo: f64,
    hi: f64,
    very_low_nope: bool,
) -> Result<Vec<f64>> {
    if table.banded_at.is_none() {
        return Err(Error::BandsUnassigned);
    }
    let omega = schedule.weight(k)?;
    table
        .pairs
        .iter()
        .map(|p| {
            let band = p.band.ok_or(Error::BandsUnassigned)?;
            if very_low_nope && band == Band::VeryLow {
                return Ok(0.0);
            }
            let pi = remap_pi(p.theta, s);
            let yarn = remap_yarn(p.theta, yarn_mix(p.wavelength, lo, hi)?, s);
            Ok(blend(pi, yarn, omega))
        })
        .collect()
}

/// `(1 − ω) a + ω b`, exact at both endpoints and when `a == b`.
#[inline]
fn blend(a: f64, b: f64, omega: f64) -> f64 {
    if omega == 0.0 {
        a
    } else if omega == 1.0 {
        b
    } else {
        a + omega * (b - a)
    }
}

/// `n θ_j` for every pair.
pub fn rotation_angles(freqs: &[f64], position: f64) -> Vec<f64> {
    freqs.iter().map(|&theta| position * theta).collect()
}

/// Axial angles for a token at grid coordinate `(row, col)`: height pairs
/// first, driven by `row`, then width pairs driven by `col`.
pub fn grid_rotation_angles(height: &[f64], width: &[f64], row: f64, col: f64) -> Vec<f64> {
    let mut angles = rotation_angles(height, row);
    angles.extend(width.iter().map(|&theta| col * theta));
    angles
}

/// Rotates each consecutive feature pair of every row by its angle.
///
/// `angles` is tokens × pairs; a row of width `d` needs `d / 2` angles.
pub fn apply_rope(rows: &Matrix, angles: &Matrix) -> Result<Matrix> {
    let mut out = rows.clone();
    apply_rope_in_place(&mut out, angles)?;
    Ok(out)
}

pub fn apply_rope_in_place(rows: &mut Matrix, angles: &Matrix) -> Result<()> {
    if !rows.cols().is_multiple_of(2) || angles.cols() != rows.cols() / 2 {
        return Err(Error::ShapeMismatch {
            what: "rope feature width",
            expected: 2 * angles.cols(),
            found: rows.cols(),
        });
    }
    if angles.rows() != rows.rows() {
        return Err(Error::ShapeMismatch {
            what: "rope token count",
            expected: rows.rows(),
            found: angles.rows(),
        });
    }
    for t in 0..rows.rows() {
        let phis = angles.row(t);
        let row = rows.row_mut(t);
        for (pair, &phi) in row.chunks_exact_mut(2).zip(phis) {
            if phi == 0.0 {
                continue;
            }
            let (sin, cos) = libm::sincos(phi);
            let (x, y) = (pair[0], pair[1]);
            pair[0] = x * cos - y * sin;
            pair[1] = x * sin + y * cos;
        }
    }
    Ok(())
}
