//! Band interventions and band-wise query statistics.
//!
//! Interventions restrict one wavelength band over an inclusive range of scale
//! steps. Substituting NoPE and forcing a wavelength rewrite the remapped
//! frequencies before rotation; zeroing acts on the rotated query and key
//! features of the band's pairs.

use alloc::vec::Vec;
use core::fmt;

use crate::error::invalid;
use crate::model::{GenerationPlan, ModelConfig};
use crate::rope::{Band, FrequencyTable};
use crate::{Error, Matrix, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InterventionKind {
    /// θ = 0 on the band's pairs.
    NopeSubstitute,
    /// θ = 2π / T on the band's pairs.
    ForceWavelength(f64),
    /// Zero the band's rotated Q/K features.
    ZeroQkFeatures,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intervention {
    pub kind: InterventionKind,
    pub band: Band,
    /// Inclusive scale-step range.
    pub first_step: usize,
    pub last_step: usize,
}

impl Intervention {
    pub fn covers(&self, k: usize) -> bool {
        (self.first_step..=self.last_step).contains(&k)
    }

    pub fn validate(&self, total_steps: usize) -> Result<()> {
        if let InterventionKind::ForceWavelength(t) = self.kind {
            if !(t > 0.0 && t.is_finite()) {
                return Err(invalid(alloc::format!("forced wavelength must be positive, got {t}")));
            }
        }
        if self.first_step == 0 || self.first_step > self.last_step || self.last_step > total_steps {
            return Err(invalid(alloc::format!(
                "intervention steps {}-{} not within 1..={total_steps}",
                self.first_step,
                self.last_step
            )));
        }
        Ok(())
    }
}

impl fmt::Display for Intervention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let band = self.band.name();
        let (a, b) = (self.first_step, self.last_step);
        match self.kind {
            InterventionKind::NopeSubstitute => write!(f, "nope:{band}:{a}-{b}"),
            InterventionKind::ZeroQkFeatures => write!(f, "zero:{band}:{a}-{b}"),
            InterventionKind::ForceWavelength(t) => write!(f, "force:{band}:{a}-{b}:T={t:?}"),
        }
    }
}

/// Adds `iv` to a copy of `plan` after checking it against the model.
pub fn apply_intervention(plan: &GenerationPlan, iv: Intervention, cfg: &ModelConfig) -> Result<GenerationPlan> {
    iv.validate(plan.schedule.total_steps)?;
    let tables = cfg.frequency_tables()?;
    if tables.iter().all(|t| t.band_indices(iv.band).is_empty()) {
        return Err(Error::EmptyBand(iv.band.name()));
    }
    let mut out = plan.clone();
    out.interventions.push(iv);
    Ok(out)
}

/// Frequencies after the pre-rotation interventions active at step `k`.
pub fn intervened_frequencies(base: &[f64], table: &FrequencyTable, k: usize, ivs: &[Intervention]) -> Vec<f64> {
    let mut out = base.to_vec();
    for iv in ivs.iter().filter(|iv| iv.covers(k)) {
        let theta = match iv.kind {
            InterventionKind::NopeSubstitute => 0.0,
            InterventionKind::ForceWavelength(t) => 2.0 * core::f64::consts::PI / t,
            InterventionKind::ZeroQkFeatures => continue,
        };
        for (f, p) in out.iter_mut().zip(&table.pairs) {
            if p.band == Some(iv.band) {
                *f = theta;
            }
        }
    }
    out
}

/// Per-pair flags (feature order) for pairs zeroed at step `k`.
pub fn zeroed_pairs(pair_bands: &[Band], k: usize, ivs: &[Intervention]) -> Vec<bool> {
    pair_bands
        .iter()
        .map(|&b| {
            ivs.iter()
                .any(|iv| iv.kind == InterventionKind::ZeroQkFeatures && iv.covers(k) && iv.band == b)
        })
        .collect()
}

/// Mean rotary-pair 2-norm per band, `None` for bands without pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BandNorms(pub [Option<f64>; 4]);

impl BandNorms {
    pub fn get(&self, band: Band) -> Option<f64> {
        self.0[band.ordinal()]
    }
}

/// Averaged query norm per band.
///
/// Each token's pair norms are averaged over the band's pairs first, then the
/// per-token means are averaged over tokens.
pub fn band_query_norms(q: &Matrix, pair_bands: &[Band]) -> Result<BandNorms> {
    if q.cols() != 2 * pair_bands.len() {
        return Err(Error::ShapeMismatch {
            what: "query width vs rotary pairs",
            expected: 2 * pair_bands.len(),
            found: q.cols(),
        });
    }
    let mut counts = [0usize; 4];
    for b in pair_bands {
        counts[b.ordinal()] += 1;
    }
    let mut sums = [0.0f64; 4];
    for row in q.iter_rows() {
        let mut per_token = [0.0f64; 4];
        for (pair, b) in row.chunks_exact(2).zip(pair_bands) {
            per_token[b.ordinal()] += libm::hypot(pair[0], pair[1]);
        }
        for (i, s) in sums.iter_mut().enumerate() {
            if counts[i] > 0 {
                *s += per_token[i] / counts[i] as f64;
            }
        }
    }
    let tokens = q.rows();
    let mut out = [None; 4];
    for i in 0..4 {
        if counts[i] > 0 {
            out[i] = Some(if tokens == 0 { 0.0 } else { sums[i] / tokens as f64 });
        }
    }
    Ok(BandNorms(out))
}
