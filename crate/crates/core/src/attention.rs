//! Scaled dot-product attention with per-head logit scaling, normalized
//! attention entropy and the closed-form entropy-matching calibration.
//!
//! Logits are `S = Q Kᵀ / √d`; a head with scale `α` attends with
//! `P(α) = softmax(α S)` row by row. The normalized entropy
//! `H(α) = −(1 / (N_q ln N_k)) Σ_ij P_ij ln P_ij` lies in `[0, 1]` and is
//! comparable across token counts. Its slope in `α` is `−α / (N_q ln N_k)`
//! times the summed per-row logit variance, which gives the first-order
//! estimate `α̂ = 1 + (H(1) − H_ref) ln N_k / V_g`.
//!
//! When a mask is present every row is normalized by the log of its own
//! attendable count; without a mask this is exactly the dense formula.

use alloc::vec::Vec;

use crate::error::invalid;
use crate::{Error, Matrix, Result};

/// Logit written into masked positions before scaling.
pub const MASKED_LOGIT: f64 = -1e9;

/// Attendability of every (query, key) position; `true` = may attend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn full(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: alloc::vec![true; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Block-causal mask over consecutive blocks of the given sizes: a token
    /// sees every token of its own block and of all earlier blocks.
    pub fn block_causal(block_sizes: &[usize]) -> Self {
        let mut block_end = Vec::new();
        let mut end = 0;
        for &n in block_sizes {
            end += n;
            block_end.extend(core::iter::repeat_n(end, n));
        }
        Self::from_fn(end, end, |i, j| j < block_end[i])
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn attendable(&self, i: usize) -> usize {
        self.row(i).iter().filter(|&&b| b).count()
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            rows: end - start,
            cols: self.cols,
            bits: self.bits[start * self.cols..end * self.cols].to_vec(),
        }
    }
}

/// One head's query, key and value rows plus an optional mask.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub mask: Option<Mask>,
}

impl HeadTensors {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Self {
        Self { q, k, v, mask: None }
    }

    pub fn with_mask(mut self, mask: Mask) -> Self {
        self.mask = Some(mask);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.q.cols() != self.k.cols() {
            return Err(Error::ShapeMismatch {
                what: "query/key width",
                expected: self.q.cols(),
                found: self.k.cols(),
            });
        }
        if self.v.rows() != self.k.rows() {
            return Err(Error::ShapeMismatch {
                what: "value rows",
                expected: self.k.rows(),
                found: self.v.rows(),
            });
        }
        if let Some(mask) = &self.mask {
            check_mask(mask, self.q.rows(), self.k.rows())?;
        }
        Ok(())
    }
}

fn check_mask(mask: &Mask, rows: usize, cols: usize) -> Result<()> {
    if mask.rows() != rows {
        return Err(Error::ShapeMismatch {
            what: "mask rows",
            expected: rows,
            found: mask.rows(),
        });
    }
    if mask.cols() != cols {
        return Err(Error::ShapeMismatch {
            what: "mask cols",
            expected: cols,
            found: mask.cols(),
        });
    }
    Ok(())
}

/// Pre-softmax logits together with the mask that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub scores: Matrix,
    pub mask: Option<Mask>,
}

impl Logits {
    pub fn dense(scores: Matrix) -> Self {
        Self { scores, mask: None }
    }

    pub fn queries(&self) -> usize {
        self.scores.rows()
    }

    pub fn keys(&self) -> usize {
        self.scores.cols()
    }

    #[inline]
    fn attendable(&self, i: usize, j: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m.get(i, j))
    }

    /// Attendable key count of row `i`.
    pub fn row_keys(&self, i: usize) -> usize {
        self.mask.as_ref().map_or(self.keys(), |m| m.attendable(i))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            scores: self.scores.slice_rows(start, end),
            mask: self.mask.as_ref().map(|m| m.slice_rows(start, end)),
        }
    }
}

/// `S = Q Kᵀ / √d`, with masked positions set to [`MASKED_LOGIT`].
pub fn logits(head: &HeadTensors) -> Result<Logits> {
    head.validate()?;
    let scale = 1.0 / libm::sqrt(head.q.cols() as f64);
    let mut scores = head.q.matmul_transposed(&head.k)?;
    for i in 0..scores.rows() {
        let row = scores.row_mut(i);
        for (j, s) in row.iter_mut().enumerate() {
            *s = match &head.mask {
                Some(m) if !m.get(i, j) => MASKED_LOGIT,
                _ => *s * scale,
            };
        }
    }
    Ok(Logits {
        scores,
        mask: head.mask.clone(),
    })
}

/// Row-wise `softmax(α S)`; masked positions get exactly zero mass.
pub fn scaled_attention(s: &Logits, alpha: f64) -> Result<Matrix> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(invalid(alloc::format!("attention scale must be positive, got {alpha}")));
    }
    let mut p = Matrix::zeros(s.queries(), s.keys());
    for i in 0..s.queries() {
        softmax_row(s, i, alpha, p.row_mut(i))?;
    }
    Ok(p)
}

fn softmax_row(s: &Logits, i: usize, alpha: f64, out: &mut [f64]) -> Result<()> {
    let row = s.scores.row(i);
    let mut max = f64::NEG_INFINITY;
    for (j, &x) in row.iter().enumerate() {
        if s.attendable(i, j) {
            max = max.max(alpha * x);
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::FullyMaskedRow(i));
    }
    let mut sum = 0.0;
    for (j, (&x, o)) in row.iter().zip(out.iter_mut()).enumerate() {
        *o = if s.attendable(i, j) {
            let e = libm::exp(alpha * x - max);
            sum += e;
            e
        } else {
            0.0
        };
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(())
}

/// Shannon entropy of one distribution in nats, with `0 ln 0 = 0`.
fn row_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .fold(0.0, |acc, &x| acc + x * libm::log(x))
}

/// Normalized attention entropy of a row-stochastic map, in `[0, 1]`.
pub fn normalized_entropy(p: &Matrix, mask: Option<&Mask>) -> Result<f64> {
    if let Some(m) = mask {
        check_mask(m, p.rows(), p.cols())?;
    }
    if p.rows() == 0 {
        return Err(invalid("entropy of an empty attention map"));
    }
    let mut total = 0.0;
    for i in 0..p.rows() {
        let n = mask.map_or(p.cols(), |m| m.attendable(i));
        if n < 2 {
            return Err(Error::TooFewKeys(n));
        }
        total += row_entropy(p.row(i)) / libm::log(n as f64);
    }
    Ok(total / p.rows() as f64)
}

/// Variance of the logits of row `i` under the distribution `p_row`.
fn row_variance(s: &Logits, i: usize, p_row: &[f64]) -> f64 {
    let mut mean = 0.0;
    let mut second = 0.0;
    for (j, (&x, &w)) in s.scores.row(i).iter().zip(p_row).enumerate() {
        if s.attendable(i, j) {
            mean += w * x;
            second += w * x * x;
        }
    }
    (second - mean * mean).max(0.0)
}

/// `V_g`: mean over rows of the logit variance under `P(1)`.
pub fn global_variance(s: &Logits, p1: &Matrix) -> Result<f64> {
    if p1.rows() != s.queries() || p1.cols() != s.keys() {
        return Err(Error::ShapeMismatch {
            what: "attention map vs logits",
            expected: s.queries() * s.keys(),
            found: p1.rows() * p1.cols(),
        });
    }
    if s.queries() == 0 {
        return Ok(0.0);
    }
    let total = (0..s.queries()).fold(0.0, |acc, i| acc + row_variance(s, i, p1.row(i)));
    Ok(total / s.queries() as f64)
}

/// `dH/dα` at `alpha`; never positive.
pub fn entropy_slope(s: &Logits, alpha: f64) -> Result<f64> {
    let p = scaled_attention(s, alpha)?;
    let mut total = 0.0;
    for i in 0..s.queries() {
        let n = s.row_keys(i);
        if n < 2 {
            return Err(Error::TooFewKeys(n));
        }
        total += row_variance(s, i, p.row(i)) / libm::log(n as f64);
    }
    Ok(-alpha * total / s.queries() as f64)
}

/// First-order estimate `α̂ = 1 + (H(1) − H_ref) ln N_k / V_g`.
pub fn closed_form_alpha(h_current: f64, h_ref: f64, variance: f64, keys: usize) -> f64 {
    1.0 + (h_current - h_ref) * libm::log(keys as f64) / variance
}

/// Entropy and variance of a head at `α = 1`, plus the scale finally used.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionStats {
    pub entropy: f64,
    pub variance: f64,
    pub alpha: f64,
}

/// Statistics of `P(1)` for one head.
///
/// A map whose rows see a single key is treated as uniform: entropy 1,
/// variance 0. That case only arises at the one-token first scale step.
pub fn head_statistics(s: &Logits) -> Result<AttentionStats> {
    statistics_with_map(s).map(|(stats, _)| stats)
}

/// [`head_statistics`] plus the `P(1)` map it was computed from.
pub fn statistics_with_map(s: &Logits) -> Result<(AttentionStats, Matrix)> {
    let p = scaled_attention(s, 1.0)?;
    let min_keys = (0..s.queries()).map(|i| s.row_keys(i)).min().unwrap_or(0);
    if min_keys < 2 {
        let stats = AttentionStats {
            entropy: 1.0,
            variance: 0.0,
            alpha: 1.0,
        };
        return Ok((stats, p));
    }
    let stats = AttentionStats {
        entropy: normalized_entropy(&p, s.mask.as_ref())?,
        variance: global_variance(s, &p)?,
        alpha: 1.0,
    };
    Ok((stats, p))
}

/// When and how strongly calibration may rescale a head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationPolicy {
    /// Calibrate only heads whose reference entropy is below this.
    pub tau_h: f64,
    /// Fall back to `α = 1` when `V_g` is below this floor.
    pub epsilon: f64,
    /// Calibrate only at steps strictly after this one (`k_h`).
    pub active_after: usize,
    pub alpha_min: f64,
    pub alpha_max: f64,
}

impl Default for CalibrationPolicy {
    fn default() -> Self {
        Self {
            tau_h: 0.3,
            epsilon: 1e-8,
            active_after: 9,
            alpha_min: 0.5,
            alpha_max: 4.0,
        }
    }
}

impl CalibrationPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_h > 0.0 && self.tau_h < 1.0) {
            return Err(invalid(alloc::format!("tau_h must lie in (0, 1), got {}", self.tau_h)));
        }
        if !(self.epsilon > 0.0) {
            return Err(invalid("calibration epsilon must be positive"));
        }
        if !(self.alpha_min > 0.0 && self.alpha_min <= 1.0 && self.alpha_max >= 1.0) {
            return Err(invalid(alloc::format!(
                "alpha clamp [{}, {}] must be positive and contain 1",
                self.alpha_min,
                self.alpha_max
            )));
        }
        Ok(())
    }
}

/// Everything the gate looks at for one (layer, head, step).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateInputs {
    /// `H(1)` at the current resolution.
    pub entropy: f64,
    /// Training-resolution entropy, if one was recorded.
    pub reference: Option<f64>,
    pub variance: f64,
    pub keys: usize,
}

/// Calibrated scale: `α̂` (clamped) when `k > k_h`, `H_ref < τ_h` and
/// `V_g ≥ ε`; exactly 1 otherwise.
pub fn gated_alpha(inputs: &GateInputs, policy: &CalibrationPolicy, k: usize) -> f64 {
    let Some(reference) = inputs.reference else {
        return 1.0;
    };
    let stage_gate = k > policy.active_after;
    let entropy_gate = reference < policy.tau_h;
    let variance_gate = inputs.variance >= policy.epsilon;
    if !(stage_gate && entropy_gate && variance_gate) || inputs.keys < 2 {
        return 1.0;
    }
    closed_form_alpha(inputs.entropy, reference, inputs.variance, inputs.keys)
        .clamp(policy.alpha_min, policy.alpha_max)
}

/// `P(α) V` for one head.
pub fn attend(head: &HeadTensors, alpha: f64) -> Result<Matrix> {
    let s = logits(head)?;
    let p = scaled_attention(&s, alpha)?;
    p.matmul(&head.v)
}

/// Concatenates per-head outputs and applies the output projection.
pub fn multi_head(heads: &[HeadTensors], alphas: &[f64], w_o: &Matrix) -> Result<Matrix> {
    if heads.len() != alphas.len() {
        return Err(Error::ShapeMismatch {
            what: "per-head scales",
            expected: heads.len(),
            found: alphas.len(),
        });
    }
    let outs = heads
        .iter()
        .zip(alphas)
        .map(|(h, &a)| attend(h, a))
        .collect::<Result<Vec<_>>>()?;
    Matrix::hconcat(&outs)?.matmul(w_o)
}


#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use crate::rng::StreamRng;
    use alloc::vec;
    use proptest::prelude::*;

    const LN3: f64 = 1.098_612_288_668_109_8;

    fn row(vals: &[f64]) -> Logits {
        Logits::dense(Matrix::from_rows(&[vals]).unwrap())
    }

    fn seeded(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.symmetric(scale)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn logits_examples() {
        let eye = Matrix::identity(3);
        let ones = Matrix::from_rows(&[&[1.0], &[2.0]]).unwrap();
        let s = logits(&HeadTensors::new(ones.clone(), ones.clone(), ones)).unwrap();
        assert_eq!(s.scores, Matrix::from_rows(&[&[1.0, 2.0], &[2.0, 4.0]]).unwrap());
        let zero = Matrix::zeros(3, 3);
        let s = logits(&HeadTensors::new(zero, eye.clone(), eye.clone())).unwrap();
        assert!(s.scores.as_slice().iter().all(|&x| x == 0.0));

        let mut rng = StreamRng::new(11, "logits");
        let q = seeded(&mut rng, 4, 8, 1.0);
        let k = seeded(&mut rng, 4, 8, 1.0);
        let s = logits(&HeadTensors::new(q.clone(), k.clone(), k.clone())).unwrap();
        let naive = naive_logits(&q, &k);
        for (a, b) in s.scores.as_slice().iter().zip(naive.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let bad = HeadTensors::new(Matrix::zeros(2, 3), Matrix::zeros(2, 4), Matrix::zeros(2, 4));
        assert!(logits(&bad).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = scaled_attention(&row(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        let p = scaled_attention(&row(&[0.0, LN3]), 1.0).unwrap();
        assert!((p[(0, 0)] - 0.25).abs() < 1e-12 && (p[(0, 1)] - 0.75).abs() < 1e-12);
        // gap >= ln 3 at α = 50 leaves < 1e-15 off the argmax
        let p = scaled_attention(&row(&[0.2, 0.2 + LN3, -1.0]), 50.0).unwrap();
        assert!(p[(0, 0)] + p[(0, 2)] < 1e-15);
        assert!(scaled_attention(&row(&[0.0]), 0.0).is_err());
        let masked = Logits {
            scores: Matrix::zeros(1, 2),
            mask: Some(Mask::from_fn(1, 2, |_, _| false)),
        };
        assert_eq!(scaled_attention(&masked, 1.0), Err(Error::FullyMaskedRow(0)));
    }

    #[test]
    fn entropy_examples() {
        let uniform = Matrix::from_vec(3, 16, vec![1.0 / 16.0; 48]).unwrap();
        assert!((normalized_entropy(&uniform, None).unwrap() - 1.0).abs() < 1e-12);
        let p = Matrix::from_rows(&[&[0.25, 0.75]]).unwrap();
        // -(0.25 ln 0.25 + 0.75 ln 0.75) / ln 2
        assert!((normalized_entropy(&p, None).unwrap() - 0.811_278_124_459_132_8).abs() < 1e-12);
        let one_hot = Matrix::from_rows(&[&[0.0, 1.0, 0.0], &[1.0, 0.0, 0.0]]).unwrap();
        assert!(normalized_entropy(&one_hot, None).unwrap().abs() < 1e-12);
        assert_eq!(
            normalized_entropy(&Matrix::from_rows(&[&[1.0]]).unwrap(), None),
            Err(Error::TooFewKeys(1))
        );
    }

    #[test]
    fn variance_examples() {
        let flat = Logits::dense(Matrix::from_vec(2, 4, vec![0.7; 8]).unwrap());
        let p = scaled_attention(&flat, 1.0).unwrap();
        assert!(global_variance(&flat, &p).unwrap().abs() < 1e-15);
        let two = row(&[0.0, LN3]);
        let p = scaled_attention(&two, 1.0).unwrap();
        let v = global_variance(&two, &p).unwrap();
        assert!((v - 0.1875 * LN3 * LN3).abs() < 1e-12);
        assert!((v - 0.226_30).abs() < 1e-5);

        let mut rng = StreamRng::new(3, "variance");
        let s = Logits::dense(seeded(&mut rng, 8, 32, 2.0));
        let p = scaled_attention(&s, 1.0).unwrap();
        let mut brute = 0.0;
        for i in 0..8 {
            let mut m = 0.0;
            for j in 0..32 {
                m += p[(i, j)] * s.scores[(i, j)];
            }
            let mut var = 0.0;
            for j in 0..32 {
                let d = s.scores[(i, j)] - m;
                var += p[(i, j)] * d * d;
            }
            brute += var / 8.0;
        }
        assert!((global_variance(&s, &p).unwrap() - brute).abs() < 1e-12);
    }

    #[test]
    fn slope_examples() {
        let flat = Logits::dense(Matrix::from_vec(1, 4, vec![0.3; 4]).unwrap());
        assert!(entropy_slope(&flat, 1.0).unwrap().abs() < 1e-15);
        let two = row(&[0.0, LN3]);
        let slope = entropy_slope(&two, 1.0).unwrap();
        assert!((slope + 0.1875 * LN3 * LN3 / core::f64::consts::LN_2).abs() < 1e-12);
        assert!((slope + 0.326_49).abs() < 1e-5);
    }

    #[test]
    fn slope_matches_finite_differences() {
        let mut rng = StreamRng::new(5, "slope-fd");
        for case in 0..50 {
            let rows = 1 + case % 7;
            let cols = 2 + (case * 5) % 30;
            let s = Logits::dense(seeded(&mut rng, rows, cols, 3.0));
            let alpha = 0.5 + (case as f64) * 0.05;
            let h = 1e-4;
            let fd = (dense_entropy(&s.scores, alpha + h) - dense_entropy(&s.scores, alpha - h)) / (2.0 * h);
            let slope = entropy_slope(&s, alpha).unwrap();
            assert!((slope - fd).abs() < 1e-5, "case {case}: {slope} vs {fd}");
        }
    }

    #[test]
    fn closed_form_examples() {
        assert_eq!(closed_form_alpha(0.6, 0.6, 0.3, 8), 1.0);
        let two = row(&[0.0, LN3]);
        let stats = head_statistics(&two).unwrap();
        let a = closed_form_alpha(stats.entropy, 0.75, stats.variance, 2);
        assert!((a - 1.1877).abs() < 1e-4, "{a}");
        let (root, residual) = bisect_alpha(&two.scores, 0.75);
        assert!(residual <= 1e-10);
        assert!((root - 1.18).abs() < 0.01, "{root}");
        assert!((a - root).abs() / root < 0.1);
        assert!(closed_form_alpha(0.4, 0.5, 0.3, 8) < 1.0);
        assert!(closed_form_alpha(0.6, 0.5, 0.3, 8) > 1.0);
    }

    #[test]
    fn gate_truth_table() {
        let policy = CalibrationPolicy::default();
        for stage in [false, true] {
            for low_entropy in [false, true] {
                for enough_variance in [false, true] {
                    let inputs = GateInputs {
                        entropy: 0.35,
                        reference: Some(if low_entropy { 0.25 } else { 0.3 }),
                        variance: if enough_variance { 0.4 } else { policy.epsilon / 2.0 },
                        keys: 64,
                    };
                    let k = if stage { 10 } else { 9 };
                    let a = gated_alpha(&inputs, &policy, k);
                    if stage && low_entropy && enough_variance {
                        assert_ne!(a, 1.0);
                    } else {
                        assert_eq!(a, 1.0);
                    }
                }
            }
        }
        let absent = GateInputs {
            entropy: 0.5,
            reference: None,
            variance: 1.0,
            keys: 64,
        };
        assert_eq!(gated_alpha(&absent, &policy, 12), 1.0);
    }

    #[test]
    fn alpha_is_clamped() {
        let policy = CalibrationPolicy::default();
        let inputs = GateInputs {
            entropy: 0.9,
            reference: Some(0.05),
            variance: 1e-3,
            keys: 1024,
        };
        assert_eq!(gated_alpha(&inputs, &policy, 12), 4.0);
    }

    #[test]
    fn attend_examples() {
        let v = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        // large logit on key 1 makes the map one-hot
        let q = Matrix::from_rows(&[&[1000.0]]).unwrap();
        let k = Matrix::from_rows(&[&[0.0], &[1.0], &[0.0]]).unwrap();
        let out = attend(&HeadTensors::new(q, k, v.clone()), 1.0).unwrap();
        assert_eq!(out.row(0), v.row(1));
        let q = Matrix::zeros(2, 1);
        let k = Matrix::zeros(3, 1);
        let out = attend(&HeadTensors::new(q, k, v.clone()), 1.0).unwrap();
        for i in 0..2 {
            assert!((out[(i, 0)] - 3.0).abs() < 1e-12 && (out[(i, 1)] - 4.0).abs() < 1e-12);
        }
        let bad = HeadTensors::new(Matrix::zeros(2, 1), Matrix::zeros(3, 1), Matrix::zeros(2, 2));
        assert!(attend(&bad, 1.0).is_err());
    }

    #[test]
    fn attend_matches_naive_loops() {
        let mut rng = StreamRng::new(9, "attend");
        let q = seeded(&mut rng, 5, 8, 1.0);
        let k = seeded(&mut rng, 7, 8, 1.0);
        let v = seeded(&mut rng, 7, 3, 1.0);
        let alpha = 1.7;
        let out = attend(&HeadTensors::new(q.clone(), k.clone(), v.clone()), alpha).unwrap();
        let s = naive_logits(&q, &k);
        for i in 0..5 {
            let z: f64 = (0..7).map(|j| libm::exp(alpha * s[(i, j)])).sum();
            for c in 0..3 {
                let mut acc = 0.0;
                for j in 0..7 {
                    acc += libm::exp(alpha * s[(i, j)]) / z * v[(j, c)];
                }
                assert!((out[(i, c)] - acc).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn masked_entries_get_no_mass() {
        let mut rng = StreamRng::new(1, "mask");
        let x = seeded(&mut rng, 6, 4, 1.0);
        let mask = Mask::block_causal(&[1, 2, 3]);
        let s = logits(&HeadTensors::new(x.clone(), x.clone(), x).with_mask(mask.clone())).unwrap();
        let p = scaled_attention(&s, 1.3).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                if !mask.get(i, j) {
                    assert_eq!(p[(i, j)], 0.0);
                }
            }
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        // first block has one key: statistics fall back to the uniform convention
        let first = head_statistics(&s.slice_rows(0, 1)).unwrap();
        assert_eq!((first.entropy, first.variance), (1.0, 0.0));
        let later = head_statistics(&s.slice_rows(3, 6)).unwrap();
        assert!(later.entropy > 0.0 && later.entropy <= 1.0);
    }

    #[test]
    fn multi_head_concatenates_then_projects() {
        let v = Matrix::from_rows(&[&[1.0], &[3.0]]).unwrap();
        let h = HeadTensors::new(Matrix::zeros(1, 2), Matrix::zeros(2, 2), v);
        let w_o = Matrix::from_rows(&[&[1.0], &[10.0]]).unwrap();
        let out = multi_head(&[h.clone(), h], &[1.0, 2.0], &w_o).unwrap();
        assert!((out[(0, 0)] - 22.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_non_increasing(seed in 0u64..10_000, rows in 1usize..16, cols in 2usize..64) {
            let mut rng = StreamRng::new(seed, "entropy-prop");
            let s = Logits::dense(seeded(&mut rng, rows, cols, 4.0));
            let mut prev = f64::INFINITY;
            for alpha in [0.5, 1.0, 1.5, 2.0, 4.0] {
                let h = normalized_entropy(&scaled_attention(&s, alpha).unwrap(), None).unwrap();
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&h));
                prop_assert!(h <= prev + 1e-12);
                prev = h;
            }
        }

        #[test]
        fn rows_are_stochastic(seed in 0u64..10_000, alpha in 0.05f64..20.0) {
            let mut rng = StreamRng::new(seed, "rows");
            let s = Logits::dense(seeded(&mut rng, 4, 9, 5.0));
            let p = scaled_attention(&s, alpha).unwrap();
            for r in p.iter_rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
