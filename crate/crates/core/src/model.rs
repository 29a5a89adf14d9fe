//! A toy next-scale-prediction transformer.
//!
//! Step `k` predicts a whole `h_k × w_k` token map at once, attending to every
//! token of steps `1..=k` (block-causal). Keys and values of finished steps are
//! cached with the rotation of the step that produced them. Weights come from
//! the model seed; nothing is trained.
//!
//! Inputs at step `k` are the previous map's token embeddings upsampled by
//! nearest neighbour, plus a per-step embedding and a run-specific prompt
//! vector drawn from the run seed. Decoding is greedy.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::attention::{
    gated_alpha, logits, scaled_attention, statistics_with_map, CalibrationPolicy, GateInputs, HeadTensors, Mask,
};
use crate::error::invalid;
use crate::probe::{band_query_norms, intervened_frequencies, zeroed_pairs, BandNorms, Intervention};
use crate::reference::ReferenceEntropyStore;
use crate::rng::StreamRng;
use crate::rope::{
    apply_rope_in_place, banded_tables, grid_rotation_angles, AxisMode, Band, FrequencyTable, RemapRule, RopeConfig,
    StageSchedule,
};
use crate::{Error, Matrix, Result};

/// Strictly increasing square sides for `steps` scale steps ending at `side`.
///
/// Starts from the geometric sequence `side^(i/(K-1))`, rounds, then pushes
/// values up to keep them strictly increasing and caps them so the last one is
/// exactly `side`.
pub fn build_scale_schedule(side: usize, steps: usize) -> Result<Vec<usize>> {
    if steps < 3 {
        return Err(invalid(alloc::format!("need at least 3 scale steps, got {steps}")));
    }
    if side < steps {
        return Err(invalid(alloc::format!(
            "side {side} cannot hold {steps} strictly increasing scales"
        )));
    }
    let last = (steps - 1) as f64;
    let mut sides: Vec<usize> = (0..steps)
        .map(|i| libm::round(libm::pow(side as f64, i as f64 / last)) as usize)
        .collect();
    sides[0] = sides[0].max(1);
    for i in 1..steps {
        sides[i] = sides[i].max(sides[i - 1] + 1);
    }
    sides[steps - 1] = side;
    for i in (0..steps - 1).rev() {
        sides[i] = sides[i].min(sides[i + 1] - 1);
    }
    Ok(sides)
}

/// Rescales a training schedule to a larger final side, keeping it strictly
/// increasing.
pub fn scale_schedule_to(train: &[usize], side: usize) -> Result<Vec<usize>> {
    let n = train.len();
    let from = *train.last().ok_or_else(|| invalid("empty scale schedule"))?;
    if side == from {
        return Ok(train.to_vec());
    }
    if side < n {
        return Err(invalid(alloc::format!("side {side} cannot hold {n} scales")));
    }
    let ratio = side as f64 / from as f64;
    let mut sides: Vec<usize> = train
        .iter()
        .map(|&s| (libm::round(s as f64 * ratio) as usize).max(1))
        .collect();
    for i in 1..n {
        sides[i] = sides[i].max(sides[i - 1] + 1);
    }
    sides[n - 1] = side;
    for i in (0..n - 1).rev() {
        sides[i] = sides[i].min(sides[i + 1] - 1);
    }
    Ok(sides)
}

/// The default stage boundaries (6 and 9 of 13) scaled to `steps` steps.
pub fn stage_schedule_for(steps: usize) -> StageSchedule {
    let d = StageSchedule::default();
    if steps == d.total_steps {
        return d;
    }
    let scale = |b: usize| ((b * steps + d.total_steps / 2) / d.total_steps).clamp(1, steps.max(1));
    StageSchedule {
        total_steps: steps,
        layout_end: scale(d.layout_end),
        local_end: scale(d.local_end),
    }
}

/// Builds the remap rule called `name` for `cfg` extrapolated to
/// `target_side`. YaRN thresholds come from the model's band boundaries.
pub fn remap_rule(cfg: &ModelConfig, name: &str, target_side: usize, schedule: StageSchedule) -> Result<RemapRule> {
    let s = target_side as f64 / cfg.train_side as f64;
    let tables = cfg.frequency_tables()?;
    Ok(match name {
        "none" | "identity" => RemapRule::Identity,
        "nope" => RemapRule::NoPe,
        "pi" => RemapRule::Pi { s },
        "ntk" => RemapRule::Ntk { s },
        "yarn" => RemapRule::yarn_for(&tables[0], s)?,
        "stage-aware" => RemapRule::stage_aware_for(&tables[0], s, schedule)?,
        other => {
            return Err(invalid(alloc::format!(
                "unknown remap rule {other:?}; expected none, pi, ntk, yarn or stage-aware"
            )))
        }
    })
}

/// Center-aligned coordinates of an `h × w` map on a `side × side` grid,
/// row-major.
pub fn positions_for_step(h: usize, w: usize, side: usize) -> Vec<(f64, f64)> {
    let (fh, fw, fs) = (h as f64, w as f64, side as f64);
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            out.push(((i as f64 + 0.5) * fs / fh - 0.5, (j as f64 + 0.5) * fs / fw - 0.5));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub vocab_size: usize,
    /// Number of scale steps `K`.
    pub total_steps: usize,
    /// Final side at training resolution, `L`.
    pub train_side: usize,
    pub rope_base: f64,
    pub high_band_size: usize,
    /// Explicit training sides; `None` uses [`build_scale_schedule`].
    pub scale_sides: Option<Vec<usize>>,
    /// Seed for the weights.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            head_dim: 64,
            vocab_size: 32,
            total_steps: 13,
            train_side: 16,
            rope_base: 10_000.0,
            high_band_size: 3,
            scale_sides: None,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn model_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn rope(&self, target_side: usize) -> RopeConfig {
        RopeConfig {
            head_dim: self.head_dim,
            base: self.rope_base,
            train_side: self.train_side,
            target_side,
            high_band_size: self.high_band_size,
            axis_mode: AxisMode::TwoDAxial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(invalid("layers and heads must be positive"));
        }
        if self.vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        self.rope(self.train_side).validate()?;
        let sides = self.train_schedule()?;
        if sides.len() != self.total_steps {
            return Err(invalid(alloc::format!(
                "scale schedule has {} entries, total_steps is {}",
                sides.len(),
                self.total_steps
            )));
        }
        if sides.windows(2).any(|w| w[1] < w[0]) || sides[0] == 0 {
            return Err(invalid("scale sides must be positive and non-decreasing"));
        }
        if *sides.last().unwrap() != self.train_side {
            return Err(invalid("last scale side must equal train_side"));
        }
        Ok(())
    }

    pub fn train_schedule(&self) -> Result<Vec<usize>> {
        match &self.scale_sides {
            Some(s) => Ok(s.clone()),
            None => build_scale_schedule(self.train_side, self.total_steps),
        }
    }

    /// Sides used when generating a `target_side` map.
    pub fn schedule_for(&self, target_side: usize) -> Result<Vec<usize>> {
        if target_side < self.train_side {
            return Err(invalid(alloc::format!(
                "target side {target_side} below train side {}",
                self.train_side
            )));
        }
        match &self.scale_sides {
            Some(s) => scale_schedule_to(s, target_side),
            None => build_scale_schedule(target_side, self.total_steps),
        }
    }

    /// Band-labelled height and width tables.
    pub fn frequency_tables(&self) -> Result<Vec<FrequencyTable>> {
        banded_tables(&self.rope(self.train_side))
    }

    /// Band of every rotary pair in feature order (height pairs, then width).
    pub fn pair_bands(&self) -> Result<Vec<Band>> {
        let mut out = Vec::new();
        for t in self.frequency_tables()? {
            for p in &t.pairs {
                out.push(p.band.ok_or(Error::BandsUnassigned)?);
            }
        }
        Ok(out)
    }

    /// Canonical `key=value` rendering of every field that changes the model.
    pub fn canonical(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "layers={}\nheads={}\nhead_dim={}\nvocab_size={}\ntotal_steps={}\ntrain_side={}\nrope_base={:?}\nhigh_band_size={}\nseed={}\n",
            self.layers,
            self.heads,
            self.head_dim,
            self.vocab_size,
            self.total_steps,
            self.train_side,
            self.rope_base,
            self.high_band_size,
            self.seed
        );
        if let Some(sides) = &self.scale_sides {
            let _ = writeln!(s, "scale_sides={sides:?}");
        }
        s
    }

    /// First 16 hex digits of SHA-256 over [`ModelConfig::canonical`].
    pub fn config_hash(&self) -> String {
        let digest = Sha256::digest(self.canonical().as_bytes());
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

/// Which attention maps a run keeps in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct MapSelector {
    pub layer: Option<usize>,
    pub head: Option<usize>,
    pub step: Option<usize>,
}

impl MapSelector {
    pub fn matches(&self, layer: usize, head: usize, step: usize) -> bool {
        self.layer.is_none_or(|l| l == layer)
            && self.head.is_none_or(|h| h == head)
            && self.step.is_none_or(|k| k == step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationPlan {
    pub target_side: usize,
    pub remap: RemapRule,
    pub schedule: StageSchedule,
    /// `Some` turns entropy calibration on.
    pub calibration: Option<CalibrationPolicy>,
    pub reference: Option<ReferenceEntropyStore>,
    pub interventions: Vec<Intervention>,
    /// Seed of the run's prompt vector.
    pub seed: u64,
    pub retain_maps: Option<MapSelector>,
    pub retain_logits: bool,
}

impl GenerationPlan {
    /// Training-resolution run with identity RoPE and no calibration.
    pub fn native(cfg: &ModelConfig, seed: u64) -> Self {
        Self {
            target_side: cfg.train_side,
            remap: RemapRule::Identity,
            schedule: stage_schedule_for(cfg.total_steps),
            calibration: None,
            reference: None,
            interventions: Vec::new(),
            seed,
            retain_maps: None,
            retain_logits: false,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.target_side < cfg.train_side {
            return Err(invalid(alloc::format!(
                "target side {} below train side {}",
                self.target_side,
                cfg.train_side
            )));
        }
        self.schedule.validate()?;
        if self.schedule.total_steps != cfg.total_steps {
            return Err(invalid(alloc::format!(
                "stage schedule has K={}, model has K={}",
                self.schedule.total_steps,
                cfg.total_steps
            )));
        }
        self.remap.validate()?;
        if let Some(policy) = &self.calibration {
            policy.validate()?;
            if policy.active_after < cfg.total_steps && self.reference.is_none() {
                return Err(Error::MissingReference);
            }
        }
        for iv in &self.interventions {
            iv.validate(cfg.total_steps)?;
        }
        Ok(())
    }
}

/// Runs one closure per head. Implementations must return results in head
/// order; each head's arithmetic is independent, so any schedule gives the
/// same bits.
pub trait HeadExecutor {
    fn run(&self, heads: usize, f: &(dyn Fn(usize) -> Result<HeadOutput> + Sync)) -> Vec<Result<HeadOutput>>;
}

/// Heads one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl HeadExecutor for Sequential {
    fn run(&self, heads: usize, f: &(dyn Fn(usize) -> Result<HeadOutput> + Sync)) -> Vec<Result<HeadOutput>> {
        (0..heads).map(f).collect()
    }
}

/// What one head produces for one layer at one step.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub out: Matrix,
    pub new_keys: Matrix,
    pub new_values: Matrix,
    pub records: Vec<HeadRecord>,
    pub maps: Vec<(usize, Matrix)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadRecord {
    pub layer: usize,
    pub head: usize,
    pub alpha: f64,
    /// `H(1)` at the generated resolution.
    pub entropy: f64,
    /// `V_g`.
    pub variance: f64,
    pub reference: Option<f64>,
    pub band_norms: BandNorms,
}

/// Appended keys and values of every finished step.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    keys: Vec<Vec<Matrix>>,
    values: Vec<Vec<Matrix>>,
    positions: Vec<(f64, f64)>,
    step_lengths: Vec<usize>,
}

impl KvCache {
    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Self {
        Self {
            keys: vec![vec![Matrix::zeros(0, head_dim); heads]; layers],
            values: vec![vec![Matrix::zeros(0, head_dim); heads]; layers],
            positions: Vec::new(),
            step_lengths: Vec::new(),
        }
    }

    /// Cached token count.
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn steps(&self) -> usize {
        self.step_lengths.len()
    }

    pub fn keys(&self, layer: usize, head: usize) -> &Matrix {
        &self.keys[layer][head]
    }

    pub fn values(&self, layer: usize, head: usize) -> &Matrix {
        &self.values[layer][head]
    }

    pub fn positions(&self) -> &[(f64, f64)] {
        &self.positions
    }
}

/// Vocabulary logits per token, per-head records, and retained attention
/// maps keyed by `(layer, head, step)`.
pub type StepOutput = (Matrix, Vec<HeadRecord>, Vec<((usize, usize, usize), Matrix)>);

/// Everything about step `k` that does not depend on the network state.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub step: usize,
    pub side: usize,
    pub embeddings: Matrix,
    pub positions: Vec<(f64, f64)>,
    /// Remapped frequencies per axis (height, width) after interventions.
    pub frequencies: Vec<Vec<f64>>,
    /// Tokens × pairs rotation angles.
    pub angles: Matrix,
    /// Pairs zeroed after rotation, feature order.
    pub zeroed: Vec<bool>,
    pub omega: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenMap {
    pub height: usize,
    pub width: usize,
    pub tokens: Vec<u32>,
}

impl TokenMap {
    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.tokens[i * self.width + j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepTrace {
    pub step: usize,
    pub side: usize,
    pub omega: Option<f64>,
    pub frequencies: Vec<Vec<f64>>,
    pub heads: Vec<HeadRecord>,
    pub logits: Option<Matrix>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct GenerationTrace {
    pub steps: Vec<StepTrace>,
    pub warnings: Vec<String>,
    pub maps: BTreeMap<(usize, usize, usize), Matrix>,
}

impl GenerationTrace {
    /// Retained attention map of `(layer, head, step)`.
    pub fn attention_map(&self, layer: usize, head: usize, step: usize) -> Result<&Matrix> {
        self.maps.get(&(layer, head, step)).ok_or_else(|| {
            invalid(alloc::format!(
                "attention map for layer {layer} head {head} step {step} was not retained"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub token_maps: Vec<TokenMap>,
    pub trace: GenerationTrace,
}

struct LayerWeights {
    wq: Vec<Matrix>,
    wk: Vec<Matrix>,
    wv: Vec<Matrix>,
    wo: Matrix,
    w1: Matrix,
    w2: Matrix,
}

pub struct ToyModel {
    cfg: ModelConfig,
    embed: Matrix,
    step_embed: Matrix,
    start: Vec<f64>,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
    tables: Vec<FrequencyTable>,
    pair_bands: Vec<Band>,
}

fn random_matrix(seed: u64, name: &str, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut rng = StreamRng::new(seed, name);
    let data = (0..rows * cols).map(|_| rng.symmetric(scale)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized buffer")
}

/// Uniform bound giving variance `1 / fan_in`.
fn fan_in_scale(fan_in: usize) -> f64 {
    libm::sqrt(3.0 / fan_in as f64)
}

/// Query gain of head `h`: 1, 2, 4, 8, repeating. Sharper heads give the
/// calibration something to act on.
pub fn head_gain(h: usize) -> f64 {
    (1u32 << (h % 4)) as f64
}

fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let ms = row.iter().fold(0.0, |acc, v| acc + v * v) / row.len() as f64;
        let inv = 1.0 / libm::sqrt(ms + 1e-6);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)))
}

fn add_assign(x: &mut Matrix, y: &Matrix) {
    for i in 0..x.rows() {
        for (a, b) in x.row_mut(i).iter_mut().zip(y.row(i)) {
            *a += b;
        }
    }
}

fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Query-side view of one head for one block of rows.
struct HeadBlock<'a> {
    layer: usize,
    head: usize,
    step: usize,
    q: Matrix,
    keys: &'a Matrix,
    values: &'a Matrix,
    mask: Option<Mask>,
}

impl ToyModel {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let dm = cfg.model_dim();
        let d = cfg.head_dim;
        let seed = cfg.seed;
        let proj = fan_in_scale(dm);
        let layers = (0..cfg.layers)
            .map(|l| {
                let per_head = |what: &str, gain: &dyn Fn(usize) -> f64| -> Vec<Matrix> {
                    (0..cfg.heads)
                        .map(|h| random_matrix(seed, &alloc::format!("layer{l}.head{h}.{what}"), dm, d, proj * gain(h)))
                        .collect()
                };
                LayerWeights {
                    wq: per_head("wq", &head_gain),
                    wk: per_head("wk", &|_| 1.0),
                    wv: per_head("wv", &|_| 1.0),
                    wo: random_matrix(seed, &alloc::format!("layer{l}.wo"), dm, dm, fan_in_scale(dm)),
                    w1: random_matrix(seed, &alloc::format!("layer{l}.w1"), dm, 2 * dm, fan_in_scale(dm)),
                    w2: random_matrix(seed, &alloc::format!("layer{l}.w2"), 2 * dm, dm, fan_in_scale(2 * dm)),
                }
            })
            .collect();
        let tables = cfg.frequency_tables()?;
        let pair_bands = cfg.pair_bands()?;
        Ok(Self {
            embed: random_matrix(seed, "embed", cfg.vocab_size, dm, 1.0),
            step_embed: random_matrix(seed, "step_embed", cfg.total_steps, dm, 1.0),
            start: random_matrix(seed, "start", 1, dm, 1.0).into_vec(),
            unembed: random_matrix(seed, "unembed", dm, cfg.vocab_size, fan_in_scale(dm)),
            layers,
            tables,
            pair_bands,
            cfg,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Band-labelled (height, width) tables at training resolution.
    pub fn tables(&self) -> &[FrequencyTable] {
        &self.tables
    }

    pub fn pair_bands(&self) -> &[Band] {
        &self.pair_bands
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(self.cfg.layers, self.cfg.heads, self.cfg.head_dim)
    }

    /// Frequencies per axis used at step `k` under `plan`.
    pub fn step_frequencies(&self, plan: &GenerationPlan, k: usize) -> Result<Vec<Vec<f64>>> {
        self.tables
            .iter()
            .map(|t| {
                let base = plan.remap.frequencies(t, k)?;
                Ok(intervened_frequencies(&base, t, k, &plan.interventions))
            })
            .collect()
    }

    /// Builds the inputs of step `k` from the maps generated so far.
    pub fn step_inputs(&self, plan: &GenerationPlan, k: usize, previous: &[TokenMap]) -> Result<StepInputs> {
        let sides = self.cfg.schedule_for(plan.target_side)?;
        if k == 0 || k > sides.len() {
            return Err(Error::StepOutOfRange {
                step: k,
                total: sides.len(),
            });
        }
        if previous.len() != k - 1 {
            return Err(Error::ShapeMismatch {
                what: "previous token maps",
                expected: k - 1,
                found: previous.len(),
            });
        }
        let side = sides[k - 1];
        let dm = self.cfg.model_dim();
        let prompt = random_matrix(plan.seed, "prompt", 1, dm, 1.0).into_vec();
        let mut embeddings = Matrix::zeros(side * side, dm);
        for i in 0..side {
            for j in 0..side {
                let row = embeddings.row_mut(i * side + j);
                let base: &[f64] = match previous.last() {
                    None => &self.start,
                    Some(prev) => {
                        let tok = prev.get(i * prev.height / side, j * prev.width / side);
                        self.embed.row(tok as usize)
                    }
                };
                for (c, v) in row.iter_mut().enumerate() {
                    *v = base[c] + self.step_embed[(k - 1, c)] + prompt[c];
                }
            }
        }
        let positions = positions_for_step(side, side, plan.target_side);
        let frequencies = self.step_frequencies(plan, k)?;
        let pairs = self.cfg.head_dim / 2;
        let mut angles = Matrix::zeros(positions.len(), pairs);
        for (t, &(r, c)) in positions.iter().enumerate() {
            let a = grid_rotation_angles(&frequencies[0], &frequencies[1], r, c);
            angles.row_mut(t).copy_from_slice(&a);
        }
        let omega = match &plan.remap {
            RemapRule::StageAware { schedule, .. } => Some(schedule.weight(k)?),
            _ => None,
        };
        Ok(StepInputs {
            step: k,
            side,
            embeddings,
            positions,
            frequencies,
            angles,
            zeroed: zeroed_pairs(&self.pair_bands, k, &plan.interventions),
            omega,
        })
    }

    /// Rotated (and possibly zeroed) query, key and value rows of one head.
    fn project(&self, layer: usize, head: usize, normed: &Matrix, inputs: &StepInputs) -> Result<(Matrix, Matrix, Matrix)> {
        let w = &self.layers[layer];
        let mut q = normed.matmul(&w.wq[head])?;
        let mut k = normed.matmul(&w.wk[head])?;
        let v = normed.matmul(&w.wv[head])?;
        apply_rope_in_place(&mut q, &inputs.angles)?;
        apply_rope_in_place(&mut k, &inputs.angles)?;
        if inputs.zeroed.iter().any(|&z| z) {
            for m in [&mut q, &mut k] {
                for t in 0..m.rows() {
                    for (pair, &z) in m.row_mut(t).chunks_exact_mut(2).zip(&inputs.zeroed) {
                        if z {
                            pair[0] = 0.0;
                            pair[1] = 0.0;
                        }
                    }
                }
            }
        }
        Ok((q, k, v))
    }

    /// Attention of one block of query rows, with calibration.
    fn attend_block(&self, block: HeadBlock<'_>, plan: &GenerationPlan) -> Result<(Matrix, HeadRecord, Option<Matrix>)> {
        let band_norms = band_query_norms(&block.q, &self.pair_bands)?;
        let mut tensors = HeadTensors::new(block.q, block.keys.clone(), block.values.clone());
        tensors.mask = block.mask;
        let s = logits(&tensors)?;
        let (stats, p1) = statistics_with_map(&s)?;
        let reference = plan
            .reference
            .as_ref()
            .and_then(|r| r.lookup(block.layer, block.head, block.step));
        let keys = (0..s.queries()).map(|i| s.row_keys(i)).min().unwrap_or(0);
        let alpha = match &plan.calibration {
            Some(policy) => gated_alpha(
                &GateInputs {
                    entropy: stats.entropy,
                    reference,
                    variance: stats.variance,
                    keys,
                },
                policy,
                block.step,
            ),
            None => 1.0,
        };
        let p = if alpha == 1.0 { p1 } else { scaled_attention(&s, alpha)? };
        let out = p.matmul(&tensors.v)?;
        let keep = plan
            .retain_maps
            .is_some_and(|sel| sel.matches(block.layer, block.head, block.step));
        let record = HeadRecord {
            layer: block.layer,
            head: block.head,
            alpha,
            entropy: stats.entropy,
            variance: stats.variance,
            reference,
            band_norms,
        };
        Ok((out, record, keep.then_some(p)))
    }

    fn finish_layer(&self, layer: usize, x: &mut Matrix, outs: &[Matrix]) -> Result<()> {
        let w = &self.layers[layer];
        let attn = Matrix::hconcat(outs)?.matmul(&w.wo)?;
        add_assign(x, &attn);
        let mut hidden = rms_norm(x).matmul(&w.w1)?;
        for i in 0..hidden.rows() {
            for v in hidden.row_mut(i) {
                *v = gelu(*v);
            }
        }
        add_assign(x, &hidden.matmul(&w.w2)?);
        Ok(())
    }

    fn collect(results: Vec<Result<HeadOutput>>) -> Result<Vec<HeadOutput>> {
        results.into_iter().collect()
    }

    /// One cached step: attends over the cache plus this step's tokens, then
    /// appends this step's keys and values. Returns vocabulary logits per
    /// token and per-head records.
    pub fn forward_step(
        &self,
        cache: &mut KvCache,
        inputs: &StepInputs,
        plan: &GenerationPlan,
        executor: &dyn HeadExecutor,
    ) -> Result<StepOutput> {
        let sides = self.cfg.schedule_for(plan.target_side)?;
        let expected: usize = sides[..inputs.step - 1].iter().map(|s| s * s).sum();
        if cache.len() != expected || cache.steps() != inputs.step - 1 {
            return Err(Error::CacheMismatch {
                expected,
                found: cache.len(),
            });
        }
        let mut x = inputs.embeddings.clone();
        let mut records = Vec::new();
        let mut maps = Vec::new();
        for l in 0..self.cfg.layers {
            let normed = rms_norm(&x);
            let cache_ref = &*cache;
            let run = |h: usize| -> Result<HeadOutput> {
                let (q, k, v) = self.project(l, h, &normed, inputs)?;
                let mut keys = cache_ref.keys(l, h).clone();
                keys.append_rows(&k)?;
                let mut values = cache_ref.values(l, h).clone();
                values.append_rows(&v)?;
                let block = HeadBlock {
                    layer: l,
                    head: h,
                    step: inputs.step,
                    q,
                    keys: &keys,
                    values: &values,
                    mask: None,
                };
                let (out, record, map) = self.attend_block(block, plan)?;
                Ok(HeadOutput {
                    out,
                    new_keys: k,
                    new_values: v,
                    records: vec![record],
                    maps: map.map(|m| (inputs.step, m)).into_iter().collect(),
                })
            };
            let outputs = Self::collect(executor.run(self.cfg.heads, &run))?;
            for (h, o) in outputs.iter().enumerate() {
                cache.keys[l][h].append_rows(&o.new_keys)?;
                cache.values[l][h].append_rows(&o.new_values)?;
            }
            let outs: Vec<Matrix> = outputs.iter().map(|o| o.out.clone()).collect();
            for (h, o) in outputs.into_iter().enumerate() {
                records.extend(o.records);
                maps.extend(o.maps.into_iter().map(|(k, m)| ((l, h, k), m)));
            }
            self.finish_layer(l, &mut x, &outs)?;
        }
        cache.positions.extend_from_slice(&inputs.positions);
        cache.step_lengths.push(inputs.positions.len());
        let out = rms_norm(&x).matmul(&self.unembed)?;
        Ok((out, records, maps))
    }

    /// Cache-free forward over all tokens of `steps` under a block-causal
    /// mask. Returns the vocabulary logits of every token and the per-head
    /// records of every step, in step order.
    pub fn forward_full(
        &self,
        steps: &[StepInputs],
        plan: &GenerationPlan,
        executor: &dyn HeadExecutor,
    ) -> Result<(Matrix, Vec<Vec<HeadRecord>>)> {
        let sizes: Vec<usize> = steps.iter().map(|s| s.positions.len()).collect();
        let total: usize = sizes.iter().sum();
        let mut bounds = Vec::with_capacity(steps.len());
        let mut start = 0;
        for &n in &sizes {
            bounds.push((start, start + n));
            start += n;
        }
        let mask = Mask::block_causal(&sizes);
        let mut x = Matrix::zeros(0, self.cfg.model_dim());
        for s in steps {
            x.append_rows(&s.embeddings)?;
        }
        let mut records: Vec<Vec<HeadRecord>> = vec![Vec::new(); steps.len()];
        for l in 0..self.cfg.layers {
            let normed = rms_norm(&x);
            let run = |h: usize| -> Result<HeadOutput> {
                let mut qs = Vec::with_capacity(steps.len());
                let mut keys = Matrix::zeros(0, self.cfg.head_dim);
                let mut values = Matrix::zeros(0, self.cfg.head_dim);
                for (s, &(a, b)) in steps.iter().zip(&bounds) {
                    let (q, k, v) = self.project(l, h, &normed.slice_rows(a, b), s)?;
                    qs.push(q);
                    keys.append_rows(&k)?;
                    values.append_rows(&v)?;
                }
                let mut out = Matrix::zeros(0, self.cfg.head_dim);
                let mut recs = Vec::with_capacity(steps.len());
                for ((s, q), &(a, b)) in steps.iter().zip(qs).zip(&bounds) {
                    let block = HeadBlock {
                        layer: l,
                        head: h,
                        step: s.step,
                        q,
                        keys: &keys,
                        values: &values,
                        mask: Some(mask.slice_rows(a, b)),
                    };
                    let (o, rec, _) = self.attend_block(block, plan)?;
                    out.append_rows(&o)?;
                    recs.push(rec);
                }
                Ok(HeadOutput {
                    out,
                    new_keys: Matrix::zeros(0, 0),
                    new_values: Matrix::zeros(0, 0),
                    records: recs,
                    maps: Vec::new(),
                })
            };
            let outputs = Self::collect(executor.run(self.cfg.heads, &run))?;
            let outs: Vec<Matrix> = outputs.iter().map(|o| o.out.clone()).collect();
            for o in outputs {
                for (i, r) in o.records.into_iter().enumerate() {
                    records[i].push(r);
                }
            }
            self.finish_layer(l, &mut x, &outs)?;
        }
        debug_assert_eq!(x.rows(), total);
        Ok((rms_norm(&x).matmul(&self.unembed)?, records))
    }

    fn token_map(logits: &Matrix, side: usize) -> TokenMap {
        TokenMap {
            height: side,
            width: side,
            tokens: logits.iter_rows().map(argmax).collect(),
        }
    }

    fn start_trace(&self, plan: &GenerationPlan) -> GenerationTrace {
        let mut trace = GenerationTrace::default();
        if let Some(store) = &plan.reference {
            if let Some(w) = store.mismatch(&self.cfg) {
                trace.warnings.push(w);
            }
        }
        trace
    }

    /// Coarse-to-fine generation with KV caching.
    pub fn generate(&self, plan: &GenerationPlan, executor: &dyn HeadExecutor) -> Result<Generation> {
        plan.validate(&self.cfg)?;
        let mut cache = self.new_cache();
        let mut maps = Vec::with_capacity(self.cfg.total_steps);
        let mut trace = self.start_trace(plan);
        for k in 1..=self.cfg.total_steps {
            let inputs = self.step_inputs(plan, k, &maps)?;
            let (out, heads, kept) = self.forward_step(&mut cache, &inputs, plan, executor)?;
            maps.push(Self::token_map(&out, inputs.side));
            trace.maps.extend(kept);
            trace.steps.push(StepTrace {
                step: k,
                side: inputs.side,
                omega: inputs.omega,
                frequencies: inputs.frequencies,
                heads,
                logits: plan.retain_logits.then_some(out),
            });
        }
        Ok(Generation { token_maps: maps, trace })
    }

    /// Reference path without a cache: step `k` re-runs every token of steps
    /// `1..=k` through the masked network. Retained logits cover the step-`k`
    /// rows only. Attention maps are never retained here.
    pub fn generate_uncached(&self, plan: &GenerationPlan, executor: &dyn HeadExecutor) -> Result<Generation> {
        plan.validate(&self.cfg)?;
        let mut maps: Vec<TokenMap> = Vec::with_capacity(self.cfg.total_steps);
        let mut inputs: Vec<StepInputs> = Vec::with_capacity(self.cfg.total_steps);
        let mut trace = self.start_trace(plan);
        for k in 1..=self.cfg.total_steps {
            inputs.push(self.step_inputs(plan, k, &maps)?);
            let (all, mut records) = self.forward_full(&inputs, plan, executor)?;
            let n = inputs[k - 1].positions.len();
            let out = all.slice_rows(all.rows() - n, all.rows());
            let current = &inputs[k - 1];
            maps.push(Self::token_map(&out, current.side));
            trace.steps.push(StepTrace {
                step: k,
                side: current.side,
                omega: current.omega,
                frequencies: current.frequencies.clone(),
                heads: records.pop().unwrap_or_default(),
                logits: plan.retain_logits.then_some(out),
            });
        }
        Ok(Generation { token_maps: maps, trace })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::InterventionKind;
    use crate::rope::rotation_angles;

    fn small() -> ModelConfig {
        ModelConfig {
            layers: 1,
            heads: 2,
            head_dim: 16,
            vocab_size: 8,
            total_steps: 4,
            train_side: 6,
            high_band_size: 1,
            seed: 3,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(build_scale_schedule(16, 5).unwrap(), vec![1, 2, 4, 8, 16]);
        assert_eq!(build_scale_schedule(13, 13).unwrap(), (1..=13).collect::<Vec<_>>());
        let s = build_scale_schedule(32, 13).unwrap();
        assert_eq!(s.len(), 13);
        assert_eq!(*s.last().unwrap(), 32);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
        assert!(build_scale_schedule(12, 13).is_err());
        assert!(build_scale_schedule(16, 2).is_err());
    }

    #[test]
    fn schedule_monotone_for_all_feasible_sizes() {
        for k in 3..20 {
            for side in k..120 {
                let s = build_scale_schedule(side, k).unwrap();
                assert_eq!(s.len(), k);
                assert_eq!(s[k - 1], side);
                assert!(s[0] >= 1);
                assert!(s.windows(2).all(|w| w[0] < w[1]), "{side} {k}: {s:?}");
            }
        }
    }

    #[test]
    fn position_examples() {
        let p = positions_for_step(4, 4, 4);
        assert_eq!(p[5], (1.0, 1.0));
        assert_eq!(positions_for_step(1, 1, 16), vec![(7.5, 7.5)]);
        let half = positions_for_step(4, 4, 8);
        let rows: Vec<f64> = half.iter().step_by(4).map(|p| p.0).collect();
        assert_eq!(rows, vec![0.5, 2.5, 4.5, 6.5]);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = ModelConfig::default();
        assert_eq!(a.config_hash(), ModelConfig::default().config_hash());
        assert_eq!(a.config_hash().len(), 16);
        let b = ModelConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn native_run_has_unit_alphas() {
        let model = ToyModel::new(small()).unwrap();
        let run = model.generate(&GenerationPlan::native(model.config(), 1), &Sequential).unwrap();
        assert_eq!(run.token_maps.len(), 4);
        assert_eq!(run.trace.steps.len(), 4);
        for s in &run.trace.steps {
            assert_eq!(s.heads.len(), 2);
            assert!(s.heads.iter().all(|h| h.alpha == 1.0 && (0.0..=1.0).contains(&h.entropy)));
        }
        // single-token first step counts as uniform
        assert!(run.trace.steps[0].heads.iter().all(|h| h.entropy == 1.0));
    }

    #[test]
    fn cache_checks_step_alignment() {
        let model = ToyModel::new(small()).unwrap();
        let plan = GenerationPlan::native(model.config(), 0);
        let first = model.step_inputs(&plan, 1, &[]).unwrap();
        let mut cache = model.new_cache();
        model.forward_step(&mut cache, &first, &plan, &Sequential).unwrap();
        assert_eq!(cache.len(), 1);
        assert!(matches!(
            model.forward_step(&mut cache, &first, &plan, &Sequential),
            Err(Error::CacheMismatch { .. })
        ));
    }

    #[test]
    fn cached_matches_uncached() {
        let model = ToyModel::new(small()).unwrap();
        let mut plan = GenerationPlan::native(model.config(), 4);
        plan.target_side = 12;
        plan.schedule = StageSchedule::new(4, 2, 3).unwrap();
        plan.remap = RemapRule::stage_aware_for(&model.tables()[0], 2.0, plan.schedule).unwrap();
        plan.retain_logits = true;
        let a = model.generate(&plan, &Sequential).unwrap();
        let b = model.generate_uncached(&plan, &Sequential).unwrap();
        assert_eq!(a.token_maps, b.token_maps);
        for (x, y) in a.trace.steps.iter().zip(&b.trace.steps) {
            let (lx, ly) = (x.logits.as_ref().unwrap(), y.logits.as_ref().unwrap());
            for (u, v) in lx.as_slice().iter().zip(ly.as_slice()) {
                assert!((u - v).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn step_angles_follow_the_remap() {
        let model = ToyModel::new(small()).unwrap();
        let mut plan = GenerationPlan::native(model.config(), 0);
        plan.target_side = 12;
        plan.schedule = StageSchedule::new(4, 2, 3).unwrap();
        plan.remap = RemapRule::stage_aware_for(&model.tables()[0], 2.0, plan.schedule).unwrap();
        for k in 1..=4 {
            let inputs = model.step_inputs(&plan, k, &vec![
                TokenMap { height: 1, width: 1, tokens: vec![0] };
                k - 1
            ]);
            let inputs = match inputs {
                Ok(i) => i,
                // maps of the wrong size are only used for their tokens
                Err(e) => panic!("{e}"),
            };
            let h = crate::rope::stage_remap(&model.tables()[0], k, &plan.schedule, 2.0).unwrap();
            let w = crate::rope::stage_remap(&model.tables()[1], k, &plan.schedule, 2.0).unwrap();
            for (t, &(r, c)) in inputs.positions.iter().enumerate() {
                let mut expect = rotation_angles(&h, r);
                expect.extend(rotation_angles(&w, c));
                assert_eq!(inputs.angles.row(t), expect.as_slice());
            }
        }
    }

    #[test]
    fn calibration_requires_reference() {
        let model = ToyModel::new(small()).unwrap();
        let mut plan = GenerationPlan::native(model.config(), 0);
        plan.calibration = Some(CalibrationPolicy {
            active_after: 2,
            ..CalibrationPolicy::default()
        });
        assert_eq!(model.generate(&plan, &Sequential), Err(Error::MissingReference));
    }

    #[test]
    fn zeroed_pairs_do_not_reach_logits() {
        let model = ToyModel::new(small()).unwrap();
        let plan = GenerationPlan::native(model.config(), 0);
        let iv = Intervention {
            kind: InterventionKind::ZeroQkFeatures,
            band: Band::VeryLow,
            first_step: 2,
            last_step: 4,
        };
        let plan = crate::probe::apply_intervention(&plan, iv, model.config()).unwrap();
        let inputs = model.step_inputs(&plan, 1, &[]).unwrap();
        assert!(inputs.zeroed.iter().all(|&z| !z));
        let maps = vec![TokenMap { height: 1, width: 1, tokens: vec![0] }];
        let inputs = model.step_inputs(&plan, 2, &maps).unwrap();
        let x = rms_norm(&inputs.embeddings);
        let (q, k, _) = model.project(0, 0, &x, &inputs).unwrap();
        for (p, &z) in inputs.zeroed.iter().enumerate() {
            if z {
                for t in 0..q.rows() {
                    assert_eq!((q[(t, 2 * p)], q[(t, 2 * p + 1)]), (0.0, 0.0));
                    assert_eq!((k[(t, 2 * p)], k[(t, 2 * p + 1)]), (0.0, 0.0));
                }
            }
        }
        assert!(inputs.zeroed.iter().any(|&z| z));
    }
}
