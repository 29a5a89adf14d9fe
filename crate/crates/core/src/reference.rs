//! Training-resolution attention entropies, keyed by (layer, head, step).

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::model::{GenerationPlan, HeadExecutor, ModelConfig, ToyModel};
use crate::rng::derive_seed;
use crate::Result;

/// `(layer, head, scale step)`; layers and heads count from 0, steps from 1.
pub type EntropyKey = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReferenceMetadata {
    pub config_hash: String,
    pub train_side: usize,
    pub seed: u64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceEntropyStore {
    pub metadata: ReferenceMetadata,
    entries: BTreeMap<EntropyKey, f64>,
}

impl ReferenceEntropyStore {
    pub fn new(metadata: ReferenceMetadata) -> Self {
        Self {
            metadata,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: EntropyKey, entropy: f64) {
        self.entries.insert(key, entropy);
    }

    /// Exact-key lookup; `None` tells the caller to keep `α = 1`.
    pub fn lookup(&self, layer: usize, head: usize, step: usize) -> Option<f64> {
        self.entries.get(&(layer, head, step)).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&EntropyKey, &f64)> {
        self.entries.iter()
    }

    /// Describes why this store may not belong to `cfg`, if it may not.
    pub fn mismatch(&self, cfg: &ModelConfig) -> Option<String> {
        let hash = cfg.config_hash();
        if self.metadata.config_hash != hash {
            Some(alloc::format!(
                "reference entropies were captured for config {} (train side {}), current config is {} (train side {})",
                self.metadata.config_hash,
                self.metadata.train_side,
                hash,
                cfg.train_side
            ))
        } else if self.metadata.train_side != cfg.train_side {
            Some(alloc::format!(
                "reference entropies were captured at train side {}, config says {}",
                self.metadata.train_side,
                cfg.train_side
            ))
        } else {
            None
        }
    }
}

/// Seed of capture sample `i`; sample 0 uses the capture seed itself.
pub fn sample_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        derive_seed(seed, &alloc::format!("reference.sample{i}"))
    }
}

/// Runs the model at its training resolution with `α = 1` everywhere and
/// records the normalized entropy of every head at every step. With several
/// samples the per-key entropies are averaged.
pub fn capture_reference(
    model: &ToyModel,
    seed: u64,
    samples: usize,
    executor: &dyn HeadExecutor,
) -> Result<ReferenceEntropyStore> {
    let cfg = model.config();
    let samples = samples.max(1);
    let mut sums: BTreeMap<EntropyKey, f64> = BTreeMap::new();
    for i in 0..samples {
        let plan = GenerationPlan::native(cfg, sample_seed(seed, i));
        let run = model.generate(&plan, executor)?;
        for step in &run.trace.steps {
            for rec in &step.heads {
                *sums.entry((rec.layer, rec.head, step.step)).or_insert(0.0) += rec.entropy;
            }
        }
    }
    let mut store = ReferenceEntropyStore::new(ReferenceMetadata {
        config_hash: cfg.config_hash(),
        train_side: cfg.train_side,
        seed,
        samples,
    });
    for (key, total) in sums {
        let mean = if samples == 1 { total } else { total / samples as f64 };
        store.insert(key, mean);
    }
    Ok(store)
}
