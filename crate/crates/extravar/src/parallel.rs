use extravar_core::model::{HeadExecutor, HeadOutput};
use extravar_core::Result;
use rayon::prelude::*;

/// Runs heads on the rayon pool. Each head's arithmetic is sequential and
/// results are collected in head order, so output bits match [`Sequential`].
///
/// [`Sequential`]: extravar_core::model::Sequential
#[derive(Debug, Clone, Copy, Default)]
pub struct Rayon;

impl HeadExecutor for Rayon {
    fn run(&self, heads: usize, f: &(dyn Fn(usize) -> Result<HeadOutput> + Sync)) -> Vec<Result<HeadOutput>> {
        (0..heads).into_par_iter().map(f).collect()
    }
}
