//! Bundled desk-scale synthetic setup: four source domains and one target
//! domain with their own vocabularies and difficulty.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::Result;
use crate::synth::{generate_multisource, SyntheticDomainConfig};

pub const WINDOW_LENGTH: usize = 200;
pub const MIN_TOTAL: usize = 20;
pub const SPLIT_RATIO: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSetup {
    pub sources: Vec<SyntheticDomainConfig>,
    pub target: SyntheticDomainConfig,
}

fn domain(
    n_students: usize,
    n_questions: usize,
    n_concepts: usize,
    guess: f64,
    slip: f64,
    difficulty_shift: f64,
    seed: u64,
) -> SyntheticDomainConfig {
    SyntheticDomainConfig {
        n_students,
        n_questions,
        n_concepts,
        concepts_per_question: (1, 2),
        learn_rate: 0.25,
        learn_rate_spread: 0.6,
        guess,
        slip,
        difficulty_shift,
        interactions_per_student: (30, 60),
        repeat_prob: 0.6,
        seed,
    }
}

impl SyntheticSetup {
    pub fn desk(seed: u64) -> Self {
        let s = seed.wrapping_mul(1000);
        Self {
            sources: vec![
                domain(300, 60, 10, 0.20, 0.10, -0.8, s + 1),
                domain(300, 80, 12, 0.25, 0.15, -0.2, s + 2),
                domain(300, 100, 14, 0.30, 0.10, 0.4, s + 3),
                domain(300, 70, 16, 0.15, 0.20, 1.0, s + 4),
            ],
            target: domain(400, 90, 12, 0.25, 0.10, 0.2, s + 5),
        }
    }

    /// Generates, windows and splits every domain.
    pub fn datasets(&self, split_seed: u64) -> Result<(Vec<Dataset>, Dataset)> {
        let ms = generate_multisource(&self.sources, &self.target)?;
        let sources = ms
            .sources
            .iter()
            .map(|d| d.to_dataset(WINDOW_LENGTH, MIN_TOTAL, SPLIT_RATIO, split_seed))
            .collect::<Result<Vec<_>>>()?;
        let target = ms.target.to_dataset(WINDOW_LENGTH, MIN_TOTAL, SPLIT_RATIO, split_seed)?;
        Ok((sources, target))
    }
}
