//! Synthetic multi-domain student simulator with BKT-style latent mastery.
//!
//! Every concept starts unlearned and becomes learned with its learn rate
//! each time the student practises it (after answering). A question is
//! answered correctly with probability `1 - slip` when all its concepts are
//! learned, otherwise with probability `guess`. A domain-level
//! `difficulty_shift` moves both probabilities on the logit scale.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    split_by_student, window_and_filter, DomainSpec, Interaction, QMatrix,
};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::rng::{seeded, stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDomainConfig {
    pub n_students: usize,
    pub n_questions: usize,
    pub n_concepts: usize,
    /// Inclusive range of concepts drawn per question.
    pub concepts_per_question: (usize, usize),
    pub learn_rate: f64,
    /// Per-concept learn rates are drawn uniformly from
    /// `learn_rate * [1 - spread, 1 + spread]`, capped at 1.
    #[serde(default)]
    pub learn_rate_spread: f64,
    pub guess: f64,
    pub slip: f64,
    #[serde(default)]
    pub difficulty_shift: f64,
    /// Inclusive range of the number of interactions per student.
    pub interactions_per_student: (usize, usize),
    /// Probability that the next question shares a concept with the previous
    /// one (practice runs); otherwise questions are drawn uniformly.
    #[serde(default)]
    pub repeat_prob: f64,
    pub seed: u64,
}

impl SyntheticDomainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_questions == 0 || self.n_concepts == 0 || self.n_students == 0 {
            return bad("n_students, n_questions and n_concepts must be positive".into());
        }
        for (name, p) in [
            ("learn_rate", self.learn_rate),
            ("guess", self.guess),
            ("slip", self.slip),
            ("repeat_prob", self.repeat_prob),
            ("learn_rate_spread", self.learn_rate_spread),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0,1]"));
            }
        }
        if self.slip >= 1.0 - self.guess && !(self.guess == 0.5 && self.slip == 0.5) {
            return bad(format!(
                "slip {} must be below 1 - guess {} for mastery to be informative",
                self.slip,
                1.0 - self.guess
            ));
        }
        let (lo, hi) = self.concepts_per_question;
        if lo == 0 || lo > hi || hi > self.n_concepts {
            return bad(format!("concepts_per_question {lo}..={hi} invalid"));
        }
        let (lo, hi) = self.interactions_per_student;
        if lo == 0 || lo > hi {
            return bad(format!("interactions_per_student {lo}..={hi} invalid"));
        }
        if !self.difficulty_shift.is_finite() {
            return bad("difficulty_shift must be finite".into());
        }
        Ok(())
    }
}

/// Simulator's own correctness probability at one step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub student: String,
    pub position: u32,
    pub prob: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticDomain {
    pub spec: DomainSpec,
    pub interactions: Vec<Interaction>,
    pub truth: Vec<GroundTruth>,
}

impl SyntheticDomain {
    /// Windows, filters and splits the log into a dataset.
    pub fn to_dataset(
        &self,
        window_length: usize,
        min_total: usize,
        ratio: f64,
        split_seed: u64,
    ) -> Result<Dataset> {
        let seqs = window_and_filter(
            &self.interactions,
            self.spec.domain_id,
            window_length,
            min_total,
        )?;
        let split = split_by_student(&seqs, ratio, split_seed)?;
        Ok(Dataset {
            spec: self.spec.clone(),
            split,
        })
    }
}

fn shifted(p: f64, shift: f64) -> f64 {
    if shift == 0.0 || p <= 0.0 || p >= 1.0 {
        return p;
    }
    let logit = (p / (1.0 - p)).ln() - shift;
    1.0 / (1.0 + (-logit).exp())
}

pub fn generate_domain(config: &SyntheticDomainConfig, domain_id: u32) -> Result<SyntheticDomain> {
    config.validate()?;
    let mut rng = seeded(config.seed, stream::SYNTH);

    let (cmin, cmax) = config.concepts_per_question;
    let mut columns = Vec::with_capacity(config.n_questions);
    for _ in 0..config.n_questions {
        let k = rng.gen_range(cmin..=cmax);
        let picked = rand::seq::index::sample(&mut rng, config.n_concepts, k);
        columns.push(picked.into_iter().map(|c| c as u32).collect::<Vec<_>>());
    }
    let q_matrix = QMatrix::new(config.n_concepts, columns)?;
    let mut by_concept: Vec<Vec<u32>> = vec![Vec::new(); config.n_concepts];
    for q in 0..config.n_questions {
        for &c in q_matrix.concepts(q) {
            by_concept[c as usize].push(q as u32);
        }
    }

    let spread = config.learn_rate_spread;
    let learn: Vec<f64> = (0..config.n_concepts)
        .map(|_| {
            if spread == 0.0 {
                config.learn_rate
            } else {
                let f = rng.gen_range(1.0 - spread..=1.0 + spread);
                (config.learn_rate * f).clamp(0.0, 1.0)
            }
        })
        .collect();
    let p_known = shifted(1.0 - config.slip, config.difficulty_shift);
    let p_guess = shifted(config.guess, config.difficulty_shift);

    let mut interactions = Vec::new();
    let mut truth = Vec::new();
    let (lmin, lmax) = config.interactions_per_student;
    for s in 0..config.n_students {
        let student = format!("d{domain_id}_s{s}");
        let mut mastered = vec![false; config.n_concepts];
        let len = rng.gen_range(lmin..=lmax);
        let mut prev: Option<u32> = None;
        for t in 0..len {
            let q = match prev {
                Some(p) if rng.gen_bool(config.repeat_prob) => {
                    let cs = q_matrix.concepts(p as usize);
                    let c = cs[rng.gen_range(0..cs.len())];
                    let pool = &by_concept[c as usize];
                    pool[rng.gen_range(0..pool.len())]
                }
                _ => rng.gen_range(0..config.n_questions) as u32,
            };
            let concepts = q_matrix.concepts(q as usize);
            let known = concepts.iter().all(|&c| mastered[c as usize]);
            let prob = if known { p_known } else { p_guess };
            let correct = u8::from(rng.gen_bool(prob));
            for &c in concepts {
                if !mastered[c as usize] && rng.gen_bool(learn[c as usize]) {
                    mastered[c as usize] = true;
                }
            }
            interactions.push(Interaction {
                student_id: student.clone(),
                question_id: q,
                concept_ids: concepts.to_vec(),
                correct,
                position: t as u32,
            });
            truth.push(GroundTruth {
                student: student.clone(),
                position: t as u32,
                prob,
            });
            prev = Some(q);
        }
    }
    Ok(SyntheticDomain {
        spec: DomainSpec::new(domain_id, q_matrix),
        interactions,
        truth,
    })
}

pub struct MultiSource {
    pub sources: Vec<SyntheticDomain>,
    pub target: SyntheticDomain,
}

/// Sources get domain ids `0..N`, the target gets `N`. Every domain owns its
/// own question and concept vocabulary.
pub fn generate_multisource(
    configs: &[SyntheticDomainConfig],
    target_config: &SyntheticDomainConfig,
) -> Result<MultiSource> {
    if configs.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 source domains, got {}",
            configs.len()
        )));
    }
    let sources = configs
        .iter()
        .enumerate()
        .map(|(i, c)| generate_domain(c, i as u32))
        .collect::<Result<Vec<_>>>()?;
    let target = generate_domain(target_config, configs.len() as u32)?;
    Ok(MultiSource { sources, target })
}
