use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    ingest_csv, split_by_student, window_and_filter, DatasetSplit, DomainSpec,
};
use crate::error::{Error, Result};

pub const DOMAIN_FORMAT_VERSION: u32 = 1;

/// A domain's vocabulary plus its student-disjoint train/test windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub split: DatasetSplit,
}

#[derive(Serialize, Deserialize)]
struct DomainFile {
    format: String,
    format_version: u32,
    domain: DomainSpec,
}

impl Dataset {
    /// CSV → windows → split in one call.
    pub fn from_csv(
        path: &Path,
        domain_id: u32,
        window_length: usize,
        min_total: usize,
        ratio: f64,
        split_seed: u64,
    ) -> Result<Self> {
        let (spec, interactions) = ingest_csv(path, domain_id)?;
        let seqs = window_and_filter(&interactions, domain_id, window_length, min_total)?;
        let split = split_by_student(&seqs, ratio, split_seed)?;
        Ok(Self { spec, split })
    }

    /// Directory layout: `domain.json`, `train.json`, `test.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let file = DomainFile {
            format: "dgkt.domain".into(),
            format_version: DOMAIN_FORMAT_VERSION,
            domain: self.spec.clone(),
        };
        fs::write(dir.join("domain.json"), serde_json::to_vec(&file)?)?;
        self.split.save(dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let file: DomainFile = serde_json::from_slice(&fs::read(dir.join("domain.json"))?)?;
        if file.format_version != DOMAIN_FORMAT_VERSION {
            return Err(Error::FormatVersion {
                what: "domain.json".into(),
                found: file.format_version,
                expected: DOMAIN_FORMAT_VERSION,
            });
        }
        file.domain.validate()?;
        let split = DatasetSplit::load(dir)?;
        Ok(Self {
            spec: file.domain,
            split,
        })
    }
}
