//! The four dataset splits of an experiment.

use std::path::Path;

use crate::scenegen::{
    gen_split, load_manifest, strip_labels, write_dataset, Domain, DomainConfig, LabeledSample, UnlabeledSample,
};

use super::config::DataConfig;
use super::PipelineError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    SyntheticPool,
    RealTrain,
    RealUnlabeled,
    RealTest,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::SyntheticPool, Split::RealTrain, Split::RealUnlabeled, Split::RealTest];

    pub fn name(self) -> &'static str {
        match self {
            Split::SyntheticPool => "synthetic",
            Split::RealTrain => "real_train",
            Split::RealUnlabeled => "real_unlabeled",
            Split::RealTest => "real_test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|sp| sp.name() == s)
    }

    pub fn domain(self) -> Domain {
        match self {
            Split::SyntheticPool => Domain::Synthetic,
            _ => Domain::Real,
        }
    }

    /// Sample ids of different splits never collide for one data seed.
    pub fn base_seed(self, data_seed: u64) -> u64 {
        let offset = match self {
            Split::SyntheticPool => 0,
            Split::RealTrain => 1,
            Split::RealUnlabeled => 2,
            Split::RealTest => 3,
        };
        (data_seed << 32) | (offset << 24)
    }

    fn count(self, cfg: &DataConfig) -> usize {
        let s = &cfg.splits;
        match self {
            Split::SyntheticPool => s.synthetic_pool,
            Split::RealTrain => s.real_train,
            Split::RealUnlabeled => s.real_unlabeled,
            Split::RealTest => s.real_test,
        }
    }

    fn domain_config(self, cfg: &DataConfig) -> &DomainConfig {
        match self.domain() {
            Domain::Synthetic => &cfg.synthetic,
            Domain::Real => &cfg.real,
        }
    }
}

/// In-memory splits. The unlabeled pool holds only stripped samples.
#[derive(Clone, Debug)]
pub struct Datasets {
    pub synthetic: Vec<LabeledSample>,
    pub real_train: Vec<LabeledSample>,
    pub real_unlabeled: Vec<UnlabeledSample>,
    pub real_test: Vec<LabeledSample>,
}

impl Datasets {
    pub fn generate(cfg: &DataConfig) -> Self {
        let gen = |sp: Split| gen_split(sp.base_seed(cfg.data_seed), sp.count(cfg), sp.domain(), sp.domain_config(cfg));
        Self {
            synthetic: gen(Split::SyntheticPool),
            real_train: gen(Split::RealTrain),
            real_unlabeled: gen(Split::RealUnlabeled).into_iter().map(strip_labels).collect(),
            real_test: gen(Split::RealTest),
        }
    }

    pub fn labeled(&self, split: Split) -> Option<&[LabeledSample]> {
        match split {
            Split::SyntheticPool => Some(&self.synthetic),
            Split::RealTrain => Some(&self.real_train),
            Split::RealTest => Some(&self.real_test),
            Split::RealUnlabeled => None,
        }
    }

    /// Loads every split from `dir`, warning when a manifest was written
    /// under a different config. Returns the warnings alongside the data.
    pub fn load(dir: &Path, cfg: &DataConfig) -> Result<(Self, Vec<String>), PipelineError> {
        let mut warnings = Vec::new();
        let mut load = |sp: Split| -> Result<Vec<LabeledSample>, PipelineError> {
            let mut m = load_manifest(&dir.join(sp.name()))?;
            m.check_against(sp.domain_config(cfg));
            if m.len() != sp.count(cfg) || m.base_seed != sp.base_seed(cfg.data_seed) {
                m.check_warnings.push(format!(
                    "{}: manifest lists {} samples from base seed {}, config expects {} from {}",
                    sp.name(),
                    m.len(),
                    m.base_seed,
                    sp.count(cfg),
                    sp.base_seed(cfg.data_seed)
                ));
            }
            warnings.extend(m.check_warnings.iter().cloned());
            Ok(m.load_all()?)
        };
        let data = Self {
            synthetic: load(Split::SyntheticPool)?,
            real_train: load(Split::RealTrain)?,
            real_unlabeled: load(Split::RealUnlabeled)?.into_iter().map(strip_labels).collect(),
            real_test: load(Split::RealTest)?,
        };
        Ok((data, warnings))
    }

    /// Uses the on-disk copy under `dir` when present, otherwise generates.
    pub fn resolve(dir: &Path, cfg: &DataConfig) -> Result<(Self, Vec<String>), PipelineError> {
        if dir.join(Split::SyntheticPool.name()).join(crate::scenegen::MANIFEST_FILE).exists() {
            log::info!("loading datasets from {}", dir.display());
            Self::load(dir, cfg)
        } else {
            log::info!("no datasets under {}; generating in memory", dir.display());
            Ok((Self::generate(cfg), Vec::new()))
        }
    }
}

pub fn write_all(dir: &Path, cfg: &DataConfig) -> Result<(), PipelineError> {
    for sp in Split::ALL {
        write_dataset(
            &dir.join(sp.name()),
            sp.count(cfg),
            sp.domain(),
            sp.domain_config(cfg),
            sp.base_seed(cfg.data_seed),
        )?;
    }
    Ok(())
}
