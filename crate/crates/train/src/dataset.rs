//! Resolves a run's data section into train, gallery and probe sequences.

use std::collections::BTreeMap;
use std::path::PathBuf;

use lstcn_data::{
    generate_sequences, make_eval_split, DatasetIndex, IndexEntry, SequenceKey, SilhouetteSequence,
};

use crate::config::{parse_subjects, DataSource, TrainConfig};
use crate::TrainError;

#[derive(Debug, Clone)]
pub struct RunData {
    pub train: Vec<SilhouetteSequence>,
    pub gallery: Vec<SilhouetteSequence>,
    pub probe: Vec<SilhouetteSequence>,
}

enum Store {
    Memory(BTreeMap<SequenceKey, SilhouetteSequence>),
    Disk { normalize: bool },
}

impl Store {
    fn load(&self, index: &DatasetIndex) -> Result<Vec<SilhouetteSequence>, TrainError> {
        match self {
            Store::Memory(map) => Ok(index
                .entries()
                .iter()
                .map(|e| map[&e.key].clone())
                .collect()),
            Store::Disk { normalize } => Ok(index.load_all(*normalize)?),
        }
    }
}

fn restrict(index: &DatasetIndex, subjects: &[String]) -> DatasetIndex {
    if subjects.is_empty() {
        return index.clone();
    }
    index.filter(|k| subjects.binary_search(&k.subject_id).is_ok())
}

/// Loads only the sequences the run needs.
pub fn load_run_data(cfg: &TrainConfig) -> Result<RunData, TrainError> {
    let (index, store) = match &cfg.data.source {
        DataSource::Manifest { path, normalize } => (
            DatasetIndex::read_manifest(path)?,
            Store::Disk {
                normalize: *normalize,
            },
        ),
        DataSource::Synthetic { protocol } => {
            let seqs = generate_sequences(protocol)?;
            let index = DatasetIndex::new(
                seqs.iter()
                    .map(|s| IndexEntry {
                        key: s.key.clone(),
                        path: PathBuf::new(),
                    })
                    .collect(),
            )?;
            (
                index,
                Store::Memory(seqs.into_iter().map(|s| (s.key.clone(), s)).collect()),
            )
        }
    };
    let train_subjects = parse_subjects(&cfg.data.train_subjects)?;
    let eval_subjects = parse_subjects(&cfg.data.eval_subjects)?;
    let train_index =
        restrict(&index, &train_subjects).filter(|k| cfg.data.train_filter.matches(k));
    if train_index.is_empty() {
        return Err(TrainError::Data(lstcn_data::DataError::Invalid(
            "no sequence matches the training filter".into(),
        )));
    }
    let (gallery, probe) = make_eval_split(&restrict(&index, &eval_subjects), &cfg.eval.protocol)?;
    Ok(RunData {
        train: store.load(&train_index)?,
        gallery: store.load(&gallery)?,
        probe: store.load(&probe)?,
    })
}
