//! Gallery / probe splits.

use serde::{Deserialize, Serialize};

use crate::index::DatasetIndex;
use crate::sequence::{Condition, SequenceKey};
use crate::DataError;

/// Selects sequences by condition, view and sequence index. Empty `views`
/// or `seq_indices` match everything; `conditions` must be non-empty.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeqFilter {
    pub conditions: Vec<Condition>,
    #[serde(default)]
    pub views: Vec<i32>,
    #[serde(default)]
    pub seq_indices: Vec<u32>,
}

impl SeqFilter {
    pub fn matches(&self, k: &SequenceKey) -> bool {
        self.conditions.contains(&k.condition)
            && (self.views.is_empty() || self.views.contains(&k.view_deg))
            && (self.seq_indices.is_empty() || self.seq_indices.contains(&k.seq_index))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Protocol {
    /// NM 1-4 in the gallery; NM 5-6, BG 1-2 and CL 1-2 as probes.
    CasiaB,
    Synthetic {
        gallery: SeqFilter,
        probe: SeqFilter,
    },
}

const CASIA_REQUIRED: [(Condition, u32); 10] = [
    (Condition::Nm, 1),
    (Condition::Nm, 2),
    (Condition::Nm, 3),
    (Condition::Nm, 4),
    (Condition::Nm, 5),
    (Condition::Nm, 6),
    (Condition::Bg, 1),
    (Condition::Bg, 2),
    (Condition::Cl, 1),
    (Condition::Cl, 2),
];

/// Split `index` into (gallery, probe).
pub fn make_eval_split(
    index: &DatasetIndex,
    protocol: &Protocol,
) -> Result<(DatasetIndex, DatasetIndex), DataError> {
    let (gallery, probe) = match protocol {
        Protocol::CasiaB => {
            let mut missing = Vec::new();
            for s in index.subjects() {
                let absent: Vec<String> = CASIA_REQUIRED
                    .iter()
                    .filter(|(c, i)| {
                        !index.entries().iter().any(|e| {
                            e.key.subject_id == s && e.key.condition == *c && e.key.seq_index == *i
                        })
                    })
                    .map(|(c, i)| format!("{c}-{i:02}"))
                    .collect();
                if !absent.is_empty() {
                    missing.push(format!("{s}: {}", absent.join(",")));
                }
            }
            if !missing.is_empty() {
                return Err(DataError::Invalid(format!(
                    "missing sequences: {}",
                    missing.join("; ")
                )));
            }
            let g =
                index.filter(|k| k.condition == Condition::Nm && (1..=4).contains(&k.seq_index));
            let p = index.filter(|k| {
                (k.condition == Condition::Nm && (5..=6).contains(&k.seq_index))
                    || (matches!(k.condition, Condition::Bg | Condition::Cl)
                        && (1..=2).contains(&k.seq_index))
            });
            (g, p)
        }
        Protocol::Synthetic { gallery, probe } => {
            for (name, f) in [("gallery", gallery), ("probe", probe)] {
                if f.conditions.is_empty() {
                    return Err(DataError::Invalid(format!(
                        "{name} condition filter is empty"
                    )));
                }
            }
            (
                index.filter(|k| gallery.matches(k)),
                index.filter(|k| probe.matches(k)),
            )
        }
    };
    let gk = gallery.keys();
    if let Some(k) = probe.keys().into_iter().find(|k| gk.contains(k)) {
        return Err(DataError::Invalid(format!(
            "sequence {k} is in both gallery and probe"
        )));
    }
    if gallery.is_empty() || probe.is_empty() {
        return Err(DataError::Invalid(format!(
            "split is empty (gallery {}, probe {})",
            gallery.len(),
            probe.len()
        )));
    }
    Ok((gallery, probe))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::index::IndexEntry;
    use std::path::PathBuf;

    fn idx(keys: &[(Condition, u32, i32)]) -> DatasetIndex {
        DatasetIndex::new(
            keys.iter()
                .map(|&(c, i, v)| IndexEntry {
                    key: SequenceKey {
                        subject_id: "001".into(),
                        condition: c,
                        view_deg: v,
                        seq_index: i,
                    },
                    path: PathBuf::new(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn casia_full_subject() {
        let keys: Vec<_> = CASIA_REQUIRED.iter().map(|&(c, i)| (c, i, 90)).collect();
        let (g, p) = make_eval_split(&idx(&keys), &Protocol::CasiaB).unwrap();
        assert_eq!((g.len(), p.len()), (4, 6));
    }

    #[test]
    fn casia_missing_listed() {
        let keys: Vec<_> = CASIA_REQUIRED[..9]
            .iter()
            .map(|&(c, i)| (c, i, 90))
            .collect();
        let err = make_eval_split(&idx(&keys), &Protocol::CasiaB)
            .unwrap_err()
            .to_string();
        assert!(err.contains("001: CL-02"), "{err}");
    }

    #[test]
    fn synthetic_by_view() {
        let index = idx(&[(Condition::Synth, 1, 0), (Condition::Synth, 1, 90)]);
        let f = |v| SeqFilter {
            conditions: vec![Condition::Synth],
            views: vec![v],
            seq_indices: vec![],
        };
        let (g, p) = make_eval_split(
            &index,
            &Protocol::Synthetic {
                gallery: f(0),
                probe: f(90),
            },
        )
        .unwrap();
        assert!(g.entries().iter().all(|e| e.key.view_deg == 0));
        assert!(p.entries().iter().all(|e| e.key.view_deg == 90));
        let empty = SeqFilter {
            conditions: vec![],
            ..f(90)
        };
        assert!(make_eval_split(
            &index,
            &Protocol::Synthetic {
                gallery: f(0),
                probe: empty
            }
        )
        .is_err());
        // overlapping filters
        assert!(make_eval_split(
            &index,
            &Protocol::Synthetic {
                gallery: f(0),
                probe: f(0)
            }
        )
        .is_err());
    }
}
