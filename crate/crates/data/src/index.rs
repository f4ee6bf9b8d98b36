//! Dataset index and the tab-separated manifest format.
//!
//! Manifest lines are `path<TAB>subject<TAB>condition<TAB>view<TAB>seq_index`.
//! Paths are relative to the manifest's directory. Blank lines and lines
//! starting with `#` are ignored.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::normalize::normalize_sequence;
use crate::sequence::{
    casia_path, load_sequence, parse_casia_path, Condition, SequenceKey, SilhouetteSequence,
};
use crate::DataError;

pub const MANIFEST_NAME: &str = "manifest.tsv";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexEntry {
    pub key: SequenceKey,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    entries: Vec<IndexEntry>,
}

impl DatasetIndex {
    /// Entries are sorted by key; duplicate keys are an error.
    pub fn new(mut entries: Vec<IndexEntry>) -> Result<Self, DataError> {
        entries.sort_by(|a, b| a.key.cmp(&b.key));
        if let Some(w) = entries.windows(2).find(|w| w[0].key == w[1].key) {
            return Err(DataError::Invalid(format!(
                "duplicate sequence {}",
                w[0].key
            )));
        }
        Ok(DatasetIndex { entries })
    }

    pub fn entries(&self) -> &[IndexEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sorted distinct subject ids.
    pub fn subjects(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self
            .entries
            .iter()
            .map(|e| e.key.subject_id.as_str())
            .collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn filter(&self, mut keep: impl FnMut(&SequenceKey) -> bool) -> DatasetIndex {
        DatasetIndex {
            entries: self
                .entries
                .iter()
                .filter(|e| keep(&e.key))
                .cloned()
                .collect(),
        }
    }

    pub fn keys(&self) -> HashSet<&SequenceKey> {
        self.entries.iter().map(|e| &e.key).collect()
    }

    pub fn read_manifest(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| DataError::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |what: &str| DataError::Manifest {
                path: path.to_path_buf(),
                line: no + 1,
                detail: what.to_string(),
            };
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad(&format!(
                    "expected 5 tab-separated fields, found {}",
                    f.len()
                )));
            }
            let condition: Condition = f[2]
                .parse()
                .map_err(|_| bad(&format!("unknown condition `{}`", f[2])))?;
            let view_deg = f[3]
                .parse()
                .map_err(|_| bad(&format!("bad view `{}`", f[3])))?;
            let seq_index = f[4]
                .parse()
                .map_err(|_| bad(&format!("bad sequence index `{}`", f[4])))?;
            entries.push(IndexEntry {
                key: SequenceKey {
                    subject_id: f[1].to_string(),
                    condition,
                    view_deg,
                    seq_index,
                },
                path: root.join(f[0]),
            });
        }
        Self::new(entries)
    }

    /// Write a manifest whose paths are relative to `root` when possible.
    pub fn write_manifest(&self, path: &Path) -> Result<(), DataError> {
        let root = path.parent().unwrap_or(Path::new("."));
        let mut out = String::from("# path\tsubject\tcondition\tview\tseq_index\n");
        for e in &self.entries {
            let rel = e.path.strip_prefix(root).unwrap_or(&e.path);
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                rel.display(),
                e.key.subject_id,
                e.key.condition,
                e.key.view_deg,
                e.key.seq_index
            )
            .expect("write to string");
        }
        fs::write(path, out).map_err(|e| DataError::io(path, e))
    }

    /// Index a CASIA-B style tree `root/<subject>/<cond>-<nn>/<view>/`.
    pub fn scan_casia(root: &Path) -> Result<Self, DataError> {
        let mut entries = Vec::new();
        for subject in sorted_dirs(root)? {
            for cond in sorted_dirs(&subject)? {
                for view in sorted_dirs(&cond)? {
                    let rel = view.strip_prefix(root).unwrap_or(&view);
                    let key = parse_casia_path(rel)?;
                    debug_assert_eq!(casia_path(&key).components().count(), 3);
                    entries.push(IndexEntry { key, path: view });
                }
            }
        }
        Self::new(entries)
    }

    /// Load every sequence, optionally normalizing frames to 64 x 44.
    pub fn load_all(&self, normalize: bool) -> Result<Vec<SilhouetteSequence>, DataError> {
        self.entries
            .iter()
            .map(|e| {
                let seq = load_sequence(&e.path, e.key.clone())?;
                if normalize {
                    let (seq, dropped) = normalize_sequence(&seq)?;
                    if dropped > 0 {
                        log::warn!("{}: dropped {dropped} empty frames", e.key);
                    }
                    Ok(seq)
                } else {
                    Ok(seq)
                }
            })
            .collect()
    }
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| DataError::io(dir, e))? {
        let p = entry.map_err(|e| DataError::io(dir, e))?.path();
        if p.is_dir() {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(s: &str, c: Condition, v: i32, i: u32) -> IndexEntry {
        let key = SequenceKey {
            subject_id: s.into(),
            condition: c,
            view_deg: v,
            seq_index: i,
        };
        IndexEntry {
            path: PathBuf::from("/data").join(casia_path(&key)),
            key,
        }
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let entries = vec![
            IndexEntry {
                path: dir.path().join("002/synth-01/030"),
                ..entry("002", Condition::Synth, 30, 1)
            },
            IndexEntry {
                path: dir.path().join("001/nm-01/000"),
                ..entry("001", Condition::Nm, 0, 1)
            },
        ];
        let idx = DatasetIndex::new(entries).unwrap();
        let m = dir.path().join(MANIFEST_NAME);
        idx.write_manifest(&m).unwrap();
        let text = fs::read_to_string(&m).unwrap();
        assert!(text.contains("001/nm-01/000\t001\tNM\t0\t1"), "{text}");
        assert_eq!(DatasetIndex::read_manifest(&m).unwrap(), idx);
        assert_eq!(idx.subjects(), vec!["001", "002"]);
    }

    #[test]
    fn duplicates_and_bad_lines_rejected() {
        let e = entry("001", Condition::Nm, 0, 1);
        assert!(DatasetIndex::new(vec![e.clone(), e]).is_err());
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "a\t001\tXX\t0\t1\n").unwrap();
        let err = DatasetIndex::read_manifest(&m).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("XX"), "{err}");
    }
}
