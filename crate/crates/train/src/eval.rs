//! Embedding extraction and cross-view rank-1 accuracy.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use lstcn_core::{LstcnModel, Mode, Scalar};
use lstcn_data::sampling::MIN_EVAL_FRAMES;
use lstcn_data::{Condition, SequenceKey, SilhouetteSequence};

use crate::TrainError;

/// Per-part L2-normalized embeddings, one row per sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub n_parts: usize,
    pub dim: usize,
    pub keys: Vec<SequenceKey>,
    /// `keys.len() * n_parts * dim`, row-major.
    pub data: Vec<f64>,
    /// Sequences left out for having fewer than three frames.
    pub skipped: Vec<(SequenceKey, usize)>,
}

impl EmbeddingTable {
    pub fn new(n_parts: usize, dim: usize) -> Self {
        EmbeddingTable {
            n_parts,
            dim,
            keys: Vec::new(),
            data: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.n_parts * self.dim;
        &self.data[i * w..(i + 1) * w]
    }

    /// Appends a row, normalizing each part to unit length. Zero parts stay zero.
    pub fn push(&mut self, key: SequenceKey, features: &[f64]) {
        assert_eq!(features.len(), self.n_parts * self.dim, "row width");
        self.keys.push(key);
        for part in features.chunks(self.dim) {
            let norm = part.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                self.data.extend(part.iter().map(|v| v / norm));
            } else {
                self.data.extend_from_slice(part);
            }
        }
    }
}

/// One eval-mode forward per full sequence.
pub fn extract_embeddings<S: Scalar>(
    model: &LstcnModel<S>,
    seqs: &[SilhouetteSequence],
) -> Result<EmbeddingTable, TrainError> {
    let cfg = model.config();
    let mut table = EmbeddingTable::new(model.n_parts(), cfg.embed_dim);
    for s in seqs {
        if s.len() < MIN_EVAL_FRAMES {
            log::warn!(
                "skipping {}: {} frames, at least {MIN_EVAL_FRAMES} required",
                s.key,
                s.len()
            );
            table.skipped.push((s.key.clone(), s.len()));
            continue;
        }
        let out = model.forward(&s.full_tensor::<S>(), Mode::Eval)?;
        let row: Vec<f64> = out.features.data().iter().map(|v| v.as_f64()).collect();
        table.push(s.key.clone(), &row);
    }
    Ok(table)
}

/// Sum over parts of the Euclidean distance between part vectors.
pub fn sequence_distance(a: &[f64], b: &[f64], dim: usize) -> f64 {
    a.chunks(dim)
        .zip(b.chunks(dim))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(p, q)| (p - q) * (p - q))
                .sum::<f64>()
                .sqrt()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct CellKey {
    pub condition: Condition,
    pub probe_view: i32,
    pub gallery_view: i32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCounts {
    pub correct: usize,
    pub wrong: usize,
    /// Probes whose subject has no gallery entry at this view.
    pub unmatched: usize,
}

impl CellCounts {
    pub fn total(&self) -> usize {
        self.correct + self.wrong + self.unmatched
    }

    pub fn accuracy(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.correct as f64 / self.total() as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub cells: BTreeMap<CellKey, CellCounts>,
    pub include_same_view: bool,
    pub n_probes: usize,
    /// `(probe subject, predicted subject) -> count` over every cell.
    pub confusion: BTreeMap<(String, String), usize>,
}

impl EvalResult {
    fn counted(&self, k: &CellKey) -> bool {
        self.include_same_view || k.probe_view != k.gallery_view
    }

    /// Mean cell accuracy for one condition over the counted view pairs.
    pub fn condition_accuracy(&self, c: Condition) -> Option<f64> {
        let accs: Vec<f64> = self
            .cells
            .iter()
            .filter(|(k, _)| k.condition == c && self.counted(k))
            .map(|(_, v)| v.accuracy())
            .collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }

    pub fn conditions(&self) -> Vec<Condition> {
        let mut c: Vec<Condition> = self.cells.keys().map(|k| k.condition).collect();
        c.dedup();
        c
    }

    /// Mean of the per-condition accuracies.
    pub fn aggregate(&self) -> f64 {
        let accs: Vec<f64> = self
            .conditions()
            .into_iter()
            .filter_map(|c| self.condition_accuracy(c))
            .collect();
        if accs.is_empty() {
            0.0
        } else {
            accs.iter().sum::<f64>() / accs.len() as f64
        }
    }

    /// Fixed-width table: one block per condition, probe views as rows and
    /// gallery views as columns, accuracies in percent.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for c in self.conditions() {
            let cells: Vec<(&CellKey, &CellCounts)> = self
                .cells
                .iter()
                .filter(|(k, _)| k.condition == c)
                .collect();
            let mut gv: Vec<i32> = cells.iter().map(|(k, _)| k.gallery_view).collect();
            gv.sort();
            gv.dedup();
            let mut pv: Vec<i32> = cells.iter().map(|(k, _)| k.probe_view).collect();
            pv.sort();
            pv.dedup();
            let _ = write!(out, "{c} probe\\gallery");
            for g in &gv {
                let _ = write!(out, "\t{g:>6}");
            }
            let _ = writeln!(out, "\t  mean");
            for p in &pv {
                let _ = write!(out, "{p:>16}");
                let mut row = Vec::new();
                for g in &gv {
                    let k = CellKey {
                        condition: c,
                        probe_view: *p,
                        gallery_view: *g,
                    };
                    match self.cells.get(&k) {
                        Some(v) => {
                            let _ = write!(out, "\t{:>6.1}", 100.0 * v.accuracy());
                            if self.counted(&k) {
                                row.push(v.accuracy());
                            }
                        }
                        None => {
                            let _ = write!(out, "\t{:>6}", "-");
                        }
                    }
                }
                let mean = if row.is_empty() {
                    f64::NAN
                } else {
                    row.iter().sum::<f64>() / row.len() as f64
                };
                let _ = writeln!(out, "\t{:>6.1}", 100.0 * mean);
            }
            let _ = writeln!(
                out,
                "{c} mean\t{:.2}",
                100.0 * self.condition_accuracy(c).unwrap_or(0.0)
            );
            let _ = writeln!(out);
        }
        let _ = writeln!(
            out,
            "aggregate rank-1\t{:.2}\t(same-view pairs {})",
            100.0 * self.aggregate(),
            if self.include_same_view {
                "included"
            } else {
                "excluded"
            }
        );
        out
    }

    /// `key=value` lines, stable order.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "aggregate.rank1={:.6}", self.aggregate());
        let _ = writeln!(out, "include_same_view={}", self.include_same_view);
        let _ = writeln!(out, "n_probes={}", self.n_probes);
        for c in self.conditions() {
            if let Some(a) = self.condition_accuracy(c) {
                let _ = writeln!(out, "condition.{c}.rank1={a:.6}");
            }
        }
        for (k, v) in &self.cells {
            let base = format!("cell.{}.{}.{}", k.condition, k.probe_view, k.gallery_view);
            let _ = writeln!(out, "{base}.rank1={:.6}", v.accuracy());
            let _ = writeln!(out, "{base}.correct={}", v.correct);
            let _ = writeln!(out, "{base}.wrong={}", v.wrong);
            let _ = writeln!(out, "{base}.unmatched={}", v.unmatched);
        }
        for ((probe, pred), n) in &self.confusion {
            let _ = writeln!(out, "confusion.{probe}.{pred}={n}");
        }
        out
    }
}

pub const REPORT_TABLE: &str = "eval_report.txt";
pub const REPORT_KV: &str = "eval_report.kv";

pub fn write_report(result: &EvalResult, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| TrainError::io(dir, e))?;
    for (name, text) in [
        (REPORT_TABLE, result.to_table()),
        (REPORT_KV, result.to_key_values()),
    ] {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| TrainError::io(&path, e))?;
    }
    Ok(())
}

/// Nearest-gallery matching, tabulated per (condition, probe view, gallery
/// view). A probe is scored against each gallery view separately.
pub fn rank1(
    gallery: &EmbeddingTable,
    probe: &EmbeddingTable,
    include_same_view: bool,
) -> Result<EvalResult, TrainError> {
    if gallery.is_empty() {
        return Err(TrainError::Config("gallery is empty".into()));
    }
    if (gallery.n_parts, gallery.dim) != (probe.n_parts, probe.dim) {
        return Err(TrainError::Config(format!(
            "gallery rows are {}x{} but probe rows are {}x{}",
            gallery.n_parts, gallery.dim, probe.n_parts, probe.dim
        )));
    }
    let mut by_view: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
    for (i, k) in gallery.keys.iter().enumerate() {
        by_view.entry(k.view_deg).or_default().push(i);
    }
    let mut cells: BTreeMap<CellKey, CellCounts> = BTreeMap::new();
    let mut confusion = BTreeMap::new();
    for (pi, pk) in probe.keys.iter().enumerate() {
        let prow = probe.row(pi);
        for (&gview, rows) in &by_view {
            let cell = cells
                .entry(CellKey {
                    condition: pk.condition,
                    probe_view: pk.view_deg,
                    gallery_view: gview,
                })
                .or_default();
            if !rows
                .iter()
                .any(|&g| gallery.keys[g].subject_id == pk.subject_id)
            {
                cell.unmatched += 1;
                continue;
            }
            // ties go to the smallest key so gallery order does not matter
            let best = rows
                .iter()
                .map(|&g| {
                    (
                        sequence_distance(prow, gallery.row(g), gallery.dim),
                        &gallery.keys[g],
                    )
                })
                .min_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)))
                .expect("non-empty view");
            if best.1.subject_id == pk.subject_id {
                cell.correct += 1;
            } else {
                cell.wrong += 1;
            }
            *confusion
                .entry((pk.subject_id.clone(), best.1.subject_id.clone()))
                .or_insert(0) += 1;
        }
    }
    Ok(EvalResult {
        cells,
        include_same_view,
        n_probes: probe.len(),
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(s: usize, view: i32, idx: u32) -> SequenceKey {
        SequenceKey {
            subject_id: format!("{s:03}"),
            condition: Condition::Synth,
            view_deg: view,
            seq_index: idx,
        }
    }

    #[test]
    fn parts_are_unit_norm() {
        let mut t = EmbeddingTable::new(2, 3);
        t.push(key(1, 0, 1), &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(&t.row(0)[..3], &[0.6, 0.8, 0.0]);
        assert_eq!(&t.row(0)[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn unmatched_probe_counts_as_error() {
        let mut g = EmbeddingTable::new(1, 2);
        g.push(key(1, 0, 1), &[1.0, 0.0]);
        let mut p = EmbeddingTable::new(1, 2);
        p.push(key(1, 0, 2), &[1.0, 0.0]);
        p.push(key(2, 0, 2), &[0.0, 1.0]);
        let r = rank1(&g, &p, true).unwrap();
        let c = r.cells.values().next().unwrap();
        assert_eq!((c.correct, c.wrong, c.unmatched), (1, 0, 1));
        assert_eq!(r.aggregate(), 0.5);
    }

    #[test]
    fn same_view_exclusion() {
        let mut g = EmbeddingTable::new(1, 2);
        g.push(key(1, 0, 1), &[1.0, 0.0]);
        g.push(key(2, 0, 1), &[0.0, 1.0]);
        g.push(key(1, 90, 1), &[0.0, 1.0]);
        g.push(key(2, 90, 1), &[1.0, 0.0]);
        let mut p = EmbeddingTable::new(1, 2);
        p.push(key(1, 0, 2), &[1.0, 0.0]);
        p.push(key(2, 0, 2), &[0.0, 1.0]);
        assert_eq!(rank1(&g, &p, true).unwrap().aggregate(), 0.5);
        assert_eq!(rank1(&g, &p, false).unwrap().aggregate(), 0.0);
        let kv = rank1(&g, &p, false).unwrap().to_key_values();
        assert!(kv.contains("cell.SYNTH.0.90.wrong=2"), "{kv}");
    }
}
