//! Variant grid: train and evaluate each architecture on the same data.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use lstcn_core::{PoolMode, Scalar, Variant};
use lstcn_data::Condition;

use crate::config::TrainConfig;
use crate::dataset::RunData;
use crate::run::run_experiment;
use crate::TrainError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSpec {
    pub variant: Variant,
    /// Used for both strip pooling and the temporal head.
    pub pool: PoolMode,
}

impl AblationSpec {
    pub fn label(&self) -> String {
        format!("{}_{}", self.variant, self.pool)
    }
}

/// The five branch variants under each pooling mode, then the
/// whole-plane head with max pooling.
pub fn default_grid() -> Vec<AblationSpec> {
    let mut grid = Vec::new();
    for variant in [
        Variant::StaticOnly,
        Variant::GspLstc,
        Variant::HOnly,
        Variant::VOnly,
        Variant::GbspLstc,
    ] {
        for pool in [PoolMode::Max, PoolMode::Mean, PoolMode::Gem] {
            grid.push(AblationSpec { variant, pool });
        }
    }
    grid.push(AblationSpec {
        variant: Variant::GstpHead,
        pool: PoolMode::Max,
    });
    grid
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub spec: AblationSpec,
    pub n_parts: usize,
    pub iterations: u64,
    pub per_condition: Vec<(Condition, f64)>,
    pub aggregate: f64,
    pub seconds: f64,
}

/// Each run writes its artifacts under `out_dir/<label>`.
pub fn ablation_suite<S: Scalar>(
    base: &TrainConfig,
    specs: &[AblationSpec],
    data: &RunData,
    out_dir: &Path,
) -> Result<Vec<AblationRow>, TrainError> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut cfg = base.clone();
        cfg.variant = Some(spec.variant);
        cfg.model.strip_pool = spec.pool;
        cfg.model.temporal_pool = spec.pool;
        log::info!("ablation run {}", spec.label());
        let t0 = Instant::now();
        let (outcome, result) = run_experiment::<S>(&cfg, data, &out_dir.join(spec.label()), None)?;
        rows.push(AblationRow {
            spec: *spec,
            n_parts: outcome.model.n_parts(),
            iterations: outcome.iterations,
            per_condition: result
                .conditions()
                .into_iter()
                .filter_map(|c| result.condition_accuracy(c).map(|a| (c, a)))
                .collect(),
            aggregate: result.aggregate(),
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    Ok(rows)
}

/// One line per row: variant, pooling, part count, per-condition and
/// aggregate rank-1 in percent.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut conds: Vec<Condition> = rows
        .iter()
        .flat_map(|r| r.per_condition.iter().map(|(c, _)| *c))
        .collect();
    conds.sort();
    conds.dedup();
    let mut out = String::new();
    let _ = write!(out, "{:<12}\t{:<5}\t{:>5}", "variant", "pool", "parts");
    for c in &conds {
        let _ = write!(out, "\t{:>6}", c.to_string());
    }
    let _ = writeln!(out, "\t{:>9}", "aggregate");
    for r in rows {
        let _ = write!(
            out,
            "{:<12}\t{:<5}\t{:>5}",
            r.spec.variant.name(),
            r.spec.pool.to_string(),
            r.n_parts
        );
        for c in &conds {
            match r.per_condition.iter().find(|(rc, _)| rc == c) {
                Some((_, a)) => {
                    let _ = write!(out, "\t{:>6.2}", 100.0 * a);
                }
                None => {
                    let _ = write!(out, "\t{:>6}", "-");
                }
            }
        }
        let _ = writeln!(out, "\t{:>9.2}", 100.0 * r.aggregate);
    }
    out
}
