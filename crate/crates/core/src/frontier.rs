//! Privilege–utility frontiers, per-difficulty degradation surfaces and
//! savings relative to full privilege.

use serde::{Deserialize, Serialize};

use crate::deployment::{calibrate, Enforcer, PolicyKind, PolicyReport, PredictionTable, RequestRecord};
use crate::error::{Error, Result};
use crate::taskgen::TaskInstance;
use crate::trainer::csv_err;

/// Default utility targets.
pub const DEFAULT_TARGETS: [f64; 3] = [0.80, 0.90, 0.95];

/// Cells with fewer instances than this are flagged.
pub const LOW_SAMPLE: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationSurface {
    pub difficulties: Vec<u32>,
    pub ranks: Vec<usize>,
    /// `accuracy[d][r]` for `difficulties[d]` at `ranks[r]`.
    pub accuracy: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceRow {
    pub difficulty: u32,
    pub rank: usize,
    pub accuracy: f64,
    pub n: usize,
    pub low_sample: bool,
}

impl DegradationSurface {
    pub fn from_table(table: &PredictionTable, instances: &[TaskInstance]) -> Result<Self> {
        if table.len() != instances.len() {
            return Err(Error::Dimension(format!(
                "table of {} answers for {} instances",
                table.len(),
                instances.len()
            )));
        }
        let mut difficulties: Vec<u32> = instances.iter().map(|i| i.difficulty).collect();
        difficulties.sort_unstable();
        difficulties.dedup();
        let mut accuracy = vec![vec![0.0; table.grid.len()]; difficulties.len()];
        let mut counts = vec![0usize; difficulties.len()];
        for (i, inst) in instances.iter().enumerate() {
            let d = difficulties.binary_search(&inst.difficulty).expect("collected above");
            counts[d] += 1;
            for (k, cell) in accuracy[d].iter_mut().enumerate() {
                if table.prediction(k, i).label == inst.label {
                    *cell += 1.0;
                }
            }
        }
        for (row, &n) in accuracy.iter_mut().zip(&counts) {
            row.iter_mut().for_each(|c| *c /= n as f64);
        }
        Ok(Self {
            difficulties,
            ranks: table.grid.clone(),
            accuracy,
            counts,
        })
    }

    pub fn rows(&self) -> Vec<SurfaceRow> {
        let mut out = Vec::new();
        for (d, &diff) in self.difficulties.iter().enumerate() {
            for (r, &rank) in self.ranks.iter().enumerate() {
                out.push(SurfaceRow {
                    difficulty: diff,
                    rank,
                    accuracy: self.accuracy[d][r],
                    n: self.counts[d],
                    low_sample: self.counts[d] < LOW_SAMPLE,
                });
            }
        }
        out
    }

    /// Accuracy per rank pooled over all difficulties (count-weighted).
    pub fn pooled(&self) -> Vec<f64> {
        let total: usize = self.counts.iter().sum();
        (0..self.ranks.len())
            .map(|r| {
                self.accuracy
                    .iter()
                    .zip(&self.counts)
                    .map(|(row, &n)| row[r] * n as f64)
                    .sum::<f64>()
                    / total as f64
            })
            .collect()
    }

    /// Accuracy lost from the highest to the lowest rank for each difficulty.
    pub fn drops(&self) -> Vec<f64> {
        let last = self.ranks.len() - 1;
        self.accuracy.iter().map(|row| row[last] - row[0]).collect()
    }

    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.rows())
    }
}

/// Accuracy per (difficulty, rank) under global-rank controls.
pub fn degradation_surface<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    dataset: &[TaskInstance],
    grid: &[usize],
) -> Result<DegradationSurface> {
    let table = PredictionTable::build(enforcer, dataset, grid)?;
    DegradationSurface::from_table(&table, dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierRecord {
    pub policy: PolicyKind,
    pub target: f64,
    pub utility: f64,
    pub avg_privilege: f64,
    pub avg_passes: f64,
    /// Set when calibration could not meet the target on validation.
    pub infeasible: bool,
    pub threshold: Option<f64>,
    pub calibrated_rank: Option<usize>,
}

/// Frontier records plus the per-request rows behind them.
#[derive(Debug, Clone)]
pub struct Frontier {
    pub records: Vec<FrontierRecord>,
    pub requests: Vec<RequestRecord>,
}

/// Calibrates each policy per target on validation and evaluates it on test.
pub fn build_frontier<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    validation: &[TaskInstance],
    test: &[TaskInstance],
    policies: &[PolicyKind],
    targets: &[f64],
    grid: &[usize],
) -> Result<Frontier> {
    let val_table = PredictionTable::build(enforcer, validation, grid)?;
    let test_table = PredictionTable::build(enforcer, test, grid)?;
    frontier_from_tables(&val_table, &test_table, test, policies, targets, grid)
}

pub fn frontier_from_tables(
    val_table: &PredictionTable,
    test_table: &PredictionTable,
    test: &[TaskInstance],
    policies: &[PolicyKind],
    targets: &[f64],
    grid: &[usize],
) -> Result<Frontier> {
    let mut records = Vec::with_capacity(policies.len() * targets.len());
    let mut requests = Vec::new();
    for &kind in policies {
        for &target in targets {
            let cal = calibrate(val_table, kind, grid, target)?;
            let outcomes = test_table.simulate(&cal.policy)?;
            let report = PolicyReport::aggregate(&outcomes)?;
            requests.extend(RequestRecord::rows(test, &cal.policy, &outcomes));
            records.push(FrontierRecord {
                policy: kind,
                target,
                utility: report.utility,
                avg_privilege: report.avg_privilege,
                avg_passes: report.avg_passes,
                infeasible: cal.infeasible,
                threshold: cal.policy.uncertainty_threshold,
                calibrated_rank: cal.policy.calibrated_rank,
            });
        }
    }
    Ok(Frontier { records, requests })
}

/// Records not dominated in (higher utility, lower privilege), ordered by privilege.
pub fn pareto_filter(records: &[FrontierRecord]) -> Vec<FrontierRecord> {
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.sort_by(|&i, &j| {
        records[i]
            .avg_privilege
            .total_cmp(&records[j].avg_privilege)
            .then(records[j].utility.total_cmp(&records[i].utility))
            .then(i.cmp(&j))
    });
    let mut kept: Vec<FrontierRecord> = Vec::new();
    let mut best_utility = f64::NEG_INFINITY;
    let mut best_privilege = f64::NAN;
    for i in order {
        let r = &records[i];
        // Sorted by privilege, so only a kept record of lower-or-equal privilege can dominate.
        let dominated = r.utility < best_utility
            || (r.utility == best_utility && r.avg_privilege > best_privilege);
        if !dominated {
            if r.utility > best_utility {
                best_utility = r.utility;
                best_privilege = r.avg_privilege;
            }
            kept.push(r.clone());
        }
    }
    kept
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavingsRow {
    pub policy: PolicyKind,
    pub target: f64,
    /// `100 · utility / baseline utility`; `None` when the baseline utility is 0.
    pub utility_retention: Option<f64>,
    /// `100 · avg_privilege / baseline privilege`.
    pub privilege_percent: Option<f64>,
}

/// Percentages relative to the full-privilege record of the same target.
pub fn relative_savings(records: &[FrontierRecord]) -> Result<Vec<SavingsRow>> {
    let baseline_for = |target: f64| {
        records
            .iter()
            .find(|r| r.policy == PolicyKind::FullPrivilege && r.target == target)
            .or_else(|| records.iter().find(|r| r.policy == PolicyKind::FullPrivilege))
    };
    records
        .iter()
        .map(|r| {
            let base = baseline_for(r.target)
                .ok_or_else(|| Error::Argument("no full-privilege baseline record".into()))?;
            let ratio = |x: f64, b: f64| (b != 0.0).then(|| 100.0 * x / b);
            Ok(SavingsRow {
                policy: r.policy,
                target: r.target,
                utility_retention: ratio(r.utility, base.utility),
                privilege_percent: ratio(r.avg_privilege, base.avg_privilege),
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}
