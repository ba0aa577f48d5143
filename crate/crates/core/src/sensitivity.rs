//! Single-module rank sweeps with paired significance testing,
//! Benjamini–Hochberg masking and persistence counting.

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, DiscreteCDF};

use crate::deployment::Enforcer;
use crate::error::{Error, Result};
use crate::frontier::write_csv;
use crate::taskgen::{TaskInstance, TaskKind};
use crate::transformer::{ControlVector, Family, ModuleCoordinate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub coordinate: ModuleCoordinate,
    pub rank: usize,
    pub task: TaskKind,
    /// Intervened minus baseline accuracy (negative = drop).
    pub delta_accuracy: f64,
    pub p_value: f64,
    pub significant: bool,
    pub persistence: usize,
}

/// Per-instance correctness behind a sweep, kept for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcomes {
    /// Baseline correctness per task, in task order of the sweep input.
    pub baseline: Vec<(TaskKind, Vec<bool>)>,
    /// Correctness per cell, parallel to the returned cells.
    pub intervened: Vec<Vec<bool>>,
}

fn correctness<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    control: &ControlVector,
    instances: &[TaskInstance],
) -> Result<Vec<bool>> {
    enforcer.set_control(control)?;
    Ok(enforcer
        .forward(instances)?
        .iter()
        .zip(instances)
        .map(|(p, i)| p.label == i.label)
        .collect())
}

fn mean(v: &[bool]) -> f64 {
    v.iter().filter(|&&b| b).count() as f64 / v.len() as f64
}

/// One cell per (coordinate, rank, task); only the swept coordinate is lowered.
///
/// Cells come back with p-values filled; run [`mask`] to set significance and persistence.
pub fn single_module_sweep<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    coordinates: &[ModuleCoordinate],
    rank_grid: &[usize],
    tasks: &[(TaskKind, Vec<TaskInstance>)],
    r_max: usize,
) -> Result<(Vec<SweepCell>, SweepOutcomes)> {
    if tasks.iter().any(|(_, d)| d.is_empty()) {
        return Err(Error::Argument("empty task dataset in sweep".into()));
    }
    let full = ControlVector::global(r_max);
    let mut baseline = Vec::with_capacity(tasks.len());
    for (task, data) in tasks {
        baseline.push((*task, correctness(enforcer, &full, data)?));
    }
    let mut cells = Vec::new();
    let mut intervened = Vec::new();
    for &coord in coordinates {
        for &rank in rank_grid {
            let control = full.clone().with_override(coord, rank);
            for ((task, data), (_, base)) in tasks.iter().zip(&baseline) {
                let now = correctness(enforcer, &control, data)?;
                cells.push(SweepCell {
                    coordinate: coord,
                    rank,
                    task: *task,
                    delta_accuracy: mean(&now) - mean(base),
                    p_value: significance_test(base, &now)?,
                    significant: false,
                    persistence: 0,
                });
                intervened.push(now);
            }
        }
    }
    Ok((cells, SweepOutcomes { baseline, intervened }))
}

/// Exact two-sided McNemar test: binomial(½) on the discordant pairs.
pub fn significance_test(baseline: &[bool], intervened: &[bool]) -> Result<f64> {
    if baseline.is_empty() || baseline.len() != intervened.len() {
        return Err(Error::Argument(format!(
            "paired test needs equal non-empty lists, got {} and {}",
            baseline.len(),
            intervened.len()
        )));
    }
    let b = baseline.iter().zip(intervened).filter(|(a, b)| **a && !**b).count() as u64;
    let c = baseline.iter().zip(intervened).filter(|(a, b)| !**a && **b).count() as u64;
    let n = b + c;
    if n == 0 {
        return Ok(1.0);
    }
    let dist = Binomial::new(0.5, n).map_err(|e| Error::Argument(e.to_string()))?;
    Ok((2.0 * dist.cdf(b.min(c))).min(1.0))
}

/// Benjamini–Hochberg step-up rejections at level `q`, in input order.
pub fn bh_fdr(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]).then(i.cmp(&j)));
    let k = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 * q / m as f64)
        .unwrap_or(0);
    let mut mask = vec![false; m];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// Fills `persistence`: the run of consecutive grid ranks at or below each
/// significant cell's rank that stay significant for the same (task, block, family).
pub fn persistence(cells: &mut [SweepCell], grid: &[usize]) {
    let mut sorted = grid.to_vec();
    sorted.sort_unstable();
    let significant_at = |cells: &[SweepCell], c: &SweepCell, rank: usize| {
        cells.iter().any(|o| {
            o.task == c.task && o.coordinate == c.coordinate && o.rank == rank && o.significant
        })
    };
    let runs: Vec<usize> = cells
        .iter()
        .map(|c| {
            if !c.significant {
                return 0;
            }
            let Some(pos) = sorted.iter().position(|&r| r == c.rank) else {
                return 0;
            };
            sorted[..=pos]
                .iter()
                .rev()
                .take_while(|&&r| significant_at(cells, c, r))
                .count()
        })
        .collect();
    for (c, run) in cells.iter_mut().zip(runs) {
        c.persistence = run;
    }
}

/// BH masking across all cells followed by persistence counting.
pub fn mask(cells: &mut [SweepCell], grid: &[usize], q: f64) {
    let p: Vec<f64> = cells.iter().map(|c| c.p_value).collect();
    for (c, s) in cells.iter_mut().zip(bh_fdr(&p, q)) {
        c.significant = s;
    }
    persistence(cells, grid);
}

/// Number of significant cells at `rank`.
pub fn significant_count(cells: &[SweepCell], rank: usize) -> usize {
    cells.iter().filter(|c| c.rank == rank && c.significant).count()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    pub block: usize,
    pub family: Family,
    pub rank: usize,
    pub task: TaskKind,
    pub delta: f64,
    pub p: f64,
    pub significant: bool,
    pub persistence: usize,
}

impl From<&SweepCell> for SensitivityRow {
    fn from(c: &SweepCell) -> Self {
        Self {
            block: c.coordinate.block,
            family: c.coordinate.family,
            rank: c.rank,
            task: c.task,
            delta: c.delta_accuracy,
            p: c.p_value,
            significant: c.significant,
            persistence: c.persistence,
        }
    }
}

impl From<SensitivityRow> for SweepCell {
    fn from(r: SensitivityRow) -> Self {
        Self {
            coordinate: ModuleCoordinate::new(r.block, r.family),
            rank: r.rank,
            task: r.task,
            delta_accuracy: r.delta,
            p_value: r.p,
            significant: r.significant,
            persistence: r.persistence,
        }
    }
}

pub fn cells_to_csv(cells: &[SweepCell]) -> Result<String> {
    write_csv(&cells.iter().map(SensitivityRow::from).collect::<Vec<_>>())
}

pub fn cells_from_csv(text: &str) -> Result<Vec<SweepCell>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize::<SensitivityRow>()
        .map(|r| r.map(SweepCell::from).map_err(crate::trainer::csv_err))
        .collect()
}
