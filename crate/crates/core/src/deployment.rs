//! Monitor, allocator and enforcer: per-request privilege policies, their
//! calibration on validation data, and privilege/overhead accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taskgen::TaskInstance;
use crate::trainer::csv_err;
use crate::transformer::{ControlVector, Model, Prediction, PromptMode};

/// The only access path policies have to a model.
pub trait Enforcer {
    fn set_control(&mut self, control: &ControlVector) -> Result<()>;
    /// Restricted True/False readout for each instance under the current control.
    fn forward(&mut self, instances: &[TaskInstance]) -> Result<Vec<Prediction>>;
}

impl Enforcer for Model {
    fn set_control(&mut self, control: &ControlVector) -> Result<()> {
        self.apply_control(control)
    }

    fn forward(&mut self, instances: &[TaskInstance]) -> Result<Vec<Prediction>> {
        self.predict_batch(instances, PromptMode::Normal)
    }
}

/// Request-time signal: the instance plus uncertainty once a pass has run.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<'a> {
    pub instance: &'a TaskInstance,
    pub observed_uncertainty: Option<f64>,
}

/// `1 − max p`.
pub fn uncertainty(dist: &[f64]) -> f64 {
    1.0 - dist.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FullPrivilege,
    MinRank,
    StaticLp,
    ProgressiveIncremental,
    ProgressiveJump,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::FullPrivilege,
        PolicyKind::MinRank,
        PolicyKind::StaticLp,
        PolicyKind::ProgressiveIncremental,
        PolicyKind::ProgressiveJump,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::FullPrivilege => "full_privilege",
            PolicyKind::MinRank => "min_rank",
            PolicyKind::StaticLp => "static_lp",
            PolicyKind::ProgressiveIncremental => "progressive_incremental",
            PolicyKind::ProgressiveJump => "progressive_jump",
        }
    }

    pub fn is_progressive(self) -> bool {
        matches!(self, PolicyKind::ProgressiveIncremental | PolicyKind::ProgressiveJump)
    }
}

/// Thresholds swept by [`calibrate_threshold`].
pub const THRESHOLD_GRID: [f64; 7] = [0.02, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub rank_grid: Vec<usize>,
    pub target_utility: f64,
    #[serde(default)]
    pub uncertainty_threshold: Option<f64>,
    #[serde(default)]
    pub calibrated_rank: Option<usize>,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind, rank_grid: Vec<usize>, target_utility: f64) -> Self {
        Self {
            kind,
            rank_grid,
            target_utility,
            uncertainty_threshold: None,
            calibrated_rank: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank_grid.is_empty() || self.rank_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Argument(format!(
                "rank grid {:?} must be non-empty and strictly ascending",
                self.rank_grid
            )));
        }
        if !(0.0..=1.0).contains(&self.target_utility) {
            return Err(Error::Argument(format!("target utility {}", self.target_utility)));
        }
        if let Some(t) = self.uncertainty_threshold {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Argument(format!("uncertainty threshold {t}")));
            }
        }
        Ok(())
    }

    fn threshold(&self) -> Result<f64> {
        self.uncertainty_threshold
            .ok_or_else(|| Error::State(format!("{} policy is not calibrated", self.kind.as_str())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestOutcome {
    pub prediction: bool,
    pub correct: bool,
    pub privilege_used: usize,
    pub passes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyReport {
    pub utility: f64,
    pub avg_privilege: f64,
    pub avg_passes: f64,
    pub n: usize,
}

impl PolicyReport {
    pub fn aggregate(outcomes: &[RequestOutcome]) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::Argument("no outcomes to aggregate".into()));
        }
        let n = outcomes.len() as f64;
        Ok(Self {
            utility: outcomes.iter().filter(|o| o.correct).count() as f64 / n,
            avg_privilege: outcomes.iter().map(|o| o.privilege_used as f64).sum::<f64>() / n,
            avg_passes: outcomes.iter().map(|o| o.passes as f64).sum::<f64>() / n,
            n: outcomes.len(),
        })
    }
}

/// Drives a policy from a per-rank answer source. `answer(k)` runs a pass at `rank_grid[k]`.
fn drive(
    policy: &PolicyConfig,
    label: bool,
    mut answer: impl FnMut(usize) -> Result<Prediction>,
) -> Result<RequestOutcome> {
    let grid = &policy.rank_grid;
    let top = grid.len() - 1;
    let (pred, k, passes) = match policy.kind {
        PolicyKind::FullPrivilege => (answer(top)?, top, 1),
        PolicyKind::MinRank => (answer(0)?, 0, 1),
        PolicyKind::StaticLp => {
            let g = policy.calibrated_rank.ok_or_else(|| {
                Error::State("static_lp policy is not calibrated".into())
            })?;
            let k = grid.iter().position(|&r| r == g).ok_or_else(|| {
                Error::Argument(format!("calibrated rank {g} not in grid {grid:?}"))
            })?;
            (answer(k)?, k, 1)
        }
        PolicyKind::ProgressiveIncremental => {
            let tau = policy.threshold()?;
            let mut k = 0;
            let mut pred = answer(0)?;
            let mut passes = 1;
            while uncertainty(&pred.dist) > tau && k < top {
                k += 1;
                pred = answer(k)?;
                passes += 1;
            }
            (pred, k, passes)
        }
        PolicyKind::ProgressiveJump => {
            let tau = policy.threshold()?;
            let pred = answer(0)?;
            if uncertainty(&pred.dist) > tau && top > 0 {
                (answer(top)?, top, 2)
            } else {
                (pred, 0, 1)
            }
        }
    };
    Ok(RequestOutcome {
        prediction: pred.label,
        correct: pred.label == label,
        privilege_used: grid[k],
        passes,
    })
}

/// Serves one request: each pass sets a global-rank control and runs a forward.
pub fn run_policy<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    instance: &TaskInstance,
    policy: &PolicyConfig,
) -> Result<RequestOutcome> {
    policy.validate()?;
    drive(policy, instance.label, |k| {
        enforcer.set_control(&ControlVector::global(policy.rank_grid[k]))?;
        Ok(enforcer.forward(std::slice::from_ref(instance))?[0])
    })
}

/// Answers of every instance at every grid rank, gathered in one batched pass per rank.
#[derive(Debug, Clone)]
pub struct PredictionTable {
    pub grid: Vec<usize>,
    labels: Vec<bool>,
    /// `preds[k][i]` is instance `i` at `grid[k]`.
    preds: Vec<Vec<Prediction>>,
}

impl PredictionTable {
    pub fn build<E: Enforcer + ?Sized>(
        enforcer: &mut E,
        instances: &[TaskInstance],
        grid: &[usize],
    ) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::Argument("empty evaluation set".into()));
        }
        let mut preds = Vec::with_capacity(grid.len());
        for &g in grid {
            enforcer.set_control(&ControlVector::global(g))?;
            preds.push(enforcer.forward(instances)?);
        }
        Ok(Self {
            grid: grid.to_vec(),
            labels: instances.iter().map(|i| i.label).collect(),
            preds,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn prediction(&self, rank_index: usize, instance: usize) -> Prediction {
        self.preds[rank_index][instance]
    }

    /// Accuracy at each grid rank.
    pub fn accuracies(&self) -> Vec<(usize, f64)> {
        self.grid
            .iter()
            .zip(&self.preds)
            .map(|(&g, p)| {
                let c = p.iter().zip(&self.labels).filter(|(p, &l)| p.label == l).count();
                (g, c as f64 / self.labels.len() as f64)
            })
            .collect()
    }

    fn rank_index(&self, g: usize) -> Result<usize> {
        self.grid
            .iter()
            .position(|&r| r == g)
            .ok_or_else(|| Error::Argument(format!("rank {g} not in table grid {:?}", self.grid)))
    }

    /// Replays a policy from cached answers; identical to [`run_policy`] per request.
    pub fn simulate(&self, policy: &PolicyConfig) -> Result<Vec<RequestOutcome>> {
        policy.validate()?;
        let map: Vec<usize> = policy
            .rank_grid
            .iter()
            .map(|&g| self.rank_index(g))
            .collect::<Result<_>>()?;
        (0..self.len())
            .map(|i| drive(policy, self.labels[i], |k| Ok(self.preds[map[k]][i])))
            .collect()
    }
}

/// Result of a static-rank calibration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticCalibration {
    pub rank: usize,
    pub infeasible: bool,
    pub accuracies: Vec<(usize, f64)>,
}

/// Smallest rank whose accuracy reaches `u0`; max rank plus a flag when none does.
pub fn select_static_rank(accuracies: &[(usize, f64)], u0: f64) -> StaticCalibration {
    let mut sorted = accuracies.to_vec();
    sorted.sort_by_key(|&(g, _)| g);
    let hit = sorted.iter().find(|&&(_, a)| a >= u0);
    StaticCalibration {
        rank: hit.map_or_else(|| sorted.last().map_or(0, |x| x.0), |x| x.0),
        infeasible: hit.is_none(),
        accuracies: sorted,
    }
}

pub fn calibrate_static_lp<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    validation: &[TaskInstance],
    grid: &[usize],
    u0: f64,
) -> Result<StaticCalibration> {
    let table = PredictionTable::build(enforcer, validation, grid)?;
    Ok(select_static_rank(&table.accuracies(), u0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCalibration {
    pub tau: f64,
    pub infeasible: bool,
    /// Simulated validation utility at each swept threshold.
    pub sweep: Vec<(f64, f64)>,
}

/// Largest swept τ meeting `u0`; the smallest τ plus a flag when none does.
pub fn select_threshold(
    table: &PredictionTable,
    kind: PolicyKind,
    grid: &[usize],
    u0: f64,
) -> Result<ThresholdCalibration> {
    if !kind.is_progressive() {
        return Err(Error::Argument(format!("{} has no threshold", kind.as_str())));
    }
    let mut sweep = Vec::with_capacity(THRESHOLD_GRID.len());
    for &tau in &THRESHOLD_GRID {
        let policy = PolicyConfig {
            uncertainty_threshold: Some(tau),
            ..PolicyConfig::new(kind, grid.to_vec(), u0)
        };
        let report = PolicyReport::aggregate(&table.simulate(&policy)?)?;
        sweep.push((tau, report.utility));
    }
    let best = sweep.iter().rev().find(|&&(_, u)| u >= u0).map(|x| x.0);
    Ok(ThresholdCalibration {
        tau: best.unwrap_or(THRESHOLD_GRID[0]),
        infeasible: best.is_none(),
        sweep,
    })
}

pub fn calibrate_threshold<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    validation: &[TaskInstance],
    grid: &[usize],
    u0: f64,
    kind: PolicyKind,
) -> Result<ThresholdCalibration> {
    let table = PredictionTable::build(enforcer, validation, grid)?;
    select_threshold(&table, kind, grid, u0)
}

/// Calibration outcome attached to a ready-to-run policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedPolicy {
    pub policy: PolicyConfig,
    pub infeasible: bool,
}

/// Fills in whatever the policy kind needs from a validation table.
pub fn calibrate(
    validation: &PredictionTable,
    kind: PolicyKind,
    grid: &[usize],
    u0: f64,
) -> Result<CalibratedPolicy> {
    let mut policy = PolicyConfig::new(kind, grid.to_vec(), u0);
    policy.validate()?;
    let infeasible = match kind {
        PolicyKind::FullPrivilege | PolicyKind::MinRank => false,
        PolicyKind::StaticLp => {
            let c = select_static_rank(&validation.accuracies(), u0);
            policy.calibrated_rank = Some(c.rank);
            c.infeasible
        }
        PolicyKind::ProgressiveIncremental | PolicyKind::ProgressiveJump => {
            let c = select_threshold(validation, kind, grid, u0)?;
            policy.uncertainty_threshold = Some(c.tau);
            c.infeasible
        }
    };
    Ok(CalibratedPolicy { policy, infeasible })
}

pub fn evaluate_policy<E: Enforcer + ?Sized>(
    enforcer: &mut E,
    dataset: &[TaskInstance],
    policy: &PolicyConfig,
) -> Result<(PolicyReport, Vec<RequestOutcome>)> {
    let table = PredictionTable::build(enforcer, dataset, &policy.rank_grid)?;
    let outcomes = table.simulate(policy)?;
    Ok((PolicyReport::aggregate(&outcomes)?, outcomes))
}

/// One row of the per-request CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub instance_id: usize,
    pub task: String,
    pub difficulty: u32,
    pub policy: String,
    pub target: f64,
    pub prediction: bool,
    pub correct: bool,
    pub privilege_used: usize,
    pub passes: usize,
}

impl RequestRecord {
    pub fn rows(
        instances: &[TaskInstance],
        policy: &PolicyConfig,
        outcomes: &[RequestOutcome],
    ) -> Vec<RequestRecord> {
        instances
            .iter()
            .zip(outcomes)
            .enumerate()
            .map(|(id, (inst, o))| RequestRecord {
                instance_id: id,
                task: inst.task.as_str().to_string(),
                difficulty: inst.difficulty,
                policy: policy.kind.as_str().to_string(),
                target: policy.target_utility,
                prediction: o.prediction,
                correct: o.correct,
                privilege_used: o.privilege_used,
                passes: o.passes,
            })
            .collect()
    }
}

pub fn requests_to_csv(records: &[RequestRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn requests_from_csv(text: &str) -> Result<Vec<RequestRecord>> {
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(csv_err))
        .collect()
}
