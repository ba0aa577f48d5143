//! Targeted capability suppression: a penalized objective over per-task
//! accuracies, a shortlist of single interventions, memoized beam search over
//! coordinate→rank configurations and coordinate-descent rank refinement.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::deployment::Enforcer;
use crate::error::{Error, Result};
use crate::sensitivity::SweepCell;
use crate::taskgen::{TaskInstance, TaskKind};
use crate::transformer::{ControlVector, Family, ModuleCoordinate};

/// Slack for threshold comparisons on accuracy differences.
const TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveParams {
    pub lambda_s: f64,
    pub epsilon: f64,
    pub gamma: f64,
}

impl Default for ObjectiveParams {
    fn default() -> Self {
        Self {
            lambda_s: 2.0,
            epsilon: 0.01,
            gamma: 100.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShortlistParams {
    pub min_suppression: f64,
    pub max_collateral: f64,
    pub top_coordinates: usize,
    pub ranks_per_coordinate: usize,
}

impl Default for ShortlistParams {
    fn default() -> Self {
        Self {
            min_suppression: 0.01,
            max_collateral: 0.01,
            top_coordinates: 20,
            ranks_per_coordinate: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchParams {
    pub beam_width: usize,
    pub depth: usize,
    pub refine_rounds: usize,
    pub fractions: Vec<f64>,
}

impl Default for SearchParams {
    fn default() -> Self {
        Self {
            beam_width: 8,
            depth: 9,
            refine_rounds: 2,
            fractions: vec![0.95, 0.90, 0.80, 0.65, 0.50, 0.25, 0.15, 0.05],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuppressionProblem {
    pub suppress: Vec<TaskKind>,
    pub preserve: Vec<TaskKind>,
    #[serde(default)]
    pub objective: ObjectiveParams,
    #[serde(default)]
    pub shortlist: ShortlistParams,
    #[serde(default)]
    pub search: SearchParams,
}

impl SuppressionProblem {
    pub fn new(suppress: Vec<TaskKind>, preserve: Vec<TaskKind>) -> Self {
        Self {
            suppress,
            preserve,
            objective: ObjectiveParams::default(),
            shortlist: ShortlistParams::default(),
            search: SearchParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.suppress.is_empty() || self.preserve.is_empty() {
            return Err(Error::Argument("suppress and preserve sets must be non-empty".into()));
        }
        if self.suppress.iter().any(|t| self.preserve.contains(t)) {
            return Err(Error::Argument("suppress and preserve sets overlap".into()));
        }
        let o = &self.objective;
        let s = &self.search;
        if !(o.lambda_s > 0.0 && o.epsilon > 0.0 && o.gamma > 0.0)
            || s.beam_width == 0
            || s.fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0))
        {
            return Err(Error::Argument("suppression parameters must be positive".into()));
        }
        Ok(())
    }

    pub fn tasks(&self) -> Vec<TaskKind> {
        let mut t: Vec<TaskKind> = self.suppress.iter().chain(&self.preserve).copied().collect();
        t.sort();
        t.dedup();
        t
    }
}

/// Accuracy per task.
pub type Accuracies = BTreeMap<TaskKind, f64>;

/// A set of coordinate→rank interventions; empty is the full-rank baseline.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Vec<Intervention>", from = "Vec<Intervention>")]
pub struct Configuration(pub BTreeMap<ModuleCoordinate, usize>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Intervention {
    pub block: usize,
    pub family: Family,
    pub rank: usize,
}

impl From<Configuration> for Vec<Intervention> {
    fn from(c: Configuration) -> Self {
        c.0.into_iter()
            .map(|(k, rank)| Intervention {
                block: k.block,
                family: k.family,
                rank,
            })
            .collect()
    }
}

impl From<Vec<Intervention>> for Configuration {
    fn from(v: Vec<Intervention>) -> Self {
        Configuration(
            v.into_iter()
                .map(|i| (ModuleCoordinate::new(i.block, i.family), i.rank))
                .collect(),
        )
    }
}

impl Configuration {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn with(&self, coord: ModuleCoordinate, rank: usize) -> Self {
        let mut c = self.clone();
        c.0.insert(coord, rank);
        c
    }

    pub fn to_control(&self, r_max: usize) -> ControlVector {
        ControlVector {
            default_rank: r_max,
            overrides: self.0.clone(),
        }
    }
}

/// `ā_preserve − λ_s·ā_suppress − Σ_preserve 1[Δa_t > ε]·γ(Δa_t − ε)`.
pub fn objective(
    accuracies: &Accuracies,
    baseline: &Accuracies,
    problem: &SuppressionProblem,
) -> Result<f64> {
    let get = |m: &Accuracies, t: &TaskKind| {
        m.get(t)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no accuracy for task {t}")))
    };
    let mean = |ts: &[TaskKind]| -> Result<f64> {
        let mut s = 0.0;
        for t in ts {
            s += get(accuracies, t)?;
        }
        Ok(s / ts.len() as f64)
    };
    let p = &problem.objective;
    let mut penalty = 0.0;
    for t in &problem.preserve {
        let drop = get(baseline, t)? - get(accuracies, t)?;
        if drop > p.epsilon {
            penalty += p.gamma * (drop - p.epsilon);
        }
    }
    Ok(mean(&problem.preserve)? - p.lambda_s * mean(&problem.suppress)? - penalty)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredConfiguration {
    pub configuration: Configuration,
    pub accuracies: Accuracies,
    pub score: f64,
}

/// Better score first, then fewer interventions, then lexicographic coordinates.
pub fn rank_order(a: &ScoredConfiguration, b: &ScoredConfiguration) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.configuration.len().cmp(&b.configuration.len()))
        .then(a.configuration.cmp(&b.configuration))
}

pub trait Evaluator {
    fn accuracies(&mut self, configuration: &Configuration) -> Result<Accuracies>;
}

/// Evaluates configurations on per-task datasets through an enforcer.
pub struct ModelEvaluator<'a, E: Enforcer + ?Sized> {
    pub enforcer: &'a mut E,
    pub datasets: &'a [(TaskKind, Vec<TaskInstance>)],
    pub r_max: usize,
}

impl<E: Enforcer + ?Sized> Evaluator for ModelEvaluator<'_, E> {
    fn accuracies(&mut self, configuration: &Configuration) -> Result<Accuracies> {
        self.enforcer.set_control(&configuration.to_control(self.r_max))?;
        let mut out = Accuracies::new();
        for (task, data) in self.datasets {
            if data.is_empty() {
                return Err(Error::Argument(format!("empty dataset for {task}")));
            }
            let preds = self.enforcer.forward(data)?;
            let c = preds.iter().zip(data).filter(|(p, i)| p.label == i.label).count();
            out.insert(*task, c as f64 / data.len() as f64);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub stage: String,
    #[serde(flatten)]
    pub scored: ScoredConfiguration,
}

/// Memoizes an evaluator by configuration and logs each configuration the first time it is scored.
pub struct Memo<E> {
    inner: E,
    cache: HashMap<Configuration, Accuracies>,
    calls: usize,
    pub log: Vec<LogEntry>,
}

impl<E: Evaluator> Memo<E> {
    pub fn new(inner: E) -> Self {
        Self {
            inner,
            cache: HashMap::new(),
            calls: 0,
            log: Vec::new(),
        }
    }

    /// Number of times the wrapped evaluator ran.
    pub fn calls(&self) -> usize {
        self.calls
    }

    pub fn distinct(&self) -> usize {
        self.cache.len()
    }

    pub fn into_inner(self) -> E {
        self.inner
    }

    pub fn score(
        &mut self,
        configuration: &Configuration,
        baseline: &Accuracies,
        problem: &SuppressionProblem,
        stage: &str,
    ) -> Result<ScoredConfiguration> {
        let accuracies = match self.cache.get(configuration) {
            Some(a) => a.clone(),
            None => {
                self.calls += 1;
                let a = self.inner.accuracies(configuration)?;
                self.cache.insert(configuration.clone(), a.clone());
                let scored = ScoredConfiguration {
                    configuration: configuration.clone(),
                    score: objective(&a, baseline, problem)?,
                    accuracies: a.clone(),
                };
                self.log.push(LogEntry {
                    stage: stage.to_string(),
                    scored,
                });
                a
            }
        };
        Ok(ScoredConfiguration {
            configuration: configuration.clone(),
            score: objective(&accuracies, baseline, problem)?,
            accuracies,
        })
    }

    /// Accuracies of the empty configuration.
    pub fn baseline(&mut self, problem: &SuppressionProblem) -> Result<Accuracies> {
        let empty = Configuration::default();
        if let Some(a) = self.cache.get(&empty) {
            return Ok(a.clone());
        }
        self.calls += 1;
        let a = self.inner.accuracies(&empty)?;
        self.cache.insert(empty.clone(), a.clone());
        self.log.push(LogEntry {
            stage: "baseline".into(),
            scored: ScoredConfiguration {
                configuration: empty,
                score: objective(&a, &a, problem)?,
                accuracies: a.clone(),
            },
        });
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortlist {
    pub pairs: Vec<(ModuleCoordinate, usize)>,
    /// No single intervention passed the filters.
    pub empty: bool,
}

/// Filters single interventions by mean suppression and collateral, keeps the
/// strongest ranks per coordinate and the strongest coordinates overall.
pub fn shortlist(cells: &[SweepCell], problem: &SuppressionProblem) -> Shortlist {
    let params = &problem.shortlist;
    // Mean drop over suppress and preserve tasks per (coordinate, rank).
    let mut groups: BTreeMap<(ModuleCoordinate, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for c in cells {
        let e = groups.entry((c.coordinate, c.rank)).or_default();
        if problem.suppress.contains(&c.task) {
            e.0.push(-c.delta_accuracy);
        } else if problem.preserve.contains(&c.task) {
            e.1.push(-c.delta_accuracy);
        }
    }
    let mut per_coord: BTreeMap<ModuleCoordinate, Vec<(f64, usize)>> = BTreeMap::new();
    for ((coord, rank), (s, p)) in groups {
        if s.len() != problem.suppress.len() || p.len() != problem.preserve.len() {
            continue;
        }
        let ds = s.iter().sum::<f64>() / s.len() as f64;
        let dp = p.iter().sum::<f64>() / p.len() as f64;
        if ds >= params.min_suppression - TOL && dp <= params.max_collateral + TOL {
            per_coord.entry(coord).or_default().push((ds, rank));
        }
    }
    let mut coords: Vec<(f64, ModuleCoordinate, Vec<usize>)> = per_coord
        .into_iter()
        .map(|(coord, mut v)| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
            v.truncate(params.ranks_per_coordinate);
            (v[0].0, coord, v.into_iter().map(|x| x.1).collect())
        })
        .collect();
    coords.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    coords.truncate(params.top_coordinates);
    let pairs: Vec<(ModuleCoordinate, usize)> = coords
        .into_iter()
        .flat_map(|(_, c, ranks)| ranks.into_iter().map(move |r| (c, r)))
        .collect();
    Shortlist {
        empty: pairs.is_empty(),
        pairs,
    }
}

/// Beam search from the empty configuration; returns the best state ever scored.
pub fn beam_search<E: Evaluator>(
    problem: &SuppressionProblem,
    shortlist: &[(ModuleCoordinate, usize)],
    memo: &mut Memo<E>,
) -> Result<ScoredConfiguration> {
    problem.validate()?;
    let baseline = memo.baseline(problem)?;
    let root = memo.score(&Configuration::default(), &baseline, problem, "beam")?;
    let mut best = root.clone();
    let mut beam = vec![root];
    for _ in 0..problem.search.depth {
        let mut children: BTreeSet<Configuration> = BTreeSet::new();
        for state in &beam {
            for &(coord, rank) in shortlist {
                if !state.configuration.0.contains_key(&coord) {
                    children.insert(state.configuration.with(coord, rank));
                }
            }
        }
        if children.is_empty() {
            break;
        }
        let mut scored = Vec::with_capacity(children.len());
        for c in &children {
            scored.push(memo.score(c, &baseline, problem, "beam")?);
        }
        scored.sort_by(rank_order);
        if rank_order(&scored[0], &best) == Ordering::Less {
            best = scored[0].clone();
        }
        scored.truncate(problem.search.beam_width);
        beam = scored;
    }
    Ok(best)
}

/// Candidate ranks for refinement: each fraction of `r_max` and the midpoints of
/// neighbouring fractions, rounded to nearest with a floor of 1.
pub fn refine_ranks(fractions: &[f64], r_max: usize) -> Vec<usize> {
    let to_rank = |f: f64| ((f * r_max as f64).round() as usize).clamp(1, r_max.max(1));
    let mut sorted = fractions.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut ranks: BTreeSet<usize> = sorted.iter().map(|&f| to_rank(f)).collect();
    for w in sorted.windows(2) {
        ranks.insert(to_rank((w[0] + w[1]) / 2.0));
    }
    ranks.into_iter().collect()
}

/// Coordinate descent over each intervention's rank; the score never decreases.
pub fn refine<E: Evaluator>(
    start: &ScoredConfiguration,
    problem: &SuppressionProblem,
    memo: &mut Memo<E>,
    r_max: usize,
) -> Result<ScoredConfiguration> {
    let baseline = memo.baseline(problem)?;
    let candidates = refine_ranks(&problem.search.fractions, r_max);
    let mut current = start.clone();
    for _ in 0..problem.search.refine_rounds {
        let coords: Vec<ModuleCoordinate> = current.configuration.0.keys().copied().collect();
        for coord in coords {
            for &rank in &candidates {
                if current.configuration.0.get(&coord) == Some(&rank) {
                    continue;
                }
                let trial = memo.score(&current.configuration.with(coord, rank), &baseline, problem, "refine")?;
                if trial.score > current.score {
                    current = trial;
                }
            }
        }
    }
    Ok(current)
}

pub fn log_to_jsonl(log: &[LogEntry]) -> Result<String> {
    let mut out = String::new();
    for e in log {
        out.push_str(&serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?);
        out.push('\n');
    }
    Ok(out)
}
