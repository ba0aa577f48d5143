//! Experiment configuration and the end-to-end pipelines behind each CLI command.
//!
//! Every command runs once per seed and writes into `<output_dir>/seed-<n>/`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::deployment::{PolicyKind, PredictionTable};
use crate::error::{Error, Result};
use crate::frontier::{self, pareto_filter, relative_savings, write_csv, DegradationSurface};
use crate::io::{atomic_write, read_to_string, write_json};
use crate::probe::{self, capacity_curve, ProbeConfig};
use crate::sensitivity::{self, single_module_sweep, SweepCell};
use crate::suppressor::{
    self, beam_search, log_to_jsonl, refine, Evaluator, Memo, ModelEvaluator, SuppressionProblem,
};
use crate::taskgen::{make_dataset, Dataset, Split, TaskInstance, TaskKind};
use crate::trainer::{self, Example, Mixture, PretrainConfig, TrainConfig, VariantSampling};
use crate::transformer::{ControlVector, Model, ModelConfig, PromptMode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub tasks: Vec<TaskKind>,
    pub levels: Vec<u32>,
    pub n_train_per_level: usize,
    pub n_val_per_level: usize,
    pub n_test_per_level: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSpec {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub variant_sampling: VariantSampling,
    pub eval_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub data: DataSpec,
    /// Dense next-token training before surgery.
    pub pretrain: PretrainSpec,
    pub train: TrainSpec,
    /// Train on a 50/50 mixture of normal and mode-prefixed (refusal) prompts.
    #[serde(default)]
    pub mode_training: bool,
    pub policies: Vec<PolicyKind>,
    pub grid: Vec<usize>,
    pub targets: Vec<f64>,
    pub seeds: Vec<u64>,
    pub suppression: SuppressionProblem,
    #[serde(default)]
    pub probe: ProbeConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataSpec {
                tasks: vec![TaskKind::BalancedBrackets],
                levels: vec![1, 2, 3, 4, 5],
                n_train_per_level: 4000,
                n_val_per_level: 100,
                n_test_per_level: 200,
            },
            pretrain: PretrainSpec {
                steps: 4000,
                batch_size: 32,
                lr: 1e-3,
            },
            train: TrainSpec {
                steps: 3000,
                batch_size: 32,
                lr: 1e-3,
                variant_sampling: VariantSampling::AllIntegers,
                eval_every: 500,
            },
            mode_training: false,
            policies: PolicyKind::ALL.to_vec(),
            grid: vec![2, 4, 8, 16, 32],
            targets: frontier::DEFAULT_TARGETS.to_vec(),
            seeds: vec![0],
            suppression: SuppressionProblem::new(
                vec![TaskKind::ContainsSubstring],
                vec![TaskKind::BalancedBrackets, TaskKind::LengthComparison],
            ),
            probe: ProbeConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.model.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.data.tasks.is_empty() || self.data.levels.is_empty() {
            return bad("data.tasks and data.levels must be non-empty".into());
        }
        if self.data.levels.contains(&0) {
            return bad("difficulty levels start at 1".into());
        }
        if self.data.n_train_per_level == 0
            || self.data.n_val_per_level == 0
            || self.data.n_test_per_level == 0
        {
            return bad("per-level instance counts must be positive".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.grid.is_empty()
            || self.grid.windows(2).any(|w| w[0] >= w[1])
            || *self.grid.last().expect("non-empty") != self.model.nlpn_r_max
        {
            return bad(format!(
                "grid {:?} must be strictly ascending and end at nlpn_r_max {}",
                self.grid, self.model.nlpn_r_max
            ));
        }
        if self.targets.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return bad("targets must lie in [0, 1]".into());
        }
        if self.pretrain.batch_size == 0 || self.train.batch_size == 0 {
            return bad("batch sizes must be positive".into());
        }
        self.suppression
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train_config(0)
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }

    /// Replaces the seed list with a single seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = vec![seed];
        self
    }

    pub fn seed_dir(&self, seed: u64) -> PathBuf {
        self.output_dir.join(format!("seed-{seed}"))
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            r_max: self.model.nlpn_r_max,
            variant_sampling: self.train.variant_sampling,
            rank_grid: self.grid.clone(),
            seed: seed.wrapping_add(2),
            eval_every: self.train.eval_every,
        }
    }

    pub fn pretrain_config(&self, seed: u64) -> PretrainConfig {
        PretrainConfig {
            steps: self.pretrain.steps,
            batch_size: self.pretrain.batch_size,
            lr: self.pretrain.lr,
            seed: seed.wrapping_add(1),
        }
    }
}

pub const PRETRAINED: &str = "pretrained.ckpt";
pub const MODEL: &str = "model.ckpt";

fn data_file(dir: &Path, task: TaskKind, split: Split) -> PathBuf {
    dir.join("data").join(format!("{}.{}.jsonl", task.as_str(), split.as_str()))
}

fn per_level(cfg: &ExperimentConfig, split: Split) -> usize {
    match split {
        Split::Train => cfg.data.n_train_per_level,
        Split::Validation => cfg.data.n_val_per_level,
        Split::Test => cfg.data.n_test_per_level,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub task: TaskKind,
    pub split: Split,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

/// Generates every (task, split) dataset in memory.
pub fn generate(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<(TaskKind, Split, Dataset)>> {
    let mut out = Vec::new();
    for &task in &cfg.data.tasks {
        for split in Split::ALL {
            let ds = make_dataset(task, &cfg.data.levels, per_level(cfg, split), seed, split)?;
            out.push((task, split, ds));
        }
    }
    Ok(out)
}

pub fn gen_data(cfg: &ExperimentConfig, seed: u64) -> Result<Manifest> {
    let dir = cfg.seed_dir(seed);
    let mut files = Vec::new();
    for (task, split, ds) in generate(cfg, seed)? {
        let path = data_file(&dir, task, split);
        atomic_write(&path, ds.to_jsonl().as_bytes())?;
        files.push(ManifestEntry {
            file: format!("data/{}", path.file_name().expect("file").to_string_lossy()),
            task,
            split,
            count: ds.len(),
        });
    }
    let manifest = Manifest { seed, files };
    write_json(&dir.join("data/manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Datasets of a split, one per configured task.
pub fn load_split(cfg: &ExperimentConfig, seed: u64, split: Split) -> Result<Vec<(TaskKind, Vec<TaskInstance>)>> {
    let dir = cfg.seed_dir(seed);
    cfg.data
        .tasks
        .iter()
        .map(|&task| {
            let path = data_file(&dir, task, split);
            if !path.exists() {
                return Err(Error::io(
                    &path,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "dataset missing; run gen-data with the same config and seed first",
                    ),
                ));
            }
            let ds = Dataset::from_jsonl(&read_to_string(&path)?, seed)?;
            Ok((task, ds.instances))
        })
        .collect()
}

pub fn flatten(parts: &[(TaskKind, Vec<TaskInstance>)]) -> Vec<TaskInstance> {
    parts.iter().flat_map(|(_, v)| v.iter().cloned()).collect()
}

fn write_resolved(cfg: &ExperimentConfig, seed: u64) -> Result<()> {
    write_json(&cfg.seed_dir(seed).join("config.json"), &cfg.clone().with_seed(seed))
}

pub fn load_model(cfg: &ExperimentConfig, seed: u64, name: &str) -> Result<Model> {
    let model = checkpoint::load(&cfg.seed_dir(seed).join(name))?;
    if model.config().vocab_size != cfg.model.vocab_size
        || model.config().d_model != cfg.model.d_model
        || model.config().n_layers != cfg.model.n_layers
        || model.r_max() != cfg.model.nlpn_r_max && model.is_surgered()
    {
        return Err(Error::Checkpoint(format!(
            "{name} was trained with a different model config"
        )));
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub pretrain_final_loss: Option<f64>,
    pub grid: Vec<usize>,
    pub final_val_accuracy: Vec<f64>,
}

/// The two-stage training pipeline on in-memory data. Returns the dense
/// pretrained model, the nested multi-privilege model and the history.
pub fn train_models(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &[TaskInstance],
    validation: &[TaskInstance],
) -> Result<(Model, Model, trainer::History, Vec<f64>)> {
    let mixture = if cfg.mode_training {
        probe::mode_mixture(train)?
    } else {
        Mixture::single(Example::many(train, PromptMode::Normal))?
    };
    let mut model = Model::build(cfg.model.clone(), seed)?;
    let losses = trainer::pretrain(&mut model, &mixture, &cfg.pretrain_config(seed))?;
    let pretrained = model.clone();
    model.params_mut().reset_optimizer();
    model.apply_surgery(cfg.model.nlpn_r_max, &cfg.model.nlpn_targets)?;
    let history = trainer::train(&mut model, &mixture, validation, &cfg.train_config(seed))?;
    Ok((pretrained, model, history, losses))
}

pub fn cmd_train(cfg: &ExperimentConfig, seed: u64) -> Result<TrainSummary> {
    let dir = cfg.seed_dir(seed);
    let train = flatten(&load_split(cfg, seed, Split::Train)?);
    let val = flatten(&load_split(cfg, seed, Split::Validation)?);
    let (pretrained, mut model, history, losses) = train_models(cfg, seed, &train, &val)?;

    let loss_rows: Vec<(usize, f64)> = losses.iter().enumerate().map(|(i, &l)| (i + 1, l)).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).map_err(trainer::csv_err)?;
    for (s, l) in &loss_rows {
        w.write_record([s.to_string(), l.to_string()]).map_err(trainer::csv_err)?;
    }
    atomic_write(
        &dir.join("pretrain_loss.csv"),
        &w.into_inner().map_err(|e| Error::Format(e.to_string()))?,
    )?;
    atomic_write(&dir.join("history.csv"), history.to_csv()?.as_bytes())?;
    checkpoint::save(&dir.join(PRETRAINED), &pretrained)?;
    checkpoint::save(&dir.join(MODEL), &model)?;

    let mut final_val_accuracy = Vec::with_capacity(cfg.grid.len());
    for &g in &cfg.grid {
        final_val_accuracy.push(trainer::accuracy(&mut model, &val, &ControlVector::global(g))?);
    }
    let summary = TrainSummary {
        pretrain_final_loss: losses.last().copied(),
        grid: cfg.grid.clone(),
        final_val_accuracy,
    };
    write_json(&dir.join("train_summary.json"), &summary)?;
    write_resolved(cfg, seed)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontierSummary {
    pub records: Vec<frontier::FrontierRecord>,
    pub pareto: Vec<frontier::FrontierRecord>,
    pub pooled_accuracy: Vec<f64>,
    pub difficulty_drops: Vec<(u32, f64)>,
}

/// Frontier, Pareto set, savings and degradation surface for a trained model.
pub fn run_frontier(
    model: &mut Model,
    cfg: &ExperimentConfig,
    validation: &[TaskInstance],
    test: &[TaskInstance],
) -> Result<(FrontierSummary, frontier::Frontier, DegradationSurface)> {
    let val_table = PredictionTable::build(model, validation, &cfg.grid)?;
    let test_table = PredictionTable::build(model, test, &cfg.grid)?;
    let built = frontier::frontier_from_tables(&val_table, &test_table, test, &cfg.policies, &cfg.targets, &cfg.grid)?;
    let surface = DegradationSurface::from_table(&test_table, test)?;
    model.apply_control(&ControlVector::global(model.r_max()))?;
    let summary = FrontierSummary {
        pareto: pareto_filter(&built.records),
        records: built.records.clone(),
        pooled_accuracy: surface.pooled(),
        difficulty_drops: surface.difficulties.iter().copied().zip(surface.drops()).collect(),
    };
    Ok((summary, built, surface))
}

pub fn cmd_frontier(cfg: &ExperimentConfig, seed: u64) -> Result<FrontierSummary> {
    let dir = cfg.seed_dir(seed);
    let mut model = load_model(cfg, seed, MODEL)?;
    let val = flatten(&load_split(cfg, seed, Split::Validation)?);
    let test = flatten(&load_split(cfg, seed, Split::Test)?);
    let (summary, built, surface) = run_frontier(&mut model, cfg, &val, &test)?;
    atomic_write(&dir.join("frontier.csv"), write_csv(&built.records)?.as_bytes())?;
    atomic_write(&dir.join("pareto.csv"), write_csv(&summary.pareto)?.as_bytes())?;
    if cfg.policies.contains(&PolicyKind::FullPrivilege) {
        atomic_write(
            &dir.join("savings.csv"),
            write_csv(&relative_savings(&built.records)?)?.as_bytes(),
        )?;
    }
    atomic_write(&dir.join("surface.csv"), surface.to_csv()?.as_bytes())?;
    atomic_write(
        &dir.join("requests.csv"),
        crate::deployment::requests_to_csv(&built.requests)?.as_bytes(),
    )?;
    write_json(&dir.join("frontier_summary.json"), &summary)?;
    write_resolved(cfg, seed)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRow {
    pub block: usize,
    pub family: crate::transformer::Family,
    pub rank: usize,
    pub task: TaskKind,
    pub instance_id: usize,
    pub baseline_correct: bool,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub cells: usize,
    /// Significant cells per grid rank, ascending.
    pub significant_by_rank: Vec<(usize, usize)>,
}

/// Sweep every nested coordinate over the grid on each task, then BH-mask.
pub fn run_sensitivity(
    model: &mut Model,
    cfg: &ExperimentConfig,
    tasks: &[(TaskKind, Vec<TaskInstance>)],
) -> Result<(Vec<SweepCell>, Vec<OutcomeRow>)> {
    let coords = model.nested_coordinates();
    let r_max = model.r_max();
    let (mut cells, outcomes) = single_module_sweep(model, &coords, &cfg.grid, tasks, r_max)?;
    sensitivity::mask(&mut cells, &cfg.grid, 0.05);
    model.apply_control(&ControlVector::global(r_max))?;
    let mut rows = Vec::new();
    for (cell, now) in cells.iter().zip(&outcomes.intervened) {
        let base = &outcomes
            .baseline
            .iter()
            .find(|(t, _)| *t == cell.task)
            .expect("every cell task has a baseline")
            .1;
        for (i, (&b, &c)) in base.iter().zip(now).enumerate() {
            rows.push(OutcomeRow {
                block: cell.coordinate.block,
                family: cell.coordinate.family,
                rank: cell.rank,
                task: cell.task,
                instance_id: i,
                baseline_correct: b,
                correct: c,
            });
        }
    }
    Ok((cells, rows))
}

pub fn cmd_sensitivity(cfg: &ExperimentConfig, seed: u64) -> Result<SensitivitySummary> {
    let dir = cfg.seed_dir(seed);
    let mut model = load_model(cfg, seed, MODEL)?;
    let tasks = load_split(cfg, seed, Split::Test)?;
    let (cells, rows) = run_sensitivity(&mut model, cfg, &tasks)?;
    atomic_write(&dir.join("sensitivity.csv"), sensitivity::cells_to_csv(&cells)?.as_bytes())?;
    atomic_write(&dir.join("sweep_outcomes.csv"), write_csv(&rows)?.as_bytes())?;
    let summary = SensitivitySummary {
        cells: cells.len(),
        significant_by_rank: cfg
            .grid
            .iter()
            .map(|&g| (g, sensitivity::significant_count(&cells, g)))
            .collect(),
    };
    write_json(&dir.join("sensitivity_summary.json"), &summary)?;
    write_resolved(cfg, seed)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuppressionSummary {
    pub shortlist: Vec<(crate::transformer::ModuleCoordinate, usize)>,
    pub shortlist_empty: bool,
    pub best: suppressor::ScoredConfiguration,
    pub evaluator_calls: usize,
    pub test_baseline: suppressor::Accuracies,
    pub test_accuracies: suppressor::Accuracies,
    /// Baseline minus intervened test accuracy per task.
    pub test_drops: suppressor::Accuracies,
}

fn select_tasks(
    all: &[(TaskKind, Vec<TaskInstance>)],
    problem: &SuppressionProblem,
) -> Result<Vec<(TaskKind, Vec<TaskInstance>)>> {
    problem
        .tasks()
        .into_iter()
        .map(|t| {
            all.iter()
                .find(|(k, _)| *k == t)
                .cloned()
                .ok_or_else(|| Error::Config(format!("suppression task {t} is not in data.tasks")))
        })
        .collect()
}

/// Sweep, shortlist, search and refine on validation; report drops on test.
pub fn run_suppression(
    model: &mut Model,
    cfg: &ExperimentConfig,
    validation: &[(TaskKind, Vec<TaskInstance>)],
    test: &[(TaskKind, Vec<TaskInstance>)],
) -> Result<(SuppressionSummary, Vec<suppressor::LogEntry>, ControlVector)> {
    let problem = &cfg.suppression;
    problem.validate()?;
    let val = select_tasks(validation, problem)?;
    let test = select_tasks(test, problem)?;
    let r_max = model.r_max();
    let coords = model.nested_coordinates();
    let (mut cells, _) = single_module_sweep(model, &coords, &cfg.grid, &val, r_max)?;
    sensitivity::mask(&mut cells, &cfg.grid, 0.05);
    let short = suppressor::shortlist(&cells, problem);

    let (best, calls, log) = {
        let mut memo = Memo::new(ModelEvaluator {
            enforcer: &mut *model,
            datasets: &val,
            r_max,
        });
        let searched = beam_search(problem, &short.pairs, &mut memo)?;
        let best = if searched.configuration.is_empty() {
            searched
        } else {
            refine(&searched, problem, &mut memo, r_max)?
        };
        (best, memo.calls(), memo.log)
    };

    let mut test_eval = ModelEvaluator {
        enforcer: &mut *model,
        datasets: &test,
        r_max,
    };
    let test_baseline = test_eval.accuracies(&suppressor::Configuration::default())?;
    let test_accuracies = test_eval.accuracies(&best.configuration)?;
    model.apply_control(&ControlVector::global(r_max))?;
    let test_drops = test_baseline
        .iter()
        .map(|(t, b)| (*t, b - test_accuracies[t]))
        .collect();
    let control = best.configuration.to_control(r_max);
    Ok((
        SuppressionSummary {
            shortlist: short.pairs,
            shortlist_empty: short.empty,
            best,
            evaluator_calls: calls,
            test_baseline,
            test_accuracies,
            test_drops,
        },
        log,
        control,
    ))
}

pub fn cmd_suppress(cfg: &ExperimentConfig, seed: u64) -> Result<SuppressionSummary> {
    let dir = cfg.seed_dir(seed);
    let mut model = load_model(cfg, seed, MODEL)?;
    let val = load_split(cfg, seed, Split::Validation)?;
    let test = load_split(cfg, seed, Split::Test)?;
    let (summary, log, control) = run_suppression(&mut model, cfg, &val, &test)?;
    atomic_write(&dir.join("suppression_log.jsonl"), log_to_jsonl(&log)?.as_bytes())?;
    write_json(&dir.join("suppression_control.json"), &control)?;
    write_json(&dir.join("suppression_summary.json"), &summary)?;
    write_resolved(cfg, seed)?;
    Ok(summary)
}

pub fn cmd_probe(cfg: &ExperimentConfig, seed: u64) -> Result<probe::CapacityCurve> {
    let dir = cfg.seed_dir(seed);
    let mut model = load_model(cfg, seed, MODEL)?;
    let val = flatten(&load_split(cfg, seed, Split::Validation)?);
    let test = flatten(&load_split(cfg, seed, Split::Test)?);
    let (curve, audits) = capacity_curve(&mut model, &val, &test, &cfg.grid, &cfg.probe, seed)?;
    atomic_write(&dir.join("capacity_curve.csv"), curve.to_csv()?.as_bytes())?;
    let mut jsonl = String::new();
    for a in &audits {
        jsonl.push_str(&serde_json::to_string(a).map_err(|e| Error::Format(e.to_string()))?);
        jsonl.push('\n');
    }
    atomic_write(&dir.join("probe_audit.jsonl"), jsonl.as_bytes())?;
    write_json(&dir.join("probe_summary.json"), &curve)?;
    write_resolved(cfg, seed)?;
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdRow {
    pub rank: usize,
    pub svd_loss: f64,
    pub nlpn_loss: f64,
}

/// Held-out answer loss per grid rank: SVD truncation of the dense model versus the trained nested model.
pub fn svd_compare(
    pretrained: &Model,
    trained: &mut Model,
    grid: &[usize],
    test: &[TaskInstance],
) -> Result<Vec<SvdRow>> {
    let mut svd = pretrained.clone();
    if !svd.is_surgered() {
        let targets = trained.config().nlpn_targets.clone();
        svd.apply_surgery(trained.r_max(), &targets)?;
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &g in grid {
        svd.apply_control(&ControlVector::global(g))?;
        trained.apply_control(&ControlVector::global(g))?;
        rows.push(SvdRow {
            rank: g,
            svd_loss: svd.answer_loss(test, PromptMode::Normal)?,
            nlpn_loss: trained.answer_loss(test, PromptMode::Normal)?,
        });
    }
    trained.apply_control(&ControlVector::global(trained.r_max()))?;
    Ok(rows)
}

pub fn cmd_svd_compare(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<SvdRow>> {
    let dir = cfg.seed_dir(seed);
    let pretrained = load_model(cfg, seed, PRETRAINED)?;
    let mut trained = load_model(cfg, seed, MODEL)?;
    let test = flatten(&load_split(cfg, seed, Split::Test)?);
    let rows = svd_compare(&pretrained, &mut trained, &cfg.grid, &test)?;
    atomic_write(&dir.join("svd_compare.csv"), write_csv(&rows)?.as_bytes())?;
    write_json(&dir.join("svd_summary.json"), &rows)?;
    write_resolved(cfg, seed)?;
    Ok(rows)
}
