//! Multi-privilege training: every step trains the anchor rank and one sampled
//! variant rank, combined with learned uncertainty weights.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{AdamConfig, Graph, ParamId, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::taskgen::TaskInstance;
use crate::transformer::{Batch, ControlVector, Model, PromptMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantSampling {
    AllIntegers,
    Grid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub r_max: usize,
    pub variant_sampling: VariantSampling,
    /// Sampling support in grid mode and the ranks reported at evaluation steps.
    pub rank_grid: Vec<usize>,
    pub seed: u64,
    /// Evaluate per-rank validation accuracy every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            lr: 1e-3,
            r_max: 32,
            variant_sampling: VariantSampling::AllIntegers,
            rank_grid: vec![2, 4, 8, 16, 32],
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Argument(format!("invalid learning rate {}", self.lr)));
        }
        if self.r_max == 0 {
            return Err(Error::Argument("r_max must be positive".into()));
        }
        if let Some(&g) = self.rank_grid.iter().find(|&&g| g > self.r_max) {
            return Err(Error::Argument(format!("grid rank {g} exceeds r_max {}", self.r_max)));
        }
        if self.variant_sampling == VariantSampling::Grid
            && !self.rank_grid.iter().any(|&g| g < self.r_max)
        {
            return Err(Error::Argument("grid sampling needs a rank below r_max".into()));
        }
        Ok(())
    }
}

/// Draws the variant privilege for one step; never returns the anchor.
pub fn sample_variant(rng: &mut impl Rng, config: &TrainConfig) -> usize {
    match config.variant_sampling {
        VariantSampling::AllIntegers => rng.gen_range(0..config.r_max),
        VariantSampling::Grid => {
            let support: Vec<usize> = config
                .rank_grid
                .iter()
                .copied()
                .filter(|&g| g < config.r_max)
                .collect();
            *support.choose(rng).expect("validated non-empty")
        }
    }
}

/// `(exp(-s_a)·L_a + s_a) + (exp(-s_v)·L_v + s_v)`.
pub fn total_loss(l_anchor: f64, l_variant: f64, s_anchor: f64, s_variant: f64) -> f64 {
    ((-s_anchor).exp() * l_anchor + s_anchor) + ((-s_variant).exp() * l_variant + s_variant)
}

/// One learned log-variance `s_g` per privilege `0..=r_max`, stored as `log_var.{g}`.
#[derive(Debug, Clone)]
pub struct LogVariances {
    ids: Vec<ParamId>,
}

impl LogVariances {
    /// Registers zero-initialized entries, or reattaches existing ones.
    pub fn ensure(store: &mut ParameterStore, r_max: usize) -> Result<Self> {
        let mut ids = Vec::with_capacity(r_max + 1);
        for g in 0..=r_max {
            let name = format!("log_var.{g}");
            let id = if store.contains(&name) {
                store.id(&name)?
            } else {
                store.insert(name, Tensor::zeros(vec![1, 1]))?
            };
            ids.push(id);
        }
        Ok(Self { ids })
    }

    pub fn id(&self, g: usize) -> Result<ParamId> {
        self.ids
            .get(g)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no log-variance for privilege {g}")))
    }

    pub fn value(&self, store: &ParameterStore, g: usize) -> Result<f64> {
        Ok(store.get(self.id(g)?).data()[0])
    }

    pub fn r_max(&self) -> usize {
        self.ids.len() - 1
    }
}

/// A tokenized training example with its next-token target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub target: usize,
}

impl Example {
    pub fn from_instance(inst: &TaskInstance, mode: PromptMode) -> Self {
        Self {
            tokens: mode.encode(inst),
            target: mode.target(inst),
        }
    }

    pub fn many(instances: &[TaskInstance], mode: PromptMode) -> Vec<Self> {
        instances.iter().map(|i| Self::from_instance(i, mode)).collect()
    }
}

/// Batches drawn evenly across pools: slot `i` of a batch comes from pool `i mod n`.
#[derive(Debug, Clone)]
pub struct Mixture {
    pools: Vec<Vec<Example>>,
}

impl Mixture {
    pub fn new(pools: Vec<Vec<Example>>) -> Result<Self> {
        if pools.is_empty() || pools.iter().any(Vec::is_empty) {
            return Err(Error::Argument("every training pool must be non-empty".into()));
        }
        Ok(Self { pools })
    }

    pub fn single(examples: Vec<Example>) -> Result<Self> {
        Self::new(vec![examples])
    }

    pub fn num_pools(&self) -> usize {
        self.pools.len()
    }

    /// Returns `(pool, example)` pairs sampled with replacement.
    pub fn draw(&self, rng: &mut impl Rng, batch_size: usize) -> Vec<(usize, &Example)> {
        (0..batch_size)
            .map(|i| {
                let p = i % self.pools.len();
                let pool = &self.pools[p];
                (p, &pool[rng.gen_range(0..pool.len())])
            })
            .collect()
    }
}

/// Recorded losses of one multi-privilege step.
pub struct LossVars {
    pub anchor: Var,
    pub variant: Var,
    pub total: Var,
}

/// Records both privilege passes and the combined loss on `g`.
pub fn record_loss(
    g: &mut Graph,
    model: &Model,
    log_vars: &LogVariances,
    batch: &[&Example],
    r_max: usize,
    variant: usize,
) -> Result<LossVars> {
    let seqs: Vec<&[usize]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let targets: Vec<usize> = batch.iter().map(|e| e.target).collect();
    let packed = Batch::new(&seqs, model.config())?;

    let anchor_fwd = model.record(g, &packed, Some(&ControlVector::global(r_max)))?;
    let anchor = g.cross_entropy(anchor_fwd.logits, &targets)?;
    let variant_fwd = model.record(g, &packed, Some(&ControlVector::global(variant)))?;
    let variant_ce = g.cross_entropy(variant_fwd.logits, &targets)?;

    let s_anchor = g.param(log_vars.id(r_max)?)?;
    let s_variant = g.param(log_vars.id(variant)?)?;
    let t_anchor = g.uncertainty_term(anchor, s_anchor)?;
    let t_variant = g.uncertainty_term(variant_ce, s_variant)?;
    let total = g.add(t_anchor, t_variant)?;
    Ok(LossVars {
        anchor,
        variant: variant_ce,
        total,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub sampled_g: usize,
    pub loss_anchor: f64,
    pub loss_variant: f64,
    pub loss_total: f64,
    /// Log-variances after the update.
    pub s_anchor: f64,
    pub s_g: f64,
}

/// Mutable state carried across steps.
pub struct TrainState {
    pub rng: ChaCha8Rng,
    pub log_vars: LogVariances,
    pub adam: AdamConfig,
}

impl TrainState {
    pub fn new(model: &mut Model, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if !model.is_surgered() {
            return Err(Error::State("multi-privilege training needs a surgered model".into()));
        }
        if model.r_max() != config.r_max {
            return Err(Error::Argument(format!(
                "train r_max {} but model r_max {}",
                config.r_max,
                model.r_max()
            )));
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            log_vars: LogVariances::ensure(model.params_mut(), config.r_max)?,
            adam: AdamConfig::with_lr(config.lr),
        })
    }
}

pub fn train_step(
    model: &mut Model,
    batch: &[&Example],
    state: &mut TrainState,
    config: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::Argument("empty training batch".into()));
    }
    let g = sample_variant(&mut state.rng, config);
    let (grads, la, lv, lt) = {
        let mut graph = Graph::new(model.params());
        let losses = record_loss(&mut graph, model, &state.log_vars, batch, config.r_max, g)?;
        let vals = (
            graph.scalar(losses.anchor),
            graph.scalar(losses.variant),
            graph.scalar(losses.total),
        );
        (graph.backward(losses.total)?, vals.0, vals.1, vals.2)
    };
    let params = model.params_mut();
    params.accumulate(&grads)?;
    params.adam_step(&state.adam)?;
    Ok(StepMetrics {
        sampled_g: g,
        loss_anchor: la,
        loss_variant: lv,
        loss_total: lt,
        s_anchor: state.log_vars.value(model.params(), config.r_max)?,
        s_g: state.log_vars.value(model.params(), g)?,
    })
}

/// Accuracy of the restricted True/False readout under `control`.
pub fn accuracy(model: &mut Model, instances: &[TaskInstance], control: &ControlVector) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    model.apply_control(control)?;
    let preds = model.predict_batch(instances, PromptMode::Normal)?;
    let correct = preds
        .iter()
        .zip(instances)
        .filter(|(p, i)| p.label == i.label)
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub metrics: StepMetrics,
    /// Validation accuracy per entry of `History::eval_ranks`, at evaluation steps.
    pub val_acc: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub eval_ranks: Vec<usize>,
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = [
            "step",
            "sampled_g",
            "loss_anchor",
            "loss_variant",
            "loss_total",
            "s_anchor",
            "s_g",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        header.extend(self.eval_ranks.iter().map(|g| format!("val_acc_r{g}")));
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let m = &row.metrics;
            let mut rec = vec![
                row.step.to_string(),
                m.sampled_g.to_string(),
                m.loss_anchor.to_string(),
                m.loss_variant.to_string(),
                m.loss_total.to_string(),
                m.s_anchor.to_string(),
                m.s_g.to_string(),
            ];
            match &row.val_acc {
                Some(v) => rec.extend(v.iter().map(f64::to_string)),
                None => rec.extend(self.eval_ranks.iter().map(|_| String::new())),
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
    }

    /// `(step, accuracies)` for every evaluation step.
    pub fn evaluations(&self) -> Vec<(usize, &[f64])> {
        self.rows
            .iter()
            .filter_map(|r| r.val_acc.as_deref().map(|v| (r.step, v)))
            .collect()
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Runs the full multi-privilege loop. The model is left at full privilege.
pub fn train(
    model: &mut Model,
    data: &Mixture,
    validation: &[TaskInstance],
    config: &TrainConfig,
) -> Result<History> {
    let mut state = TrainState::new(model, config)?;
    let mut history = History {
        eval_ranks: config.rank_grid.clone(),
        rows: Vec::with_capacity(config.steps),
    };
    for step in 1..=config.steps {
        let batch: Vec<&Example> = data
            .draw(&mut state.rng, config.batch_size)
            .into_iter()
            .map(|(_, e)| e)
            .collect();
        let metrics = train_step(model, &batch, &mut state, config)?;
        let eval_now = config.eval_every > 0
            && !validation.is_empty()
            && (step % config.eval_every == 0 || step == config.steps);
        let val_acc = if eval_now {
            let mut accs = Vec::with_capacity(config.rank_grid.len());
            for &g in &config.rank_grid {
                accs.push(accuracy(model, validation, &ControlVector::global(g))?);
            }
            Some(accs)
        } else {
            None
        };
        history.rows.push(HistoryRow {
            step,
            metrics,
            val_acc,
        });
    }
    if model.is_surgered() {
        model.apply_control(&ControlVector::global(config.r_max))?;
    }
    Ok(history)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Plain next-token training at the model's current (active) ranks. Returns per-step losses.
pub fn pretrain(model: &mut Model, data: &Mixture, config: &PretrainConfig) -> Result<Vec<f64>> {
    if config.batch_size == 0 {
        return Err(Error::Argument("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let adam = AdamConfig::with_lr(config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let batch = data.draw(&mut rng, config.batch_size);
        let seqs: Vec<&[usize]> = batch.iter().map(|(_, e)| e.tokens.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|(_, e)| e.target).collect();
        let packed = Batch::new(&seqs, model.config())?;
        let (grads, loss) = {
            let mut g = Graph::new(model.params());
            let fwd = model.record(&mut g, &packed, None)?;
            let l = g.cross_entropy(fwd.logits, &targets)?;
            let v = g.scalar(l);
            (g.backward(l)?, v)
        };
        model.params_mut().accumulate(&grads)?;
        model.params_mut().adam_step(&adam)?;
        losses.push(loss);
    }
    Ok(losses)
}
