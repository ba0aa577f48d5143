//! Capacity-versus-masking audit. A model learns to refuse under a mode token;
//! linear probes on its final-block activations test whether the answer is
//! still linearly recoverable at each privilege.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontier::write_csv;
use crate::taskgen::{answer_token, TaskInstance, FALSE_TOKEN, REFUSE_TOKEN, TRUE_TOKEN};
use crate::trainer::{self, Example, History, Mixture, TrainConfig};
use crate::transformer::{ControlVector, Model, PromptMode};

/// Activations collected at one rank and prompt mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub rank: usize,
    pub mode: PromptMode,
}

impl ProbeDataset {
    /// Final-block residual at the answer position for each instance, at rank `g`.
    pub fn collect(model: &mut Model, instances: &[TaskInstance], rank: usize, mode: PromptMode) -> Result<Self> {
        model.apply_control(&ControlVector::global(rank))?;
        let seqs: Vec<Vec<usize>> = instances.iter().map(|i| mode.encode(i)).collect();
        let site = model.config().n_layers - 1;
        Ok(Self {
            features: model.block_activations(&seqs, site)?,
            labels: instances.iter().map(|i| i.label).collect(),
            rank,
            mode,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub max_iterations: usize,
    /// Stop when the loss changes by less than this between iterations.
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 0.5,
            max_iterations: 5000,
            tolerance: 1e-6,
        }
    }
}

/// Logistic classifier on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub iterations: usize,
    /// Single-class training data: the probe always predicts that class.
    pub degenerate: bool,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl LinearProbe {
    pub fn logit(&self, x: &[f64]) -> f64 {
        self.bias
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((x, m), s), w)| w * (x - m) / s)
                .sum::<f64>()
    }

    pub fn predict(&self, x: &[f64]) -> bool {
        self.logit(x) > 0.0
    }

    pub fn accuracy(&self, ds: &ProbeDataset) -> f64 {
        let c = ds
            .features
            .iter()
            .zip(&ds.labels)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        c as f64 / ds.labels.len().max(1) as f64
    }
}

/// Full-batch gradient descent on the mean logistic loss from a zero start.
pub fn fit_linear_probe(ds: &ProbeDataset, config: &ProbeConfig) -> Result<LinearProbe> {
    let n = ds.features.len();
    if n == 0 || n != ds.labels.len() {
        return Err(Error::Argument("probe needs matching non-empty features and labels".into()));
    }
    let d = ds.features[0].len();
    if ds.features.iter().any(|x| x.len() != d) {
        return Err(Error::Dimension("ragged probe features".into()));
    }
    let mut mean = vec![0.0; d];
    for x in &ds.features {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v / n as f64);
    }
    let mut scale = vec![0.0; d];
    for x in &ds.features {
        scale
            .iter_mut()
            .zip(x.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n as f64);
    }
    scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });

    let positives = ds.labels.iter().filter(|&&y| y).count();
    if positives == 0 || positives == n {
        return Ok(LinearProbe {
            weights: vec![0.0; d],
            bias: if positives == n { 1.0 } else { -1.0 },
            mean,
            scale,
            iterations: 0,
            degenerate: true,
        });
    }

    let z: Vec<Vec<f64>> = ds
        .features
        .iter()
        .map(|x| x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect())
        .collect();
    let y: Vec<f64> = ds.labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let loss = |w: &[f64], b: f64| -> f64 {
        z.iter()
            .zip(&y)
            .map(|(x, &t)| {
                let s = b + x.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
                softplus(s) - t * s
            })
            .sum::<f64>()
            / n as f64
    };
    let mut prev = loss(&w, b);
    let mut iterations = 0;
    while iterations < config.max_iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &t) in z.iter().zip(&y) {
            let s = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let r = (sigmoid(s) - t) / n as f64;
            gb += r;
            gw.iter_mut().zip(x).for_each(|(g, a)| *g += r * a);
        }
        w.iter_mut().zip(&gw).for_each(|(p, g)| *p -= config.lr * g);
        b -= config.lr * gb;
        iterations += 1;
        let cur = loss(&w, b);
        if (prev - cur).abs() < config.tolerance {
            break;
        }
        prev = cur;
    }
    Ok(LinearProbe {
        weights: w,
        bias: b,
        mean,
        scale,
        iterations,
        degenerate: false,
    })
}

/// Normal and mode-prefixed copies of every instance, drawn 50/50 per batch.
pub fn mode_mixture(instances: &[TaskInstance]) -> Result<Mixture> {
    Mixture::new(vec![
        Example::many(instances, PromptMode::Normal),
        Example::many(instances, PromptMode::Suppressed),
    ])
}

/// Multi-privilege training on the normal/suppressed mixture.
pub fn train_suppression_mode(
    model: &mut Model,
    instances: &[TaskInstance],
    validation: &[TaskInstance],
    config: &TrainConfig,
) -> Result<History> {
    trainer::train(model, &mode_mixture(instances)?, validation, config)
}

/// Fraction of instances whose argmax over {True, False, Refuse} is the true answer.
pub fn behavioral_accuracy(model: &Model, instances: &[TaskInstance], mode: PromptMode) -> Result<f64> {
    if instances.is_empty() {
        return Err(Error::Argument("empty evaluation set".into()));
    }
    let seqs: Vec<Vec<usize>> = instances.iter().map(|i| mode.encode(i)).collect();
    let logits = model.logits(&seqs)?;
    let v = model.config().vocab_size;
    let mut answers = [TRUE_TOKEN, FALSE_TOKEN, REFUSE_TOKEN];
    answers.sort_unstable();
    let correct = logits
        .data()
        .chunks_exact(v)
        .zip(instances)
        .filter(|(row, inst)| {
            let best = answers
                .iter()
                .copied()
                .fold(answers[0], |b, t| if row[t] > row[b] { t } else { b });
            best == answer_token(inst.label)
        })
        .count();
    Ok(correct as f64 / instances.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityRow {
    pub rank: usize,
    pub baseline_acc: f64,
    pub suppressed_behavioral_acc: f64,
    pub probe_acc: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityCurve {
    pub rows: Vec<CapacityRow>,
}

impl CapacityCurve {
    pub fn to_csv(&self) -> Result<String> {
        write_csv(&self.rows)
    }
}

/// Everything measured at one rank, kept for replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankAudit {
    pub train: ProbeDataset,
    pub test: ProbeDataset,
    pub probe: LinearProbe,
}

/// Per rank: standard-prompt accuracy, suppressed-mode behavior, and a fresh
/// probe fit on suppressed-mode activations of `probe_train`, scored on `test`.
pub fn capacity_curve(
    model: &mut Model,
    probe_train: &[TaskInstance],
    test: &[TaskInstance],
    grid: &[usize],
    probe_config: &ProbeConfig,
    seed: u64,
) -> Result<(CapacityCurve, Vec<RankAudit>)> {
    let mut rows = Vec::with_capacity(grid.len());
    let mut audits = Vec::with_capacity(grid.len());
    for &g in grid {
        model.apply_control(&ControlVector::global(g))?;
        let baseline_acc = trainer::accuracy(model, test, &ControlVector::global(g))?;
        let suppressed = behavioral_accuracy(model, test, PromptMode::Suppressed)?;
        let train = ProbeDataset::collect(model, probe_train, g, PromptMode::Suppressed)?;
        let held_out = ProbeDataset::collect(model, test, g, PromptMode::Suppressed)?;
        let probe = fit_linear_probe(&train, probe_config)?;
        rows.push(CapacityRow {
            rank: g,
            baseline_acc,
            suppressed_behavioral_acc: suppressed,
            probe_acc: probe.accuracy(&held_out),
            seed,
        });
        audits.push(RankAudit {
            train,
            test: held_out,
            probe,
        });
    }
    model.apply_control(&ControlVector::global(model.r_max()))?;
    Ok((CapacityCurve { rows }, audits))
}
