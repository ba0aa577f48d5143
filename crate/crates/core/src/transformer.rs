//! Small pre-LN decoder-only transformer with optional nested projections.
//!
//! Any of the six projection families can be swapped for a [`NestedLinear`]
//! by [`Model::apply_surgery`]. A [`ControlVector`] then assigns every nested
//! layer its rank for a request; tensor shapes never change.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, ParamId, ParameterStore, Segment, Tensor, Var};
use crate::error::{Error, Result};
use crate::nested::{FactorizationReport, NestedLinear};
use crate::taskgen::{self, TaskInstance, FALSE_TOKEN, MODE_TOKEN, REFUSE_TOKEN, TRUE_TOKEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    MlpUp,
    MlpDown,
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::MlpUp,
        Family::MlpDown,
        Family::AttnQ,
        Family::AttnK,
        Family::AttnV,
        Family::AttnO,
    ];
    pub const MLP: [Family; 2] = [Family::MlpUp, Family::MlpDown];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::MlpUp => "mlp_up",
            Family::MlpDown => "mlp_down",
            Family::AttnQ => "attn_q",
            Family::AttnK => "attn_k",
            Family::AttnV => "attn_v",
            Family::AttnO => "attn_o",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown projection family {s:?}")))
    }
}

/// `(block, family)` address of a projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleCoordinate {
    pub block: usize,
    pub family: Family,
}

impl ModuleCoordinate {
    pub fn new(block: usize, family: Family) -> Self {
        Self { block, family }
    }
}

impl fmt::Display for ModuleCoordinate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.block, self.family)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub nlpn_r_max: usize,
    pub nlpn_targets: Vec<Family>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: taskgen::vocab_size(),
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            d_mlp: 128,
            max_seq_len: 96,
            nlpn_r_max: 32,
            nlpn_targets: Family::MLP.to_vec(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.d_mlp == 0 {
            return bad("model dimensions must be positive".into());
        }
        if self.max_seq_len == 0 {
            return bad("max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.nlpn_r_max == 0 || self.nlpn_r_max > self.d_model.min(self.d_mlp) {
            return bad(format!(
                "nlpn_r_max {} outside 1..={}",
                self.nlpn_r_max,
                self.d_model.min(self.d_mlp)
            ));
        }
        Ok(())
    }

    fn dims(&self, family: Family) -> (usize, usize) {
        match family {
            Family::MlpUp => (self.d_mlp, self.d_model),
            Family::MlpDown => (self.d_model, self.d_mlp),
            _ => (self.d_model, self.d_model),
        }
    }
}

/// Per-request privilege: a default rank plus per-coordinate overrides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ControlRepr", try_from = "ControlRepr")]
pub struct ControlVector {
    pub default_rank: usize,
    pub overrides: BTreeMap<ModuleCoordinate, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlRepr {
    default_rank: usize,
    overrides: Vec<OverrideRepr>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OverrideRepr {
    block: usize,
    family: Family,
    rank: usize,
}

impl From<ControlVector> for ControlRepr {
    fn from(c: ControlVector) -> Self {
        ControlRepr {
            default_rank: c.default_rank,
            overrides: c
                .overrides
                .into_iter()
                .map(|(k, rank)| OverrideRepr {
                    block: k.block,
                    family: k.family,
                    rank,
                })
                .collect(),
        }
    }
}

impl TryFrom<ControlRepr> for ControlVector {
    type Error = String;

    fn try_from(r: ControlRepr) -> std::result::Result<Self, String> {
        let mut overrides = BTreeMap::new();
        for o in r.overrides {
            let key = ModuleCoordinate::new(o.block, o.family);
            if overrides.insert(key, o.rank).is_some() {
                return Err(format!("duplicate override for {key}"));
            }
        }
        Ok(ControlVector {
            default_rank: r.default_rank,
            overrides,
        })
    }
}

impl ControlVector {
    /// Every nested layer at rank `g`.
    pub fn global(g: usize) -> Self {
        Self {
            default_rank: g,
            overrides: BTreeMap::new(),
        }
    }

    pub fn with_override(mut self, coord: ModuleCoordinate, rank: usize) -> Self {
        self.overrides.insert(coord, rank);
        self
    }

    pub fn rank_for(&self, coord: &ModuleCoordinate) -> usize {
        self.overrides.get(coord).copied().unwrap_or(self.default_rank)
    }
}

#[derive(Debug, Clone)]
enum Weight {
    Dense(ParamId),
    Nested(NestedLinear),
}

#[derive(Debug, Clone)]
struct Projection {
    weight: Weight,
    bias: ParamId,
    d_in: usize,
    d_out: usize,
}

impl Projection {
    fn forward(&self, g: &mut Graph, x: Var, rank: Option<usize>) -> Result<Var> {
        let y = match &self.weight {
            Weight::Dense(w) => {
                let w = g.param(*w)?;
                g.linear(x, w, self.d_out, self.d_in)?
            }
            Weight::Nested(layer) => match rank {
                Some(r) => layer.forward(g, x, r)?,
                None => layer.forward_active(g, x)?,
            },
        };
        let b = g.param(self.bias)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    proj: BTreeMap<Family, Projection>,
}

/// Packed token sequences for one forward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    ids: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
    last: Vec<usize>,
}

impl Batch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], config: &ModelConfig) -> Result<Self> {
        let mut b = Batch {
            ids: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            last: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() || s.len() > config.max_seq_len {
                return Err(Error::Argument(format!(
                    "sequence length {} outside 1..={}",
                    s.len(),
                    config.max_seq_len
                )));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= config.vocab_size) {
                return Err(Error::Index(format!(
                    "token {t} with vocabulary {}",
                    config.vocab_size
                )));
            }
            let start = b.ids.len();
            b.ids.extend_from_slice(s);
            b.positions.extend(0..s.len());
            b.segments.push(Segment { start, len: s.len() });
            b.last.push(start + s.len() - 1);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Handles to the recorded outputs of one forward pass.
pub struct Forward {
    /// `batch × vocab` logits at each sequence's final position.
    pub logits: Var,
    /// Residual stream after each block at each sequence's final position (`batch × d_model`).
    pub block_outputs: Vec<Var>,
}

/// Two-way answer distribution read at the final position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: bool,
    /// `[P(True), P(False)]` under the softmax restricted to the two answer tokens.
    pub dist: [f64; 2],
}

impl Prediction {
    /// Ties resolve to the lower token id (`True`).
    pub fn from_logits(logit_true: f64, logit_false: f64) -> Self {
        let m = logit_true.max(logit_false);
        let (et, ef) = ((logit_true - m).exp(), (logit_false - m).exp());
        let p_true = et / (et + ef);
        let dist = [p_true, 1.0 - p_true];
        let label = if TRUE_TOKEN < FALSE_TOKEN {
            logit_true >= logit_false
        } else {
            logit_true > logit_false
        };
        Self { label, dist }
    }
}

/// How a task prompt is presented to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptMode {
    Normal,
    /// Prefixed with the mode token; the trained response is the refusal token.
    Suppressed,
}

impl PromptMode {
    pub fn encode(self, inst: &TaskInstance) -> Vec<usize> {
        let mut ids = Vec::with_capacity(inst.prompt.len() + 1);
        if self == PromptMode::Suppressed {
            ids.push(MODE_TOKEN);
        }
        ids.extend(inst.tokens());
        ids
    }

    pub fn target(self, inst: &TaskInstance) -> usize {
        match self {
            PromptMode::Normal => taskgen::answer_token(inst.label),
            PromptMode::Suppressed => REFUSE_TOKEN,
        }
    }
}

const EVAL_CHUNK: usize = 64;

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParameterStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    unembed: (ParamId, ParamId),
    surgered: bool,
}

fn block_prefix(b: usize, fam: Family) -> String {
    format!("blocks.{b}.{fam}")
}

impl Model {
    /// Deterministic initialization from `seed`; all projections start dense.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParameterStore::new();
        let mut normal = |rows: usize, cols: usize, std: f64| -> Tensor {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| dist.sample(&mut rng)).collect(),
            )
            .expect("shape matches")
        };
        let d = config.d_model;
        let ones = |n: usize| Tensor::new(vec![1, n], vec![1.0; n]).expect("row");
        let zeros = |n: usize| Tensor::zeros(vec![1, n]);

        store.insert("tok_emb", normal(config.vocab_size, d, 0.1))?;
        store.insert("pos_emb", normal(config.max_seq_len, d, 0.1))?;
        let residual_scale = 1.0 / (2.0 * config.n_layers as f64).sqrt();
        for b in 0..config.n_layers {
            store.insert(format!("blocks.{b}.ln1.gain"), ones(d))?;
            store.insert(format!("blocks.{b}.ln1.bias"), zeros(d))?;
            store.insert(format!("blocks.{b}.ln2.gain"), ones(d))?;
            store.insert(format!("blocks.{b}.ln2.bias"), zeros(d))?;
            for fam in Family::ALL {
                let (d_out, d_in) = config.dims(fam);
                let mut std = 1.0 / (d_in as f64).sqrt();
                if matches!(fam, Family::AttnO | Family::MlpDown) {
                    std *= residual_scale;
                }
                let p = block_prefix(b, fam);
                store.insert(format!("{p}.weight"), normal(d_out, d_in, std))?;
                store.insert(format!("{p}.bias"), zeros(d_out))?;
            }
        }
        store.insert("ln_f.gain", ones(d))?;
        store.insert("ln_f.bias", zeros(d))?;
        store.insert(
            "unembed.weight",
            normal(config.vocab_size, d, 1.0 / (d as f64).sqrt()),
        )?;
        store.insert("unembed.bias", zeros(config.vocab_size))?;
        Self::from_store(config, store)
    }

    /// Rebinds a model to a parameter store, detecting nested projections by name.
    pub fn from_store(config: ModelConfig, params: ParameterStore) -> Result<Self> {
        config.validate()?;
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((params.id(a)?, params.id(b)?))
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        let mut surgered = false;
        for b in 0..config.n_layers {
            let mut proj = BTreeMap::new();
            for fam in Family::ALL {
                let p = block_prefix(b, fam);
                let (d_out, d_in) = config.dims(fam);
                let weight = if params.contains(&format!("{p}.weight")) {
                    Weight::Dense(params.id(&format!("{p}.weight"))?)
                } else {
                    let layer = NestedLinear::attach(&params, &format!("{p}.nlpn"))?;
                    if (layer.d_out(), layer.d_in()) != (d_out, d_in) {
                        return Err(Error::Dimension(format!("nested factors of {p}")));
                    }
                    surgered = true;
                    Weight::Nested(layer)
                };
                proj.insert(
                    fam,
                    Projection {
                        weight,
                        bias: params.id(&format!("{p}.bias"))?,
                        d_in,
                        d_out,
                    },
                );
            }
            blocks.push(Block {
                ln1: pair(
                    &format!("blocks.{b}.ln1.gain"),
                    &format!("blocks.{b}.ln1.bias"),
                )?,
                ln2: pair(
                    &format!("blocks.{b}.ln2.gain"),
                    &format!("blocks.{b}.ln2.bias"),
                )?,
                proj,
            });
        }
        Ok(Self {
            tok_emb: params.id("tok_emb")?,
            pos_emb: params.id("pos_emb")?,
            ln_f: pair("ln_f.gain", "ln_f.bias")?,
            unembed: pair("unembed.weight", "unembed.bias")?,
            config,
            params,
            blocks,
            surgered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    pub fn is_surgered(&self) -> bool {
        self.surgered
    }

    /// Largest rank of any nested layer (the anchor privilege).
    pub fn r_max(&self) -> usize {
        self.nested_layers()
            .map(|(_, l)| l.r_max())
            .max()
            .unwrap_or(0)
    }

    pub fn nested_layers(&self) -> impl Iterator<Item = (ModuleCoordinate, &NestedLinear)> {
        self.blocks.iter().enumerate().flat_map(|(b, block)| {
            block.proj.iter().filter_map(move |(fam, p)| match &p.weight {
                Weight::Nested(l) => Some((ModuleCoordinate::new(b, *fam), l)),
                Weight::Dense(_) => None,
            })
        })
    }

    pub fn nested_coordinates(&self) -> Vec<ModuleCoordinate> {
        self.nested_layers().map(|(c, _)| c).collect()
    }

    pub fn nested(&self, coord: &ModuleCoordinate) -> Option<&NestedLinear> {
        match &self.blocks.get(coord.block)?.proj.get(&coord.family)?.weight {
            Weight::Nested(l) => Some(l),
            Weight::Dense(_) => None,
        }
    }

    /// Dense weight of a projection, or the effective weight at the active rank.
    pub fn projection_weight(&self, coord: &ModuleCoordinate) -> Result<Tensor> {
        let p = self
            .blocks
            .get(coord.block)
            .and_then(|b| b.proj.get(&coord.family))
            .ok_or_else(|| Error::Argument(format!("no projection at {coord}")))?;
        match &p.weight {
            Weight::Dense(w) => Ok(self.params.get(*w).clone()),
            Weight::Nested(l) => l.effective_weight(&self.params, l.active_rank()),
        }
    }

    /// Replaces every targeted projection by an SVD-initialized nested layer.
    pub fn apply_surgery(
        &mut self,
        r_max: usize,
        targets: &[Family],
    ) -> Result<Vec<(ModuleCoordinate, FactorizationReport)>> {
        if targets.is_empty() {
            return Err(Error::Argument("no surgery targets".into()));
        }
        for fam in targets {
            let (d_out, d_in) = self.config.dims(*fam);
            if r_max == 0 || r_max > d_out.min(d_in) {
                return Err(Error::Argument(format!(
                    "r_max {r_max} outside 1..={} for {fam}",
                    d_out.min(d_in)
                )));
            }
            for b in 0..self.config.n_layers {
                if self.nested(&ModuleCoordinate::new(b, *fam)).is_some() {
                    return Err(Error::State(format!("{b}.{fam} already nested")));
                }
            }
        }
        let mut reports = Vec::new();
        for b in 0..self.config.n_layers {
            for fam in targets {
                let p = block_prefix(b, *fam);
                let w = self.params.remove(&format!("{p}.weight"))?;
                let (layer, report) =
                    NestedLinear::from_weight(&mut self.params, &format!("{p}.nlpn"), &w, r_max)?;
                self.blocks[b]
                    .proj
                    .get_mut(fam)
                    .expect("all families present")
                    .weight = Weight::Nested(layer);
                reports.push((ModuleCoordinate::new(b, *fam), report));
            }
        }
        let mut all: Vec<Family> = self.config.nlpn_targets.clone();
        if !self.surgered {
            all.clear();
        }
        all.extend_from_slice(targets);
        all.sort();
        all.dedup();
        self.config.nlpn_targets = all;
        self.config.nlpn_r_max = r_max;
        self.surgered = true;
        Ok(reports)
    }

    fn check_control(&self, control: &ControlVector) -> Result<()> {
        for (coord, &rank) in &control.overrides {
            let layer = self.nested(coord).ok_or_else(|| {
                Error::Argument(format!("control addresses {coord}, which is not a nested layer"))
            })?;
            if rank > layer.r_max() {
                return Err(Error::Argument(format!(
                    "rank {rank} for {coord} exceeds r_max {}",
                    layer.r_max()
                )));
            }
        }
        for (_, layer) in self.nested_layers() {
            if control.default_rank > layer.r_max() {
                return Err(Error::Argument(format!(
                    "default rank {} exceeds r_max {}",
                    control.default_rank,
                    layer.r_max()
                )));
            }
        }
        Ok(())
    }

    /// Sets every nested layer's active rank from `control`.
    pub fn apply_control(&mut self, control: &ControlVector) -> Result<()> {
        self.check_control(control)?;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for (fam, p) in block.proj.iter_mut() {
                if let Weight::Nested(layer) = &mut p.weight {
                    layer.set_privilege(control.rank_for(&ModuleCoordinate::new(b, *fam)))?;
                }
            }
        }
        Ok(())
    }

    /// Active rank of every nested layer.
    pub fn current_control(&self) -> ControlVector {
        let r = self.r_max();
        let mut c = ControlVector::global(r);
        for (coord, layer) in self.nested_layers() {
            if layer.active_rank() != r {
                c.overrides.insert(coord, layer.active_rank());
            }
        }
        c
    }

    /// Records a forward pass on `g` (which must borrow this model's parameters).
    ///
    /// With `control = None` nested layers run at their active ranks.
    pub fn record(&self, g: &mut Graph, batch: &Batch, control: Option<&ControlVector>) -> Result<Forward> {
        if let Some(c) = control {
            self.check_control(c)?;
        }
        let te = g.param(self.tok_emb)?;
        let pe = g.param(self.pos_emb)?;
        let tok = g.embedding(te, &batch.ids)?;
        let pos = g.embedding(pe, &batch.positions)?;
        let mut x = g.add(tok, pos)?;
        let mut block_outputs = Vec::with_capacity(self.blocks.len());
        for (b, block) in self.blocks.iter().enumerate() {
            let rank = |fam: Family| control.map(|c| c.rank_for(&ModuleCoordinate::new(b, fam)));
            let (gn, bs) = (g.param(block.ln1.0)?, g.param(block.ln1.1)?);
            let h = g.layer_norm(x, gn, bs)?;
            let q = block.proj[&Family::AttnQ].forward(g, h, rank(Family::AttnQ))?;
            let k = block.proj[&Family::AttnK].forward(g, h, rank(Family::AttnK))?;
            let v = block.proj[&Family::AttnV].forward(g, h, rank(Family::AttnV))?;
            let att = g.causal_attention(q, k, v, &batch.segments, self.config.n_heads)?;
            let o = block.proj[&Family::AttnO].forward(g, att, rank(Family::AttnO))?;
            x = g.add(x, o)?;
            let (gn, bs) = (g.param(block.ln2.0)?, g.param(block.ln2.1)?);
            let h = g.layer_norm(x, gn, bs)?;
            let u = block.proj[&Family::MlpUp].forward(g, h, rank(Family::MlpUp))?;
            let u = g.gelu(u);
            let dn = block.proj[&Family::MlpDown].forward(g, u, rank(Family::MlpDown))?;
            x = g.add(x, dn)?;
            block_outputs.push(g.select_rows(x, &batch.last)?);
        }
        let last = *block_outputs.last().expect("at least one block");
        let (gn, bs) = (g.param(self.ln_f.0)?, g.param(self.ln_f.1)?);
        let h = g.layer_norm(last, gn, bs)?;
        let w = g.param(self.unembed.0)?;
        let logits = g.linear(h, w, self.config.vocab_size, self.config.d_model)?;
        let ub = g.param(self.unembed.1)?;
        let logits = g.add_row(logits, ub)?;
        Ok(Forward {
            logits,
            block_outputs,
        })
    }

    /// Final-position logits at the active ranks (`batch × vocab`).
    ///
    /// Chunks run on the rayon pool; results are independent of the thread count.
    pub fn logits<S: AsRef<[usize]> + Sync>(&self, seqs: &[S]) -> Result<Tensor> {
        let parts = seqs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let batch = Batch::new(chunk, &self.config)?;
                let mut g = Graph::new(&self.params);
                let out = self.record(&mut g, &batch, None)?;
                Ok(g.value(out.logits).to_vec())
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Tensor::new(vec![seqs.len(), self.config.vocab_size], parts.concat())
    }

    /// Sets `control`, then returns final-position logits.
    pub fn forward_with_control<S: AsRef<[usize]> + Sync>(
        &mut self,
        seqs: &[S],
        control: &ControlVector,
    ) -> Result<Tensor> {
        self.apply_control(control)?;
        self.logits(seqs)
    }

    /// Restricted True/False readout at the active ranks.
    pub fn predict_batch(&self, instances: &[TaskInstance], mode: PromptMode) -> Result<Vec<Prediction>> {
        let seqs: Vec<Vec<usize>> = instances.iter().map(|i| mode.encode(i)).collect();
        let logits = self.logits(&seqs)?;
        let v = self.config.vocab_size;
        Ok(logits
            .data()
            .chunks_exact(v)
            .map(|row| Prediction::from_logits(row[TRUE_TOKEN], row[FALSE_TOKEN]))
            .collect())
    }

    pub fn predict_label(&mut self, instance: &TaskInstance, control: &ControlVector) -> Result<Prediction> {
        self.apply_control(control)?;
        Ok(self.predict_batch(std::slice::from_ref(instance), PromptMode::Normal)?[0])
    }

    /// Post-block residual at the final position of each sequence, at the active ranks.
    pub fn block_activations<S: AsRef<[usize]> + Sync>(&self, seqs: &[S], site: usize) -> Result<Vec<Vec<f64>>> {
        if site >= self.config.n_layers {
            return Err(Error::Argument(format!(
                "site {site} outside 0..{}",
                self.config.n_layers
            )));
        }
        let d = self.config.d_model;
        let parts = seqs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let batch = Batch::new(chunk, &self.config)?;
                let mut g = Graph::new(&self.params);
                let fwd = self.record(&mut g, &batch, None)?;
                Ok(g.value(fwd.block_outputs[site])
                    .chunks_exact(d)
                    .map(<[f64]>::to_vec)
                    .collect::<Vec<_>>())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(parts.concat())
    }

    pub fn collect_activations(
        &mut self,
        tokens: &[usize],
        control: &ControlVector,
        site: usize,
    ) -> Result<Vec<f64>> {
        self.apply_control(control)?;
        Ok(self.block_activations(&[tokens], site)?.remove(0))
    }

    /// Mean cross entropy of the answer token over `instances` at the active ranks.
    pub fn answer_loss(&self, instances: &[TaskInstance], mode: PromptMode) -> Result<f64> {
        if instances.is_empty() {
            return Err(Error::Argument("empty evaluation set".into()));
        }
        let mut total = 0.0;
        for chunk in instances.chunks(EVAL_CHUNK) {
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|i| mode.encode(i)).collect();
            let targets: Vec<usize> = chunk.iter().map(|i| mode.target(i)).collect();
            let batch = Batch::new(&seqs, &self.config)?;
            let mut g = Graph::new(&self.params);
            let fwd = self.record(&mut g, &batch, None)?;
            let l = g.cross_entropy(fwd.logits, &targets)?;
            total += g.scalar(l) * chunk.len() as f64;
        }
        Ok(total / instances.len() as f64)
    }
}
