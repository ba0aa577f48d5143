//! Checks shared by the integration tests and the acceptance harness.
//!
//! Every check returns `Ok(detail)` on success and `Err(detail)` otherwise.
//! Reference values come from code in this file, never from the library.

#![allow(dead_code)]

use std::collections::{BTreeMap, HashSet};

use lpm_core::deployment::{
    run_policy, select_static_rank, PolicyConfig, PolicyKind, PredictionTable,
};
use lpm_core::engine::{Graph, ParameterStore, Tensor};
use lpm_core::frontier::{pareto_filter, FrontierRecord};
use lpm_core::nested::{truncated_svd, NestedLinear};
use lpm_core::sensitivity::bh_fdr;
use lpm_core::suppressor::{
    beam_search, objective, rank_order, refine, Accuracies, Configuration, Evaluator, Memo,
    ScoredConfiguration, SuppressionProblem,
};
use lpm_core::taskgen::{
    gen_balanced_brackets, gen_contains_substring, gen_length_comparison, make_dataset, Split,
    TaskInstance, TaskKind,
};
use lpm_core::trainer::{record_loss, total_loss, Example, LogVariances};
use lpm_core::transformer::{
    Batch, ControlVector, Family, Model, ModelConfig, ModuleCoordinate, PromptMode,
};
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub type Check = Result<String, String>;

pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

pub fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn to_dmatrix(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = t.dims2().unwrap();
    DMatrix::from_row_slice(r, c, t.data())
}

// ---------------------------------------------------------------- nesting

pub fn check_nesting(layers: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_nest = 0.0f64;
    let mut worst_rank = 0.0f64;
    let mut worst_full = 0.0f64;
    for l in 0..layers {
        let d_in = rng.gen_range(2..=24);
        let d_out = rng.gen_range(2..=24);
        let r_max = rng.gen_range(1..=d_in.min(d_out));
        let a = gaussian(r_max, d_in, &mut rng);
        let b = gaussian(d_out, r_max, &mut rng);
        let mut store = ParameterStore::new();
        let layer = NestedLinear::register(&mut store, &format!("l{l}"), a.clone(), b.clone()).map_err(e)?;
        let ws: Vec<DMatrix<f64>> = (1..=r_max)
            .map(|g| to_dmatrix(&layer.effective_weight(&store, g).unwrap()))
            .collect();
        for g in 1..=r_max {
            let w = &ws[g - 1];
            let svd = w.clone().svd(false, false);
            let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
            s.sort_by(|x, y| y.total_cmp(x));
            if g < s.len() {
                worst_rank = worst_rank.max(s[g] / s[0]);
            }
            if g < r_max {
                // Project W(g) onto the column space of W(g+1).
                let basis = column_basis(&ws[g], 1e-9);
                if basis.len() != g + 1 {
                    return Err(format!("W({}) has column rank {}", g + 1, basis.len()));
                }
                let mut resid = 0.0;
                for col in w.column_iter() {
                    let mut v: Vec<f64> = col.iter().copied().collect();
                    for q in &basis {
                        let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                        v.iter_mut().zip(q).for_each(|(x, y)| *x -= dot * y);
                    }
                    resid += v.iter().map(|x| x * x).sum::<f64>();
                }
                worst_nest = worst_nest.max(resid.sqrt() / w.norm());
            }
        }
        let full = to_dmatrix(&b) * to_dmatrix(&a);
        let diff = (&ws[r_max - 1] - &full).abs().max();
        worst_full = worst_full.max(diff);
    }
    ensure(worst_nest < 1e-8, || format!("nesting residual {worst_nest:e}"))?;
    ensure(worst_rank < 1e-8, || format!("sigma ratio {worst_rank:e}"))?;
    ensure(worst_full < 1e-10, || format!("full-rank mismatch {worst_full:e}"))?;
    Ok(format!(
        "{layers} layers: residual {worst_nest:.1e}, sigma ratio {worst_rank:.1e}, W(r_max) err {worst_full:.1e}"
    ))
}

/// Orthonormal basis of the column space by twice-applied Gram-Schmidt.
fn column_basis(m: &DMatrix<f64>, rel_tol: f64) -> Vec<Vec<f64>> {
    let scale = m.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in m.column_iter() {
        let mut v: Vec<f64> = col.iter().copied().collect();
        for _ in 0..2 {
            for q in &basis {
                let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(x, y)| *x -= dot * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > rel_tol * scale {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

// ---------------------------------------------------------------- spectral oracle

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(m: &[Vec<f64>]) -> Vec<f64> {
    let rows = m.len();
    let cols = m[0].len();
    // Work on columns of the taller orientation.
    let (n, mut colv): (usize, Vec<Vec<f64>>) = if rows >= cols {
        (cols, (0..cols).map(|j| (0..rows).map(|i| m[i][j]).collect()).collect())
    } else {
        (rows, m.to_vec())
    };
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha: f64 = colv[p].iter().map(|x| x * x).sum();
                let beta: f64 = colv[q].iter().map(|x| x * x).sum();
                let gamma: f64 = colv[p].iter().zip(&colv[q]).map(|(x, y)| x * y).sum();
                if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let sign = if zeta >= 0.0 { 1.0 } else { -1.0 };
                let t = sign / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = colv.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = colv.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

pub fn check_svd_optimality(matrices: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for k in 0..matrices {
        let (rows, cols) = if k == 0 { (128, 96) } else { (rng.gen_range(2..=128), rng.gen_range(2..=96)) };
        let w = gaussian(rows, cols, &mut rng);
        let r = rng.gen_range(1..rows.min(cols));
        let (a, b, report) = truncated_svd(&w, r).map_err(e)?;
        let m: Vec<Vec<f64>> = (0..rows).map(|i| w.data()[i * cols..(i + 1) * cols].to_vec()).collect();
        let s = jacobi_singular_values(&m);
        let oracle = s[r..].iter().map(|x| x * x).sum::<f64>().sqrt();
        let direct = (to_dmatrix(&w) - to_dmatrix(&b) * to_dmatrix(&a)).norm();
        for got in [report.frobenius_error, direct] {
            worst = worst.max((got - oracle).abs() / oracle);
        }
    }
    ensure(worst < 1e-6, || format!("worst relative gap {worst:e}"))?;
    Ok(format!("{matrices} matrices: worst relative gap {worst:.1e}"))
}

// ---------------------------------------------------------------- gradients

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_mlp: 24,
        max_seq_len: 48,
        nlpn_r_max: 8,
        ..ModelConfig::default()
    }
}

pub fn tiny_model(seed: u64, targets: &[Family]) -> Model {
    let mut m = Model::build(tiny_config(), seed).unwrap();
    m.apply_surgery(8, targets).unwrap();
    m
}

pub fn sample_instances(n: usize, seed: u64) -> Vec<TaskInstance> {
    let mut out = Vec::new();
    for task in TaskKind::ALL {
        out.extend(make_dataset(task, &[1, 2], n.div_ceil(6), seed, Split::Test).unwrap().instances);
    }
    out.truncate(n);
    out
}

fn loss_at(model: &Model, lv: &LogVariances, batch: &[&Example], variant: usize) -> f64 {
    let mut g = Graph::new(model.params());
    let l = record_loss(&mut g, model, lv, batch, 8, variant).unwrap();
    g.scalar(l.total)
}

pub fn check_gradients(seed: u64) -> Check {
    let mut model = tiny_model(seed, &Family::ALL);
    let lv = LogVariances::ensure(model.params_mut(), 8).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    for g in 0..=8 {
        let id = lv.id(g).map_err(e)?;
        model.params_mut().get_mut(id).data_mut()[0] = rng.gen_range(-0.5..0.5);
    }
    let instances = sample_instances(6, seed);
    let examples = Example::many(&instances, PromptMode::Normal);
    let batch: Vec<&Example> = examples.iter().collect();
    let variant = 3;

    let grads = {
        let mut g = Graph::new(model.params());
        let l = record_loss(&mut g, &model, &lv, &batch, 8, variant).map_err(e)?;
        g.backward(l.total).map_err(e)?
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    let mut groups = 0;
    let ids = model.params().ids();
    for id in ids {
        let name = model.params().name(id).to_string();
        let numel = model.params().get(id).numel();
        let analytic = grads.get(id).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; numel]);
        if name.starts_with("log_var.") && name != "log_var.8" && name != format!("log_var.{variant}") {
            // Unused log-variances get no gradient at all.
            ensure(analytic.iter().all(|&x| x == 0.0), || format!("{name} has gradient"))?;
            continue;
        }
        groups += 1;
        let mut picks: Vec<usize> = (0..numel).collect();
        picks.shuffle(&mut rng);
        picks.truncate(5);
        for k in picks {
            let orig = model.params().get(id).data()[k];
            model.params_mut().get_mut(id).data_mut()[k] = orig + h;
            let up = loss_at(&model, &lv, &batch, variant);
            model.params_mut().get_mut(id).data_mut()[k] = orig - h;
            let down = loss_at(&model, &lv, &batch, variant);
            model.params_mut().get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel >= 1e-4 {
                return Err(format!("{name}[{k}]: analytic {a:e} numeric {numeric:e} rel {rel:e}"));
            }
            worst = worst.max(rel);
        }
    }

    // Variant pass alone: rows of A and columns of B beyond g get nothing.
    let variant_grads = {
        let mut g = Graph::new(model.params());
        let seqs: Vec<&[usize]> = batch.iter().map(|x| x.tokens.as_slice()).collect();
        let targets: Vec<usize> = batch.iter().map(|x| x.target).collect();
        let packed = Batch::new(&seqs, model.config()).map_err(e)?;
        let fwd = model.record(&mut g, &packed, Some(&ControlVector::global(variant))).map_err(e)?;
        let ce = g.cross_entropy(fwd.logits, &targets).map_err(e)?;
        g.backward(ce).map_err(e)?
    };
    let mut factors = 0;
    for (coord, layer) in model.nested_layers() {
        let ga = variant_grads.get(layer.a()).ok_or_else(|| format!("{coord}: no grad for A"))?;
        let gb = variant_grads.get(layer.b()).ok_or_else(|| format!("{coord}: no grad for B"))?;
        let (d_in, d_out, r) = (layer.d_in(), layer.d_out(), layer.r_max());
        for i in 0..r {
            let row_zero = ga[i * d_in..(i + 1) * d_in].iter().all(|&x| x == 0.0);
            let col_zero = (0..d_out).all(|o| gb[o * r + i] == 0.0);
            ensure(row_zero == (i >= variant) && col_zero == (i >= variant), || {
                format!("{coord}: factor slot {i} zero-grad pattern wrong for g={variant}")
            })?;
        }
        factors += 1;
    }
    Ok(format!(
        "{groups} parameter tensors, worst rel err {worst:.1e}; {factors} factor pairs zero beyond g"
    ))
}

// ---------------------------------------------------------------- reversibility

pub fn check_reversibility(seed: u64) -> Check {
    let mut model = tiny_model(seed, &Family::ALL);
    let instances = sample_instances(24, seed);
    let seqs: Vec<Vec<usize>> = instances.iter().map(|i| PromptMode::Normal.encode(i)).collect();
    let sum0 = model.params().checksum();
    let full = model.logits(&seqs).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let coords = model.nested_coordinates();
    let mut at_rank: BTreeMap<usize, Tensor> = BTreeMap::new();
    for trial in 0..20 {
        let g = rng.gen_range(1..=8);
        let mut control = ControlVector::global(g);
        if trial % 2 == 1 {
            let c = coords[rng.gen_range(0..coords.len())];
            control = control.with_override(c, rng.gen_range(1..=8));
        } else {
            let now = {
                model.apply_control(&control).map_err(e)?;
                model.logits(&seqs).map_err(e)?
            };
            if let Some(prev) = at_rank.get(&g) {
                ensure(prev.data() == now.data(), || format!("rank {g} not reproducible"))?;
            }
            at_rank.insert(g, now);
        }
        model.apply_control(&control).map_err(e)?;
        model.logits(&seqs).map_err(e)?;
        model.apply_control(&ControlVector::global(8)).map_err(e)?;
        let back = model.logits(&seqs).map_err(e)?;
        ensure(back.data() == full.data(), || format!("restore after {control:?} changed outputs"))?;
        ensure(model.params().checksum() == sum0, || "checksum changed by privilege change".into())?;
    }
    for kind in PolicyKind::ALL {
        let mut policy = PolicyConfig::new(kind, vec![2, 4, 8], 0.5);
        policy.calibrated_rank = Some(4);
        policy.uncertainty_threshold = Some(0.2);
        for inst in &instances {
            run_policy(&mut model, inst, &policy).map_err(e)?;
        }
        ensure(model.params().checksum() == sum0, || format!("{} changed parameters", kind.as_str()))?;
    }
    PredictionTable::build(&mut model, &instances, &[2, 4, 8]).map_err(e)?;
    model.apply_control(&ControlVector::global(8)).map_err(e)?;
    ensure(model.logits(&seqs).map_err(e)?.data() == full.data(), || "outputs changed after policies".into())?;
    ensure(model.params().checksum() == sum0, || "checksum changed".into())?;
    Ok("20 set/restore cycles and 5 policies: bit-exact outputs, checksum unchanged".into())
}

// ---------------------------------------------------------------- loss formula

pub fn check_loss_formula(n: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut worst_d = 0.0f64;
    for _ in 0..n {
        let la: f64 = rng.gen_range(0.0..10.0);
        let lg: f64 = rng.gen_range(0.0..10.0);
        let sa: f64 = rng.gen_range(-5.0..5.0);
        let sg: f64 = rng.gen_range(-5.0..5.0);
        let direct = (-sa).exp() * la + sa + (-sg).exp() * lg + sg;
        let got = total_loss(la, lg, sa, sg);
        worst = worst.max((got - direct).abs() / direct.abs().max(1.0));

        let h = 1e-6;
        let fd = (total_loss(la, lg, sa + h, sg) - total_loss(la, lg, sa - h, sg)) / (2.0 * h);
        let expect = -(-sa).exp() * la + 1.0;
        worst_d = worst_d.max((fd - expect).abs() / expect.abs().max(1.0));

        // Same derivative through the tape.
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let l = g.input(1, 1, vec![la]).map_err(e)?;
        let s = g.input(1, 1, vec![sa]).map_err(e)?;
        let t = g.uncertainty_term(l, s).map_err(e)?;
        ensure((g.scalar(t) - ((-sa).exp() * la + sa)).abs() <= 1e-12 * g.scalar(t).abs().max(1.0), || {
            "tape value differs".into()
        })?;
    }
    ensure(worst < 1e-12, || format!("formula gap {worst:e}"))?;
    ensure(worst_d < 1e-6, || format!("derivative gap {worst_d:e}"))?;
    Ok(format!("{n} inputs: value gap {worst:.1e}, d/ds gap {worst_d:.1e}"))
}

// ---------------------------------------------------------------- oracles

pub fn brute_static_rank(acc: &[(usize, f64)], u0: f64) -> (usize, bool) {
    let mut best: Option<usize> = None;
    for &(g, a) in acc {
        if a >= u0 && best.is_none_or(|b| g < b) {
            best = Some(g);
        }
    }
    match best {
        Some(g) => (g, false),
        None => (acc.iter().map(|x| x.0).max().unwrap(), true),
    }
}

pub fn brute_pareto(records: &[FrontierRecord]) -> Vec<FrontierRecord> {
    records
        .iter()
        .filter(|r| {
            !records.iter().any(|o| {
                o.utility >= r.utility
                    && o.avg_privilege <= r.avg_privilege
                    && (o.utility > r.utility || o.avg_privilege < r.avg_privilege)
            })
        })
        .cloned()
        .collect()
}

pub fn brute_bh(p: &[f64], q: f64) -> Vec<bool> {
    let m = p.len();
    let mut best_threshold = f64::NEG_INFINITY;
    for &pi in p {
        let rank = p.iter().filter(|&&x| x <= pi).count();
        if pi <= rank as f64 * q / m as f64 {
            best_threshold = best_threshold.max(pi);
        }
    }
    p.iter().map(|&x| x <= best_threshold).collect()
}

/// Accuracies as a fixed pseudo-random function of the configuration.
pub struct HashEvaluator {
    pub seed: u64,
    pub tasks: Vec<TaskKind>,
    pub calls: usize,
}

impl Evaluator for HashEvaluator {
    fn accuracies(&mut self, c: &Configuration) -> lpm_core::Result<Accuracies> {
        self.calls += 1;
        let mut h = self.seed;
        for (k, r) in &c.0 {
            h = h.wrapping_mul(31).wrapping_add((k.block * 7 + k.family as usize) as u64 * 131 + *r as u64);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        Ok(self
            .tasks
            .iter()
            .map(|&t| {
                let base = if c.0.is_empty() { 0.9 } else { rng.gen_range(0.3..1.0) };
                (t, (base * 100.0f64).round() / 100.0)
            })
            .collect())
    }
}

pub fn small_problem() -> SuppressionProblem {
    let mut p = SuppressionProblem::new(
        vec![TaskKind::ContainsSubstring],
        vec![TaskKind::BalancedBrackets, TaskKind::LengthComparison],
    );
    p.search.beam_width = 1000;
    p.search.depth = 10;
    p
}

fn all_configs(shortlist: &[(ModuleCoordinate, usize)]) -> Vec<Configuration> {
    let mut by_coord: BTreeMap<ModuleCoordinate, Vec<usize>> = BTreeMap::new();
    for &(c, r) in shortlist {
        by_coord.entry(c).or_default().push(r);
    }
    let mut out = vec![Configuration::default()];
    for (c, ranks) in by_coord {
        let mut next = Vec::new();
        for cfg in &out {
            next.push(cfg.clone());
            for &r in &ranks {
                next.push(cfg.with(c, r));
            }
        }
        out = next;
    }
    out
}

pub fn check_oracles(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Static-rank calibration.
    for _ in 0..1000 {
        let n = rng.gen_range(1..8);
        let mut grid: Vec<usize> = (1..=64).collect();
        grid.shuffle(&mut rng);
        let acc: Vec<(usize, f64)> = grid[..n].iter().map(|&g| (g, (rng.gen_range(0..=20) as f64) / 20.0)).collect();
        let u0 = (rng.gen_range(0..=20) as f64) / 20.0;
        let got = select_static_rank(&acc, u0);
        let want = brute_static_rank(&acc, u0);
        ensure((got.rank, got.infeasible) == want, || format!("static rank {acc:?} u0={u0}"))?;
    }

    // Pareto filter.
    for _ in 0..1000 {
        let n = rng.gen_range(1..15);
        let recs: Vec<FrontierRecord> = (0..n)
            .map(|_| FrontierRecord {
                policy: *PolicyKind::ALL.choose(&mut rng).unwrap(),
                target: 0.9,
                utility: rng.gen_range(0..6) as f64 / 5.0,
                avg_privilege: rng.gen_range(0..6) as f64,
                avg_passes: 1.0,
                infeasible: false,
                threshold: None,
                calibrated_rank: None,
            })
            .collect();
        let mut got = pareto_filter(&recs);
        let mut want = brute_pareto(&recs);
        let key = |r: &FrontierRecord| (r.avg_privilege.to_bits(), r.utility.to_bits(), r.policy);
        got.sort_by_key(key);
        want.sort_by_key(key);
        ensure(got == want, || "pareto mismatch".into())?;
    }

    // Benjamini-Hochberg.
    for _ in 0..1000 {
        let m = rng.gen_range(1..60);
        let p: Vec<f64> = (0..m)
            .map(|_| if rng.gen_bool(0.3) { rng.gen_range(0.0..0.01) } else { rng.gen::<f64>() })
            .collect();
        let q = [0.01, 0.05, 0.1][rng.gen_range(0..3)];
        ensure(bh_fdr(&p, q) == brute_bh(&p, q), || format!("bh mismatch on {p:?}"))?;
    }

    // Beam search with a huge beam equals exhaustive enumeration.
    let problem = small_problem();
    let fams = [Family::MlpUp, Family::MlpDown, Family::AttnQ];
    for trial in 0..200 {
        let n_coords = rng.gen_range(1..=3);
        let mut shortlist = Vec::new();
        for (b, fam) in fams.iter().enumerate().take(n_coords) {
            let coord = ModuleCoordinate::new(b % 2, *fam);
            for _ in 0..rng.gen_range(1..=2) {
                let r = rng.gen_range(1..=8);
                if !shortlist.contains(&(coord, r)) {
                    shortlist.push((coord, r));
                }
            }
        }
        let eval = HashEvaluator { seed: trial, tasks: problem.tasks(), calls: 0 };
        let mut memo = Memo::new(eval);
        let got = beam_search(&problem, &shortlist, &mut memo).map_err(e)?;
        let mut oracle_eval = HashEvaluator { seed: trial, tasks: problem.tasks(), calls: 0 };
        let baseline = oracle_eval.accuracies(&Configuration::default()).map_err(e)?;
        let mut best: Option<ScoredConfiguration> = None;
        for c in all_configs(&shortlist) {
            let acc = oracle_eval.accuracies(&c).map_err(e)?;
            let s = ScoredConfiguration {
                score: objective(&acc, &baseline, &problem).map_err(e)?,
                configuration: c,
                accuracies: acc,
            };
            if best.as_ref().is_none_or(|b| rank_order(&s, b).is_lt()) {
                best = Some(s);
            }
        }
        let best = best.unwrap();
        ensure(got.configuration == best.configuration && got.score == best.score, || {
            format!("beam {:?} vs exhaustive {:?}", got, best)
        })?;

        // Refinement never lowers the score.
        let refined = refine(&got, &problem, &mut memo, 8).map_err(e)?;
        ensure(refined.score >= got.score, || "refinement lowered the score".into())?;
    }

    // Hand-computed objective values.
    let problem = SuppressionProblem::new(
        vec![TaskKind::ContainsSubstring],
        vec![TaskKind::BalancedBrackets, TaskKind::LengthComparison],
    );
    let acc = |s: f64, p1: f64, p2: f64| -> Accuracies {
        [
            (TaskKind::ContainsSubstring, s),
            (TaskKind::BalancedBrackets, p1),
            (TaskKind::LengthComparison, p2),
        ]
        .into_iter()
        .collect()
    };
    let base = acc(0.95, 0.9, 0.9);
    let a = objective(&acc(0.3, 0.9, 0.9), &base, &problem).map_err(e)?;
    ensure((a - 0.30).abs() < 1e-12, || format!("objective case 1 gave {a}"))?;
    let base = acc(0.95, 0.925, 0.875);
    let b = objective(&acc(0.3, 0.875, 0.925), &base, &problem).map_err(e)?;
    ensure((b + 3.70).abs() < 1e-12, || format!("objective case 2 gave {b}"))?;
    Ok("static rank, pareto, BH: 1000 cases each; beam vs exhaustive 200 shortlists; objective 0.30 / -3.70".into())
}

// ---------------------------------------------------------------- taskgen

/// Label oracle that re-parses the prompt text.
pub fn oracle_label(task: TaskKind, prompt: &str) -> Option<bool> {
    let body = prompt.strip_suffix(" = True")?;
    match task {
        TaskKind::BalancedBrackets => {
            let mut depth: Vec<char> = Vec::new();
            for ch in body.chars() {
                match ch {
                    '(' | '[' | '{' => depth.push(ch),
                    ')' | ']' | '}' => {
                        let want = match ch {
                            ')' => '(',
                            ']' => '[',
                            _ => '{',
                        };
                        if depth.pop() != Some(want) {
                            return Some(false);
                        }
                    }
                    _ => return None,
                }
            }
            Some(depth.is_empty())
        }
        TaskKind::LengthComparison => {
            let rest = body.strip_prefix("len(")?;
            let (s1, rest) = rest.split_once(") > len(")?;
            let s2 = rest.strip_suffix(')')?;
            Some(s1.chars().count() > s2.chars().count())
        }
        TaskKind::ContainsSubstring => {
            let (hay, pat) = body.split_once(" contains '")?;
            let pat = pat.strip_suffix('\'')?;
            Some(hay.contains(pat))
        }
    }
}

pub fn check_taskgen(n_per: usize, levels: &[u32], seed: u64) -> Check {
    let mut total = 0;
    for task in TaskKind::ALL {
        let mut prompts: Vec<HashSet<String>> = Vec::new();
        for split in Split::ALL {
            // Test and validation get a tenth of the prompt space each, so keep them smaller.
            let n = if split == Split::Train { n_per } else { (n_per / 10).max(2) };
            let mut seen = HashSet::new();
            for &d in levels {
                let ds = make_dataset(task, &[d], n, seed, split).map_err(e)?;
                ensure(ds.len() == n, || format!("{task} d={d}: {} instances", ds.len()))?;
                let mut pos = 0;
                for inst in &ds.instances {
                    let want = oracle_label(task, &inst.prompt)
                        .ok_or_else(|| format!("unparseable prompt {:?}", inst.prompt))?;
                    ensure(want == inst.label, || format!("{task}: label mismatch on {:?}", inst.prompt))?;
                    ensure(inst.difficulty == d && inst.task == task, || "metadata mismatch".into())?;
                    pos += inst.label as usize;
                    seen.insert(inst.prompt.clone());
                }
                let frac = pos as f64 / n as f64;
                ensure((frac - 0.5).abs() <= 0.05, || format!("{task} d={d}: positive fraction {frac}"))?;
                if split == Split::Train {
                    // Unconditioned generators draw the label themselves.
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ d as u64);
                    let gen = |rng: &mut ChaCha8Rng| match task {
                        TaskKind::BalancedBrackets => gen_balanced_brackets(d, rng),
                        TaskKind::LengthComparison => gen_length_comparison(d, rng),
                        TaskKind::ContainsSubstring => gen_contains_substring(d, rng),
                    };
                    let mut pos = 0;
                    for _ in 0..n {
                        let inst = gen(&mut rng);
                        ensure(oracle_label(task, &inst.prompt) == Some(inst.label), || {
                            format!("{task}: label mismatch on {:?}", inst.prompt)
                        })?;
                        pos += inst.label as usize;
                    }
                    let frac = pos as f64 / n as f64;
                    ensure((frac - 0.5).abs() <= 0.05, || format!("{task} d={d}: natural positive fraction {frac}"))?;
                    total += n;
                }
                total += n;
            }
            prompts.push(seen);
        }
        for i in 0..3 {
            for j in i + 1..3 {
                ensure(prompts[i].is_disjoint(&prompts[j]), || format!("{task}: splits share prompts"))?;
            }
        }
    }
    Ok(format!("{total} instances label-checked; splits disjoint; balance within 0.05"))
}
