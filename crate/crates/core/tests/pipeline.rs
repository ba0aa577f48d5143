mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use common::brute_bh;
use lpm_core::checkpoint;
use lpm_core::deployment::{requests_from_csv, run_policy, PolicyConfig, PolicyKind, PredictionTable};
use lpm_core::experiment::{self, ExperimentConfig, Manifest};
use lpm_core::probe::RankAudit;
use lpm_core::sensitivity::cells_from_csv;
use lpm_core::suppressor::{shortlist, SuppressionProblem};
use lpm_core::taskgen::{Split, TaskKind};
use lpm_core::trainer::accuracy;
use lpm_core::transformer::ControlVector;
use lpm_core::Error;

fn smoke(out: &Path) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn trained(out: &Path) -> ExperimentConfig {
    let cfg = smoke(out);
    experiment::gen_data(&cfg, 0).unwrap();
    experiment::cmd_train(&cfg, 0).unwrap();
    cfg
}

/// (block, family, rank, task) as written in the sweep CSVs.
type CellKey = (usize, String, usize, String);

fn read(path: PathBuf) -> String {
    fs::read_to_string(path).unwrap()
}

#[test]
fn presets_parse_and_validate() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn gen_data_is_deterministic_and_counted() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = smoke(a.path());
    let cb = smoke(b.path());
    let m = experiment::gen_data(&ca, 0).unwrap();
    experiment::gen_data(&cb, 0).unwrap();
    let manifest: Manifest = serde_json::from_str(&read(ca.seed_dir(0).join("data/manifest.json"))).unwrap();
    assert_eq!(manifest, m);
    assert_eq!(m.files.len(), ca.data.tasks.len() * 3);
    for f in &m.files {
        let per = match f.split {
            Split::Train => ca.data.n_train_per_level,
            Split::Validation => ca.data.n_val_per_level,
            Split::Test => ca.data.n_test_per_level,
        };
        assert_eq!(f.count, per * ca.data.levels.len());
        let text_a = read(ca.seed_dir(0).join(&f.file));
        assert_eq!(text_a.lines().count(), f.count);
        assert_eq!(text_a, read(cb.seed_dir(0).join(&f.file)));
    }
}

#[test]
fn train_is_reproducible_and_checkpoint_round_trips() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = trained(a.path());
    let cb = trained(b.path());
    for name in ["history.csv", "pretrain_loss.csv", "model.ckpt", "pretrained.ckpt", "config.json"] {
        let fa = fs::read(ca.seed_dir(0).join(name)).unwrap();
        let fb = fs::read(cb.seed_dir(0).join(name)).unwrap();
        if name == "config.json" {
            // Output directories differ; everything else matches.
            let mut va: serde_json::Value = serde_json::from_slice(&fa).unwrap();
            let mut vb: serde_json::Value = serde_json::from_slice(&fb).unwrap();
            va["output_dir"] = serde_json::Value::Null;
            vb["output_dir"] = serde_json::Value::Null;
            assert_eq!(va, vb);
        } else {
            assert_eq!(fa, fb, "{name} differs between identical runs");
        }
    }
    // No temporary files are left behind.
    for entry in fs::read_dir(ca.seed_dir(0)).unwrap() {
        let name = entry.unwrap().file_name().to_string_lossy().to_string();
        assert!(!name.ends_with(".tmp"), "{name}");
    }

    let summary: experiment::TrainSummary = serde_json::from_str(&read(ca.seed_dir(0).join("train_summary.json"))).unwrap();
    let mut model = checkpoint::load(&ca.seed_dir(0).join("model.ckpt")).unwrap();
    let val: Vec<_> = experiment::load_split(&ca, 0, Split::Validation)
        .unwrap()
        .into_iter()
        .flat_map(|(_, v)| v)
        .collect();
    for (g, want) in ca.grid.iter().zip(&summary.final_val_accuracy) {
        assert_eq!(accuracy(&mut model, &val, &ControlVector::global(*g)).unwrap(), *want);
    }
}

#[test]
fn missing_data_and_bad_checkpoints_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke(dir.path());
    let err = experiment::cmd_train(&cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Io { .. }), "{err}");
    assert!(err.to_string().contains("gen-data"));

    experiment::gen_data(&cfg, 0).unwrap();
    fs::write(cfg.seed_dir(0).join("model.ckpt"), b"LPLM\x07\0\0\0").unwrap();
    let err = experiment::cmd_frontier(&cfg, 0).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn downstream_commands_replay_from_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let sd = cfg.seed_dir(0);

    // Frontier: one record per (policy, target); requests replay the aggregates.
    let f = experiment::cmd_frontier(&cfg, 0).unwrap();
    assert_eq!(f.records.len(), cfg.policies.len() * cfg.targets.len());
    let reqs = requests_from_csv(&read(sd.join("requests.csv"))).unwrap();
    for r in &f.records {
        let rows: Vec<_> = reqs
            .iter()
            .filter(|q| q.policy == r.policy.as_str() && q.target == r.target)
            .collect();
        let n = rows.len() as f64;
        let util = rows.iter().filter(|q| q.correct).count() as f64 / n;
        let priv_ = rows.iter().map(|q| q.privilege_used as f64).sum::<f64>() / n;
        let passes = rows.iter().map(|q| q.passes as f64).sum::<f64>() / n;
        assert!((util - r.utility).abs() < 1e-12);
        assert!((priv_ - r.avg_privilege).abs() < 1e-12);
        assert!((passes - r.avg_passes).abs() < 1e-12);
        match r.policy {
            PolicyKind::MinRank => assert_eq!(r.avg_privilege, cfg.grid[0] as f64),
            PolicyKind::FullPrivilege => assert_eq!(r.avg_privilege, *cfg.grid.last().unwrap() as f64),
            PolicyKind::ProgressiveJump => assert!(r.avg_passes <= 2.0),
            _ => {}
        }
    }

    // Sensitivity: p-values and the BH mask recompute from per-instance outcomes.
    experiment::cmd_sensitivity(&cfg, 0).unwrap();
    let cells = cells_from_csv(&read(sd.join("sensitivity.csv"))).unwrap();
    let mut outcomes: BTreeMap<CellKey, (Vec<bool>, Vec<bool>)> = BTreeMap::new();
    let sweep = read(sd.join("sweep_outcomes.csv"));
    let mut rdr = csv::Reader::from_reader(sweep.as_bytes());
    for row in rdr.deserialize::<BTreeMap<String, String>>() {
        let row = row.unwrap();
        let key = (
            row["block"].parse().unwrap(),
            row["family"].clone(),
            row["rank"].parse().unwrap(),
            row["task"].clone(),
        );
        let e = outcomes.entry(key).or_default();
        e.0.push(row["baseline_correct"] == "true");
        e.1.push(row["correct"] == "true");
    }
    let mut ps = Vec::new();
    for c in &cells {
        let (base, now) = &outcomes[&(c.coordinate.block, c.coordinate.family.as_str().to_string(), c.rank, c.task.as_str().to_string())];
        let acc = |v: &[bool]| v.iter().filter(|&&x| x).count() as f64 / v.len() as f64;
        assert!((acc(now) - acc(base) - c.delta_accuracy).abs() < 1e-12);
        let b = base.iter().zip(now).filter(|(x, y)| **x && !**y).count();
        let d = base.iter().zip(now).filter(|(x, y)| !**x && **y).count();
        let p = exact_mcnemar(b, d);
        assert!((p - c.p_value).abs() < 1e-9, "{p} vs {}", c.p_value);
        ps.push(c.p_value);
    }
    let mask = brute_bh(&ps, 0.05);
    assert!(cells.iter().zip(&mask).all(|(c, &m)| c.significant == m));

    // Suppression shortlist reproduces from the sensitivity table by a plain filter.
    let problem = SuppressionProblem::new(vec![TaskKind::ContainsSubstring], vec![TaskKind::BalancedBrackets, TaskKind::LengthComparison]);
    let short = shortlist(&cells, &problem);
    for (coord, rank) in &short.pairs {
        let mean = |tasks: &[TaskKind]| {
            let v: Vec<f64> = cells
                .iter()
                .filter(|c| c.coordinate == *coord && c.rank == *rank && tasks.contains(&c.task))
                .map(|c| -c.delta_accuracy)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        assert!(mean(&problem.suppress) >= problem.shortlist.min_suppression - 1e-9);
        assert!(mean(&problem.preserve) <= problem.shortlist.max_collateral + 1e-9);
    }

    // Suppression: every logged configuration, and the exported control parses back.
    let s = experiment::cmd_suppress(&cfg, 0).unwrap();
    let log = read(sd.join("suppression_log.jsonl"));
    assert_eq!(log.lines().count(), s.evaluator_calls);
    let control: ControlVector = serde_json::from_str(&read(sd.join("suppression_control.json"))).unwrap();
    assert_eq!(control, s.best.configuration.to_control(cfg.model.nlpn_r_max));

    // Probe: each held-out accuracy recomputes from the persisted activations.
    let curve = experiment::cmd_probe(&cfg, 0).unwrap();
    assert_eq!(curve.rows.len(), cfg.grid.len());
    let audits: Vec<RankAudit> = read(sd.join("probe_audit.jsonl"))
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for (row, audit) in curve.rows.iter().zip(&audits) {
        let p = &audit.probe;
        let correct = audit
            .test
            .features
            .iter()
            .zip(&audit.test.labels)
            .filter(|(x, &y)| {
                let z: f64 = x
                    .iter()
                    .zip(&p.mean)
                    .zip(&p.scale)
                    .zip(&p.weights)
                    .map(|(((v, m), s), w)| w * (v - m) / s)
                    .sum::<f64>()
                    + p.bias;
                (z > 0.0) == y
            })
            .count();
        assert!((correct as f64 / audit.test.labels.len() as f64 - row.probe_acc).abs() < 1e-12);
        for v in [row.baseline_acc, row.suppressed_behavioral_acc, row.probe_acc] {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    let rows = experiment::cmd_svd_compare(&cfg, 0).unwrap();
    assert_eq!(rows.len(), cfg.grid.len());
    assert!(rows.iter().all(|r| r.svd_loss.is_finite() && r.nlpn_loss.is_finite()));
}

/// Two-sided exact sign test by direct summation.
fn exact_mcnemar(b: usize, c: usize) -> f64 {
    let n = b + c;
    if n == 0 {
        return 1.0;
    }
    let k = b.min(c);
    let mut tail = 0.0;
    for i in 0..=k {
        let mut ln = 0.0;
        for j in 0..i {
            ln += ((n - j) as f64).ln() - ((j + 1) as f64).ln();
        }
        tail += (ln - n as f64 * std::f64::consts::LN_2).exp();
    }
    (2.0 * tail).min(1.0)
}

#[test]
fn policies_served_live_match_the_table_replay() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = trained(dir.path());
    let mut model = checkpoint::load(&cfg.seed_dir(0).join("model.ckpt")).unwrap();
    let test: Vec<_> = experiment::load_split(&cfg, 0, Split::Test)
        .unwrap()
        .into_iter()
        .flat_map(|(_, v)| v)
        .collect();
    let table = PredictionTable::build(&mut model, &test, &cfg.grid).unwrap();
    for kind in PolicyKind::ALL {
        for tau in [0.02, 0.2, 0.4] {
            let mut p = PolicyConfig::new(kind, cfg.grid.clone(), 0.9);
            p.calibrated_rank = Some(cfg.grid[1]);
            p.uncertainty_threshold = Some(tau);
            let replay = table.simulate(&p).unwrap();
            let live: Vec<_> = test.iter().map(|i| run_policy(&mut model, i, &p).unwrap()).collect();
            assert_eq!(replay, live, "{} tau={tau}", kind.as_str());
        }
    }
}
