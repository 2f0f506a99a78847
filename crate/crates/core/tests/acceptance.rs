//! Acceptance suite: one PASS/FAIL/SKIP line per criterion.
//!
//! The protocol-reproduction criterion needs user-supplied drug-response
//! data: point `DRFCP_CCLE_CONFIG` at an experiment config whose data
//! source is that dataset. Without it the criterion is reported as SKIP.

use std::collections::BTreeMap;
use std::time::Instant;

use drf_conformal::conformal::{calibrate, icp_from_inputs, IcpInputs, QuantileMode};
use drf_conformal::dataset::{synth_heteroskedastic, SplitSpec};
use drf_conformal::drf::{
    drf_nll, leaf_reach_probabilities, split_probabilities, tree_variance, update_leaves, DrfConfig, Forest,
    LeafDistribution, NllObjective, RoutingCache, Tree,
};
use drf_conformal::experiment::{
    aggregate, cmd_evaluate, cmd_train, run_experiment, AggregateRow, AnnSettings,
    ExperimentConfig, Method,
};
use drf_conformal::metrics::EvaluationReport;
use drf_conformal::nn::{grad_check, Activation, ForwardMode, MlpConfig, MlpModel, Mse, TrainSchedule};
use ndarray::{Array1, Array2};
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

const SEEDS: u64 = 20;
/// Central-difference step. Smaller steps are dominated by roundoff on
/// coordinates whose true gradient is zero (biases ahead of batchnorm).
const FD_STEP: f64 = 1e-4;
const LEVELS: [f64; 3] = [0.7, 0.8, 0.9];

struct Outcome {
    id: u32,
    name: &'static str,
    status: Status,
    detail: String,
}

#[derive(PartialEq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

fn outcome(id: u32, name: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome {
        id,
        name,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

/// Desk-scale synthetic experiment: 2000 train, 500 calibration, 500 test.
fn suite_config(seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::synthetic(3000, seed);
    c.split = SplitSpec {
        train_fraction: 2.0 / 3.0,
        cal_fraction: 1.0 / 6.0,
        test_fraction: 1.0 / 6.0,
        seed,
        n_partitions: 1,
    };
    c.ann = AnnSettings {
        layer_sizes: vec![64, 64, 1],
        activation: Activation::Relu,
        dropout_prob: 0.1,
        use_batchnorm: false,
        learning_rate: 1e-3,
        batch_size: 64,
    };
    c.drf = DrfConfig {
        hidden_layers: vec![64, 64],
        routing_width: 32,
        use_batchnorm: true,
        n_trees: 5,
        depth: 4,
        leaf_iterations: 20,
        ..DrfConfig::default()
    };
    c.schedule = TrainSchedule {
        max_epochs: 100,
        ..TrainSchedule::default()
    };
    c.confidence_levels = LEVELS.to_vec();
    c
}

fn synthetic_suite() -> drf_conformal::Result<Vec<EvaluationReport>> {
    let per_seed = (0..SEEDS)
        .into_par_iter()
        .map(|seed| run_experiment(&suite_config(seed)))
        .collect::<drf_conformal::Result<Vec<_>>>()?;
    Ok(per_seed.into_iter().flatten().collect())
}

fn suite_rows(reports: &[EvaluationReport]) -> BTreeMap<(String, u32), AggregateRow> {
    // With one partition per seed, aggregating across seeds averages them.
    let flattened: Vec<EvaluationReport> = reports
        .iter()
        .cloned()
        .map(|mut r| {
            r.partition = None;
            r
        })
        .collect();
    aggregate(&flattened)
        .into_iter()
        .map(|r| ((r.method.clone(), (r.confidence_level * 100.0).round() as u32), r))
        .collect()
}

fn criterion_coverage(rows: &BTreeMap<(String, u32), AggregateRow>) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for m in Method::ALL {
        for cl in LEVELS {
            let r = &rows[&(m.key().to_string(), (cl * 100.0).round() as u32)];
            let inside = r.coverage >= cl - 0.03 && r.coverage <= cl + 0.05;
            ok &= inside && r.n_partitions == SEEDS as usize;
            parts.push(format!("{}@{cl}={:.4}", m.key(), r.coverage));
        }
    }
    outcome(1, "marginal coverage in [CL-0.03, CL+0.05], 20 seeds", ok, parts.join(" "))
}

fn criterion_adaptivity(rows: &BTreeMap<(String, u32), AggregateRow>) -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for cl in [70, 80] {
        let drf = rows[&("drf_std".to_string(), cl)].mad_conditional_coverage;
        let cp = rows[&("ann_cp".to_string(), cl)].mad_conditional_coverage;
        ok &= drf <= cp;
        parts.push(format!("cl={cl}% drf_std={drf:.4} ann_cp={cp:.4}"));
    }
    outcome(2, "MAD conditional coverage drf_std <= constant", ok, parts.join("; "))
}

fn criterion_pcc(reports: &[EvaluationReport]) -> Outcome {
    let values: Vec<f64> = reports
        .iter()
        .filter(|r| r.method == "drf_std" && r.confidence_level == 0.9)
        .filter_map(|r| r.pcc_uncertainty_error)
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    outcome(
        8,
        "PCC(sigma_drf, |residual|) >= 0.2 (20-seed mean)",
        values.len() == SEEDS as usize && mean > 0.0 && mean >= 0.2,
        format!("mean={mean:.4} min={min:.4} n={}", values.len()),
    )
}

fn brute_force_quantile(scores: &[f64], alpha: f64, finite: bool) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = sorted.len();
    let n = if finite { m + 1 } else { m };
    // Smallest k with k >= n (1 - alpha), by scanning.
    let mut k = 1;
    while (k as f64) < n as f64 * (1.0 - alpha) - 1e-9 {
        k += 1;
    }
    if k > m {
        f64::INFINITY
    } else {
        sorted[k - 1]
    }
}

fn criterion_quantile() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mismatches = 0;
    for _ in 0..10_000 {
        let len = rng.random_range(1..=200);
        let dup = rng.random_bool(0.3);
        let scores: Vec<f64> = (0..len)
            .map(|_| {
                if dup {
                    rng.random_range(0..10) as f64 / 4.0
                } else {
                    rng.random_range(0.0..5.0)
                }
            })
            .collect();
        let alpha = if rng.random_bool(0.5) {
            [0.1, 0.2, 0.3][rng.random_range(0..3)]
        } else {
            rng.random_range(0.001..0.999)
        };
        for (mode, finite) in [(QuantileMode::FiniteSample, true), (QuantileMode::Plain, false)] {
            if calibrate(&scores, alpha, mode).unwrap() != brute_force_quantile(&scores, alpha, finite) {
                mismatches += 1;
            }
        }
    }
    outcome(3, "calibrate == sort-and-index oracle, 10^4 lists", mismatches == 0, format!("mismatches={mismatches}"))
}

fn monte_carlo_variance(tree: &Tree, p: &[f64], draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cumulative: Vec<f64> = p
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect();
    let (mut mean, mut m2) = (0.0, 0.0);
    for i in 0..draws {
        let u: f64 = rng.random::<f64>() * cumulative[cumulative.len() - 1];
        let l = cumulative.partition_point(|&c| c < u).min(p.len() - 1);
        let leaf = tree.leaves[l];
        let z: f64 = StandardNormal.sample(&mut rng);
        let y = leaf.mu + leaf.sigma2.sqrt() * z;
        let delta = y - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (y - mean);
    }
    m2 / draws as f64
}

fn criterion_mixture_variance() -> Outcome {
    let mut cases: Vec<(Tree, Vec<f64>)> = Vec::new();
    let two = Tree::new(
        1,
        vec![0],
        vec![LeafDistribution { mu: 0.0, sigma2: 1.0 }, LeafDistribution { mu: 2.0, sigma2: 1.0 }],
    )
    .unwrap();
    cases.push((two, vec![0.5, 0.5]));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let depth = rng.random_range(1..=4);
        let splits = (1usize << depth) - 1;
        let leaves = (0..=splits)
            .map(|_| LeafDistribution {
                mu: rng.random_range(-3.0..3.0),
                sigma2: rng.random_range(0.05..2.0),
            })
            .collect();
        let tree = Tree::new(depth, (0..splits).collect(), leaves).unwrap();
        let s: Vec<f64> = (0..splits).map(|_| rng.random_range(0.05..0.95)).collect();
        let p = leaf_reach_probabilities(&tree, &s).unwrap();
        cases.push((tree, p));
    }
    let errors: Vec<f64> = cases
        .par_iter()
        .enumerate()
        .map(|(i, (tree, p))| {
            let exact = tree_variance(tree, p);
            let mc = monte_carlo_variance(tree, p, 1_000_000, 100 + i as u64);
            (mc - exact).abs() / exact
        })
        .collect();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    outcome(
        4,
        "tree_variance vs Monte Carlo (10^6 draws) within 1%",
        worst < 0.01,
        format!("tables={} worst_rel_err={worst:.5} two_leaf_case_err={:.5}", errors.len(), errors[0]),
    )
}

fn criterion_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let activations = [Activation::Tanh, Activation::Sigmoid, Activation::Identity];
    let (mut worst_mlp, mut worst_drf) = (0.0f64, 0.0f64);
    for c in 0..20u64 {
        let input_dim = rng.random_range(1..6);
        let hidden: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(2..9)).collect();
        let activation = activations[rng.random_range(0..3)];
        let use_batchnorm = rng.random_bool(0.5);
        let batch = rng.random_range(3..9);
        let x = Array2::from_shape_fn((batch, input_dim), |_| rng.random_range(-2.0..2.0));
        let y = Array1::from_shape_fn(batch, |_| rng.random_range(-2.0..2.0));
        let mode = if rng.random_bool(0.5) { ForwardMode::Train } else { ForwardMode::Eval };

        let mut layer_sizes = hidden.clone();
        layer_sizes.push(1);
        let mlp = MlpModel::new(MlpConfig {
            input_dim,
            layer_sizes,
            activation,
            dropout_prob: 0.0,
            use_batchnorm,
            learning_rate: 1e-3,
            batch_size: batch,
            seed: c,
        })
        .unwrap();
        worst_mlp = worst_mlp.max(grad_check(&mlp, &x, y.view(), &Mse, mode, FD_STEP).unwrap());

        let depth = rng.random_range(1..4);
        let config = DrfConfig {
            hidden_layers: hidden,
            routing_width: (1 << depth) + rng.random_range(0..4),
            activation,
            dropout_prob: 0.0,
            use_batchnorm,
            n_trees: rng.random_range(1..4),
            depth,
            seed: c,
            ..DrfConfig::default()
        };
        let mut forest = Forest::new(&config, input_dim, y.as_slice().unwrap()).unwrap();
        for t in &mut forest.trees {
            for l in &mut t.leaves {
                l.sigma2 = rng.random_range(0.3..2.0);
            }
        }
        let objective = NllObjective::new(&forest.trees);
        worst_drf = worst_drf.max(grad_check(&forest.backbone, &x, y.view(), &objective, mode, FD_STEP).unwrap());
    }
    outcome(
        5,
        "analytic vs finite-difference gradients < 1e-4 (20 configs)",
        worst_mlp < 1e-4 && worst_drf < 1e-4,
        format!("mlp_worst={worst_mlp:.2e} drf_nll_worst={worst_drf:.2e}"),
    )
}

fn criterion_monotonicity() -> Outcome {
    let mut worst_increase = f64::NEG_INFINITY;
    for init in 0..10u64 {
        let data = synth_heteroskedastic(400, 50 + init).unwrap();
        let config = DrfConfig {
            hidden_layers: vec![16],
            routing_width: 16,
            use_batchnorm: false,
            dropout_prob: 0.0,
            n_trees: 3,
            depth: 3,
            seed: init,
            ..DrfConfig::default()
        };
        let mut forest = Forest::new(&config, 10, data.targets().as_slice().unwrap()).unwrap();
        let cache = RoutingCache::from_forest(&forest, data.features()).unwrap();
        let mut last = drf_nll(&forest, &data).unwrap();
        for _ in 0..20 {
            update_leaves(&mut forest.trees, &cache, data.targets().view(), 1).unwrap();
            let now = drf_nll(&forest, &data).unwrap();
            worst_increase = worst_increase.max(now - last);
            last = now;
        }
    }
    outcome(
        6,
        "drf_nll non-increasing over 20 leaf updates (10 inits)",
        worst_increase <= 1e-9,
        format!("max_step_change={worst_increase:.3e}"),
    )
}

fn criterion_invariances() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut scale_bad, mut shift_bad) = (0, 0);
    let dyadic = |rng: &mut ChaCha8Rng| rng.random_range(-4096..4096) as f64 / 64.0;
    for _ in 0..1000 {
        let (m, t) = (rng.random_range(1..100), rng.random_range(1..50));
        let alpha = rng.random_range(0.05..0.5);
        let cal_p: Vec<f64> = (0..m).map(|_| dyadic(&mut rng)).collect();
        let cal_y: Vec<f64> = (0..m).map(|_| dyadic(&mut rng)).collect();
        let test_p: Vec<f64> = (0..t).map(|_| dyadic(&mut rng)).collect();
        let cal_s: Vec<f64> = (0..m).map(|_| 2f64.powi(rng.random_range(-3..3))).collect();
        let test_s: Vec<f64> = (0..t).map(|_| 2f64.powi(rng.random_range(-3..3))).collect();
        let run = |shift: f64, scale: f64, normalized: bool| {
            let inputs = IcpInputs {
                cal_predictions: cal_p.iter().map(|p| p + shift).collect(),
                test_predictions: test_p.iter().map(|p| p + shift).collect(),
                cal_sigma: normalized.then(|| cal_s.iter().map(|s| s * scale).collect()),
                test_sigma: normalized.then(|| test_s.iter().map(|s| s * scale).collect()),
            };
            let y: Array1<f64> = cal_y.iter().map(|y| y + shift).collect();
            icp_from_inputs(&inputs, y.view(), alpha, 0.0, QuantileMode::FiniteSample).unwrap()
        };
        let lambda = 2f64.powi(rng.random_range(-10..10));
        if run(0.0, 1.0, true).intervals != run(0.0, lambda, true).intervals {
            scale_bad += 1;
        }
        let c = rng.random_range(-64..64) as f64;
        for normalized in [false, true] {
            let (a, b) = (run(0.0, 1.0, normalized), run(c, 1.0, normalized));
            let same = a.calibration.q_hat == b.calibration.q_hat
                && a.intervals.iter().zip(&b.intervals).all(|(x, y)| {
                    (x.is_unbounded() && y.is_unbounded()) || (x.lower + c == y.lower && x.upper + c == y.upper)
                });
            if !same {
                shift_bad += 1;
            }
        }
    }

    let mut worst_sum = 0.0f64;
    let mut inputs = 0;
    for f in 0..10u64 {
        let depth = 1 + (f as usize % 7);
        let config = DrfConfig {
            hidden_layers: vec![16, 8],
            routing_width: (1 << depth) + 1,
            activation: Activation::Tanh,
            dropout_prob: 0.0,
            use_batchnorm: false,
            n_trees: 2,
            depth,
            seed: f,
            ..DrfConfig::default()
        };
        let forest = Forest::new(&config, 5, &[0.0, 1.0]).unwrap();
        let x = Array2::from_shape_fn((1000, 5), |_| rng.random_range(-10.0..10.0));
        let outputs = forest.backbone.outputs(&x).unwrap() * 10.0;
        for row in outputs.rows() {
            for tree in &forest.trees {
                let p = leaf_reach_probabilities(tree, &split_probabilities(tree, row).unwrap()).unwrap();
                worst_sum = worst_sum.max((p.iter().sum::<f64>() - 1.0).abs());
            }
            inputs += 1;
        }
    }
    outcome(
        7,
        "sigma-scaling (exact), translation (exact), sum P = 1 within 1e-9",
        scale_bad == 0 && shift_bad == 0 && worst_sum <= 1e-9,
        format!("scale_violations={scale_bad} shift_violations={shift_bad} inputs={inputs} worst_sum_err={worst_sum:.2e}"),
    )
}

/// Drug-response reference values: marginal coverage by (method, level) and
/// R² by method.
const REFERENCE_COVERAGE: [(&str, f64, f64); 12] = [
    ("ann_mcd", 0.7, 0.71070),
    ("ann_rf", 0.7, 0.63708),
    ("drf_std", 0.7, 0.72601),
    ("drf_std_ens", 0.7, 0.72011),
    ("ann_mcd", 0.8, 0.80885),
    ("ann_rf", 0.8, 0.66753),
    ("drf_std", 0.8, 0.82029),
    ("drf_std_ens", 0.8, 0.81752),
    ("ann_mcd", 0.9, 0.91014),
    ("ann_rf", 0.9, 0.70277),
    ("drf_std", 0.9, 0.92122),
    ("drf_std_ens", 0.9, 0.91955),
];
const REFERENCE_R2: [(&str, f64); 5] = [
    ("ann_cp", 0.85182),
    ("ann_mcd", 0.85175),
    ("ann_rf", 0.85182),
    ("drf_std", 0.84416),
    ("drf_std_ens", 0.84416),
];

fn criterion_reproduction() -> Outcome {
    let name = "drug-response protocol reproduction (user data)";
    let Ok(path) = std::env::var("DRFCP_CCLE_CONFIG") else {
        return Outcome {
            id: 9,
            name,
            status: Status::Skip,
            detail: "DRFCP_CCLE_CONFIG not set; dataset is not shipped".into(),
        };
    };
    let result = ExperimentConfig::load(std::path::Path::new(&path)).and_then(|c| run_experiment(&c));
    let reports = match result {
        Ok(r) => r,
        Err(e) => return outcome(9, name, false, format!("run failed: {e}")),
    };
    let rows = aggregate(&reports);
    let find = |m: &str, cl: f64| rows.iter().find(|r| r.method == m && (r.confidence_level - cl).abs() < 1e-9);
    let mut ok = true;
    let mut parts = Vec::new();
    for (m, cl, want) in REFERENCE_COVERAGE {
        match find(m, cl) {
            Some(r) => {
                ok &= (r.coverage - want).abs() <= 0.02;
                parts.push(format!("{m}@{cl} cov={:.4}/{want}", r.coverage));
            }
            None => ok = false,
        }
    }
    for (m, want) in REFERENCE_R2 {
        match find(m, 0.9).or_else(|| rows.iter().find(|r| r.method == m)) {
            Some(r) => {
                ok &= (r.r2 - want).abs() <= 0.05;
                parts.push(format!("{m} r2={:.4}/{want}", r.r2));
            }
            None => ok = false,
        }
    }
    outcome(9, name, ok, parts.join(" "))
}

fn criterion_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| -> drf_conformal::Result<std::path::PathBuf> {
        let mut c = suite_config(11);
        c.data = drf_conformal::experiment::DataSource::Synthetic { n: 1200, seed: 11 };
        c.split.n_partitions = 2;
        c.schedule.max_epochs = 15;
        c.rf.n_trees = 30;
        c.output_dir = dir.path().join(name);
        cmd_train(&c, None)?;
        cmd_evaluate(&c)?;
        Ok(c.output_dir)
    };
    let (a, b) = match (run("a"), run("b")) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return outcome(10, "end-to-end determinism", false, format!("run failed: {e}")),
    };
    let files = [
        "reports/runs.json",
        "reports/aggregate.json",
        "reports/table_accuracy.csv",
        "reports/table_coverage.csv",
        "reports/manifest.json",
    ];
    let differing: Vec<&str> = files
        .iter()
        .copied()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok() || !a.join(f).is_file())
        .collect();
    outcome(
        10,
        "two evaluate runs give byte-identical reports",
        differing.is_empty(),
        format!("compared={} differing={differing:?}", files.len()),
    )
}

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();

    let suite_start = Instant::now();
    match synthetic_suite() {
        Ok(reports) => {
            let rows = suite_rows(&reports);
            outcomes.push(criterion_coverage(&rows));
            outcomes.push(criterion_adaptivity(&rows));
            outcomes.push(criterion_pcc(&reports));
        }
        Err(e) => {
            for (id, name) in [(1, "marginal coverage"), (2, "adaptivity ordering"), (8, "uncertainty-error PCC")] {
                outcomes.push(outcome(id, name, false, format!("synthetic suite failed: {e}")));
            }
        }
    }
    let suite_secs = suite_start.elapsed().as_secs_f64();
    outcomes.push(criterion_quantile());
    outcomes.push(criterion_mixture_variance());
    outcomes.push(criterion_gradients());
    outcomes.push(criterion_monotonicity());
    outcomes.push(criterion_invariances());
    outcomes.push(criterion_reproduction());
    outcomes.push(criterion_determinism());
    outcomes.sort_by_key(|o| o.id);

    for o in &outcomes {
        let tag = match o.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        println!("[{tag}] criterion {:>2}: {} | {}", o.id, o.name, o.detail);
    }
    println!(
        "synthetic suite: {SEEDS} seeds in {suite_secs:.1}s; total {:.1}s",
        start.elapsed().as_secs_f64()
    );
    if outcomes.iter().any(|o| o.status == Status::Fail) {
        std::process::exit(1);
    }
}
