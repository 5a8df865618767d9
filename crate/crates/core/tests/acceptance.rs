//! Acceptance gate: one test per criterion, each printing a PASS/FAIL line.
//!
//! Lines go straight to stderr so they appear in `cargo test` output even
//! when the harness captures `println!`.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use interopt::dataset::generate_synthetic;
use interopt::emulator::{self, EmulatorModel};
use interopt::enrml::{self, LinearForward};
use interopt::interopt::{
    attribute_records, optimize_campaign, optimize_well, AttributionMode, CampaignOptions,
    OptimizationTrace, WellContext,
};
use interopt::seed;
use interopt::shapley::{self, BackgroundSet, Coalition, Predictor};
use interopt::{Activation, EnrmlConfig, EnsembleState, InterOptConfig, NoiseModel, Outcome, TrainConfig};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
    /// Report bytes used by the determinism check.
    artifact: String,
}

fn announce(id: u32, name: &str, v: &Verdict, elapsed: Duration) {
    let status = if v.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "acceptance [{id:02}] {status} {name}: {} ({:.1} s)",
        v.detail,
        elapsed.as_secs_f64()
    );
}

fn gate(id: u32, name: &str, budget: Option<Duration>, run: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let mut v = run();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            v.pass = false;
            v.detail.push_str(&format!("; exceeded budget of {} s", b.as_secs()));
        }
    }
    announce(id, name, &v, elapsed);
    assert!(v.pass, "{name}: {}", v.detail);
}

/// Running maximum that turns a NaN into a failure instead of skipping it.
fn widen(worst: &mut f64, v: f64) {
    if v.is_nan() {
        *worst = f64::INFINITY;
    } else if v > *worst {
        *worst = v;
    }
}

fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

// [01] --------------------------------------------------------------------

fn efficiency_run() -> Verdict {
    let schema = common::small_schema(8);
    let truth = common::truth_with_relative_noise(&schema, 200, 0.05, 11);
    let data = generate_synthetic(200, &schema, &truth).unwrap();
    let cfg = TrainConfig {
        max_epochs: 200,
        seed: 11,
        ..TrainConfig::default()
    };
    let model = emulator::train(&data, &cfg).unwrap();
    let inputs: Vec<Vec<f64>> = data.records.iter().map(|r| r.inputs.clone()).collect();
    let bg = BackgroundSet::from_physical(&inputs, &model.norm, 64, 5).unwrap();
    let base = bg.rows().iter().map(|r| model.forward(r).unwrap()).sum::<f64>() / bg.len() as f64;
    let mut attrs = Vec::new();
    let mut worst: f64 = 0.0;
    for rec in &data.records[..50] {
        let x = model.norm.normalize_inputs(&rec.inputs);
        let a = shapley::shapley_exact(&model, &bg, &x).unwrap().with_id(rec.id.clone());
        let gap = a.phi.iter().sum::<f64>() - (model.forward(&x).unwrap() - base);
        widen(&mut worst, gap.abs());
        attrs.push(a);
    }
    Verdict {
        pass: bg.len() == 64 && worst <= 1e-9,
        detail: format!("50 records, 8 features, {}-row background, max |Σφ − (f(x) − base)| = {worst:.2e}", bg.len()),
        artifact: shapley::attributions_csv(&schema.input_names(), &attrs),
    }
}

#[test]
fn shapley_efficiency_exact_mode() {
    gate(1, "shapley efficiency", Some(Duration::from_secs(60)), efficiency_run);
}

// [02] --------------------------------------------------------------------

#[test]
fn shapley_linear_closed_form_and_brute_force() {
    gate(2, "shapley closed form (linear emulator)", None, || {
        let mut rng = seed::rng(202);
        let mut worst_closed: f64 = 0.0;
        let mut worst_brute: f64 = 0.0;
        for n in 1..=8 {
            let beta: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let model = common::linear_emulator(&beta, rng.random_range(-1.0..1.0));
            let rows: Vec<Vec<f64>> = (0..16)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let bg = BackgroundSet::new(rows.clone()).unwrap();
            let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            let phi = shapley::shapley_exact(&model, &bg, &x).unwrap().phi;
            for i in 0..n {
                let mean = rows.iter().map(|r| r[i]).sum::<f64>() / rows.len() as f64;
                widen(&mut worst_closed, (phi[i] - beta[i] * (x[i] - mean)).abs());
            }
            let f = |z: &[f64]| common::naive_forward(&model, z);
            let brute = common::brute_force_shapley(&f, &rows, &x);
            for (a, b) in phi.iter().zip(&brute) {
                widen(&mut worst_brute, (a - b).abs());
            }
        }
        Verdict {
            pass: worst_closed <= 1e-9 && worst_brute <= 1e-9,
            detail: format!(
                "n = 1..8: max |φ − β(x − mean)| = {worst_closed:.2e}, max |φ − brute force| = {worst_brute:.2e}"
            ),
            artifact: String::new(),
        }
    });
}

// [03] --------------------------------------------------------------------

#[test]
fn shapley_dummy_symmetry_additivity() {
    gate(3, "shapley dummy / symmetry / additivity", None, || {
        let n = 6;
        let mut dummy: f64 = 0.0;
        let mut symmetry: f64 = 0.0;
        let mut additivity: f64 = 0.0;
        for case in 0..10u64 {
            let mut rng = seed::rng(300 + case);
            let mut model = EmulatorModel::random(&[n, 7, 4, 1], Activation::Tanh, 300 + case).unwrap();
            let (d, j, k) = (0, 2, 4);
            // feature d is ignored; features j and k enter identically
            for r in 0..model.layers[0].outputs {
                let w = &mut model.layers[0].weights;
                w[r * n + d] = 0.0;
                w[r * n + k] = w[r * n + j];
            }
            let mut rows: Vec<Vec<f64>> = (0..12)
                .map(|_| (0..n).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let swapped: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| {
                    let mut s = r.clone();
                    s.swap(j, k);
                    s
                })
                .collect();
            rows.extend(swapped);
            let bg = BackgroundSet::new(rows).unwrap();
            let mut x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            x[k] = x[j];
            let phi = shapley::shapley_exact(&model, &bg, &x).unwrap().phi;
            widen(&mut dummy, phi[d].abs());
            widen(&mut symmetry, (phi[j] - phi[k]).abs());

            let other = EmulatorModel::random(&[n, 5, 1], Activation::Relu, 900 + case).unwrap();
            let rep = shapley::additivity_check(&model, &other, &bg, &x).unwrap();
            widen(&mut additivity, rep.max_defect);
        }
        Verdict {
            pass: dummy <= 1e-12 && symmetry <= 1e-9 && additivity <= 1e-9,
            detail: format!(
                "10 cases: dummy |φ| ≤ {dummy:.2e}, symmetric pair gap ≤ {symmetry:.2e}, additivity defect ≤ {additivity:.2e}"
            ),
            artifact: String::new(),
        }
    });
}

// [04] --------------------------------------------------------------------

#[test]
fn coalition_weights_sum_to_one() {
    gate(4, "coalition weight normalization", None, || {
        let mut worst: f64 = 0.0;
        for n in 1..=16usize {
            // every subset of the other n − 1 features, one weight each
            let total: f64 = (0..1u64 << (n - 1))
                .map(|mask| shapley::coalition_weight(n, Coalition(mask).len()).unwrap())
                .sum();
            widen(&mut worst, (total - 1.0).abs());
        }
        Verdict {
            pass: worst <= 1e-12,
            detail: format!("n = 1..16: max |Σ w − 1| = {worst:.2e}"),
            artifact: String::new(),
        }
    });
}

// [05] --------------------------------------------------------------------

struct MapProblem {
    g: DMatrix<f64>,
    offset: DVector<f64>,
    d_obs: DVector<f64>,
    m_pr: DVector<f64>,
    cd: Vec<f64>,
    cm: Vec<f64>,
}

fn map_problem() -> MapProblem {
    let mut rng = seed::rng(505);
    let g = normal_matrix(5, 3, &mut rng);
    let offset = normal_matrix(5, 1, &mut rng).column(0).into_owned();
    let m_true = DVector::from_vec(vec![1.5, -2.0, 0.8]);
    let cd = vec![0.04; 5];
    let noise = normal_matrix(5, 1, &mut rng).column(0) * 0.2;
    MapProblem {
        d_obs: &g * &m_true + &offset + noise,
        g,
        offset,
        m_pr: DVector::from_vec(vec![0.5, -0.5, 0.0]),
        cd,
        cm: vec![1.0; 3],
    }
}

fn map_run() -> Verdict {
    let p = map_problem();
    let forward = LinearForward {
        g: p.g.clone(),
        offset: p.offset.clone(),
    };
    let noise = NoiseModel::new(
        DVector::from_column_slice(&p.cd),
        DVector::from_column_slice(&p.cm),
    )
    .unwrap();
    let cfg = EnrmlConfig {
        n_e: 200,
        max_iters: 50,
        seed: 5,
        ..EnrmlConfig::default()
    };
    let run = enrml::run_enrml(&forward, &p.m_pr, &p.d_obs, &noise, &cfg).unwrap();
    let m_star = common::analytic_map(&p.g, &p.offset, &p.d_obs, &p.m_pr, &p.cd, &p.cm);
    let mean = run.state.mean();
    let rel = (&mean - &m_star).norm() / m_star.norm();
    let obj = |m: &DVector<f64>| common::linear_objective(m, &p.g, &p.offset, &p.d_obs, &p.m_pr, &p.cd, &p.cm);
    let obj_gap = (obj(&mean) - obj(&m_star)) / obj(&m_star);
    let iterations = run.trace.len() - 1;
    let monotone = run
        .trace
        .windows(2)
        .all(|w| w[1].mean_objective <= w[0].mean_objective);
    Verdict {
        pass: rel <= 0.05 && obj_gap.abs() <= 0.01 && iterations <= 50 && monotone,
        detail: format!(
            "N_e 200, {iterations} iterations: mean vs MAP relative error {rel:.3e}, objective gap {:.3e}, trace non-increasing: {monotone}",
            obj_gap
        ),
        artifact: run.trace_csv(),
    }
}

#[test]
fn enrml_linear_gaussian_map() {
    gate(5, "EnRML linear-Gaussian MAP", Some(Duration::from_secs(30)), map_run);
}

// [06] --------------------------------------------------------------------

#[test]
fn enrml_covariance_form_matches_sensitivity_form() {
    gate(6, "EnRML linear exactness", None, || {
        let mut worst: f64 = 0.0;
        for case in 0..10u64 {
            let mut rng = seed::rng(600 + case);
            let n_m = rng.random_range(2..=5);
            let n_d = rng.random_range(1..=6);
            let n_e = rng.random_range(3..=12);
            let g = normal_matrix(n_d, n_m, &mut rng);
            let offset = normal_matrix(n_d, 1, &mut rng).column(0).into_owned();
            let m = normal_matrix(n_m, n_e, &mut rng);
            let m_pr = normal_matrix(n_m, n_e, &mut rng);
            let d_obs = normal_matrix(n_d, n_e, &mut rng);
            let cd: Vec<f64> = (0..n_d).map(|_| rng.random_range(0.1..2.0)).collect();
            let cm: Vec<f64> = (0..n_m).map(|_| rng.random_range(0.1..2.0)).collect();
            let lambda = rng.random_range(0.0..3.0);

            let forward = LinearForward {
                g: g.clone(),
                offset: offset.clone(),
            };
            use interopt::enrml::ForwardModel;
            let pred = forward.evaluate_ensemble(&m);
            let state = EnsembleState::new(m.clone(), m_pr.clone(), d_obs.clone()).unwrap();
            let noise = NoiseModel::new(DVector::from_vec(cd.clone()), DVector::from_vec(cm.clone())).unwrap();
            let ours = enrml::enrml_update(&state, &pred, &noise, lambda).unwrap();
            let reference = common::sensitivity_form_update(&m, &m_pr, &d_obs, &g, &offset, &cd, &cm, lambda);
            widen(&mut worst, (ours - reference).amax());
        }
        Verdict {
            pass: worst <= 1e-8,
            detail: format!("10 random instances: max |covariance − sensitivity form| = {worst:.2e}"),
            artifact: String::new(),
        }
    });
}

// [07] --------------------------------------------------------------------

#[test]
fn emulator_gradient_matches_finite_differences() {
    gate(7, "emulator gradient check", None, || {
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for draw in 0..10u64 {
            let mut rng = seed::rng(700 + draw);
            let mut model = EmulatorModel::random(&[4, 6, 1], Activation::Tanh, 700 + draw).unwrap();
            let xs: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..4).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let ys: Vec<f64> = (0..8).map(|_| StandardNormal.sample(&mut rng)).collect();
            let (_, grads) = model.loss_and_gradient(&xs, &ys);
            let analytic: Vec<f64> = grads
                .iter()
                .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
                .collect();
            for (i, a) in analytic.iter().enumerate() {
                let v = model.parameter(i);
                model.set_parameter(i, v + h);
                let up = model.mse(&xs, &ys);
                model.set_parameter(i, v - h);
                let down = model.mse(&xs, &ys);
                model.set_parameter(i, v);
                let numeric = (up - down) / (2.0 * h);
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
                widen(&mut worst, rel);
                checked += 1;
            }
        }
        Verdict {
            pass: worst <= 1e-4,
            detail: format!("{checked} parameters over 10 draws: max relative error {worst:.2e}"),
            artifact: String::new(),
        }
    });
}

// [08] --------------------------------------------------------------------

#[test]
fn emulator_fit_on_smooth_synthetic_target() {
    gate(8, "emulator LOO fit", Some(Duration::from_secs(600)), || {
        let schema = common::small_schema(6);
        let truth = common::truth_with_relative_noise(&schema, 200, 0.05, 8);
        let data = generate_synthetic(200, &schema, &truth).unwrap();
        let report = emulator::loo_cv(&data, &TrainConfig::default()).unwrap();
        Verdict {
            pass: report.cv_r2 >= 0.9 && report.fit_r2 >= report.cv_r2,
            detail: format!(
                "200 records, 5% noise, {} folds: CV-R² {:.4}, fit-R² {:.4}",
                report.folds, report.cv_r2, report.fit_r2
            ),
            artifact: String::new(),
        }
    });
}

// [09] --------------------------------------------------------------------

fn block_monotonicity_run() -> Verdict {
    let campaign = common::Campaign::new(9);
    let wells = campaign.wells(100);
    let attrs = attribute_records(&campaign.model, &wells, AttributionMode::Exact, 64, 9).unwrap();
    let runs: Vec<(Outcome, OptimizationTrace)> = wells
        .records
        .par_iter()
        .zip(attrs.par_iter())
        .enumerate()
        .map(|(i, (rec, attr))| {
            let cfg = InterOptConfig {
                seed: seed::derive(9, i as u64),
                ..InterOptConfig::default()
            };
            let ctx = WellContext::new(&campaign.schema, &campaign.model.norm, rec).unwrap();
            let (plan, trace) = optimize_well(&campaign.model, &campaign.schema, &ctx, attr, &cfg).unwrap();
            (plan.outcome, trace)
        })
        .collect();
    let mut violations = 0;
    for (_, t) in &runs {
        let mut prev = t.initial_objective;
        for b in &t.blocks {
            if b.best_so_far > prev {
                violations += 1;
            }
            prev = b.best_so_far;
        }
    }
    let not_converged = runs.iter().filter(|(o, _)| *o == Outcome::NotConverged).count();
    let traces: Vec<&OptimizationTrace> = runs.iter().map(|(_, t)| t).collect();
    Verdict {
        pass: violations == 0 && not_converged == 0,
        detail: format!(
            "{} runs, {} block boundaries: {violations} increases, {not_converged} not converged",
            runs.len(),
            runs.iter().map(|(_, t)| t.blocks.len()).sum::<usize>()
        ),
        artifact: serde_json::to_string(&traces).unwrap(),
    }
}

#[test]
fn block_optimization_is_monotone() {
    gate(9, "block monotonicity", None, block_monotonicity_run);
}

// [10] --------------------------------------------------------------------

fn campaign_run() -> Verdict {
    let campaign = common::Campaign::new(10);
    let wells = campaign.wells(50);
    let cfg = InterOptConfig {
        seed: 10,
        ..InterOptConfig::default()
    };
    let report = optimize_campaign(&campaign.model, &wells, &cfg, &CampaignOptions::default()).unwrap();
    let fixed = campaign.schema.fixed_indices();
    let mut oracle_better = 0;
    let mut fixed_identical = 0;
    for (w, rec) in report.wells.iter().zip(&wells.records) {
        let Some(plan) = &w.plan else { continue };
        if campaign.truth.evaluate(&plan.inputs_after) < campaign.truth.evaluate(&rec.inputs) {
            oracle_better += 1;
        }
        if fixed
            .iter()
            .all(|&i| plan.inputs_after[i].to_bits() == rec.inputs[i].to_bits())
        {
            fixed_identical += 1;
        }
    }
    let n = wells.len();
    Verdict {
        pass: report.mean_reduction > 0.0 && oracle_better * 10 >= n * 7 && fixed_identical == n,
        detail: format!(
            "{n} wells: mean predicted reduction {:.2}%, ground truth lower for {oracle_better}/{n}, fixed features identical for {fixed_identical}/{n}",
            report.mean_reduction * 100.0
        ),
        artifact: report.to_json(),
    }
}

#[test]
fn end_to_end_campaign() {
    gate(10, "end-to-end campaign", Some(Duration::from_secs(900)), campaign_run);
}

// [11] --------------------------------------------------------------------

#[test]
fn ablation_matrix_all_on_leads() {
    gate(11, "ablation matrix", None, || {
        let campaign = common::Campaign::new(10);
        let wells = campaign.wells(50);
        let cfg = InterOptConfig {
            seed: 10,
            ..InterOptConfig::default()
        };
        let opts = CampaignOptions {
            ablation: true,
            ..CampaignOptions::default()
        };
        let report = optimize_campaign(&campaign.model, &wells, &cfg, &opts).unwrap();
        let rows = report.ablation.clone().unwrap_or_default();
        let all_on = rows.iter().find(|r| r.block_optimization && r.adaptive_step);
        let pass = rows.len() == 4
            && all_on.is_some_and(|a| rows.iter().all(|r| a.mean_reduction >= r.mean_reduction));
        let summary: Vec<String> = rows
            .iter()
            .map(|r| {
                format!(
                    "block {} step {}: {:.3}% ({} nc, {} ni)",
                    r.block_optimization as u8,
                    r.adaptive_step as u8,
                    r.mean_reduction * 100.0,
                    r.not_converged,
                    r.no_improvement
                )
            })
            .collect();
        Verdict {
            pass,
            detail: format!("{} rows; {}", rows.len(), summary.join(", ")),
            artifact: String::new(),
        }
    });
}

// [12] --------------------------------------------------------------------

#[test]
fn reruns_are_byte_identical() {
    gate(12, "determinism", None, || {
        let runs: [(&str, fn() -> Verdict); 4] = [
            ("efficiency", efficiency_run),
            ("MAP", map_run),
            ("block monotonicity", block_monotonicity_run),
            ("campaign", campaign_run),
        ];
        let mut mismatched = Vec::new();
        let mut bytes = 0;
        for (name, run) in runs {
            let a = run().artifact;
            let b = run().artifact;
            bytes += a.len();
            if a.is_empty() || a != b {
                mismatched.push(name);
            }
        }
        Verdict {
            pass: mismatched.is_empty(),
            detail: format!("4 reports rerun ({bytes} bytes), mismatches: {mismatched:?}"),
            artifact: String::new(),
        }
    });
}

#[test]
fn predictor_and_forward_agree() {
    // sanity for the oracles above: the trait path and the checked path agree
    let model = EmulatorModel::random(&[3, 4, 1], Activation::Tanh, 1).unwrap();
    let x = [0.2, -0.4, 1.0];
    assert_eq!(Predictor::predict(&model, &x), model.forward(&x).unwrap());
}
