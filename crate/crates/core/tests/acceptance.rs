//! Acceptance suite. Every test prints one `PASS`/`FAIL` line before
//! asserting, so `cargo test --test acceptance -- --nocapture` gives a
//! readable scorecard. The pipeline-scale checks take several minutes.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use intervene::evalbench::{cv_forecast_eval, inference_eval, CarryForward, TransferForecaster};
use intervene::gbrt;
use intervene::mirrors::{
    fdp_threshold, mirror, mirror_statistics, multi_split_select, select_taxa, toggle_scenarios,
};
use intervene::normalize::size_factors_median_ratios;
use intervene::simgen::{nonnull_sets, null_set, sample_nb, simulate, spectral_norm};
use intervene::transfer::{counterfactual_difference, forecast_from, Anchor};
use intervene::{
    BoostConfig, CvConfig, FitRecipe, Forecaster, InterventionScenario, InterventionSeriesSet,
    MirrorReport, NormalizationMode, ScaleTag, SelectConfig, SimConfig, SubjectSeries,
};
use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn verdict(name: &str, pass: bool, detail: impl AsRef<str>) -> bool {
    println!("{} {name}: {}", if pass { "PASS" } else { "FAIL" }, detail.as_ref());
    pass
}

/// Lighter boosting used for every pipeline-scale check.
fn pipeline_boost(seed: u64) -> BoostConfig {
    BoostConfig {
        n_rounds: 20,
        learning_rate: 0.3,
        max_depth: 2,
        seed,
        ..BoostConfig::default()
    }
}

fn pipeline_recipe(seed: u64) -> FitRecipe {
    FitRecipe {
        p: 2,
        q: 2,
        normalization: NormalizationMode::SizeFactorAsinh,
        boost: pipeline_boost(seed),
    }
}

fn select_lag0(set: &InterventionSeriesSet, seed: u64) -> MirrorReport {
    let mut config = SelectConfig::new(pipeline_recipe(seed));
    config.seed = seed;
    let (on, off) = toggle_scenarios(set.n_channels(), None, 1).unwrap();
    select_taxa(set, &on, &off, &config).unwrap()
}

fn desk_config(b: f64, seed: u64) -> SimConfig {
    SimConfig {
        n_taxa: 100,
        n_subjects: 50,
        n_timepoints: 30,
        pi0: 0.4,
        b,
        seed,
        ..SimConfig::default()
    }
}

// ---------------------------------------------------------------- mirrors

fn brute_force_threshold(m: &[f64], q: f64) -> (f64, BTreeSet<usize>) {
    let mut candidates: Vec<f64> = m.iter().map(|x| x.abs()).collect();
    candidates.push(0.0);
    let mut best: Option<f64> = None;
    for &t in &candidates {
        let above = m.iter().filter(|&&x| x > t).count();
        let below = m.iter().filter(|&&x| x < -t).count();
        let fdp = below as f64 / above.max(1) as f64;
        if above > 0 && fdp <= q && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    }
    match best {
        Some(t) => (t, (0..m.len()).filter(|&j| m[j] > t).collect()),
        None => (f64::INFINITY, BTreeSet::new()),
    }
}

#[test]
fn mirror_algebra_matches_hand_examples_and_brute_force() {
    let mut ok = mirror(2.0, 3.0) == 5.0
        && mirror(-2.0, -3.0) == 5.0
        && mirror(2.0, -3.0) == -5.0
        && mirror(0.0, 7.0) == 0.0
        && mirror(-4.0, 0.0) == 0.0;
    ok &= mirror_statistics(&[2.0, -2.0, 2.0], &[3.0, -3.0, -3.0]).unwrap() == vec![5.0, 5.0, -5.0];

    let t = fdp_threshold(&[5.0, 4.0, 3.0, -0.5], 0.25);
    ok &= t.t == 0.5 && t.selected == vec![0, 1, 2];
    let m = [3.0, 2.0, -1.0, -4.0];
    let fdp = m.iter().filter(|&&x| x < -1.5).count() as f64 / m.iter().filter(|&&x| x > 1.5).count() as f64;
    ok &= fdp == 0.5 && intervene::mirrors::estimated_fdp(&m, 1.5) == 0.5;
    let neg = fdp_threshold(&[-1.0, -2.0, -0.5], 0.2);
    ok &= neg.selected.is_empty() && neg.t == f64::INFINITY;

    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0;
    for _ in 0..100 {
        // Half-integer grid so ties and exact zeros are common.
        let m: Vec<f64> = (0..50).map(|_| rng.random_range(-12i32..=16) as f64 / 2.0).collect();
        let q = rng.random_range(0.01..0.99);
        let got = fdp_threshold(&m, q);
        let (t, sel) = brute_force_threshold(&m, q);
        if got.t != t || got.selected.iter().copied().collect::<BTreeSet<_>>() != sel {
            mismatches += 1;
        }
    }
    ok &= mismatches == 0;
    assert!(verdict(
        "mirror algebra",
        ok,
        format!("hand examples exact, {mismatches}/100 brute-force mismatches")
    ));
}

fn brute_force_aggregate(selections: &[Vec<usize>], n_units: usize, q: f64) -> (f64, Vec<usize>) {
    let n = selections.len() as f64;
    let rates: Vec<f64> = (0..n_units)
        .map(|j| {
            let mut total = 0.0;
            for s in selections {
                if s.contains(&j) {
                    total += 1.0 / s.len().max(1) as f64;
                }
            }
            total / n
        })
        .collect();
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let mut best_len = 0;
    for len in 1..=sorted.len() {
        if sorted[..len].iter().sum::<f64>() <= q {
            best_len = len;
        }
    }
    let cutoff = if best_len == 0 { 0.0 } else { sorted[best_len - 1] };
    (cutoff, (0..n_units).filter(|&j| rates[j] > cutoff).collect())
}

#[test]
fn multi_split_aggregation_matches_brute_force() {
    let hand = multi_split_select(&[vec![0, 1], vec![0]], 5, 0.25).unwrap();
    let mut ok = hand.inclusion == vec![0.75, 0.25, 0.0, 0.0, 0.0] && hand.cutoff == 0.25 && hand.selected == vec![0];

    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mismatches = 0;
    for _ in 0..100 {
        let n_units = rng.random_range(1..40);
        let n_splits = rng.random_range(2..12);
        let selections: Vec<Vec<usize>> = (0..n_splits)
            .map(|_| {
                let k = rng.random_range(0..=n_units.min(8));
                let mut s: Vec<usize> = rand::seq::index::sample(&mut rng, n_units, k).into_vec();
                s.sort_unstable();
                s
            })
            .collect();
        let q = rng.random_range(0.0..0.6);
        let got = multi_split_select(&selections, n_units, q).unwrap();
        let (cutoff, sel) = brute_force_aggregate(&selections, n_units, q);
        if got.cutoff != cutoff || got.selected != sel {
            mismatches += 1;
        }
    }
    ok &= mismatches == 0;
    assert!(verdict(
        "multi-split aggregation",
        ok,
        format!("hand example exact, {mismatches}/100 brute-force mismatches")
    ));
}

// ------------------------------------------------------------ size factors

fn two_column_set(columns: Array2<f64>) -> InterventionSeriesSet {
    let (j, t) = columns.dim();
    let subject = SubjectSeries::new("s", (0..t).map(|k| k as f64).collect(), columns, Array2::zeros((1, t)), vec![])
        .unwrap();
    InterventionSeriesSet::new(
        vec![subject],
        (0..j).map(|k| format!("t{k}")).collect(),
        vec!["w".into()],
        vec![],
        ScaleTag::Counts,
    )
    .unwrap()
}

#[test]
fn size_factors_match_hand_computation() {
    let pair = two_column_set(ndarray::array![[2.0, 1.0], [4.0, 2.0], [6.0, 3.0]]);
    let f = &size_factors_median_ratios(&pair).unwrap().factors[0];
    let err = (f[0] - 2f64.sqrt()).abs().max((f[1] - 1.0 / 2f64.sqrt()).abs());

    let same = two_column_set(ndarray::array![[3.0, 3.0, 3.0], [7.0, 7.0, 7.0], [1.0, 1.0, 1.0]]);
    let g = &size_factors_median_ratios(&same).unwrap().factors[0];
    let unit = g.iter().all(|&v| (v - 1.0).abs() <= 1e-12);

    assert!(verdict(
        "size factors",
        err <= 1e-12 && unit,
        format!("factors {:?}, max error {err:.2e}, identical samples {g:?}", f)
    ));
}

// ------------------------------------------------------- FDR and power

struct DeskRun {
    fdp: f64,
    power: f64,
}

fn desk_run(b: f64, seed: u64) -> DeskRun {
    let config = desk_config(b, seed);
    let (set, truth) = simulate(&config).unwrap();
    let report = select_lag0(&set, seed);
    let nonnull = &nonnull_sets(&truth.params, 0)[0];
    let score = inference_eval(&report.selected_at_lag(0), nonnull);
    println!(
        "  b={b} seed={seed}: selected {} taxa, FDP {:.3}, power {:.3}",
        report.selected_taxa.len(),
        score.fdp,
        score.power
    );
    DeskRun {
        fdp: score.fdp,
        power: score.power,
    }
}

const DESK_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];

fn strong_signal_runs() -> &'static Vec<DeskRun> {
    static RUNS: OnceLock<Vec<DeskRun>> = OnceLock::new();
    RUNS.get_or_init(|| DESK_SEEDS.iter().map(|&s| desk_run(1.0, s)).collect())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn fdr_is_controlled_at_desk_scale() {
    let runs = strong_signal_runs();
    let fdp = mean(runs.iter().map(|r| r.fdp));
    assert!(verdict(
        "FDR control",
        fdp <= 0.30,
        format!("mean FDP {fdp:.3} over {} seeds (target 0.2, bound 0.30)", runs.len())
    ));
}

#[test]
fn power_grows_with_signal_strength() {
    let strong = mean(strong_signal_runs().iter().map(|r| r.power));
    let weak = mean(DESK_SEEDS.iter().map(|&s| desk_run(0.25, s).power));
    assert!(verdict(
        "power ordering",
        strong > weak,
        format!("mean power {strong:.3} at b=1 vs {weak:.3} at b=0.25")
    ));
}

// ------------------------------------------------------------ forecasting

struct CvRatios {
    sf_asinh: Vec<(f64, f64)>,
    counts: Vec<(f64, f64)>,
}

fn cv_results() -> &'static CvRatios {
    static CV: OnceLock<CvRatios> = OnceLock::new();
    CV.get_or_init(|| {
        let (set, _) = simulate(&desk_config(1.0, 1)).unwrap();
        let transfer = TransferForecaster {
            p: 2,
            q: 2,
            boost: pipeline_boost(1),
        };
        let methods: [&dyn Forecaster; 2] = [&CarryForward, &transfer];
        let run = |normalization| {
            let config = CvConfig {
                folds: 4,
                horizon: 5,
                normalization,
                seed: 1,
            };
            let report = cv_forecast_eval(&set, &methods, &config).unwrap();
            report
                .mae("transfer")
                .into_iter()
                .zip(report.mae("carry_forward"))
                .collect::<Vec<_>>()
        };
        CvRatios {
            sf_asinh: run(NormalizationMode::SizeFactorAsinh),
            counts: run(NormalizationMode::None),
        }
    })
}

#[test]
fn transfer_beats_carry_forward_on_transformed_scale() {
    let folds = &cv_results().sf_asinh;
    let wins = folds.iter().filter(|(t, c)| t < c).count();
    assert!(verdict(
        "forecast vs baseline",
        wins >= 3,
        format!("transfer wins {wins}/4 folds, (transfer, carry_forward) MAE {folds:.3?}")
    ));
}

#[test]
fn advantage_shrinks_without_transform() {
    let cv = cv_results();
    let ratio = |f: &[(f64, f64)]| mean(f.iter().map(|(t, c)| t / c));
    let (transformed, raw) = (ratio(&cv.sf_asinh), ratio(&cv.counts));
    assert!(verdict(
        "transformation sensitivity",
        raw >= transformed,
        format!(
            "MAE ratio transfer/carry_forward: {transformed:.3} on sf-asinh, {raw:.3} on counts; counts MAE {:.1?}",
            cv.counts
        )
    ));
}

// --------------------------------------------------------------- recursion

#[test]
fn recursion_chains_and_counterfactuals_are_antisymmetric() {
    let config = SimConfig {
        n_taxa: 12,
        n_subjects: 10,
        n_timepoints: 20,
        seed: 8,
        ..SimConfig::default()
    };
    let (raw, _) = simulate(&config).unwrap();
    let model = pipeline_recipe(8).fit(&raw).unwrap();
    let set = model.normalizer.apply(&raw).unwrap();

    let mut chain_ok = true;
    for subject in &set.subjects {
        let t = 12;
        let hist = subject.abundances.slice(s![.., ..t]).to_owned();
        let w_hist = subject.interventions.slice(s![.., ..t]).to_owned();
        let future = subject.interventions.slice(s![.., t..t + 3]).to_owned();
        let scenario = InterventionScenario::new(future.clone(), "observed").unwrap();
        let direct = forecast_from(&model, hist.view(), w_hist.view(), &subject.covariates, &scenario, 3).unwrap();

        let (mut y, mut w) = (hist, w_hist);
        let mut chained = Vec::new();
        for h in 0..3 {
            let step = InterventionScenario::new(future.slice(s![.., h..h + 1]).to_owned(), "step").unwrap();
            let next = forecast_from(&model, y.view(), w.view(), &subject.covariates, &step, 1).unwrap();
            chained.push(next.column(0).to_owned());
            y = concatenate![Axis(1), y, next];
            w = concatenate![Axis(1), w, future.slice(s![.., h..h + 1])];
        }
        for (h, col) in chained.iter().enumerate() {
            chain_ok &= direct.column(h).iter().zip(col).all(|(a, b)| a.to_bits() == b.to_bits());
        }
    }

    let (on, off) = toggle_scenarios(1, None, 4).unwrap();
    let ab = counterfactual_difference(&model, &set, &on, &off, 4, Anchor::Index(10)).unwrap();
    let ba = counterfactual_difference(&model, &set, &off, &on, 4, Anchor::Index(10)).unwrap();
    let antisym = ab.iter().zip(&ba).all(|(x, y)| {
        // `==` so that +0 and -0 agree; every other value must match exactly.
        x.diff.iter().zip(y.diff.iter()).all(|(a, b)| *a == -b)
    });
    let nonzero = ab.iter().any(|d| d.diff.iter().any(|&v| v != 0.0));

    assert!(verdict(
        "recursion",
        chain_ok && antisym && nonzero,
        format!("H=3 equals chained H=1: {chain_ok}; antisymmetric to the bit: {antisym}")
    ));
}

// -------------------------------------------------------------------- GBRT

fn mse(pred: &[f64], y: &[f64]) -> f64 {
    pred.iter().zip(y).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / y.len() as f64
}

#[test]
fn boosting_descends_fits_steps_and_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut increases = 0;
    let mut repeat_ok = true;
    for problem in 0..20 {
        let n = rng.random_range(40..200);
        let f = rng.random_range(1..8);
        let x: Vec<f64> = (0..n * f).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<f64> = (0..n)
            .map(|i| x[i * f].sin() * 3.0 + x[i * f + f - 1].powi(2) + rng.random_range(-0.5..0.5))
            .collect();
        let config = BoostConfig {
            n_rounds: 40,
            learning_rate: rng.random_range(0.05..1.0),
            max_depth: rng.random_range(1..5),
            min_samples_leaf: rng.random_range(1..6),
            seed: problem,
            ..BoostConfig::default()
        };
        let model = gbrt::fit(&x, f, &y, &config).unwrap();
        let curve: Vec<f64> = (0..=config.n_rounds)
            .map(|k| mse(&model.truncated(k).predict(&x).unwrap(), &y))
            .collect();
        // Floating-point slack only; each round's optimal leaves cannot raise the loss.
        increases += curve.windows(2).filter(|w| w[1] > w[0] * (1.0 + 1e-12)).count();
        repeat_ok &= gbrt::fit(&x, f, &y, &config).unwrap().to_json().unwrap() == model.to_json().unwrap();
    }

    let x: Vec<f64> = (0..100).map(|i| -1.0 + 2.0 * i as f64 / 100.0).collect();
    let y: Vec<f64> = x.iter().map(|&v| if v < 0.0 { 0.0 } else { 1.0 }).collect();
    let step = BoostConfig {
        n_rounds: 50,
        max_depth: 1,
        ..BoostConfig::default()
    };
    let step_mse = mse(&gbrt::fit(&x, 1, &y, &step).unwrap().predict(&x).unwrap(), &y);

    assert!(verdict(
        "boosting",
        increases == 0 && step_mse < 1e-3 && repeat_ok,
        format!("{increases} loss increases over 20 problems, step MSE {step_mse:.2e}, deterministic: {repeat_ok}")
    ));
}

// ------------------------------------------------------------ null symmetry

#[test]
fn null_mirrors_are_symmetric_and_selections_empty() {
    let mut fractions = Vec::new();
    let mut empty = 0;
    let n = 20;
    for seed in 0..n as u64 {
        let config = SimConfig {
            n_taxa: 20,
            pi0: 1.0,
            b: 0.0,
            seed,
            ..SimConfig::default()
        };
        let (set, _) = simulate(&config).unwrap();
        let report = select_lag0(&set, seed);
        let m: Vec<f64> = report.splits.iter().flat_map(|s| s.mirrors.iter().copied()).collect();
        let nonzero = m.iter().filter(|&&v| v != 0.0).count();
        let positive = m.iter().filter(|&&v| v > 0.0).count();
        if nonzero > 0 {
            fractions.push(positive as f64 / nonzero as f64);
        }
        if report.selected_taxa.is_empty() {
            empty += 1;
        }
    }
    let fraction = mean(fractions.iter().copied());
    let symmetric = (0.4..=0.6).contains(&fraction);
    let quiet = empty * 10 >= n * 9;
    assert!(verdict(
        "null symmetry",
        symmetric && quiet,
        format!(
            "positive fraction of nonzero mirrors {fraction:.3} (in [0.4, 0.6]: {symmetric}); \
             empty selections {empty}/{n} (need >= 90%: {quiet})"
        )
    ));
}

// ---------------------------------------------------------------- generator

/// Largest singular value by power iteration on AᵀA.
fn power_iteration_norm(a: &Array2<f64>) -> f64 {
    let ata = a.t().dot(a);
    let mut v = Array1::from_elem(a.ncols(), 1.0);
    let mut lambda = 0.0;
    for _ in 0..5000 {
        let w = ata.dot(&v);
        let norm = w.dot(&w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= 1e-15 * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.sqrt()
}

#[test]
fn generator_moments_norm_and_null_count() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut moments_ok = true;
    let mut detail = String::new();
    for (theta, phi) in [(10f64.ln(), 2.0), (3.0, 5.0), (0.5, 0.7)] {
        let mu = theta.exp();
        let n = 100_000;
        let draws: Vec<f64> = (0..n).map(|_| sample_nb(&mut rng, mu, phi)).collect();
        let m = draws.iter().sum::<f64>() / n as f64;
        let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1) as f64;
        let var = mu + mu * mu / phi;
        let (em, ev) = ((m - mu).abs() / mu, (v - var).abs() / var);
        moments_ok &= em <= 0.02 && ev <= 0.05;
        detail += &format!("mu {mu:.2}: mean err {:.2}%, var err {:.2}%; ", em * 100.0, ev * 100.0);
    }

    let mut norm_ok = true;
    let mut count_ok = true;
    for (j, pi0, seed) in [(100, 0.4, 1), (200, 0.1, 2), (40, 0.2, 3), (33, 0.3, 4), (10, 1.0, 5)] {
        let config = SimConfig {
            n_taxa: j,
            n_subjects: 4,
            pi0,
            seed,
            ..SimConfig::default()
        };
        let (_, truth) = simulate(&config).unwrap();
        let a = &truth.a_normalized;
        norm_ok &= (power_iteration_norm(a) - 1.0).abs() <= 1e-8 && (spectral_norm(a) - 1.0).abs() <= 1e-8;
        let expected = (pi0 * j as f64).floor() as usize;
        let j0 = null_set(&nonnull_sets(&truth.params, 0)[0], j);
        count_ok &= truth.null.len() == expected && j0.len() == expected;
    }
    assert!(verdict(
        "generator",
        moments_ok && norm_ok && count_ok,
        format!("{detail}unit spectral norm: {norm_ok}; null count exact: {count_ok}")
    ));
}

// --------------------------------------------------------- reproducibility

fn pipeline_bytes(dir: &std::path::Path) -> (Vec<u8>, String) {
    let config = SimConfig {
        n_taxa: 30,
        n_subjects: 20,
        seed: 12,
        ..SimConfig::default()
    };
    let (set, _) = simulate(&config).unwrap();
    let model = pipeline_recipe(12).fit(&set).unwrap();
    let mut select = SelectConfig::new(pipeline_recipe(12));
    select.n_splits = 10;
    select.lags = vec![0, 1];
    select.seed = 12;
    let (on, off) = toggle_scenarios(1, None, 2).unwrap();
    let report = select_taxa(&set, &on, &off, &select).unwrap();
    let path = dir.join("selection.csv");
    report.write_selection_csv(&path).unwrap();
    (std::fs::read(&path).unwrap(), model.to_json().unwrap())
}

#[test]
fn pipeline_is_bitwise_reproducible_across_threads() {
    let dir = tempfile::TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for (k, threads) in [1, 1, 4].into_iter().enumerate() {
        let sub = dir.path().join(k.to_string());
        std::fs::create_dir(&sub).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        outputs.push(pool.install(|| pipeline_bytes(&sub)));
    }
    let same = outputs.windows(2).all(|w| w[0] == w[1]);
    assert!(verdict(
        "reproducibility",
        same,
        format!("selection.csv and model identical over runs with 1, 1 and 4 threads: {same}")
    ));
}
