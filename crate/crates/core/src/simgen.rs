//! Negative-binomial vector-autoregressive simulator with pulse
//! interventions and host interactions.
//!
//! ```text
//! θ_t = Σ_{p=1..P} A_p θ_{t-p} + Σ_{q=0..Q-1} (B_q + C_q z) w_{t-q} + ε_t
//! y_tj ~ NB(mean exp θ_tj, dispersion φ_ij),  Var = μ + μ²/φ
//! ```
//!
//! Intervention lags are indexed from 0 so `B_0` carries the instantaneous
//! effect. One normalized matrix `A` (‖A‖₂ = 1) is shared by all lags as
//! `A_p = A / P`. The first `J - ⌊π₀ J⌋` taxa are nonnull.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ts::{InterventionSeriesSet, ScaleTag, SubjectSeries};

/// Upper bound on the log-mean; keeps Poisson rates representable.
const MAX_LOG_MEAN: f64 = 30.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub n_taxa: usize,
    pub n_channels: usize,
    pub n_covariates: usize,
    pub n_subjects: usize,
    pub n_timepoints: usize,
    pub p_true: usize,
    pub q_true: usize,
    /// Fraction of null taxa.
    pub pi0: f64,
    /// Signal strength: nonnull effects lie in ±[b, 2b].
    pub b: f64,
    /// Probability that a nonnull taxon has no host interaction.
    pub p_c: f64,
    /// Probability of zeroing an entry of the autoregressive matrix.
    pub p_a: f64,
    pub rank: usize,
    pub sigma_eps: f64,
    pub sigma_z: f64,
    pub sigma_a: f64,
    /// Gamma shape for per-subject, per-taxon dispersions.
    pub dispersion_shape: f64,
    /// Gamma rate for per-subject, per-taxon dispersions.
    pub dispersion_rate: f64,
    /// Minimum pulse length; lengths are uniform on `L..=2L`.
    pub intervention_length: usize,
    pub theta_init_mean: f64,
    pub theta_init_sd: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_taxa: 100,
            n_channels: 1,
            n_covariates: 1,
            n_subjects: 50,
            n_timepoints: 30,
            p_true: 3,
            q_true: 3,
            pi0: 0.4,
            b: 1.0,
            p_c: 0.2,
            p_a: 0.4,
            rank: 5,
            sigma_eps: 0.1,
            sigma_z: 1.0,
            sigma_a: 1.0,
            dispersion_shape: 2.0,
            dispersion_rate: 0.5,
            intervention_length: 5,
            theta_init_mean: 10f64.ln(),
            theta_init_sd: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must lie in [0, 1], got {v}")))
            }
        };
        prob("pi0", self.pi0)?;
        prob("p_c", self.p_c)?;
        prob("p_a", self.p_a)?;
        if !(self.b >= 0.0) {
            return Err(Error::invalid(format!("b must be nonnegative, got {}", self.b)));
        }
        for (name, v) in [
            ("sigma_eps", self.sigma_eps),
            ("sigma_z", self.sigma_z),
            ("sigma_a", self.sigma_a),
            ("theta_init_sd", self.theta_init_sd),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if !(self.dispersion_shape > 0.0 && self.dispersion_rate > 0.0) {
            return Err(Error::invalid("dispersion shape and rate must be positive"));
        }
        if self.n_channels != 1 || self.n_covariates != 1 {
            return Err(Error::invalid(
                "the simulator supports exactly one intervention channel and one covariate",
            ));
        }
        if self.n_taxa == 0 || self.n_subjects == 0 || self.p_true == 0 || self.q_true == 0 {
            return Err(Error::invalid("n_taxa, n_subjects, p_true and q_true must be positive"));
        }
        if self.n_timepoints < 3 {
            return Err(Error::invalid("n_timepoints must be at least 3"));
        }
        if self.intervention_length == 0 {
            return Err(Error::invalid("intervention_length must be positive"));
        }
        Ok(())
    }

    /// `⌊π₀ J⌋`.
    pub fn n_null(&self) -> usize {
        (self.pi0 * self.n_taxa as f64).floor() as usize
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: SimConfig = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }
}

/// Generator parameters shared by every subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimParams {
    /// `A_1 … A_P`, each J × J.
    pub a: Vec<Array2<f64>>,
    /// `B_0 … B_{Q-1}`, each J × D.
    pub b: Vec<Array2<f64>>,
    /// `C_0 … C_{Q-1}`, each J × D.
    pub c: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionWindow {
    pub start: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    /// The spectrally normalized matrix before it is split across lags.
    pub a_normalized: Array2<f64>,
    pub params: SimParams,
    pub nonnull: Vec<usize>,
    pub null: Vec<usize>,
    /// Nonnull taxa whose interaction rows were zeroed.
    pub interaction_null: Vec<usize>,
    pub windows: Vec<InterventionWindow>,
    pub z: Vec<f64>,
    /// n_subjects × J.
    pub dispersions: Array2<f64>,
}

impl SimTruth {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, serde_json::to_string(self)?.as_bytes())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&s)?)
    }
}

/// Largest singular value.
pub fn spectral_norm(a: &Array2<f64>) -> f64 {
    let (r, c) = a.dim();
    let m = DMatrix::from_fn(r, c, |i, j| a[[i, j]]);
    m.singular_values().max()
}

/// Uniform on `[-2b, -b] ∪ [b, 2b]`.
fn signed_effect(rng: &mut impl Rng, b: f64) -> f64 {
    let magnitude = if b > 0.0 { rng.random_range(b..=2.0 * b) } else { 0.0 };
    if rng.random::<bool>() {
        magnitude
    } else {
        -magnitude
    }
}

/// Draw `A`, `B`, `C` from `config` using the master seed.
pub fn draw_params(config: &SimConfig) -> Result<(SimParams, Array2<f64>, Vec<usize>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (j, d, k) = (config.n_taxa, config.n_channels, config.rank);
    let n_nonnull = j - config.n_null();

    let normal_a = Normal::new(0.0, config.sigma_a).map_err(|e| Error::invalid(e.to_string()))?;
    let factors = Array2::from_shape_fn((j, k), |_| normal_a.sample(&mut rng));
    let mut a = factors.dot(&factors.t());
    for v in a.iter_mut() {
        if rng.random::<f64>() < config.p_a {
            *v = 0.0;
        }
    }
    let norm = spectral_norm(&a);
    if norm > 0.0 {
        a /= norm;
    }

    let mut interaction_null = Vec::new();
    let has_interaction: Vec<bool> = (0..j)
        .map(|row| {
            let keep = row < n_nonnull && rng.random::<f64>() >= config.p_c;
            if row < n_nonnull && !keep {
                interaction_null.push(row);
            }
            keep
        })
        .collect();
    let mut b = Vec::with_capacity(config.q_true);
    let mut c = Vec::with_capacity(config.q_true);
    for _ in 0..config.q_true {
        let mut bq = Array2::zeros((j, d));
        let mut cq = Array2::zeros((j, d));
        for row in 0..n_nonnull {
            for ch in 0..d {
                bq[[row, ch]] = signed_effect(&mut rng, config.b);
                let cv = signed_effect(&mut rng, config.b);
                if has_interaction[row] {
                    cq[[row, ch]] = cv;
                }
            }
        }
        b.push(bq);
        c.push(cq);
    }
    let a_lags = (0..config.p_true)
        .map(|_| &a / config.p_true as f64)
        .collect();
    Ok((SimParams { a: a_lags, b, c }, a, interaction_null))
}

/// One negative-binomial draw as a Gamma–Poisson mixture.
pub fn sample_nb(rng: &mut impl Rng, mean: f64, dispersion: f64) -> f64 {
    if !(mean > 0.0) {
        return 0.0;
    }
    let rate = Gamma::new(dispersion, mean / dispersion)
        .expect("positive gamma parameters")
        .sample(rng);
    if !(rate > 0.0) {
        return 0.0;
    }
    Poisson::new(rate).expect("finite positive rate").sample(rng)
}

/// Stream seed for subject `i`.
fn subject_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 finalizer over (seed, i)
    let mut x = seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

struct SubjectDraw {
    series: SubjectSeries,
    window: InterventionWindow,
    z: f64,
    dispersions: Vec<f64>,
}

fn simulate_subject(config: &SimConfig, params: &SimParams, i: usize) -> Result<SubjectDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(config.seed, i));
    let (j, t_len) = (config.n_taxa, config.n_timepoints);
    let bad = |e: rand_distr::NormalError| Error::invalid(e.to_string());

    let z = Normal::new(0.0, config.sigma_z).map_err(bad)?.sample(&mut rng);
    let dispersion = Gamma::new(config.dispersion_shape, 1.0 / config.dispersion_rate)
        .map_err(|e| Error::invalid(e.to_string()))?;
    let dispersions: Vec<f64> = (0..j).map(|_| dispersion.sample(&mut rng).max(1e-12)).collect();

    let lo = t_len.div_ceil(3);
    let hi = (2 * t_len / 3).max(lo);
    let start = rng.random_range(lo..=hi);
    let length = rng.random_range(config.intervention_length..=2 * config.intervention_length);
    let end = (start + length).min(t_len);
    let mut w = Array2::zeros((1, t_len));
    for t in start..end {
        w[[0, t]] = 1.0;
    }

    let init = Normal::new(config.theta_init_mean, config.theta_init_sd).map_err(bad)?;
    let noise = Normal::new(0.0, config.sigma_eps).map_err(bad)?;
    let p = params.a.len();
    // theta[k] holds θ at time k - p; the first p columns are initial lags.
    let mut theta = Array2::<f64>::zeros((j, p + t_len));
    for v in theta.slice_mut(ndarray::s![.., ..p]).iter_mut() {
        *v = init.sample(&mut rng);
    }
    let mut y = Array2::zeros((j, t_len));
    for t in 0..t_len {
        let mut next = ndarray::Array1::<f64>::zeros(j);
        for (lag, a) in params.a.iter().enumerate() {
            next += &a.dot(&theta.column(p + t - lag - 1));
        }
        for (q, (bq, cq)) in params.b.iter().zip(&params.c).enumerate() {
            if t < q {
                break;
            }
            let wt = w.column(t - q);
            next += &(bq + &(cq * z)).dot(&wt);
        }
        for v in next.iter_mut() {
            *v += noise.sample(&mut rng);
        }
        theta.column_mut(p + t).assign(&next);
        for (row, &th) in next.iter().enumerate() {
            y[[row, t]] = sample_nb(&mut rng, th.min(MAX_LOG_MEAN).exp(), dispersions[row]);
        }
    }

    let series = SubjectSeries::new(
        subject_name(i),
        (0..t_len).map(|t| t as f64).collect(),
        y,
        w,
        vec![z],
    )?;
    Ok(SubjectDraw {
        series,
        window: InterventionWindow {
            start,
            length: end - start,
        },
        z,
        dispersions,
    })
}

pub fn subject_name(i: usize) -> String {
    format!("S{:03}", i + 1)
}

pub fn taxon_name(j: usize) -> String {
    format!("tax{:03}", j + 1)
}

/// Simulate with explicitly supplied parameters.
pub fn simulate_with(config: &SimConfig, params: SimParams) -> Result<(InterventionSeriesSet, SimTruth)> {
    config.validate()?;
    let j = config.n_taxa;
    if params.a.iter().chain(&params.b).chain(&params.c).any(|m| m.nrows() != j) {
        return Err(Error::invalid("parameter matrices must have one row per taxon"));
    }
    let draws = (0..config.n_subjects)
        .into_par_iter()
        .map(|i| simulate_subject(config, &params, i))
        .collect::<Result<Vec<_>>>()?;

    let n_null = config.n_null();
    let mut dispersions = Array2::zeros((config.n_subjects, j));
    for (i, d) in draws.iter().enumerate() {
        for (k, &v) in d.dispersions.iter().enumerate() {
            dispersions[[i, k]] = v;
        }
    }
    let truth = SimTruth {
        a_normalized: params
            .a
            .first()
            .map(|a| a * params.a.len() as f64)
            .unwrap_or_else(|| Array2::zeros((j, j))),
        params,
        nonnull: (0..j - n_null).collect(),
        null: (j - n_null..j).collect(),
        interaction_null: Vec::new(),
        windows: draws.iter().map(|d| d.window.clone()).collect(),
        z: draws.iter().map(|d| d.z).collect(),
        dispersions,
    };
    let set = InterventionSeriesSet::new(
        draws.into_iter().map(|d| d.series).collect(),
        (0..j).map(taxon_name).collect(),
        vec!["D1".to_string()],
        vec!["z".to_string()],
        ScaleTag::Counts,
    )?;
    Ok((set, truth))
}

pub fn simulate(config: &SimConfig) -> Result<(InterventionSeriesSet, SimTruth)> {
    let (params, a, interaction_null) = draw_params(config)?;
    let (set, mut truth) = simulate_with(config, params)?;
    truth.a_normalized = a;
    truth.interaction_null = interaction_null;
    Ok((set, truth))
}

/// Ground-truth nonnull sets `J₁(h)` for `h = 0..=h_max`.
///
/// `J₁(h)` holds taxa with a nonzero `B_h` row, plus taxa reached through a
/// nonzero entry `A_p[j, k]` from some `k ∈ J₁(h - p)`, for `p ≤ min(h, P)`.
pub fn nonnull_sets(params: &SimParams, h_max: usize) -> Vec<BTreeSet<usize>> {
    let j = params
        .b
        .first()
        .or(params.a.first())
        .map(|m| m.nrows())
        .unwrap_or(0);
    let mut sets: Vec<BTreeSet<usize>> = Vec::with_capacity(h_max + 1);
    for h in 0..=h_max {
        let mut set = BTreeSet::new();
        if let Some(bh) = params.b.get(h) {
            for row in 0..j {
                if bh.row(row).iter().any(|&v| v != 0.0) {
                    set.insert(row);
                }
            }
        }
        for p in 1..=h.min(params.a.len()) {
            let a = &params.a[p - 1];
            let source = &sets[h - p];
            for row in 0..j {
                if source.iter().any(|&k| a[[row, k]] != 0.0) {
                    set.insert(row);
                }
            }
        }
        sets.push(set);
    }
    sets
}

/// Complement of `J₁(h)` within `0..n_taxa`.
pub fn null_set(nonnull: &BTreeSet<usize>, n_taxa: usize) -> BTreeSet<usize> {
    (0..n_taxa).filter(|j| !nonnull.contains(j)).collect()
}
