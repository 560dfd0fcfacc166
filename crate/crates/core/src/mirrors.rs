//! Data-splitting selection of intervention-affected taxa.
//!
//! Subjects are split into halves, a model is fit on each half, and the
//! partial dependence of every taxon on the intervention is compared across
//! halves through a mirror statistic
//!
//! ```text
//! M = sign(PD₁ · PD₂) (|PD₁| + |PD₂|)
//! ```
//!
//! Large positive mirrors mean both halves agree on a sizable effect; under
//! the null the mirror is symmetric about zero, so the count of mirrors
//! below `-t` estimates the false discoveries above `t`.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_f64, write_atomic};
use crate::normalize::{NormalizationMode, Normalizer};
use crate::transfer::{fit_transfer, forecast_from, FitRecipe, InterventionScenario, OneStepPredictor};
use crate::ts::{segment_targets, InterventionSeriesSet};

pub const DEFAULT_SPLITS: usize = 25;

/// Random halvings of the subjects.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    /// `(first half, second half)` subject indices, each sorted.
    pub splits: Vec<(Vec<usize>, Vec<usize>)>,
}

impl SplitPlan {
    /// Halves differ in size by at most one. Subjects are ordered by id
    /// before shuffling, so the plan does not depend on input order.
    pub fn new(set: &InterventionSeriesSet, n_splits: usize, seed: u64) -> Result<Self> {
        let n = set.n_subjects();
        if n < 4 {
            return Err(Error::invalid(format!("need at least 4 subjects to split, got {n}")));
        }
        if n_splits == 0 {
            return Err(Error::invalid("need at least one split"));
        }
        let mut by_id: Vec<usize> = (0..n).collect();
        by_id.sort_by(|&a, &b| set.subjects[a].id.cmp(&set.subjects[b].id));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let splits = (0..n_splits)
            .map(|_| {
                let mut order = by_id.clone();
                order.shuffle(&mut rng);
                let mut first = order[..n / 2].to_vec();
                let mut second = order[n / 2..].to_vec();
                first.sort_unstable();
                second.sort_unstable();
                (first, second)
            })
            .collect();
        Ok(SplitPlan { seed, splits })
    }

    pub fn len(&self) -> usize {
        self.splits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.splits.is_empty()
    }
}

/// Paired scenarios that switch interventions on or off for `horizon` steps.
///
/// With `channel = None` every channel is toggled; otherwise only that one
/// (the others stay at zero in both scenarios).
pub fn toggle_scenarios(
    n_channels: usize,
    channel: Option<usize>,
    horizon: usize,
) -> Result<(InterventionScenario, InterventionScenario)> {
    let mut on = Array2::zeros((n_channels, horizon));
    match channel {
        None => on.fill(1.0),
        Some(d) if d < n_channels => on.row_mut(d).fill(1.0),
        Some(d) => return Err(Error::invalid(format!("channel {d} out of range"))),
    }
    Ok((
        InterventionScenario::new(on, "on")?,
        InterventionScenario::constant(n_channels, horizon, 0.0, "off")?,
    ))
}

/// Mean difference between forecasts under `on` and `off`, per taxon
/// (rows) and lag (columns).
///
/// Every non-overlapping segment of `set` contributes one forecast pair from
/// its observed history. Lag `h` compares the forecasts `h + 1` steps ahead,
/// so lag 0 is the one-step effect. Intervention lags reaching back before
/// the forecast start take the scenario's first column.
pub fn partial_dependence_lags<M: OneStepPredictor + ?Sized>(
    model: &M,
    set: &InterventionSeriesSet,
    on: &InterventionScenario,
    off: &InterventionScenario,
    lags: &[usize],
) -> Result<Array2<f64>> {
    let Some(&max_lag) = lags.iter().max() else {
        return Err(Error::invalid("no lags requested"));
    };
    let horizon = max_lag + 1;
    let p = model.layout().p;
    let anchors: Vec<(usize, usize)> = set
        .subjects
        .iter()
        .enumerate()
        .flat_map(|(i, s)| segment_targets(s.n_observed(), p).into_iter().map(move |t| (i, t)))
        .collect();
    if anchors.is_empty() {
        return Err(Error::invalid("no segments to average over"));
    }
    let prior_on = on.values.slice(ndarray::s![.., ..1]);
    let prior_off = off.values.slice(ndarray::s![.., ..1]);
    let diffs = anchors
        .par_iter()
        .map(|&(i, t)| {
            let s = &set.subjects[i];
            let history = s.abundances.slice(ndarray::s![.., ..t]);
            let a = forecast_from(model, history, prior_on, &s.covariates, on, horizon)?;
            let b = forecast_from(model, history, prior_off, &s.covariates, off, horizon)?;
            Ok(a - b)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut pd = Array2::zeros((model.layout().n_taxa, lags.len()));
    for d in &diffs {
        for (l, &h) in lags.iter().enumerate() {
            let mut col = pd.column_mut(l);
            col += &d.column(h);
        }
    }
    pd /= diffs.len() as f64;
    Ok(pd)
}

/// Partial dependence of each taxon at a single lag.
pub fn partial_dependence<M: OneStepPredictor + ?Sized>(
    model: &M,
    set: &InterventionSeriesSet,
    on: &InterventionScenario,
    off: &InterventionScenario,
    lag: usize,
) -> Result<Vec<f64>> {
    Ok(partial_dependence_lags(model, set, on, off, &[lag])?
        .column(0)
        .to_vec())
}

/// Sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub fn mirror(pd1: f64, pd2: f64) -> f64 {
    sign(pd1 * pd2) * (pd1.abs() + pd2.abs())
}

pub fn mirror_statistics(pd1: &[f64], pd2: &[f64]) -> Result<Vec<f64>> {
    if pd1.len() != pd2.len() {
        return Err(Error::invalid(format!(
            "partial dependence vectors differ in length ({} vs {})",
            pd1.len(),
            pd2.len()
        )));
    }
    Ok(pd1.iter().zip(pd2).map(|(&a, &b)| mirror(a, b)).collect())
}

/// `#{M < -t} / max(1, #{M > t})`.
pub fn estimated_fdp(mirrors: &[f64], t: f64) -> f64 {
    let neg = mirrors.iter().filter(|&&m| m < -t).count();
    let pos = mirrors.iter().filter(|&&m| m > t).count();
    neg as f64 / pos.max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    /// `+∞` when no threshold qualifies.
    pub t: f64,
    /// Indices with `M > t`, ascending.
    pub selected: Vec<usize>,
}

/// Smallest candidate `t ∈ {0} ∪ {|M_j|}` whose estimated FDP is at most
/// `q` with at least one mirror above `t`.
pub fn fdp_threshold(mirrors: &[f64], q: f64) -> Threshold {
    let mut pos: Vec<f64> = mirrors.iter().copied().filter(|&m| m > 0.0).collect();
    let mut neg: Vec<f64> = mirrors.iter().filter(|&&m| m < 0.0).map(|m| -m).collect();
    pos.sort_by(f64::total_cmp);
    neg.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = std::iter::once(0.0)
        .chain(mirrors.iter().map(|m| m.abs()))
        .collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    for t in candidates {
        let above = pos.len() - pos.partition_point(|&m| m <= t);
        if above == 0 {
            break;
        }
        let below = neg.len() - neg.partition_point(|&m| m <= t);
        if below as f64 / above as f64 <= q {
            let selected = (0..mirrors.len()).filter(|&j| mirrors[j] > t).collect();
            return Threshold { t, selected };
        }
    }
    Threshold {
        t: f64::INFINITY,
        selected: Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub inclusion: Vec<f64>,
    pub cutoff: f64,
    pub selected: Vec<usize>,
}

/// Inclusion rates `(1/n) Σ_k 1{j ∈ S_k} / max(1, |S_k|)`.
pub fn inclusion_rates(selections: &[Vec<usize>], n_units: usize) -> Vec<f64> {
    let n = selections.len() as f64;
    let mut rates = vec![0.0; n_units];
    for s in selections {
        let w = 1.0 / s.len().max(1) as f64;
        for &j in s {
            rates[j] += w;
        }
    }
    rates.iter_mut().for_each(|r| *r /= n);
    rates
}

/// Combine per-split selections: sort the inclusion rates ascending, take
/// the longest prefix whose running sum stays within `q`, and keep units
/// whose rate exceeds the prefix's largest value.
pub fn multi_split_select(selections: &[Vec<usize>], n_units: usize, q: f64) -> Result<Aggregate> {
    if selections.len() < 2 {
        return Err(Error::invalid("aggregation needs at least two splits"));
    }
    if let Some(&bad) = selections.iter().flatten().find(|&&j| j >= n_units) {
        return Err(Error::invalid(format!("selected unit {bad} out of range")));
    }
    let inclusion = inclusion_rates(selections, n_units);
    Ok(aggregate_rates(inclusion, q))
}

pub fn aggregate_rates(inclusion: Vec<f64>, q: f64) -> Aggregate {
    let mut sorted = inclusion.clone();
    sorted.sort_by(f64::total_cmp);
    let mut cutoff = 0.0;
    let mut sum = 0.0;
    for &r in &sorted {
        sum += r;
        if sum > q {
            break;
        }
        cutoff = r;
    }
    let selected = (0..inclusion.len()).filter(|&j| inclusion[j] > cutoff).collect();
    Aggregate {
        inclusion,
        cutoff,
        selected,
    }
}

/// Settings for [`select_taxa`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectConfig {
    pub recipe: FitRecipe,
    /// Target false discovery rate.
    pub fdr: f64,
    pub n_splits: usize,
    pub lags: Vec<usize>,
    pub seed: u64,
}

impl SelectConfig {
    pub fn new(recipe: FitRecipe) -> Self {
        SelectConfig {
            recipe,
            fdr: 0.2,
            n_splits: DEFAULT_SPLITS,
            lags: vec![0],
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fdr > 0.0 && self.fdr < 1.0) {
            return Err(Error::invalid(format!("FDR target must lie in (0, 1), got {}", self.fdr)));
        }
        if self.n_splits < 2 {
            return Err(Error::invalid("need at least two splits"));
        }
        if self.lags.is_empty() {
            return Err(Error::invalid("need at least one lag"));
        }
        let mut lags = self.lags.clone();
        lags.sort_unstable();
        lags.dedup();
        if lags.len() != self.lags.len() {
            return Err(Error::invalid("lags must be distinct"));
        }
        self.recipe.boost.validate()
    }
}

/// Partial dependence and mirrors for one split, indexed `[taxon, lag]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMirrors {
    pub pd1: Array2<f64>,
    pub pd2: Array2<f64>,
    pub mirrors: Array2<f64>,
    /// Threshold over the pooled (taxon, lag) units.
    pub threshold: Threshold,
}

/// Selection run separately for one lag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LagSelection {
    pub lag: usize,
    pub aggregate: Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MirrorReport {
    pub config: SelectConfig,
    pub taxa_names: Vec<String>,
    pub plan: SplitPlan,
    pub splits: Vec<SplitMirrors>,
    /// Pooled aggregation; unit `j * n_lags + l` is taxon `j` at `lags[l]`.
    pub pooled: Aggregate,
    pub per_lag: Vec<LagSelection>,
    /// Taxa with at least one selected lag in the pooled aggregation.
    pub selected_taxa: Vec<usize>,
}

impl MirrorReport {
    pub fn n_lags(&self) -> usize {
        self.config.lags.len()
    }

    /// `(taxon, lag)` for a pooled unit index.
    pub fn unit(&self, u: usize) -> (usize, usize) {
        (u / self.n_lags(), self.config.lags[u % self.n_lags()])
    }

    pub fn selected_names(&self) -> Vec<&str> {
        self.selected_taxa.iter().map(|&j| self.taxa_names[j].as_str()).collect()
    }

    /// Taxa selected at `lag` in the pooled aggregation.
    pub fn selected_at_lag(&self, lag: usize) -> Vec<usize> {
        let Some(l) = self.config.lags.iter().position(|&h| h == lag) else {
            return Vec::new();
        };
        self.pooled
            .selected
            .iter()
            .filter(|&&u| u % self.n_lags() == l)
            .map(|&u| u / self.n_lags())
            .collect()
    }

    /// Columns `split,taxon,lag,pd1,pd2,m`; splits are numbered from 1.
    pub fn write_mirrors_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["split", "taxon", "lag", "pd1", "pd2", "m"])?;
        for (k, s) in self.splits.iter().enumerate() {
            for (j, name) in self.taxa_names.iter().enumerate() {
                for (l, lag) in self.config.lags.iter().enumerate() {
                    w.write_record([
                        &(k + 1).to_string(),
                        name.as_str(),
                        &lag.to_string(),
                        &fmt_f64(s.pd1[[j, l]]),
                        &fmt_f64(s.pd2[[j, l]]),
                        &fmt_f64(s.mirrors[[j, l]]),
                    ])?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Columns `taxon,lag,inclusion_rate,selected` over pooled units.
    pub fn write_selection_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["taxon", "lag", "inclusion_rate", "selected"])?;
        for (u, &rate) in self.pooled.inclusion.iter().enumerate() {
            let (j, lag) = self.unit(u);
            let selected = self.pooled.selected.binary_search(&u).is_ok();
            w.write_record([
                self.taxa_names[j].as_str(),
                &lag.to_string(),
                &fmt_f64(rate),
                if selected { "true" } else { "false" },
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn metadata(&self) -> RunMetadata {
        RunMetadata {
            fdr: self.config.fdr,
            seed: self.config.seed,
            boost_seed: self.config.recipe.boost.seed,
            n_splits: self.config.n_splits,
            p: self.config.recipe.p,
            q: self.config.recipe.q,
            lags: self.config.lags.clone(),
            normalization: self.config.recipe.normalization,
            selected_taxa: self.selected_names().iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn write_metadata(&self, path: &Path) -> Result<()> {
        write_atomic(path, serde_json::to_string_pretty(&self.metadata())?.as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub fdr: f64,
    pub seed: u64,
    pub boost_seed: u64,
    pub n_splits: usize,
    pub p: usize,
    pub q: usize,
    pub lags: Vec<usize>,
    pub normalization: NormalizationMode,
    pub selected_taxa: Vec<String>,
}

/// Row-major over `[taxon, lag]`, so unit `j * n_lags + l`.
fn pooled_units(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

/// Full selection pipeline: normalize the pooled data once, then for every
/// split fit one model per half, compare partial dependence at each lag,
/// threshold the pooled mirrors and aggregate across splits.
pub fn select_taxa(
    set: &InterventionSeriesSet,
    on: &InterventionScenario,
    off: &InterventionScenario,
    config: &SelectConfig,
) -> Result<MirrorReport> {
    config.validate()?;
    let max_lag = *config.lags.iter().max().expect("validated");
    if on.horizon() <= max_lag || off.horizon() <= max_lag {
        return Err(Error::invalid(format!(
            "scenarios must cover at least {} steps for lag {max_lag}",
            max_lag + 1
        )));
    }
    let recipe = &config.recipe;
    if recipe.normalization != NormalizationMode::None && set.scale != crate::ts::ScaleTag::Counts {
        return Err(Error::Scale(format!(
            "cannot apply {} to {} data",
            recipe.normalization.as_str(),
            set.scale.as_str()
        )));
    }
    let data = Normalizer::fit(set, recipe.normalization)?.apply(set)?;
    let plan = SplitPlan::new(&data, config.n_splits, config.seed)?;
    let n_lags = config.lags.len();
    let j = data.n_taxa();

    let half_pd = |half: &[usize]| -> Result<Array2<f64>> {
        let part = data.select_subjects(half);
        let model = fit_transfer(&part, recipe.p, recipe.q, &recipe.boost)?;
        partial_dependence_lags(&model, &part, on, off, &config.lags)
    };
    let splits = plan
        .splits
        .par_iter()
        .map(|(first, second)| {
            let pd1 = half_pd(first)?;
            let pd2 = half_pd(second)?;
            let mirrors = ndarray::Zip::from(&pd1).and(&pd2).map_collect(|&a, &b| mirror(a, b));
            let threshold = fdp_threshold(&pooled_units(&mirrors), config.fdr);
            Ok(SplitMirrors {
                pd1,
                pd2,
                mirrors,
                threshold,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let pooled_sel: Vec<Vec<usize>> = splits.iter().map(|s| s.threshold.selected.clone()).collect();
    let pooled = multi_split_select(&pooled_sel, j * n_lags, config.fdr)?;
    let per_lag = config
        .lags
        .iter()
        .enumerate()
        .map(|(l, &lag)| {
            let sel: Vec<Vec<usize>> = splits
                .iter()
                .map(|s| fdp_threshold(&s.mirrors.column(l).to_vec(), config.fdr).selected)
                .collect();
            Ok(LagSelection {
                lag,
                aggregate: multi_split_select(&sel, j, config.fdr)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut selected_taxa: Vec<usize> = pooled.selected.iter().map(|&u| u / n_lags).collect();
    selected_taxa.dedup();

    Ok(MirrorReport {
        config: config.clone(),
        taxa_names: data.taxa_names.clone(),
        plan,
        splits,
        pooled,
        per_lag,
        selected_taxa,
    })
}
