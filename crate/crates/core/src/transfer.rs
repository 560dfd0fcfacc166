//! Transfer-function models: one boosted ensemble per taxon over lagged
//! abundances, lagged interventions, and subject covariates.
//!
//! Forecasts past one step feed earlier predictions back in as abundance
//! lags, unrounded and unclipped. Intervention lags come from the observed
//! interventions followed by the scenario's columns.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbrt::{self, BoostConfig, FeatureMatrix, TreeEnsemble};
use crate::io::{csv_writer, fmt_f64};
use crate::normalize::{NormalizationMode, Normalizer};
use crate::ts::{layout_for, segment_windows, FeatureLayout, InterventionSeriesSet, ScaleTag, SubjectSeries};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Anything that maps one lagged feature row to a prediction for every taxon.
pub trait OneStepPredictor: Sync {
    fn layout(&self) -> FeatureLayout;

    /// Write one prediction per taxon into `out`.
    fn predict_taxa(&self, features: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferModel {
    pub format_version: u32,
    pub p: usize,
    pub q: usize,
    pub layout: FeatureLayout,
    pub taxa_names: Vec<String>,
    pub intervention_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub scale: ScaleTag,
    /// How raw counts were transformed before training.
    pub normalizer: Normalizer,
    pub boost: BoostConfig,
    pub ensembles: Vec<TreeEnsemble>,
}

impl OneStepPredictor for TransferModel {
    fn layout(&self) -> FeatureLayout {
        self.layout
    }

    fn predict_taxa(&self, features: &[f64], out: &mut [f64]) {
        for (o, e) in out.iter_mut().zip(&self.ensembles) {
            *o = e.predict_row(features);
        }
    }
}

/// Seed for taxon `j`'s ensemble; independent of scheduling and data order.
pub fn taxon_seed(global: u64, j: usize) -> u64 {
    global ^ j as u64
}

/// Fit one ensemble per taxon on non-overlapping segments of `set`.
pub fn fit_transfer(
    set: &InterventionSeriesSet,
    p: usize,
    q: usize,
    boost: &BoostConfig,
) -> Result<TransferModel> {
    boost.validate()?;
    if set.n_taxa() == 0 {
        return Err(Error::invalid("no taxa to model"));
    }
    let layout = layout_for(set, p, q);
    let mut windows = segment_windows(set, p, q)?;
    // Canonical row order makes the fit independent of subject order.
    windows.sort_by(|a, b| {
        set.subjects[a.subject]
            .id
            .cmp(&set.subjects[b.subject].id)
            .then(a.target_index.cmp(&b.target_index))
    });
    let rows: Vec<f64> = windows.iter().flat_map(|w| w.features.iter().copied()).collect();
    let data = FeatureMatrix::from_row_major(&rows, layout.width())?;

    let ensembles = (0..set.n_taxa())
        .into_par_iter()
        .map(|j| {
            let targets: Vec<f64> = windows
                .iter()
                .map(|w| set.subjects[w.subject].abundances[[j, w.target_index]])
                .collect();
            gbrt::fit_prepared(&data, &targets, &boost.with_seed(taxon_seed(boost.seed, j)))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(TransferModel {
        format_version: MODEL_FORMAT_VERSION,
        p,
        q,
        layout,
        taxa_names: set.taxa_names.clone(),
        intervention_names: set.intervention_names.clone(),
        covariate_names: set.covariate_names.clone(),
        scale: set.scale,
        normalizer: Normalizer::identity(),
        boost: *boost,
        ensembles,
    })
}

/// Lag orders, normalization and boosting settings for one model fit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRecipe {
    pub p: usize,
    pub q: usize,
    pub normalization: NormalizationMode,
    pub boost: BoostConfig,
}

impl FitRecipe {
    pub fn new(p: usize, q: usize) -> Self {
        FitRecipe {
            p,
            q,
            normalization: NormalizationMode::None,
            boost: BoostConfig::default(),
        }
    }

    /// Fit the normalizer on `set`, then the transfer model on the
    /// normalized data. The normalizer is stored in the model.
    pub fn fit(&self, set: &InterventionSeriesSet) -> Result<TransferModel> {
        if self.normalization != NormalizationMode::None && set.scale != ScaleTag::Counts {
            return Err(Error::Scale(format!(
                "cannot apply {} to {} data",
                self.normalization.as_str(),
                set.scale.as_str()
            )));
        }
        let normalizer = Normalizer::fit(set, self.normalization)?;
        let normalized = normalizer.apply(set)?;
        let mut model = fit_transfer(&normalized, self.p, self.q, &self.boost)?;
        model.normalizer = normalizer;
        Ok(model)
    }
}

impl TransferModel {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: TransferModel = serde_json::from_str(s)?;
        if m.format_version != MODEL_FORMAT_VERSION {
            return Err(Error::Version(m.format_version));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    /// Check that `set` has this model's taxa, channels and covariates.
    pub fn check_compatible(&self, set: &InterventionSeriesSet) -> Result<()> {
        if set.taxa_names != self.taxa_names
            || set.intervention_names != self.intervention_names
            || set.covariate_names != self.covariate_names
        {
            return Err(Error::invalid(
                "data taxa, intervention channels or covariates differ from the model's",
            ));
        }
        if set.scale != self.scale {
            return Err(Error::Scale(format!(
                "model trained on {} data, got {}",
                self.scale.as_str(),
                set.scale.as_str()
            )));
        }
        Ok(())
    }
}

/// Hypothetical intervention values over a forecast window (D × H).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionScenario {
    pub values: Array2<f64>,
    pub label: String,
}

impl InterventionScenario {
    pub fn new(values: Array2<f64>, label: impl Into<String>) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::invalid("scenario must cover at least one timepoint"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("scenario"));
        }
        Ok(InterventionScenario {
            values,
            label: label.into(),
        })
    }

    /// Every channel held at `value` for `h` steps.
    pub fn constant(n_channels: usize, h: usize, value: f64, label: impl Into<String>) -> Result<Self> {
        Self::new(Array2::from_elem((n_channels, h), value), label)
    }

    pub fn horizon(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }
}

/// Step scenarios: for every start (1-based) and length, the `active`
/// channels are 1 on columns `start..start+length-1` and 0 elsewhere.
pub fn steps(
    intervention_names: &[String],
    active: &[&str],
    starts: &[usize],
    lengths: &[usize],
    window: usize,
) -> Result<Vec<InterventionScenario>> {
    let rows: Vec<usize> = active
        .iter()
        .map(|name| {
            intervention_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| Error::invalid(format!("unknown intervention channel `{name}`")))
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(starts.len() * lengths.len());
    for &start in starts {
        for &len in lengths {
            if start == 0 || start + len > window + 1 {
                return Err(Error::invalid(format!(
                    "step starting at {start} with length {len} does not fit a window of {window}"
                )));
            }
            let mut values = Array2::zeros((intervention_names.len(), window));
            for &r in &rows {
                for c in start - 1..start - 1 + len {
                    values[[r, c]] = 1.0;
                }
            }
            out.push(InterventionScenario::new(values, format!("start{start}_len{len}"))?);
        }
    }
    Ok(out)
}

/// Recursive forecast for `horizon` steps.
///
/// `history` holds observed abundances (J × t, t ≥ P); `prior_interventions`
/// holds the intervention columns preceding the forecast window (at least
/// one). Step `h` predicts index `t + h` from abundance lags
/// `t+h-1, …, t+h-P` (observed or earlier predictions) and intervention lags
/// read from `prior_interventions` followed by `scenario`.
pub fn forecast_from<M: OneStepPredictor + ?Sized>(
    model: &M,
    history: ArrayView2<'_, f64>,
    prior_interventions: ArrayView2<'_, f64>,
    covariates: &[f64],
    scenario: &InterventionScenario,
    horizon: usize,
) -> Result<Array2<f64>> {
    let layout = model.layout();
    let (j, t) = history.dim();
    if j != layout.n_taxa {
        return Err(Error::invalid(format!(
            "history has {j} taxa, model expects {}",
            layout.n_taxa
        )));
    }
    if t < layout.p {
        return Err(Error::invalid(format!(
            "history of length {t} is shorter than P = {}",
            layout.p
        )));
    }
    if scenario.horizon() < horizon {
        return Err(Error::invalid(format!(
            "scenario covers {} steps, horizon is {horizon}",
            scenario.horizon()
        )));
    }
    if scenario.n_channels() != layout.n_channels || prior_interventions.nrows() != layout.n_channels {
        return Err(Error::invalid("intervention channel count differs from the model's"));
    }
    if prior_interventions.ncols() == 0 {
        return Err(Error::invalid("need at least one intervention column before the forecast"));
    }
    if covariates.len() != layout.n_covariates {
        return Err(Error::invalid("covariate count differs from the model's"));
    }

    let n_prior = prior_interventions.ncols() as isize;
    let w_at = |idx: isize, out: &mut Vec<f64>| {
        // `idx` is relative to the forecast start; negative reads the prior block.
        if idx >= 0 {
            out.extend(scenario.values.column(idx as usize).iter().copied());
        } else {
            let c = (n_prior + idx).max(0) as usize;
            out.extend(prior_interventions.column(c).iter().copied());
        }
    };

    let mut predicted = Array2::zeros((j, horizon));
    let mut row = Vec::with_capacity(layout.width());
    let mut out = vec![0.0; j];
    for h in 0..horizon {
        row.clear();
        for lag in 1..=layout.p {
            let idx = h as isize - lag as isize;
            if idx >= 0 {
                row.extend(predicted.column(idx as usize).iter().copied());
            } else {
                row.extend(history.column((t as isize + idx) as usize).iter().copied());
            }
        }
        for lag in 0..layout.q {
            w_at(h as isize - lag as isize, &mut row);
        }
        row.extend_from_slice(covariates);
        model.predict_taxa(&row, &mut out);
        predicted.column_mut(h).iter_mut().zip(&out).for_each(|(p, &o)| *p = o);
    }
    Ok(predicted)
}

/// Forecast after the first `anchor` columns of `subject`.
pub fn forecast_at<M: OneStepPredictor + ?Sized>(
    model: &M,
    subject: &SubjectSeries,
    anchor: usize,
    scenario: &InterventionScenario,
    horizon: usize,
) -> Result<Array2<f64>> {
    if anchor > subject.n_observed() || anchor == 0 {
        return Err(Error::InsufficientHistory {
            subject: subject.id.clone(),
            reason: format!(
                "anchor {anchor} outside the {} observed timepoints",
                subject.n_observed()
            ),
        });
    }
    if anchor < model.layout().p {
        return Err(Error::InsufficientHistory {
            subject: subject.id.clone(),
            reason: format!("{anchor} timepoints before the anchor, need P = {}", model.layout().p),
        });
    }
    forecast_from(
        model,
        subject.abundances.slice(ndarray::s![.., ..anchor]),
        subject.interventions.slice(ndarray::s![.., ..anchor]),
        &subject.covariates,
        scenario,
        horizon,
    )
}

/// Forecast from a subject's full observed history.
pub fn forecast<M: OneStepPredictor + ?Sized>(
    model: &M,
    history: &SubjectSeries,
    scenario: &InterventionScenario,
    horizon: usize,
) -> Result<Array2<f64>> {
    forecast_at(model, history, history.n_observed(), scenario, horizon)
}

/// Fill in abundances for every intervention column that lacks one, using
/// the recorded interventions as the scenario.
pub fn predict_set(model: &TransferModel, set: &InterventionSeriesSet) -> Result<InterventionSeriesSet> {
    model.check_compatible(set)?;
    let subjects = set
        .subjects
        .par_iter()
        .map(|s| {
            let t_obs = s.n_observed();
            let missing = s.len() - t_obs;
            if missing == 0 {
                return Ok(s.clone());
            }
            let scenario = InterventionScenario::new(
                s.interventions.slice(ndarray::s![.., t_obs..]).to_owned(),
                "observed",
            )?;
            let pred = forecast_at(model, s, t_obs, &scenario, missing)?;
            let abundances = ndarray::concatenate![ndarray::Axis(1), s.abundances, pred];
            Ok(SubjectSeries {
                abundances,
                ..s.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(InterventionSeriesSet {
        subjects,
        ..set.clone()
    })
}

/// Where counterfactual forecasts start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchor {
    /// Each subject's first column with a nonzero intervention.
    FirstIntervention,
    /// The same column index for every subject.
    Index(usize),
}

impl Anchor {
    pub fn resolve(self, subject: &SubjectSeries) -> Result<usize> {
        match self {
            Anchor::Index(i) => Ok(i),
            Anchor::FirstIntervention => subject.first_intervention().ok_or_else(|| {
                Error::InsufficientHistory {
                    subject: subject.id.clone(),
                    reason: "no intervention onset to anchor on".into(),
                }
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectDifference {
    pub subject_id: String,
    /// J × H matrix of `forecast(a) - forecast(b)`.
    pub diff: Array2<f64>,
}

/// Per-subject difference between forecasts under two scenarios with the
/// same history and covariates.
pub fn counterfactual_difference<M: OneStepPredictor + ?Sized>(
    model: &M,
    set: &InterventionSeriesSet,
    scenario_a: &InterventionScenario,
    scenario_b: &InterventionScenario,
    horizon: usize,
    anchor: Anchor,
) -> Result<Vec<SubjectDifference>> {
    if scenario_a.horizon() != scenario_b.horizon() {
        return Err(Error::invalid("scenarios cover different horizons"));
    }
    set.subjects
        .par_iter()
        .map(|s| {
            let at = anchor.resolve(s)?;
            let a = forecast_at(model, s, at, scenario_a, horizon)?;
            let b = forecast_at(model, s, at, scenario_b, horizon)?;
            Ok(SubjectDifference {
                subject_id: s.id.clone(),
                diff: a - b,
            })
        })
        .collect()
}

/// Quartiles by the median-of-halves rule: the median of the sorted values,
/// and the medians of the lower and upper halves (the middle value is left
/// out of both halves when the count is odd). A single value is its own
/// quartiles.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    fn med(v: &[f64]) -> f64 {
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 1 {
        return (v[0], v[0], v[0]);
    }
    let half = n / 2;
    (med(&v[..half]), med(&v), med(&v[n - half..]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DifferenceSummary {
    pub median: Array2<f64>,
    pub q1: Array2<f64>,
    pub q3: Array2<f64>,
}

/// Per taxon and horizon median and quartile band across subjects.
pub fn counterfactual_summary(differences: &[SubjectDifference]) -> Result<DifferenceSummary> {
    let first = differences
        .first()
        .ok_or_else(|| Error::invalid("no subjects to summarize"))?;
    let dim = first.diff.dim();
    if differences.iter().any(|d| d.diff.dim() != dim) {
        return Err(Error::invalid("difference matrices have different shapes"));
    }
    let mut summary = DifferenceSummary {
        median: Array2::zeros(dim),
        q1: Array2::zeros(dim),
        q3: Array2::zeros(dim),
    };
    let mut buf = Vec::with_capacity(differences.len());
    for j in 0..dim.0 {
        for h in 0..dim.1 {
            buf.clear();
            buf.extend(differences.iter().map(|d| d.diff[[j, h]]));
            let (q1, m, q3) = quartiles(&buf);
            summary.q1[[j, h]] = q1;
            summary.median[[j, h]] = m;
            summary.q3[[j, h]] = q3;
        }
    }
    Ok(summary)
}

/// Replace negative entries with zero (for count-scale reporting only).
pub fn clamp_nonnegative(values: &mut Array2<f64>) {
    values.mapv_inplace(|v| v.max(0.0));
}

/// Long-format rows `subject,taxon,horizon,scenario,<value_name>`.
pub fn write_long_csv<'a>(
    path: &Path,
    taxa_names: &[String],
    value_name: &str,
    scenario: &str,
    rows: impl IntoIterator<Item = (&'a str, &'a Array2<f64>)>,
) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["subject", "taxon", "horizon", "scenario", value_name])?;
    for (subject, m) in rows {
        for (j, name) in taxa_names.iter().enumerate() {
            for h in 0..m.ncols() {
                w.write_record([
                    subject,
                    name.as_str(),
                    &(h + 1).to_string(),
                    scenario,
                    &fmt_f64(m[[j, h]]),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}
