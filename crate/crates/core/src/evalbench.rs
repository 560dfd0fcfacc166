//! Cross-validated forecast scoring, naive baselines, and FDP/power scoring
//! of selections against simulation truth.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gbrt::BoostConfig;
use crate::io::{csv_writer, fmt_f64};
use crate::normalize::{NormalizationMode, Normalizer};
use crate::transfer::{fit_transfer, forecast_from, quartiles, InterventionScenario, TransferModel};
use crate::ts::{InterventionSeriesSet, SubjectSeries};

/// A forecasting method that can be trained on a set of subjects.
pub trait Forecaster: Sync {
    fn label(&self) -> String;

    fn train(&self, train: &InterventionSeriesSet) -> Result<Box<dyn Trained + '_>>;
}

/// A trained forecaster.
pub trait Trained: Sync {
    /// Forecast `horizon` steps after the observed history of `subject`,
    /// given its interventions over the forecast window (D × horizon).
    fn forecast(
        &self,
        subject: &SubjectSeries,
        future_interventions: ArrayView2<'_, f64>,
        horizon: usize,
    ) -> Result<Array2<f64>>;
}

/// Repeats the last observed abundance.
#[derive(Debug, Clone, Copy, Default)]
pub struct CarryForward;

/// Repeats each taxon's mean over the training subjects.
#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalMean;

/// The boosted transfer model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransferForecaster {
    pub p: usize,
    pub q: usize,
    pub boost: BoostConfig,
}

pub fn carry_forward(history: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
    let t = history.ncols();
    if t == 0 {
        return Err(Error::invalid("empty history"));
    }
    let last = history.column(t - 1);
    Ok(Array2::from_shape_fn((history.nrows(), horizon), |(j, _)| last[j]))
}

/// Per-taxon mean over every observed column of every subject.
pub fn taxon_means(train: &InterventionSeriesSet) -> Result<Vec<f64>> {
    let mut sums = vec![0.0; train.n_taxa()];
    let mut n = 0usize;
    for s in &train.subjects {
        for col in s.abundances.columns() {
            sums.iter_mut().zip(col).for_each(|(acc, v)| *acc += v);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty history"));
    }
    Ok(sums.into_iter().map(|v| v / n as f64).collect())
}

pub fn global_mean(means: &[f64], horizon: usize) -> Array2<f64> {
    Array2::from_shape_fn((means.len(), horizon), |(j, _)| means[j])
}

impl Forecaster for CarryForward {
    fn label(&self) -> String {
        "carry_forward".into()
    }

    fn train(&self, _train: &InterventionSeriesSet) -> Result<Box<dyn Trained + '_>> {
        Ok(Box::new(CarryForward))
    }
}

impl Trained for CarryForward {
    fn forecast(&self, subject: &SubjectSeries, _w: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
        carry_forward(subject.abundances.view(), horizon)
    }
}

struct FittedMean(Vec<f64>);

impl Forecaster for GlobalMean {
    fn label(&self) -> String {
        "global_mean".into()
    }

    fn train(&self, train: &InterventionSeriesSet) -> Result<Box<dyn Trained + '_>> {
        Ok(Box::new(FittedMean(taxon_means(train)?)))
    }
}

impl Trained for FittedMean {
    fn forecast(&self, _subject: &SubjectSeries, _w: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
        Ok(global_mean(&self.0, horizon))
    }
}

impl Forecaster for TransferForecaster {
    fn label(&self) -> String {
        "transfer".into()
    }

    fn train(&self, train: &InterventionSeriesSet) -> Result<Box<dyn Trained + '_>> {
        Ok(Box::new(fit_transfer(train, self.p, self.q, &self.boost)?))
    }
}

impl Trained for TransferModel {
    fn forecast(&self, subject: &SubjectSeries, w: ArrayView2<'_, f64>, horizon: usize) -> Result<Array2<f64>> {
        let t = subject.n_observed();
        if t < self.p {
            return Err(Error::InsufficientHistory {
                subject: subject.id.clone(),
                reason: format!("{t} timepoints before the forecast, need P = {}", self.p),
            });
        }
        let scenario = InterventionScenario::new(w.to_owned(), "observed")?;
        forecast_from(
            self,
            subject.abundances.view(),
            subject.interventions.slice(s![.., ..t]),
            &subject.covariates,
            &scenario,
            horizon,
        )
    }
}

/// Cross-validation settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub horizon: usize,
    pub normalization: NormalizationMode,
    pub seed: u64,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 4,
            horizon: 5,
            normalization: NormalizationMode::None,
            seed: 0,
        }
    }
}

/// 64-bit FNV-1a over the seed bytes followed by the id.
fn stable_hash(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(id.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Fold of each subject: subjects are ranked by a seeded hash of their id
/// and dealt round-robin, so folds differ in size by at most one.
pub fn assign_folds(set: &InterventionSeriesSet, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 || folds > set.n_subjects() {
        return Err(Error::invalid(format!(
            "cannot form {folds} folds from {} subjects",
            set.n_subjects()
        )));
    }
    let mut ranked: Vec<(u64, &str, usize)> = set
        .subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (stable_hash(seed, &s.id), s.id.as_str(), i))
        .collect();
    ranked.sort_unstable();
    let mut out = vec![0; set.n_subjects()];
    for (rank, &(_, _, i)) in ranked.iter().enumerate() {
        out[i] = rank % folds;
    }
    Ok(out)
}

/// The part of `subject` a forecaster may see when forecasting from
/// `anchor`: abundances before it and interventions through the window.
pub fn truncate_for_forecast(subject: &SubjectSeries, anchor: usize, horizon: usize) -> Result<SubjectSeries> {
    let end = anchor + horizon;
    if end > subject.n_observed() {
        return Err(Error::InsufficientHistory {
            subject: subject.id.clone(),
            reason: format!(
                "forecast window ends at {end}, only {} timepoints observed",
                subject.n_observed()
            ),
        });
    }
    SubjectSeries::new(
        subject.id.clone(),
        subject.times[..end].to_vec(),
        subject.abundances.slice(s![.., ..anchor]).to_owned(),
        subject.interventions.slice(s![.., ..end]).to_owned(),
        subject.covariates.clone(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub method: String,
    pub normalization: NormalizationMode,
    pub mae: f64,
    /// Training plus forecasting time.
    pub seconds: f64,
    /// Mean absolute error of each holdout subject, in subject order.
    pub subject_mae: Vec<f64>,
}

/// Mean absolute error on the first `anchor` onset of each holdout subject.
fn score_fold(
    method: &dyn Forecaster,
    train: &InterventionSeriesSet,
    holdout: &InterventionSeriesSet,
    horizon: usize,
) -> Result<Vec<f64>> {
    let trained = method.train(train)?;
    holdout
        .subjects
        .iter()
        .map(|subject| {
            let anchor = subject.first_intervention().ok_or_else(|| Error::InsufficientHistory {
                subject: subject.id.clone(),
                reason: "holdout subject has no intervention onset".into(),
            })?;
            if anchor == 0 {
                return Err(Error::InsufficientHistory {
                    subject: subject.id.clone(),
                    reason: "intervention starts at the first timepoint".into(),
                });
            }
            let visible = truncate_for_forecast(subject, anchor, horizon)?;
            let w = visible.interventions.slice(s![.., anchor..]);
            let pred = trained.forecast(&visible, w, horizon)?;
            let truth = subject.abundances.slice(s![.., anchor..anchor + horizon]);
            if pred.dim() != truth.dim() {
                return Err(Error::Data(format!(
                    "{} returned a {:?} forecast, expected {:?}",
                    method.label(),
                    pred.dim(),
                    truth.dim()
                )));
            }
            let total: f64 = pred.iter().zip(truth.iter()).map(|(a, b)| (a - b).abs()).sum();
            Ok(total / pred.len() as f64)
        })
        .collect()
}

/// K-fold forecast evaluation. For each fold the normalizer is fit on the
/// training subjects and replayed on the holdout, every method is trained on
/// the training subjects, and each holdout subject is forecast `horizon`
/// steps from its first intervention onset.
pub fn cv_forecast_eval(
    set: &InterventionSeriesSet,
    methods: &[&dyn Forecaster],
    config: &CvConfig,
) -> Result<EvalReport> {
    if config.horizon == 0 {
        return Err(Error::invalid("horizon must be at least 1"));
    }
    let fold_of = assign_folds(set, config.folds, config.seed)?;
    let jobs: Vec<(usize, usize)> = (0..config.folds)
        .flat_map(|k| (0..methods.len()).map(move |m| (k, m)))
        .collect();
    let folds = jobs
        .par_iter()
        .map(|&(k, m)| {
            let start = Instant::now();
            let train_idx: Vec<usize> = (0..set.n_subjects()).filter(|&i| fold_of[i] != k).collect();
            let test_idx: Vec<usize> = (0..set.n_subjects()).filter(|&i| fold_of[i] == k).collect();
            let train_raw = set.select_subjects(&train_idx);
            let normalizer = Normalizer::fit(&train_raw, config.normalization)?;
            let train = normalizer.apply(&train_raw)?;
            let holdout = normalizer.apply(&set.select_subjects(&test_idx))?;
            let subject_mae = score_fold(methods[m], &train, &holdout, config.horizon)?;
            let mae = subject_mae.iter().sum::<f64>() / subject_mae.len() as f64;
            Ok(FoldResult {
                fold: k,
                method: methods[m].label(),
                normalization: config.normalization,
                mae,
                seconds: start.elapsed().as_secs_f64(),
                subject_mae,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        folds,
        inference: Vec::new(),
    })
}

/// False discovery proportion and power at one lag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceScore {
    pub fdp: f64,
    pub power: f64,
}

/// `FDP = |J₀ ∩ Ĵ| / max(1, |Ĵ|)`, `Power = |J₁ ∩ Ĵ| / |J₁|` (0 when `J₁`
/// is empty). Taxa outside `nonnull` are null.
pub fn inference_eval(selected: &[usize], nonnull: &BTreeSet<usize>) -> InferenceScore {
    let chosen: BTreeSet<usize> = selected.iter().copied().collect();
    let true_pos = chosen.intersection(nonnull).count();
    let false_pos = chosen.len() - true_pos;
    InferenceScore {
        fdp: false_pos as f64 / chosen.len().max(1) as f64,
        power: if nonnull.is_empty() {
            0.0
        } else {
            true_pos as f64 / nonnull.len() as f64
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRow {
    pub lag: usize,
    pub fdp: f64,
    pub power: f64,
    pub q: f64,
    pub seed: u64,
}

/// Mean of raw errors and of errors within `[Q1 - 3 IQR, Q3 + 3 IQR]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub raw_mean: f64,
    pub truncated_mean: f64,
    pub n_truncated: usize,
}

pub fn summarize_errors(errors: &[f64]) -> Result<ErrorSummary> {
    if errors.is_empty() {
        return Err(Error::invalid("no errors to summarize"));
    }
    let (q1, _, q3) = quartiles(errors);
    let iqr = q3 - q1;
    let (lo, hi) = (q1 - 3.0 * iqr, q3 + 3.0 * iqr);
    let kept: Vec<f64> = errors.iter().copied().filter(|e| (lo..=hi).contains(e)).collect();
    Ok(ErrorSummary {
        raw_mean: errors.iter().sum::<f64>() / errors.len() as f64,
        truncated_mean: kept.iter().sum::<f64>() / kept.len() as f64,
        n_truncated: errors.len() - kept.len(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldResult>,
    pub inference: Vec<InferenceRow>,
}

impl EvalReport {
    /// Per-fold MAE of `method`, in fold order.
    pub fn mae(&self, method: &str) -> Vec<f64> {
        let mut rows: Vec<&FoldResult> = self.folds.iter().filter(|f| f.method == method).collect();
        rows.sort_by_key(|f| f.fold);
        rows.iter().map(|f| f.mae).collect()
    }

    /// Per-fold `MAE(method) - MAE(baseline)`; refuses to compare folds
    /// scored on different scales.
    pub fn mae_difference(&self, method: &str, baseline: &str) -> Result<Vec<f64>> {
        let pick = |name: &str| -> Vec<&FoldResult> {
            let mut rows: Vec<&FoldResult> = self.folds.iter().filter(|f| f.method == name).collect();
            rows.sort_by_key(|f| f.fold);
            rows
        };
        let (a, b) = (pick(method), pick(baseline));
        if a.is_empty() || a.len() != b.len() {
            return Err(Error::invalid(format!("`{method}` and `{baseline}` were not scored on the same folds")));
        }
        a.iter().zip(&b).map(|(x, y)| compare_mae(x, y)).collect()
    }

    pub fn summary(&self, method: &str) -> Result<ErrorSummary> {
        let errors: Vec<f64> = self
            .folds
            .iter()
            .filter(|f| f.method == method)
            .flat_map(|f| f.subject_mae.iter().copied())
            .collect();
        summarize_errors(&errors)
    }

    /// Columns `fold,method,normalization,mae,seconds`; folds numbered from 1.
    pub fn write_eval_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["fold", "method", "normalization", "mae", "seconds"])?;
        for f in &self.folds {
            w.write_record([
                &(f.fold + 1).to_string(),
                f.method.as_str(),
                f.normalization.as_str(),
                &fmt_f64(f.mae),
                &format!("{:.6}", f.seconds),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Columns `lag,fdp,power,q,seed`.
    pub fn write_inference_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["lag", "fdp", "power", "q", "seed"])?;
        for r in &self.inference {
            w.write_record([
                &r.lag.to_string(),
                &fmt_f64(r.fdp),
                &fmt_f64(r.power),
                &fmt_f64(r.q),
                &r.seed.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `a.mae - b.mae` for two folds scored on the same scale.
pub fn compare_mae(a: &FoldResult, b: &FoldResult) -> Result<f64> {
    if a.normalization != b.normalization {
        return Err(Error::Scale(format!(
            "MAE on {} and {} scales are not comparable",
            a.normalization.as_str(),
            b.normalization.as_str()
        )));
    }
    Ok(a.mae - b.mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ts::ScaleTag;
    use ndarray::array;

    fn subject(id: &str, y: Array2<f64>, onset: usize) -> SubjectSeries {
        let t = y.ncols();
        let mut w = Array2::zeros((1, t));
        w.slice_mut(s![.., onset..]).fill(1.0);
        SubjectSeries::new(id, (0..t).map(|v| v as f64).collect(), y, w, vec![]).unwrap()
    }

    fn ramp_set(n: usize) -> InterventionSeriesSet {
        let subjects = (0..n)
            .map(|i| {
                let y = Array2::from_shape_fn((2, 10), |(j, t)| (i * 10 + j * 3 + t) as f64);
                subject(&format!("s{i:02}"), y, 4)
            })
            .collect();
        InterventionSeriesSet::new(subjects, vec!["a".into(), "b".into()], vec!["w".into()], vec![], ScaleTag::Counts)
            .unwrap()
    }

    /// Reads the truth from the full data, offset by `shift`.
    struct Peek<'a> {
        full: &'a InterventionSeriesSet,
        shift: f64,
    }

    impl Forecaster for Peek<'_> {
        fn label(&self) -> String {
            format!("peek{}", self.shift)
        }
        fn train(&self, _train: &InterventionSeriesSet) -> Result<Box<dyn Trained + '_>> {
            Ok(Box::new(Peek { full: self.full, shift: self.shift }))
        }
    }

    impl Trained for Peek<'_> {
        fn forecast(&self, subject: &SubjectSeries, _w: ArrayView2<'_, f64>, h: usize) -> Result<Array2<f64>> {
            let t = subject.n_observed();
            let full = self.full.subject(&subject.id).unwrap();
            Ok(full.abundances.slice(s![.., t..t + h]).mapv(|v| v + self.shift))
        }
    }

    #[test]
    fn oracle_and_offset_forecasters() {
        let set = ramp_set(8);
        let exact = Peek { full: &set, shift: 0.0 };
        let off = Peek { full: &set, shift: 1.0 };
        let report = cv_forecast_eval(&set, &[&exact, &off], &CvConfig::default()).unwrap();
        assert_eq!(report.mae("peek0"), vec![0.0; 4]);
        assert_eq!(report.mae("peek1"), vec![1.0; 4]);
    }

    #[test]
    fn carry_forward_on_constant_series() {
        let subjects = (0..4)
            .map(|i| subject(&format!("c{i}"), Array2::from_elem((3, 12), 7.0), 5))
            .collect();
        let set = InterventionSeriesSet::new(
            subjects,
            vec!["a".into(), "b".into(), "c".into()],
            vec!["w".into()],
            vec![],
            ScaleTag::Counts,
        )
        .unwrap();
        let cfg = CvConfig { folds: 2, ..Default::default() };
        let report = cv_forecast_eval(&set, &[&CarryForward], &cfg).unwrap();
        assert_eq!(report.mae("carry_forward"), vec![0.0, 0.0]);
    }

    #[test]
    fn baselines() {
        let h = array![[1.0, 3.0], [5.0, 1.0]];
        assert_eq!(carry_forward(h.view(), 3).unwrap(), array![[3.0, 3.0, 3.0], [1.0, 1.0, 1.0]]);
        assert!(carry_forward(Array2::<f64>::zeros((2, 0)).view(), 1).is_err());

        let set = ramp_set(3);
        let means = taxon_means(&set.select_subjects(&[0])).unwrap();
        assert_eq!(means, vec![4.5, 7.5]);
        let means_all = taxon_means(&set).unwrap();
        assert_eq!(means_all, vec![14.5, 17.5]);
        assert_eq!(global_mean(&means, 2), array![[4.5, 4.5], [7.5, 7.5]]);
    }

    #[test]
    fn holdout_future_is_hidden() {
        let set = ramp_set(1);
        let visible = truncate_for_forecast(&set.subjects[0], 4, 5).unwrap();
        assert_eq!(visible.n_observed(), 4);
        assert_eq!(visible.len(), 9);
        assert!(truncate_for_forecast(&set.subjects[0], 6, 5).is_err());
    }

    #[test]
    fn missing_onset_is_an_error() {
        let mut set = ramp_set(4);
        set.subjects[2].interventions.fill(0.0);
        assert!(cv_forecast_eval(&set, &[&CarryForward], &CvConfig { folds: 2, ..Default::default() }).is_err());
    }

    #[test]
    fn folds_partition_and_ignore_order() {
        let set = ramp_set(10);
        let folds = assign_folds(&set, 4, 7).unwrap();
        let mut sizes = [0; 4];
        folds.iter().for_each(|&k| sizes[k] += 1);
        assert!(sizes.iter().all(|&n| n == 2 || n == 3));
        let reversed: Vec<usize> = (0..10).rev().collect();
        let folds_rev = assign_folds(&set.select_subjects(&reversed), 4, 7).unwrap();
        for (i, &k) in folds.iter().enumerate() {
            assert_eq!(folds_rev[9 - i], k);
        }
        assert!(assign_folds(&set, 1, 0).is_err());
    }

    #[test]
    fn inference_examples() {
        let j1 = BTreeSet::from([0, 1, 2, 3]);
        assert_eq!(inference_eval(&[0, 1, 2, 3], &j1), InferenceScore { fdp: 0.0, power: 1.0 });
        assert_eq!(inference_eval(&[], &j1), InferenceScore { fdp: 0.0, power: 0.0 });
        assert_eq!(inference_eval(&[7, 2], &j1), InferenceScore { fdp: 0.5, power: 0.25 });
        assert_eq!(inference_eval(&[7], &BTreeSet::new()).power, 0.0);
    }

    #[test]
    fn power_grows_with_true_discoveries() {
        let j1 = BTreeSet::from([1, 4, 6]);
        let mut sel = vec![9];
        let mut last = inference_eval(&sel, &j1).power;
        for j in [1, 4, 6] {
            sel.push(j);
            let now = inference_eval(&sel, &j1).power;
            assert!(now >= last);
            last = now;
        }
    }

    #[test]
    fn truncated_summary_drops_outliers() {
        let mut errors = vec![1.0; 20];
        errors.push(100.0);
        let s = summarize_errors(&errors).unwrap();
        assert_eq!(s.truncated_mean, 1.0);
        assert_eq!(s.n_truncated, 1);
        assert!(s.raw_mean > 5.0);
    }

    #[test]
    fn cross_scale_comparison_is_refused() {
        let row = |n| FoldResult {
            fold: 0,
            method: "m".into(),
            normalization: n,
            mae: 1.0,
            seconds: 0.0,
            subject_mae: vec![],
        };
        assert!(compare_mae(&row(NormalizationMode::None), &row(NormalizationMode::SizeFactorAsinh)).is_err());
        assert_eq!(compare_mae(&row(NormalizationMode::None), &row(NormalizationMode::None)).unwrap(), 0.0);
    }
}
