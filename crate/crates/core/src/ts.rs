//! Intervention time-series containers.
//!
//! A [`SubjectSeries`] holds one subject's abundances (taxa × time),
//! intervention strengths (channels × time), and static covariates. An
//! [`InterventionSeriesSet`] collects subjects that share taxon, channel, and
//! covariate orderings.
//!
//! Abundances may be shorter than the intervention matrix: after
//! [`subset_values`] only a prefix of abundances is observed while the
//! interventions (and times) keep their full length, so a forecaster can fill
//! in the remainder.

use ndarray::{s, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which transformation was last applied to the abundances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTag {
    Counts,
    Normalized,
    NormalizedAsinh,
}

impl ScaleTag {
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTag::Counts => "counts",
            ScaleTag::Normalized => "normalized",
            ScaleTag::NormalizedAsinh => "normalized_asinh",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSeries {
    pub id: String,
    /// Strictly increasing; one entry per intervention column.
    pub times: Vec<f64>,
    /// J × T_obs, where T_obs ≤ `times.len()`.
    pub abundances: Array2<f64>,
    /// D × T.
    pub interventions: Array2<f64>,
    pub covariates: Vec<f64>,
}

impl SubjectSeries {
    pub fn new(
        id: impl Into<String>,
        times: Vec<f64>,
        abundances: Array2<f64>,
        interventions: Array2<f64>,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        let series = SubjectSeries {
            id: id.into(),
            times,
            abundances,
            interventions,
            covariates,
        };
        series.validate()?;
        Ok(series)
    }

    fn validate(&self) -> Result<()> {
        let t = self.times.len();
        if self.times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid(format!(
                "subject `{}`: times must be strictly increasing",
                self.id
            )));
        }
        if self.interventions.ncols() != t {
            return Err(Error::invalid(format!(
                "subject `{}`: {} intervention columns for {} timepoints",
                self.id,
                self.interventions.ncols(),
                t
            )));
        }
        if self.abundances.ncols() > t {
            return Err(Error::invalid(format!(
                "subject `{}`: more abundance columns than timepoints",
                self.id
            )));
        }
        Ok(())
    }

    /// Number of timepoints (intervention columns).
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of timepoints with observed abundances.
    pub fn n_observed(&self) -> usize {
        self.abundances.ncols()
    }

    pub fn n_taxa(&self) -> usize {
        self.abundances.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.interventions.nrows()
    }

    pub fn abundance_at(&self, t: usize) -> ArrayView1<'_, f64> {
        self.abundances.column(t)
    }

    /// Intervention vector at `t`, clamping negative indices to the first column.
    pub fn intervention_at(&self, t: isize) -> ArrayView1<'_, f64> {
        self.interventions.column(t.max(0) as usize)
    }

    /// Index of the first column with any nonzero intervention channel.
    pub fn first_intervention(&self) -> Option<usize> {
        (0..self.len()).find(|&t| self.interventions.column(t).iter().any(|&w| w != 0.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionSeriesSet {
    pub subjects: Vec<SubjectSeries>,
    pub taxa_names: Vec<String>,
    pub intervention_names: Vec<String>,
    pub covariate_names: Vec<String>,
    pub scale: ScaleTag,
}

impl InterventionSeriesSet {
    pub fn new(
        subjects: Vec<SubjectSeries>,
        taxa_names: Vec<String>,
        intervention_names: Vec<String>,
        covariate_names: Vec<String>,
        scale: ScaleTag,
    ) -> Result<Self> {
        let set = InterventionSeriesSet {
            subjects,
            taxa_names,
            intervention_names,
            covariate_names,
            scale,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let (j, d, s) = (self.n_taxa(), self.n_channels(), self.n_covariates());
        for subject in &self.subjects {
            subject.validate()?;
            if subject.n_taxa() != j || subject.n_channels() != d || subject.covariates.len() != s
            {
                return Err(Error::invalid(format!(
                    "subject `{}` has shape (J={}, D={}, S={}), expected ({j}, {d}, {s})",
                    subject.id,
                    subject.n_taxa(),
                    subject.n_channels(),
                    subject.covariates.len()
                )));
            }
            if self.scale == ScaleTag::Counts && subject.abundances.iter().any(|&y| y < 0.0) {
                return Err(Error::Scale(format!(
                    "subject `{}` has negative counts",
                    subject.id
                )));
            }
        }
        Ok(())
    }

    pub fn n_taxa(&self) -> usize {
        self.taxa_names.len()
    }

    pub fn n_channels(&self) -> usize {
        self.intervention_names.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariate_names.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subject(&self, id: &str) -> Option<&SubjectSeries> {
        self.subjects.iter().find(|s| s.id == id)
    }

    /// Copy of this set restricted to the subjects at `indices`, in that order.
    pub fn select_subjects(&self, indices: &[usize]) -> Self {
        InterventionSeriesSet {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            taxa_names: self.taxa_names.clone(),
            intervention_names: self.intervention_names.clone(),
            covariate_names: self.covariate_names.clone(),
            scale: self.scale,
        }
    }

    /// Same container with abundances replaced subject-wise by `f`.
    pub(crate) fn map_abundances(
        &self,
        scale: ScaleTag,
        mut f: impl FnMut(usize, &SubjectSeries) -> Array2<f64>,
    ) -> Self {
        let subjects = self
            .subjects
            .iter()
            .enumerate()
            .map(|(i, s)| SubjectSeries {
                abundances: f(i, s),
                ..s.clone()
            })
            .collect();
        InterventionSeriesSet {
            subjects,
            scale,
            ..self.clone()
        }
    }
}

/// Interpolation rule for [`interpolate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolationMethod {
    #[default]
    Linear,
}

/// Resample every subject onto `t_min, t_min + delta, …` (never past `t_max`).
///
/// Abundances and interventions are both interpolated linearly channel-wise;
/// grid points that coincide with an original knot copy the knot value.
pub fn interpolate(
    set: &InterventionSeriesSet,
    delta: f64,
    method: InterpolationMethod,
) -> Result<InterventionSeriesSet> {
    let InterpolationMethod::Linear = method;
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::invalid(format!("delta must be positive, got {delta}")));
    }
    let mut subjects = Vec::with_capacity(set.subjects.len());
    for subject in &set.subjects {
        if subject.len() < 2 {
            return Err(Error::InsufficientHistory {
                subject: subject.id.clone(),
                reason: "interpolation needs at least two timepoints".into(),
            });
        }
        if subject.n_observed() != subject.len() {
            return Err(Error::invalid(format!(
                "subject `{}` has unobserved abundances; interpolate before subsetting",
                subject.id
            )));
        }
        let t_min = subject.times[0];
        let t_max = *subject.times.last().unwrap();
        // Slack absorbs rounding in (t_max - t_min) / delta.
        let n_steps = ((t_max - t_min) / delta + 1e-9).floor() as usize;
        let grid: Vec<f64> = (0..=n_steps).map(|k| t_min + k as f64 * delta).collect();

        let abundances = resample(&subject.times, &subject.abundances, &grid);
        let interventions = resample(&subject.times, &subject.interventions, &grid);
        subjects.push(SubjectSeries {
            id: subject.id.clone(),
            times: grid,
            abundances,
            interventions,
            covariates: subject.covariates.clone(),
        });
    }
    Ok(InterventionSeriesSet {
        subjects,
        ..set.clone()
    })
}

fn resample(times: &[f64], values: &Array2<f64>, grid: &[f64]) -> Array2<f64> {
    let mut out = Array2::zeros((values.nrows(), grid.len()));
    let mut k = 0;
    for (g, &t) in grid.iter().enumerate() {
        while k + 1 < times.len() && times[k + 1] <= t {
            k += 1;
        }
        if times[k] == t || k + 1 == times.len() {
            out.column_mut(g).assign(&values.column(k));
            continue;
        }
        let (t0, t1) = (times[k], times[k + 1]);
        let frac = (t - t0) / (t1 - t0);
        for r in 0..values.nrows() {
            let (v0, v1) = (values[[r, k]], values[[r, k + 1]]);
            out[[r, g]] = v0 + (v1 - v0) * frac;
        }
    }
    out
}

/// One supervised example for a single taxon.
///
/// Feature layout (width `P·J + Q·D + S`):
/// `y_{τ-1}, …, y_{τ-P}` (each a J-vector, most recent first), then
/// `w_τ, w_{τ-1}, …, w_{τ-Q+1}` (each a D-vector, most recent first, so the
/// target-time intervention comes first), then the covariates `z`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSegment {
    pub features: Vec<f64>,
    pub target_taxon: usize,
    pub target_value: f64,
    pub subject_id: String,
    pub target_time_index: usize,
}

/// Shape bookkeeping for the lagged feature vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub p: usize,
    pub q: usize,
    pub n_taxa: usize,
    pub n_channels: usize,
    pub n_covariates: usize,
}

impl FeatureLayout {
    pub fn width(&self) -> usize {
        self.p * self.n_taxa + self.q * self.n_channels + self.n_covariates
    }

    /// Column index of taxon `j` at abundance lag `lag` (1 = most recent).
    pub fn abundance_column(&self, lag: usize, j: usize) -> usize {
        (lag - 1) * self.n_taxa + j
    }

    /// Column index of channel `d` at intervention lag `lag` (0 = target time).
    pub fn intervention_column(&self, lag: usize, d: usize) -> usize {
        self.p * self.n_taxa + lag * self.n_channels + d
    }

    /// Append one feature row.
    ///
    /// `abundance(k)` returns `y_{τ-k}` for `k = 1..=P`, `intervention(k)`
    /// returns `w_{τ-k}` for `k = 0..Q`.
    pub fn push_row<'a, A, W>(
        &self,
        out: &mut Vec<f64>,
        mut abundance: A,
        mut intervention: W,
        covariates: &[f64],
    ) where
        A: FnMut(usize) -> ArrayView1<'a, f64>,
        W: FnMut(usize) -> ArrayView1<'a, f64>,
    {
        for k in 1..=self.p {
            out.extend(abundance(k).iter().copied());
        }
        for k in 0..self.q {
            out.extend(intervention(k).iter().copied());
        }
        out.extend_from_slice(covariates);
    }
}

/// A shared-feature training window: the features are identical for every
/// taxon, only the target differs.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentWindow {
    pub subject: usize,
    pub target_index: usize,
    pub features: Vec<f64>,
}

/// Target indices for one subject: `T-1, T-1-P, …` while at least `P` lags exist.
pub fn segment_targets(n_observed: usize, p: usize) -> Vec<usize> {
    if n_observed <= p {
        return Vec::new();
    }
    (p..n_observed).rev().step_by(p).collect()
}

pub(crate) fn check_lags(p: usize, q: usize) -> Result<()> {
    if p == 0 || q == 0 {
        return Err(Error::invalid(format!(
            "lag orders must be at least 1 (P={p}, Q={q})"
        )));
    }
    Ok(())
}

pub fn layout_for(set: &InterventionSeriesSet, p: usize, q: usize) -> FeatureLayout {
    FeatureLayout {
        p,
        q,
        n_taxa: set.n_taxa(),
        n_channels: set.n_channels(),
        n_covariates: set.n_covariates(),
    }
}

/// Non-overlapping windows for every subject, in subject order then
/// descending target index.
pub fn segment_windows(
    set: &InterventionSeriesSet,
    p: usize,
    q: usize,
) -> Result<Vec<SegmentWindow>> {
    check_lags(p, q)?;
    let layout = layout_for(set, p, q);
    let mut windows = Vec::new();
    for (i, subject) in set.subjects.iter().enumerate() {
        if subject.n_observed() < p + 1 {
            return Err(Error::InsufficientHistory {
                subject: subject.id.clone(),
                reason: format!(
                    "{} observed timepoints, need at least P+1 = {}",
                    subject.n_observed(),
                    p + 1
                ),
            });
        }
        for tau in segment_targets(subject.n_observed(), p) {
            let mut features = Vec::with_capacity(layout.width());
            layout.push_row(
                &mut features,
                |k| subject.abundance_at(tau - k),
                |k| subject.intervention_at(tau as isize - k as isize),
                &subject.covariates,
            );
            windows.push(SegmentWindow {
                subject: i,
                target_index: tau,
                features,
            });
        }
    }
    Ok(windows)
}

/// Expand [`segment_windows`] into one segment per (window, taxon).
pub fn extract_segments(
    set: &InterventionSeriesSet,
    p: usize,
    q: usize,
) -> Result<Vec<TrainingSegment>> {
    let windows = segment_windows(set, p, q)?;
    let mut segments = Vec::with_capacity(windows.len() * set.n_taxa());
    for window in windows {
        let subject = &set.subjects[window.subject];
        for j in 0..set.n_taxa() {
            segments.push(TrainingSegment {
                features: window.features.clone(),
                target_taxon: j,
                target_value: subject.abundances[[j, window.target_index]],
                subject_id: subject.id.clone(),
                target_time_index: window.target_index,
            });
        }
    }
    Ok(segments)
}

/// Keep abundances only for the contiguous index range `indices`, while
/// interventions and times keep every column from the range start onward.
pub fn subset_values(
    set: &InterventionSeriesSet,
    indices: std::ops::Range<usize>,
) -> Result<InterventionSeriesSet> {
    if indices.is_empty() {
        return Err(Error::invalid("empty index range"));
    }
    let mut subjects = Vec::with_capacity(set.subjects.len());
    for subject in &set.subjects {
        if indices.end > subject.n_observed() {
            return Err(Error::invalid(format!(
                "index {} out of range for subject `{}` with {} observed timepoints",
                indices.end - 1,
                subject.id,
                subject.n_observed()
            )));
        }
        let start = indices.start;
        subjects.push(SubjectSeries {
            id: subject.id.clone(),
            times: subject.times[start..].to_vec(),
            abundances: subject.abundances.slice(s![.., indices.clone()]).to_owned(),
            interventions: subject.interventions.slice(s![.., start..]).to_owned(),
            covariates: subject.covariates.clone(),
        });
    }
    Ok(InterventionSeriesSet {
        subjects,
        ..set.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn one_subject(times: Vec<f64>, y: Array2<f64>, w: Array2<f64>) -> InterventionSeriesSet {
        let j = y.nrows();
        let d = w.nrows();
        InterventionSeriesSet::new(
            vec![SubjectSeries::new("s1", times, y, w, vec![]).unwrap()],
            (0..j).map(|k| format!("tax{k}")).collect(),
            (0..d).map(|k| format!("w{k}")).collect(),
            vec![],
            ScaleTag::Counts,
        )
        .unwrap()
    }

    #[test]
    fn interpolate_midpoint() {
        let set = one_subject(vec![0.0, 2.0], array![[0.0, 4.0]], array![[0.0, 1.0]]);
        let out = interpolate(&set, 1.0, InterpolationMethod::Linear).unwrap();
        let s = &out.subjects[0];
        assert_eq!(s.times, vec![0.0, 1.0, 2.0]);
        assert_eq!(s.abundances, array![[0.0, 2.0, 4.0]]);
        // Fractional intervention in the transition.
        assert_eq!(s.interventions, array![[0.0, 0.5, 1.0]]);
    }

    #[test]
    fn interpolate_identity_on_uniform_grid() {
        let set = one_subject(
            vec![0.0, 1.0, 2.0, 3.0],
            array![[1.0, 7.0, 3.0, 2.0], [0.0, 0.0, 5.0, 1.0]],
            array![[0.0, 1.0, 1.0, 0.0]],
        );
        let out = interpolate(&set, 1.0, InterpolationMethod::Linear).unwrap();
        assert_eq!(out, set);
    }

    #[test]
    fn interpolate_does_not_extrapolate() {
        let set = one_subject(vec![0.0, 2.5], array![[0.0, 5.0]], array![[0.0, 0.0]]);
        let out = interpolate(&set, 1.0, InterpolationMethod::Linear).unwrap();
        assert_eq!(out.subjects[0].times, vec![0.0, 1.0, 2.0]);
        assert_eq!(out.subjects[0].abundances, array![[0.0, 2.0, 4.0]]);
    }

    #[test]
    fn interpolate_errors() {
        let set = one_subject(vec![0.0], array![[1.0]], array![[0.0]]);
        assert!(interpolate(&set, 1.0, InterpolationMethod::Linear).is_err());
        let set = one_subject(vec![0.0, 1.0], array![[1.0, 2.0]], array![[0.0, 0.0]]);
        assert!(interpolate(&set, 0.0, InterpolationMethod::Linear).is_err());
        assert!(interpolate(&set, -1.0, InterpolationMethod::Linear).is_err());
    }

    #[test]
    fn stride_targets() {
        assert_eq!(segment_targets(7, 2), vec![6, 4, 2]);
        assert_eq!(segment_targets(3, 2), vec![2]);
        assert_eq!(segment_targets(2, 2), Vec::<usize>::new());
        assert_eq!(segment_targets(10, 3), vec![9, 6, 3]);
    }

    #[test]
    fn segment_feature_layout() {
        // J=2, D=1, P=2, Q=2; intervention lag before t=0 clamps to w_0.
        let set = one_subject(
            vec![0.0, 1.0, 2.0],
            array![[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]],
            array![[5.0, 6.0, 7.0]],
        );
        let segs = extract_segments(&set, 2, 2).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[0].features, vec![2.0, 20.0, 1.0, 10.0, 7.0, 6.0]);
        assert_eq!(segs[0].target_value, 3.0);
        assert_eq!(segs[1].target_value, 30.0);
        assert_eq!(segs[1].target_taxon, 1);

        let set = one_subject(
            vec![0.0, 1.0],
            array![[1.0, 2.0]],
            array![[5.0, 6.0]],
        );
        let segs = extract_segments(&set, 1, 3).unwrap();
        assert_eq!(segs[0].features, vec![1.0, 6.0, 5.0, 5.0]);
    }

    #[test]
    fn segment_counts() {
        let y = Array2::from_shape_fn((3, 3), |(j, t)| (j * 3 + t) as f64);
        let w = Array2::zeros((1, 3));
        let subject = |id: &str| SubjectSeries::new(id, vec![0.0, 1.0, 2.0], y.clone(), w.clone(), vec![0.5]).unwrap();
        let set = InterventionSeriesSet::new(
            vec![subject("a"), subject("b")],
            vec!["x".into(), "y".into(), "z".into()],
            vec!["w".into()],
            vec!["cov".into()],
            ScaleTag::Counts,
        )
        .unwrap();
        let segs = extract_segments(&set, 2, 1).unwrap();
        assert_eq!(segs.len(), 6);
        assert!(segs.iter().all(|s| s.features.len() == 2 * 3 + 1 + 1));
        assert!(extract_segments(&set, 3, 1).is_err());
        assert!(extract_segments(&set, 0, 1).is_err());
    }

    #[test]
    fn subset_keeps_interventions() {
        let y = Array2::from_shape_fn((2, 20), |(j, t)| (j + t) as f64);
        let w = Array2::from_shape_fn((1, 20), |(_, t)| (t % 2) as f64);
        let times = (0..20).map(|t| t as f64).collect();
        let set = one_subject(times, y, w);
        let sub = subset_values(&set, 0..8).unwrap();
        assert_eq!(sub.subjects[0].n_observed(), 8);
        assert_eq!(sub.subjects[0].interventions.ncols(), 20);
        assert_eq!(subset_values(&set, 0..20).unwrap(), set);
        assert!(subset_values(&set, 0..21).is_err());
        assert!(subset_values(&set, 3..3).is_err());
    }

    #[test]
    fn rejects_unsorted_times() {
        let r = SubjectSeries::new("s", vec![0.0, 0.0], array![[1.0, 1.0]], array![[0.0, 0.0]], vec![]);
        assert!(r.is_err());
    }
}
