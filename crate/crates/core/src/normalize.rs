//! Library-size normalization: none, median-of-ratios size factors, and size
//! factors followed by `asinh`.
//!
//! Size factors pool every observed sample of every subject. The strict
//! estimator uses only taxa that are positive in all samples and fails when
//! there are none. The `poscounts` variant tolerates zeros: each taxon's log
//! geometric mean sums logs of its positive entries over the total sample
//! count, ratios use only a sample's positive taxa, and the factors are
//! rescaled to geometric mean one. [`Normalizer::fit`] prefers the strict
//! rule and falls back to `poscounts` when no taxon is positive everywhere.

use std::path::Path;
use std::str::FromStr;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_writer, fmt_f64, sample_id};
use crate::ts::{InterventionSeriesSet, ScaleTag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NormalizationMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "sf")]
    SizeFactor,
    #[serde(rename = "sf-asinh")]
    SizeFactorAsinh,
}

impl NormalizationMode {
    pub fn as_str(self) -> &'static str {
        match self {
            NormalizationMode::None => "none",
            NormalizationMode::SizeFactor => "sf",
            NormalizationMode::SizeFactorAsinh => "sf-asinh",
        }
    }

    /// Scale tag of data after this mode is applied to counts.
    pub fn output_scale(self) -> ScaleTag {
        match self {
            NormalizationMode::None => ScaleTag::Counts,
            NormalizationMode::SizeFactor => ScaleTag::Normalized,
            NormalizationMode::SizeFactorAsinh => ScaleTag::NormalizedAsinh,
        }
    }
}

impl FromStr for NormalizationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NormalizationMode::None),
            "sf" | "size_factor" => Ok(NormalizationMode::SizeFactor),
            "sf-asinh" | "size_factor_asinh" => Ok(NormalizationMode::SizeFactorAsinh),
            other => Err(Error::invalid(format!(
                "unknown normalization `{other}` (expected none, sf, sf-asinh)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeFactorRule {
    /// Reference over taxa positive in every sample.
    AllPositive,
    /// Zero-tolerant reference (`poscounts`).
    PosCounts,
}

/// Per-taxon reference learned from a pool of samples; can be applied to
/// samples that were not part of the pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeReference {
    pub rule: SizeFactorRule,
    /// Log geometric mean per taxon; `None` for excluded taxa.
    pub log_means: Vec<Option<f64>>,
    /// Divisor applied to raw medians (1 for the strict rule).
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeFactors {
    /// `factors[i][k]` for subject `i`, observed column `k`.
    pub factors: Vec<Vec<f64>>,
    pub reference: SizeReference,
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

fn require_counts(set: &InterventionSeriesSet) -> Result<()> {
    if set.scale != ScaleTag::Counts {
        return Err(Error::Scale(format!(
            "size factors need counts, data is already {}",
            set.scale.as_str()
        )));
    }
    Ok(())
}

fn n_samples(set: &InterventionSeriesSet) -> usize {
    set.subjects.iter().map(|s| s.n_observed()).sum()
}

impl SizeReference {
    /// Raw median of ratios for one sample column, before `scale`.
    fn raw_factor(&self, column: impl Iterator<Item = f64>) -> Option<f64> {
        let mut ratios: Vec<f64> = column
            .zip(&self.log_means)
            .filter_map(|(y, lm)| {
                let lm = (*lm)?;
                match self.rule {
                    SizeFactorRule::AllPositive => Some(y / lm.exp()),
                    SizeFactorRule::PosCounts => (y > 0.0).then(|| y / lm.exp()),
                }
            })
            .collect();
        median(&mut ratios)
    }

    /// Factors for every observed sample in `set` against this reference.
    pub fn factors_for(&self, set: &InterventionSeriesSet) -> Result<SizeFactors> {
        require_counts(set)?;
        if set.n_taxa() != self.log_means.len() {
            return Err(Error::invalid(format!(
                "reference has {} taxa, data has {}",
                self.log_means.len(),
                set.n_taxa()
            )));
        }
        let mut factors = Vec::with_capacity(set.n_subjects());
        for subject in &set.subjects {
            let mut row = Vec::with_capacity(subject.n_observed());
            for k in 0..subject.n_observed() {
                let raw = self.raw_factor(subject.abundance_at(k).iter().copied());
                let f = raw.map(|r| r / self.scale).unwrap_or(0.0);
                if !(f > 0.0 && f.is_finite()) {
                    return Err(Error::Data(format!(
                        "sample `{}` has no usable positive counts for a size factor",
                        sample_id(&subject.id, k)
                    )));
                }
                row.push(f);
            }
            factors.push(row);
        }
        Ok(SizeFactors {
            factors,
            reference: self.clone(),
        })
    }
}

/// Strict median-of-ratios size factors.
pub fn size_factors_median_ratios(set: &InterventionSeriesSet) -> Result<SizeFactors> {
    require_counts(set)?;
    let n = n_samples(set) as f64;
    let log_means: Vec<Option<f64>> = (0..set.n_taxa())
        .map(|j| {
            let mut sum = 0.0;
            for s in &set.subjects {
                for &y in s.abundances.row(j) {
                    if !(y > 0.0) {
                        return None;
                    }
                    sum += y.ln();
                }
            }
            Some(sum / n)
        })
        .collect();
    if n == 0.0 || log_means.iter().all(Option::is_none) {
        return Err(Error::NoPositiveTaxon);
    }
    SizeReference {
        rule: SizeFactorRule::AllPositive,
        log_means,
        scale: 1.0,
    }
    .factors_for(set)
}

/// Zero-tolerant size factors, normalized to geometric mean one.
pub fn size_factors_poscounts(set: &InterventionSeriesSet) -> Result<SizeFactors> {
    require_counts(set)?;
    let n = n_samples(set) as f64;
    let log_means: Vec<Option<f64>> = (0..set.n_taxa())
        .map(|j| {
            let mut sum = 0.0;
            let mut any = false;
            for s in &set.subjects {
                for &y in s.abundances.row(j) {
                    if y > 0.0 {
                        sum += y.ln();
                        any = true;
                    }
                }
            }
            any.then(|| sum / n)
        })
        .collect();
    if log_means.iter().all(Option::is_none) {
        return Err(Error::NoPositiveTaxon);
    }
    let unscaled = SizeReference {
        rule: SizeFactorRule::PosCounts,
        log_means,
        scale: 1.0,
    };
    let raw = unscaled.factors_for(set)?;
    let mean_log = raw.factors.iter().flatten().map(|f| f.ln()).sum::<f64>() / n;
    SizeReference {
        scale: mean_log.exp(),
        ..unscaled
    }
    .factors_for(set)
}

/// Strict rule when some taxon is positive everywhere, `poscounts` otherwise.
pub fn estimate_size_factors(set: &InterventionSeriesSet) -> Result<SizeFactors> {
    match size_factors_median_ratios(set) {
        Err(Error::NoPositiveTaxon) => size_factors_poscounts(set),
        other => other,
    }
}

impl SizeFactors {
    /// Write `sample,factor` rows.
    pub fn write_csv(&self, set: &InterventionSeriesSet, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["sample", "factor"])?;
        for (subject, row) in set.subjects.iter().zip(&self.factors) {
            for (k, f) in row.iter().enumerate() {
                w.write_record([sample_id(&subject.id, k), fmt_f64(*f)])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `ln(x + sqrt(x² + 1))`.
pub fn asinh(x: f64) -> f64 {
    x.asinh()
}

/// A fitted normalization that can be replayed on new data (e.g. holdout
/// subjects) without re-estimating the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mode: NormalizationMode,
    pub reference: Option<SizeReference>,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer {
            mode: NormalizationMode::None,
            reference: None,
        }
    }

    pub fn fit(set: &InterventionSeriesSet, mode: NormalizationMode) -> Result<Self> {
        let reference = match mode {
            NormalizationMode::None => None,
            _ => Some(estimate_size_factors(set)?.reference),
        };
        Ok(Normalizer { mode, reference })
    }

    pub fn apply(&self, set: &InterventionSeriesSet) -> Result<InterventionSeriesSet> {
        let Some(reference) = &self.reference else {
            return Ok(set.clone());
        };
        let factors = reference.factors_for(set)?;
        let asinh_after = self.mode == NormalizationMode::SizeFactorAsinh;
        Ok(set.map_abundances(self.mode.output_scale(), |i, s| {
            let mut y: Array2<f64> = s.abundances.clone();
            for (k, mut col) in y.columns_mut().into_iter().enumerate() {
                let f = factors.factors[i][k];
                col.mapv_inplace(|v| if asinh_after { asinh(v / f) } else { v / f });
            }
            y
        }))
    }
}

/// Fit and apply in one step on the whole pooled set.
pub fn apply_normalization(
    set: &InterventionSeriesSet,
    mode: NormalizationMode,
) -> Result<InterventionSeriesSet> {
    if mode != NormalizationMode::None {
        require_counts(set)?;
    }
    Normalizer::fit(set, mode)?.apply(set)
}
