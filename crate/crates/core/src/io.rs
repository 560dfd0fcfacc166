//! Tabular ingestion and export.
//!
//! A dataset directory holds four CSV files:
//!
//! * `reads.csv`: first column taxon name, remaining header cells are sample
//!   ids, one row per taxon.
//! * `samples.csv`: `sample,subject,time`.
//! * `interventions.csv`: `sample,<channel>...`.
//! * `subjects.csv`: `subject,<covariate>...`.
//!
//! Floats are written with 17 significant digits (integral values without a
//! fractional part), which round-trips every `f64` exactly.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::ts::{InterventionSeriesSet, ScaleTag, SubjectSeries};

pub const READS_FILE: &str = "reads.csv";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const INTERVENTIONS_FILE: &str = "interventions.csv";
pub const SUBJECTS_FILE: &str = "subjects.csv";

/// Format a float so that parsing it back gives the same bits.
pub fn fmt_f64(x: f64) -> String {
    if x.is_finite() && x.fract() == 0.0 && x.abs() < 1e15 {
        if x == 0.0 && x.is_sign_negative() {
            return "-0".to_string();
        }
        format!("{x:.0}")
    } else {
        format!("{x:.16e}")
    }
}

fn parse_cell(file: &str, row: &str, column: &str, value: &str) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| Error::NonNumeric {
        file: file.to_string(),
        row: row.to_string(),
        column: column.to_string(),
        value: value.to_string(),
    })
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(file: &str, reader: impl Read) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() {
        return Err(Error::MalformedTable {
            file: file.into(),
            reason: "missing header".into(),
        });
    }
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let row: Vec<String> = record.iter().map(|c| c.trim().to_string()).collect();
        if row.len() != header.len() {
            return Err(Error::MalformedTable {
                file: file.into(),
                reason: format!(
                    "row `{}` has {} cells, header has {}",
                    row.first().map(String::as_str).unwrap_or(""),
                    row.len(),
                    header.len()
                ),
            });
        }
        rows.push(row);
    }
    Ok(Table { header, rows })
}

/// Build a set from the four tables. Columns of each subject are sorted by
/// time; subjects appear in order of first mention in `samples`.
pub fn ingest(
    reads: impl Read,
    interventions: impl Read,
    samples: impl Read,
    subjects: impl Read,
) -> Result<InterventionSeriesSet> {
    let reads = read_table(READS_FILE, reads)?;
    let interventions = read_table(INTERVENTIONS_FILE, interventions)?;
    let samples = read_table(SAMPLES_FILE, samples)?;
    let subjects = read_table(SUBJECTS_FILE, subjects)?;

    let sample_cols: Vec<&str> = reads.header[1..].iter().map(String::as_str).collect();
    let mut read_col: HashMap<&str, usize> = HashMap::new();
    for (c, s) in sample_cols.iter().enumerate() {
        if read_col.insert(s, c).is_some() {
            return Err(Error::MalformedTable {
                file: READS_FILE.into(),
                reason: format!("duplicate sample column `{s}`"),
            });
        }
    }
    let taxa_names: Vec<String> = reads.rows.iter().map(|r| r[0].clone()).collect();
    let mut counts = Array2::<f64>::zeros((taxa_names.len(), sample_cols.len()));
    for (j, row) in reads.rows.iter().enumerate() {
        for (c, cell) in row[1..].iter().enumerate() {
            counts[[j, c]] = parse_cell(READS_FILE, &row[0], sample_cols[c], cell)?;
        }
    }

    let intervention_names = interventions.header[1..].to_vec();
    let mut w_of: HashMap<&str, Vec<f64>> = HashMap::new();
    for row in &interventions.rows {
        if !read_col.contains_key(row[0].as_str()) {
            return Err(Error::UnknownSample(row[0].clone()));
        }
        let values = row[1..]
            .iter()
            .zip(&intervention_names)
            .map(|(cell, name)| parse_cell(INTERVENTIONS_FILE, &row[0], name, cell))
            .collect::<Result<Vec<_>>>()?;
        w_of.insert(row[0].as_str(), values);
    }

    let covariate_names = subjects.header[1..].to_vec();
    let mut z_of: HashMap<&str, Vec<f64>> = HashMap::new();
    for row in &subjects.rows {
        let values = row[1..]
            .iter()
            .zip(&covariate_names)
            .map(|(cell, name)| parse_cell(SUBJECTS_FILE, &row[0], name, cell))
            .collect::<Result<Vec<_>>>()?;
        z_of.insert(row[0].as_str(), values);
    }

    if samples.header.len() < 3 {
        return Err(Error::MalformedTable {
            file: SAMPLES_FILE.into(),
            reason: "expected columns sample,subject,time".into(),
        });
    }
    let mut order: Vec<&str> = Vec::new();
    let mut by_subject: HashMap<&str, Vec<(f64, &str)>> = HashMap::new();
    let mut seen_samples = HashSet::new();
    for row in &samples.rows {
        let (sample, subject) = (row[0].as_str(), row[1].as_str());
        if !read_col.contains_key(sample) {
            return Err(Error::UnknownSample(sample.to_string()));
        }
        if !seen_samples.insert(sample) {
            return Err(Error::MalformedTable {
                file: SAMPLES_FILE.into(),
                reason: format!("sample `{sample}` listed twice"),
            });
        }
        let time = parse_cell(SAMPLES_FILE, sample, "time", &row[2])?;
        if !time.is_finite() {
            return Err(Error::NonFinite("sample time"));
        }
        by_subject
            .entry(subject)
            .or_insert_with(|| {
                order.push(subject);
                Vec::new()
            })
            .push((time, sample));
    }
    if let Some(orphan) = sample_cols.iter().find(|s| !seen_samples.contains(*s)) {
        return Err(Error::UnknownSample(orphan.to_string()));
    }

    let d = intervention_names.len();
    let mut series = Vec::with_capacity(order.len());
    for subject in order {
        let mut rows = by_subject.remove(subject).unwrap();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(Error::DuplicateTimepoint {
                subject: subject.to_string(),
                time: w[0].0,
            });
        }
        let covariates = z_of
            .get(subject)
            .cloned()
            .ok_or_else(|| Error::UnknownSubject(subject.to_string()))?;
        let t = rows.len();
        let mut y = Array2::zeros((taxa_names.len(), t));
        let mut w = Array2::zeros((d, t));
        for (k, (_, sample)) in rows.iter().enumerate() {
            y.column_mut(k).assign(&counts.column(read_col[sample]));
            let wv = w_of
                .get(sample)
                .ok_or_else(|| Error::UnknownSample(sample.to_string()))?;
            for (ch, &v) in wv.iter().enumerate() {
                w[[ch, k]] = v;
            }
        }
        let times = rows.iter().map(|r| r.0).collect();
        series.push(SubjectSeries::new(subject, times, y, w, covariates)?);
    }
    let set = InterventionSeriesSet::new(
        series,
        taxa_names,
        intervention_names,
        covariate_names,
        ScaleTag::Counts,
    )
    .map_err(|e| match e {
        Error::Scale(msg) => Error::MalformedTable {
            file: READS_FILE.into(),
            reason: msg,
        },
        other => other,
    })?;
    Ok(set)
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

/// [`ingest`] from the four standard files inside `dir`.
pub fn read_dir(dir: &Path) -> Result<InterventionSeriesSet> {
    ingest(
        open(&dir.join(READS_FILE))?,
        open(&dir.join(INTERVENTIONS_FILE))?,
        open(&dir.join(SAMPLES_FILE))?,
        open(&dir.join(SUBJECTS_FILE))?,
    )
}

/// Sample id used on export for column `k` of `subject`.
pub fn sample_id(subject: &str, k: usize) -> String {
    format!("{subject}_{k}")
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

/// Write the four standard files for `set` into `dir`. Only observed
/// abundance columns are exported.
pub fn write_dir(set: &InterventionSeriesSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut samples = csv_writer(&dir.join(SAMPLES_FILE))?;
    samples.write_record(["sample", "subject", "time"])?;
    let mut interventions = csv_writer(&dir.join(INTERVENTIONS_FILE))?;
    let mut header = vec!["sample".to_string()];
    header.extend(set.intervention_names.iter().cloned());
    interventions.write_record(&header)?;

    let mut reads_header = vec!["taxon".to_string()];
    for subject in &set.subjects {
        for k in 0..subject.n_observed() {
            let id = sample_id(&subject.id, k);
            samples.write_record([id.clone(), subject.id.clone(), fmt_f64(subject.times[k])])?;
            let mut row = vec![id.clone()];
            row.extend(subject.interventions.column(k).iter().map(|&v| fmt_f64(v)));
            interventions.write_record(&row)?;
            reads_header.push(id);
        }
    }
    samples.flush().map_err(|e| Error::io(dir, e))?;
    interventions.flush().map_err(|e| Error::io(dir, e))?;

    let mut reads = csv_writer(&dir.join(READS_FILE))?;
    reads.write_record(&reads_header)?;
    for (j, name) in set.taxa_names.iter().enumerate() {
        let mut row = vec![name.clone()];
        for subject in &set.subjects {
            row.extend((0..subject.n_observed()).map(|k| fmt_f64(subject.abundances[[j, k]])));
        }
        reads.write_record(&row)?;
    }
    reads.flush().map_err(|e| Error::io(dir, e))?;

    let mut subjects = csv_writer(&dir.join(SUBJECTS_FILE))?;
    let mut header = vec!["subject".to_string()];
    header.extend(set.covariate_names.iter().cloned());
    subjects.write_record(&header)?;
    for subject in &set.subjects {
        let mut row = vec![subject.id.clone()];
        row.extend(subject.covariates.iter().map(|&v| fmt_f64(v)));
        subjects.write_record(&row)?;
    }
    subjects.flush().map_err(|e| Error::io(dir, e))?;
    Ok(())
}

/// Write `bytes` to `path` via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    const READS: &str = "taxon,a1,a2,a3,b1,b2,b3\n\
                         t1,1,2,3,4,5,6\n\
                         t2,0,0,1,1,0,0\n\
                         t3,9,8,7,6,5,4\n\
                         t4,1,1,1,1,1,1\n";
    const SAMPLES: &str = "sample,subject,time\na3,A,2\na1,A,0\na2,A,1\nb1,B,0\nb2,B,1.5\nb3,B,3\n";
    const INTERVENTIONS: &str = "sample,diet\na1,0\na2,1\na3,0\nb1,0\nb2,0\nb3,1\n";
    const SUBJECTS: &str = "subject,age\nA,30\nB,41.5\n";

    fn load(reads: &str, samples: &str, interventions: &str) -> Result<InterventionSeriesSet> {
        ingest(reads.as_bytes(), interventions.as_bytes(), samples.as_bytes(), SUBJECTS.as_bytes())
    }

    #[test]
    fn ingest_reshapes_and_sorts() {
        let set = load(READS, SAMPLES, INTERVENTIONS).unwrap();
        assert_eq!(set.n_taxa(), 4);
        assert_eq!(set.n_channels(), 1);
        assert_eq!(set.n_subjects(), 2);
        let a = set.subject("A").unwrap();
        assert_eq!(a.times, vec![0.0, 1.0, 2.0]);
        assert_eq!(a.abundances.row(0).to_vec(), vec![1.0, 2.0, 3.0]);
        assert_eq!(a.interventions.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
        assert_eq!(set.subject("B").unwrap().covariates, vec![41.5]);
        assert!(set.subjects.iter().all(|s| s.len() == 3));
        assert_eq!(set.scale, ScaleTag::Counts);
    }

    #[test]
    fn unknown_sample_is_named() {
        let samples = SAMPLES.replace("b3,B,3", "zz,B,3");
        let err = load(READS, &samples, INTERVENTIONS).unwrap_err();
        assert!(matches!(err, Error::UnknownSample(ref s) if s == "zz"), "{err}");
    }

    #[test]
    fn duplicate_timepoint() {
        let samples = SAMPLES.replace("b2,B,1.5", "b2,B,0");
        let err = load(READS, &samples, INTERVENTIONS).unwrap_err();
        assert!(matches!(err, Error::DuplicateTimepoint { ref subject, .. } if subject == "B"));
    }

    #[test]
    fn non_numeric_cell() {
        let reads = READS.replace("t3,9", "t3,nine");
        let err = load(&reads, SAMPLES, INTERVENTIONS).unwrap_err();
        assert!(matches!(err, Error::NonNumeric { ref row, ref value, .. } if row == "t3" && value == "nine"));
    }

    #[test]
    fn mismatched_taxon_row() {
        let reads = READS.replace("t4,1,1,1,1,1,1", "t4,1,1,1");
        let err = load(&reads, SAMPLES, INTERVENTIONS).unwrap_err();
        assert!(err.to_string().contains("t4"), "{err}");
    }

    #[test]
    fn float_format_roundtrips() {
        for x in [0.0, 1.0, -3.0, 0.1, 1.0 / 3.0, 1e-300, 123456.789, f64::MAX, 2e15] {
            assert_eq!(fmt_f64(x).parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
        assert_eq!(fmt_f64(12.0), "12");
    }

    #[test]
    fn directory_roundtrip() {
        let set = load(READS, SAMPLES, INTERVENTIONS).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dir(&set, dir.path()).unwrap();
        let back = read_dir(dir.path()).unwrap();
        assert_eq!(back, set);
    }
}
