//! Longitudinal cohort ingestion and preprocessing.
//!
//! The pipeline works on a long-format table of (subject, visit month,
//! biomarker values, diagnosis label, optional intracranial volume):
//! ICV normalization, within-class outlier removal, linear scaling to
//! [-1, 1], grid resampling, minimum-visit filtering, stratified subject
//! splitting, and finally tensorization into a masked batch where missing
//! entries are stored as exact zeros alongside availability masks.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Rng;

/// Diagnosis label after merging fine-grained clinical groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Label {
    Cn,
    Mci,
    Ad,
}

impl Label {
    pub const ALL: [Label; 3] = [Label::Cn, Label::Mci, Label::Ad];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Cn => "CN",
            Label::Mci => "MCI",
            Label::Ad => "AD",
        }
    }

    /// Parse a label, merging aliases (NL/SMC into CN, EMCI/LMCI into MCI,
    /// Dementia into AD). Converter notations like "MCI to AD" resolve to the
    /// destination status.
    pub fn parse(s: &str) -> Option<Label> {
        let s = s.trim();
        if let Some(pos) = s.to_ascii_lowercase().find(" to ") {
            return Label::parse(&s[pos + 4..]);
        }
        match s.to_ascii_uppercase().as_str() {
            "CN" | "NL" | "SMC" => Some(Label::Cn),
            "MCI" | "EMCI" | "LMCI" => Some(Label::Mci),
            "AD" | "DEMENTIA" => Some(Label::Ad),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One visit of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub subject_id: String,
    pub visit_month: i64,
    /// One entry per biomarker column; `None` is a missing measurement.
    pub values: Vec<Option<f64>>,
    pub label: Option<Label>,
    pub icv: Option<f64>,
}

/// Long-format longitudinal table. Records are kept sorted by
/// (subject_id, visit_month) and (subject, visit) pairs are unique.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortTable {
    pub biomarkers: Vec<String>,
    pub records: Vec<Record>,
}

impl CohortTable {
    pub fn new(biomarkers: Vec<String>, mut records: Vec<Record>) -> Result<Self> {
        records.sort_by(|a, b| {
            (a.subject_id.as_str(), a.visit_month).cmp(&(b.subject_id.as_str(), b.visit_month))
        });
        for w in records.windows(2) {
            if w[0].subject_id == w[1].subject_id && w[0].visit_month == w[1].visit_month {
                return Err(Error::DuplicateVisit {
                    path: "<memory>".into(),
                    subject: w[0].subject_id.clone(),
                    month: w[0].visit_month,
                    row_a: 0,
                    row_b: 0,
                });
            }
        }
        for r in &records {
            if r.values.len() != biomarkers.len() {
                return Err(Error::DimensionMismatch {
                    op: "CohortTable::new",
                    expected: format!("{} biomarker values", biomarkers.len()),
                    got: format!("{}", r.values.len()),
                });
            }
        }
        Ok(CohortTable { biomarkers, records })
    }

    /// Sorted distinct subject ids; this order fixes subject indexing
    /// everywhere downstream.
    pub fn subjects(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if out.last().map(|s| s.as_str()) != Some(r.subject_id.as_str()) {
                out.push(r.subject_id.clone());
            }
        }
        out
    }

    pub fn records_of<'a>(&'a self, subject: &'a str) -> impl Iterator<Item = &'a Record> {
        let start = self.records.partition_point(|r| r.subject_id.as_str() < subject);
        self.records[start..]
            .iter()
            .take_while(move |r| r.subject_id == subject)
    }

}

/// A row that could not be ingested; the row is dropped and reported.
#[derive(Debug, Clone)]
pub struct RowIssue {
    pub line: u64,
    pub subject: String,
    pub message: String,
}

const COL_SUBJECT: &str = "subject_id";
const COL_MONTH: &str = "visit_month";
const COL_LABEL: &str = "label";
const COL_ICV: &str = "icv";

/// Load a cohort CSV with header `subject_id,visit_month,<biomarkers...>[,label][,icv]`.
///
/// Missing values are encoded as empty fields only; literal "NA"/"NaN" (or any
/// other unparseable text) rejects the row into the returned issue list.
/// Duplicate (subject, visit) pairs and missing required columns are fatal.
pub fn load_csv(path: &Path) -> Result<(CohortTable, Vec<RowIssue>)> {
    let display = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    for required in [COL_SUBJECT, COL_MONTH] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::MissingColumn {
                path: display.clone(),
                column: required.into(),
            });
        }
    }
    {
        let mut seen = std::collections::BTreeSet::new();
        for h in &headers {
            if !seen.insert(h) {
                return Err(Error::InvalidArgument {
                    what: "csv header",
                    why: format!("duplicate column `{h}` in {display}"),
                });
            }
        }
    }

    let idx_subject = headers.iter().position(|h| h == COL_SUBJECT).unwrap();
    let idx_month = headers.iter().position(|h| h == COL_MONTH).unwrap();
    let idx_label = headers.iter().position(|h| h == COL_LABEL);
    let idx_icv = headers.iter().position(|h| h == COL_ICV);
    let biomarker_cols: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(i, h)| {
            *i != idx_subject && *i != idx_month && Some(*i) != idx_label && Some(*i) != idx_icv && !h.is_empty()
        })
        .map(|(i, h)| (i, h.clone()))
        .collect();
    if biomarker_cols.is_empty() {
        return Err(Error::InvalidArgument {
            what: "csv header",
            why: format!("no biomarker columns found in {display}"),
        });
    }

    let mut records: Vec<(u64, Record)> = Vec::new();
    let mut issues: Vec<RowIssue> = Vec::new();

    for row in reader.records() {
        let row = row.map_err(|e| Error::Csv {
            path: display.clone(),
            source: e,
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| row.get(i).unwrap_or("").trim().to_string();

        let subject = field(idx_subject);
        if subject.is_empty() {
            issues.push(RowIssue {
                line,
                subject,
                message: "empty subject_id".into(),
            });
            continue;
        }

        let month_raw = field(idx_month);
        let month: i64 = match month_raw.parse() {
            Ok(m) if m >= 0 => m,
            _ => {
                issues.push(RowIssue {
                    line,
                    subject,
                    message: format!("unparseable or negative visit_month `{month_raw}`"),
                });
                continue;
            }
        };

        let mut bad: Option<String> = None;
        let parse_opt = |raw: &str, col: &str, bad: &mut Option<String>| -> Option<f64> {
            if raw.is_empty() {
                return None;
            }
            match raw.parse::<f64>() {
                Ok(v) if v.is_finite() => Some(v),
                _ => {
                    bad.get_or_insert_with(|| format!("unparseable numeric `{raw}` in column `{col}`"));
                    None
                }
            }
        };

        let values: Vec<Option<f64>> = biomarker_cols
            .iter()
            .map(|(i, name)| parse_opt(&field(*i), name, &mut bad))
            .collect();
        let icv = idx_icv.and_then(|i| parse_opt(&field(i), COL_ICV, &mut bad));

        let label = match idx_label {
            Some(i) => {
                let raw = field(i);
                if raw.is_empty() {
                    None
                } else {
                    match Label::parse(&raw) {
                        Some(l) => Some(l),
                        None => {
                            bad.get_or_insert_with(|| format!("unknown label `{raw}`"));
                            None
                        }
                    }
                }
            }
            None => None,
        };

        if let Some(message) = bad {
            issues.push(RowIssue {
                line,
                subject,
                message,
            });
            continue;
        }

        records.push((
            line,
            Record {
                subject_id: subject,
                visit_month: month,
                values,
                label,
                icv,
            },
        ));
    }

    // duplicate detection with original line numbers
    {
        let mut seen: BTreeMap<(String, i64), u64> = BTreeMap::new();
        for (line, r) in &records {
            if let Some(prev) = seen.insert((r.subject_id.clone(), r.visit_month), *line) {
                return Err(Error::DuplicateVisit {
                    path: display,
                    subject: r.subject_id.clone(),
                    month: r.visit_month,
                    row_a: prev,
                    row_b: *line,
                });
            }
        }
    }

    let biomarkers = biomarker_cols.into_iter().map(|(_, n)| n).collect();
    let table = CohortTable::new(biomarkers, records.into_iter().map(|(_, r)| r).collect())?;
    Ok((table, issues))
}

fn fmt_opt(v: &Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => String::new(),
    }
}

/// Write a cohort CSV in the same format `load_csv` reads. The `icv` column is
/// emitted only when at least one record carries a value.
pub fn save_csv(table: &CohortTable, path: &Path) -> Result<()> {
    let has_icv = table.records.iter().any(|r| r.icv.is_some());
    let mut out = String::new();
    out.push_str(COL_SUBJECT);
    out.push(',');
    out.push_str(COL_MONTH);
    for b in &table.biomarkers {
        out.push(',');
        out.push_str(b);
    }
    out.push(',');
    out.push_str(COL_LABEL);
    if has_icv {
        out.push(',');
        out.push_str(COL_ICV);
    }
    out.push('\n');
    for r in &table.records {
        out.push_str(&r.subject_id);
        out.push(',');
        out.push_str(&r.visit_month.to_string());
        for v in &r.values {
            out.push(',');
            out.push_str(&fmt_opt(v));
        }
        out.push(',');
        if let Some(l) = r.label {
            out.push_str(l.as_str());
        }
        if has_icv {
            out.push(',');
            out.push_str(&fmt_opt(&r.icv));
        }
        out.push('\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Divide every biomarker value by the record's intracranial volume. Records
/// carrying data but no positive ICV are collected into one fatal error.
pub fn normalize_icv(table: &CohortTable) -> Result<CohortTable> {
    let mut offenders: Vec<String> = Vec::new();
    let mut records = Vec::with_capacity(table.records.len());
    for r in &table.records {
        let has_data = r.values.iter().any(|v| v.is_some());
        if !has_data {
            let mut r = r.clone();
            r.icv = None;
            records.push(r);
            continue;
        }
        match r.icv {
            Some(icv) if icv > 0.0 => {
                let values = r.values.iter().map(|v| v.map(|x| x / icv)).collect();
                records.push(Record {
                    subject_id: r.subject_id.clone(),
                    visit_month: r.visit_month,
                    values,
                    label: r.label,
                    icv: None,
                });
            }
            _ => {
                if !offenders.contains(&r.subject_id) {
                    offenders.push(r.subject_id.clone());
                }
            }
        }
    }
    if !offenders.is_empty() {
        return Err(Error::MissingIcv {
            subjects: offenders.join(", "),
        });
    }
    CohortTable::new(table.biomarkers.clone(), records)
}

/// One value converted to missing by the outlier filter.
#[derive(Debug, Clone)]
pub struct OutlierCell {
    pub subject_id: String,
    pub visit_month: i64,
    pub biomarker: String,
    pub value: f64,
    pub z: f64,
}

#[derive(Debug, Clone, Default)]
pub struct OutlierReport {
    pub converted: Vec<OutlierCell>,
    pub warnings: Vec<String>,
}

/// Leave-one-out z-score of `x` against the rest of the group.
/// A zero-spread rest gives z = 0 when x matches it and infinity otherwise.
fn loo_z(x: f64, rest: &[f64]) -> f64 {
    let n = rest.len() as f64;
    let mean = rest.iter().sum::<f64>() / n;
    let var = rest.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    let dev = (x - mean).abs();
    if sd == 0.0 {
        if dev == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        dev / sd
    }
}

/// Convert within-class outliers of each biomarker to missing values.
///
/// The rule is an iterative leave-one-out z-score: within each
/// (label, biomarker) group of values (pooled across subjects and visits),
/// repeatedly compute every value's z-score against the group excluding that
/// value, and remove the single worst value whose |z| exceeds the threshold,
/// until none does. Visits without a label borrow the subject's nearest
/// labeled visit; subjects with no labels at all are left untouched.
pub fn filter_outliers(table: &CohortTable, z_threshold: f64) -> Result<(CohortTable, OutlierReport)> {
    if !(z_threshold > 0.0) {
        return Err(Error::InvalidArgument {
            what: "filter_outliers",
            why: format!("z_threshold must be positive, got {z_threshold}"),
        });
    }
    let mut report = OutlierReport::default();

    // resolve a label per record: own, else nearest labeled visit (ties to
    // the earlier visit)
    let mut resolved: Vec<Option<Label>> = Vec::with_capacity(table.records.len());
    let subjects = table.subjects();
    let mut per_subject: BTreeMap<&str, Vec<(i64, Label)>> = BTreeMap::new();
    for s in &subjects {
        per_subject.insert(
            s.as_str(),
            table
                .records_of(s)
                .filter_map(|r| r.label.map(|l| (r.visit_month, l)))
                .collect(),
        );
    }
    for r in &table.records {
        let lab = r.label.or_else(|| {
            per_subject[r.subject_id.as_str()]
                .iter()
                .min_by_key(|(m, _)| ((m - r.visit_month).abs(), *m))
                .map(|(_, l)| *l)
        });
        resolved.push(lab);
    }

    let mut records = table.records.clone();
    for (b_idx, b_name) in table.biomarkers.iter().enumerate() {
        for class in Label::ALL {
            // member indices into `records` with a value for this biomarker
            let mut members: Vec<usize> = records
                .iter()
                .enumerate()
                .filter(|(i, r)| resolved[*i] == Some(class) && r.values[b_idx].is_some())
                .map(|(i, _)| i)
                .collect();

            if members.len() < 3 {
                if !members.is_empty() {
                    report.warnings.push(format!(
                        "group ({class}, {b_name}) has {} observed values; outlier filter skipped",
                        members.len()
                    ));
                }
                continue;
            }

            loop {
                if members.len() < 3 {
                    report.warnings.push(format!(
                        "group ({class}, {b_name}) shrank below 3 values; stopping"
                    ));
                    break;
                }
                let values: Vec<f64> = members.iter().map(|&i| records[i].values[b_idx].unwrap()).collect();
                let mut worst: Option<(f64, usize)> = None; // (z, position in members)
                for (pos, &x) in values.iter().enumerate() {
                    let rest: Vec<f64> = values
                        .iter()
                        .enumerate()
                        .filter(|(p, _)| *p != pos)
                        .map(|(_, &v)| v)
                        .collect();
                    let z = loo_z(x, &rest);
                    let better = match worst {
                        None => true,
                        Some((wz, _)) => z > wz,
                    };
                    if better {
                        worst = Some((z, pos));
                    }
                }
                let (z, pos) = worst.unwrap();
                if z <= z_threshold {
                    break;
                }
                let rec_idx = members[pos];
                let value = records[rec_idx].values[b_idx].take().unwrap();
                report.converted.push(OutlierCell {
                    subject_id: records[rec_idx].subject_id.clone(),
                    visit_month: records[rec_idx].visit_month,
                    biomarker: b_name.clone(),
                    value,
                    z,
                });
                members.remove(pos);
            }
        }
    }

    let table = CohortTable::new(table.biomarkers.clone(), records)?;
    Ok((table, report))
}

/// Per-biomarker (min, max) observed on the training split; defines the
/// linear map to [-1, 1] and its inverse back to original units.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingSpec {
    pub biomarkers: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
}

impl ScalingSpec {
    pub fn range_width(&self, idx: usize) -> f64 {
        let (lo, hi) = self.ranges[idx];
        hi - lo
    }

    /// x -> 2 (x - min) / (max - min) - 1
    pub fn apply_value(&self, idx: usize, x: f64) -> f64 {
        let (lo, hi) = self.ranges[idx];
        2.0 * (x - lo) / (hi - lo) - 1.0
    }

    /// Inverse of `apply_value`.
    pub fn invert_value(&self, idx: usize, v: f64) -> f64 {
        let (lo, hi) = self.ranges[idx];
        (v + 1.0) * (hi - lo) / 2.0 + lo
    }

    /// Sidecar format: one `name,min,max` row per biomarker, no header.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (name, (lo, hi)) in self.biomarkers.iter().zip(&self.ranges) {
            out.push_str(&format!("{name},{lo},{hi}\n"));
        }
        fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<ScalingSpec> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut biomarkers = Vec::new();
        let mut ranges = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::InvalidArgument {
                    what: "scaling sidecar",
                    why: format!("{}: line {} has {} fields, expected name,min,max", path.display(), i + 1, parts.len()),
                });
            }
            let lo: f64 = parts[1].parse().map_err(|_| Error::InvalidArgument {
                what: "scaling sidecar",
                why: format!("{}: line {}: bad min `{}`", path.display(), i + 1, parts[1]),
            })?;
            let hi: f64 = parts[2].parse().map_err(|_| Error::InvalidArgument {
                what: "scaling sidecar",
                why: format!("{}: line {}: bad max `{}`", path.display(), i + 1, parts[2]),
            })?;
            biomarkers.push(parts[0].to_string());
            ranges.push((lo, hi));
        }
        Ok(ScalingSpec { biomarkers, ranges })
    }
}

/// Fit the [-1, 1] scaling on a table (by contract, the training split only).
pub fn fit_scaling(table: &CohortTable) -> Result<ScalingSpec> {
    let mut ranges = Vec::with_capacity(table.biomarkers.len());
    for (idx, name) in table.biomarkers.iter().enumerate() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for r in &table.records {
            if let Some(v) = r.values[idx] {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
        if !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidArgument {
                what: "fit_scaling",
                why: format!("biomarker `{name}` has no observed values"),
            });
        }
        if lo == hi {
            return Err(Error::ConstantBiomarker {
                name: name.clone(),
                value: lo,
            });
        }
        ranges.push((lo, hi));
    }
    Ok(ScalingSpec {
        biomarkers: table.biomarkers.clone(),
        ranges,
    })
}

/// Apply the fitted scaling; values outside the fitted range (possible on
/// validation/test) are clipped to [-1, 1] and counted.
pub fn apply_scaling(table: &CohortTable, spec: &ScalingSpec) -> Result<(CohortTable, usize)> {
    if table.biomarkers != spec.biomarkers {
        return Err(Error::InvalidArgument {
            what: "apply_scaling",
            why: "biomarker columns do not match the scaling spec".into(),
        });
    }
    let mut clipped = 0usize;
    let mut records = table.records.clone();
    for r in &mut records {
        for (idx, v) in r.values.iter_mut().enumerate() {
            if let Some(x) = *v {
                let mut s = spec.apply_value(idx, x);
                if s > 1.0 {
                    s = 1.0;
                    clipped += 1;
                } else if s < -1.0 {
                    s = -1.0;
                    clipped += 1;
                }
                *v = Some(s);
            }
        }
    }
    Ok((CohortTable::new(table.biomarkers.clone(), records)?, clipped))
}

/// Keep only subjects with at least `k` observed visits for every biomarker.
pub fn filter_min_visits(table: &CohortTable, k: usize) -> Result<CohortTable> {
    if k == 0 {
        return Err(Error::InvalidArgument {
            what: "filter_min_visits",
            why: "k must be >= 1".into(),
        });
    }
    let n = table.biomarkers.len();
    let mut keep: Vec<String> = Vec::new();
    for subject in table.subjects() {
        let mut counts = vec![0usize; n];
        for r in table.records_of(&subject) {
            for (i, v) in r.values.iter().enumerate() {
                if v.is_some() {
                    counts[i] += 1;
                }
            }
        }
        if counts.iter().all(|&c| c >= k) {
            keep.push(subject);
        }
    }
    let records = table
        .records
        .iter()
        .filter(|r| keep.binary_search(&r.subject_id).is_ok())
        .cloned()
        .collect();
    CohortTable::new(table.biomarkers.clone(), records)
}

#[derive(Debug, Clone, Default)]
pub struct ResampleReport {
    /// (subject, dropped original month, winning original month, slot month)
    pub collisions: Vec<(String, i64, i64, i64)>,
    /// (subject, original month) beyond the grid
    pub out_of_range: Vec<(String, i64)>,
}

/// Snap visits onto a regular grid of `horizon/interval + 1` slots at months
/// 0, interval, ..., horizon. Ties round toward the earlier slot; slot
/// collisions keep the nearer visit; slots with no visit become all-missing
/// rows so every subject covers the full grid.
pub fn resample_grid(
    table: &CohortTable,
    interval_months: i64,
    horizon_months: i64,
) -> Result<(CohortTable, ResampleReport)> {
    if interval_months <= 0 || horizon_months <= 0 || horizon_months % interval_months != 0 {
        return Err(Error::InvalidArgument {
            what: "resample_grid",
            why: format!("interval {interval_months} must be positive and divide horizon {horizon_months}"),
        });
    }
    let slots = (horizon_months / interval_months + 1) as usize;
    let mut report = ResampleReport::default();
    let mut records: Vec<Record> = Vec::new();

    for subject in table.subjects() {
        // slot -> (distance, original month, record)
        let mut chosen: Vec<Option<(i64, i64, &Record)>> = vec![None; slots];
        for r in table.records_of(&subject) {
            let q = r.visit_month / interval_months;
            let rem = r.visit_month % interval_months;
            let slot = if 2 * rem <= interval_months { q } else { q + 1 };
            if slot as usize >= slots {
                report.out_of_range.push((subject.clone(), r.visit_month));
                continue;
            }
            let dist = (r.visit_month - slot * interval_months).abs();
            match &chosen[slot as usize] {
                None => chosen[slot as usize] = Some((dist, r.visit_month, r)),
                Some((best_dist, best_month, _)) => {
                    let replace = dist < *best_dist || (dist == *best_dist && r.visit_month < *best_month);
                    if replace {
                        report
                            .collisions
                            .push((subject.clone(), *best_month, r.visit_month, slot * interval_months));
                        chosen[slot as usize] = Some((dist, r.visit_month, r));
                    } else {
                        report
                            .collisions
                            .push((subject.clone(), r.visit_month, *best_month, slot * interval_months));
                    }
                }
            }
        }
        for (slot, entry) in chosen.iter().enumerate() {
            let month = slot as i64 * interval_months;
            match entry {
                Some((_, _, r)) => records.push(Record {
                    subject_id: subject.clone(),
                    visit_month: month,
                    values: r.values.clone(),
                    label: r.label,
                    icv: r.icv,
                }),
                None => records.push(Record {
                    subject_id: subject.clone(),
                    visit_month: month,
                    values: vec![None; table.biomarkers.len()],
                    label: None,
                    icv: None,
                }),
            }
        }
    }

    let table = CohortTable::new(table.biomarkers.clone(), records)?;
    Ok((table, report))
}

/// Stratified train/validation/test split specification.
#[derive(Debug, Clone)]
pub struct SplitSpec {
    /// (train, val, test); must sum to 1.
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 0,
        }
    }
}

/// Baseline label of a subject: the label at the earliest visit, else the
/// earliest labeled visit, else none.
fn baseline_label(table: &CohortTable, subject: &str) -> Option<Label> {
    let mut recs = table.records_of(subject);
    let first = recs.next()?;
    first
        .label
        .or_else(|| table.records_of(subject).find_map(|r| r.label))
}

/// Partition subjects into train/val/test, stratified by baseline label.
///
/// Within every class the subjects are shuffled by the seed; validation takes
/// the first floor(f_val * n) of them, test the next floor(f_test * n), and
/// the remainder goes to training. Deterministic given the seed.
pub fn split(
    table: &CohortTable,
    spec: &SplitSpec,
) -> Result<(CohortTable, CohortTable, CohortTable, Vec<String>)> {
    let (ft, fv, fe) = spec.fractions;
    if ft < 0.0 || fv < 0.0 || fe < 0.0 || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument {
            what: "split",
            why: format!("fractions must be non-negative and sum to 1, got ({ft}, {fv}, {fe})"),
        });
    }
    let mut warnings = Vec::new();
    let mut groups: BTreeMap<Option<Label>, Vec<String>> = BTreeMap::new();
    for s in table.subjects() {
        groups.entry(baseline_label(table, &s)).or_default().push(s);
    }
    if groups.contains_key(&None) {
        warnings.push(format!(
            "{} subject(s) have no label on any visit; stratified as their own group",
            groups[&None].len()
        ));
    }

    let mut rng = Rng::derive(spec.seed, 0x5011);
    let mut val: Vec<String> = Vec::new();
    let mut test: Vec<String> = Vec::new();
    let mut train: Vec<String> = Vec::new();
    for (class, mut subjects) in groups {
        let n = subjects.len();
        let n_val = (fv * n as f64).floor() as usize;
        let n_test = (fe * n as f64).floor() as usize;
        if n > 0 && (n_val == 0 || n_test == 0) && (fv > 0.0 || fe > 0.0) {
            warnings.push(format!(
                "class {} has only {n} subject(s); some splits are empty",
                class.map(|l| l.as_str()).unwrap_or("<unlabeled>")
            ));
        }
        rng.shuffle(&mut subjects);
        val.extend(subjects[..n_val].iter().cloned());
        test.extend(subjects[n_val..n_val + n_test].iter().cloned());
        train.extend(subjects[n_val + n_test..].iter().cloned());
    }
    train.sort();
    val.sort();
    test.sort();

    let pick = |subjects: &[String]| -> Result<CohortTable> {
        let records = table
            .records
            .iter()
            .filter(|r| subjects.binary_search(&r.subject_id).is_ok())
            .cloned()
            .collect();
        CohortTable::new(table.biomarkers.clone(), records)
    };
    Ok((pick(&train)?, pick(&val)?, pick(&test)?, warnings))
}

/// Tensorized cohort: values plus availability masks, missing cells stored as
/// exact zeros. Inputs are grid slots 0..T-1 and targets are slots 1..T
/// (one-step-ahead prediction of the same biomarkers, so M = N).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub subject_ids: Vec<String>,
    pub biomarkers: Vec<String>,
    /// `x[j][t][n]`, T entries per subject
    pub x: Vec<Vec<Vec<f64>>>,
    pub x_mask: Vec<Vec<Vec<bool>>>,
    /// `s[j][t][m]`, target for step t is the value at grid slot t+1
    pub s: Vec<Vec<Vec<f64>>>,
    pub s_mask: Vec<Vec<Vec<bool>>>,
    /// Grid spacing in months; slot t corresponds to month t * interval.
    pub interval_months: i64,
}

impl MaskedBatch {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn t_len(&self) -> usize {
        self.x.first().map_or(0, |s| s.len())
    }

    pub fn input_dim(&self) -> usize {
        self.x
            .first()
            .and_then(|s| s.first())
            .map_or(self.biomarkers.len(), |row| row.len())
    }

    /// Target dimension; equals `input_dim` for tensorized cohorts (targets
    /// are the same biomarkers one step ahead) but may differ on hand-built
    /// batches.
    pub fn target_dim(&self) -> usize {
        self.s
            .first()
            .and_then(|s| s.first())
            .map_or_else(|| self.input_dim(), |row| row.len())
    }

    /// Invariant check: every masked-off cell holds exactly 0.0.
    pub fn masked_cells_are_zero(&self) -> bool {
        let check = |vals: &Vec<Vec<Vec<f64>>>, masks: &Vec<Vec<Vec<bool>>>| {
            vals.iter().zip(masks).all(|(vs, ms)| {
                vs.iter()
                    .zip(ms)
                    .all(|(vt, mt)| vt.iter().zip(mt).all(|(&v, &m)| m || v == 0.0))
            })
        };
        check(&self.x, &self.x_mask) && check(&self.s, &self.s_mask)
    }

    /// Value and availability of grid slot `slot` (0..=T) for subject `j`,
    /// biomarker `n`. Slots below T are read from the input view, slot T from
    /// the last target step.
    pub fn slot_value(&self, j: usize, slot: usize, n: usize) -> (f64, bool) {
        let t_len = self.t_len();
        if slot < t_len {
            (self.x[j][slot][n], self.x_mask[j][slot][n])
        } else {
            debug_assert_eq!(slot, t_len);
            (self.s[j][t_len - 1][n], self.s_mask[j][t_len - 1][n])
        }
    }

    /// Rebuild the x/s views of subject `j` from per-slot values (length T+1).
    /// Only meaningful for tensorized cohorts where targets are the shifted
    /// inputs (`target_dim == input_dim`).
    pub fn set_subject_slots(&mut self, j: usize, slots: &[Vec<f64>], masks: &[Vec<bool>]) {
        let t_len = self.t_len();
        debug_assert_eq!(slots.len(), t_len + 1);
        debug_assert_eq!(self.input_dim(), self.target_dim());
        for t in 0..t_len {
            for n in 0..self.input_dim() {
                self.x[j][t][n] = if masks[t][n] { slots[t][n] } else { 0.0 };
                self.x_mask[j][t][n] = masks[t][n];
                self.s[j][t][n] = if masks[t + 1][n] { slots[t + 1][n] } else { 0.0 };
                self.s_mask[j][t][n] = masks[t + 1][n];
            }
        }
    }
}

fn infer_interval(table: &CohortTable) -> Result<i64> {
    let mut g: i64 = 0;
    for r in &table.records {
        g = gcd(g, r.visit_month);
    }
    if g == 0 {
        return Err(Error::InvalidArgument {
            what: "tensorize",
            why: "cannot infer grid interval: all visits at month 0".into(),
        });
    }
    Ok(g)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Tensorize a grid-resampled, scaled table into a masked batch with `t_len`
/// input steps (the table must cover `t_len + 1` grid slots).
pub fn tensorize(table: &CohortTable, t_len: usize) -> Result<MaskedBatch> {
    if t_len == 0 {
        return Err(Error::InvalidArgument {
            what: "tensorize",
            why: "t_len must be >= 1".into(),
        });
    }
    let interval = infer_interval(table)?;
    let slots = t_len + 1;
    let n = table.biomarkers.len();
    let subjects = table.subjects();

    let mut x = Vec::with_capacity(subjects.len());
    let mut x_mask = Vec::with_capacity(subjects.len());
    let mut s = Vec::with_capacity(subjects.len());
    let mut s_mask = Vec::with_capacity(subjects.len());

    for subject in &subjects {
        let mut slot_vals: Vec<Vec<f64>> = vec![vec![0.0; n]; slots];
        let mut slot_mask: Vec<Vec<bool>> = vec![vec![false; n]; slots];
        for r in table.records_of(subject) {
            if r.visit_month % interval != 0 {
                return Err(Error::InvalidArgument {
                    what: "tensorize",
                    why: format!(
                        "visit month {} of subject {subject} is off the inferred {interval}-month grid",
                        r.visit_month
                    ),
                });
            }
            let slot = (r.visit_month / interval) as usize;
            if slot >= slots {
                return Err(Error::InvalidArgument {
                    what: "tensorize",
                    why: format!(
                        "subject {subject} has a visit at month {} beyond the {} grid slots",
                        r.visit_month, slots
                    ),
                });
            }
            for (i, v) in r.values.iter().enumerate() {
                if let Some(val) = *v {
                    if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&val) {
                        return Err(Error::InvalidArgument {
                            what: "tensorize",
                            why: format!(
                                "value {val} of biomarker `{}` (subject {subject}, month {}) is outside [-1, 1]; scale the table first",
                                table.biomarkers[i], r.visit_month
                            ),
                        });
                    }
                    slot_vals[slot][i] = val;
                    slot_mask[slot][i] = true;
                }
            }
        }
        let xs: Vec<Vec<f64>> = (0..t_len).map(|t| slot_vals[t].clone()).collect();
        let xm: Vec<Vec<bool>> = (0..t_len).map(|t| slot_mask[t].clone()).collect();
        let ss: Vec<Vec<f64>> = (1..slots).map(|t| slot_vals[t].clone()).collect();
        let sm: Vec<Vec<bool>> = (1..slots).map(|t| slot_mask[t].clone()).collect();
        x.push(xs);
        x_mask.push(xm);
        s.push(ss);
        s_mask.push(sm);
    }

    Ok(MaskedBatch {
        subject_ids: subjects,
        biomarkers: table.biomarkers.clone(),
        x,
        x_mask,
        s,
        s_mask,
        interval_months: interval,
    })
}

/// Debug inverse of `tensorize`: reconstruct the grid table (values only;
/// labels and ICV are not carried by a batch).
pub fn untensorize(batch: &MaskedBatch) -> Result<CohortTable> {
    let t_len = batch.t_len();
    let mut records = Vec::new();
    for (j, subject) in batch.subject_ids.iter().enumerate() {
        for slot in 0..=t_len {
            let mut values = vec![None; batch.biomarkers.len()];
            for n in 0..batch.biomarkers.len() {
                let (v, m) = batch.slot_value(j, slot, n);
                if m {
                    values[n] = Some(v);
                }
            }
            records.push(Record {
                subject_id: subject.clone(),
                visit_month: slot as i64 * batch.interval_months,
                values,
                label: None,
                icv: None,
            });
        }
    }
    CohortTable::new(batch.biomarkers.clone(), records)
}

/// Per-subject labels at grid slots 0..=t_len, aligned with the sorted
/// subject order used by `tensorize`.
pub fn labels_at_slots(table: &CohortTable, t_len: usize) -> Result<Vec<Vec<Option<Label>>>> {
    let interval = infer_interval(table)?;
    let slots = t_len + 1;
    let mut out = Vec::new();
    for subject in table.subjects() {
        let mut labels = vec![None; slots];
        for r in table.records_of(&subject) {
            if r.visit_month % interval == 0 {
                let slot = (r.visit_month / interval) as usize;
                if slot < slots {
                    labels[slot] = r.label;
                }
            }
        }
        out.push(labels);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;
    use tempfile::NamedTempFile;

    fn write_csv(content: &str) -> NamedTempFile {
        let mut f = NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn rec(subject: &str, month: i64, values: &[Option<f64>], label: Option<Label>) -> Record {
        Record {
            subject_id: subject.into(),
            visit_month: month,
            values: values.to_vec(),
            label,
            icv: None,
        }
    }

    #[test]
    fn load_csv_empty_cell_is_missing() {
        let f = write_csv("subject_id,visit_month,ventricles,hippocampus,label\nS1,0,,0.004,CN\n");
        let (table, issues) = load_csv(f.path()).unwrap();
        assert!(issues.is_empty());
        assert_eq!(table.biomarkers, vec!["ventricles", "hippocampus"]);
        assert_eq!(table.records[0].values, vec![None, Some(0.004)]);
        assert_eq!(table.records[0].label, Some(Label::Cn));
    }

    #[test]
    fn load_csv_duplicate_visit_names_both_rows() {
        let f = write_csv(
            "subject_id,visit_month,v,label\nS1,12,0.1,CN\nS2,0,0.2,AD\nS1,12,0.3,CN\n",
        );
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("S1") && err.contains("12"), "{err}");
        assert!(err.contains("rows 2 and 4"), "{err}");
    }

    #[test]
    fn load_csv_missing_required_column_is_fatal() {
        let f = write_csv("subject,visit_month,v\nS1,0,0.1\n");
        let err = load_csv(f.path()).unwrap_err().to_string();
        assert!(err.contains("subject_id"), "{err}");
    }

    #[test]
    fn load_csv_rejects_na_literals() {
        let f = write_csv("subject_id,visit_month,v,label\nS1,0,NA,CN\nS1,12,0.5,CN\n");
        let (table, issues) = load_csv(f.path()).unwrap();
        assert_eq!(table.records.len(), 1);
        assert_eq!(issues.len(), 1);
        assert!(issues[0].message.contains("NA"));
    }

    #[test]
    fn load_csv_three_subject_fixture() {
        let f = write_csv(
            "subject_id,visit_month,v,h,label,icv\n\
             S1,0,0.5,0.2,CN,1500000\n\
             S1,12,0.6,,CN,1500000\n\
             S2,0,0.1,0.3,MCI to AD,1400000\n\
             S3,0,,,NL,1300000\n\
             S3,24,0.9,0.8,,1300000\n",
        );
        let (table, issues) = load_csv(f.path()).unwrap();
        assert!(issues.is_empty());
        assert_eq!(table.subjects(), vec!["S1", "S2", "S3"]);
        assert_eq!(table.records.len(), 5);
        assert_eq!(table.records_of("S1").count(), 2);
        assert_eq!(table.records[2].label, Some(Label::Ad)); // converter -> next status
        assert_eq!(table.records[3].label, Some(Label::Cn)); // NL alias
        assert_eq!(table.records[0].icv, Some(1.5e6));
    }

    #[test]
    fn csv_roundtrip_preserves_table() {
        let f = write_csv(
            "subject_id,visit_month,v,h,label\nS1,0,0.5,0.25,CN\nS1,12,,0.5,\nS2,0,-0.125,0.75,AD\n",
        );
        let (table, _) = load_csv(f.path()).unwrap();
        let out = NamedTempFile::new().unwrap();
        save_csv(&table, out.path()).unwrap();
        let (table2, _) = load_csv(out.path()).unwrap();
        assert_eq!(table, table2);
    }

    #[test]
    fn normalize_icv_divides_and_drops_column() {
        let mut r = rec("S1", 0, &[Some(8000.0), None], Some(Label::Cn));
        r.icv = Some(1.6e6);
        let table = CohortTable::new(vec!["v".into(), "h".into()], vec![r]).unwrap();
        let out = normalize_icv(&table).unwrap();
        assert_eq!(out.records[0].values[0], Some(0.005));
        assert_eq!(out.records[0].icv, None);
    }

    #[test]
    fn normalize_icv_all_missing_record_passes() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S1", 0, &[None], Some(Label::Cn))],
        )
        .unwrap();
        let out = normalize_icv(&table).unwrap();
        assert_eq!(out.records[0].values[0], None);
    }

    #[test]
    fn normalize_icv_missing_icv_is_fatal_listing_subjects() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S9", 0, &[Some(1.0)], Some(Label::Cn))],
        )
        .unwrap();
        let err = normalize_icv(&table).unwrap_err().to_string();
        assert!(err.contains("S9"), "{err}");
    }

    #[test]
    fn outlier_filter_removes_extreme_value() {
        let records: Vec<Record> = [1.0, 1.0, 1.0, 1.0, 100.0]
            .iter()
            .enumerate()
            .map(|(i, &v)| rec(&format!("S{i}"), 0, &[Some(v)], Some(Label::Cn)))
            .collect();
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let (out, report) = filter_outliers(&table, 3.0).unwrap();
        assert_eq!(report.converted.len(), 1);
        assert_eq!(report.converted[0].value, 100.0);
        let remaining: Vec<f64> = out.records.iter().filter_map(|r| r.values[0]).collect();
        assert_eq!(remaining, vec![1.0; 4]);
    }

    #[test]
    fn outlier_filter_keeps_homogeneous_group() {
        let records: Vec<Record> = (0..4)
            .map(|i| rec(&format!("S{i}"), 0, &[Some(5.0)], Some(Label::Mci)))
            .collect();
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let (out, report) = filter_outliers(&table, 3.0).unwrap();
        assert!(report.converted.is_empty());
        assert_eq!(out, table);
    }

    #[test]
    fn outlier_filter_uses_nearest_label_for_unlabeled_visits() {
        // S0's unlabeled visit at month 12 borrows the CN label from month 0;
        // its extreme value lands in the CN group and is removed.
        let mut records: Vec<Record> = (0..4)
            .map(|i| rec(&format!("S{i}"), 0, &[Some(1.0)], Some(Label::Cn)))
            .collect();
        records.push(rec("S0", 12, &[Some(50.0)], None));
        // an unlabeled-only subject is excluded from filtering
        records.push(rec("U1", 0, &[Some(999.0)], None));
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let (out, report) = filter_outliers(&table, 3.0).unwrap();
        assert_eq!(report.converted.len(), 1);
        assert_eq!(report.converted[0].subject_id, "S0");
        assert_eq!(report.converted[0].visit_month, 12);
        let u1 = out.records_of("U1").next().unwrap();
        assert_eq!(u1.values[0], Some(999.0));
    }

    #[test]
    fn outlier_filter_skips_small_groups() {
        let records = vec![
            rec("S1", 0, &[Some(1.0)], Some(Label::Ad)),
            rec("S2", 0, &[Some(100.0)], Some(Label::Ad)),
        ];
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let (out, report) = filter_outliers(&table, 3.0).unwrap();
        assert_eq!(out, table);
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn scaling_midpoint_and_hand_case() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![
                rec("S1", 0, &[Some(0.002)], None),
                rec("S1", 12, &[Some(0.010)], None),
                rec("S2", 0, &[Some(0.004)], None),
            ],
        )
        .unwrap();
        let spec = fit_scaling(&table).unwrap();
        assert_eq!(spec.ranges[0], (0.002, 0.010));
        assert!((spec.apply_value(0, 0.006) - 0.0).abs() < 1e-12); // midpoint
        assert!((spec.apply_value(0, 0.004) - (-0.5)).abs() < 1e-12);
        let (scaled, clipped) = apply_scaling(&table, &spec).unwrap();
        assert_eq!(clipped, 0);
        assert!((scaled.records[2].values[0].unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn scaling_roundtrip_within_1e12() {
        let spec = ScalingSpec {
            biomarkers: vec!["v".into()],
            ranges: vec![(0.002, 0.010)],
        };
        for &x in &[0.002, 0.004, 0.0071, 0.010] {
            let v = spec.apply_value(0, x);
            assert!((spec.invert_value(0, v) - x).abs() < 1e-12);
        }
        for &v in &[-1.0, -0.3, 0.0, 0.99] {
            let x = spec.invert_value(0, v);
            assert!((spec.apply_value(0, x) - v).abs() < 1e-12);
        }
    }

    #[test]
    fn scaling_constant_biomarker_is_fatal() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S1", 0, &[Some(3.0)], None), rec("S1", 12, &[Some(3.0)], None)],
        )
        .unwrap();
        assert!(matches!(fit_scaling(&table), Err(Error::ConstantBiomarker { .. })));
    }

    #[test]
    fn scaling_clips_out_of_range() {
        let spec = ScalingSpec {
            biomarkers: vec!["v".into()],
            ranges: vec![(0.0, 1.0)],
        };
        let table = CohortTable::new(vec!["v".into()], vec![rec("S1", 0, &[Some(2.0)], None)]).unwrap();
        let (scaled, clipped) = apply_scaling(&table, &spec).unwrap();
        assert_eq!(clipped, 1);
        assert_eq!(scaled.records[0].values[0], Some(1.0));
    }

    #[test]
    fn scaling_sidecar_roundtrip() {
        let spec = ScalingSpec {
            biomarkers: vec!["v".into(), "h".into()],
            ranges: vec![(0.002, 0.010), (-3.5, 7.25)],
        };
        let f = NamedTempFile::new().unwrap();
        spec.save(f.path()).unwrap();
        let loaded = ScalingSpec::load(f.path()).unwrap();
        assert_eq!(spec, loaded);
    }

    #[test]
    fn min_visits_is_per_biomarker() {
        // 5 visits on biomarker v but only 2 on h -> removed at k=3
        let mut records: Vec<Record> = (0..5)
            .map(|i| rec("S1", i * 12, &[Some(0.1), (i < 2).then_some(0.2)], None))
            .collect();
        records.push(rec("S2", 0, &[Some(0.1), Some(0.2)], None));
        records.push(rec("S2", 12, &[Some(0.1), Some(0.2)], None));
        records.push(rec("S2", 24, &[Some(0.1), Some(0.2)], None));
        let table = CohortTable::new(vec!["v".into(), "h".into()], records).unwrap();
        let out = filter_min_visits(&table, 3).unwrap();
        assert_eq!(out.subjects(), vec!["S2"]);

        // k=1 keeps any subject with at least one value per biomarker
        let out1 = filter_min_visits(&table, 1).unwrap();
        assert_eq!(out1.subjects(), vec!["S1", "S2"]);
    }

    #[test]
    fn resample_grid_slot_counts() {
        let table = CohortTable::new(vec!["v".into()], vec![rec("S1", 0, &[Some(0.1)], None)]).unwrap();
        let (g12, _) = resample_grid(&table, 12, 120).unwrap();
        assert_eq!(g12.records.len(), 11);
        let (g6, _) = resample_grid(&table, 6, 120).unwrap();
        assert_eq!(g6.records.len(), 21);
    }

    #[test]
    fn resample_grid_snaps_to_nearest() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S1", 13, &[Some(0.5)], Some(Label::Cn)), rec("S1", 18, &[Some(0.7)], None)],
        )
        .unwrap();
        let (g, _) = resample_grid(&table, 12, 24).unwrap();
        // month 13 -> slot 1 (month 12); month 18 ties between 12 and 24 ->
        // earlier slot, but slot 1 is taken by the nearer month-13 visit
        let m12 = g.records.iter().find(|r| r.visit_month == 12).unwrap();
        assert_eq!(m12.values[0], Some(0.5));
        let m0 = g.records.iter().find(|r| r.visit_month == 0).unwrap();
        assert_eq!(m0.values[0], None);

        // month-18 visit on a 6-month grid lands exactly on slot 3
        let (g6, _) = resample_grid(&table, 6, 24).unwrap();
        let m18 = g6.records.iter().find(|r| r.visit_month == 18).unwrap();
        assert_eq!(m18.values[0], Some(0.7));
    }

    #[test]
    fn resample_grid_collision_keeps_nearer_and_reports() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S1", 11, &[Some(0.1)], None), rec("S1", 13, &[Some(0.2)], None)],
        )
        .unwrap();
        let (g, report) = resample_grid(&table, 12, 12).unwrap();
        let m12 = g.records.iter().find(|r| r.visit_month == 12).unwrap();
        assert_eq!(m12.values[0], Some(0.1)); // distance 1 beats distance 1? both 1 -> earlier wins
        assert_eq!(report.collisions.len(), 1);
    }

    fn toy_cohort(n_per_class: usize) -> CohortTable {
        let mut records = Vec::new();
        for (ci, class) in Label::ALL.iter().enumerate() {
            for k in 0..n_per_class {
                let id = format!("{}{:03}", ["C", "M", "A"][ci], k);
                records.push(rec(&id, 0, &[Some(0.1)], Some(*class)));
                records.push(rec(&id, 12, &[Some(0.2)], Some(*class)));
            }
        }
        CohortTable::new(vec!["v".into()], records).unwrap()
    }

    #[test]
    fn split_is_a_partition_and_deterministic() {
        let table = toy_cohort(20);
        let spec = SplitSpec {
            fractions: (0.8, 0.1, 0.1),
            seed: 42,
        };
        let (tr, va, te, _) = split(&table, &spec).unwrap();
        let (tr2, va2, te2, _) = split(&table, &spec).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert_eq!(te, te2);

        let mut all: Vec<String> = tr.subjects();
        all.extend(va.subjects());
        all.extend(te.subjects());
        all.sort();
        assert_eq!(all, table.subjects());
        assert_eq!(tr.subjects().len() + va.subjects().len() + te.subjects().len(), 60);
    }

    #[test]
    fn split_proportions_within_one_subject_per_class() {
        let table = toy_cohort(23);
        let (tr, va, te, _) = split(
            &table,
            &SplitSpec {
                fractions: (0.8, 0.1, 0.1),
                seed: 7,
            },
        )
        .unwrap();
        for prefix in ["C", "M", "A"] {
            let count = |t: &CohortTable| t.subjects().iter().filter(|s| s.starts_with(prefix)).count();
            // floor(0.1 * 23) = 2 for val and test, remainder 19 to train
            assert_eq!(count(&va), 2);
            assert_eq!(count(&te), 2);
            assert_eq!(count(&tr), 19);
            assert!((count(&va) as f64 - 2.3).abs() <= 1.0);
        }
    }

    #[test]
    fn tensorize_shift_semantics() {
        // subject observed only at slots {0,1,2} of an 11-slot grid
        let records: Vec<Record> = (0..3)
            .map(|i| rec("S1", i * 12, &[Some(0.1 * (i + 1) as f64)], None))
            .chain(std::iter::once(rec("S1", 120, &[None], None)))
            .collect();
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let batch = tensorize(&table, 10).unwrap();
        assert_eq!(batch.t_len(), 10);
        let xm: Vec<bool> = (0..10).map(|t| batch.x_mask[0][t][0]).collect();
        let sm: Vec<bool> = (0..10).map(|t| batch.s_mask[0][t][0]).collect();
        assert_eq!(xm[..4], [true, true, true, false]);
        assert_eq!(sm[..4], [true, true, false, false]);
        assert!(batch.masked_cells_are_zero());
        // slot 1 value appears as x[1] and s[0]
        assert_eq!(batch.x[0][1][0], batch.s[0][0][0]);
    }

    #[test]
    fn tensorize_untensorize_roundtrip() {
        let records = vec![
            rec("S1", 0, &[Some(0.5), None], None),
            rec("S1", 12, &[None, Some(-0.25)], None),
            rec("S1", 24, &[Some(0.125), Some(0.75)], None),
            rec("S2", 0, &[Some(-1.0), Some(1.0)], None),
            rec("S2", 24, &[Some(0.0625), None], None),
        ];
        let table = CohortTable::new(vec!["v".into(), "h".into()], records).unwrap();
        let batch = tensorize(&table, 2).unwrap();
        let back = untensorize(&batch).unwrap();
        // every original value is reproduced exactly at its slot
        for r in &table.records {
            let slot_rec = back
                .records
                .iter()
                .find(|b| b.subject_id == r.subject_id && b.visit_month == r.visit_month)
                .unwrap();
            assert_eq!(slot_rec.values, r.values);
        }
        // grid slots absent from the original table exist as all-missing rows
        assert_eq!(back.records.len(), 6);
    }

    #[test]
    fn tensorize_rejects_unscaled_values() {
        let table = CohortTable::new(
            vec!["v".into()],
            vec![rec("S1", 0, &[Some(5.0)], None), rec("S1", 12, &[Some(0.1)], None)],
        )
        .unwrap();
        assert!(tensorize(&table, 1).is_err());
    }

    #[test]
    fn labels_align_with_slots() {
        let records = vec![
            rec("S1", 0, &[Some(0.1)], Some(Label::Cn)),
            rec("S1", 12, &[Some(0.1)], None),
            rec("S1", 24, &[Some(0.1)], Some(Label::Mci)),
        ];
        let table = CohortTable::new(vec!["v".into()], records).unwrap();
        let labels = labels_at_slots(&table, 2).unwrap();
        assert_eq!(labels[0], vec![Some(Label::Cn), None, Some(Label::Mci)]);
    }
}
