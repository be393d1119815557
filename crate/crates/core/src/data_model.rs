//! Cohort representation, CSV ingestion, standardization, and covariate
//! residualization.
//!
//! A cohort file has one row per visit:
//!
//! ```text
//! subject_id,visit_days,<test columns>,<covariate columns>,endpoint_days,converted,death_days
//! ```
//!
//! Empty cells are missing. Rows missing any required cell are dropped
//! (complete-case analysis) and subjects left with fewer than two visits are
//! dropped afterwards. `death_days` is optional and may be empty.
//!
//! Covariates are encoded numerically: binary indicators as 0/1, race as
//! dummy indicators with White as the reference level, APOE4 as the 0/1/2
//! allele count, education and smoking in years, age in years at baseline.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Days per year used for every days-to-years conversion.
pub const DAYS_PER_YEAR: f64 = 365.25;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CognitiveTest {
    pub index: usize,
    pub name: String,
    /// Multiply by -1 before standardization so that higher is better.
    pub sign_flip: bool,
}

/// The ten-test neuropsychological battery. Only the two digit span tests
/// carry a sign flip.
pub fn default_test_battery() -> Vec<CognitiveTest> {
    const NAMES: [(&str, bool); 10] = [
        ("immediate_recall", false),
        ("delayed_recall", false),
        ("digit_span_forward", true),
        ("digit_span_backward", true),
        ("animal_list", false),
        ("vegetable_list", false),
        ("boston_naming", false),
        ("trail_making_a", false),
        ("trail_making_b", false),
        ("digit_symbol", false),
    ];
    NAMES
        .iter()
        .enumerate()
        .map(|(index, (name, sign_flip))| CognitiveTest {
            index,
            name: name.to_string(),
            sign_flip: *sign_flip,
        })
        .collect()
}

/// Standard covariate set, in column order.
pub fn default_covariates() -> Vec<String> {
    [
        "male",
        "education_years",
        "age_baseline",
        "race_black",
        "race_asian",
        "race_other",
        "apoe4",
        "hypertension",
        "diabetes",
        "smoking_years",
        "obese",
        "tbi",
        "depression",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Column layout expected in a cohort file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSchema {
    pub tests: Vec<CognitiveTest>,
    pub covariates: Vec<String>,
}

impl Default for CohortSchema {
    fn default() -> Self {
        CohortSchema {
            tests: default_test_battery(),
            covariates: default_covariates(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Endpoint {
    pub converted: bool,
    pub endpoint_days: f64,
    pub death_days: Option<f64>,
}

/// One subject's visits. Visit times are days since the subject's first
/// visit and strictly increasing; `scores` is `J × K`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectSeries {
    pub subject_id: String,
    pub visit_days: Vec<f64>,
    pub scores: DMatrix<f64>,
    pub covariates: Vec<f64>,
    pub endpoint: Endpoint,
}

impl SubjectSeries {
    /// Series with no covariates and a non-converting endpoint at the last
    /// visit. Handy for state-space work where only scores matter.
    pub fn from_scores(id: impl Into<String>, visit_days: Vec<f64>, scores: DMatrix<f64>) -> Self {
        let last = visit_days.last().copied().unwrap_or(0.0);
        SubjectSeries {
            subject_id: id.into(),
            visit_days,
            scores,
            covariates: Vec::new(),
            endpoint: Endpoint {
                converted: false,
                endpoint_days: last,
                death_days: None,
            },
        }
    }

    pub fn n_visits(&self) -> usize {
        self.visit_days.len()
    }

    pub fn observation(&self, j: usize) -> DVector<f64> {
        self.scores.row(j).transpose()
    }

    /// Gap between visit `j - 1` and `j` in years.
    pub fn gap_years(&self, j: usize) -> f64 {
        (self.visit_days[j] - self.visit_days[j - 1]) / DAYS_PER_YEAR
    }
}

/// Per-test statistics used to standardize scores, in the sign-flipped
/// orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    pub flipped: Vec<bool>,
}

impl Standardization {
    /// Maps a standardized score back to the raw scale.
    pub fn invert(&self, k: usize, z: f64) -> f64 {
        let x = z * self.sd[k] + self.mean[k];
        if self.flipped[k] {
            -x
        } else {
            x
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub subjects: Vec<SubjectSeries>,
    pub tests: Vec<CognitiveTest>,
    pub covariate_names: Vec<String>,
    /// Set once scores have been standardized.
    pub standardization: Option<Standardization>,
}

impl Cohort {
    pub fn new(schema: &CohortSchema) -> Self {
        Cohort {
            subjects: Vec::new(),
            tests: schema.tests.clone(),
            covariate_names: schema.covariates.clone(),
            standardization: None,
        }
    }

    pub fn schema(&self) -> CohortSchema {
        CohortSchema {
            tests: self.tests.clone(),
            covariates: self.covariate_names.clone(),
        }
    }

    pub fn n_tests(&self) -> usize {
        self.tests.len()
    }

    pub fn n_visits(&self) -> usize {
        self.subjects.iter().map(|s| s.n_visits()).sum()
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    pub fn test_index(&self, name: &str) -> Option<usize> {
        self.tests.iter().position(|t| t.name == name)
    }

    /// Cohort restricted to the subjects at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Cohort {
        Cohort {
            subjects: indices.iter().map(|&i| self.subjects[i].clone()).collect(),
            tests: self.tests.clone(),
            covariate_names: self.covariate_names.clone(),
            standardization: self.standardization.clone(),
        }
    }
}

/// What complete-case filtering removed while loading.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub rows_read: usize,
    pub rows_dropped: usize,
    pub subjects_dropped: usize,
    pub warnings: Vec<String>,
}

/// Column header for a schema, in canonical order.
pub fn cohort_header(schema: &CohortSchema) -> Vec<String> {
    let mut header = vec!["subject_id".to_string(), "visit_days".to_string()];
    header.extend(schema.tests.iter().map(|t| t.name.clone()));
    header.extend(schema.covariates.iter().cloned());
    header.extend(
        ["endpoint_days", "converted", "death_days"]
            .iter()
            .map(|s| s.to_string()),
    );
    header
}

pub fn load_cohort(path: &Path, schema: &CohortSchema) -> Result<(Cohort, LoadReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_cohort(file, schema)
}

struct ParsedRow {
    line: u64,
    visit: f64,
    scores: Vec<f64>,
    covariates: Vec<f64>,
    endpoint: Endpoint,
}

fn parse_number(raw: &str, line: u64, column: &str) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>().map(Some).map_err(|_| Error::Parse {
        line,
        message: format!("column `{column}`: cannot parse `{s}` as a number"),
    })
}

fn parse_flag(raw: &str, line: u64) -> Result<Option<bool>> {
    match raw.trim() {
        "" => Ok(None),
        "1" | "true" | "TRUE" => Ok(Some(true)),
        "0" | "false" | "FALSE" => Ok(Some(false)),
        other => Err(Error::Parse {
            line,
            message: format!("column `converted`: expected 0/1, found `{other}`"),
        }),
    }
}

/// Reads a cohort from any CSV source; see [`load_cohort`].
pub fn read_cohort<R: Read>(source: R, schema: &CohortSchema) -> Result<(Cohort, LoadReport)> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(false)
        .from_reader(source);
    let header = reader
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let position: HashMap<&str, usize> = header
        .iter()
        .enumerate()
        .map(|(i, h)| (h.trim(), i))
        .collect();
    let column = |name: &str| -> Result<usize> {
        position.get(name).copied().ok_or_else(|| Error::Parse {
            line: 1,
            message: format!("missing column `{name}`"),
        })
    };
    let id_col = column("subject_id")?;
    let visit_col = column("visit_days")?;
    let test_cols = schema
        .tests
        .iter()
        .map(|t| column(&t.name))
        .collect::<Result<Vec<_>>>()?;
    let cov_cols = schema
        .covariates
        .iter()
        .map(|c| column(c))
        .collect::<Result<Vec<_>>>()?;
    let endpoint_col = column("endpoint_days")?;
    let converted_col = column("converted")?;
    let death_col = position.get("death_days").copied();

    let mut report = LoadReport::default();
    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, Vec<ParsedRow>> = HashMap::new();

    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        report.rows_read += 1;

        let id = record[id_col].trim().to_string();
        let visit = parse_number(&record[visit_col], line, "visit_days")?;
        let scores = test_cols
            .iter()
            .zip(&schema.tests)
            .map(|(&c, t)| parse_number(&record[c], line, &t.name))
            .collect::<Result<Vec<_>>>()?;
        let covariates = cov_cols
            .iter()
            .zip(&schema.covariates)
            .map(|(&c, n)| parse_number(&record[c], line, n))
            .collect::<Result<Vec<_>>>()?;
        let endpoint_days = parse_number(&record[endpoint_col], line, "endpoint_days")?;
        let converted = parse_flag(&record[converted_col], line)?;
        let death_days = match death_col {
            Some(c) => parse_number(&record[c], line, "death_days")?,
            None => None,
        };

        let complete = !id.is_empty()
            && visit.is_some()
            && scores.iter().all(Option::is_some)
            && covariates.iter().all(Option::is_some)
            && endpoint_days.is_some()
            && converted.is_some();
        if !complete {
            report.rows_dropped += 1;
            continue;
        }
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().push(ParsedRow {
            line,
            visit: visit.unwrap(),
            scores: scores.into_iter().map(Option::unwrap).collect(),
            covariates: covariates.into_iter().map(Option::unwrap).collect(),
            endpoint: Endpoint {
                converted: converted.unwrap(),
                endpoint_days: endpoint_days.unwrap(),
                death_days,
            },
        });
    }

    let mut cohort = Cohort::new(schema);
    let k = schema.tests.len();
    for id in order {
        let mut subject_rows = rows.remove(&id).unwrap();
        if subject_rows.len() < 2 {
            report.subjects_dropped += 1;
            continue;
        }
        subject_rows.sort_by(|a, b| a.visit.total_cmp(&b.visit));
        for w in subject_rows.windows(2) {
            if w[1].visit <= w[0].visit {
                return Err(Error::Parse {
                    line: w[1].line,
                    message: format!("subject `{id}` has duplicate visit time {}", w[1].visit),
                });
            }
        }
        let first = &subject_rows[0];
        for r in &subject_rows[1..] {
            if r.covariates != first.covariates || r.endpoint != first.endpoint {
                return Err(Error::Parse {
                    line: r.line,
                    message: format!("subject `{id}` has inconsistent baseline or endpoint fields"),
                });
            }
        }
        let j = subject_rows.len();
        let scores = DMatrix::from_fn(j, k, |r, c| subject_rows[r].scores[c]);
        cohort.subjects.push(SubjectSeries {
            subject_id: id,
            visit_days: subject_rows.iter().map(|r| r.visit).collect(),
            scores,
            covariates: first.covariates.clone(),
            endpoint: first.endpoint.clone(),
        });
    }

    if cohort.subjects.is_empty() {
        report
            .warnings
            .push("no subject has two or more complete visits; cohort is empty".to_string());
    }
    for w in &report.warnings {
        log::warn!("{w}");
    }
    Ok((cohort, report))
}

/// Writes a cohort in the canonical column order. Scores are written as
/// stored, so a standardized cohort is written on the standardized scale.
pub fn write_cohort_to<W: Write>(cohort: &Cohort, sink: W) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Parse {
        line: 0,
        message: e.to_string(),
    };
    let mut writer = csv::Writer::from_writer(sink);
    writer
        .write_record(cohort_header(&cohort.schema()))
        .map_err(csv_err)?;
    for s in &cohort.subjects {
        for j in 0..s.n_visits() {
            let mut row = Vec::with_capacity(5 + s.scores.ncols() + s.covariates.len());
            row.push(s.subject_id.clone());
            row.push(s.visit_days[j].to_string());
            row.extend(s.scores.row(j).iter().map(|v| v.to_string()));
            row.extend(s.covariates.iter().map(|v| v.to_string()));
            row.push(s.endpoint.endpoint_days.to_string());
            row.push(if s.endpoint.converted { "1" } else { "0" }.to_string());
            row.push(
                s.endpoint
                    .death_days
                    .map(|d| d.to_string())
                    .unwrap_or_default(),
            );
            writer.write_record(&row).map_err(csv_err)?;
        }
    }
    writer.flush().map_err(|e| Error::io("<cohort sink>", e))?;
    Ok(())
}

pub fn write_cohort(cohort: &Cohort, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_cohort_to(cohort, std::io::BufWriter::new(file))
}

fn column_moments(cohort: &Cohort) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = cohort.n_tests();
    let n = cohort.n_visits();
    if n < 2 {
        return Err(Error::Empty(
            "standardization needs at least two visits".into(),
        ));
    }
    let mut mean = vec![0.0; k];
    for s in &cohort.subjects {
        for (c, m) in mean.iter_mut().enumerate() {
            *m += s.scores.column(c).sum();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; k];
    for s in &cohort.subjects {
        for (c, v) in var.iter_mut().enumerate() {
            *v += s
                .scores
                .column(c)
                .iter()
                .map(|x| (x - mean[c]).powi(2))
                .sum::<f64>();
        }
    }
    let sd: Vec<f64> = var.iter().map(|v| (v / (n as f64 - 1.0)).sqrt()).collect();
    for (c, s) in sd.iter().enumerate() {
        if !(*s > 0.0) {
            return Err(Error::DegenerateColumn(cohort.tests[c].name.clone()));
        }
    }
    Ok((mean, sd))
}

fn flip_flagged(cohort: &mut Cohort) -> Vec<bool> {
    let flags: Vec<bool> = cohort.tests.iter().map(|t| t.sign_flip).collect();
    for s in &mut cohort.subjects {
        for (c, &f) in flags.iter().enumerate() {
            if f {
                s.scores.column_mut(c).neg_mut();
            }
        }
    }
    flags
}

fn rescale(cohort: &mut Cohort, mean: &[f64], sd: &[f64]) {
    for s in &mut cohort.subjects {
        for c in 0..mean.len() {
            s.scores
                .column_mut(c)
                .apply(|x| *x = (*x - mean[c]) / sd[c]);
        }
    }
}

/// Sign-flips the flagged tests, then centers and scales every test column
/// to sample mean 0 and sample sd 1 over all subject-visits.
///
/// On an already standardized cohort the flips are not repeated; the
/// statistics are recomputed and composed with the stored ones.
pub fn standardize_tests(cohort: &Cohort) -> Result<Cohort> {
    let mut out = cohort.clone();
    let flipped = match &cohort.standardization {
        Some(prev) => prev.flipped.clone(),
        None => flip_flagged(&mut out),
    };
    let (mean, sd) = column_moments(&out)?;
    rescale(&mut out, &mean, &sd);
    let stats = match &cohort.standardization {
        Some(prev) => Standardization {
            mean: (0..mean.len())
                .map(|c| prev.mean[c] + mean[c] * prev.sd[c])
                .collect(),
            sd: (0..sd.len()).map(|c| prev.sd[c] * sd[c]).collect(),
            flipped,
        },
        None => Standardization { mean, sd, flipped },
    };
    out.standardization = Some(stats);
    Ok(out)
}

/// Applies frozen statistics (e.g. from the training split) to a raw cohort.
pub fn apply_standardization(cohort: &Cohort, stats: &Standardization) -> Result<Cohort> {
    if cohort.standardization.is_some() {
        return Err(Error::Config("cohort is already standardized".into()));
    }
    if stats.mean.len() != cohort.n_tests() {
        return Err(Error::Dimension(format!(
            "standardization has {} tests, cohort has {}",
            stats.mean.len(),
            cohort.n_tests()
        )));
    }
    let mut out = cohort.clone();
    for s in &mut out.subjects {
        for (c, &f) in stats.flipped.iter().enumerate() {
            if f {
                s.scores.column_mut(c).neg_mut();
            }
        }
    }
    rescale(&mut out, &stats.mean, &stats.sd);
    out.standardization = Some(stats.clone());
    Ok(out)
}

/// Pooled linear covariate effects per test. Row 0 of `beta` is the
/// intercept; row `p + 1` belongs to covariate `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residualization {
    pub term_names: Vec<String>,
    /// `(P + 1) × K`, one column per test.
    pub beta: Vec<Vec<f64>>,
}

impl Residualization {
    pub fn coefficient(&self, term: &str, test: usize) -> Option<f64> {
        let r = self.term_names.iter().position(|t| t == term)?;
        Some(self.beta[r][test])
    }
}

/// Stacked design `[1, covariates]` over all subject-visits.
pub fn pooled_design(cohort: &Cohort) -> DMatrix<f64> {
    let p = cohort.covariate_names.len();
    let n = cohort.n_visits();
    let mut x = DMatrix::zeros(n, p + 1);
    let mut row = 0;
    for s in &cohort.subjects {
        for _ in 0..s.n_visits() {
            x[(row, 0)] = 1.0;
            for (c, v) in s.covariates.iter().enumerate() {
                x[(row, c + 1)] = *v;
            }
            row += 1;
        }
    }
    x
}

/// Stacked `N_visits × K` score matrix matching [`pooled_design`].
pub fn pooled_scores(cohort: &Cohort) -> DMatrix<f64> {
    let n = cohort.n_visits();
    let k = cohort.n_tests();
    let mut y = DMatrix::zeros(n, k);
    let mut row = 0;
    for s in &cohort.subjects {
        for j in 0..s.n_visits() {
            y.row_mut(row).copy_from(&s.scores.row(j));
            row += 1;
        }
    }
    y
}

fn collinear_from_r(x: &DMatrix<f64>, r: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    (0..x.ncols())
        .filter(|&j| {
            let scale = x.column(j).norm().max(f64::MIN_POSITIVE);
            r[(j, j)].abs() <= 1e-9 * scale
        })
        .map(|j| names[j].clone())
        .collect()
}

/// Names of columns that are (numerically) linear combinations of the
/// columns before them.
pub(crate) fn collinear_columns(x: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    if x.nrows() < x.ncols() {
        return names.to_vec();
    }
    collinear_from_r(x, &x.clone().qr().r(), names)
}

/// Least-squares solve via Householder QR, rejecting collinear columns.
pub(crate) fn least_squares(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    names: &[String],
) -> Result<DMatrix<f64>> {
    let (n, p) = x.shape();
    if n < p {
        return Err(Error::RankDeficient(names.to_vec()));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let collinear = collinear_from_r(x, &r, names);
    if !collinear.is_empty() {
        return Err(Error::RankDeficient(collinear));
    }
    let qty = qr.q().transpose() * y;
    r.solve_upper_triangular(&qty)
        .ok_or_else(|| Error::RankDeficient(names.to_vec()))
}

/// Regresses every test on `[1, covariates]` pooled over all visits and
/// replaces the scores with the residuals `y* = y − x β̂`.
pub fn residualize_covariates(cohort: &Cohort) -> Result<(Cohort, Residualization)> {
    if cohort.n_visits() == 0 {
        return Err(Error::Empty("cohort has no visits".into()));
    }
    let mut names = vec!["(intercept)".to_string()];
    names.extend(cohort.covariate_names.iter().cloned());
    let x = pooled_design(cohort);
    let y = pooled_scores(cohort);
    let beta = least_squares(&x, &y, &names)?;
    let res = Residualization {
        term_names: names,
        beta: beta
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect(),
    };
    let adjusted = apply_residualization(cohort, &res)?;
    Ok((adjusted, res))
}

/// Subtracts previously estimated covariate effects.
pub fn apply_residualization(cohort: &Cohort, res: &Residualization) -> Result<Cohort> {
    let p = cohort.covariate_names.len();
    if res.term_names.len() != p + 1 || res.term_names[1..] != cohort.covariate_names[..] {
        return Err(Error::Dimension(
            "residualization terms do not match cohort covariates".into(),
        ));
    }
    let k = cohort.n_tests();
    let mut out = cohort.clone();
    for s in &mut out.subjects {
        for c in 0..k {
            let fitted = res.beta[0][c]
                + s.covariates
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * res.beta[i + 1][c])
                    .sum::<f64>();
            s.scores.column_mut(c).add_scalar_mut(-fitted);
        }
    }
    Ok(out)
}
