//! Two-way clustered samples, CSV ingestion, fold partitions and evaluation grids.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Binary treatment, conditional average treatment effect.
    Cate,
    /// Continuous treatment, treatment response curve.
    Cte,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Treatment {
    Binary(bool),
    Continuous(f64),
}

impl Treatment {
    pub fn value(&self) -> f64 {
        match *self {
            Treatment::Binary(d) => f64::from(u8::from(d)),
            Treatment::Continuous(x) => x,
        }
    }

    pub fn is_treated(&self) -> bool {
        matches!(*self, Treatment::Binary(true))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub outcome: f64,
    pub treatment: Treatment,
    pub covariates: Vec<f64>,
    /// The scalar the causal function is indexed by.
    pub conditioning_value: f64,
}

/// Where an observation's conditioning value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Covariate(usize),
    Treatment,
}

/// A complete N×M array with one observation per (row, column) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoWaySample {
    n_rows: usize,
    n_cols: usize,
    mode: Mode,
    conditioning: Conditioning,
    cells: Vec<Observation>,
    row_labels: Vec<String>,
    col_labels: Vec<String>,
}

impl TwoWaySample {
    /// Builds a sample from row-major cells, checking the array invariants.
    pub fn new(
        n_rows: usize,
        n_cols: usize,
        mode: Mode,
        conditioning: Conditioning,
        cells: Vec<Observation>,
    ) -> Result<Self> {
        let row_labels = (1..=n_rows).map(|i| i.to_string()).collect();
        let col_labels = (1..=n_cols).map(|j| j.to_string()).collect();
        Self::with_labels(n_rows, n_cols, mode, conditioning, cells, row_labels, col_labels)
    }

    pub fn with_labels(
        n_rows: usize,
        n_cols: usize,
        mode: Mode,
        conditioning: Conditioning,
        cells: Vec<Observation>,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
    ) -> Result<Self> {
        if n_rows.min(n_cols) < 2 {
            return Err(Error::schema(format!("need at least 2 rows and 2 columns, got {n_rows}x{n_cols}"), None));
        }
        if cells.len() != n_rows * n_cols {
            return Err(Error::schema(format!("{} cells for a {n_rows}x{n_cols} grid", cells.len()), None));
        }
        if row_labels.len() != n_rows || col_labels.len() != n_cols {
            return Err(Error::schema("label count does not match grid shape", None));
        }
        let width = cells[0].covariates.len();
        for obs in &cells {
            if obs.covariates.len() != width {
                return Err(Error::schema("ragged covariate width", None));
            }
            match (mode, obs.treatment) {
                (Mode::Cate, Treatment::Binary(_)) | (Mode::Cte, Treatment::Continuous(_)) => {}
                (Mode::Cate, Treatment::Continuous(v)) => {
                    return Err(Error::InvalidTreatment { value: v.to_string(), line: 0 })
                }
                (Mode::Cte, Treatment::Binary(_)) => {
                    return Err(Error::schema("binary treatment in continuous-treatment sample", None))
                }
            }
        }
        if let Conditioning::Covariate(k) = conditioning {
            if k >= width {
                return Err(Error::schema(format!("conditioning covariate {k} out of range for width {width}"), None));
            }
        }
        if mode == Mode::Cte && conditioning != Conditioning::Treatment {
            return Err(Error::schema("continuous-treatment samples condition on the treatment", None));
        }
        Ok(Self { n_rows, n_cols, mode, conditioning, cells, row_labels, col_labels })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    /// Effective sample size `min(N, M)`.
    pub fn effective_size(&self) -> usize {
        self.n_rows.min(self.n_cols)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn conditioning(&self) -> Conditioning {
        self.conditioning
    }

    pub fn covariate_dim(&self) -> usize {
        self.cells[0].covariates.len()
    }

    pub fn get(&self, i: usize, j: usize) -> &Observation {
        &self.cells[i * self.n_cols + j]
    }

    /// Row-major cells.
    pub fn cells(&self) -> &[Observation] {
        &self.cells
    }

    pub fn row_labels(&self) -> &[String] {
        &self.row_labels
    }

    pub fn col_labels(&self) -> &[String] {
        &self.col_labels
    }

    /// Conditioning values in row-major order.
    pub fn conditioning_values(&self) -> Vec<f64> {
        self.cells.iter().map(|o| o.conditioning_value).collect()
    }

    pub fn full_view(&self) -> SubsampleView<'_> {
        SubsampleView::new(self, (0..self.n_rows).collect(), (0..self.n_cols).collect())
    }

    /// Returns a copy with rows and columns relabelled: new row `i` is old row `row_perm[i]`.
    pub fn permuted(&self, row_perm: &[usize], col_perm: &[usize]) -> Self {
        let mut cells = Vec::with_capacity(self.cells.len());
        for &i in row_perm {
            for &j in col_perm {
                cells.push(self.get(i, j).clone());
            }
        }
        Self {
            cells,
            row_labels: row_perm.iter().map(|&i| self.row_labels[i].clone()).collect(),
            col_labels: col_perm.iter().map(|&j| self.col_labels[j].clone()).collect(),
            ..self.clone()
        }
    }
}

/// Read access to a rectangular set of cells, in row-major order over the
/// selected rows and columns. Learners only see cells through this trait.
pub trait CellAccess: Sync {
    fn n_cells(&self) -> usize;
    fn cell(&self, k: usize) -> &Observation;
    /// Grid position `(i, j)` of the `k`-th cell.
    fn position(&self, k: usize) -> (usize, usize);
    fn covariate_dim(&self) -> usize;

    fn iter(&self) -> impl Iterator<Item = &Observation> + '_
    where
        Self: Sized,
    {
        (0..self.n_cells()).map(move |k| self.cell(k))
    }
}

/// The cells of `rows × cols`.
#[derive(Debug, Clone)]
pub struct SubsampleView<'a> {
    sample: &'a TwoWaySample,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

impl<'a> SubsampleView<'a> {
    pub fn new(sample: &'a TwoWaySample, rows: Vec<usize>, cols: Vec<usize>) -> Self {
        debug_assert!(rows.iter().all(|&i| i < sample.n_rows));
        debug_assert!(cols.iter().all(|&j| j < sample.n_cols));
        Self { sample, rows, cols }
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn cols(&self) -> &[usize] {
        &self.cols
    }

    pub fn sample(&self) -> &'a TwoWaySample {
        self.sample
    }
}

impl CellAccess for SubsampleView<'_> {
    fn n_cells(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    fn cell(&self, k: usize) -> &Observation {
        let (i, j) = self.position(k);
        self.sample.get(i, j)
    }

    fn position(&self, k: usize) -> (usize, usize) {
        let nc = self.cols.len();
        (self.rows[k / nc], self.cols[k % nc])
    }

    fn covariate_dim(&self) -> usize {
        self.sample.covariate_dim()
    }
}

/// Column names for CSV ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub row_id: String,
    pub col_id: String,
    pub outcome: String,
    pub treatment: String,
    /// Covariate columns in order; empty means every remaining column.
    pub covariates: Vec<String>,
    /// Covariate used as the conditioning variable in binary-treatment mode;
    /// defaults to the first covariate.
    pub conditioning: Option<String>,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            row_id: "row_id".into(),
            col_id: "col_id".into(),
            outcome: "y".into(),
            treatment: "t".into(),
            covariates: Vec::new(),
            conditioning: None,
        }
    }
}

pub fn load_csv(path: impl AsRef<Path>, mode: Mode, schema: &CsvSchema) -> Result<TwoWaySample> {
    let file = std::fs::File::open(path)?;
    read_csv(file, mode, schema)
}

/// Parses a sample from CSV. Lines starting with `#` are ignored.
pub fn read_csv<R: Read>(reader: R, mode: Mode, schema: &CsvSchema) -> Result<TwoWaySample> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::schema(format!("missing column `{name}`"), Some(1)))
    };
    let row_col = find(&schema.row_id)?;
    let col_col = find(&schema.col_id)?;
    let y_col = find(&schema.outcome)?;
    let t_col = find(&schema.treatment)?;
    let cov_cols: Vec<usize> = if schema.covariates.is_empty() {
        (0..header.len()).filter(|c| ![row_col, col_col, y_col, t_col].contains(c)).collect()
    } else {
        schema.covariates.iter().map(|c| find(c)).collect::<Result<_>>()?
    };
    let conditioning = match mode {
        Mode::Cte => Conditioning::Treatment,
        Mode::Cate => {
            if cov_cols.is_empty() {
                return Err(Error::schema("binary-treatment mode needs at least one covariate", Some(1)));
            }
            let k = match &schema.conditioning {
                None => 0,
                Some(name) => {
                    let c = find(name)?;
                    cov_cols
                        .iter()
                        .position(|&cc| cc == c)
                        .ok_or_else(|| Error::schema(format!("conditioning column `{name}` is not a covariate"), Some(1)))?
                }
            };
            Conditioning::Covariate(k)
        }
    };

    let mut row_ids: HashMap<String, usize> = HashMap::new();
    let mut col_ids: HashMap<String, usize> = HashMap::new();
    let mut row_labels = Vec::new();
    let mut col_labels = Vec::new();
    let mut entries: HashMap<(usize, usize), Observation> = HashMap::new();

    for record in rdr.records() {
        let record = record?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != header.len() {
            return Err(Error::schema(
                format!("expected {} fields, found {}", header.len(), record.len()),
                Some(line),
            ));
        }
        let num = |c: usize| -> Result<f64> {
            let raw = &record[c];
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::schema(format!("column `{}`: cannot parse `{raw}` as a finite number", header[c]), Some(line)))
        };
        let outcome = num(y_col)?;
        let t = num(t_col)?;
        let treatment = match mode {
            Mode::Cate if t == 0.0 => Treatment::Binary(false),
            Mode::Cate if t == 1.0 => Treatment::Binary(true),
            Mode::Cate => return Err(Error::InvalidTreatment { value: record[t_col].to_owned(), line }),
            Mode::Cte => Treatment::Continuous(t),
        };
        let covariates = cov_cols.iter().map(|&c| num(c)).collect::<Result<Vec<_>>>()?;
        let conditioning_value = match conditioning {
            Conditioning::Treatment => t,
            Conditioning::Covariate(k) => covariates[k],
        };
        let intern = |ids: &mut HashMap<String, usize>, labels: &mut Vec<String>, key: &str| {
            *ids.entry(key.to_owned()).or_insert_with(|| {
                labels.push(key.to_owned());
                labels.len() - 1
            })
        };
        let i = intern(&mut row_ids, &mut row_labels, &record[row_col]);
        let j = intern(&mut col_ids, &mut col_labels, &record[col_col]);
        let obs = Observation { outcome, treatment, covariates, conditioning_value };
        if entries.insert((i, j), obs).is_some() {
            return Err(Error::DuplicateCell { row: record[row_col].to_owned(), col: record[col_col].to_owned(), line });
        }
    }

    let (n, m) = (row_labels.len(), col_labels.len());
    if entries.is_empty() {
        return Err(Error::EmptyInput("csv has no data rows"));
    }
    let mut cells = Vec::with_capacity(n * m);
    for i in 0..n {
        for j in 0..m {
            match entries.remove(&(i, j)) {
                Some(obs) => cells.push(obs),
                None => {
                    return Err(Error::IncompleteGrid {
                        present: cells.len() + entries.len(),
                        expected: n * m,
                        row: row_labels[i].clone(),
                        col: col_labels[j].clone(),
                    })
                }
            }
        }
    }
    TwoWaySample::with_labels(n, m, mode, conditioning, cells, row_labels, col_labels)
}

/// Writes a sample in the ingestion schema (`row_id,col_id,y,t,w1..wd`).
/// An optional comment is emitted as leading `#` lines.
pub fn write_csv<W: Write>(sample: &TwoWaySample, mut out: W, comment: Option<&str>) -> Result<()> {
    if let Some(c) = comment {
        for line in c.lines() {
            writeln!(out, "# {line}")?;
        }
    }
    let mut wtr = csv::Writer::from_writer(out);
    let d = sample.covariate_dim();
    let mut header = vec!["row_id".to_owned(), "col_id".into(), "y".into(), "t".into()];
    header.extend((1..=d).map(|k| format!("w{k}")));
    wtr.write_record(&header)?;
    for i in 0..sample.n_rows() {
        for j in 0..sample.n_cols() {
            let obs = sample.get(i, j);
            let mut rec = vec![
                sample.row_labels[i].clone(),
                sample.col_labels[j].clone(),
                obs.outcome.to_string(),
                obs.treatment.value().to_string(),
            ];
            rec.extend(obs.covariates.iter().map(f64::to_string));
            wtr.write_record(&rec)?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Balanced random partition of rows and columns into `k_folds` folds each.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPartition {
    pub k_folds: usize,
    pub row_folds: Vec<Vec<usize>>,
    pub col_folds: Vec<Vec<usize>>,
    pub seed: u64,
}

impl FoldPartition {
    pub fn complement_rows(&self, k: usize) -> Vec<usize> {
        complement(&self.row_folds, k)
    }

    pub fn complement_cols(&self, l: usize) -> Vec<usize> {
        complement(&self.col_folds, l)
    }
}

fn complement(folds: &[Vec<usize>], k: usize) -> Vec<usize> {
    let mut out: Vec<usize> = folds
        .iter()
        .enumerate()
        .filter(|&(f, _)| f != k)
        .flat_map(|(_, v)| v.iter().copied())
        .collect();
    out.sort_unstable();
    out
}

pub fn partition_folds(sample: &TwoWaySample, k_folds: usize, seed: u64) -> Result<FoldPartition> {
    partition_folds_dims(sample.n_rows(), sample.n_cols(), k_folds, seed)
}

pub fn partition_folds_dims(n_rows: usize, n_cols: usize, k_folds: usize, seed: u64) -> Result<FoldPartition> {
    let max = n_rows.min(n_cols);
    if k_folds < 2 || k_folds > max {
        return Err(Error::InvalidFoldCount { k: k_folds, max });
    }
    Ok(FoldPartition {
        k_folds,
        row_folds: split_balanced(n_rows, k_folds, seed, tag::FOLD_ROWS),
        col_folds: split_balanced(n_cols, k_folds, seed, tag::FOLD_COLS),
        seed,
    })
}

// Shuffle, then cut into contiguous chunks; the first `n % k` folds get one extra.
fn split_balanced(n: usize, k: usize, seed: u64, stream_tag: u64) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, &[stream_tag]));
    let (base, extra) = (n / k, n % k);
    let mut folds = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut fold = idx[start..start + len].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        start += len;
    }
    folds
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridOrigin {
    QuantileRange { lo: f64, hi: f64 },
    Explicit,
}

/// Strictly increasing evaluation points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub points: Vec<f64>,
    pub origin: GridOrigin,
}

impl GridSpec {
    pub fn explicit(mut points: Vec<f64>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyInput("grid points"));
        }
        if points.iter().any(|p| !p.is_finite()) {
            return Err(Error::config("grid", "non-finite grid point"));
        }
        points.sort_by(f64::total_cmp);
        points.dedup();
        Ok(Self { points, origin: GridOrigin::Explicit })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Empirical quantile with linear interpolation between order statistics.
/// `sorted` must be sorted ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// `count` equally spaced points between the `lo` and `hi` empirical quantiles.
pub fn quantile_grid(values: &[f64], lo: f64, hi: f64, count: usize) -> Result<GridSpec> {
    if values.is_empty() {
        return Err(Error::EmptyInput("quantile_grid values"));
    }
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
        return Err(Error::config("grid", format!("need 0 <= lo < hi <= 1, got lo={lo}, hi={hi}")));
    }
    if count == 0 {
        return Err(Error::config("grid.count", "must be at least 1"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (a, b) = (quantile_sorted(&sorted, lo), quantile_sorted(&sorted, hi));
    let mut points: Vec<f64> = if count == 1 {
        vec![a]
    } else {
        let step = (b - a) / (count - 1) as f64;
        (0..count).map(|l| if l == count - 1 { b } else { a + step * l as f64 }).collect()
    };
    points.dedup();
    Ok(GridSpec { points, origin: GridOrigin::QuantileRange { lo, hi } })
}
