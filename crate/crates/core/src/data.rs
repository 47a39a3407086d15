//! Return panels: CSV ingestion, history filters and rolling windows.
//!
//! CSV layout: a header `date,ID1,ID2,...` followed by one row per period.
//! Empty cells mark missing leading history and are only tolerated by
//! [`RawPanel`]; estimators work on complete [`ReturnsPanel`]s.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Complete panel of per-period excess returns, assets in rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsPanel<T: Scalar> {
    /// `p x T`
    pub returns: DMatrix<T>,
    pub asset_ids: Vec<String>,
    pub dates: Vec<String>,
    pub risk_free: DVector<T>,
}

/// Panel as read from disk; `None` cells are missing observations.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPanel<T> {
    /// `values[i][t]` for asset `i`, period `t`.
    pub values: Vec<Vec<Option<T>>>,
    pub asset_ids: Vec<String>,
    pub dates: Vec<String>,
    pub risk_free: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RawMode {
    /// Cells are already excess returns.
    Excess,
    /// Cells are raw returns; the named column holds the risk-free rate.
    Raw { rf_column: String },
}

impl RawMode {
    pub fn raw() -> Self {
        RawMode::Raw {
            rf_column: "RF".into(),
        }
    }
}

impl<T: Scalar> ReturnsPanel<T> {
    pub fn new(
        returns: DMatrix<T>,
        asset_ids: Vec<String>,
        dates: Vec<String>,
        risk_free: DVector<T>,
    ) -> Result<Self> {
        let panel = Self {
            returns,
            asset_ids,
            dates,
            risk_free,
        };
        panel.validate()?;
        Ok(panel)
    }

    /// Panel with generated labels `A0..` and `0..` and zero risk-free rate.
    pub fn from_matrix(returns: DMatrix<T>) -> Result<Self> {
        let (p, t) = returns.shape();
        Self::new(
            returns,
            (0..p).map(|i| format!("A{i}")).collect(),
            (0..t).map(|i| format!("{i:06}")).collect(),
            DVector::zeros(t),
        )
    }

    pub fn n_assets(&self) -> usize {
        self.returns.nrows()
    }

    pub fn n_periods(&self) -> usize {
        self.returns.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let (p, t) = self.returns.shape();
        if p == 0 || t == 0 {
            return Err(Error::EmptyPanel(
                "panel has no assets or no periods".into(),
            ));
        }
        if self.asset_ids.len() != p || self.dates.len() != t || self.risk_free.len() != t {
            return Err(Error::DimensionMismatch(format!(
                "returns {p}x{t}, {} asset ids, {} dates, {} risk-free values",
                self.asset_ids.len(),
                self.dates.len(),
                self.risk_free.len()
            )));
        }
        check_dates(&self.dates)?;
        check_ids(&self.asset_ids)?;
        if let Some(pos) = self.returns.iter().position(|v| !v.finite()) {
            let (i, j) = (pos % p, pos / p);
            return Err(Error::Validation(format!(
                "non-finite return for asset {} at {}",
                self.asset_ids[i], self.dates[j]
            )));
        }
        if self.risk_free.iter().any(|v| !v.finite()) {
            return Err(Error::Validation("non-finite risk-free rate".into()));
        }
        Ok(())
    }

    /// Periods `[start, end)`.
    pub fn slice_periods(&self, start: usize, end: usize) -> ReturnsPanel<T> {
        ReturnsPanel {
            returns: self.returns.columns(start, end - start).into_owned(),
            asset_ids: self.asset_ids.clone(),
            dates: self.dates[start..end].to_vec(),
            risk_free: self.risk_free.rows(start, end - start).into_owned(),
        }
    }

    pub fn date_index(&self, date: &str) -> Option<usize> {
        self.dates.iter().position(|d| d == date)
    }
}

impl<T: Scalar> RawPanel<T> {
    pub fn n_assets(&self) -> usize {
        self.asset_ids.len()
    }

    pub fn n_periods(&self) -> usize {
        self.dates.len()
    }

    /// Number of observed periods of asset `i`.
    pub fn observed(&self, i: usize) -> usize {
        self.values[i].iter().filter(|v| v.is_some()).count()
    }

    /// Complete panel over the periods where every asset is observed.
    /// Missing cells must be leading; a gap after the first observation is an error.
    pub fn complete(&self) -> Result<ReturnsPanel<T>> {
        if self.asset_ids.is_empty() {
            return Err(Error::EmptyPanel("no assets".into()));
        }
        let mut start = 0;
        for (i, row) in self.values.iter().enumerate() {
            let first = row.iter().position(|v| v.is_some()).ok_or_else(|| {
                Error::EmptyPanel(format!("asset {} has no observations", self.asset_ids[i]))
            })?;
            if let Some(gap) = row[first..].iter().position(|v| v.is_none()) {
                return Err(Error::Validation(format!(
                    "asset {} is missing a value at {} after its history starts",
                    self.asset_ids[i],
                    self.dates[first + gap]
                )));
            }
            start = start.max(first);
        }
        let p = self.n_assets();
        let t = self.n_periods() - start;
        let returns = DMatrix::from_fn(p, t, |i, j| self.values[i][start + j].expect("checked"));
        ReturnsPanel::new(
            returns,
            self.asset_ids.clone(),
            self.dates[start..].to_vec(),
            DVector::from_column_slice(&self.risk_free[start..]),
        )
    }
}

impl<T: Scalar> From<&ReturnsPanel<T>> for RawPanel<T> {
    fn from(p: &ReturnsPanel<T>) -> Self {
        RawPanel {
            values: p
                .returns
                .row_iter()
                .map(|r| r.iter().map(|v| Some(*v)).collect())
                .collect(),
            asset_ids: p.asset_ids.clone(),
            dates: p.dates.clone(),
            risk_free: p.risk_free.iter().copied().collect(),
        }
    }
}

fn check_dates(dates: &[String]) -> Result<()> {
    for w in dates.windows(2) {
        if w[1] == w[0] {
            return Err(Error::Validation(format!("duplicate date {}", w[0])));
        }
        if date_before(&w[1], &w[0]) {
            return Err(Error::Validation(format!(
                "dates must be increasing: {} follows {}",
                w[1], w[0]
            )));
        }
    }
    Ok(())
}

/// Numeric labels compare as numbers, anything else lexicographically.
pub(crate) fn date_before(a: &str, b: &str) -> bool {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) => x < y,
        _ => a < b,
    }
}

fn check_ids(ids: &[String]) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate asset id {id}")));
        }
    }
    Ok(())
}

fn parse_cell<T: Scalar>(cell: &str, row: usize, column: &str) -> Result<Option<T>> {
    let s = cell.trim();
    if s.is_empty() {
        return Ok(None);
    }
    match s.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(T::lit(v))),
        Ok(v) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("non-finite value {v}"),
        }),
        Err(_) => Err(Error::Parse {
            row,
            column: column.to_string(),
            message: format!("cannot parse {s:?} as a number"),
        }),
    }
}

/// Reads a panel that may contain missing leading observations.
pub fn read_raw_panel<T: Scalar, R: Read>(input: R, mode: &RawMode) -> Result<RawPanel<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if headers.len() < 2 {
        return Err(Error::Validation(
            "header needs a date column and at least one asset".into(),
        ));
    }
    let rf_col = match mode {
        RawMode::Excess => None,
        RawMode::Raw { rf_column } => Some(
            headers
                .iter()
                .position(|h| h == rf_column)
                .filter(|&c| c > 0)
                .ok_or_else(|| {
                    Error::Validation(format!("risk-free column {rf_column:?} not found"))
                })?,
        ),
    };
    let asset_cols: Vec<usize> = (1..headers.len()).filter(|c| Some(*c) != rf_col).collect();
    if asset_cols.is_empty() {
        return Err(Error::EmptyPanel("no asset columns".into()));
    }
    let asset_ids: Vec<String> = asset_cols.iter().map(|&c| headers[c].clone()).collect();
    check_ids(&asset_ids)?;

    let mut values = vec![Vec::new(); asset_cols.len()];
    let mut dates = Vec::new();
    let mut risk_free = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        if rec.len() != headers.len() {
            return Err(Error::Parse {
                row: line,
                column: String::new(),
                message: format!("expected {} fields, found {}", headers.len(), rec.len()),
            });
        }
        dates.push(rec[0].trim().to_string());
        let rf = match rf_col {
            Some(c) => {
                parse_cell::<T>(&rec[c], line, &headers[c])?.ok_or_else(|| Error::Parse {
                    row: line,
                    column: headers[c].clone(),
                    message: "missing risk-free rate".into(),
                })?
            }
            None => T::zero(),
        };
        risk_free.push(rf);
        for (slot, &c) in asset_cols.iter().enumerate() {
            values[slot].push(parse_cell::<T>(&rec[c], line, &headers[c])?.map(|v| v - rf));
        }
    }
    if dates.is_empty() {
        return Err(Error::EmptyPanel("no data rows".into()));
    }
    check_dates(&dates)?;
    Ok(RawPanel {
        values,
        asset_ids,
        dates,
        risk_free,
    })
}

pub fn load_raw_panel<T: Scalar>(path: &Path, mode: &RawMode) -> Result<RawPanel<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_raw_panel(file, mode)
}

/// Loads a complete panel; missing cells are an error here.
pub fn load_panel<T: Scalar>(path: &Path, mode: &RawMode) -> Result<ReturnsPanel<T>> {
    let raw = load_raw_panel::<T>(path, mode)?;
    require_complete(&raw)?;
    raw.complete()
}

fn require_complete<T: Scalar>(raw: &RawPanel<T>) -> Result<()> {
    for (i, row) in raw.values.iter().enumerate() {
        if let Some(t) = row.iter().position(|v| v.is_none()) {
            return Err(Error::Validation(format!(
                "asset {} has no value at {}; apply a minimum-history filter first",
                raw.asset_ids[i], raw.dates[t]
            )));
        }
    }
    Ok(())
}

/// Keeps assets with at least `min_periods` observations, in their original order.
pub fn filter_min_history<T: Scalar>(raw: &RawPanel<T>, min_periods: usize) -> Result<RawPanel<T>> {
    if min_periods == 0 {
        return Err(Error::Config("min_periods must be >= 1".into()));
    }
    let keep: Vec<usize> = (0..raw.n_assets())
        .filter(|&i| raw.observed(i) >= min_periods)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyPanel(format!(
            "no asset has at least {min_periods} observations"
        )));
    }
    Ok(RawPanel {
        values: keep.iter().map(|&i| raw.values[i].clone()).collect(),
        asset_ids: keep.iter().map(|&i| raw.asset_ids[i].clone()).collect(),
        dates: raw.dates.clone(),
        risk_free: raw.risk_free.clone(),
    })
}

/// Writes excess returns in the layout read by [`read_raw_panel`] with
/// [`RawMode::Excess`]. Values use the shortest round-tripping representation.
pub fn write_panel_csv<T: Scalar, W: Write>(panel: &ReturnsPanel<T>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["date".to_string()];
    header.extend(panel.asset_ids.iter().cloned());
    w.write_record(&header)?;
    for (t, date) in panel.dates.iter().enumerate() {
        let mut rec = vec![date.clone()];
        rec.extend(panel.returns.column(t).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()
        .map_err(|e| Error::io(Path::new("<panel csv>"), e))?;
    Ok(())
}

/// Observed factor series aligned to a panel's dates.
#[derive(Debug, Clone)]
pub struct FactorSeries<T> {
    pub names: Vec<String>,
    /// `K x T`
    pub values: DMatrix<T>,
}

/// Reads a factor CSV (`date,F1,F2,...`) and aligns it to `dates`; every
/// panel date must be present. Columns named in `drop` (such as `RF`) are skipped.
pub fn read_factors<T: Scalar, R: Read>(
    input: R,
    dates: &[String],
    drop: &[&str],
) -> Result<FactorSeries<T>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input);
    let headers: Vec<String> = rdr
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let cols: Vec<usize> = (1..headers.len())
        .filter(|&c| !drop.contains(&headers[c].as_str()))
        .collect();
    let mut by_date: HashMap<String, Vec<T>> = HashMap::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let mut row = Vec::with_capacity(cols.len());
        for &c in &cols {
            let cell = rec.get(c).unwrap_or("");
            let v = parse_cell::<T>(cell, line, &headers[c])?.ok_or_else(|| Error::Parse {
                row: line,
                column: headers[c].clone(),
                message: "missing factor value".into(),
            })?;
            row.push(v);
        }
        by_date.insert(rec[0].trim().to_string(), row);
    }
    let mut values = DMatrix::zeros(cols.len(), dates.len());
    for (t, d) in dates.iter().enumerate() {
        let row = by_date
            .get(d)
            .ok_or_else(|| Error::Validation(format!("factor file has no row for date {d}")))?;
        for (k, v) in row.iter().enumerate() {
            values[(k, t)] = *v;
        }
    }
    Ok(FactorSeries {
        names: cols.iter().map(|&c| headers[c].clone()).collect(),
        values,
    })
}

pub fn load_factors<T: Scalar>(
    path: &Path,
    dates: &[String],
    drop: &[&str],
) -> Result<FactorSeries<T>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_factors(file, dates, drop)
}

/// Column indices of one rolling split. Estimation uses
/// `train_start..=train_end`, validation `validation_start..=validation_end`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSplit {
    pub train_start: usize,
    pub train_end: usize,
    pub validation_start: usize,
    pub validation_end: usize,
    pub test_index: usize,
}

impl WindowSplit {
    /// First index of the whole training window (estimation plus validation).
    pub fn window_start(&self) -> usize {
        self.train_start
    }

    /// Number of periods in the whole training window.
    pub fn window_len(&self) -> usize {
        self.test_index - self.train_start
    }
}

/// One split per test period. With `expanding`, every window starts at 0
/// and grows; otherwise it is the `train_len` periods before the test index.
/// `test_len` caps the number of test periods (`None` uses all remaining).
pub fn make_windows(
    t: usize,
    train_len: usize,
    test_len: Option<usize>,
    validation_fraction: f64,
    expanding: bool,
) -> Result<Vec<WindowSplit>> {
    if train_len >= t {
        return Err(Error::Config(format!(
            "training length {train_len} leaves no test period in a panel of {t}"
        )));
    }
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must lie in (0, 1), got {validation_fraction}"
        )));
    }
    let available = t - train_len;
    let n_tests = match test_len {
        None => available,
        Some(n) if n >= 1 && n <= available => n,
        Some(n) => {
            return Err(Error::Config(format!(
                "test length {n} must lie in 1..={available}"
            )))
        }
    };
    let mut out = Vec::with_capacity(n_tests);
    for test_index in train_len..train_len + n_tests {
        let start = if expanding { 0 } else { test_index - train_len };
        let len = test_index - start;
        let n_val = (len as f64 * validation_fraction).round() as usize;
        if n_val == 0 || n_val >= len {
            return Err(Error::Config(format!(
                "validation fraction {validation_fraction} of a {len}-period window leaves an empty part"
            )));
        }
        out.push(WindowSplit {
            train_start: start,
            train_end: test_index - n_val - 1,
            validation_start: test_index - n_val,
            validation_end: test_index - 1,
            test_index,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const EXCESS: &str = "date,A,B\n2020-01,0.01,0.02\n2020-02,-0.01,0.00\n2020-03,0.03,0.01\n";

    #[test]
    fn excess_passthrough() {
        let raw = read_raw_panel::<f64, _>(EXCESS.as_bytes(), &RawMode::Excess).unwrap();
        let p = raw.complete().unwrap();
        assert_eq!(p.returns.shape(), (2, 3));
        assert_eq!(p.returns[(1, 0)], 0.02);
        assert!(p.risk_free.iter().all(|v| *v == 0.0));
        assert_eq!(p.asset_ids, vec!["A", "B"]);
    }

    #[test]
    fn raw_mode_subtracts_rf() {
        let csv = "date,A,RF\n1,0.02,0.005\n2,0.01,0.001\n";
        let p = read_raw_panel::<f64, _>(csv.as_bytes(), &RawMode::raw())
            .unwrap()
            .complete()
            .unwrap();
        assert_eq!(p.n_assets(), 1);
        assert!((p.returns[(0, 0)] - 0.015).abs() < 1e-15);
        assert_eq!(p.risk_free[0], 0.005);
    }

    #[test]
    fn parse_error_names_cell() {
        let csv = "date,A,B\n1,0.1,0.2\n2,abc,0.1\n";
        match read_raw_panel::<f64, _>(csv.as_bytes(), &RawMode::Excess) {
            Err(Error::Parse { row, column, .. }) => {
                assert_eq!(row, 3);
                assert_eq!(column, "A");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn date_order_checks() {
        let csv = "date,A\n1,0.1\n1,0.2\n";
        assert!(matches!(
            read_raw_panel::<f64, _>(csv.as_bytes(), &RawMode::Excess),
            Err(Error::Validation(_))
        ));
        let csv = "date,A\n2020-02,0.1\n2020-01,0.2\n";
        assert!(read_raw_panel::<f64, _>(csv.as_bytes(), &RawMode::Excess).is_err());
        let csv = "date,A\n9,0.1\n10,0.2\n";
        assert!(read_raw_panel::<f64, _>(csv.as_bytes(), &RawMode::Excess).is_ok());
    }

    fn history_fixture() -> RawPanel<f64> {
        let t = 200;
        let lens = [180usize, 100, 200];
        RawPanel {
            values: lens
                .iter()
                .map(|&n| (0..t).map(|j| (j >= t - n).then_some(0.01)).collect())
                .collect(),
            asset_ids: vec!["x".into(), "y".into(), "z".into()],
            dates: (0..t).map(|j| format!("{j:04}")).collect(),
            risk_free: vec![0.0; t],
        }
    }

    #[test]
    fn min_history_filter() {
        let raw = history_fixture();
        let kept = filter_min_history(&raw, 180).unwrap();
        assert_eq!(kept.asset_ids, vec!["x", "z"]);
        let panel = kept.complete().unwrap();
        assert_eq!(panel.n_periods(), 180);
        assert_eq!(filter_min_history(&raw, 1).unwrap(), raw);
        assert!(matches!(
            filter_min_history(&raw, 201),
            Err(Error::EmptyPanel(_))
        ));
    }

    #[test]
    fn internal_gap_is_rejected() {
        let mut raw = history_fixture();
        raw.values[2][50] = None;
        assert!(raw.complete().is_err());
    }

    #[test]
    fn windows_examples() {
        let w = make_windows(10, 6, None, 1.0 / 3.0, false).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(
            w[0],
            WindowSplit {
                train_start: 0,
                train_end: 3,
                validation_start: 4,
                validation_end: 5,
                test_index: 6
            }
        );
        let one = make_windows(181, 180, None, 1.0 / 3.0, false).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].test_index, 180);
        assert!(matches!(
            make_windows(10, 10, None, 0.3, false),
            Err(Error::Config(_))
        ));
        let grow = make_windows(10, 6, Some(2), 1.0 / 3.0, true).unwrap();
        assert_eq!(grow.len(), 2);
        assert_eq!(grow[1].train_start, 0);
        assert_eq!(grow[1].window_len(), 7);
    }

    #[test]
    fn factors_align_by_date() {
        let csv = "date,MKT,RF,SMB\n3,0.3,0.0,1.3\n1,0.1,0.0,1.1\n2,0.2,0.0,1.2\n";
        let dates = vec!["1".to_string(), "2".to_string()];
        let f = read_factors::<f64, _>(csv.as_bytes(), &dates, &["RF"]).unwrap();
        assert_eq!(f.names, vec!["MKT", "SMB"]);
        assert_eq!(
            f.values,
            DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 1.1, 1.2])
        );
        let missing = vec!["4".to_string()];
        assert!(read_factors::<f64, _>(csv.as_bytes(), &missing, &["RF"]).is_err());
    }
}
