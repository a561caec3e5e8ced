//! Tabular datasets and CSV ingestion.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// N×M real feature matrix with labels and an optional target column.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    feature_names: Vec<String>,
    rows: DMatrix<f64>,
    target: Option<Vec<f64>>,
}

impl Dataset {
    pub fn new(
        feature_names: Vec<String>,
        rows: DMatrix<f64>,
        target: Option<Vec<f64>>,
    ) -> Result<Self> {
        if rows.ncols() == 0 {
            return Err(Error::InvalidInput("dataset has no feature columns".into()));
        }
        if rows.nrows() == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if feature_names.len() != rows.ncols() {
            return Err(Error::Dimension(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                rows.ncols()
            )));
        }
        if let Some((idx, _)) = rows.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (r, c) = (idx % rows.nrows(), idx / rows.nrows());
            return Err(Error::Csv {
                row: r + 1,
                column: feature_names[c].clone(),
                message: "non-finite value".into(),
            });
        }
        if let Some(t) = &target {
            if t.len() != rows.nrows() {
                return Err(Error::Dimension(format!(
                    "target has {} entries for {} rows",
                    t.len(),
                    rows.nrows()
                )));
            }
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite target value".into()));
            }
        }
        Ok(Dataset {
            feature_names,
            rows,
            target,
        })
    }

    /// Builds a dataset with generated labels `x1..xM`.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        let names = (1..=rows.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(names, rows, None)
    }

    pub fn with_target(mut self, target: Vec<f64>) -> Result<Self> {
        if target.len() != self.n_rows() {
            return Err(Error::Dimension(format!(
                "target has {} entries for {} rows",
                target.len(),
                self.n_rows()
            )));
        }
        self.target = Some(target);
        Ok(self)
    }

    pub fn n_rows(&self) -> usize {
        self.rows.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.rows.ncols()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn target(&self) -> Option<&[f64]> {
        self.target.as_deref()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    /// Subset of rows `range`, keeping labels.
    pub fn slice_rows(&self, start: usize, len: usize) -> Result<Dataset> {
        let rows = self.rows.rows(start, len).into_owned();
        let target = self.target.as_ref().map(|t| t[start..start + len].to_vec());
        Dataset::new(self.feature_names.clone(), rows, target)
    }

    pub fn column_means(&self) -> Vec<f64> {
        column_means(&self.rows)
    }

    /// Sample standard deviations (denominator `N - 1`; 0 when `N = 1`).
    pub fn column_sds(&self) -> Vec<f64> {
        column_sds(&self.rows)
    }
}

pub fn column_means(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.column_iter().map(|c| c.sum() / n).collect()
}

pub fn column_sds(x: &DMatrix<f64>) -> Vec<f64> {
    let n = x.nrows();
    x.column_iter()
        .map(|c| {
            if n < 2 {
                return 0.0;
            }
            let mean = c.sum() / n as f64;
            let ss: f64 = c.iter().map(|v| (v - mean).powi(2)).sum();
            (ss / (n - 1) as f64).sqrt()
        })
        .collect()
}

/// Column layout expected when reading a CSV file.
#[derive(Clone, Debug, Default)]
pub struct CsvSchema {
    /// Name of the target column, if the file carries one.
    pub target: Option<String>,
    /// Fail when the target column is absent.
    pub require_target: bool,
    /// Columns holding category labels; each is expanded into indicator
    /// columns `name=level` for every level except the first (sorted).
    pub categorical: Vec<String>,
}

impl CsvSchema {
    pub fn features_only() -> Self {
        CsvSchema::default()
    }

    pub fn with_target(name: impl Into<String>) -> Self {
        CsvSchema {
            target: Some(name.into()),
            require_target: true,
            categorical: Vec::new(),
        }
    }
}

fn parse_cell(raw: &str, row: usize, column: &str) -> Result<f64> {
    let value: f64 = raw.trim().parse().map_err(|_| Error::Csv {
        row,
        column: column.to_string(),
        message: format!("cannot parse {raw:?} as a number"),
    })?;
    if !value.is_finite() {
        return Err(Error::Csv {
            row,
            column: column.to_string(),
            message: format!("non-finite value {raw:?}"),
        });
    }
    Ok(value)
}

/// Reads a comma-separated file with a header row. Row numbers in errors are
/// 1-based data rows (the header is row 0).
pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => Error::InvalidInput(format!("{}: {e}", path.display())),
            _ => Error::from(e),
        })?;
    let header: Vec<String> = reader
        .headers()?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();

    let target_idx = match &schema.target {
        Some(name) => {
            let idx = header.iter().position(|h| h == name);
            if idx.is_none() && schema.require_target {
                return Err(Error::InvalidInput(format!(
                    "{}: target column {name:?} not found",
                    path.display()
                )));
            }
            idx
        }
        None => None,
    };
    for cat in &schema.categorical {
        if !header.contains(cat) {
            return Err(Error::InvalidInput(format!(
                "{}: categorical column {cat:?} not found",
                path.display()
            )));
        }
    }

    let records: Vec<csv::StringRecord> =
        reader.records().collect::<std::result::Result<_, _>>()?;

    // Levels of every categorical column, sorted for a stable encoding.
    let levels: Vec<Option<Vec<String>>> = header
        .iter()
        .enumerate()
        .map(|(c, name)| {
            schema.categorical.contains(name).then(|| {
                records
                    .iter()
                    .map(|r| r.get(c).unwrap_or("").trim().to_string())
                    .collect::<BTreeSet<_>>()
                    .into_iter()
                    .collect()
            })
        })
        .collect();

    let mut names = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if Some(c) == target_idx {
            continue;
        }
        match &levels[c] {
            Some(lv) => names.extend(lv.iter().skip(1).map(|l| format!("{name}={l}"))),
            None => names.push(name.clone()),
        }
    }
    if names.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no feature columns",
            path.display()
        )));
    }

    let mut values = Vec::with_capacity(records.len() * names.len());
    let mut target = target_idx.map(|_| Vec::with_capacity(records.len()));
    for (r, record) in records.iter().enumerate() {
        let row = r + 1;
        if record.len() != header.len() {
            return Err(Error::Csv {
                row,
                column: String::new(),
                message: format!("expected {} fields, found {}", header.len(), record.len()),
            });
        }
        for (c, cell) in record.iter().enumerate() {
            if Some(c) == target_idx {
                if let Some(t) = target.as_mut() {
                    t.push(parse_cell(cell, row, &header[c])?);
                }
                continue;
            }
            match &levels[c] {
                Some(lv) => {
                    let cell = cell.trim();
                    values.extend(lv.iter().skip(1).map(|l| if l == cell { 1.0 } else { 0.0 }));
                }
                None => values.push(parse_cell(cell, row, &header[c])?),
            }
        }
    }
    if records.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{}: no data rows",
            path.display()
        )));
    }
    let rows = DMatrix::from_row_slice(records.len(), names.len(), &values);
    Dataset::new(names, rows, target)
}

/// Writes features (and the target, under `target_name`) with shortest
/// round-trip float formatting.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>, target_name: &str) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = dataset.feature_names().to_vec();
    if dataset.target().is_some() {
        header.push(target_name.to_string());
    }
    writer.write_record(&header)?;
    for i in 0..dataset.n_rows() {
        let mut record: Vec<String> = dataset
            .rows()
            .row(i)
            .iter()
            .map(|v| v.to_string())
            .collect();
        if let Some(t) = dataset.target() {
            record.push(t[i].to_string());
        }
        writer.write_record(&record)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_small_file() {
        let f = write_tmp("a,b\n1,2\n3,4.5\n-1e-3,0\n");
        let d = load_csv(f.path(), &CsvSchema::features_only()).unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.feature_names(), &["a".to_string(), "b".to_string()]);
        assert_eq!(d.row(2), vec![-1e-3, 0.0]);
    }

    #[test]
    fn reports_location_of_bad_cell() {
        let f = write_tmp("a,b\n1,2\n3,abc\n");
        match load_csv(f.path(), &CsvSchema::features_only()) {
            Err(Error::Csv { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "b");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_non_finite_and_missing_target() {
        let f = write_tmp("a,b\n1,inf\n");
        assert!(matches!(
            load_csv(f.path(), &CsvSchema::features_only()),
            Err(Error::Csv { .. })
        ));
        let f = write_tmp("a,b\n1,2\n");
        assert!(load_csv(f.path(), &CsvSchema::with_target("y")).is_err());
    }

    #[test]
    fn rejects_target_only_file() {
        let f = write_tmp("y\n1\n");
        assert!(load_csv(f.path(), &CsvSchema::with_target("y")).is_err());
    }

    #[test]
    fn separates_target_column() {
        let f = write_tmp("x1,y,x2\n1,10,2\n3,30,4\n");
        let d = load_csv(f.path(), &CsvSchema::with_target("y")).unwrap();
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.target().unwrap(), &[10.0, 30.0]);
        assert_eq!(d.row(1), vec![3.0, 4.0]);
    }

    #[test]
    fn one_hot_encodes_categorical_columns() {
        let f = write_tmp("sex,len\nM,1\nF,2\nI,3\nM,4\n");
        let schema = CsvSchema {
            categorical: vec!["sex".into()],
            ..Default::default()
        };
        let d = load_csv(f.path(), &schema).unwrap();
        assert_eq!(d.feature_names(), &["sex=I", "sex=M", "len"]);
        assert_eq!(d.row(0), vec![0.0, 1.0, 1.0]);
        assert_eq!(d.row(1), vec![0.0, 0.0, 2.0]);
        assert_eq!(d.row(2), vec![1.0, 0.0, 3.0]);
    }

    proptest! {
        #[test]
        fn write_then_load_round_trips(values in proptest::collection::vec(-1e6f64..1e6, 6..30)) {
            let n = values.len() / 3;
            let rows = DMatrix::from_row_slice(n, 3, &values[..n * 3]);
            let d = Dataset::from_matrix(rows).unwrap()
                .with_target(values[..n].to_vec()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("d.csv");
            write_csv(&d, &path, "y").unwrap();
            let back = load_csv(&path, &CsvSchema::with_target("y")).unwrap();
            prop_assert_eq!(back, d);
        }
    }
}
