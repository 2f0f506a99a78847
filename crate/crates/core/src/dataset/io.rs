use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use super::Dataset;
use crate::error::{Error, Result};

/// Which columns of a CSV file play which role.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub target_column: String,
    /// Optional non-numeric identifier column, excluded from the features.
    pub id_column: Option<String>,
}

pub fn load_csv(path: impl AsRef<Path>, target_column: &str) -> Result<Dataset> {
    load_csv_with(
        path,
        &CsvOptions {
            target_column: target_column.to_string(),
            id_column: None,
        },
    )
}

pub fn load_csv_with(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let (header, records) = read_records(path)?;
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let target_idx = find(&options.target_column)?;
    let id_idx = options.id_column.as_deref().map(find).transpose()?;
    let feature_cols: Vec<usize> = (0..header.len())
        .filter(|&j| j != target_idx && Some(j) != id_idx)
        .collect();
    if records.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    if feature_cols.is_empty() {
        log::warn!("{}: no feature columns besides the target", path.display());
    }

    let n = records.len();
    let mut features = Array2::zeros((n, feature_cols.len()));
    let mut targets = Array1::zeros(n);
    let mut ids = id_idx.map(|_| Vec::with_capacity(n));
    for (i, (line, record)) in records.iter().enumerate() {
        let cell = |j: usize| parse_cell(path, *line, &header[j], record.get(j).unwrap_or(""));
        for (k, &j) in feature_cols.iter().enumerate() {
            features[[i, k]] = cell(j)?;
        }
        targets[i] = cell(target_idx)?;
        if let (Some(ids), Some(j)) = (ids.as_mut(), id_idx) {
            ids.push(record.get(j).unwrap_or("").to_string());
        }
    }
    let names = feature_cols.iter().map(|&j| header[j].clone()).collect();
    Dataset::with_names(features, targets, names, ids)
}

/// Table whose first column is a string key and the rest numeric features.
#[derive(Debug, Clone)]
pub struct KeyedTable {
    pub keys: Vec<String>,
    pub columns: Vec<String>,
    pub values: Array2<f64>,
    index: HashMap<String, usize>,
}

impl KeyedTable {
    pub fn new(
        table: &'static str,
        keys: Vec<String>,
        columns: Vec<String>,
        values: Array2<f64>,
    ) -> Result<Self> {
        if keys.len() != values.nrows() || columns.len() != values.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "{table} table: {} keys, {} columns for a {:?} matrix",
                keys.len(),
                columns.len(),
                values.dim()
            )));
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (i, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), i).is_some() {
                return Err(Error::DuplicateKey {
                    table,
                    key: k.clone(),
                });
            }
        }
        Ok(Self {
            keys,
            columns,
            values,
            index,
        })
    }

    pub fn row(&self, key: &str) -> Option<usize> {
        self.index.get(key).copied()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }
}

pub fn load_keyed_table(path: impl AsRef<Path>, table: &'static str) -> Result<KeyedTable> {
    let path = path.as_ref();
    let (header, records) = read_records(path)?;
    if header.is_empty() {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut keys = Vec::with_capacity(records.len());
    let mut values = Array2::zeros((records.len(), header.len() - 1));
    for (i, (line, record)) in records.iter().enumerate() {
        keys.push(record.get(0).unwrap_or("").to_string());
        for j in 1..header.len() {
            values[[i, j - 1]] = parse_cell(path, *line, &header[j], record.get(j).unwrap_or(""))?;
        }
    }
    KeyedTable::new(table, keys, header[1..].to_vec(), values)
}

/// One row per response; features are the drug descriptors followed by the
/// cell-line expression values.
pub fn join_drug_cell(
    drugs: &KeyedTable,
    cells: &KeyedTable,
    responses: &[(String, String, f64)],
) -> Result<Dataset> {
    let (dw, cw) = (drugs.width(), cells.width());
    let mut features = Array2::zeros((responses.len(), dw + cw));
    let mut targets = Array1::zeros(responses.len());
    let mut ids = Vec::with_capacity(responses.len());
    for (i, (drug, cell, y)) in responses.iter().enumerate() {
        let d = drugs.row(drug).ok_or_else(|| Error::UnresolvedKey {
            table: "drug",
            key: drug.clone(),
        })?;
        let c = cells.row(cell).ok_or_else(|| Error::UnresolvedKey {
            table: "cell",
            key: cell.clone(),
        })?;
        let mut row = features.row_mut(i);
        row.slice_mut(ndarray::s![..dw]).assign(&drugs.values.row(d));
        row.slice_mut(ndarray::s![dw..]).assign(&cells.values.row(c));
        targets[i] = *y;
        ids.push(format!("{drug}|{cell}"));
    }
    let names = drugs.columns.iter().chain(cells.columns.iter()).cloned().collect();
    Dataset::with_names(features, targets, names, Some(ids))
}

/// Three-column response file: drug key, cell key, response.
pub fn load_responses(path: impl AsRef<Path>) -> Result<Vec<(String, String, f64)>> {
    let path = path.as_ref();
    let (header, records) = read_records(path)?;
    if header.len() < 3 {
        return Err(Error::Csv {
            path: path.to_path_buf(),
            message: "response table needs drug, cell and response columns".into(),
        });
    }
    records
        .iter()
        .map(|(line, r)| {
            Ok((
                r.get(0).unwrap_or("").to_string(),
                r.get(1).unwrap_or("").to_string(),
                parse_cell(path, *line, &header[2], r.get(2).unwrap_or(""))?,
            ))
        })
        .collect()
}

/// Writes `ds` with an `id` column, the feature columns and `target_name`.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>, target_name: &str) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    let mut line = String::from("id");
    for name in ds.feature_names() {
        line.push(',');
        line.push_str(name);
    }
    line.push(',');
    line.push_str(target_name);
    writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    for i in 0..ds.len() {
        line.clear();
        line.push_str(&ds.id(i));
        for v in ds.features().row(i) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push(',');
        line.push_str(&ds.targets()[i].to_string());
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

type Records = Vec<(u64, csv::StringRecord)>;

fn read_records(path: &Path) -> Result<(Vec<String>, Records)> {
    let csv_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.iter().all(String::is_empty) {
        return Err(Error::EmptyFile(path.to_path_buf()));
    }
    let mut records = Vec::new();
    for r in reader.records() {
        let r = r.map_err(csv_err)?;
        let line = r.position().map(|p| p.line()).unwrap_or(0);
        records.push((line, r));
    }
    Ok((header, records))
}

fn parse_cell(path: &Path, line: u64, column: &str, raw: &str) -> Result<f64> {
    let err = || Error::NonNumeric {
        path: PathBuf::from(path),
        line,
        column: column.to_string(),
        value: raw.to_string(),
    };
    let v: f64 = raw.trim().parse().map_err(|_| err())?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(err())
    }
}
