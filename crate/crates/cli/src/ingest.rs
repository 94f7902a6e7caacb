use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use regcopula::margins::PreTransform;
use regcopula::pipeline::Dataset;

use crate::error::CliError;

/// Column mapping from a CSV header to the model's response and covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Mapping {
    pub response: String,
    /// Empty means every column except the response.
    pub x_cols: Vec<String>,
    /// Empty means `w = x`.
    pub w_cols: Vec<String>,
}

pub const MAPPING_KEYS: [&str; 3] = ["response", "x_cols", "w_cols"];

fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}

impl Mapping {
    pub fn from_kv(kv: &BTreeMap<String, String>) -> Self {
        Self {
            response: kv.get("response").cloned().unwrap_or_else(|| "y".into()),
            x_cols: kv.get("x_cols").map(|s| split_list(s)).unwrap_or_default(),
            w_cols: kv.get("w_cols").map(|s| split_list(s)).unwrap_or_default(),
        }
    }

    pub fn to_text(&self) -> String {
        format!("response = {}\nx_cols = {}\nw_cols = {}\n", self.response, self.x_cols.join(","), self.w_cols.join(","))
    }
}

pub struct Table {
    pub header: Vec<String>,
    /// Row-major cells; `None` marks an empty cell.
    pub rows: Vec<Vec<Option<f64>>>,
}

pub fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.iter().all(|h| h.is_empty()) {
        return Err(CliError::Data(format!("{} is empty", path.display())));
    }
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        // line numbers count the header as line 1
        let line = i + 2;
        let rec = rec.map_err(|e| CliError::Data(format!("{} line {line}: {e}", path.display())))?;
        let row = rec
            .iter()
            .enumerate()
            .map(|(j, cell)| {
                if cell.is_empty() || cell.eq_ignore_ascii_case("na") {
                    Ok(None)
                } else {
                    cell.parse::<f64>().map(Some).map_err(|_| {
                        CliError::Data(format!(
                            "{} line {line}, column {:?}: non-numeric value {cell:?}",
                            path.display(),
                            header[j]
                        ))
                    })
                }
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{} has no data rows", path.display())));
    }
    Ok(Table { header, rows })
}

impl Table {
    pub fn column_index(&self, name: &str) -> Result<usize, CliError> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::Data(format!("missing column {name:?} (have {})", self.header.join(", "))))
    }

    /// Matrix of the named columns for the given rows.
    fn matrix(&self, cols: &[usize], rows: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), cols.len(), |i, j| self.rows[rows[i]][cols[j]].unwrap())
    }
}

fn resolve_x(table: &Table, mapping: &Mapping) -> Vec<String> {
    if mapping.x_cols.is_empty() {
        table.header.iter().filter(|h| **h != mapping.response).cloned().collect()
    } else {
        mapping.x_cols.clone()
    }
}

/// Covariates only (for prediction inputs); rows with missing mapped cells
/// are errors here since every row is a requested output.
pub fn read_covariates(path: &Path, mapping: &Mapping) -> Result<(DMatrix<f64>, DMatrix<f64>), CliError> {
    let table = read_table(path)?;
    let x_names = resolve_x(&table, mapping);
    let xi: Vec<usize> = x_names.iter().map(|c| table.column_index(c)).collect::<Result<_, _>>()?;
    let wi: Vec<usize> = mapping.w_cols.iter().map(|c| table.column_index(c)).collect::<Result<_, _>>()?;
    for (r, row) in table.rows.iter().enumerate() {
        if xi.iter().chain(&wi).any(|&j| row[j].is_none()) {
            return Err(CliError::Data(format!("{} line {}: missing covariate value", path.display(), r + 2)));
        }
    }
    let all: Vec<usize> = (0..table.rows.len()).collect();
    let x = table.matrix(&xi, &all);
    let w = if wi.is_empty() { x.clone() } else { table.matrix(&wi, &all) };
    Ok((x, w))
}

/// Typed dataset from a CSV file. Rows with a missing mapped field are
/// dropped (and counted); the pre-transform domain is checked per row.
pub fn ingest_csv(path: &Path, mapping: &Mapping, pre: PreTransform) -> Result<Dataset, CliError> {
    let table = read_table(path)?;
    let yi = table.column_index(&mapping.response)?;
    let x_names = resolve_x(&table, mapping);
    if x_names.is_empty() {
        return Err(CliError::Data("no covariate columns".into()));
    }
    let xi: Vec<usize> = x_names.iter().map(|c| table.column_index(c)).collect::<Result<_, _>>()?;
    let wi: Vec<usize> = mapping.w_cols.iter().map(|c| table.column_index(c)).collect::<Result<_, _>>()?;
    let mut keep = Vec::new();
    for (r, row) in table.rows.iter().enumerate() {
        if std::iter::once(&yi).chain(&xi).chain(&wi).any(|&j| row.get(j).copied().flatten().is_none()) {
            continue;
        }
        pre.apply(row[yi].unwrap()).map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), r + 2)))?;
        keep.push(r);
    }
    let dropped = table.rows.len() - keep.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} rows with missing mapped fields");
    }
    let y = keep.iter().map(|&r| table.rows[r][yi].unwrap()).collect();
    let x = table.matrix(&xi, &keep);
    let w = (!wi.is_empty()).then(|| table.matrix(&wi, &keep));
    let mut data = Dataset::new(y, x, w).map_err(|e| CliError::Data(format!("{e} ({dropped} rows dropped as incomplete)")))?;
    data.x_names = x_names;
    if !mapping.w_cols.is_empty() {
        data.w_names = mapping.w_cols.clone();
    } else {
        data.w_names = data.x_names.clone();
    }
    Ok(data)
}
