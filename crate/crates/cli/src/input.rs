//! Area CSV reader.
//!
//! Header `area_id,n,y,x1,...,xp`. Discrete families may give the count `z`
//! instead of `y` (then `y = z/n`); the Gaussian family may give the sampling
//! variance `d` instead of `n` (then `n = 1/d`).

use std::path::Path;

use sae_core::family::Family;
use sae_core::model::{AreaObservation, Dataset};

use crate::error::{CliError, CliResult};

fn column(headers: &csv::StringRecord, name: &str) -> Option<usize> {
    headers.iter().position(|h| h == name)
}

fn covariate_columns(headers: &csv::StringRecord) -> CliResult<Vec<usize>> {
    let mut cols = Vec::new();
    for k in 1.. {
        match column(headers, &format!("x{k}")) {
            Some(c) => cols.push(c),
            None => break,
        }
    }
    if cols.is_empty() {
        return Err(CliError::Input("missing column 'x1' (at least one covariate is required)".into()));
    }
    let extra = headers
        .iter()
        .filter(|h| h.starts_with('x') && h[1..].parse::<usize>().is_ok_and(|k| k > cols.len()))
        .collect::<Vec<_>>();
    if let Some(h) = extra.first() {
        return Err(CliError::Input(format!("covariate column '{h}' is not preceded by x1..x{}", cols.len() + 1)));
    }
    Ok(cols)
}

fn number(record: &csv::StringRecord, col: usize, name: &str, line: u64) -> CliResult<f64> {
    let raw = record.get(col).unwrap_or("");
    raw.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| CliError::Input(format!("line {line}, column '{name}': cannot parse '{raw}' as a finite number")))
}

pub fn parse_areas(bytes: &[u8], family: Family) -> CliResult<Dataset> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(bytes);
    let headers = reader.headers().map_err(|e| CliError::Input(format!("cannot read header: {e}")))?.clone();
    let id_col = column(&headers, "area_id").ok_or_else(|| CliError::Input("missing column 'area_id'".into()))?;
    let size_col = match (column(&headers, "n"), column(&headers, "d")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) if family == Family::Gaussian => (c, true),
        _ => return Err(CliError::Input("missing column 'n'".into())),
    };
    let resp_col = match (column(&headers, "y"), column(&headers, "z")) {
        (Some(c), _) => (c, false),
        (None, Some(c)) if family.is_discrete() => (c, true),
        _ => return Err(CliError::Input("missing column 'y'".into())),
    };
    let x_cols = covariate_columns(&headers)?;
    let mut areas = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let line = row as u64 + 2;
        let record = record.map_err(|e| CliError::Input(format!("line {line}: {e}")))?;
        let id = record.get(id_col).unwrap_or("").to_string();
        if id.is_empty() {
            return Err(CliError::Input(format!("line {line}, column 'area_id': empty")));
        }
        let size = number(&record, size_col.0, if size_col.1 { "d" } else { "n" }, line)?;
        if !(size > 0.0) {
            return Err(CliError::Input(format!("line {line}: size column must be positive, got {size}")));
        }
        let n = if size_col.1 { 1.0 / size } else { size };
        let resp = number(&record, resp_col.0, if resp_col.1 { "z" } else { "y" }, line)?;
        let y = if resp_col.1 { resp / n } else { resp };
        let x = x_cols
            .iter()
            .enumerate()
            .map(|(k, &c)| number(&record, c, &format!("x{}", k + 1), line))
            .collect::<CliResult<Vec<f64>>>()?;
        areas.push(AreaObservation::new(id, y, n, x));
    }
    if areas.is_empty() {
        return Err(CliError::Input("no data rows".into()));
    }
    Ok(Dataset::new(family, areas)?)
}

pub fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_counts_and_variances() {
        let d = parse_areas(b"area_id,n,z,x1\na,10,3,1\nb,5,0,1\nc,4,8,1\n", Family::PoissonGamma).unwrap();
        assert_eq!(d.area(0).y, 0.3);
        let g = parse_areas(b"area_id,d,y,x1,x2\na,0.5,1.2,1,0\nb,0.25,0.3,1,1\nc,1,0,1,2\nd,2,1,1,3\n", Family::Gaussian).unwrap();
        assert_eq!(g.area(1).n, 4.0);
        assert_eq!(g.p(), 2);
    }

    #[test]
    fn names_missing_column() {
        let e = parse_areas(b"area_id,y,x1\na,1,1\n", Family::PoissonGamma).unwrap_err();
        assert!(e.to_string().contains("'n'"));
        assert_eq!(e.exit_code(), 2);
        let e = parse_areas(b"area_id,n,z,x1\na,10,3,1\nb,10,oops,1\nc,1,1,1\n", Family::PoissonGamma).unwrap_err();
        assert!(e.to_string().contains("line 3"));
    }
}
