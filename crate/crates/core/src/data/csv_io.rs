use std::path::Path;

use crate::error::{LaceError, Result};
use crate::numerics::Matrix;

fn csv_error(path: &Path, err: csv::Error) -> LaceError {
    let offset = err.position().map_or(0, |p| p.byte());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => LaceError::io(path, e),
        other => LaceError::format(offset, format!("{}: {other:?}", path.display())),
    }
}

/// Writes `label,f0,…,f{d−1}` plus optional trailing named columns. Values
/// use the shortest representation that parses back to the same `f64`.
pub fn write_labeled_csv(path: &Path, labels: &[usize], features: &Matrix, extra: &[(&str, &[f64])]) -> Result<()> {
    if labels.len() != features.nrows() || extra.iter().any(|(_, col)| col.len() != labels.len()) {
        return Err(LaceError::invalid("CSV columns differ in length"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["label".to_string()];
    header.extend((0..features.ncols()).map(|k| format!("f{k}")));
    header.extend(extra.iter().map(|(name, _)| name.to_string()));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (i, row) in features.rows().into_iter().enumerate() {
        let mut rec = vec![labels[i].to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        rec.extend(extra.iter().map(|(_, col)| col[i].to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| LaceError::io(path, e))
}

/// Reads the `label` column and every `f<k>` column in index order; other
/// columns are ignored.
pub fn read_labeled_csv(path: &Path) -> Result<(Vec<usize>, Matrix)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
    let label_col = header
        .iter()
        .position(|h| h == "label")
        .ok_or_else(|| LaceError::format(0, format!("{}: no label column", path.display())))?;
    let mut feature_cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('f')?.parse::<usize>().ok().map(|k| (k, i)))
        .collect();
    feature_cols.sort_unstable();
    if feature_cols.iter().enumerate().any(|(want, &(k, _))| k != want) {
        return Err(LaceError::format(
            0,
            format!("{}: feature columns are not f0..f(d-1)", path.display()),
        ));
    }
    let d = feature_cols.len();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let bad = |what: &str| LaceError::format(offset, format!("{}: unparsable {what}", path.display()));
        labels.push(rec[label_col].trim().parse::<usize>().map_err(|_| bad("label"))?);
        for &(_, col) in &feature_cols {
            values.push(rec[col].trim().parse::<f64>().map_err(|_| bad("feature"))?);
        }
    }
    let features = Matrix::from_shape_vec((labels.len(), d), values).expect("row lengths checked by csv");
    Ok((labels, features))
}
