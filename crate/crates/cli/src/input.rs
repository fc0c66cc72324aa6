//! CSV readers for data, matrix and restriction files.

use std::path::Path;

use desreg::design::level_index;
use desreg::{DMatrix, DVector, Error, ExperimentData, Result, TreatmentStructure};

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

fn reader(path: &Path, headers: bool) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    Ok(csv::ReaderBuilder::new().has_headers(headers).trim(csv::Trim::All).from_reader(file))
}

fn number(field: &str, row: usize, column: &str) -> Result<f64> {
    if field.is_empty() {
        return invalid(format!("row {row}, column {column}: missing value"));
    }
    match field.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => invalid(format!("row {row}, column {column}: '{field}' is not a finite number")),
    }
}

/// Indexed columns `prefix1..prefixK`, checked for gaps.
fn indexed(headers: &[String], prefix: &str) -> Result<Vec<usize>> {
    let mut found: Vec<(usize, usize)> = Vec::new();
    for (pos, h) in headers.iter().enumerate() {
        if let Some(rest) = h.strip_prefix(prefix) {
            if let Ok(k) = rest.parse::<usize>() {
                found.push((k, pos));
            }
        }
    }
    found.sort();
    for (want, &(k, _)) in (1..).zip(&found) {
        if k != want {
            return invalid(format!("column {prefix}{want} is missing (found {prefix}{k})"));
        }
    }
    Ok(found.into_iter().map(|(_, pos)| pos).collect())
}

/// Parsed data file, ready for estimation.
#[derive(Debug)]
pub struct DataFile {
    pub data: ExperimentData,
    /// `K` when the file has factor columns or `z` spans `2^K` levels.
    pub factors: Option<usize>,
    /// Levels came from `f1..fK` rather than `z`.
    pub factor_columns: bool,
}

/// Reads `y`, `z` or `f1..fK`, `x1..xJ` and an optional `id`.
///
/// `levels` declares `Q` for `z` files; without it `Q` is the largest `z`.
pub fn read_data(path: &Path, levels: Option<usize>) -> Result<DataFile> {
    let mut rd = reader(path, true)?;
    let headers: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    let fcols = indexed(&headers, "f")?;
    let xcols = indexed(&headers, "x")?;
    let find = |name: &str| headers.iter().position(|h| h == name);
    let Some(ycol) = find("y") else {
        return invalid("data file has no column y");
    };
    let zcol = find("z");
    for (pos, h) in headers.iter().enumerate() {
        let known = pos == ycol || Some(pos) == zcol || h == "id" || fcols.contains(&pos) || xcols.contains(&pos);
        if !known {
            return invalid(format!("unknown column '{h}'"));
        }
    }
    match (zcol.is_some(), fcols.is_empty()) {
        (true, false) => return invalid("data file has both z and factor columns"),
        (false, true) => return invalid("data file needs a z column or factor columns f1..fK"),
        _ => {}
    }

    let mut y = Vec::new();
    let mut x = Vec::new();
    let mut raw_levels = Vec::new();
    let mut factor_values: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        y.push(number(&rec[ycol], row, "y")?);
        for (k, &c) in xcols.iter().enumerate() {
            x.push(number(&rec[c], row, &format!("x{}", k + 1))?);
        }
        if let Some(c) = zcol {
            let field = &rec[c];
            match field.parse::<usize>() {
                Ok(z) if z >= 1 => raw_levels.push(z),
                _ if field.is_empty() => return invalid(format!("row {row}, column z: missing value")),
                _ => return invalid(format!("row {row}, column z: '{field}' is not a level number (1, 2, ...)")),
            }
        } else {
            let v = fcols
                .iter()
                .enumerate()
                .map(|(k, &c)| number(&rec[c], row, &format!("f{}", k + 1)))
                .collect::<Result<Vec<_>>>()?;
            factor_values.push(v);
        }
    }
    let n = y.len();
    if n == 0 {
        return invalid("data file has no rows");
    }

    let (levels_vec, q, factors) = if zcol.is_some() {
        let q = match levels {
            Some(q) => {
                if let Some(i) = raw_levels.iter().position(|&z| z > q) {
                    return invalid(format!("row {}, column z: level {} outside 1..{q}", i + 1, raw_levels[i]));
                }
                q
            }
            None => *raw_levels.iter().max().expect("non-empty"),
        };
        let k = (q >= 2 && q.is_power_of_two()).then(|| q.trailing_zeros() as usize);
        (raw_levels.into_iter().map(|z| z - 1).collect::<Vec<_>>(), q, k)
    } else {
        let k = fcols.len();
        if k > 20 {
            return invalid(format!("{k} factor columns exceed the supported 20"));
        }
        // Storage is ±1 when any −1 appears, otherwise 0/1.
        let zero_one = !factor_values.iter().flatten().any(|&v| v == -1.0);
        let mut lv = Vec::with_capacity(n);
        for (i, vals) in factor_values.iter().enumerate() {
            let mut tuple = Vec::with_capacity(k);
            for (f, &v) in vals.iter().enumerate() {
                let z = match (zero_one, v) {
                    (true, 0.0) | (false, -1.0) => -1i8,
                    (_, 1.0) => 1,
                    _ => {
                        let allowed = if zero_one { "0 or 1" } else { "-1 or 1" };
                        return invalid(format!("row {}, column f{}: value {v} is not {allowed}", i + 1, f + 1));
                    }
                };
                tuple.push(z);
            }
            lv.push(level_index(&tuple));
        }
        if let Some(q) = levels {
            if q != 1 << k {
                return invalid(format!("{k} factor columns give {} levels, not {q}", 1 << k));
            }
        }
        (lv, 1 << k, Some(k))
    };

    let mut sizes = vec![0usize; q];
    for &z in &levels_vec {
        sizes[z] += 1;
    }
    if let Some(empty) = sizes.iter().position(|&s| s == 0) {
        return invalid(format!("level {} has no units", empty + 1));
    }
    let structure = match factors {
        Some(k) => TreatmentStructure::factorial(k, sizes)?,
        None => TreatmentStructure::new(sizes)?,
    };
    let x = DMatrix::from_row_slice(n, xcols.len(), &x);
    let data = ExperimentData::new(DVector::from_vec(y), levels_vec, x, structure)?;
    Ok(DataFile { data, factors, factor_columns: zcol.is_none() })
}

/// Numeric matrix; a first line that is not numeric is taken as a header.
pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let (_, m) = read_named_rows(path, false)?;
    Ok(m)
}

/// Rows with an optional leading name; unnamed rows are called `c1, c2, ...`.
pub fn read_named_rows(path: &Path, allow_names: bool) -> Result<(Vec<String>, DMatrix<f64>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let mut rd = csv::ReaderBuilder::new().has_headers(false).flexible(true).trim(csv::Trim::All).from_reader(file);
    let mut names = Vec::new();
    let mut values: Vec<f64> = Vec::new();
    let mut width = None;
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let fields: Vec<&str> = rec.iter().collect();
        if fields.iter().all(|f| f.is_empty()) {
            continue;
        }
        let named = allow_names && fields[0].parse::<f64>().is_err();
        if i == 0 && !named && fields.iter().any(|f| f.parse::<f64>().is_err()) {
            // header line
            continue;
        }
        let (name, nums) = if named { (fields[0].to_string(), &fields[1..]) } else { (String::new(), &fields[..]) };
        let row = nums
            .iter()
            .enumerate()
            .map(|(c, f)| number(f, i + 1, &format!("{}", c + 1)))
            .collect::<Result<Vec<_>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return invalid(format!("{}: row {} has {} values, expected {w}", path.display(), i + 1, row.len()))
            }
            _ => {}
        }
        names.push(name);
        values.extend(row);
    }
    let Some(w) = width else {
        return invalid(format!("{} has no rows", path.display()));
    };
    let m = DMatrix::from_row_slice(names.len(), w, &values);
    let names =
        names.into_iter().enumerate().map(|(h, n)| if n.is_empty() { format!("c{}", h + 1) } else { n }).collect();
    Ok((names, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn zero_one_factors_are_recoded() {
        let f = file("y,f1,f2,x1\n1,0,0,1\n2,0,1,2\n3,1,0,3\n4,1,1,4\n5,0,0,5\n6,0,1,6\n7,1,0,7\n8,1,1,8\n");
        let d = read_data(f.path(), None).unwrap();
        assert_eq!(d.factors, Some(2));
        assert_eq!(d.data.assignment().levels(), &[0, 1, 2, 3, 0, 1, 2, 3]);
        assert_eq!(d.data.shift(), &[4.5]);
    }

    #[test]
    fn gaps_and_missing_values_are_named() {
        let f = file("y,z,x2\n1,1,0\n");
        assert!(read_data(f.path(), None).unwrap_err().to_string().contains("x1"));
        let f = file("y,z\n1,1\n,2\n");
        assert!(read_data(f.path(), None).unwrap_err().to_string().contains("row 2, column y"));
    }

    #[test]
    fn matrix_header_and_names() {
        let f = file("a,b,c\n1,2,3\n4,5,6\n");
        assert_eq!(read_matrix(f.path()).unwrap(), DMatrix::from_row_slice(2, 3, &[1., 2., 3., 4., 5., 6.]));
        let f = file("A,-1,1\nB,1,-1\n");
        let (names, m) = read_named_rows(f.path(), true).unwrap();
        assert_eq!(names, vec!["A".to_string(), "B".to_string()]);
        assert_eq!(m.shape(), (2, 2));
    }
}
