//! Plain numeric table I/O.
//!
//! Dataset and model sidecar files are comma-separated tables of numbers
//! with an optional single header line. Floats are written with 17
//! significant digits so every value round-trips bit-exactly; readers detect
//! a header by the presence of alphabetic characters in the first line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::{Error, Result};

fn file_name(path: &Path) -> String {
    path.display().to_string()
}

/// Write a float matrix, one row per line, values in scientific notation
/// with 17 significant digits.
pub fn write_f64_table(path: &Path, header: Option<&[&str]>, m: &DMatrix<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:.16e}", m[(i, j)])).collect();
        writeln!(w, "{}", row.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Write an integer table, one row per line.
pub fn write_usize_table(path: &Path, header: Option<&[&str]>, rows: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush()?;
    Ok(())
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn looks_like_header(line: &str) -> bool {
    // numbers use digits, signs, dots, and e/E exponents; any other letter
    // marks a header
    line.chars()
        .any(|c| c.is_alphabetic() && c != 'e' && c != 'E')
        || line
            .split(',')
            .any(|cell| cell.trim().parse::<f64>().is_err())
}

/// Read a float matrix, skipping a header line when one is present.
pub fn read_f64_table(path: &Path) -> Result<DMatrix<f64>> {
    let lines = read_lines(path)?;
    let mut start = 0;
    if let Some(first) = lines.first() {
        if looks_like_header(first) {
            start = 1;
        }
    }
    let body = &lines[start..];
    if body.is_empty() {
        return Err(Error::format(&file_name(path), "table has no data rows"));
    }
    let ncols = body[0].split(',').count();
    let mut data = Vec::with_capacity(body.len() * ncols);
    for (idx, line) in body.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            return Err(Error::format(
                &file_name(path),
                &format!(
                    "row {} has {} fields, expected {} (line {})",
                    idx + 1,
                    cells.len(),
                    ncols,
                    idx + start + 1
                ),
            ));
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| {
                Error::format(
                    &file_name(path),
                    &format!("cannot parse '{}' as a number (line {})", cell.trim(), idx + start + 1),
                )
            })?;
            data.push(v);
        }
    }
    Ok(DMatrix::from_row_slice(body.len(), ncols, &data))
}

/// Read an integer table, skipping a header line when one is present.
pub fn read_usize_table(path: &Path) -> Result<Vec<Vec<usize>>> {
    let lines = read_lines(path)?;
    let mut start = 0;
    if let Some(first) = lines.first() {
        if first
            .split(',')
            .any(|cell| cell.trim().parse::<usize>().is_err())
        {
            start = 1;
        }
    }
    let body = &lines[start..];
    if body.is_empty() {
        return Err(Error::format(&file_name(path), "table has no data rows"));
    }
    let ncols = body[0].split(',').count();
    let mut rows = Vec::with_capacity(body.len());
    for (idx, line) in body.iter().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != ncols {
            return Err(Error::format(
                &file_name(path),
                &format!("row {} has {} fields, expected {}", idx + 1, cells.len(), ncols),
            ));
        }
        let mut row = Vec::with_capacity(ncols);
        for cell in cells {
            let v: usize = cell.trim().parse().map_err(|_| {
                Error::format(
                    &file_name(path),
                    &format!("cannot parse '{}' as an index (line {})", cell.trim(), idx + start + 1),
                )
            })?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}
