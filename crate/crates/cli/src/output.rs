//! CSV and plain PGM writers.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DVector;

use crate::CliError;

/// Full round-trip precision (17 significant digits).
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|source| CliError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn csv_text(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for row in rows {
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    write_text(path, &csv_text(header, rows))
}

/// The field as an `n_side × n_side` table; row `j` is the `j`-th line of
/// constant `y`.
pub fn grid_csv(field: &DVector<f64>, n_side: usize) -> String {
    let header: Vec<String> = (0..n_side).map(|i| format!("x{i}")).collect();
    let mut s = header.join(",");
    s.push('\n');
    for j in 0..n_side {
        let row: Vec<String> = (0..n_side).map(|i| fmt_f64(field[j * n_side + i])).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// Plain P2 image, `min(field) ↦ 0` and `top ↦ 255`, top row = largest `y`.
pub fn pgm(field: &DVector<f64>, n_side: usize, top: f64) -> String {
    let lo = field.min();
    let span = top - lo;
    let mut s = String::new();
    let _ = writeln!(s, "P2\n{n_side} {n_side}\n255");
    for j in (0..n_side).rev() {
        let row: Vec<String> = (0..n_side)
            .map(|i| {
                let v = field[j * n_side + i];
                let g = if span > 0.0 { ((v - lo) / span * 255.0).round() } else { 255.0 };
                (g.clamp(0.0, 255.0) as u8).to_string()
            })
            .collect();
        let _ = writeln!(s, "{}", row.join(" "));
    }
    s
}
