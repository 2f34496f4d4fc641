//! Plain-text matrix files: a one-line shape header followed by row-major
//! comma-separated values.
//!
//! ```text
//! 2,3
//! 1,0,0
//! 0,1,1
//! ```
//!
//! Values are written with Rust's shortest round-trip float formatting, so
//! reading a written file reproduces the exact bits.

use std::fs;
use std::path::Path;

use crate::matrix::BinaryMatrix;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "DenseMatrix::new",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

pub fn format_matrix(m: &DenseMatrix) -> String {
    let mut out = format!("{},{}\n", m.rows, m.cols);
    for i in 0..m.rows {
        let line: Vec<String> = m.row(i).iter().map(|v| format!("{v}")).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

pub fn format_mask(m: &BinaryMatrix) -> String {
    let mut out = format!("{},{}\n", m.rows(), m.cols());
    for i in 0..m.rows() {
        let line: Vec<&str> = m.row(i).iter().map(|&b| if b { "1" } else { "0" }).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

fn parse_header(line: Option<&str>, what: &str) -> Result<(usize, usize)> {
    let line = line.ok_or_else(|| Error::Data(format!("{what}: empty file")))?;
    let dims: Vec<&str> = line.trim().split(',').collect();
    if dims.len() != 2 {
        return Err(Error::Data(format!("{what}: header must be `rows,cols`, got `{line}`")));
    }
    let parse = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| Error::Data(format!("{what}: bad header value `{s}`")))
    };
    Ok((parse(dims[0])?, parse(dims[1])?))
}

pub fn parse_matrix(text: &str) -> Result<DenseMatrix> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let (rows, cols) = parse_header(lines.next(), "matrix")?;
    let mut data = Vec::with_capacity(rows * cols);
    for (i, line) in lines.enumerate() {
        let before = data.len();
        for tok in line.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| Error::Data(format!("matrix row {i}: bad value `{tok}`")))?;
            data.push(v);
        }
        if data.len() - before != cols {
            return Err(Error::Data(format!(
                "matrix row {i}: expected {cols} values, got {}",
                data.len() - before
            )));
        }
    }
    if data.len() != rows * cols {
        return Err(Error::Data(format!(
            "matrix: header says {rows} rows, found {}",
            data.len() / cols.max(1)
        )));
    }
    Ok(DenseMatrix { rows, cols, data })
}

pub fn parse_mask(text: &str) -> Result<BinaryMatrix> {
    let m = parse_matrix(text)?;
    let mut data = Vec::with_capacity(m.data.len());
    for v in &m.data {
        match *v {
            x if x == 0.0 => data.push(false),
            x if x == 1.0 => data.push(true),
            other => return Err(Error::Data(format!("mask entry {other} is not 0 or 1"))),
        }
    }
    BinaryMatrix::from_vec(m.rows, m.cols, data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &DenseMatrix) -> Result<()> {
    fs::write(path.as_ref(), format_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn write_mask(path: impl AsRef<Path>, m: &BinaryMatrix) -> Result<()> {
    fs::write(path.as_ref(), format_mask(m)).map_err(|e| Error::io(path, e))
}

pub fn read_matrix(path: impl AsRef<Path>) -> Result<DenseMatrix> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_matrix(&text)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMatrix> {
    let text = fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    parse_mask(&text)
}
