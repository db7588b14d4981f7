//! Plain-text tensor fixtures.
//!
//! A fixture document holds one or more named tensors:
//!
//! ```text
//! # comment lines start with '#'
//! tensor weights
//! dtype f64
//! shape 2 3
//! values
//! 0.5 -1 2
//! 3 4 1e-7
//! end
//! ```
//!
//! Values are written with the shortest decimal form that parses back to
//! the same bits, so a write/read cycle is exact. A scalar has an empty
//! `shape` line.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, Scalar, Tensor};

/// Serialises named tensors into a fixture document.
pub fn write_fixtures<T: Scalar>(tensors: &[(&str, &Tensor<T>)]) -> String {
    let mut out = String::new();
    for (name, t) in tensors {
        let _ = writeln!(out, "tensor {name}");
        let _ = writeln!(out, "dtype {}", T::DTYPE);
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "shape {}", dims.join(" ").trim_end());
        out.push_str("values\n");
        let row = t.shape().last().copied().unwrap_or(1);
        for chunk in t.data().chunks(row) {
            let vals: Vec<String> = chunk.iter().map(|v| format!("{v:?}")).collect();
            out.push_str(&vals.join(" "));
            out.push('\n');
        }
        out.push_str("end\n");
    }
    out
}

pub fn write_fixture<T: Scalar>(name: &str, tensor: &Tensor<T>) -> String {
    write_fixtures(&[(name, tensor)])
}

fn fixture_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Fixture { line, msg: msg.into() }
}

/// Reads every tensor in a fixture document. The declared dtype must match `T`.
pub fn read_fixtures<T: Scalar>(text: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let mut out = Vec::new();

    while let Some((ln, header)) = lines.next() {
        let name = header
            .strip_prefix("tensor")
            .map(str::trim)
            .filter(|n| !n.is_empty())
            .ok_or_else(|| fixture_err(ln, format!("expected `tensor <name>`, got {header:?}")))?
            .to_string();

        let (ln, dline) = lines.next().ok_or_else(|| fixture_err(ln, "missing dtype line"))?;
        let dtype: DType = dline
            .strip_prefix("dtype")
            .ok_or_else(|| fixture_err(ln, "expected `dtype`"))?
            .trim()
            .parse()
            .map_err(|e: Error| fixture_err(ln, e.to_string()))?;
        if dtype != T::DTYPE {
            return Err(fixture_err(
                ln,
                format!("tensor {name} is {dtype}, expected {}", T::DTYPE),
            ));
        }

        let (ln, sline) = lines.next().ok_or_else(|| fixture_err(ln, "missing shape line"))?;
        let shape = sline
            .strip_prefix("shape")
            .ok_or_else(|| fixture_err(ln, "expected `shape`"))?
            .split_whitespace()
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|e| fixture_err(ln, format!("bad extent {d:?}: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;

        let (ln, vline) = lines.next().ok_or_else(|| fixture_err(ln, "missing values line"))?;
        if vline != "values" {
            return Err(fixture_err(ln, "expected `values`"));
        }

        let mut data = Vec::new();
        let mut last = ln;
        loop {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| fixture_err(last, format!("tensor {name} is missing `end`")))?;
            last = ln;
            if l == "end" {
                break;
            }
            for tok in l.split_whitespace() {
                let v = tok
                    .parse::<T>()
                    .map_err(|_| fixture_err(ln, format!("bad value {tok:?}")))?;
                data.push(v);
            }
        }
        let tensor = Tensor::new(&shape, data).map_err(|e| fixture_err(last, e.to_string()))?;
        out.push((name, tensor));
    }
    Ok(out)
}

/// Reads a document expected to hold exactly one tensor.
pub fn read_fixture<T: Scalar>(text: &str) -> Result<Tensor<T>> {
    let mut all = read_fixtures::<T>(text)?;
    if all.len() != 1 {
        return Err(fixture_err(0, format!("expected one tensor, found {}", all.len())));
    }
    Ok(all.remove(0).1)
}

pub fn load_fixture<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    read_fixture(&fs::read_to_string(path)?)
}

pub fn save_fixture<T: Scalar>(path: &Path, name: &str, tensor: &Tensor<T>) -> Result<()> {
    fs::write(path, write_fixture(name, tensor))?;
    Ok(())
}

/// The dtype declared by the first tensor of a document.
pub fn peek_dtype(text: &str) -> Result<DType> {
    for (i, l) in text.lines().enumerate() {
        if let Some(d) = l.trim().strip_prefix("dtype") {
            return d.trim().parse().map_err(|e: Error| fixture_err(i + 1, e.to_string()));
        }
    }
    Err(fixture_err(0, "no dtype line"))
}
