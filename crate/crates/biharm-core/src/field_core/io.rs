//! Field serialization: a one-line JSON header followed by CSV node values.
//!
//! The header records the grid and the field kind; the rows are node values
//! in row-major index order, one `re,im` pair per component. Every module
//! that writes fields to disk uses this format.

use crate::error::{BiharmError, Result};
use crate::field_core::field::{C64, ScalarField, SymMatrixField, VectorField, sym_len};
use crate::field_core::grid::Grid;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq, Clone, Copy)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    Scalar,
    Vector,
    SymMatrix,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    kind: FieldKind,
    components: usize,
    grid: Grid,
}

fn write_rows<W: Write>(out: &mut W, comps: &[&ScalarField]) -> Result<()> {
    let len = comps[0].data.len();
    // row-major order matches ndarray's default iteration
    let flats: Vec<Vec<C64>> = comps.iter().map(|c| c.data.iter().cloned().collect()).collect();
    for i in 0..len {
        let mut row = String::new();
        for (ci, flat) in flats.iter().enumerate() {
            if ci > 0 {
                row.push(',');
            }
            let v = flat[i];
            row.push_str(&format!("{:.17e},{:.17e}", v.re, v.im));
        }
        writeln!(out, "{row}")?;
    }
    Ok(())
}

fn save(path: &Path, kind: FieldKind, grid: &Grid, comps: &[&ScalarField]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let header = Header { kind, components: comps.len(), grid: grid.clone() };
    let line = serde_json::to_string(&header).map_err(|e| BiharmError::Serde(e.to_string()))?;
    writeln!(out, "{line}")?;
    write_rows(&mut out, comps)
}

fn load(path: &Path) -> Result<(Header, Vec<ScalarField>)> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| BiharmError::Serde("empty field file".into()))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| BiharmError::Serde(e.to_string()))?;
    let mut comps: Vec<ScalarField> =
        (0..header.components).map(|_| ScalarField::zeros(&header.grid)).collect();
    let mut flat_views: Vec<_> = comps
        .iter_mut()
        .map(|c| c.data.as_slice_mut().expect("freshly allocated arrays are contiguous"))
        .collect();
    let expected = header.grid.len();
    let mut count = 0usize;
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let nums: Vec<f64> = line
            .split(',')
            .map(|t| t.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| BiharmError::Serde(format!("bad csv value: {e}")))?;
        if nums.len() != 2 * header.components {
            return Err(BiharmError::Serde(format!(
                "row has {} values, expected {}",
                nums.len(),
                2 * header.components
            )));
        }
        if count >= expected {
            return Err(BiharmError::Serde("more rows than grid nodes".into()));
        }
        for (ci, view) in flat_views.iter_mut().enumerate() {
            view[count] = C64::new(nums[2 * ci], nums[2 * ci + 1]);
        }
        count += 1;
    }
    if count != expected {
        return Err(BiharmError::Serde(format!("{count} rows, expected {expected}")));
    }
    Ok((header, comps))
}

pub fn save_scalar(path: impl AsRef<Path>, f: &ScalarField) -> Result<()> {
    save(path.as_ref(), FieldKind::Scalar, &f.grid, &[f])
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<ScalarField> {
    let (header, mut comps) = load(path.as_ref())?;
    if header.kind != FieldKind::Scalar {
        return Err(BiharmError::Serde("field kind is not scalar".into()));
    }
    Ok(comps.remove(0))
}

pub fn save_vector(path: impl AsRef<Path>, f: &VectorField) -> Result<()> {
    let comps: Vec<&ScalarField> = f.comps.iter().collect();
    save(path.as_ref(), FieldKind::Vector, &f.grid, &comps)
}

pub fn load_vector(path: impl AsRef<Path>) -> Result<VectorField> {
    let (header, comps) = load(path.as_ref())?;
    if header.kind != FieldKind::Vector || comps.len() != header.grid.dim() {
        return Err(BiharmError::Serde("field kind is not a vector".into()));
    }
    Ok(VectorField { grid: header.grid, comps })
}

pub fn save_sym_matrix(path: impl AsRef<Path>, f: &SymMatrixField) -> Result<()> {
    let comps: Vec<&ScalarField> = f.comps.iter().collect();
    save(path.as_ref(), FieldKind::SymMatrix, &f.grid, &comps)
}

pub fn load_sym_matrix(path: impl AsRef<Path>) -> Result<SymMatrixField> {
    let (header, comps) = load(path.as_ref())?;
    if header.kind != FieldKind::SymMatrix || comps.len() != sym_len(header.grid.dim()) {
        return Err(BiharmError::Serde("field kind is not a symmetric matrix".into()));
    }
    Ok(SymMatrixField { grid: header.grid, comps })
}
