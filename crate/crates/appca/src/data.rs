//! Synthetic data generation, CSV ingestion/export and experiment
//! manifests.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Parameters of the synthetic generator `Y = W (X ⊙ Z) + eps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub dims: usize,
    pub k_plus: usize,
    pub n_points: usize,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.k_plus == 0 || self.n_points == 0 {
            return Err(Error::InvalidInput("synthetic spec counts must be at least 1".into()));
        }
        if self.k_plus > self.dims {
            return Err(Error::InvalidInput(format!(
                "true feature count {} exceeds dimension {}",
                self.k_plus, self.dims
            )));
        }
        if !(self.sigma_x.is_finite() && self.sigma_x > 0.0) {
            return Err(Error::InvalidInput("sigma_x must be positive".into()));
        }
        // sigma_y = 0 generates noiseless data and is allowed.
        if !(self.sigma_y.is_finite() && self.sigma_y >= 0.0) {
            return Err(Error::InvalidInput("sigma_y must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth alongside the generated observations.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub y: DMatrix<f64>,
    pub w_true: DMatrix<f64>,
    pub x_true: DMatrix<f64>,
    pub z_true: DMatrix<u8>,
}

/// Generates data from the model: `W` has orthonormal (unit, mutually
/// perpendicular) columns, the loadings are i.i.d. `N(0, sigma_x^2)`, `Z`
/// is i.i.d. Bernoulli(1/2) with all-zero columns rejected, and the noise
/// is i.i.d. `N(0, sigma_y^2)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, k, n) = (spec.dims, spec.k_plus, spec.n_points);

    // Random Gaussian matrix orthonormalized column by column.
    let w_true = loop {
        let raw = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
        if let Some(w) = orthonormalize(&raw) {
            break w;
        }
    };

    let x_true = DMatrix::from_fn(k, n, |_, _| spec.sigma_x * rng.sample::<f64, _>(StandardNormal));

    let mut z_true = DMatrix::<u8>::zeros(k, n);
    for col in 0..n {
        loop {
            let mut any = false;
            for row in 0..k {
                let bit = rng.random::<f64>() < 0.5;
                z_true[(row, col)] = bit as u8;
                any |= bit;
            }
            if any {
                break;
            }
        }
    }

    let mut y = DMatrix::zeros(d, n);
    for col in 0..n {
        let mut masked = DVector::zeros(k);
        for row in 0..k {
            if z_true[(row, col)] == 1 {
                masked[row] = x_true[(row, col)];
            }
        }
        let mut point = &w_true * masked;
        for r in 0..d {
            point[r] += spec.sigma_y * rng.sample::<f64, _>(StandardNormal);
        }
        y.column_mut(col).copy_from(&point);
    }

    Ok(SyntheticData { y, w_true, x_true, z_true })
}

/// Gram-Schmidt with a re-orthogonalization pass; `None` when the input is
/// numerically rank deficient.
fn orthonormalize(raw: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let (d, k) = raw.shape();
    let mut w = DMatrix::zeros(d, k);
    for j in 0..k {
        let mut col = raw.column(j).into_owned();
        for _ in 0..2 {
            for i in 0..j {
                let prev = w.column(i);
                let proj = prev.dot(&col);
                col.axpy(-proj, &prev, 1.0);
            }
        }
        let norm = col.norm();
        if norm < 1e-10 {
            return None;
        }
        col /= norm;
        w.column_mut(j).copy_from(&col);
    }
    Some(w)
}

/// How a CSV matrix is laid out relative to the internal
/// dimensions-by-points convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    DimsByPoints,
    PointsByDims,
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dims-by-points" | "dims_by_points" => Ok(Self::DimsByPoints),
            "points-by-dims" | "points_by_dims" => Ok(Self::PointsByDims),
            other => Err(Error::InvalidInput(format!("unknown orientation `{other}`"))),
        }
    }
}

/// Returns the matrix in dimensions-by-points layout, transposing when the
/// source was points-by-dimensions.
pub fn orient_observations(matrix: DMatrix<f64>, orientation: Orientation) -> DMatrix<f64> {
    match orientation {
        Orientation::DimsByPoints => matrix,
        Orientation::PointsByDims => matrix.transpose(),
    }
}

/// Loads a rectangular numeric CSV. A non-numeric first row is treated as a
/// header and skipped; ragged rows and non-numeric cells are reported with
/// their 1-based file coordinates.
pub fn load_matrix_csv<P: AsRef<Path>>(path: P) -> Result<DMatrix<f64>> {
    let path_str = path.as_ref().display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path.as_ref())
        .map_err(|e| Error::InvalidInput(format!("{path_str}: {e}")))?;

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width: Option<usize> = None;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::InvalidInput(format!("{path_str}: {e}")))?;
        let file_row = idx + 1;
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        let mut parsed = Vec::with_capacity(record.len());
        let mut bad_cell: Option<usize> = None;
        for (col, field) in record.iter().enumerate() {
            match field.parse::<f64>() {
                Ok(v) => parsed.push(v),
                Err(_) => {
                    bad_cell = Some(col);
                    break;
                }
            }
        }
        if let Some(col) = bad_cell {
            // A non-numeric first row is a header.
            if idx == 0 {
                continue;
            }
            return Err(Error::CsvFormat {
                path: path_str,
                row: file_row,
                column: col + 1,
                message: format!("cell `{}` is not numeric", &record[col]),
            });
        }
        match width {
            None => width = Some(parsed.len()),
            Some(w) if w != parsed.len() => {
                return Err(Error::CsvFormat {
                    path: path_str,
                    row: file_row,
                    column: parsed.len().min(w) + 1,
                    message: format!("row has {} cells, expected {w}", parsed.len()),
                });
            }
            _ => {}
        }
        rows.push(parsed);
    }
    let width = width.ok_or_else(|| Error::InvalidInput(format!("{path_str}: no numeric rows")))?;
    let height = rows.len();
    Ok(DMatrix::from_fn(height, width, |i, j| rows[i][j]))
}

/// Writes a matrix as CSV with 17 significant digits, enough to round-trip
/// `f64` exactly.
pub fn save_matrix_csv<P: AsRef<Path>>(matrix: &DMatrix<f64>, path: P) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for i in 0..matrix.nrows() {
        for j in 0..matrix.ncols() {
            if j > 0 {
                out.write_all(b",")?;
            }
            write!(out, "{:.16e}", matrix[(i, j)])?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes an experiment manifest as flat `key = value` lines in the given
/// order.
pub fn write_manifest<P: AsRef<Path>>(path: P, entries: &[(String, String)]) -> Result<()> {
    let file = File::create(path.as_ref())?;
    let mut out = BufWriter::new(file);
    for (key, value) in entries {
        writeln!(out, "{key} = {value}")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a flat `key = value` manifest back into pairs.
pub fn read_manifest<P: AsRef<Path>>(path: P) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path.as_ref())?;
    let mut entries = Vec::new();
    for line in text.lines() {
        if let Some((key, value)) = line.split_once('=') {
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
    }
    Ok(entries)
}
