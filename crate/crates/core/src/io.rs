//! On-disk formats.
//!
//! * Feature file (`.fsf`): `"FSF1"`, u32 LE dim, u64 LE n_samples, then
//!   n_samples × dim little-endian f32 values, row-major. Values are widened
//!   to f64 on load and narrowed to f32 on save.
//! * Label file: CSV with header `index,class`.
//! * Slide manifest: a `slide,<n_rows>,<n_cols>,<n_classes>` line, the header
//!   `row,col,feature_index,class`, then one line per cell (class may be empty).
//! * Model file: JSON, see [`ModelFile`].
//! * Posterior file: CSV `query_index,p_0,...,p_{K-1},argmax`.
//!
//! Text parse errors carry 1-based line numbers counting the header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{argmax, ClassModel, FeatureMatrix};
use crate::windowing::{GridCell, SlideGrid};

pub const FEATURE_MAGIC: &[u8; 4] = b"FSF1";
const FEATURE_HEADER_LEN: usize = 16;

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_features(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + m.values().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(m.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(m.n_samples() as u64).to_le_bytes());
    for &v in m.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<FeatureMatrix> {
    let fail = |offset: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message,
    };
    if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
        return Err(fail(0, "bad magic".into()));
    }
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(fail(bytes.len(), "truncated header".into()));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if dim == 0 {
        return Err(fail(4, "dim = 0".into()));
    }
    if n == 0 {
        return Err(fail(8, "n_samples = 0".into()));
    }
    let expected = (n as u128) * (dim as u128) * 4 + FEATURE_HEADER_LEN as u128;
    if (bytes.len() as u128) < expected {
        return Err(fail(
            bytes.len(),
            format!("truncated payload (expected {expected} bytes)"),
        ));
    }
    if (bytes.len() as u128) > expected {
        return Err(fail(expected as usize, "trailing bytes after payload".into()));
    }
    let n = n as usize;
    let mut values = Vec::with_capacity(n * dim);
    for (i, chunk) in bytes[FEATURE_HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(fail(
                FEATURE_HEADER_LEN + 4 * i,
                format!("non-finite value {v}"),
            ));
        }
        values.push(f64::from(v));
    }
    FeatureMatrix::new(n, dim, values)
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes, path)
}

pub fn write_features(m: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), encode_features(m))
}

/// Rounds every value to the nearest f32, i.e. what a save/load cycle yields.
pub fn quantize_f32(values: &mut [f64]) {
    for v in values {
        *v = f64::from(*v as f32);
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn parse_usize(path: &Path, line: usize, field: &str, what: &str) -> Result<usize> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("malformed {what} {field:?}")))
}

/// Parses an `index,class` label file, checking class ids against `n_classes`.
pub fn parse_labels(text: &str, n_classes: usize, path: &Path) -> Result<BTreeMap<usize, usize>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "index,class" => {}
        Some((_, h)) => return Err(parse_err(path, 1, format!("expected header \"index,class\", got {h:?}"))),
        None => return Err(parse_err(path, 1, "empty label file")),
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(parse_err(path, lineno, format!("malformed row {line:?}")));
        }
        let index = parse_usize(path, lineno, fields[0], "index")?;
        let class = parse_usize(path, lineno, fields[1], "class")?;
        if class >= n_classes {
            return Err(parse_err(
                path,
                lineno,
                format!("class out of range ({class} >= {n_classes})"),
            ));
        }
        if out.insert(index, class).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate index {index}")));
        }
    }
    Ok(out)
}

pub fn read_labels(path: impl AsRef<Path>, n_classes: usize) -> Result<BTreeMap<usize, usize>> {
    let path = path.as_ref();
    parse_labels(&read_text(path)?, n_classes, path)
}

pub fn labels_csv<'a>(labels: impl IntoIterator<Item = (&'a usize, &'a usize)>) -> String {
    let mut out = String::from("index,class\n");
    for (i, c) in labels {
        let _ = writeln!(out, "{i},{c}");
    }
    out
}

pub fn write_labels(labels: &BTreeMap<usize, usize>, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), labels_csv(labels))
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<SlideGrid> {
    let mut lines = text.lines().enumerate();
    let first = lines.next().map(|(_, l)| l).unwrap_or("");
    let head: Vec<&str> = first.split(',').collect();
    if head.len() != 4 || head[0].trim() != "slide" {
        return Err(parse_err(
            path,
            1,
            "expected \"slide,<n_rows>,<n_cols>,<n_classes>\"",
        ));
    }
    let n_rows = parse_usize(path, 1, head[1], "n_rows")?;
    let n_cols = parse_usize(path, 1, head[2], "n_cols")?;
    let n_classes = parse_usize(path, 1, head[3], "n_classes")?;
    match lines.next() {
        Some((_, h)) if h.trim() == "row,col,feature_index,class" => {}
        _ => {
            return Err(parse_err(
                path,
                2,
                "expected header \"row,col,feature_index,class\"",
            ))
        }
    }
    let mut cells = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut features = std::collections::HashSet::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(parse_err(path, lineno, format!("malformed row {line:?}")));
        }
        let row = parse_usize(path, lineno, f[0], "row")?;
        let col = parse_usize(path, lineno, f[1], "col")?;
        let feature_index = parse_usize(path, lineno, f[2], "feature_index")?;
        let true_class = if f[3].trim().is_empty() {
            None
        } else {
            let c = parse_usize(path, lineno, f[3], "class")?;
            if c >= n_classes {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("class out of range ({c} >= {n_classes})"),
                ));
            }
            Some(c)
        };
        if row >= n_rows || col >= n_cols {
            return Err(parse_err(path, lineno, format!("cell ({row}, {col}) outside the grid")));
        }
        if !seen.insert((row, col)) {
            return Err(parse_err(path, lineno, format!("duplicate cell ({row}, {col})")));
        }
        if !features.insert(feature_index) {
            return Err(parse_err(path, lineno, format!("duplicate feature index {feature_index}")));
        }
        cells.push(GridCell {
            row,
            col,
            feature_index,
            true_class,
        });
    }
    SlideGrid::new(n_rows, n_cols, n_classes, cells)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<SlideGrid> {
    let path = path.as_ref();
    parse_manifest(&read_text(path)?, path)
}

pub fn manifest_text(grid: &SlideGrid) -> String {
    let mut out = format!(
        "slide,{},{},{}\nrow,col,feature_index,class\n",
        grid.n_rows(),
        grid.n_cols(),
        grid.n_classes()
    );
    for c in grid.cells() {
        let class = c.true_class.map(|k| k.to_string()).unwrap_or_default();
        let _ = writeln!(out, "{},{},{},{class}", c.row, c.col, c.feature_index);
    }
    out
}

pub fn write_manifest(grid: &SlideGrid, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), manifest_text(grid))
}

/// Serialized class models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub dim: usize,
    pub n_classes: usize,
    pub lambda: f64,
    /// Explicit ℓ1 penalty, or `null` for the scale-relative default.
    pub rho: Option<f64>,
    pub centroids: Vec<Vec<f64>>,
    /// Row-major d×d precision per class.
    pub precisions: Vec<Vec<f64>>,
    pub log_dets: Vec<f64>,
}

impl ModelFile {
    pub fn from_models(models: &[ClassModel], lambda: f64, rho: Option<f64>) -> Self {
        let dim = models.first().map_or(0, ClassModel::dim);
        Self {
            dim,
            n_classes: models.len(),
            lambda,
            rho,
            centroids: models.iter().map(|m| m.centroid.clone()).collect(),
            precisions: models
                .iter()
                .map(|m| m.precision.transpose().as_slice().to_vec())
                .collect(),
            log_dets: models.iter().map(|m| m.log_det).collect(),
        }
    }

    /// Rebuilds the models, re-validating each precision and its cached log-determinant.
    pub fn to_models(&self) -> Result<Vec<ClassModel>> {
        let k = self.n_classes;
        if self.centroids.len() != k || self.precisions.len() != k || self.log_dets.len() != k {
            return Err(Error::DimensionMismatch(format!(
                "model file declares {k} classes but stores {} centroids, {} precisions, {} log-dets",
                self.centroids.len(),
                self.precisions.len(),
                self.log_dets.len()
            )));
        }
        let d = self.dim;
        (0..k)
            .map(|c| {
                if self.centroids[c].len() != d || self.precisions[c].len() != d * d {
                    return Err(Error::DimensionMismatch(format!(
                        "class {c} parameters do not match dim {d}"
                    )));
                }
                let p = DMatrix::from_row_slice(d, d, &self.precisions[c]);
                let model = ClassModel::new(self.centroids[c].clone(), p).map_err(|e| {
                    Error::Class {
                        class: c,
                        source: Box::new(e),
                    }
                })?;
                if (model.log_det - self.log_dets[c]).abs() > 1e-8 {
                    return Err(Error::InvalidInput(format!(
                        "class {c}: stored log_det {} disagrees with Cholesky value {}",
                        self.log_dets[c], model.log_det
                    )));
                }
                Ok(model)
            })
            .collect()
    }
}

pub fn read_model(path: impl AsRef<Path>) -> Result<ModelFile> {
    let path = path.as_ref();
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e.to_string()))
}

pub fn write_model(model: &ModelFile, path: impl AsRef<Path>) -> Result<()> {
    let mut text = serde_json::to_string_pretty(model)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize model: {e}")))?;
    text.push('\n');
    write_bytes(path.as_ref(), text)
}

/// `query_index,p_0,...,p_{K-1},argmax` rows for the given sample indices.
pub fn posterior_csv(indices: &[usize], rows: &[Vec<f64>], n_classes: usize) -> String {
    let mut out = String::from("query_index");
    for k in 0..n_classes {
        let _ = write!(out, ",p_{k}");
    }
    out.push_str(",argmax\n");
    for (i, row) in indices.iter().zip(rows) {
        let _ = write!(out, "{i}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", argmax(row));
    }
    out
}

/// Reads back `(index, argmax)` pairs from a posterior file.
pub fn parse_posterior_predictions(text: &str, path: &Path) -> Result<BTreeMap<usize, usize>> {
    let mut lines = text.lines().enumerate();
    let header = lines.next().map(|(_, l)| l).unwrap_or("");
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "query_index" || cols[cols.len() - 1] != "argmax" {
        return Err(parse_err(path, 1, format!("unexpected header {header:?}")));
    }
    let mut out = BTreeMap::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != cols.len() {
            return Err(parse_err(path, lineno, format!("expected {} fields", cols.len())));
        }
        let idx = parse_usize(path, lineno, f[0], "query_index")?;
        let a = parse_usize(path, lineno, f[f.len() - 1], "argmax")?;
        if out.insert(idx, a).is_some() {
            return Err(parse_err(path, lineno, format!("duplicate index {idx}")));
        }
    }
    Ok(out)
}
