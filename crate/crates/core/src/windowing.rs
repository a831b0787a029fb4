//! Sliding-window task construction over a tiled slide and fusion of the
//! per-window posteriors into a slide-level class map.
//!
//! Everything is expressed in grid units: one cell is one mini-patch. With
//! 1728-pixel mini-patches on an 864-pixel lattice, a 5184-pixel window covers
//! 5 cells per axis, i.e. the default span of 5 gives 25 query samples.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ppm::RgbImage;
use crate::types::{argmax, on_simplex, FeatureMatrix, FewShotTask, SIMPLEX_TOL};

/// Default window side in cells.
pub const DEFAULT_SPAN: usize = 5;

/// One colour per class id (NT, RE, AM, VE, AN); ids past the palette wrap around.
pub const PALETTE: [[u8; 3]; 5] = [
    [46, 160, 67],
    [128, 60, 170],
    [140, 80, 30],
    [240, 130, 20],
    [235, 215, 40],
];
/// Colour of cells no window covered.
pub const UNLABELED_COLOR: [u8; 3] = [0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub feature_index: usize,
    pub true_class: Option<usize>,
}

/// Tiled-slide manifest: grid positions mapped to feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideGrid {
    n_rows: usize,
    n_cols: usize,
    n_classes: usize,
    cells: Vec<GridCell>,
    // dense (row, col) -> cell position lookup
    lookup: Vec<Option<usize>>,
}

impl SlideGrid {
    pub fn new(n_rows: usize, n_cols: usize, n_classes: usize, cells: Vec<GridCell>) -> Result<Self> {
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::InvalidInput("slide grid must be non-empty".into()));
        }
        let mut lookup = vec![None; n_rows * n_cols];
        for (i, c) in cells.iter().enumerate() {
            if c.row >= n_rows || c.col >= n_cols {
                return Err(Error::InvalidInput(format!(
                    "cell ({}, {}) outside the {n_rows}x{n_cols} grid",
                    c.row, c.col
                )));
            }
            if let Some(t) = c.true_class {
                if t >= n_classes {
                    return Err(Error::InvalidInput(format!(
                        "cell ({}, {}) has class {t} out of range",
                        c.row, c.col
                    )));
                }
            }
            let slot = &mut lookup[c.row * n_cols + c.col];
            if slot.is_some() {
                return Err(Error::InvalidInput(format!(
                    "duplicate cell ({}, {})",
                    c.row, c.col
                )));
            }
            *slot = Some(i);
        }
        Ok(Self {
            n_rows,
            n_cols,
            n_classes,
            cells,
            lookup,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn cells(&self) -> &[GridCell] {
        &self.cells
    }

    pub fn cell_at(&self, row: usize, col: usize) -> Option<&GridCell> {
        self.lookup[row * self.n_cols + col].map(|i| &self.cells[i])
    }

    /// Checks every feature index against a feature matrix of `n_samples` rows.
    pub fn check_features(&self, n_samples: usize) -> Result<()> {
        match self.cells.iter().find(|c| c.feature_index >= n_samples) {
            Some(c) => Err(Error::InvalidInput(format!(
                "cell ({}, {}) references feature {} of {n_samples}",
                c.row, c.col, c.feature_index
            ))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub span: usize,
    pub stride: usize,
}

impl WindowSpec {
    pub fn new(span: usize, stride: usize) -> Result<Self> {
        if stride == 0 || stride > span {
            return Err(Error::InvalidInput(format!(
                "window stride must satisfy 1 <= stride <= span (span {span}, stride {stride})"
            )));
        }
        Ok(Self { span, stride })
    }
}

/// Window start positions along one axis of length `extent`.
///
/// Regular anchors at multiples of `stride` that fit entirely, plus a final
/// anchor at `extent − span` when the regular ones stop short of the edge.
/// An axis shorter than the span gets a single anchor at 0.
pub fn anchors(extent: usize, span: usize, stride: usize) -> Vec<usize> {
    if extent <= span {
        return vec![0];
    }
    let last = extent - span;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    out
}

/// The labeled block every window task shares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SupportBlock {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub anchor: (usize, usize),
    /// Positions in `grid.cells()` of the query samples, row-major within the window.
    pub cells: Vec<usize>,
    pub task: FewShotTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkippedWindow {
    pub anchor: (usize, usize),
}

/// One few-shot task per window anchor; windows without cells are skipped and recorded.
pub fn build_windows(
    grid: &SlideGrid,
    spec: WindowSpec,
    support: &SupportBlock,
) -> Result<(Vec<Window>, Vec<SkippedWindow>)> {
    WindowSpec::new(spec.span, spec.stride)?;
    if grid.cells.is_empty() {
        return Err(Error::InvalidInput("slide grid has no cells".into()));
    }
    let mut windows = Vec::new();
    let mut skipped = Vec::new();
    for r0 in anchors(grid.n_rows, spec.span, spec.stride) {
        for c0 in anchors(grid.n_cols, spec.span, spec.stride) {
            let mut cells = Vec::new();
            for r in r0..(r0 + spec.span).min(grid.n_rows) {
                for c in c0..(c0 + spec.span).min(grid.n_cols) {
                    if let Some(i) = grid.lookup[r * grid.n_cols + c] {
                        cells.push(i);
                    }
                }
            }
            if cells.is_empty() {
                log::warn!("window at ({r0}, {c0}) contains no cells; skipped");
                skipped.push(SkippedWindow { anchor: (r0, c0) });
                continue;
            }
            let query = cells.iter().map(|&i| grid.cells[i].feature_index).collect();
            let task = FewShotTask::new(
                support.indices.clone(),
                support.labels.clone(),
                query,
                support.n_classes,
            );
            windows.push(Window {
                anchor: (r0, c0),
                cells,
                task,
            });
        }
    }
    Ok((windows, skipped))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapCell {
    /// Mean posterior over covering windows; `None` when uncovered.
    pub posterior: Option<Vec<f64>>,
    /// `None` is the "unlabeled" sentinel.
    pub argmax: Option<usize>,
    pub coverage: usize,
}

/// Slide-level fused prediction, row-major over the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub n_rows: usize,
    pub n_cols: usize,
    pub n_classes: usize,
    pub cells: Vec<MapCell>,
}

impl ClassMap {
    pub fn get(&self, row: usize, col: usize) -> &MapCell {
        &self.cells[row * self.n_cols + col]
    }
}

/// Averages the posteriors of every window covering a cell.
///
/// Windows are reduced in the order given, so the result does not depend on
/// the order in which they were solved.
pub fn aggregate(
    windows: &[Window],
    posteriors: &[Vec<Vec<f64>>],
    grid: &SlideGrid,
) -> Result<ClassMap> {
    if windows.len() != posteriors.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} windows but {} posterior blocks",
            windows.len(),
            posteriors.len()
        )));
    }
    let k = grid.n_classes;
    let n = grid.n_rows * grid.n_cols;
    let mut sums = vec![vec![0.0; k]; n];
    let mut coverage = vec![0usize; n];
    for (w, rows) in windows.iter().zip(posteriors) {
        if rows.len() != w.cells.len() {
            return Err(Error::DimensionMismatch(format!(
                "window at {:?} has {} cells but {} posteriors",
                w.anchor,
                w.cells.len(),
                rows.len()
            )));
        }
        for (&ci, p) in w.cells.iter().zip(rows) {
            if p.len() != k || !on_simplex(p, SIMPLEX_TOL) {
                return Err(Error::InvalidInput(format!(
                    "posterior for window {:?} is not on the {k}-simplex",
                    w.anchor
                )));
            }
            let cell = &grid.cells[ci];
            let pos = cell.row * grid.n_cols + cell.col;
            for (s, v) in sums[pos].iter_mut().zip(p) {
                *s += v;
            }
            coverage[pos] += 1;
        }
    }
    let cells = sums
        .into_iter()
        .zip(coverage)
        .map(|(mut s, cov)| {
            if cov == 0 {
                return MapCell {
                    posterior: None,
                    argmax: None,
                    coverage: 0,
                };
            }
            for v in &mut s {
                *v /= cov as f64;
            }
            MapCell {
                argmax: Some(argmax(&s)),
                posterior: Some(s),
                coverage: cov,
            }
        })
        .collect();
    Ok(ClassMap {
        n_rows: grid.n_rows,
        n_cols: grid.n_cols,
        n_classes: k,
        cells,
    })
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub map: ClassMap,
    pub windows: usize,
    pub skipped: Vec<SkippedWindow>,
}

/// Builds the windows, classifies each with `classify` (in parallel) and fuses the results.
///
/// `classify` returns one posterior row per query sample of the window task.
pub fn sweep<F>(
    grid: &SlideGrid,
    spec: WindowSpec,
    support: &SupportBlock,
    features: &FeatureMatrix,
    classify: F,
) -> Result<SweepOutput>
where
    F: Fn(&FewShotTask) -> Result<Vec<Vec<f64>>> + Sync,
{
    grid.check_features(features.n_samples())?;
    let (windows, skipped) = build_windows(grid, spec, support)?;
    let posteriors = windows
        .par_iter()
        .map(|w| classify(&w.task))
        .collect::<Result<Vec<_>>>()?;
    let map = aggregate(&windows, &posteriors, grid)?;
    Ok(SweepOutput {
        map,
        windows: windows.len(),
        skipped,
    })
}

/// One-hot posteriors from hard labels.
pub fn one_hot_rows(labels: &[usize], k: usize) -> Vec<Vec<f64>> {
    labels
        .iter()
        .map(|&c| {
            let mut r = vec![0.0; k];
            r[c] = 1.0;
            r
        })
        .collect()
}

pub fn class_map_csv(map: &ClassMap) -> String {
    let mut out = String::from("row,col,argmax");
    for k in 0..map.n_classes {
        let _ = write!(out, ",p_{k}");
    }
    out.push_str(",coverage\n");
    for r in 0..map.n_rows {
        for c in 0..map.n_cols {
            let cell = map.get(r, c);
            match (&cell.posterior, cell.argmax) {
                (Some(p), Some(a)) => {
                    let _ = write!(out, "{r},{c},{a}");
                    for v in p {
                        let _ = write!(out, ",{v}");
                    }
                }
                _ => {
                    let _ = write!(out, "{r},{c},-1");
                    for _ in 0..map.n_classes {
                        out.push(',');
                    }
                }
            }
            let _ = writeln!(out, ",{}", cell.coverage);
        }
    }
    out
}

/// Parses the CSV written by [`class_map_csv`]. An argmax of `-1` marks an uncovered cell.
pub fn parse_class_map_csv(text: &str, path: &Path) -> Result<ClassMap> {
    let perr = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| perr(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[..3] != ["row", "col", "argmax"] || cols[cols.len() - 1] != "coverage" {
        return Err(perr(1, format!("unexpected header {header:?}")));
    }
    let k = cols.len() - 4;
    let mut entries = Vec::new();
    let (mut n_rows, mut n_cols) = (0, 0);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != k + 4 {
            return Err(perr(lineno, format!("expected {} fields, got {}", k + 4, f.len())));
        }
        let num = |s: &str| s.trim().parse::<usize>().map_err(|_| perr(lineno, format!("bad integer {s:?}")));
        let (r, c) = (num(f[0])?, num(f[1])?);
        let coverage = num(f[k + 3])?;
        let cell = if f[2].trim() == "-1" {
            MapCell {
                posterior: None,
                argmax: None,
                coverage,
            }
        } else {
            let a = num(f[2])?;
            let p = f[3..3 + k]
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|_| perr(lineno, format!("bad number {s:?}"))))
                .collect::<Result<Vec<_>>>()?;
            MapCell {
                posterior: Some(p),
                argmax: Some(a),
                coverage,
            }
        };
        n_rows = n_rows.max(r + 1);
        n_cols = n_cols.max(c + 1);
        entries.push((r, c, cell));
    }
    let empty = MapCell {
        posterior: None,
        argmax: None,
        coverage: 0,
    };
    let mut cells = vec![empty; n_rows * n_cols];
    for (r, c, cell) in entries {
        cells[r * n_cols + c] = cell;
    }
    Ok(ClassMap {
        n_rows,
        n_cols,
        n_classes: k,
        cells,
    })
}

/// One pixel per cell; uncovered cells are black.
pub fn class_map_image(map: &ClassMap) -> RgbImage {
    let pixels = map
        .cells
        .iter()
        .map(|c| match c.argmax {
            Some(a) => PALETTE[a % PALETTE.len()],
            None => UNLABELED_COLOR,
        })
        .collect();
    RgbImage {
        width: map.n_cols,
        height: map.n_rows,
        pixels,
    }
}

/// Writes the class-map CSV and its PPM rendering.
pub fn render_class_map(map: &ClassMap, csv_path: &Path, ppm_path: &Path) -> Result<()> {
    std::fs::write(csv_path, class_map_csv(map)).map_err(|e| Error::io(csv_path, e))?;
    crate::ppm::write_ppm(&class_map_image(map), ppm_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_grid(n_rows: usize, n_cols: usize) -> SlideGrid {
        let cells = (0..n_rows * n_cols)
            .map(|i| GridCell {
                row: i / n_cols,
                col: i % n_cols,
                feature_index: i,
                true_class: None,
            })
            .collect();
        SlideGrid::new(n_rows, n_cols, 2, cells).unwrap()
    }

    fn support() -> SupportBlock {
        SupportBlock {
            indices: vec![100, 101],
            labels: vec![0, 1],
            n_classes: 2,
        }
    }

    #[test]
    fn window_counts() {
        let g = full_grid(5, 5);
        let (w, _) = build_windows(&g, WindowSpec::new(3, 1).unwrap(), &support()).unwrap();
        assert_eq!(w.len(), 9);
        assert!(w.iter().all(|w| w.task.query.len() == 9));
        let (w, _) = build_windows(&g, WindowSpec::new(3, 2).unwrap(), &support()).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(w[3].anchor, (2, 2));
        let g = full_grid(2, 2);
        let (w, _) = build_windows(&g, WindowSpec::new(3, 1).unwrap(), &support()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].task.query.len(), 4);
        assert_eq!(w[0].task.support, vec![100, 101]);
    }

    #[test]
    fn clamped_anchor_reaches_the_edge() {
        assert_eq!(anchors(7, 3, 3), vec![0, 3, 4]);
        assert_eq!(anchors(6, 3, 3), vec![0, 3]);
        assert_eq!(anchors(3, 3, 1), vec![0]);
    }

    #[test]
    fn empty_windows_are_skipped() {
        let cells = vec![GridCell {
            row: 0,
            col: 0,
            feature_index: 0,
            true_class: None,
        }];
        let g = SlideGrid::new(4, 4, 2, cells).unwrap();
        let (w, skipped) = build_windows(&g, WindowSpec::new(2, 2).unwrap(), &support()).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(skipped.len(), 3);
    }

    #[test]
    fn stride_must_not_exceed_span() {
        assert!(WindowSpec::new(3, 4).is_err());
        assert!(WindowSpec::new(3, 0).is_err());
    }

    #[test]
    fn grid_rejects_duplicates_and_out_of_range() {
        let c = GridCell {
            row: 0,
            col: 0,
            feature_index: 0,
            true_class: None,
        };
        assert!(SlideGrid::new(1, 1, 2, vec![c, c]).is_err());
        let far = GridCell { row: 3, ..c };
        assert!(SlideGrid::new(2, 2, 2, vec![far]).is_err());
        let bad_class = GridCell {
            true_class: Some(2),
            ..c
        };
        assert!(SlideGrid::new(1, 1, 2, vec![bad_class]).is_err());
    }

    #[test]
    fn aggregate_means_and_ties() {
        let g = full_grid(1, 2);
        let (w, _) = build_windows(&g, WindowSpec::new(1, 1).unwrap(), &support()).unwrap();
        assert_eq!(w.len(), 2);
        let map = aggregate(&w, &[vec![vec![0.3, 0.7]], vec![vec![1.0, 0.0]]], &g).unwrap();
        assert_eq!(map.get(0, 0).posterior.as_deref(), Some(&[0.3, 0.7][..]));
        assert_eq!(map.get(0, 0).argmax, Some(1));

        // two windows over the same single cell
        let g = full_grid(1, 1);
        let (w1, _) = build_windows(&g, WindowSpec::new(1, 1).unwrap(), &support()).unwrap();
        let both = vec![w1[0].clone(), w1[0].clone()];
        let map = aggregate(&both, &[vec![vec![1.0, 0.0]], vec![vec![0.0, 1.0]]], &g).unwrap();
        assert_eq!(map.get(0, 0).posterior.as_deref(), Some(&[0.5, 0.5][..]));
        assert_eq!(map.get(0, 0).argmax, Some(0));
        assert_eq!(map.get(0, 0).coverage, 2);
    }

    #[test]
    fn uncovered_cell_is_unlabeled() {
        let cells = vec![GridCell {
            row: 0,
            col: 0,
            feature_index: 0,
            true_class: None,
        }];
        let g = SlideGrid::new(1, 2, 2, cells).unwrap();
        let (w, _) = build_windows(&g, WindowSpec::new(1, 1).unwrap(), &support()).unwrap();
        let map = aggregate(&w, &[vec![vec![1.0, 0.0]]], &g).unwrap();
        assert_eq!(map.get(0, 1).argmax, None);
        assert_eq!(map.get(0, 1).coverage, 0);
        let img = class_map_image(&map);
        assert_eq!(img.pixels, vec![PALETTE[0], UNLABELED_COLOR]);
    }

    #[test]
    fn aggregate_rejects_off_simplex_rows() {
        let g = full_grid(1, 1);
        let (w, _) = build_windows(&g, WindowSpec::new(1, 1).unwrap(), &support()).unwrap();
        assert!(aggregate(&w, &[vec![vec![0.6, 0.6]]], &g).is_err());
    }

    #[test]
    fn single_pixel_render_and_csv_round_trip() {
        let g = full_grid(1, 1);
        let (w, _) = build_windows(&g, WindowSpec::new(1, 1).unwrap(), &support()).unwrap();
        let map = aggregate(&w, &[vec![vec![1.0, 0.0]]], &g).unwrap();
        let img = class_map_image(&map);
        assert_eq!((img.width, img.height), (1, 1));
        assert_eq!(img.pixels[0], PALETTE[0]);
        let csv = class_map_csv(&map);
        assert_eq!(csv, "row,col,argmax,p_0,p_1,coverage\n0,0,0,1,0,1\n");
        let back = parse_class_map_csv(&csv, Path::new("m.csv")).unwrap();
        assert_eq!(back, map);
    }
}
