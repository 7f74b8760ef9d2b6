//! Grid and tabular I/O: ESRI ASCII grids, aligned raster stacks and
//! labelled training tables.
//!
//! Cells are indexed row-major with the north row first, so cell `n` sits at
//! row `n / cols`, column `n % cols`. Every other module relies on this.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const DEFAULT_NODATA: f64 = -9999.0;

/// A single raster layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    pub rows: usize,
    pub cols: usize,
    pub cell_size: f64,
    pub xll_corner: f64,
    pub yll_corner: f64,
    pub nodata_value: f64,
    pub values: Vec<f64>,
}

/// How values are rendered when a grid is written.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueFormat {
    /// Six significant digits.
    Float,
    /// Exact integers; used for class grids.
    Integer,
}

impl RasterGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Validation(format!(
                "grid must have at least one row and column, got {rows}x{cols}"
            )));
        }
        if values.len() != rows * cols {
            return Err(Error::Dimension {
                expected: rows * cols,
                found: values.len(),
            });
        }
        Ok(Self {
            rows,
            cols,
            cell_size: 1.0,
            xll_corner: 0.0,
            yll_corner: 0.0,
            nodata_value: DEFAULT_NODATA,
            values,
        })
    }

    /// A grid sharing `self`'s geometry but holding `values`.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                found: values.len(),
            });
        }
        Ok(Self {
            values,
            ..self.clone_header()
        })
    }

    /// A class grid (`Some(0)`, `Some(1)` or nodata) with `self`'s geometry.
    pub fn class_grid_like(&self, classes: &[Option<u8>]) -> Result<Self> {
        let nodata = self.nodata_value;
        self.with_values(
            classes
                .iter()
                .map(|c| c.map_or(nodata, f64::from))
                .collect(),
        )
    }

    fn clone_header(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            cell_size: self.cell_size,
            xll_corner: self.xll_corner,
            yll_corner: self.yll_corner,
            nodata_value: self.nodata_value,
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, row: usize, col: usize) -> usize {
        row * self.cols + col
    }

    #[inline]
    pub fn is_nodata(&self, n: usize) -> bool {
        let v = self.values[n];
        v.is_nan() || v == self.nodata_value
    }

    pub fn nodata_count(&self) -> usize {
        (0..self.len()).filter(|&n| self.is_nodata(n)).count()
    }

    pub fn same_shape(&self, other: &RasterGrid) -> bool {
        self.rows == other.rows && self.cols == other.cols && self.cell_size == other.cell_size
    }

    /// Class value at `n`, `None` for nodata.
    pub fn class_at(&self, n: usize) -> Option<u8> {
        if self.is_nodata(n) {
            None
        } else {
            Some(self.values[n] as u8)
        }
    }

    /// Parses the text of an ESRI ASCII grid.
    pub fn parse_ascii(text: &str) -> Result<Self> {
        let mut ncols = None;
        let mut nrows = None;
        let mut xll = None;
        let mut yll = None;
        let mut cellsize = None;
        let mut nodata = None;

        let mut rest = text;
        loop {
            let line_end = rest.find('\n').map_or(rest.len(), |i| i + 1);
            let line = &rest[..line_end];
            let mut tokens = line.split_whitespace();
            let Some(key) = tokens.next() else {
                if line_end == 0 {
                    break;
                }
                rest = &rest[line_end..];
                continue;
            };
            if key.parse::<f64>().is_ok() {
                break;
            }
            let value = tokens
                .next()
                .ok_or_else(|| Error::Parse(format!("header key `{key}` has no value")))?;
            let num = value
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("header `{key}` value `{value}` is not numeric")))?;
            match key.to_ascii_lowercase().as_str() {
                "ncols" => ncols = Some(num),
                "nrows" => nrows = Some(num),
                "xllcorner" | "xllcenter" => xll = Some(num),
                "yllcorner" | "yllcenter" => yll = Some(num),
                "cellsize" => cellsize = Some(num),
                "nodata_value" => nodata = Some(num),
                other => return Err(Error::Parse(format!("unknown header key `{other}`"))),
            }
            rest = &rest[line_end..];
        }

        let ncols = ncols.ok_or(Error::MissingKey("ncols"))?;
        let nrows = nrows.ok_or(Error::MissingKey("nrows"))?;
        let xll = xll.ok_or(Error::MissingKey("xllcorner"))?;
        let yll = yll.ok_or(Error::MissingKey("yllcorner"))?;
        let cellsize = cellsize.ok_or(Error::MissingKey("cellsize"))?;
        let nodata = nodata.ok_or(Error::MissingKey("NODATA_value"))?;
        if ncols < 1.0 || nrows < 1.0 || ncols.fract() != 0.0 || nrows.fract() != 0.0 {
            return Err(Error::Parse(format!(
                "grid dimensions must be positive integers, got ncols={ncols} nrows={nrows}"
            )));
        }
        let (rows, cols) = (nrows as usize, ncols as usize);

        let mut values = Vec::with_capacity(rows * cols);
        for token in rest.split_whitespace() {
            let v = token
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("cell value `{token}` is not numeric")))?;
            values.push(v);
        }
        let mut grid = RasterGrid::new(rows, cols, values)?;
        grid.cell_size = cellsize;
        grid.xll_corner = xll;
        grid.yll_corner = yll;
        grid.nodata_value = nodata;
        Ok(grid)
    }

    /// Renders the grid as ESRI ASCII text.
    pub fn to_ascii(&self, format: ValueFormat) -> String {
        let mut out = String::with_capacity(self.len() * 8 + 128);
        let _ = writeln!(out, "ncols {}", self.cols);
        let _ = writeln!(out, "nrows {}", self.rows);
        let _ = writeln!(out, "xllcorner {}", self.xll_corner);
        let _ = writeln!(out, "yllcorner {}", self.yll_corner);
        let _ = writeln!(out, "cellsize {}", self.cell_size);
        let _ = writeln!(out, "NODATA_value {}", self.nodata_value);
        for row in self.values.chunks(self.cols) {
            for (i, &v) in row.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                if v == self.nodata_value || v.is_nan() {
                    let _ = write!(out, "{}", self.nodata_value);
                } else {
                    match format {
                        ValueFormat::Integer => {
                            let _ = write!(out, "{}", v.round() as i64);
                        }
                        ValueFormat::Float => out.push_str(&format_sig6(v)),
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Six-significant-digit rendering without gratuitous trailing zeros.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let exp = v.abs().log10().floor() as i32;
    let s = if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        format!("{v:.decimals$}")
    } else {
        return format!("{v:.5e}");
    };
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn read_ascii_grid(path: impl AsRef<Path>) -> Result<RasterGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RasterGrid::parse_ascii(&text)
}

pub fn write_ascii_grid(grid: &RasterGrid, path: impl AsRef<Path>, format: ValueFormat) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(grid.to_ascii(format).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

/// Writes a {0,1,nodata} grid with exact integer values.
pub fn write_class_grid(grid: &RasterGrid, path: impl AsRef<Path>) -> Result<()> {
    for n in 0..grid.len() {
        if !grid.is_nodata(n) && grid.values[n] != 0.0 && grid.values[n] != 1.0 {
            return Err(Error::Validation(format!(
                "class grid holds {} at cell {n}",
                grid.values[n]
            )));
        }
    }
    write_ascii_grid(grid, path, ValueFormat::Integer)
}

/// Elevation, partially observed feature bands and optional truth, all aligned.
#[derive(Debug, Clone)]
pub struct RasterStack {
    pub elevation: RasterGrid,
    pub features: Vec<RasterGrid>,
    pub truth: Option<RasterGrid>,
    observed: Vec<bool>,
    observed_cells: Vec<u32>,
    observed_features: Vec<f64>,
}

impl RasterStack {
    /// Number of cells.
    pub fn len(&self) -> usize {
        self.elevation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elevation.is_empty()
    }

    /// Feature dimension.
    pub fn dim(&self) -> usize {
        self.features.len()
    }

    pub fn rows(&self) -> usize {
        self.elevation.rows
    }

    pub fn cols(&self) -> usize {
        self.elevation.cols
    }

    pub fn is_observed(&self, n: usize) -> bool {
        self.observed[n]
    }

    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    /// Indices of observed cells in ascending order.
    pub fn observed_cells(&self) -> &[u32] {
        &self.observed_cells
    }

    /// Feature vectors of observed cells, row-major `|O| x m`, aligned with
    /// [`observed_cells`](Self::observed_cells).
    pub fn observed_features(&self) -> &[f64] {
        &self.observed_features
    }

    /// Feature vector of the `i`-th observed cell.
    pub fn observed_feature(&self, i: usize) -> &[f64] {
        let m = self.dim();
        &self.observed_features[i * m..(i + 1) * m]
    }

    pub fn truth_class(&self, n: usize) -> Option<u8> {
        self.truth.as_ref().and_then(|t| t.class_at(n))
    }

    /// Further restricts observation to cells where `mask` is non-zero.
    pub fn restrict_observed(&mut self, mask: &RasterGrid) -> Result<()> {
        if !mask.same_shape(&self.elevation) {
            return Err(Error::Alignment("mask grid does not match elevation".into()));
        }
        for n in 0..self.len() {
            if mask.is_nodata(n) || mask.values[n] == 0.0 {
                self.observed[n] = false;
            }
        }
        self.rebuild_observed();
        Ok(())
    }

    fn rebuild_observed(&mut self) {
        let m = self.dim();
        self.observed_cells.clear();
        self.observed_features.clear();
        for n in 0..self.len() {
            if self.observed[n] {
                self.observed_cells.push(n as u32);
                self.observed_features
                    .extend(self.features.iter().map(|band| band.values[n]));
            }
        }
        debug_assert_eq!(self.observed_features.len(), self.observed_cells.len() * m);
    }
}

/// Aligns elevation, feature bands and optional truth into a [`RasterStack`].
/// A cell is observed iff every band has data there.
pub fn assemble_stack(
    elevation: RasterGrid,
    features: Vec<RasterGrid>,
    truth: Option<RasterGrid>,
) -> Result<RasterStack> {
    if features.is_empty() {
        return Err(Error::Validation("at least one feature band is required".into()));
    }
    for (b, band) in features.iter().enumerate() {
        if !band.same_shape(&elevation) {
            return Err(Error::Alignment(format!(
                "feature band {b} is {}x{} (cell {}), elevation is {}x{} (cell {})",
                band.rows, band.cols, band.cell_size, elevation.rows, elevation.cols, elevation.cell_size
            )));
        }
    }
    if let Some(t) = &truth {
        if !t.same_shape(&elevation) {
            return Err(Error::Alignment("truth grid does not match elevation".into()));
        }
        for n in 0..t.len() {
            if !t.is_nodata(n) && t.values[n] != 0.0 && t.values[n] != 1.0 {
                return Err(Error::Validation(format!(
                    "truth grid holds {} at cell {n}; expected 0, 1 or nodata",
                    t.values[n]
                )));
            }
        }
    }
    if let Some(n) = (0..elevation.len()).find(|&n| elevation.is_nodata(n)) {
        return Err(Error::Validation(format!("elevation has nodata at cell {n}")));
    }
    if let Some(n) = elevation.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("elevation is not finite at cell {n}")));
    }

    let observed = (0..elevation.len())
        .map(|n| features.iter().all(|b| !b.is_nodata(n) && b.values[n].is_finite()))
        .collect();
    let mut stack = RasterStack {
        elevation,
        features,
        truth,
        observed,
        observed_cells: Vec::new(),
        observed_features: Vec::new(),
    };
    stack.rebuild_observed();
    Ok(stack)
}

/// Labelled feature vectors drawn from outside the raster.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<u8>,
}

impl TrainingSet {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Validation("training features need m >= 1".into()));
        }
        if features.len() != labels.len() * dim {
            return Err(Error::Dimension {
                expected: labels.len() * dim,
                found: features.len(),
            });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "training row {} has a non-finite feature",
                i / dim
            )));
        }
        if let Some(row) = labels.iter().position(|&l| l > 1) {
            return Err(Error::Label {
                row,
                label: labels[row].to_string(),
            });
        }
        for c in 0..2u8 {
            if !labels.contains(&c) {
                return Err(Error::Validation(format!("training set has no class {c} rows")));
            }
        }
        Ok(Self {
            dim,
            features,
            labels,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// Feature rows of one class, row-major.
    pub fn class_features(&self, class: u8) -> Vec<f64> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .flat_map(|(i, _)| self.row(i).iter().copied())
            .collect()
    }

    pub fn class_count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }
}

/// Reads `m` feature columns followed by a 0/1 label column.
pub fn read_training_csv(path: impl AsRef<Path>, m: usize, has_header: bool) -> Result<TrainingSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_training_csv(&text, m, has_header)
}

pub fn parse_training_csv(text: &str, m: usize, has_header: bool) -> Result<TrainingSet> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse(format!("csv row {row}: {e}")))?;
        if record.len() != m + 1 {
            return Err(Error::Schema {
                row,
                expected: m + 1,
                found: record.len(),
            });
        }
        for field in record.iter().take(m) {
            let v = field
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("row {row}: feature `{field}` is not numeric")))?;
            features.push(v);
        }
        let label = &record[m];
        match label {
            "0" | "0.0" => labels.push(0),
            "1" | "1.0" => labels.push(1),
            other => {
                return Err(Error::Label {
                    row,
                    label: other.to_string(),
                })
            }
        }
    }
    TrainingSet::new(m, features, labels)
}

pub fn write_training_csv(train: &TrainingSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..train.len() {
        for v in train.row(i) {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{}", train.labels[i]);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const SMALL: &str = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2\n3 4\n";

    #[test]
    fn parses_two_by_two() {
        let g = RasterGrid::parse_ascii(SMALL).unwrap();
        assert_eq!((g.rows, g.cols), (2, 2));
        assert_eq!(g.values, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn value_count_mismatch_is_dimension_error() {
        let text = "ncols 3\nnrows 3\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 2 3 4 5 6 7 8\n";
        assert!(matches!(
            RasterGrid::parse_ascii(text),
            Err(Error::Dimension { expected: 9, found: 8 })
        ));
    }

    #[test]
    fn missing_key_is_named() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\nNODATA_value -9999\n1 2 3 4\n";
        match RasterGrid::parse_ascii(text) {
            Err(Error::MissingKey(k)) => assert_eq!(k, "cellsize"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nodata_cell_flagged() {
        let text = "ncols 2\nnrows 2\nxllcorner 0\nyllcorner 0\ncellsize 1\nNODATA_value -9999\n1 -9999\n3 4\n";
        let g = RasterGrid::parse_ascii(text).unwrap();
        assert!(g.is_nodata(g.index(0, 1)));
        assert_eq!(g.nodata_count(), 1);
    }

    #[test]
    fn class_grid_round_trip_with_nodata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.asc");
        let base = RasterGrid::new(2, 2, vec![0.0; 4]).unwrap();
        let g = base
            .class_grid_like(&[Some(0), Some(1), None, Some(1)])
            .unwrap();
        write_class_grid(&g, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("0 1\n-9999 1\n"));
        let back = read_ascii_grid(&path).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn all_zero_class_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.asc");
        let g = RasterGrid::new(2, 3, vec![0.0; 6]).unwrap();
        write_class_grid(&g, &path).unwrap();
        let back = read_ascii_grid(&path).unwrap();
        assert!(back.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(1.0), "1");
        assert_eq!(format_sig6(123.456789), "123.457");
        assert_eq!(format_sig6(-0.5), "-0.5");
        assert_eq!(format_sig6(1.0e-7), "1.00000e-7");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
    }

    fn grid(rows: usize, cols: usize, values: Vec<f64>) -> RasterGrid {
        RasterGrid::new(rows, cols, values).unwrap()
    }

    #[test]
    fn mask_false_where_any_band_missing() {
        let elev = grid(1, 3, vec![1.0, 2.0, 3.0]);
        let b1 = grid(1, 3, vec![0.1, 0.2, 0.3]);
        let b2 = grid(1, 3, vec![0.1, DEFAULT_NODATA, 0.3]);
        let b3 = grid(1, 3, vec![0.1, 0.2, 0.3]);
        let s = assemble_stack(elev, vec![b1, b2, b3], None).unwrap();
        assert_eq!(s.observed_mask(), &[true, false, true]);
        assert_eq!(s.observed_cells(), &[0, 2]);
        assert_eq!(s.observed_feature(1), &[0.3, 0.3, 0.3]);
    }

    #[test]
    fn zero_bands_rejected() {
        let elev = grid(1, 2, vec![1.0, 2.0]);
        assert!(matches!(assemble_stack(elev, vec![], None), Err(Error::Validation(_))));
    }

    #[test]
    fn fully_observed_stack() {
        let elev = grid(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let b = grid(2, 2, vec![0.0; 4]);
        let s = assemble_stack(elev, vec![b], None).unwrap();
        assert_eq!(s.observed_cells().len(), s.len());
    }

    #[test]
    fn misaligned_band_rejected() {
        let elev = grid(2, 2, vec![1.0; 4]);
        let b = grid(1, 4, vec![0.0; 4]);
        assert!(matches!(assemble_stack(elev, vec![b], None), Err(Error::Alignment(_))));
    }

    #[test]
    fn elevation_nodata_rejected() {
        let elev = grid(1, 2, vec![1.0, DEFAULT_NODATA]);
        let b = grid(1, 2, vec![0.0; 2]);
        assert!(matches!(assemble_stack(elev, vec![b], None), Err(Error::Validation(_))));
    }

    #[test]
    fn training_csv_row() {
        let t = parse_training_csv("0.4,0.1,0.9,1\n0.2,0.2,0.2,0\n", 3, false).unwrap();
        assert_eq!(t.len(), 2);
        assert_eq!(t.labels()[0], 1);
        assert_eq!(t.row(0), &[0.4, 0.1, 0.9]);
    }

    #[test]
    fn training_csv_bad_label() {
        match parse_training_csv("0.1,0\n0.2,1\n0.3,2\n", 1, false) {
            Err(Error::Label { row, label }) => {
                assert_eq!(row, 2);
                assert_eq!(label, "2");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn training_csv_wrong_width() {
        assert!(matches!(
            parse_training_csv("a,b,label\n0.1,0.2,0\n", 1, true),
            Err(Error::Schema { row: 0, expected: 2, found: 3 })
        ));
    }

    #[test]
    fn training_csv_ten_thousand_rows() {
        let mut text = String::from("r,g,b,label\n");
        for i in 0..10_000 {
            let _ = writeln!(text, "{},{},{},{}", i as f64 * 0.1, 1.0, 2.0, i % 2);
        }
        let t = parse_training_csv(&text, 3, true).unwrap();
        assert_eq!(t.len(), 10_000);
        assert_eq!(t.class_count(0), 5_000);
        assert_eq!(t.class_count(1), 5_000);
    }

    proptest! {
        #[test]
        fn ascii_round_trip(rows in 1usize..6, cols in 1usize..6, seed in proptest::collection::vec((-99_999i64..99_999, 0u8..8), 36)) {
            // values exactly representable in six significant digits
            let values: Vec<f64> = (0..rows * cols)
                .map(|i| {
                    let (v, kind) = seed[i];
                    if kind == 0 { DEFAULT_NODATA } else { v as f64 / 10f64.powi(kind as i32 % 3) }
                })
                .collect();
            let g = grid(rows, cols, values);
            let back = RasterGrid::parse_ascii(&g.to_ascii(ValueFormat::Float)).unwrap();
            prop_assert_eq!(back.values.len(), g.values.len());
            for (a, b) in back.values.iter().zip(&g.values) {
                prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
            }
            prop_assert_eq!(back.nodata_count(), g.nodata_count());
        }

        #[test]
        fn mask_cardinality_matches_finite_cells(bits in proptest::collection::vec(0u8..4, 12)) {
            let elev = grid(3, 4, vec![0.0; 12]);
            let b1 = grid(3, 4, bits.iter().map(|&b| if b == 1 { DEFAULT_NODATA } else { 1.0 }).collect());
            let b2 = grid(3, 4, bits.iter().map(|&b| if b == 2 { f64::NAN } else { 1.0 }).collect());
            let s = assemble_stack(elev, vec![b1, b2], None).unwrap();
            let expected = bits.iter().filter(|&&b| b != 1 && b != 2).count();
            prop_assert_eq!(s.observed_cells().len(), expected);
        }
    }
}
