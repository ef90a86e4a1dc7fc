//! Gridded covariates and presence records.
//!
//! The study area is discretized into `m` cells. Each cell carries a
//! quadrature weight `w`, habitat features `x`, optional sampling-bias
//! features `z`, optional accessibility features `v` and a presence count.
//! The pseudo-response `zeta_i = count_i / w_i` turns the point-process
//! score into a weighted-regression score.

use crate::error::{Result, SdmError};
use std::collections::HashSet;
use std::path::Path;

/// One grid cell with its quadrature weight and feature vectors.
#[derive(Debug, Clone)]
pub struct Cell {
    pub id: u64,
    /// Longitude, metadata only.
    pub lon: Option<f64>,
    /// Latitude, metadata only.
    pub lat: Option<f64>,
    /// Quadrature weight (area mass of the cell), strictly positive.
    pub w: f64,
    /// Habitat features, length `p`.
    pub x: Vec<f64>,
    /// Sampling-bias features, length `q` (may be empty).
    pub z: Vec<f64>,
    /// Accessibility features, length `r` (may be empty).
    pub v: Vec<f64>,
    pub presence_count: u64,
}

/// Affine feature transform applied column-wise: `x' = (x - mean) / sd`.
///
/// With `centered == false` the means are all zero (scale-only), which is
/// what model families without an absorbing intercept require.
#[derive(Debug, Clone)]
pub struct Standardize {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardize {
    /// Column means and standard deviations of the habitat features.
    /// Constant columns get sd 1 so the transform stays invertible.
    pub fn fit(rows: &[&[f64]], centered: bool) -> Standardize {
        let p = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut means = vec![0.0; p];
        if centered {
            for r in rows {
                for (m, &x) in means.iter_mut().zip(r.iter()) {
                    *m += x / n;
                }
            }
        }
        let mut sds = vec![0.0; p];
        for r in rows {
            for j in 0..p {
                let d = r[j] - means[j];
                sds[j] += d * d / n;
            }
        }
        for s in sds.iter_mut() {
            *s = s.sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Standardize { means, sds }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.means.iter().zip(self.sds.iter()))
            .map(|(&x, (&m, &s))| (x - m) / s)
            .collect()
    }

    /// Map coefficients fitted on the standardized scale back to the
    /// original scale so the linear predictor is unchanged:
    /// `t0 + t1' ((x - m) / s) = (t0 - sum t1_j m_j / s_j) + (t1_j / s_j)' x`.
    pub fn destandardize_coefs(&self, intercept: f64, slopes: &[f64]) -> (f64, Vec<f64>) {
        let raw: Vec<f64> = slopes
            .iter()
            .zip(self.sds.iter())
            .map(|(&t, &s)| t / s)
            .collect();
        let shift: f64 = raw.iter().zip(self.means.iter()).map(|(&t, &m)| t * m).sum();
        (intercept - shift, raw)
    }
}

/// Names of the three feature blocks of a grid.
#[derive(Debug, Clone, Default)]
pub struct FeatureNames {
    pub x: Vec<String>,
    pub z: Vec<String>,
    pub v: Vec<String>,
}

/// The discretized study area.
#[derive(Debug, Clone)]
pub struct CovariateGrid {
    pub cells: Vec<Cell>,
    /// Total area `|A|`; equals the sum of the quadrature weights.
    pub area: f64,
    pub feature_names: FeatureNames,
    /// Transform applied to the stored `x` features at load time, if any.
    pub x_transform: Option<Standardize>,
}

impl CovariateGrid {
    /// Build in-memory and validate invariants.
    pub fn new(cells: Vec<Cell>, area: f64, feature_names: FeatureNames) -> Result<CovariateGrid> {
        let grid = CovariateGrid {
            cells,
            area,
            feature_names,
            x_transform: None,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn m(&self) -> usize {
        self.cells.len()
    }

    /// Habitat feature dimension `p`.
    pub fn p(&self) -> usize {
        self.cells.first().map_or(0, |c| c.x.len())
    }

    /// Bias feature dimension `q`.
    pub fn q(&self) -> usize {
        self.cells.first().map_or(0, |c| c.z.len())
    }

    /// Accessibility feature dimension `r`.
    pub fn r(&self) -> usize {
        self.cells.first().map_or(0, |c| c.v.len())
    }

    /// Total presence points `n`.
    pub fn n_presence(&self) -> u64 {
        self.cells.iter().map(|c| c.presence_count).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cells.is_empty() {
            return Err(SdmError::Validation("grid has no cells".into()));
        }
        let (p, q, r) = (self.p(), self.q(), self.r());
        let mut wsum = 0.0;
        for (i, c) in self.cells.iter().enumerate() {
            if !(c.w > 0.0) || !c.w.is_finite() {
                return Err(SdmError::BadWeight {
                    row: i + 1,
                    value: c.w,
                });
            }
            if c.x.len() != p || c.z.len() != q || c.v.len() != r {
                return Err(SdmError::Validation(format!(
                    "cell {} has inconsistent feature dimensions",
                    c.id
                )));
            }
            for (name, vec) in [("x", &c.x), ("z", &c.z), ("v", &c.v)] {
                if vec.iter().any(|t| !t.is_finite()) {
                    return Err(SdmError::NonFinite {
                        row: i + 1,
                        column: name.into(),
                    });
                }
            }
            wsum += c.w;
        }
        if !self.area.is_finite() || self.area <= 0.0 {
            return Err(SdmError::Validation(format!("bad area {}", self.area)));
        }
        if ((wsum - self.area) / self.area).abs() > 1e-9 {
            return Err(SdmError::Validation(format!(
                "quadrature weights sum to {wsum} but area is {}",
                self.area
            )));
        }
        Ok(())
    }

    /// Standardize the stored habitat features in place, recording the
    /// transform so coefficients can be reported on the original scale.
    pub fn standardize_x(&mut self) {
        let rows: Vec<&[f64]> = self.cells.iter().map(|c| c.x.as_slice()).collect();
        let tr = Standardize::fit(&rows, true);
        for c in self.cells.iter_mut() {
            c.x = tr.apply(&c.x);
        }
        self.x_transform = Some(tr);
    }
}

/// The presence dataset: cells holding at least one point, and the total
/// point count `n`.
#[derive(Debug, Clone)]
pub struct PresenceSet {
    /// Indices into `grid.cells` with `presence_count >= 1`.
    pub indices: Vec<usize>,
    /// Total number of presence points (counts multiplicity).
    pub n: u64,
}

impl PresenceSet {
    pub fn from_grid(grid: &CovariateGrid) -> PresenceSet {
        let indices: Vec<usize> = grid
            .cells
            .iter()
            .enumerate()
            .filter(|(_, c)| c.presence_count >= 1)
            .map(|(i, _)| i)
            .collect();
        PresenceSet {
            indices,
            n: grid.n_presence(),
        }
    }
}

/// Pseudo-responses `zeta_i = presence_count_i / w_i`.
///
/// Multiple points in one cell contribute their full count to the
/// numerator, matching the product over points in the process density.
pub fn pseudo_responses(grid: &CovariateGrid) -> Vec<f64> {
    grid.cells
        .iter()
        .map(|c| c.presence_count as f64 / c.w)
        .collect()
}

/// Column mapping for [`load_grid`].
#[derive(Debug, Clone)]
pub struct GridSchema {
    pub id: String,
    pub presence: String,
    /// Name of the per-cell weight column. Absent from the file means
    /// uniform weights `|A| / m` derived from `area`.
    pub weight: String,
    pub lon: String,
    pub lat: String,
    /// Total area, required when the weight column is absent.
    pub area: Option<f64>,
    /// Columns starting with this prefix become bias features `z`.
    pub bias_prefix: String,
    /// Columns starting with this prefix become accessibility features `v`.
    pub access_prefix: String,
    /// Explicit bias columns; overrides the prefix rule when non-empty.
    pub bias_cols: Vec<String>,
    /// Explicit accessibility columns; overrides the prefix rule when non-empty.
    pub access_cols: Vec<String>,
    /// Standardize habitat features at load time (mean 0, sd 1) and record
    /// the transform on the grid.
    pub standardize: bool,
}

impl Default for GridSchema {
    fn default() -> Self {
        GridSchema {
            id: "id".into(),
            presence: "presence".into(),
            weight: "w".into(),
            lon: "lon".into(),
            lat: "lat".into(),
            area: None,
            bias_prefix: "z_".into(),
            access_prefix: "v_".into(),
            bias_cols: Vec::new(),
            access_cols: Vec::new(),
            standardize: false,
        }
    }
}

/// Load a covariate grid from a headered CSV file.
///
/// Required columns: `id`, `presence`. Optional: `w`, `lon`, `lat`.
/// Remaining numeric columns are habitat features, except those mapped to
/// bias/accessibility blocks by prefix or explicit schema.
pub fn load_grid<P: AsRef<Path>>(path: P, schema: &GridSchema) -> Result<CovariateGrid> {
    let mut reader = csv::Reader::from_path(path.as_ref())?;
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_owned).collect();

    let col = |name: &str| headers.iter().position(|h| h == name);
    let id_col = col(&schema.id).ok_or_else(|| SdmError::MissingColumn {
        column: schema.id.clone(),
    })?;
    let pres_col = col(&schema.presence).ok_or_else(|| SdmError::MissingColumn {
        column: schema.presence.clone(),
    })?;
    let w_col = col(&schema.weight);
    let lon_col = col(&schema.lon);
    let lat_col = col(&schema.lat);

    if w_col.is_none() && schema.area.is_none() {
        return Err(SdmError::Validation(
            "no weight column and no area given; cannot form quadrature weights".into(),
        ));
    }

    let is_bias = |h: &str| {
        if !schema.bias_cols.is_empty() {
            schema.bias_cols.iter().any(|c| c == h)
        } else {
            h.starts_with(&schema.bias_prefix)
        }
    };
    let is_access = |h: &str| {
        if !schema.access_cols.is_empty() {
            schema.access_cols.iter().any(|c| c == h)
        } else {
            h.starts_with(&schema.access_prefix)
        }
    };

    let mut x_cols = Vec::new();
    let mut z_cols = Vec::new();
    let mut v_cols = Vec::new();
    for (j, h) in headers.iter().enumerate() {
        let reserved = j == id_col
            || j == pres_col
            || w_col == Some(j)
            || lon_col == Some(j)
            || lat_col == Some(j);
        if reserved {
            continue;
        }
        if is_bias(h) {
            z_cols.push(j);
        } else if is_access(h) {
            v_cols.push(j);
        } else {
            x_cols.push(j);
        }
    }
    if x_cols.is_empty() && z_cols.is_empty() && v_cols.is_empty() {
        return Err(SdmError::MissingColumn {
            column: "<at least one feature>".into(),
        });
    }

    let parse = |row: usize, column: usize, raw: &str| -> Result<f64> {
        let v: f64 = raw.trim().parse().map_err(|_| SdmError::NonFinite {
            row,
            column: headers[column].clone(),
        })?;
        if !v.is_finite() {
            return Err(SdmError::NonFinite {
                row,
                column: headers[column].clone(),
            });
        }
        Ok(v)
    };

    let mut cells = Vec::new();
    let mut seen = HashSet::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1; // 1-based data row for messages
        let record = record?;
        let id = parse(row, id_col, &record[id_col])? as u64;
        if !seen.insert(id) {
            return Err(SdmError::DuplicateId { row, id });
        }
        let presence = parse(row, pres_col, &record[pres_col])?;
        if presence < 0.0 || presence.fract() != 0.0 {
            return Err(SdmError::Validation(format!(
                "row {row}: presence must be a nonnegative integer, got {presence}"
            )));
        }
        let w = match w_col {
            Some(c) => {
                let w = parse(row, c, &record[c])?;
                if w <= 0.0 {
                    return Err(SdmError::BadWeight { row, value: w });
                }
                w
            }
            None => f64::NAN, // filled in uniformly below
        };
        let grab = |cols: &[usize]| -> Result<Vec<f64>> {
            cols.iter().map(|&c| parse(row, c, &record[c])).collect()
        };
        cells.push(Cell {
            id,
            lon: lon_col.map(|c| parse(row, c, &record[c])).transpose()?,
            lat: lat_col.map(|c| parse(row, c, &record[c])).transpose()?,
            w,
            x: grab(&x_cols)?,
            z: grab(&z_cols)?,
            v: grab(&v_cols)?,
            presence_count: presence as u64,
        });
    }

    let area = match w_col {
        Some(_) => cells.iter().map(|c| c.w).sum(),
        None => {
            let area = schema.area.expect("checked above");
            let w = area / cells.len() as f64;
            for c in cells.iter_mut() {
                c.w = w;
            }
            area
        }
    };

    let names = FeatureNames {
        x: x_cols.iter().map(|&j| headers[j].clone()).collect(),
        z: z_cols.iter().map(|&j| headers[j].clone()).collect(),
        v: v_cols.iter().map(|&j| headers[j].clone()).collect(),
    };
    let mut grid = CovariateGrid::new(cells, area, names)?;
    if schema.standardize {
        grid.standardize_x();
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn uniform_weights_from_area() {
        let f = write_csv("id,presence,temp\n0,1,1.0\n1,0,2.0\n2,0,3.0\n3,0,4.0\n");
        let schema = GridSchema {
            area: Some(100.0),
            ..GridSchema::default()
        };
        let grid = load_grid(f.path(), &schema).unwrap();
        assert_eq!(grid.m(), 4);
        for c in &grid.cells {
            assert_eq!(c.w, 25.0);
        }
        assert_eq!(grid.area, 100.0);
        assert_eq!(grid.feature_names.x, vec!["temp"]);
    }

    #[test]
    fn negative_weight_names_row() {
        let f = write_csv("id,presence,w,temp\n0,1,2.0,1.0\n1,0,-1.0,2.0\n");
        let err = load_grid(f.path(), &GridSchema::default()).unwrap_err();
        match err {
            SdmError::BadWeight { row, value } => {
                assert_eq!(row, 2);
                assert_eq!(value, -1.0);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn missing_presence_column() {
        let f = write_csv("id,temp\n0,1.0\n");
        let err = load_grid(f.path(), &GridSchema::default()).unwrap_err();
        assert!(matches!(err, SdmError::MissingColumn { column } if column == "presence"));
    }

    #[test]
    fn non_finite_value_named() {
        let f = write_csv("id,presence,w,temp\n0,1,2.0,1.0\n1,0,1.0,nan\n");
        let err = load_grid(f.path(), &GridSchema::default()).unwrap_err();
        match err {
            SdmError::NonFinite { row, column } => {
                assert_eq!(row, 2);
                assert_eq!(column, "temp");
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn duplicate_id_rejected() {
        let f = write_csv("id,presence,w,temp\n7,1,2.0,1.0\n7,0,1.0,2.0\n");
        let err = load_grid(f.path(), &GridSchema::default()).unwrap_err();
        assert!(matches!(err, SdmError::DuplicateId { row: 2, id: 7 }));
    }

    #[test]
    fn prefix_split_into_blocks() {
        let f = write_csv("id,presence,w,temp,z_road,v_town\n0,1,1.0,1.0,0.5,0.2\n1,0,1.0,2.0,0.6,0.1\n");
        let grid = load_grid(f.path(), &GridSchema::default()).unwrap();
        assert_eq!(grid.p(), 1);
        assert_eq!(grid.q(), 1);
        assert_eq!(grid.r(), 1);
        assert_eq!(grid.feature_names.z, vec!["z_road"]);
        assert_eq!(grid.feature_names.v, vec!["v_town"]);
    }

    #[test]
    fn large_synthetic_grid_dimensions() {
        // Mirrors the shape of the published sloth dataset: m=5171 cells,
        // 8 features, 116 presence cells.
        let mut s = String::from("id,presence,x1,x2,x3,x4,x5,x6,x7,x8\n");
        for i in 0..5171 {
            let pres = if i < 116 { 1 } else { 0 };
            s.push_str(&format!(
                "{i},{pres},{},{},{},{},{},{},{},{}\n",
                (i % 7) as f64,
                (i % 11) as f64 * 0.5,
                (i % 3) as f64,
                i as f64 * 1e-3,
                (i % 13) as f64,
                (i % 5) as f64,
                (i % 17) as f64 * 0.1,
                (i % 2) as f64
            ));
        }
        let f = write_csv(&s);
        let schema = GridSchema {
            area: Some(5171.0),
            ..GridSchema::default()
        };
        let grid = load_grid(f.path(), &schema).unwrap();
        assert_eq!(grid.m(), 5171);
        assert_eq!(grid.p(), 8);
        assert_eq!(grid.n_presence(), 116);
        let pres = PresenceSet::from_grid(&grid);
        assert_eq!(pres.indices.len(), 116);
    }

    #[test]
    fn pseudo_response_values() {
        let f = write_csv("id,presence,w,temp\n0,1,25.0,1.0\n1,0,25.0,2.0\n2,3,0.5,3.0\n");
        let grid = load_grid(f.path(), &GridSchema::default()).unwrap();
        let zeta = pseudo_responses(&grid);
        assert_eq!(zeta[0], 0.04);
        assert_eq!(zeta[1], 0.0);
        assert_eq!(zeta[2], 6.0);
    }

    #[test]
    fn weighted_pseudo_response_telescopes_to_count() {
        let f = write_csv("id,presence,w,temp\n0,2,0.7,1.0\n1,0,1.3,2.0\n2,5,2.25,3.0\n");
        let grid = load_grid(f.path(), &GridSchema::default()).unwrap();
        let zeta = pseudo_responses(&grid);
        let total: f64 = grid
            .cells
            .iter()
            .zip(&zeta)
            .map(|(c, &z)| c.w * z)
            .sum();
        assert!((total - 7.0).abs() < 1e-12);
    }

    #[test]
    fn standardize_roundtrips_linear_predictor() {
        let f = write_csv(
            "id,presence,w,a,b\n0,1,1.0,4.0,100.0\n1,0,1.0,6.0,150.0\n2,0,1.0,5.0,130.0\n3,1,1.0,7.0,90.0\n",
        );
        let raw = load_grid(f.path(), &GridSchema::default()).unwrap();
        let mut std = raw.clone();
        std.standardize_x();
        let tr = std.x_transform.as_ref().unwrap();
        let (t0, t1) = (0.3_f64, vec![0.8_f64, -1.1]);
        let (r0, r1) = tr.destandardize_coefs(t0, &t1);
        for (c_raw, c_std) in raw.cells.iter().zip(std.cells.iter()) {
            let eta_std = t0 + t1.iter().zip(&c_std.x).map(|(a, b)| a * b).sum::<f64>();
            let eta_raw = r0 + r1.iter().zip(&c_raw.x).map(|(a, b)| a * b).sum::<f64>();
            assert!((eta_std - eta_raw).abs() < 1e-10);
        }
    }
}
