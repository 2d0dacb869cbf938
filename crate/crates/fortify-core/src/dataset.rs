//! Observed-data model: column roles, CSV ingestion, validation, and
//! bootstrap resampling.
//!
//! An [`ObservedData`] is the sample O = (Y, A, Z, W, X): a real outcome, a
//! binary treatment, K candidate treatment confounding proxies, outcome
//! confounding proxies, and baseline covariates. It is immutable after
//! construction and safe to share across worker threads; resampling takes an
//! explicit seed so replicates can run in parallel deterministically.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("role column {0:?} not found in file header")]
    MissingColumn(String),
    #[error("role lists overlap on column {0:?}")]
    OverlappingRoles(String),
    #[error("cannot parse {value:?} in column {column:?} at data row {row}")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },
    #[error("missing value in column {column:?} at data row {row}")]
    Missing { row: usize, column: String },
    #[error("treatment column must be 0/1 but holds {value} at data row {row}")]
    TreatmentDomain { row: usize, value: f64 },
    #[error("treatment column holds a single arm only; both 0 and 1 must occur")]
    SingleArm,
    #[error("dataset has no rows")]
    Empty,
    #[error("at least one treatment confounding proxy column is required")]
    NoProxies,
    #[error("column {column:?} length {found} differs from {expected}")]
    LengthMismatch {
        column: String,
        found: usize,
        expected: usize,
    },
    #[error("keep set is empty")]
    EmptyKeep,
    #[error("proxy index {index} out of range 1..={k}")]
    IndexOutOfRange { index: usize, k: usize },
    #[error("invalid proxy bound: gamma={gamma} must satisfy 1 <= gamma <= k={k}")]
    GammaOutOfRange { gamma: usize, k: usize },
}

/// Assignment of file columns to the five roles.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ColumnRoles {
    pub outcome: String,
    pub treatment: String,
    pub proxies_z: Vec<String>,
    #[serde(default)]
    pub proxies_w: Vec<String>,
    #[serde(default)]
    pub covariates_x: Vec<String>,
}

impl ColumnRoles {
    /// Checks the five role lists are pairwise disjoint.
    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        for name in self.all_columns() {
            if !seen.insert(name.clone()) {
                return Err(DatasetError::OverlappingRoles(name));
            }
        }
        if self.proxies_z.is_empty() {
            return Err(DatasetError::NoProxies);
        }
        Ok(())
    }

    fn all_columns(&self) -> impl Iterator<Item = String> + '_ {
        std::iter::once(self.outcome.clone())
            .chain(std::iter::once(self.treatment.clone()))
            .chain(self.proxies_z.iter().cloned())
            .chain(self.proxies_w.iter().cloned())
            .chain(self.covariates_x.iter().cloned())
    }
}

/// Assumed lower bound gamma on the number of valid proxies among k candidates.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProxySpec {
    pub gamma: usize,
    pub k: usize,
}

impl ProxySpec {
    pub fn new(gamma: usize, k: usize) -> Result<Self, DatasetError> {
        if gamma < 1 || gamma > k {
            return Err(DatasetError::GammaOutOfRange { gamma, k });
        }
        Ok(Self { gamma, k })
    }
}

/// The validated sample. Column names are retained so a dataset can be
/// written back to CSV losslessly.
#[derive(Debug, Clone)]
pub struct ObservedData {
    y: Vec<f64>,
    a: Vec<f64>,
    z: DMatrix<f64>,
    w: DMatrix<f64>,
    x: DMatrix<f64>,
    y_name: String,
    a_name: String,
    z_names: Vec<String>,
    w_names: Vec<String>,
    x_names: Vec<String>,
}

impl ObservedData {
    /// Validating constructor from role-ordered columns.
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        y: Vec<f64>,
        a: Vec<f64>,
        z: DMatrix<f64>,
        w: DMatrix<f64>,
        x: DMatrix<f64>,
        names: DataNames,
    ) -> Result<Self, DatasetError> {
        let n = y.len();
        if n == 0 {
            return Err(DatasetError::Empty);
        }
        if z.ncols() == 0 {
            return Err(DatasetError::NoProxies);
        }
        let check_len = |len: usize, column: &str| {
            if len != n {
                Err(DatasetError::LengthMismatch {
                    column: column.to_string(),
                    found: len,
                    expected: n,
                })
            } else {
                Ok(())
            }
        };
        check_len(a.len(), &names.a)?;
        check_len(z.nrows(), "z")?;
        check_len(w.nrows(), "w")?;
        check_len(x.nrows(), "x")?;
        for (row, &v) in a.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(DatasetError::TreatmentDomain { row: row + 1, value: v });
            }
        }
        if !(a.contains(&0.0) && a.contains(&1.0)) {
            return Err(DatasetError::SingleArm);
        }
        Ok(Self {
            y,
            a,
            z,
            w,
            x,
            y_name: names.y,
            a_name: names.a,
            z_names: names.z,
            w_names: names.w,
            x_names: names.x,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
    pub fn k(&self) -> usize {
        self.z.ncols()
    }
    pub fn d_w(&self) -> usize {
        self.w.ncols()
    }
    pub fn p(&self) -> usize {
        self.x.ncols()
    }
    pub fn y(&self) -> &[f64] {
        &self.y
    }
    pub fn a(&self) -> &[f64] {
        &self.a
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z_names(&self) -> &[String] {
        &self.z_names
    }
    pub fn w_names(&self) -> &[String] {
        &self.w_names
    }
    pub fn x_names(&self) -> &[String] {
        &self.x_names
    }

    /// Moves every z-column not listed in `keep` (1-based indices) to the end
    /// of the covariate block. Kept proxies preserve their relative order.
    pub fn demote_proxies(&self, keep: &[usize]) -> Result<ObservedData, DatasetError> {
        if keep.is_empty() {
            return Err(DatasetError::EmptyKeep);
        }
        let k = self.k();
        let mut keep_sorted: Vec<usize> = keep.to_vec();
        keep_sorted.sort_unstable();
        keep_sorted.dedup();
        for &idx in &keep_sorted {
            if idx < 1 || idx > k {
                return Err(DatasetError::IndexOutOfRange { index: idx, k });
            }
        }
        let keep_set: HashSet<usize> = keep_sorted.iter().copied().collect();
        let demoted: Vec<usize> = (1..=k).filter(|i| !keep_set.contains(i)).collect();

        let n = self.n();
        let mut z = DMatrix::zeros(n, keep_sorted.len());
        let mut z_names = Vec::with_capacity(keep_sorted.len());
        for (j, &idx) in keep_sorted.iter().enumerate() {
            z.set_column(j, &self.z.column(idx - 1));
            z_names.push(self.z_names[idx - 1].clone());
        }
        let mut x = DMatrix::zeros(n, self.p() + demoted.len());
        let mut x_names = self.x_names.clone();
        for j in 0..self.p() {
            x.set_column(j, &self.x.column(j));
        }
        for (j, &idx) in demoted.iter().enumerate() {
            x.set_column(self.p() + j, &self.z.column(idx - 1));
            x_names.push(self.z_names[idx - 1].clone());
        }
        Ok(ObservedData {
            y: self.y.clone(),
            a: self.a.clone(),
            z,
            w: self.w.clone(),
            x,
            y_name: self.y_name.clone(),
            a_name: self.a_name.clone(),
            z_names,
            w_names: self.w_names.clone(),
            x_names,
        })
    }

    /// Nonparametric bootstrap resample: n rows drawn i.i.d. uniformly with
    /// replacement, jointly across all columns. Deterministic given `seed`.
    /// Row integrity over single-arm draws is preserved, so the both-arms
    /// invariant is not re-imposed here; estimators fail loudly downstream.
    pub fn resample(&self, seed: u64) -> ObservedData {
        let n = self.n();
        let mut rng = SplitMix64::new(seed);
        let rows: Vec<usize> = (0..n).map(|_| rng.next_index(n)).collect();
        let gather = |m: &DMatrix<f64>| {
            let mut out = DMatrix::zeros(n, m.ncols());
            for (i, &r) in rows.iter().enumerate() {
                for j in 0..m.ncols() {
                    out[(i, j)] = m[(r, j)];
                }
            }
            out
        };
        ObservedData {
            y: rows.iter().map(|&r| self.y[r]).collect(),
            a: rows.iter().map(|&r| self.a[r]).collect(),
            z: gather(&self.z),
            w: gather(&self.w),
            x: gather(&self.x),
            y_name: self.y_name.clone(),
            a_name: self.a_name.clone(),
            z_names: self.z_names.clone(),
            w_names: self.w_names.clone(),
            x_names: self.x_names.clone(),
        }
    }

    /// Writes the dataset as CSV: header row, comma delimiter, floats with 17
    /// significant digits (lossless f64 round trip), treatment as 0/1.
    pub fn write_csv(&self, path: &Path) -> Result<(), DatasetError> {
        let io_err = |source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::write(path, self.to_csv_string()).map_err(io_err)
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::new();
        let mut header: Vec<&str> = vec![&self.y_name, &self.a_name];
        header.extend(self.z_names.iter().map(|s| s.as_str()));
        header.extend(self.w_names.iter().map(|s| s.as_str()));
        header.extend(self.x_names.iter().map(|s| s.as_str()));
        out.push_str(&header.join(","));
        out.push('\n');
        for i in 0..self.n() {
            let _ = write!(out, "{:.16e},{}", self.y[i], self.a[i] as i64);
            for j in 0..self.k() {
                let _ = write!(out, ",{:.16e}", self.z[(i, j)]);
            }
            for j in 0..self.d_w() {
                let _ = write!(out, ",{:.16e}", self.w[(i, j)]);
            }
            for j in 0..self.p() {
                let _ = write!(out, ",{:.16e}", self.x[(i, j)]);
            }
            out.push('\n');
        }
        out
    }
}

/// Column names bundled for the validating constructor.
#[derive(Debug, Clone)]
pub struct DataNames {
    pub y: String,
    pub a: String,
    pub z: Vec<String>,
    pub w: Vec<String>,
    pub x: Vec<String>,
}

impl DataNames {
    /// Synthetic names y, a, z1.., w1.., x1.. for generated data.
    pub fn synthetic(k: usize, d_w: usize, p: usize) -> Self {
        let numbered = |prefix: &str, count: usize| -> Vec<String> {
            if count == 1 {
                vec![prefix.to_string()]
            } else {
                (1..=count).map(|i| format!("{prefix}{i}")).collect()
            }
        };
        Self {
            y: "y".into(),
            a: "a".into(),
            z: (1..=k).map(|i| format!("z{i}")).collect(),
            w: numbered("w", d_w),
            x: numbered("x", p),
        }
    }
}

/// Loads a CSV file, binding columns per `roles`. Parsing is strict: every
/// role cell must be a finite number, the treatment must be literal 0/1
/// (0.0/1.0 accepted), and missing values are rejected.
pub fn load_csv(path: &Path, roles: &ColumnRoles) -> Result<ObservedData, DatasetError> {
    roles.validate()?;
    let io_err = |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    };
    let text = std::fs::read_to_string(path).map_err(io_err)?;
    load_csv_str(&text, roles)
}

/// CSV ingestion from an in-memory string; see [`load_csv`].
pub fn load_csv_str(text: &str, roles: &ColumnRoles) -> Result<ObservedData, DatasetError> {
    roles.validate()?;
    let mut lines = text.lines();
    let header_line = lines.next().ok_or(DatasetError::Empty)?;
    let header: Vec<&str> = header_line.split(',').map(str::trim).collect();

    let find = |name: &String| -> Result<usize, DatasetError> {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DatasetError::MissingColumn(name.clone()))
    };
    let y_idx = find(&roles.outcome)?;
    let a_idx = find(&roles.treatment)?;
    let z_idx: Vec<usize> = roles.proxies_z.iter().map(find).collect::<Result<_, _>>()?;
    let w_idx: Vec<usize> = roles.proxies_w.iter().map(find).collect::<Result<_, _>>()?;
    let x_idx: Vec<usize> = roles.covariates_x.iter().map(find).collect::<Result<_, _>>()?;

    let mut y = Vec::new();
    let mut a = Vec::new();
    let mut z_rows: Vec<f64> = Vec::new();
    let mut w_rows: Vec<f64> = Vec::new();
    let mut x_rows: Vec<f64> = Vec::new();

    for (row_no, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = row_no + 1;
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        let cell = |idx: usize, column: &str| -> Result<f64, DatasetError> {
            let raw = cells.get(idx).copied().unwrap_or("");
            if raw.is_empty() {
                return Err(DatasetError::Missing {
                    row,
                    column: column.to_string(),
                });
            }
            let parsed: f64 = raw.parse().map_err(|_| DatasetError::Parse {
                row,
                column: column.to_string(),
                value: raw.to_string(),
            })?;
            if !parsed.is_finite() {
                return Err(DatasetError::Parse {
                    row,
                    column: column.to_string(),
                    value: raw.to_string(),
                });
            }
            Ok(parsed)
        };
        y.push(cell(y_idx, &roles.outcome)?);
        let a_val = cell(a_idx, &roles.treatment)?;
        if a_val != 0.0 && a_val != 1.0 {
            return Err(DatasetError::TreatmentDomain { row, value: a_val });
        }
        a.push(a_val);
        for (j, &idx) in z_idx.iter().enumerate() {
            z_rows.push(cell(idx, &roles.proxies_z[j])?);
        }
        for (j, &idx) in w_idx.iter().enumerate() {
            w_rows.push(cell(idx, &roles.proxies_w[j])?);
        }
        for (j, &idx) in x_idx.iter().enumerate() {
            x_rows.push(cell(idx, &roles.covariates_x[j])?);
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(DatasetError::Empty);
    }
    let z = DMatrix::from_row_slice(n, z_idx.len(), &z_rows);
    let w = DMatrix::from_row_slice(n, w_idx.len(), &w_rows);
    let x = DMatrix::from_row_slice(n, x_idx.len(), &x_rows);
    ObservedData::from_columns(
        y,
        a,
        z,
        w,
        x,
        DataNames {
            y: roles.outcome.clone(),
            a: roles.treatment.clone(),
            z: roles.proxies_z.clone(),
            w: roles.proxies_w.clone(),
            x: roles.covariates_x.clone(),
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_roles() -> ColumnRoles {
        ColumnRoles {
            outcome: "y".into(),
            treatment: "a".into(),
            proxies_z: vec!["z1".into(), "z2".into()],
            proxies_w: vec!["w".into()],
            covariates_x: vec![],
        }
    }

    const SMALL_CSV: &str = "y,a,z1,z2,w\n1.5,1,0.1,-0.2,0.3\n2.0,0,0.0,0.5,-1.0\n0.7,1,1.0,1.0,0.0\n-0.1,0,-1.0,0.2,0.4\n";

    #[test]
    fn loads_four_row_file() {
        let data = load_csv_str(SMALL_CSV, &small_roles()).unwrap();
        assert_eq!(data.n(), 4);
        assert_eq!(data.k(), 2);
        assert_eq!(data.d_w(), 1);
        assert_eq!(data.p(), 0);
        assert_eq!(data.y()[1], 2.0);
        assert_eq!(data.z()[(3, 0)], -1.0);
    }

    #[test]
    fn missing_role_column_is_named() {
        let mut roles = small_roles();
        roles.proxies_w = vec!["w_missing".into()];
        match load_csv_str(SMALL_CSV, &roles) {
            Err(DatasetError::MissingColumn(name)) => assert_eq!(name, "w_missing"),
            other => panic!("expected MissingColumn, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let bad = "y,a,z1,z2,w\n1.0,1,0.1,0.2,0.3\nbad,0,0.1,0.2,0.3\n";
        match load_csv_str(bad, &small_roles()) {
            Err(DatasetError::Parse { row, column, .. }) => {
                assert_eq!(row, 2);
                assert_eq!(column, "y");
            }
            other => panic!("expected Parse, got {other:?}"),
        }
    }

    #[test]
    fn treatment_must_be_binary() {
        let bad = "y,a,z1,z2,w\n1.0,1,0.1,0.2,0.3\n1.0,2,0.1,0.2,0.3\n";
        assert!(matches!(
            load_csv_str(bad, &small_roles()),
            Err(DatasetError::TreatmentDomain { row: 2, .. })
        ));
        // 0.0/1.0 literals are permitted.
        let ok = "y,a,z1,z2,w\n1.0,1.0,0.1,0.2,0.3\n1.0,0.0,0.1,0.2,0.3\n";
        assert!(load_csv_str(ok, &small_roles()).is_ok());
    }

    #[test]
    fn rhc_layout_shapes() {
        let mut header = vec!["out".to_string(), "treat".to_string()];
        let z: Vec<String> = (1..=8).map(|i| format!("zz{i}")).collect();
        let w: Vec<String> = (1..=2).map(|i| format!("ww{i}")).collect();
        let x: Vec<String> = (1..=61).map(|i| format!("xx{i}")).collect();
        header.extend(z.iter().cloned());
        header.extend(w.iter().cloned());
        header.extend(x.iter().cloned());
        let mut text = header.join(",") + "\n";
        for i in 0..3 {
            let mut row = vec![format!("{}.5", i), format!("{}", i % 2)];
            row.extend((0..71).map(|j| format!("{}", (i + j) as f64 * 0.1)));
            text.push_str(&(row.join(",") + "\n"));
        }
        let roles = ColumnRoles {
            outcome: "out".into(),
            treatment: "treat".into(),
            proxies_z: z,
            proxies_w: w,
            covariates_x: x,
        };
        let data = load_csv_str(&text, &roles).unwrap();
        assert_eq!((data.k(), data.d_w(), data.p()), (8, 2, 61));
    }

    #[test]
    fn demote_moves_columns_to_x() {
        let data = load_csv_str(SMALL_CSV, &small_roles()).unwrap();
        let demoted = data.demote_proxies(&[1]).unwrap();
        assert_eq!(demoted.k(), 1);
        assert_eq!(demoted.p(), data.p() + 1);
        assert_eq!(demoted.x_names()[0], "z2");
        for i in 0..data.n() {
            assert_eq!(demoted.z()[(i, 0)], data.z()[(i, 0)]);
            assert_eq!(demoted.x()[(i, 0)], data.z()[(i, 1)]);
        }
        // Full keep is the identity.
        let same = data.demote_proxies(&[1, 2]).unwrap();
        assert_eq!(same.k(), 2);
        assert_eq!(same.p(), 0);
        assert_eq!(same.z(), data.z());
        // Out of range errors.
        assert!(matches!(
            data.demote_proxies(&[3]),
            Err(DatasetError::IndexOutOfRange { index: 3, k: 2 })
        ));
        assert!(matches!(data.demote_proxies(&[]), Err(DatasetError::EmptyKeep)));
    }

    #[test]
    fn resample_is_deterministic_and_row_faithful() {
        let data = load_csv_str(SMALL_CSV, &small_roles()).unwrap();
        let r1 = data.resample(7);
        let r2 = data.resample(7);
        assert_eq!(r1.y(), r2.y());
        assert_eq!(r1.z(), r2.z());
        for i in 0..r1.n() {
            let found = (0..data.n()).any(|r| {
                data.y()[r] == r1.y()[i]
                    && data.a()[r] == r1.a()[i]
                    && (0..data.k()).all(|j| data.z()[(r, j)] == r1.z()[(i, j)])
                    && (0..data.d_w()).all(|j| data.w()[(r, j)] == r1.w()[(i, j)])
            });
            assert!(found, "resampled row {i} does not match any input row");
        }
    }

    #[test]
    fn bootstrap_exclusion_fraction_matches_theory() {
        // Expected fraction of original rows absent from a resample is
        // (1 - 1/n)^n; checked by direct simulation over 50 seeds.
        let n = 1000;
        let mut y = vec![0.0; n];
        for (i, v) in y.iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut a = vec![0.0; n];
        for (i, v) in a.iter_mut().enumerate() {
            *v = (i % 2) as f64;
        }
        let z = DMatrix::zeros(n, 1);
        let data = ObservedData::from_columns(
            y,
            a,
            z,
            DMatrix::zeros(n, 0),
            DMatrix::zeros(n, 0),
            DataNames::synthetic(1, 0, 0),
        )
        .unwrap();
        let mut total_absent = 0.0;
        for seed in 0..50 {
            let r = data.resample(seed);
            let drawn: HashSet<u64> = r.y().iter().map(|v| *v as u64).collect();
            total_absent += (n - drawn.len()) as f64 / n as f64;
        }
        let mean_absent = total_absent / 50.0;
        let theory = (1.0 - 1.0 / n as f64).powi(n as i32);
        assert!(
            (mean_absent - theory).abs() < 0.05,
            "absent fraction {mean_absent} vs theory {theory}"
        );
    }

    #[test]
    fn single_row_resample() {
        let csv = "y,a,z1,z2,w\n1.0,1,0.1,0.2,0.3\n2.0,0,0.4,0.5,0.6\n";
        let data = load_csv_str(csv, &small_roles()).unwrap();
        let one = data.resample(3);
        assert_eq!(one.n(), 2);
    }

    #[test]
    fn csv_round_trip_identity() {
        let data = load_csv_str(SMALL_CSV, &small_roles()).unwrap();
        let text = data.to_csv_string();
        let back = load_csv_str(&text, &small_roles()).unwrap();
        assert_eq!(back.y(), data.y());
        assert_eq!(back.a(), data.a());
        assert_eq!(back.z(), data.z());
        assert_eq!(back.w(), data.w());
    }

    #[test]
    fn proxy_spec_bounds() {
        assert!(ProxySpec::new(1, 2).is_ok());
        assert!(ProxySpec::new(2, 2).is_ok());
        assert!(ProxySpec::new(0, 2).is_err());
        assert!(ProxySpec::new(3, 2).is_err());
    }
}
