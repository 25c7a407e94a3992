//! Clustered-data representation, ingestion and identifiability checks.
//!
//! Data arrive in long format: one row per observation, a cluster-id column,
//! an outcome column and the covariates named by a [`ModelConfig`]. Clusters
//! are kept in order of first appearance and rows keep their file order
//! within a cluster.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics;

/// Column name used for intercepts added through the config flags.
pub const INTERCEPT: &str = "(Intercept)";

/// Relative eigenvalue threshold used for rank decisions on Gram matrices.
const GRAM_RANK_TOL: f64 = 1e-10;

/// Model description for long-format input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub cluster: String,
    pub outcome: String,
    #[serde(default)]
    pub fixed: Vec<String>,
    #[serde(default)]
    pub random: Vec<String>,
    #[serde(default)]
    pub fixed_intercept: bool,
    #[serde(default)]
    pub random_intercept: bool,
}

impl ModelConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    fn fixed_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        if self.fixed_intercept {
            cols.push(INTERCEPT.to_string());
        }
        cols.extend(self.fixed.iter().cloned());
        cols
    }

    fn random_columns(&self) -> Vec<String> {
        let mut cols = Vec::new();
        if self.random_intercept {
            cols.push(INTERCEPT.to_string());
        }
        cols.extend(self.random.iter().cloned());
        cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub label: String,
    pub y: DVector<f64>,
    /// Fixed-effects design, `n_i x p`.
    pub x: DMatrix<f64>,
    /// Random-effects design, `n_i x k`.
    pub z: DMatrix<f64>,
}

impl Cluster {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteredDataset {
    clusters: Vec<Cluster>,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
}

/// Outcome of one validation check.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const CHECK_FINITE: &str = "finite-values";
pub const CHECK_CLUSTER_SIZES: &str = "cluster-sizes";
pub const CHECK_X_RANK: &str = "fixed-design-rank";
pub const CHECK_DEGREES: &str = "sum-n_i-minus-k-positive";
pub const CHECK_Z_RANK: &str = "random-design-full-rank";

impl ClusteredDataset {
    /// Builds a dataset after structural checks only (consistent column
    /// counts, matching lengths). Identifiability is checked separately by
    /// [`ClusteredDataset::validate`].
    pub fn from_clusters(clusters: Vec<Cluster>, fixed_names: Vec<String>, random_names: Vec<String>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::InvalidInput("dataset has no clusters".into()));
        }
        let p = fixed_names.len();
        let k = random_names.len();
        if p == 0 {
            return Err(Error::InvalidInput("fixed design has no columns".into()));
        }
        for c in &clusters {
            let n_i = c.y.len();
            if c.x.nrows() != n_i || c.z.nrows() != n_i {
                return Err(Error::LengthMismatch(format!(
                    "cluster `{}`: y has {} rows, X has {}, Z has {}",
                    c.label,
                    n_i,
                    c.x.nrows(),
                    c.z.nrows()
                )));
            }
            if c.x.ncols() != p || c.z.ncols() != k {
                return Err(Error::LengthMismatch(format!(
                    "cluster `{}`: expected {} fixed and {} random columns, got {} and {}",
                    c.label,
                    p,
                    k,
                    c.x.ncols(),
                    c.z.ncols()
                )));
            }
        }
        Ok(Self {
            clusters,
            fixed_names,
            random_names,
        })
    }

    pub fn clusters(&self) -> &[Cluster] {
        &self.clusters
    }

    pub fn cluster(&self, i: usize) -> &Cluster {
        &self.clusters[i]
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(Cluster::len).sum()
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        self.clusters.iter().map(Cluster::len).collect()
    }

    pub fn p(&self) -> usize {
        self.fixed_names.len()
    }

    pub fn k(&self) -> usize {
        self.random_names.len()
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    /// Same designs, new outcome vectors.
    pub fn with_outcome(&self, y: Vec<DVector<f64>>) -> Self {
        assert_eq!(y.len(), self.clusters.len());
        let clusters = self
            .clusters
            .iter()
            .zip(y)
            .map(|(c, y)| {
                assert_eq!(y.len(), c.len());
                Cluster {
                    label: c.label.clone(),
                    y,
                    x: c.x.clone(),
                    z: c.z.clone(),
                }
            })
            .collect();
        Self {
            clusters,
            fixed_names: self.fixed_names.clone(),
            random_names: self.random_names.clone(),
        }
    }

    /// Fixed design stacked over clusters, `N x p`.
    pub fn stacked_x(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n_obs(), self.p());
        let mut row = 0;
        for c in &self.clusters {
            out.rows_mut(row, c.len()).copy_from(&c.x);
            row += c.len();
        }
        out
    }

    pub fn stacked_y(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_obs(), self.clusters.iter().flat_map(|c| c.y.iter().copied()))
    }

    /// Runs every invariant check and reports each outcome.
    pub fn validate(&self) -> ValidationReport {
        let mut checks = Vec::new();
        let k = self.k();
        let p = self.p();

        let finite = self
            .clusters
            .iter()
            .all(|c| c.y.iter().chain(c.x.iter()).chain(c.z.iter()).all(|v| v.is_finite()));
        checks.push(Check {
            name: CHECK_FINITE,
            passed: finite,
            detail: if finite {
                "all entries finite".into()
            } else {
                "non-finite entries present".into()
            },
        });

        let min_size = self.clusters.iter().map(Cluster::len).min().unwrap_or(0);
        checks.push(Check {
            name: CHECK_CLUSTER_SIZES,
            passed: min_size >= 1,
            detail: format!("smallest cluster has {min_size} observations"),
        });

        let rank_x = if finite { gram_rank(&self.stacked_x()) } else { 0 };
        checks.push(Check {
            name: CHECK_X_RANK,
            passed: rank_x == p,
            detail: format!("rank {rank_x} of {p} columns"),
        });

        let degrees: i64 = self.clusters.iter().map(|c| c.len() as i64 - k as i64).sum();
        checks.push(Check {
            name: CHECK_DEGREES,
            passed: degrees > 0,
            detail: format!("sum(n_i - k) = {degrees}"),
        });

        let full_z = finite && (k == 0 || self.clusters.iter().any(|c| c.len() >= k && gram_rank(&c.z) == k));
        checks.push(Check {
            name: CHECK_Z_RANK,
            passed: full_z,
            detail: if full_z {
                "at least one Z_i has full column rank".into()
            } else {
                "no Z_i has full column rank".into()
            },
        });

        ValidationReport { checks }
    }

    /// Turns the first failing check into an error.
    pub fn ensure_valid(&self) -> Result<()> {
        let report = self.validate();
        for c in &report.checks {
            if c.passed {
                continue;
            }
            return Err(match c.name {
                CHECK_X_RANK => Error::RankDeficientX {
                    rank: gram_rank(&self.stacked_x()),
                    p: self.p(),
                },
                CHECK_DEGREES | CHECK_Z_RANK => Error::IdentifiabilityViolation(c.detail.clone()),
                _ => Error::InvalidInput(c.detail.clone()),
            });
        }
        Ok(())
    }

    /// Writes the dataset in long format and returns the config that reads it
    /// back. Columns shared by the fixed and random designs are written once.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<ModelConfig> {
        let (fixed_intercept, fixed_cols) = split_intercept(&self.fixed_names);
        let (random_intercept, random_cols) = split_intercept(&self.random_names);

        // (name, design, column index) for every written covariate.
        let mut columns: Vec<(String, bool, usize)> = Vec::new();
        for (name, j) in &fixed_cols {
            columns.push((name.clone(), true, *j));
        }
        for (name, j) in &random_cols {
            if let Some((_, _, fj)) = columns.iter().find(|(n, fixed, _)| *fixed && n == name) {
                let same = self.clusters.iter().all(|c| c.x.column(*fj) == c.z.column(*j));
                if !same {
                    return Err(Error::InvalidInput(format!(
                        "column `{name}` differs between the fixed and random designs"
                    )));
                }
                continue;
            }
            columns.push((name.clone(), false, *j));
        }
        for reserved in ["cluster", "y"] {
            if columns.iter().any(|(n, _, _)| n == reserved) {
                return Err(Error::InvalidInput(format!(
                    "covariate name `{reserved}` clashes with the export layout"
                )));
            }
        }

        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["cluster".to_string(), "y".to_string()];
        header.extend(columns.iter().map(|(n, _, _)| n.clone()));
        w.write_record(&header)?;
        for c in &self.clusters {
            for r in 0..c.len() {
                let mut rec = vec![c.label.clone(), format!("{}", c.y[r])];
                for (_, fixed, j) in &columns {
                    let v = if *fixed { c.x[(r, *j)] } else { c.z[(r, *j)] };
                    rec.push(format!("{v}"));
                }
                w.write_record(&rec)?;
            }
        }
        w.flush()?;

        Ok(ModelConfig {
            cluster: "cluster".into(),
            outcome: "y".into(),
            fixed: fixed_cols.into_iter().map(|(n, _)| n).collect(),
            random: random_cols.into_iter().map(|(n, _)| n).collect(),
            fixed_intercept,
            random_intercept,
        })
    }
}

fn split_intercept(names: &[String]) -> (bool, Vec<(String, usize)>) {
    let leading = names.first().is_some_and(|n| n == INTERCEPT);
    let rest = names
        .iter()
        .enumerate()
        .skip(usize::from(leading))
        .map(|(j, n)| (n.clone(), j))
        .collect();
    (leading, rest)
}

fn gram_rank(m: &DMatrix<f64>) -> usize {
    if m.ncols() == 0 {
        return 0;
    }
    numerics::numerical_rank(&(m.transpose() * m), Some(GRAM_RANK_TOL))
}

/// Column-oriented long-format table: one label per row plus named numeric
/// columns.
#[derive(Debug, Clone, Default)]
pub struct LongTable {
    pub labels: Vec<String>,
    pub columns: HashMap<String, Vec<f64>>,
}

impl LongTable {
    fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    }

    /// Groups rows by label and assembles the designs named in `config`.
    /// Structural checks only; see [`ClusteredDataset::ensure_valid`].
    pub fn build(&self, config: &ModelConfig) -> Result<ClusteredDataset> {
        let n = self.labels.len();
        let y = self.column(&config.outcome)?;
        let fixed_names = config.fixed_columns();
        let random_names = config.random_columns();
        let fixed: Vec<Option<&[f64]>> = fixed_names
            .iter()
            .map(|name| self.lookup(name, config.fixed_intercept))
            .collect::<Result<_>>()?;
        let random: Vec<Option<&[f64]>> = random_names
            .iter()
            .map(|name| self.lookup(name, config.random_intercept))
            .collect::<Result<_>>()?;
        for col in fixed.iter().chain(random.iter()).flatten() {
            if col.len() != n {
                return Err(Error::LengthMismatch("column length differs from row count".into()));
            }
        }

        let mut order: Vec<String> = Vec::new();
        let mut rows: HashMap<&str, Vec<usize>> = HashMap::new();
        for (r, label) in self.labels.iter().enumerate() {
            rows.entry(label.as_str())
                .or_insert_with(|| {
                    order.push(label.clone());
                    Vec::new()
                })
                .push(r);
        }

        let value = |col: &Option<&[f64]>, r: usize| col.map_or(1.0, |c| c[r]);
        let clusters = order
            .into_iter()
            .map(|label| {
                let idx = &rows[label.as_str()];
                let n_i = idx.len();
                Cluster {
                    y: DVector::from_iterator(n_i, idx.iter().map(|&r| y[r])),
                    x: DMatrix::from_fn(n_i, fixed.len(), |a, j| value(&fixed[j], idx[a])),
                    z: DMatrix::from_fn(n_i, random.len(), |a, j| value(&random[j], idx[a])),
                    label,
                }
            })
            .collect();
        ClusteredDataset::from_clusters(clusters, fixed_names, random_names)
    }

    // `None` stands for the intercept column of ones.
    fn lookup(&self, name: &str, intercept_flag: bool) -> Result<Option<&[f64]>> {
        if intercept_flag && name == INTERCEPT && !self.columns.contains_key(name) {
            return Ok(None);
        }
        self.column(name).map(Some)
    }
}

/// Reads long-format CSV (header row required) into a validated dataset.
pub fn read_dataset<R: Read>(reader: R, config: &ModelConfig) -> Result<ClusteredDataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };
    let cluster_idx = find(&config.cluster)?;

    let mut wanted: Vec<String> = vec![config.outcome.clone()];
    for name in config.fixed.iter().chain(config.random.iter()) {
        if !wanted.contains(name) {
            wanted.push(name.clone());
        }
    }
    let wanted_idx: Vec<usize> = wanted.iter().map(|n| find(n)).collect::<Result<_>>()?;

    let mut table = LongTable::default();
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); wanted.len()];
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        table
            .labels
            .push(record.get(cluster_idx).unwrap_or("").trim().to_string());
        for (slot, &col) in wanted_idx.iter().enumerate() {
            let cell = record.get(col).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                column: wanted[slot].clone(),
                row: row + 1,
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumericCell {
                    column: wanted[slot].clone(),
                    row: row + 1,
                    value: cell.to_string(),
                });
            }
            values[slot].push(v);
        }
    }
    table.columns = wanted.into_iter().zip(values).collect();
    let ds = table.build(config)?;
    ds.ensure_valid()?;
    Ok(ds)
}

/// Loads a long-format CSV file.
pub fn load_dataset(csv_path: impl AsRef<Path>, config: &ModelConfig) -> Result<ClusteredDataset> {
    let file = std::fs::File::open(csv_path)?;
    read_dataset(std::io::BufReader::new(file), config)
}

/// Ordered list of fixed-design column indices used by the subset process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSubset(Vec<usize>);

impl ColumnSubset {
    pub fn new(indices: Vec<usize>, p: usize) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::InvalidSubset("subset is empty".into()));
        }
        for (a, &i) in indices.iter().enumerate() {
            if i >= p {
                return Err(Error::InvalidSubset(format!(
                    "column index {i} out of range for p = {p}"
                )));
            }
            if indices[..a].contains(&i) {
                return Err(Error::InvalidSubset(format!("column index {i} repeated")));
            }
        }
        Ok(Self(indices))
    }

    /// Resolves column names against the dataset's fixed design.
    pub fn from_names(names: &[&str], ds: &ClusteredDataset) -> Result<Self> {
        let idx = names
            .iter()
            .map(|n| {
                ds.fixed_names()
                    .iter()
                    .position(|f| f == n)
                    .ok_or_else(|| Error::InvalidSubset(format!("unknown fixed column `{n}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(idx, ds.p())
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(fixed: &[&str], random: &[&str], fi: bool, ri: bool) -> ModelConfig {
        ModelConfig {
            cluster: "id".into(),
            outcome: "y".into(),
            fixed: fixed.iter().map(|s| s.to_string()).collect(),
            random: random.iter().map(|s| s.to_string()).collect(),
            fixed_intercept: fi,
            random_intercept: ri,
        }
    }

    #[test]
    fn loads_two_by_two() {
        let csv = "id,y,x\na,1.0,0.5\na,2.0,1.5\nb,3.0,0.1\nb,4.0,2.0\n";
        let ds = read_dataset(csv.as_bytes(), &config(&["x"], &[], true, true)).unwrap();
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.cluster_sizes(), vec![2, 2]);
        assert_eq!(ds.p(), 2);
        assert_eq!(ds.k(), 1);
        assert_eq!(ds.cluster(0).x[(1, 1)], 1.5);
        assert_eq!(ds.cluster(1).z[(0, 0)], 1.0);
    }

    #[test]
    fn first_appearance_order_and_row_order() {
        let csv = "id,y\nb,1\na,2\nb,3\nc,4\na,5\n";
        let ds = read_dataset(csv.as_bytes(), &config(&[], &[], true, true)).unwrap();
        let labels: Vec<&str> = ds.clusters().iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, ["b", "a", "c"]);
        assert_eq!(ds.cluster(0).y.as_slice(), &[1.0, 3.0]);
        assert_eq!(ds.cluster(1).y.as_slice(), &[2.0, 5.0]);
    }

    #[test]
    fn identifiability_violation_when_all_z_rank_deficient() {
        // k = 2, every cluster has n_i = 2 but z1 is constant within cluster.
        let csv = "id,y,z1\na,1,1\na,2,1\nb,3,2\nb,4,2\n";
        let err = read_dataset(csv.as_bytes(), &config(&[], &["z1"], true, true)).unwrap_err();
        assert!(matches!(err, Error::IdentifiabilityViolation(_)), "{err:?}");
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let csv = "id,y,x,xx\na,1,0.5,0.5\na,2,1.5,1.5\nb,3,0.1,0.1\nb,4,2,2\n";
        let err = read_dataset(csv.as_bytes(), &config(&["x", "xx"], &[], true, true)).unwrap_err();
        assert!(matches!(err, Error::RankDeficientX { rank: 2, p: 3 }), "{err:?}");
    }

    #[test]
    fn missing_and_non_numeric() {
        let csv = "id,y\na,1\n";
        let err = read_dataset(csv.as_bytes(), &config(&["x"], &[], true, true)).unwrap_err();
        assert!(matches!(err, Error::MissingColumn(ref c) if c == "x"));
        let csv = "id,y\na,1\na,oops\n";
        let err = read_dataset(csv.as_bytes(), &config(&[], &[], true, true)).unwrap_err();
        assert!(matches!(err, Error::NonNumericCell { row: 2, .. }), "{err:?}");
    }

    #[test]
    fn validate_reports() {
        let csv = "id,y,x\na,1.0,0.5\na,2.0,1.5\nb,3.0,0.1\nb,4.0,2.0\nc,0.3,0.7\n";
        let ds = read_dataset(csv.as_bytes(), &config(&["x"], &[], true, true)).unwrap();
        // singleton cluster c: sum(n_i - k) = 1 + 1 + 0 = 2 > 0
        let report = ds.validate();
        assert!(report.all_passed(), "{report:?}");
        assert_eq!(report.check(CHECK_DEGREES).unwrap().detail, "sum(n_i - k) = 2");

        // a single cluster with n_1 = k
        let one = LongTable {
            labels: vec!["a".into()],
            columns: [("y".to_string(), vec![1.0])].into_iter().collect(),
        }
        .build(&config(&[], &[], true, true))
        .unwrap();
        let report = one.validate();
        assert!(!report.check(CHECK_DEGREES).unwrap().passed);
        assert!(report.check(CHECK_Z_RANK).unwrap().passed);
    }

    #[test]
    fn export_reload_round_trip() {
        let csv = "id,y,x,w\na,1.25,0.5,3\na,2,1.5,4\nb,3,0.1,-1\nb,4,2,0.2\nb,-1e-3,7,1\n";
        let cfg = config(&["x", "w"], &["x"], true, true);
        let ds = read_dataset(csv.as_bytes(), &cfg).unwrap();
        let mut buf = Vec::new();
        let cfg2 = ds.write_csv(&mut buf).unwrap();
        let again = read_dataset(buf.as_slice(), &cfg2).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn deterministic_load() {
        let csv = "id,y,x\nq,1,0.5\np,2,1.5\nq,3,0.1\np,4,2\n";
        let cfg = config(&["x"], &[], true, true);
        let a = read_dataset(csv.as_bytes(), &cfg).unwrap();
        let b = read_dataset(csv.as_bytes(), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn column_subset_validation() {
        assert!(ColumnSubset::new(vec![], 3).is_err());
        assert!(ColumnSubset::new(vec![3], 3).is_err());
        assert!(ColumnSubset::new(vec![1, 1], 3).is_err());
        assert_eq!(ColumnSubset::new(vec![2, 0], 3).unwrap().indices(), &[2, 0]);
    }
}
