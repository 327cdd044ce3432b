//! Tabular input and design-matrix construction.
//!
//! Input is long-format delimited text: one row per observation, one column per
//! variable, plus a grouping column whose values identify the cluster. Clusters
//! are ordered by their sorted label (byte-wise string order), which keeps
//! parameter naming and score-row order stable under row shuffles.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::Read;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};

use crate::error::{LmmError, Result};

pub const INTERCEPT: &str = "(Intercept)";

/// Column roles for a single-grouping-factor mixed model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub response: String,
    pub fixed: Vec<String>,
    pub random: Vec<String>,
    pub group: String,
    pub fixed_intercept: bool,
    pub random_intercept: bool,
}

impl ModelSpec {
    /// A random-intercept model `response ~ 1 + (1 | group)`; add covariates with
    /// [`ModelSpec::fixed`] and [`ModelSpec::random`].
    pub fn new(response: impl Into<String>, group: impl Into<String>) -> Self {
        Self {
            response: response.into(),
            fixed: Vec::new(),
            random: Vec::new(),
            group: group.into(),
            fixed_intercept: true,
            random_intercept: true,
        }
    }

    pub fn fixed<I, S>(mut self, cols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.fixed = cols.into_iter().map(Into::into).collect();
        self
    }

    pub fn random<I, S>(mut self, cols: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.random = cols.into_iter().map(Into::into).collect();
        self
    }

    pub fn with_fixed_intercept(mut self, yes: bool) -> Self {
        self.fixed_intercept = yes;
        self
    }

    pub fn with_random_intercept(mut self, yes: bool) -> Self {
        self.random_intercept = yes;
        self
    }

    /// Numeric columns referenced by the spec, response first, without duplicates.
    pub fn numeric_columns(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        std::iter::once(&self.response)
            .chain(&self.fixed)
            .chain(&self.random)
            .map(String::as_str)
            .filter(|c| seen.insert(*c))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.response == self.group {
            return Err(LmmError::InvalidSpec(format!(
                "response and group both refer to `{}`",
                self.response
            )));
        }
        for (role, cols) in [("fixed", &self.fixed), ("random", &self.random)] {
            let mut seen = HashSet::new();
            for c in cols {
                if c == &self.response || c == &self.group {
                    return Err(LmmError::InvalidSpec(format!(
                        "{role} covariate `{c}` is also the response or group column"
                    )));
                }
                if c == INTERCEPT {
                    return Err(LmmError::InvalidSpec(format!(
                        "`{INTERCEPT}` is reserved; use the intercept flags instead"
                    )));
                }
                if !seen.insert(c) {
                    return Err(LmmError::InvalidSpec(format!(
                        "{role} covariate `{c}` listed twice"
                    )));
                }
            }
        }
        if !self.fixed_intercept && self.fixed.is_empty() {
            return Err(LmmError::InvalidSpec(
                "fixed part is empty (no intercept and no covariates)".into(),
            ));
        }
        if !self.random_intercept && self.random.is_empty() {
            return Err(LmmError::InvalidSpec(
                "random part is empty; the model needs at least a random intercept".into(),
            ));
        }
        Ok(())
    }

    pub fn fixed_names(&self) -> Vec<String> {
        with_intercept(self.fixed_intercept, &self.fixed)
    }

    pub fn random_names(&self) -> Vec<String> {
        with_intercept(self.random_intercept, &self.random)
    }
}

fn with_intercept(intercept: bool, cols: &[String]) -> Vec<String> {
    let mut out = Vec::with_capacity(cols.len() + 1);
    if intercept {
        out.push(INTERCEPT.to_string());
    }
    out.extend(cols.iter().cloned());
    out
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    pub delimiter: u8,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { delimiter: b',' }
    }
}

/// The columns of a long-format table that a [`ModelSpec`] uses, in file row order.
#[derive(Debug, Clone)]
pub struct Dataset {
    columns: BTreeMap<String, Vec<f64>>,
    group_column: String,
    groups: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from already-parsed columns.
    pub fn from_columns(
        columns: impl IntoIterator<Item = (String, Vec<f64>)>,
        group_column: impl Into<String>,
        groups: Vec<String>,
    ) -> Result<Self> {
        let columns: BTreeMap<_, _> = columns.into_iter().collect();
        let n = groups.len();
        if n == 0 {
            return Err(LmmError::EmptyDataset);
        }
        for (name, col) in &columns {
            if col.len() != n {
                return Err(LmmError::InvalidSpec(format!(
                    "column `{name}` has {} rows, group column has {n}",
                    col.len()
                )));
            }
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(LmmError::MissingValue {
                    row: row + 1,
                    column: name.clone(),
                });
            }
        }
        Ok(Self {
            columns,
            group_column: group_column.into(),
            groups,
        })
    }

    pub fn n(&self) -> usize {
        self.groups.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.columns.get(name).map(Vec::as_slice)
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn group_column(&self) -> &str {
        &self.group_column
    }

    pub fn distinct_groups(&self) -> usize {
        self.groups.iter().collect::<HashSet<_>>().len()
    }
}

pub fn load_dataset_path(path: impl AsRef<Path>, spec: &ModelSpec, opts: &LoadOptions) -> Result<Dataset> {
    let file = File::open(path.as_ref())?;
    load_dataset(file, spec, opts)
}

/// Parse delimited text with a header row, keeping only the columns `spec` uses.
pub fn load_dataset<R: Read>(source: R, spec: &ModelSpec, opts: &LoadOptions) -> Result<Dataset> {
    spec.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(opts.delimiter)
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    let index_of = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| LmmError::MissingColumn(name.to_string()))
    };

    let numeric: Vec<(String, usize)> = spec
        .numeric_columns()
        .into_iter()
        .map(|c| index_of(c).map(|i| (c.to_string(), i)))
        .collect::<Result<_>>()?;
    let group_idx = index_of(&spec.group)?;

    let mut values: Vec<Vec<f64>> = vec![Vec::new(); numeric.len()];
    let mut groups = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // 1-based data row, header excluded
        let row = i + 1;
        for ((name, idx), out) in numeric.iter().zip(values.iter_mut()) {
            out.push(parse_cell(record.get(*idx), row, name)?);
        }
        match record.get(group_idx) {
            Some(g) if !g.is_empty() && g != "NA" => groups.push(g.to_string()),
            _ => {
                return Err(LmmError::MissingValue {
                    row,
                    column: spec.group.clone(),
                })
            }
        }
    }
    if groups.is_empty() {
        return Err(LmmError::EmptyDataset);
    }
    let columns = numeric.into_iter().map(|(name, _)| name).zip(values);
    Dataset::from_columns(columns, spec.group.clone(), groups)
}

fn parse_cell(cell: Option<&str>, row: usize, column: &str) -> Result<f64> {
    let missing = || LmmError::MissingValue {
        row,
        column: column.to_string(),
    };
    let raw = cell.ok_or_else(missing)?;
    if raw.is_empty() || raw == "NA" {
        return Err(missing());
    }
    let v: f64 = raw.parse().map_err(|_| LmmError::ParseCell {
        row,
        column: column.to_string(),
        value: raw.to_string(),
    })?;
    if !v.is_finite() {
        return Err(missing());
    }
    Ok(v)
}

/// Per-cluster slice of the design.
#[derive(Debug, Clone)]
pub struct ClusterBlock {
    pub label: String,
    /// Row indices into the original dataset, in file order.
    pub rows: Vec<usize>,
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    /// |c_j| x q_c random-effect design for this cluster.
    pub z: DMatrix<f64>,
}

impl ClusterBlock {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// `y`, `X` and the block-structured `Z` for a single grouping factor.
///
/// The full `Z` is never stored: it is `blockdiag(Z_j)` with `Z_j` held by each
/// [`ClusterBlock`], so only `q_c` entries per row are ever non-zero.
#[derive(Debug, Clone)]
pub struct DesignMatrices {
    y: DVector<f64>,
    x: DMatrix<f64>,
    clusters: Vec<ClusterBlock>,
    fixed_names: Vec<String>,
    random_names: Vec<String>,
    group: String,
    warnings: Vec<String>,
}

impl DesignMatrices {
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn clusters(&self) -> &[ClusterBlock] {
        &self.clusters
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn q_c(&self) -> usize {
        self.random_names.len()
    }

    pub fn q(&self) -> usize {
        self.q_c() * self.n_clusters()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Number of variance parameters: unique entries of `G_c` plus the residual.
    pub fn k(&self) -> usize {
        let q = self.q_c();
        q * (q + 1) / 2 + 1
    }

    pub fn fixed_names(&self) -> &[String] {
        &self.fixed_names
    }

    pub fn random_names(&self) -> &[String] {
        &self.random_names
    }

    pub fn group(&self) -> &str {
        &self.group
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn cluster_labels(&self) -> Vec<&str> {
        self.clusters.iter().map(|c| c.label.as_str()).collect()
    }

    /// Cluster position of every original row.
    pub fn cluster_of_rows(&self) -> Vec<usize> {
        let mut out = vec![0; self.n()];
        for (j, c) in self.clusters.iter().enumerate() {
            for &r in &c.rows {
                out[r] = j;
            }
        }
        out
    }

    /// Dense `n x q` random-effects design in original row order; columns are
    /// grouped by cluster in canonical order.
    pub fn z_dense(&self) -> DMatrix<f64> {
        let qc = self.q_c();
        let mut z = DMatrix::zeros(self.n(), self.q());
        for (j, c) in self.clusters.iter().enumerate() {
            for (local, &r) in c.rows.iter().enumerate() {
                for v in 0..qc {
                    z[(r, j * qc + v)] = c.z[(local, v)];
                }
            }
        }
        z
    }
}

pub fn build_design(data: &Dataset, spec: &ModelSpec) -> Result<DesignMatrices> {
    spec.validate()?;
    if data.group_column() != spec.group {
        return Err(LmmError::MissingColumn(spec.group.clone()));
    }
    let n = data.n();
    let col = |name: &str| {
        data.column(name)
            .ok_or_else(|| LmmError::MissingColumn(name.to_string()))
    };
    let y = DVector::from_column_slice(col(&spec.response)?);

    let fixed_names = spec.fixed_names();
    let random_names = spec.random_names();
    let x = design_block(n, spec.fixed_intercept, &spec.fixed, &col)?;
    let z_all = design_block(n, spec.random_intercept, &spec.random, &col)?;
    check_fixed_rank(&x, &fixed_names, spec.fixed_intercept)?;

    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (r, g) in data.groups().iter().enumerate() {
        by_label.entry(g.as_str()).or_default().push(r);
    }

    let qc = random_names.len();
    let mut warnings = Vec::new();
    let clusters: Vec<ClusterBlock> = by_label
        .into_iter()
        .map(|(label, rows)| {
            if rows.len() < qc {
                warnings.push(format!(
                    "cluster `{label}` has {} rows but {qc} random effects; variance components may not be estimable",
                    rows.len()
                ));
            }
            ClusterBlock {
                label: label.to_string(),
                y: DVector::from_iterator(rows.len(), rows.iter().map(|&r| y[r])),
                x: x.select_rows(&rows),
                z: z_all.select_rows(&rows),
                rows,
            }
        })
        .collect();
    if clusters.len() == 1 {
        warnings.push("only one cluster: cluster-robust covariance is unavailable".to_string());
    }
    for w in &warnings {
        warn!("{w}");
    }

    Ok(DesignMatrices {
        y,
        x,
        clusters,
        fixed_names,
        random_names,
        group: spec.group.clone(),
        warnings,
    })
}

fn design_block<'a>(
    n: usize,
    intercept: bool,
    cols: &[String],
    col: &dyn Fn(&str) -> Result<&'a [f64]>,
) -> Result<DMatrix<f64>> {
    let width = cols.len() + usize::from(intercept);
    let mut m = DMatrix::zeros(n, width);
    let mut j = 0;
    if intercept {
        m.column_mut(0).fill(1.0);
        j = 1;
    }
    for name in cols {
        m.column_mut(j).copy_from_slice(col(name)?);
        j += 1;
    }
    Ok(m)
}

fn check_fixed_rank(x: &DMatrix<f64>, names: &[String], intercept: bool) -> Result<()> {
    if intercept {
        for (j, name) in names.iter().enumerate().skip(1) {
            let c = x.column(j);
            if c.iter().all(|&v| v == c[0]) {
                return Err(LmmError::RankDeficient(format!(
                    "covariate `{name}` is constant and duplicates the intercept"
                )));
            }
        }
    }
    if x.nrows() < x.ncols() {
        return Err(LmmError::RankDeficient(format!(
            "{} fixed effects but only {} observations",
            x.ncols(),
            x.nrows()
        )));
    }
    let sv = x.clone().svd(false, false).singular_values;
    let max = sv.max();
    let tol = max * f64::EPSILON * x.nrows().max(x.ncols()) as f64;
    if max == 0.0 || sv.iter().any(|&s| s <= tol) {
        return Err(LmmError::RankDeficient(
            "fixed-effects columns are linearly dependent".to_string(),
        ));
    }
    Ok(())
}
