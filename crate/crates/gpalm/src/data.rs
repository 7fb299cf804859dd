//! Clustered datasets and the long-format CSV interchange.
//!
//! One CSV row per observation: `cluster,y,<x...>,<t...>[,order]`. Rows are
//! grouped by cluster id preserving file order; an intercept column is
//! injected as the first parametric covariate unless the schema declares one.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Observations from one cluster (one subject, for longitudinal data).
#[derive(Debug, Clone)]
pub struct ClusterData {
    pub id: String,
    /// Responses, length `m`.
    pub y: DVector<f64>,
    /// Parametric covariates, `m x k`; column 0 is identically 1.
    pub x: DMatrix<f64>,
    /// Nonparametric covariates, `m x d`.
    pub t: DMatrix<f64>,
    /// Observation order within the cluster (drives the AR-1 lag).
    pub obs_index: Vec<i64>,
}

impl ClusterData {
    pub fn new(
        id: String,
        y: DVector<f64>,
        x: DMatrix<f64>,
        t: DMatrix<f64>,
        obs_index: Vec<i64>,
    ) -> Result<Self> {
        let m = y.len();
        if m == 0 {
            return Err(Error::EmptyDataset(format!("cluster `{id}` has no observations")));
        }
        if x.nrows() != m || t.nrows() != m || obs_index.len() != m {
            return Err(Error::Shape(format!(
                "cluster `{id}`: inconsistent row counts (y {m}, x {}, t {}, order {})",
                x.nrows(),
                t.nrows(),
                obs_index.len()
            )));
        }
        Ok(ClusterData { id, y, x, t, obs_index })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.len() == 0
    }
}

/// Validation finding severity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Debug, Clone)]
pub struct Finding {
    pub severity: Severity,
    pub message: String,
}

/// A clustered dataset; clusters agree on the covariate layout, cluster
/// sizes may differ.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub clusters: Vec<ClusterData>,
    pub x_names: Vec<String>,
    pub t_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        clusters: Vec<ClusterData>,
        x_names: Vec<String>,
        t_names: Vec<String>,
    ) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::EmptyDataset("no clusters".into()));
        }
        let k = clusters[0].x.ncols();
        let d = clusters[0].t.ncols();
        for c in &clusters {
            if c.x.ncols() != k || c.t.ncols() != d {
                return Err(Error::Shape(format!(
                    "cluster `{}` disagrees on covariate layout ({} x, {} t columns; expected {k}, {d})",
                    c.id,
                    c.x.ncols(),
                    c.t.ncols()
                )));
            }
        }
        if x_names.len() != k || t_names.len() != d {
            return Err(Error::Shape("covariate names do not match column counts".into()));
        }
        Ok(Dataset { clusters, x_names, t_names })
    }

    /// Number of parametric covariates (including the intercept).
    pub fn k(&self) -> usize {
        self.clusters[0].x.ncols()
    }

    /// Number of nonparametric dimensions.
    pub fn d(&self) -> usize {
        self.clusters[0].t.ncols()
    }

    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn n_obs(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).sum()
    }

    pub fn max_cluster_size(&self) -> usize {
        self.clusters.iter().map(|c| c.len()).max().unwrap_or(0)
    }

    /// All nonparametric covariate rows stacked, `n_obs x d`.
    pub fn pooled_t(&self) -> DMatrix<f64> {
        let n = self.n_obs();
        let d = self.d();
        let mut out = DMatrix::zeros(n, d);
        let mut row = 0;
        for c in &self.clusters {
            for i in 0..c.len() {
                for j in 0..d {
                    out[(row, j)] = c.t[(i, j)];
                }
                row += 1;
            }
        }
        out
    }

    /// Keep only the clusters with `keep[i] == true`.
    pub fn subset(&self, keep: &[bool]) -> Result<Dataset> {
        let clusters: Vec<ClusterData> = self
            .clusters
            .iter()
            .zip(keep)
            .filter(|(_, &k)| k)
            .map(|(c, _)| c.clone())
            .collect();
        Dataset::new(clusters, self.x_names.clone(), self.t_names.clone())
    }

    /// Non-fatal data checks: non-finite cells, degenerate nonparametric
    /// support, constant non-intercept parametric columns, and all-singleton
    /// clusters (no within-cluster pairs). A well-formed dataset returns an
    /// empty list.
    pub fn validate(&self) -> Vec<Finding> {
        let mut findings = Vec::new();
        for c in &self.clusters {
            for i in 0..c.len() {
                if !c.y[i].is_finite() {
                    findings.push(Finding {
                        severity: Severity::Error,
                        message: format!(
                            "non-finite response in cluster `{}`, observation {}",
                            c.id,
                            i + 1
                        ),
                    });
                }
                for j in 0..c.x.ncols() {
                    if !c.x[(i, j)].is_finite() {
                        findings.push(Finding {
                            severity: Severity::Error,
                            message: format!(
                                "non-finite value in covariate `{}`, cluster `{}`, observation {}",
                                self.x_names[j],
                                c.id,
                                i + 1
                            ),
                        });
                    }
                }
                for j in 0..c.t.ncols() {
                    if !c.t[(i, j)].is_finite() {
                        findings.push(Finding {
                            severity: Severity::Error,
                            message: format!(
                                "non-finite value in covariate `{}`, cluster `{}`, observation {}",
                                self.t_names[j],
                                c.id,
                                i + 1
                            ),
                        });
                    }
                }
            }
        }
        for j in 0..self.d() {
            let mut min = f64::INFINITY;
            let mut max = f64::NEG_INFINITY;
            for c in &self.clusters {
                for i in 0..c.len() {
                    let v = c.t[(i, j)];
                    if v.is_finite() {
                        min = min.min(v);
                        max = max.max(v);
                    }
                }
            }
            if min >= max {
                findings.push(Finding {
                    severity: Severity::Error,
                    message: format!(
                        "nonparametric covariate `{}` has degenerate support (range [{min}, {max}])",
                        self.t_names[j]
                    ),
                });
            }
        }
        for j in 1..self.k() {
            let first = self.clusters[0].x[(0, j)];
            let constant = self
                .clusters
                .iter()
                .all(|c| (0..c.len()).all(|i| c.x[(i, j)] == first));
            if constant {
                findings.push(Finding {
                    severity: Severity::Warning,
                    message: format!(
                        "parametric covariate `{}` is constant; it is collinear with the intercept",
                        self.x_names[j]
                    ),
                });
            }
        }
        if self.max_cluster_size() < 2 {
            findings.push(Finding {
                severity: Severity::Warning,
                message: "every cluster has a single observation; only the independence working \
                          structure can be estimated"
                    .into(),
            });
        }
        findings
    }

    /// Read a long-format CSV from a file path.
    pub fn read_csv_path(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
        let file = std::fs::File::open(path)?;
        Self::read_csv(file, schema)
    }

    /// Read a long-format CSV from any reader. Rows are grouped by cluster
    /// id in order of first appearance; within-cluster order follows the
    /// file (or the declared order column).
    pub fn read_csv(reader: impl Read, schema: &CsvSchema) -> Result<Dataset> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| -> Result<usize> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::MissingColumn(name.to_string()))
        };
        let cluster_idx = col(&schema.cluster)?;
        let y_idx = col(&schema.y)?;
        let x_idx: Vec<usize> = schema.x.iter().map(|n| col(n)).collect::<Result<_>>()?;
        let t_idx: Vec<usize> = schema.t.iter().map(|n| col(n)).collect::<Result<_>>()?;
        let order_idx = match &schema.order {
            Some(name) => Some(col(name)?),
            None => None,
        };

        struct Rows {
            y: Vec<f64>,
            x: Vec<Vec<f64>>,
            t: Vec<Vec<f64>>,
            order: Vec<i64>,
        }
        let mut order_of: HashMap<String, usize> = HashMap::new();
        let mut groups: Vec<(String, Rows)> = Vec::new();

        for record in rdr.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let parse_f64 = |idx: usize, name: &str| -> Result<f64> {
                let raw = record.get(idx).unwrap_or("").trim();
                raw.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    column: name.to_string(),
                    message: format!("`{raw}` is not a number"),
                })
            };
            let id = record.get(cluster_idx).unwrap_or("").trim().to_string();
            if id.is_empty() {
                return Err(Error::Parse {
                    line,
                    column: schema.cluster.clone(),
                    message: "empty cluster id".into(),
                });
            }
            let y = parse_f64(y_idx, &schema.y)?;
            let mut xr = Vec::with_capacity(x_idx.len());
            for (idx, name) in x_idx.iter().zip(&schema.x) {
                xr.push(parse_f64(*idx, name)?);
            }
            let mut tr = Vec::with_capacity(t_idx.len());
            for (idx, name) in t_idx.iter().zip(&schema.t) {
                tr.push(parse_f64(*idx, name)?);
            }
            let slot = match order_of.get(&id) {
                Some(&i) => i,
                None => {
                    order_of.insert(id.clone(), groups.len());
                    groups.push((
                        id.clone(),
                        Rows { y: vec![], x: vec![], t: vec![], order: vec![] },
                    ));
                    groups.len() - 1
                }
            };
            let rows = &mut groups[slot].1;
            let order = match order_idx {
                Some(idx) => {
                    let name = schema.order.as_deref().unwrap();
                    let raw = record.get(idx).unwrap_or("").trim();
                    raw.parse::<i64>().map_err(|_| Error::Parse {
                        line,
                        column: name.to_string(),
                        message: format!("`{raw}` is not an integer observation order"),
                    })?
                }
                None => rows.y.len() as i64,
            };
            rows.y.push(y);
            rows.x.push(xr);
            rows.t.push(tr);
            rows.order.push(order);
        }

        if groups.is_empty() {
            return Err(Error::EmptyDataset("input file has no data rows".into()));
        }

        let declared_k = schema.x.len();
        let inject = !schema.has_intercept;
        let k = declared_k + usize::from(inject);
        let d = schema.t.len();

        let mut clusters = Vec::with_capacity(groups.len());
        for (id, rows) in groups {
            let m = rows.y.len();
            let y = DVector::from_vec(rows.y);
            let mut x = DMatrix::zeros(m, k);
            for i in 0..m {
                if inject {
                    x[(i, 0)] = 1.0;
                }
                for j in 0..declared_k {
                    x[(i, j + usize::from(inject))] = rows.x[i][j];
                }
            }
            if schema.has_intercept {
                for i in 0..m {
                    if x[(i, 0)] != 1.0 {
                        return Err(Error::Parameter(format!(
                            "declared intercept column `{}` is not identically 1 (cluster `{id}`)",
                            schema.x[0]
                        )));
                    }
                }
            }
            let mut t = DMatrix::zeros(m, d);
            for i in 0..m {
                for j in 0..d {
                    t[(i, j)] = rows.t[i][j];
                }
            }
            clusters.push(ClusterData::new(id, y, x, t, rows.order)?);
        }

        let mut x_names = Vec::with_capacity(k);
        if inject {
            x_names.push("intercept".to_string());
        }
        x_names.extend(schema.x.iter().cloned());
        Dataset::new(clusters, x_names, schema.t.clone())
    }

    /// Write the dataset back in the interchange format. The injected
    /// intercept column is not emitted; the observation order always is, so
    /// a read with the matching schema round-trips exactly.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let mut header = vec!["cluster".to_string(), "y".to_string()];
        header.extend(self.x_names.iter().skip(1).cloned());
        header.extend(self.t_names.iter().cloned());
        header.push("order".to_string());
        writeln!(w, "{}", header.join(","))?;
        for c in &self.clusters {
            for i in 0..c.len() {
                let mut fields = vec![c.id.clone(), format!("{}", c.y[i])];
                for j in 1..c.x.ncols() {
                    fields.push(format!("{}", c.x[(i, j)]));
                }
                for j in 0..c.t.ncols() {
                    fields.push(format!("{}", c.t[(i, j)]));
                }
                fields.push(format!("{}", c.obs_index[i]));
                writeln!(w, "{}", fields.join(","))?;
            }
        }
        Ok(())
    }

    /// Schema that reads back what [`Dataset::write_csv`] emits.
    pub fn round_trip_schema(&self) -> CsvSchema {
        CsvSchema {
            cluster: "cluster".into(),
            y: "y".into(),
            x: self.x_names.iter().skip(1).cloned().collect(),
            t: self.t_names.clone(),
            order: Some("order".into()),
            has_intercept: false,
        }
    }
}

/// Column mapping for the CSV interchange format.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub cluster: String,
    pub y: String,
    pub x: Vec<String>,
    pub t: Vec<String>,
    pub order: Option<String>,
    /// When true, the first `x` column is a pre-existing intercept
    /// (validated to be identically 1) and no column is injected.
    pub has_intercept: bool,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema(x: &[&str], t: &[&str], order: Option<&str>) -> CsvSchema {
        CsvSchema {
            cluster: "cluster".into(),
            y: "y".into(),
            x: x.iter().map(|s| s.to_string()).collect(),
            t: t.iter().map(|s| s.to_string()).collect(),
            order: order.map(|s| s.to_string()),
            has_intercept: false,
        }
    }

    #[test]
    fn single_cluster_with_intercept_injection() {
        let csv = "cluster,y,age,t1\nA,1.0,3,0.1\nA,2.0,4,0.2\nA,3.0,5,0.3\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["age"], &["t1"], None)).unwrap();
        assert_eq!(ds.n_clusters(), 1);
        assert_eq!(ds.clusters[0].len(), 3);
        assert_eq!(ds.k(), 2);
        assert_eq!(ds.d(), 1);
        assert!(ds.clusters[0].x.column(0).iter().all(|&v| v == 1.0));
        assert_eq!(ds.x_names, vec!["intercept", "age"]);
        assert_eq!(ds.clusters[0].obs_index, vec![0, 1, 2]);
    }

    #[test]
    fn interleaved_clusters_preserve_within_cluster_order() {
        let csv = "cluster,y,x1,t1\nB,1,0,0.1\nA,2,0,0.2\nB,3,0,0.3\nA,4,0,0.4\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap();
        assert_eq!(ds.n_clusters(), 2);
        assert_eq!(ds.clusters[0].id, "B");
        assert_eq!(ds.clusters[0].y.as_slice(), &[1.0, 3.0]);
        assert_eq!(ds.clusters[1].id, "A");
        assert_eq!(ds.clusters[1].y.as_slice(), &[2.0, 4.0]);
    }

    #[test]
    fn cd4_style_schema_dimensions() {
        let mut csv = String::from("id,cd4,smoking,drug,partners,depression,time,age\n");
        for i in 0..4 {
            csv.push_str(&format!("s{},{},1,0,2,{},{},{}\n", i % 2, 500 + i, i, 0.1 * i as f64, 30 + i));
        }
        let sch = CsvSchema {
            cluster: "id".into(),
            y: "cd4".into(),
            x: vec!["smoking".into(), "drug".into(), "partners".into(), "depression".into()],
            t: vec!["time".into(), "age".into()],
            order: None,
            has_intercept: false,
        };
        let ds = Dataset::read_csv(csv.as_bytes(), &sch).unwrap();
        assert_eq!(ds.k(), 5);
        assert_eq!(ds.d(), 2);
    }

    #[test]
    fn missing_column_is_named() {
        let csv = "cluster,y,t1\nA,1,0.5\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap_err();
        match err {
            Error::MissingColumn(name) => assert_eq!(name, "x1"),
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn bad_cell_reports_line_number() {
        let csv = "cluster,y,x1,t1\nA,1,0,0.5\nA,oops,0,0.6\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => {
                assert_eq!(line, 3);
                assert_eq!(column, "y");
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn empty_file_errors() {
        let csv = "cluster,y,x1,t1\n";
        let err = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap_err();
        assert!(matches!(err, Error::EmptyDataset(_)));
    }

    #[test]
    fn scientific_notation_accepted() {
        let csv = "cluster,y,x1,t1\nA,1.5e2,-2E-3,5e-1\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap();
        assert_eq!(ds.clusters[0].y[0], 150.0);
        assert_eq!(ds.clusters[0].x[(0, 1)], -0.002);
        assert_eq!(ds.clusters[0].t[(0, 0)], 0.5);
    }

    #[test]
    fn order_column_is_used() {
        let csv = "cluster,y,x1,t1,visit\nA,1,0,0.1,0\nA,2,0,0.2,2\nA,3,0,0.3,5\n";
        let ds =
            Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], Some("visit"))).unwrap();
        assert_eq!(ds.clusters[0].obs_index, vec![0, 2, 5]);
    }

    #[test]
    fn round_trip_is_identity() {
        let csv = "cluster,y,x1,t1,t2\nA,1.25,-0.75,0.1,0.9\nB,0.3333333333333333,2.5,0.2,0.8\nA,7e-12,1.0,0.5,0.5\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1", "t2"], None)).unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = Dataset::read_csv(buf.as_slice(), &ds.round_trip_schema()).unwrap();
        assert_eq!(ds.n_clusters(), back.n_clusters());
        for (a, b) in ds.clusters.iter().zip(&back.clusters) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.y, b.y);
            assert_eq!(a.x, b.x);
            assert_eq!(a.t, b.t);
            assert_eq!(a.obs_index, b.obs_index);
        }
    }

    #[test]
    fn validate_flags_nan_and_degenerate_support() {
        let csv = "cluster,y,x1,t1\nA,1,0,0.5\nA,NaN,0,0.5\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap();
        let findings = ds.validate();
        assert!(findings.iter().any(|f| f.severity == Severity::Error
            && f.message.contains("cluster `A`")
            && f.message.contains("observation 2")));
        assert!(findings
            .iter()
            .any(|f| f.message.contains("degenerate support") && f.message.contains("t1")));
    }

    #[test]
    fn well_formed_dataset_has_no_findings() {
        let csv = "cluster,y,x1,t1\nA,1,0.5,0.1\nA,2,1.5,0.9\nB,3,-0.5,0.4\nB,4,0.0,0.6\n";
        let ds = Dataset::read_csv(csv.as_bytes(), &schema(&["x1"], &["t1"], None)).unwrap();
        assert!(ds.validate().is_empty());
    }

    #[test]
    fn declared_intercept_is_validated() {
        let csv = "cluster,y,one,x1,t1\nA,1,1,0.5,0.1\nA,2,1,0.7,0.9\n";
        let mut sch = schema(&["one", "x1"], &["t1"], None);
        sch.has_intercept = true;
        let ds = Dataset::read_csv(csv.as_bytes(), &sch).unwrap();
        assert_eq!(ds.k(), 2);

        let bad = "cluster,y,one,x1,t1\nA,1,1,0.5,0.1\nA,2,0,0.7,0.9\n";
        let err = Dataset::read_csv(bad.as_bytes(), &sch).unwrap_err();
        assert!(matches!(err, Error::Parameter(_)));
    }
}
