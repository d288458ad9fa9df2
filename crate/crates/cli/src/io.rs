//! JSON documents for mixtures and policies, sample CSV input and atomic file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use gmmsteer::{Gaussian, Gmm, GmmPolicy, PolicyBlock};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{as_config, CliError, CliResult};

/// Row-major matrix.
pub type Rows = Vec<Vec<f64>>;

pub fn to_rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

pub fn from_rows(rows: &Rows, what: &str) -> CliResult<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(CliError::Config(format!("{what} is empty")));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what} has rows of different lengths")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianDoc {
    pub mean: Vec<f64>,
    pub cov: Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmDoc {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianDoc>,
}

impl GmmDoc {
    pub fn from_gmm(g: &Gmm<f64>) -> Self {
        Self {
            weights: g.weights().iter().copied().collect(),
            components: g.components().iter().map(|c| GaussianDoc { mean: c.mean().iter().copied().collect(), cov: to_rows(c.cov()) }).collect(),
        }
    }

    pub fn to_gmm(&self) -> CliResult<Gmm<f64>> {
        if self.weights.len() != self.components.len() {
            return Err(CliError::Config(format!("{} weights for {} components", self.weights.len(), self.components.len())));
        }
        let comps = self
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| Gaussian::new(DVector::from_vec(c.mean.clone()), from_rows(&c.cov, &format!("covariance {k}"))?).map_err(as_config))
            .collect::<CliResult<Vec<_>>>()?;
        Gmm::new(DVector::from_vec(self.weights.clone()), comps).map_err(as_config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockDoc {
    pub i: usize,
    pub j: usize,
    pub ubar: Vec<f64>,
    pub l: Rows,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyDoc {
    pub horizon: usize,
    pub m: usize,
    pub source: GmmDoc,
    pub lambda: Rows,
    /// Row-major over `(i, j)`.
    pub blocks: Vec<BlockDoc>,
}

impl PolicyDoc {
    pub fn from_policy(p: &GmmPolicy<f64>) -> Self {
        let q = p.q();
        Self {
            horizon: p.horizon(),
            m: p.m(),
            source: GmmDoc::from_gmm(p.source()),
            lambda: to_rows(p.lambda()),
            blocks: p
                .blocks()
                .iter()
                .enumerate()
                .map(|(k, b)| BlockDoc { i: k / q, j: k % q, ubar: b.ubar.iter().copied().collect(), l: to_rows(&b.l) })
                .collect(),
        }
    }

    pub fn to_policy(&self) -> CliResult<GmmPolicy<f64>> {
        let lambda = from_rows(&self.lambda, "lambda")?;
        let q = lambda.ncols();
        let mut blocks = vec![None; self.blocks.len()];
        for b in &self.blocks {
            let k = b.i * q + b.j;
            if b.j >= q || k >= blocks.len() || blocks[k].is_some() {
                return Err(CliError::Config(format!("policy block ({}, {}) is out of place or repeated", b.i, b.j)));
            }
            blocks[k] = Some(PolicyBlock { ubar: DVector::from_vec(b.ubar.clone()), l: from_rows(&b.l, "feedback block")? });
        }
        let blocks = blocks.into_iter().collect::<Option<Vec<_>>>().ok_or_else(|| CliError::Config("missing policy block".into()))?;
        GmmPolicy::new(self.source.to_gmm()?, lambda, blocks, self.horizon, self.m).map_err(as_config)
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("cannot parse {}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> CliResult<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes through a temporary file in the target directory and renames it into place.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::Io(e.to_string()))?;
    tmp.write_all(contents).map_err(|e| CliError::Io(e.to_string()))?;
    tmp.as_file().sync_all().map_err(|e| CliError::Io(e.to_string()))?;
    tmp.persist(path).map_err(|e| CliError::Io(format!("cannot write {}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, to_json(value)?.as_bytes())
}

/// Samples as rows; the header must read `x0,…,x{n−1}`.
pub fn read_samples(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let header = rdr.headers().map_err(|e| CliError::Config(e.to_string()))?.clone();
    for (k, h) in header.iter().enumerate() {
        if h.trim() != format!("x{k}") {
            return Err(CliError::Config(format!("{}: column {k} is `{h}`, expected `x{k}`", path.display())));
        }
    }
    let n = header.len();
    let mut data = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| CliError::Config(format!("{}: row {} has a non-numeric value `{field}`", path.display(), line + 1)))?;
            data.push(v);
        }
    }
    if n == 0 || data.is_empty() {
        return Err(CliError::Config(format!("{} holds no samples", path.display())));
    }
    Ok(DMatrix::from_row_slice(data.len() / n, n, &data))
}

pub fn samples_csv(samples: &DMatrix<f64>) -> String {
    let n = samples.ncols();
    let mut out = (0..n).map(|k| format!("x{k}")).collect::<Vec<_>>().join(",");
    out.push('\n');
    for row in samples.row_iter() {
        out.push_str(&row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        out.push('\n');
    }
    out
}
