//! Domain types, shape/SPD validation and the on-disk data model.
//!
//! A [`MatrixSeries`] is a time-indexed sequence of `p x n` real matrices with
//! a shared shape. On disk it is a long CSV with header `t,row,col,value`
//! (1-based row/col) plus a JSON manifest carrying the shape and optional
//! labels. Missing cells are an error, never zeros.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative symmetry tolerance used by [`validate_spd`].
pub const SPD_SYMMETRY_TOL: f64 = 1e-8;

/// One observation: a `p x n` matrix at an integer time index (1-based).
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixObs {
    pub t: i64,
    pub y: DMatrix<f64>,
}

/// Time-indexed sequence of `p x n` matrices with a shared shape manifest.
///
/// Time indices are strictly increasing but may skip values; all operations
/// treat observations in manifest order.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixSeries {
    p: usize,
    n: usize,
    obs: Vec<MatrixObs>,
    pub row_labels: Option<Vec<String>>,
    pub col_labels: Option<Vec<String>>,
}

/// JSON manifest accompanying the long CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesManifest {
    pub p: usize,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_labels: Option<Vec<String>>,
}

impl MatrixSeries {
    pub fn new(p: usize, n: usize) -> Result<Self> {
        if p == 0 || n == 0 {
            return Err(Error::shape(format!("shape {p}x{n} must be at least 1x1")));
        }
        Ok(MatrixSeries {
            p,
            n,
            obs: Vec::new(),
            row_labels: None,
            col_labels: None,
        })
    }

    pub fn from_obs(p: usize, n: usize, obs: Vec<MatrixObs>) -> Result<Self> {
        let mut s = MatrixSeries::new(p, n)?;
        for o in obs {
            s.push(o)?;
        }
        Ok(s)
    }

    /// Append an observation, enforcing shape, finiteness and increasing time.
    pub fn push(&mut self, obs: MatrixObs) -> Result<()> {
        if obs.y.nrows() != self.p || obs.y.ncols() != self.n {
            return Err(Error::shape(format!(
                "observation at t={} has shape {}x{}, series is {}x{}",
                obs.t,
                obs.y.nrows(),
                obs.y.ncols(),
                self.p,
                self.n
            )));
        }
        if obs.y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parse(format!("non-finite entry at t={}", obs.t)));
        }
        if let Some(last) = self.obs.last() {
            if obs.t <= last.t {
                return Err(Error::Parse(format!(
                    "time indices must be strictly increasing: {} after {}",
                    obs.t, last.t
                )));
            }
        }
        self.obs.push(obs);
        Ok(())
    }

    pub fn p(&self) -> usize {
        self.p
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn len(&self) -> usize {
        self.obs.len()
    }
    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }
    pub fn obs(&self) -> &[MatrixObs] {
        &self.obs
    }
    pub fn get(&self, i: usize) -> &MatrixObs {
        &self.obs[i]
    }

    /// Sub-series of observations `[start, end)` by manifest position.
    pub fn window(&self, start: usize, end: usize) -> Result<MatrixSeries> {
        if start >= end || end > self.obs.len() {
            return Err(Error::shape(format!(
                "window [{start},{end}) out of range for series of length {}",
                self.obs.len()
            )));
        }
        Ok(MatrixSeries {
            p: self.p,
            n: self.n,
            obs: self.obs[start..end].to_vec(),
            row_labels: self.row_labels.clone(),
            col_labels: self.col_labels.clone(),
        })
    }

    /// Mean of all observation matrices.
    pub fn mean(&self) -> Result<DMatrix<f64>> {
        if self.obs.is_empty() {
            return Err(Error::Degenerate("mean of empty series".into()));
        }
        let mut m = DMatrix::zeros(self.p, self.n);
        for o in &self.obs {
            m += &o.y;
        }
        Ok(m / self.obs.len() as f64)
    }

    pub fn manifest(&self) -> SeriesManifest {
        SeriesManifest {
            p: self.p,
            n: self.n,
            row_labels: self.row_labels.clone(),
            col_labels: self.col_labels.clone(),
        }
    }

    /// Write the long CSV (`t,row,col,value`). Values use the shortest
    /// round-trip decimal representation, so parse-back is bit-exact.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["t", "row", "col", "value"])?;
        for o in &self.obs {
            for i in 0..self.p {
                for j in 0..self.n {
                    wtr.write_record([
                        o.t.to_string(),
                        (i + 1).to_string(),
                        (j + 1).to_string(),
                        format!("{}", o.y[(i, j)]),
                    ])?;
                }
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Parse the long CSV against a manifest. Every `(t,row,col)` cell of each
    /// observed `t` must be present exactly once.
    pub fn read_csv<R: Read>(r: R, manifest: &SeriesManifest) -> Result<MatrixSeries> {
        let (p, n) = (manifest.p, manifest.n);
        if p == 0 || n == 0 {
            return Err(Error::shape("manifest shape must be at least 1x1"));
        }
        let mut rdr = csv::Reader::from_reader(r);
        {
            let hdr = rdr.headers()?;
            let expect = ["t", "row", "col", "value"];
            if hdr.len() != 4 || hdr.iter().zip(expect).any(|(a, b)| a != b) {
                return Err(Error::Parse(format!(
                    "expected header t,row,col,value, got {:?}",
                    hdr
                )));
            }
        }
        let mut cells: BTreeMap<i64, Vec<Option<f64>>> = BTreeMap::new();
        for rec in rdr.records() {
            let rec = rec?;
            let t: i64 = rec[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad time index {:?}", &rec[0])))?;
            let row: usize = rec[1]
                .parse()
                .map_err(|_| Error::Parse(format!("bad row index {:?}", &rec[1])))?;
            let col: usize = rec[2]
                .parse()
                .map_err(|_| Error::Parse(format!("bad col index {:?}", &rec[2])))?;
            let value: f64 = rec[3]
                .parse()
                .map_err(|_| Error::Parse(format!("bad value {:?}", &rec[3])))?;
            if row == 0 || row > p || col == 0 || col > n {
                return Err(Error::Parse(format!(
                    "cell ({t},{row},{col}) outside {p}x{n} grid"
                )));
            }
            if !value.is_finite() {
                return Err(Error::Parse(format!(
                    "non-finite value at ({t},{row},{col})"
                )));
            }
            let slot = cells.entry(t).or_insert_with(|| vec![None; p * n]);
            let k = (row - 1) * n + (col - 1);
            if slot[k].is_some() {
                return Err(Error::Parse(format!("duplicate cell ({t},{row},{col})")));
            }
            slot[k] = Some(value);
        }
        let mut series = MatrixSeries::new(p, n)?;
        series.row_labels = manifest.row_labels.clone();
        series.col_labels = manifest.col_labels.clone();
        for (t, flat) in cells {
            let mut y = DMatrix::zeros(p, n);
            for i in 0..p {
                for j in 0..n {
                    y[(i, j)] = flat[i * n + j].ok_or_else(|| {
                        Error::Parse(format!("missing cell (t={t},row={},col={})", i + 1, j + 1))
                    })?;
                }
            }
            series.push(MatrixObs { t, y })?;
        }
        Ok(series)
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv_path(csv_path: &Path, manifest_path: &Path) -> Result<MatrixSeries> {
        let manifest: SeriesManifest =
            serde_json::from_reader(std::fs::File::open(manifest_path)?)?;
        MatrixSeries::read_csv(std::fs::File::open(csv_path)?, &manifest)
    }
}

/// True iff `a` is symmetric within `tol * max|a|` and Cholesky succeeds.
pub fn validate_spd(a: &DMatrix<f64>, tol: f64) -> Result<bool> {
    if a.nrows() != a.ncols() {
        return Err(Error::shape(format!(
            "SPD check needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Parse("SPD check on non-finite matrix".into()));
    }
    let amax = a
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let asym = (a - a.transpose())
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    if asym > tol * amax {
        return Ok(false);
    }
    Ok(a.clone().cholesky().is_some())
}

/// Validate and return an error naming `what` if `a` is not SPD.
pub(crate) fn require_spd(a: &DMatrix<f64>, what: &str) -> Result<()> {
    if !validate_spd(a, SPD_SYMMETRY_TOL)? {
        return Err(Error::not_spd(what.to_string()));
    }
    Ok(())
}

/// Known column covariance model: matrix-normal likelihood rows and a
/// conjugate matrix-normal prior on the mean, prior scale `sigma_l / phi`.
#[derive(Debug, Clone)]
pub struct KnownVModel {
    pub m: DMatrix<f64>,
    pub sigma_l: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub phi: f64,
}

impl KnownVModel {
    pub fn new(m: DMatrix<f64>, sigma_l: DMatrix<f64>, v: DMatrix<f64>, phi: f64) -> Result<Self> {
        let (p, n) = (m.nrows(), m.ncols());
        if sigma_l.nrows() != p || sigma_l.ncols() != p {
            return Err(Error::shape(format!(
                "row covariance must be {p}x{p}, got {}x{}",
                sigma_l.nrows(),
                sigma_l.ncols()
            )));
        }
        if v.nrows() != n || v.ncols() != n {
            return Err(Error::shape(format!(
                "column covariance must be {n}x{n}, got {}x{}",
                v.nrows(),
                v.ncols()
            )));
        }
        require_spd(&sigma_l, "likelihood row covariance")?;
        require_spd(&v, "column covariance")?;
        if !(phi > 0.0) || !phi.is_finite() {
            return Err(Error::domain(format!("phi must be positive, got {phi}")));
        }
        Ok(KnownVModel { m, sigma_l, v, phi })
    }

    pub fn p(&self) -> usize {
        self.m.nrows()
    }
    pub fn n(&self) -> usize {
        self.m.ncols()
    }
}

/// Unknown column covariance model: inverse-Wishart prior on `V`, conditional
/// matrix-normal prior on the mean with precision factors `phi` and `rho`.
#[derive(Debug, Clone)]
pub struct NIWModel {
    pub m: DMatrix<f64>,
    pub sigma_l: DMatrix<f64>,
    pub phi: f64,
    pub rho: f64,
    pub psi: DMatrix<f64>,
    /// Degrees of freedom, must exceed `2n`.
    pub m_dof: f64,
}

impl NIWModel {
    pub fn new(
        m: DMatrix<f64>,
        sigma_l: DMatrix<f64>,
        phi: f64,
        rho: f64,
        psi: DMatrix<f64>,
        m_dof: f64,
    ) -> Result<Self> {
        let (p, n) = (m.nrows(), m.ncols());
        if sigma_l.nrows() != p || sigma_l.ncols() != p {
            return Err(Error::shape("row covariance shape mismatch"));
        }
        if psi.nrows() != n || psi.ncols() != n {
            return Err(Error::shape("inverse Wishart location shape mismatch"));
        }
        require_spd(&sigma_l, "likelihood row covariance")?;
        require_spd(&psi, "inverse Wishart location")?;
        if !(phi > 0.0) || !(rho > 0.0) {
            return Err(Error::domain("phi and rho must be positive"));
        }
        if !(m_dof > 2.0 * n as f64) {
            return Err(Error::domain(format!(
                "degrees of freedom {m_dof} must exceed 2n = {}",
                2 * n
            )));
        }
        Ok(NIWModel {
            m,
            sigma_l,
            phi,
            rho,
            psi,
            m_dof,
        })
    }

    /// Prior precision on the mean, `k = rho * phi`.
    pub fn k(&self) -> f64 {
        self.rho * self.phi
    }
    pub fn p(&self) -> usize {
        self.m.nrows()
    }
    pub fn n(&self) -> usize {
        self.m.ncols()
    }
}

/// Posterior state under the known-V model after absorbing `t_count` matrices.
#[derive(Debug, Clone)]
pub struct PosteriorKnownV {
    pub m_star: DMatrix<f64>,
    pub sigma_star: DMatrix<f64>,
    pub t_count: usize,
}

impl PosteriorKnownV {
    pub fn new(m_star: DMatrix<f64>, sigma_star: DMatrix<f64>, t_count: usize) -> Result<Self> {
        if sigma_star.nrows() != m_star.nrows() || !sigma_star.is_square() {
            return Err(Error::shape("posterior row covariance shape mismatch"));
        }
        require_spd(&sigma_star, "posterior row covariance")?;
        Ok(PosteriorKnownV {
            m_star,
            sigma_star,
            t_count,
        })
    }
}

/// Posterior state under the NIW model.
#[derive(Debug, Clone)]
pub struct PosteriorNIW {
    pub m_star: DMatrix<f64>,
    pub k_star: f64,
    pub m_star_dof: f64,
    pub psi_star: DMatrix<f64>,
    pub t_count: usize,
}

impl PosteriorNIW {
    pub fn new(
        m_star: DMatrix<f64>,
        k_star: f64,
        m_star_dof: f64,
        psi_star: DMatrix<f64>,
        t_count: usize,
    ) -> Result<Self> {
        let n = m_star.ncols();
        if psi_star.nrows() != n || psi_star.ncols() != n {
            return Err(Error::shape("posterior Psi shape mismatch"));
        }
        require_spd(&psi_star, "posterior Psi")?;
        if !(k_star > 0.0) {
            return Err(Error::domain("posterior precision must be positive"));
        }
        if !(m_star_dof > 2.0 * n as f64) {
            return Err(Error::domain(format!(
                "posterior dof {m_star_dof} must exceed 2n = {}",
                2 * n
            )));
        }
        Ok(PosteriorNIW {
            m_star,
            k_star,
            m_star_dof,
            psi_star,
            t_count,
        })
    }
}
