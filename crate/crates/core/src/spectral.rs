//! SVD diagnostics, truncated pseudo-inverses and best rank-d approximations.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numfmt::{format_f64, parse_f64};

/// Relative tolerance separating numerical rank from floating noise.
pub const RANK_TOL: f64 = 1e-9;

/// Thin SVD with singular values in non-increasing order.
#[derive(Debug, Clone)]
pub struct SortedSvd {
    pub u: DMatrix<f64>,
    pub sigma: DVector<f64>,
    pub v_t: DMatrix<f64>,
}

impl SortedSvd {
    pub fn new(m: &DMatrix<f64>) -> Self {
        let k = m.nrows().min(m.ncols());
        if k == 0 {
            return SortedSvd {
                u: DMatrix::zeros(m.nrows(), 0),
                sigma: DVector::zeros(0),
                v_t: DMatrix::zeros(0, m.ncols()),
            };
        }
        let fm = faer::Mat::<f64>::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)]);
        let svd = fm.thin_svd();
        let (u, s, v) = (svd.u(), svd.s_diagonal(), svd.v());
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| s[j].total_cmp(&s[i]));
        SortedSvd {
            u: DMatrix::from_fn(m.nrows(), k, |i, j| u[(i, order[j])]),
            sigma: DVector::from_iterator(k, order.iter().map(|&i| s[i])),
            v_t: DMatrix::from_fn(k, m.ncols(), |i, j| v[(j, order[i])]),
        }
    }

    /// `sigma_i` (1-based), zero past the thin dimension.
    pub fn sigma(&self, i: usize) -> f64 {
        if i == 0 || i > self.sigma.len() {
            0.0
        } else {
            self.sigma[i - 1]
        }
    }

    pub fn rank(&self, rel_tol: f64) -> usize {
        let s1 = self.sigma(1);
        if s1 <= 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * s1).count()
    }

    /// `U_k diag(f(sigma)) V_k^T` over the first `k` triplets.
    fn recombine(&self, k: usize, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let k = k.min(self.sigma.len());
        let mut us = self.u.columns(0, k).into_owned();
        for (j, mut col) in us.column_iter_mut().enumerate() {
            col *= f(self.sigma[j]);
        }
        us * self.v_t.rows(0, k)
    }
}

/// Spectral summary of a target matrix at query rank `d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralReport {
    pub rank_numerical: usize,
    pub sigma_1: f64,
    pub sigma_d: f64,
    /// Incoherence of the top-`d` singular subspaces; `None` for the zero matrix.
    pub mu: Option<f64>,
    /// `sigma_1 / sigma_d`; `None` when `sigma_d = 0`.
    pub kappa: Option<f64>,
    pub inf_norm: f64,
}

pub fn svd_report(m: &DMatrix<f64>, d: usize) -> Result<SpectralReport> {
    let (rows, cols) = m.shape();
    if d == 0 || d > rows.min(cols) {
        return Err(Error::InvalidArgument(format!(
            "query rank d={d} must lie in 1..={} for a {rows}x{cols} matrix",
            rows.min(cols)
        )));
    }
    let svd = SortedSvd::new(m);
    let sigma_1 = svd.sigma(1);
    let sigma_d = svd.sigma(d);
    let rank_numerical = svd.rank(RANK_TOL);
    let inf_norm = m.amax();
    if sigma_1 <= 0.0 {
        return Ok(SpectralReport {
            rank_numerical: 0,
            sigma_1: 0.0,
            sigma_d: 0.0,
            mu: None,
            kappa: None,
            inf_norm,
        });
    }
    let row_mass = |mat: &DMatrix<f64>, by_rows: bool| -> f64 {
        if by_rows {
            (0..mat.nrows())
                .map(|i| (0..d).map(|j| mat[(i, j)].powi(2)).sum::<f64>())
                .fold(0.0, f64::max)
        } else {
            (0..mat.ncols())
                .map(|j| (0..d).map(|i| mat[(i, j)].powi(2)).sum::<f64>())
                .fold(0.0, f64::max)
        }
    };
    let mu_u = rows as f64 * row_mass(&svd.u, true) / d as f64;
    let mu_v = cols as f64 * row_mass(&svd.v_t, false) / d as f64;
    Ok(SpectralReport {
        rank_numerical,
        sigma_1,
        sigma_d,
        mu: Some(mu_u.max(mu_v)),
        kappa: (sigma_d > 0.0).then(|| sigma_1 / sigma_d),
        inf_norm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PinvMode {
    /// Invert the top `d` singular values. Values at the level of machine
    /// noise (`sigma_1 * eps * max(rows, cols)`) are zeroed even inside the
    /// top `d`.
    Rank(usize),
    /// Invert every singular value above `rel_tol * sigma_1`.
    Tol(f64),
}

pub fn pseudo_inverse(m: &DMatrix<f64>, mode: PinvMode) -> DMatrix<f64> {
    let svd = SortedSvd::new(m);
    let s1 = svd.sigma(1);
    if s1 <= 0.0 {
        return DMatrix::zeros(m.ncols(), m.nrows());
    }
    let (keep, floor) = match mode {
        PinvMode::Rank(d) => (d, s1 * f64::EPSILON * m.nrows().max(m.ncols()) as f64),
        PinvMode::Tol(rel) => (svd.sigma.len(), rel * s1),
    };
    svd.recombine(keep, |s| if s > floor { 1.0 / s } else { 0.0 }).transpose()
}

/// Truncation to the top `d` singular triplets.
pub fn best_rank_d(m: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    SortedSvd::new(m).recombine(d, |s| s)
}

/// `#{sigma_i > rel_tol * sigma_1}`.
pub fn numerical_rank(m: &DMatrix<f64>, rel_tol: f64) -> usize {
    SortedSvd::new(m).rank(rel_tol)
}

/// Singular values in non-increasing order.
pub fn singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    SortedSvd::new(m).sigma.iter().copied().collect()
}

/// Row-major CSV with 17 significant digits per entry.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|&x| format_f64(x)).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| parse_f64(tok).ok_or_else(|| Error::Parse(format!("line {}: bad number `{tok}`", i + 1))))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse(format!("line {}: ragged row", i + 1)));
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map(Vec::len).unwrap_or(0);
    Ok(DMatrix::from_row_iterator(rows.len(), ncols, rows.into_iter().flatten()))
}
