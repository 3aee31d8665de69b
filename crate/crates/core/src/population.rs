//! Finite-population data model: covariates, potential outcomes, assignments,
//! and the moment quantities every criterion and efficiency formula consumes.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// R² may leave [0, 1] by at most this much before it is treated as an input error.
pub const R2_CLAMP_TOL: f64 = 1e-10;

/// A finite population of `N` units with `p` covariates and, optionally,
/// the complete table of potential outcomes.
///
/// Covariates are stored row-major by unit.
#[derive(Debug, Clone)]
pub struct Population {
    x: Vec<f64>,
    n_units: usize,
    p: usize,
    y1: Option<Vec<f64>>,
    y0: Option<Vec<f64>>,
    n_treated: usize,
    n_control: usize,
    col_means: OnceLock<Vec<f64>>,
}

impl Population {
    /// Build a design-only population (covariates, no outcomes).
    pub fn design_only(x: DMatrix<f64>, n_treated: usize) -> Result<Self> {
        Self::build(x, None, None, n_treated)
    }

    /// Build a population with the full science table.
    pub fn with_outcomes(x: DMatrix<f64>, y1: Vec<f64>, y0: Vec<f64>, n_treated: usize) -> Result<Self> {
        Self::build(x, Some(y1), Some(y0), n_treated)
    }

    /// Covariates plus optional outcomes; `y1` and `y0` must be both present or both absent.
    pub fn build(x: DMatrix<f64>, y1: Option<Vec<f64>>, y0: Option<Vec<f64>>, n_treated: usize) -> Result<Self> {
        let n = x.nrows();
        let p = x.ncols();
        if n < 2 {
            return Err(Error::DegeneratePopulation(format!("need at least 2 units, got {n}")));
        }
        if n_treated == 0 || n_treated >= n {
            return Err(Error::InvalidSplit(format!("n_treated={n_treated} with N={n}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegeneratePopulation("covariates contain non-finite values".into()));
        }
        match (&y1, &y0) {
            (Some(a), Some(b)) => {
                if a.len() != n || b.len() != n {
                    return Err(Error::Shape(format!("outcome length {}/{} vs N={n}", a.len(), b.len())));
                }
                if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
                    return Err(Error::DegeneratePopulation("outcomes contain non-finite values".into()));
                }
            }
            (None, None) => {}
            _ => {
                return Err(Error::DegeneratePopulation(
                    "potential outcomes must be given for both arms or neither".into(),
                ))
            }
        }
        let mut rows = Vec::with_capacity(n * p);
        for i in 0..n {
            for j in 0..p {
                rows.push(x[(i, j)]);
            }
        }
        Ok(Self {
            x: rows,
            n_units: n,
            p,
            y1,
            y0,
            n_treated,
            n_control: n - n_treated,
            col_means: OnceLock::new(),
        })
    }

    pub fn n(&self) -> usize {
        self.n_units
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn n_treated(&self) -> usize {
        self.n_treated
    }

    pub fn n_control(&self) -> usize {
        self.n_control
    }

    /// Covariate row of unit `i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    /// Row-major covariate buffer.
    pub fn rows(&self) -> &[f64] {
        &self.x
    }

    pub fn x_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n_units, self.p, &self.x)
    }

    pub fn y1(&self) -> Option<&[f64]> {
        self.y1.as_deref()
    }

    pub fn y0(&self) -> Option<&[f64]> {
        self.y0.as_deref()
    }

    pub fn has_outcomes(&self) -> bool {
        self.y1.is_some()
    }

    pub fn col_means(&self) -> &[f64] {
        self.col_means.get_or_init(|| {
            let mut m = vec![0.0; self.p];
            for i in 0..self.n_units {
                for (acc, v) in m.iter_mut().zip(self.row(i)) {
                    *acc += v;
                }
            }
            let n = self.n_units as f64;
            m.iter_mut().for_each(|v| *v /= n);
            m
        })
    }

    /// Average causal effect over the finite population.
    pub fn tau(&self) -> Result<f64> {
        let (y1, y0) = self.outcomes()?;
        Ok(y1.iter().zip(y0).map(|(a, b)| a - b).sum::<f64>() / self.n_units as f64)
    }

    pub fn outcomes(&self) -> Result<(&[f64], &[f64])> {
        match (&self.y1, &self.y0) {
            (Some(a), Some(b)) => Ok((a, b)),
            _ => Err(Error::MissingOutcomes),
        }
    }

    /// Sub-population over the given unit indices with a new treated count.
    pub fn subset(&self, idx: &[usize], n_treated: usize) -> Result<Population> {
        let mut x = DMatrix::zeros(idx.len(), self.p);
        for (r, &i) in idx.iter().enumerate() {
            for j in 0..self.p {
                x[(r, j)] = self.x[i * self.p + j];
            }
        }
        let pick = |v: &Option<Vec<f64>>| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
        Population::build(x, pick(&self.y1), pick(&self.y0), n_treated)
    }

    /// Replace the treated count (e.g. to rebalance an ingested file).
    pub fn with_n_treated(&self, n_treated: usize) -> Result<Population> {
        Population::build(self.x_matrix(), self.y1.clone(), self.y0.clone(), n_treated)
    }

    /// Load a population from CSV: a header row, one row per unit, optional
    /// `y1`/`y0` columns, every other column a covariate in file order.
    ///
    /// `n_treated` defaults to `floor(N / 2)`.
    pub fn from_csv_path(path: impl AsRef<Path>, n_treated: Option<usize>) -> Result<Population> {
        let file = std::fs::File::open(path.as_ref())
            .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
        Self::from_csv_reader(file, n_treated)
    }

    pub fn from_csv_reader<R: std::io::Read>(reader: R, n_treated: Option<usize>) -> Result<Population> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let y1_col = headers.iter().position(|h| h == "y1");
        let y0_col = headers.iter().position(|h| h == "y0");
        let cov_cols: Vec<usize> = (0..headers.len()).filter(|&c| Some(c) != y1_col && Some(c) != y0_col).collect();

        let mut xs = Vec::new();
        let mut y1 = Vec::new();
        let mut y0 = Vec::new();
        let mut n = 0usize;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let cell = |c: usize| -> Result<f64> {
                let raw = rec.get(c).unwrap_or("");
                let v: f64 = raw
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: column '{}' = '{raw}' is not a number", line + 1, &headers[c])))?;
                if !v.is_finite() {
                    return Err(Error::Parse(format!("row {}: column '{}' is not finite", line + 1, &headers[c])));
                }
                Ok(v)
            };
            for &c in &cov_cols {
                xs.push(cell(c)?);
            }
            if let Some(c) = y1_col {
                y1.push(cell(c)?);
            }
            if let Some(c) = y0_col {
                y0.push(cell(c)?);
            }
            n += 1;
        }
        let x = DMatrix::from_row_slice(n, cov_cols.len(), &xs);
        let nt = n_treated.unwrap_or(n / 2);
        let y1 = y1_col.map(|_| y1);
        let y0 = y0_col.map(|_| y0);
        Population::build(x, y1, y0, nt)
    }

    /// Write as CSV with covariate columns `x1..xp` and, when present, `y1`, `y0`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (1..=self.p).map(|j| format!("x{j}")).collect();
        if self.has_outcomes() {
            header.push("y1".into());
            header.push("y0".into());
        }
        wtr.write_record(&header)?;
        for i in 0..self.n_units {
            let mut rec: Vec<String> = self.row(i).iter().map(|v| format!("{v:?}")).collect();
            if let (Some(a), Some(b)) = (&self.y1, &self.y0) {
                rec.push(format!("{:?}", a[i]));
                rec.push(format!("{:?}", b[i]));
            }
            wtr.write_record(&rec)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Binary treatment indicator over the units of a population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Assignment {
    w: Vec<u8>,
}

impl Assignment {
    /// Validates that `w` is binary with exactly `n_treated` ones.
    pub fn new(w: Vec<u8>, n_treated: usize) -> Result<Self> {
        if w.iter().any(|&v| v > 1) {
            return Err(Error::InvalidAssignment("entries must be 0 or 1".into()));
        }
        let s: usize = w.iter().map(|&v| v as usize).sum();
        if s != n_treated {
            return Err(Error::InvalidAssignment(format!("{s} treated units, expected {n_treated}")));
        }
        Ok(Self { w })
    }

    pub(crate) fn from_raw(w: Vec<u8>) -> Self {
        Self { w }
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    pub fn n_treated(&self) -> usize {
        self.w.iter().map(|&v| v as usize).sum()
    }

    pub fn is_treated(&self, i: usize) -> bool {
        self.w[i] == 1
    }

    /// The complementary assignment `1 - w`.
    pub fn flipped(&self) -> Assignment {
        Assignment { w: self.w.iter().map(|&v| 1 - v).collect() }
    }

    fn check_for(&self, pop: &Population) -> Result<()> {
        if self.w.len() != pop.n() {
            return Err(Error::Shape(format!("assignment length {} vs N={}", self.w.len(), pop.n())));
        }
        if self.n_treated() != pop.n_treated() {
            return Err(Error::InvalidAssignment(format!(
                "{} treated units, population expects {}",
                self.n_treated(),
                pop.n_treated()
            )));
        }
        Ok(())
    }
}

/// Finite-population variances and covariances (divisor `N - 1`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub s2_x: DMatrix<f64>,
    pub s2_y1: Option<f64>,
    pub s2_y0: Option<f64>,
    pub s2_tau: Option<f64>,
    pub s2_x_y1: Option<DVector<f64>>,
    pub s2_x_y0: Option<DVector<f64>>,
    pub r1: f64,
    pub r0: f64,
}

/// Covariance of `sqrt(N) (tau_hat - tau, D)` under complete randomization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VMatrix {
    pub v_tt: f64,
    pub v_tx: DVector<f64>,
    pub v_xx: DMatrix<f64>,
}

pub fn finite_population_moments(pop: &Population) -> Result<Moments> {
    let n = pop.n();
    if n < 2 {
        return Err(Error::DegeneratePopulation(format!("need at least 2 units, got {n}")));
    }
    let p = pop.p();
    let nf = n as f64;
    let denom = nf - 1.0;
    let xbar = pop.col_means();

    let mut s2_x = DMatrix::zeros(p, p);
    let mut centered = vec![0.0; p];
    for i in 0..n {
        for (c, (v, m)) in centered.iter_mut().zip(pop.row(i).iter().zip(xbar)) {
            *c = v - m;
        }
        for a in 0..p {
            for b in a..p {
                s2_x[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..p {
        for b in a..p {
            let v = s2_x[(a, b)] / denom;
            s2_x[(a, b)] = v;
            s2_x[(b, a)] = v;
        }
    }

    let r1 = pop.n_treated() as f64 / nf;
    let r0 = pop.n_control() as f64 / nf;

    let (s2_y1, s2_y0, s2_tau, s2_x_y1, s2_x_y0) = match (pop.y1(), pop.y0()) {
        (Some(y1), Some(y0)) => {
            let m1 = y1.iter().sum::<f64>() / nf;
            let m0 = y0.iter().sum::<f64>() / nf;
            let tau = m1 - m0;
            let mut v1 = 0.0;
            let mut v0 = 0.0;
            let mut vt = 0.0;
            let mut c1 = DVector::zeros(p);
            let mut c0 = DVector::zeros(p);
            for i in 0..n {
                let d1 = y1[i] - m1;
                let d0 = y0[i] - m0;
                let dt = (y1[i] - y0[i]) - tau;
                v1 += d1 * d1;
                v0 += d0 * d0;
                vt += dt * dt;
                for (j, (x, m)) in pop.row(i).iter().zip(xbar).enumerate() {
                    c1[j] += d1 * (x - m);
                    c0[j] += d0 * (x - m);
                }
            }
            (
                Some(v1 / denom),
                Some(v0 / denom),
                Some(vt / denom),
                Some(c1 / denom),
                Some(c0 / denom),
            )
        }
        _ => (None, None, None, None, None),
    };

    Ok(Moments { n, s2_x, s2_y1, s2_y0, s2_tau, s2_x_y1, s2_x_y0, r1, r0 })
}

/// `Σ_D = S²_X / (N r0 r1)`, the covariance of the covariate mean difference.
pub fn sigma_d(m: &Moments, n: usize) -> Result<DMatrix<f64>> {
    if !(m.r0 > 0.0 && m.r1 > 0.0) {
        return Err(Error::InvalidSplit(format!("r0={}, r1={}", m.r0, m.r1)));
    }
    Ok(&m.s2_x / (n as f64 * m.r0 * m.r1))
}

/// `V_xx`, computed as `N Σ_D` so that the two agree exactly.
pub fn v_xx(m: &Moments) -> Result<DMatrix<f64>> {
    Ok(sigma_d(m, m.n)? * m.n as f64)
}

pub fn v_matrix(m: &Moments) -> Result<VMatrix> {
    if !(m.r0 > 0.0 && m.r1 > 0.0) {
        return Err(Error::InvalidSplit(format!("r0={}, r1={}", m.r0, m.r1)));
    }
    let (s2_y1, s2_y0, s2_tau, c1, c0) = match (&m.s2_y1, &m.s2_y0, &m.s2_tau, &m.s2_x_y1, &m.s2_x_y0) {
        (Some(a), Some(b), Some(c), Some(d), Some(e)) => (*a, *b, *c, d, e),
        _ => return Err(Error::MissingOutcomes),
    };
    let v_tt = s2_y1 / m.r1 + s2_y0 / m.r0 - s2_tau;
    let v_tx = c1 / m.r1 + c0 / m.r0;
    Ok(VMatrix { v_tt, v_tx, v_xx: v_xx(m)? })
}

/// `β = V_xx⁻¹ V_xτ`.
pub fn projection_beta(v: &VMatrix) -> Result<DVector<f64>> {
    linalg::solve_spd(&v.v_xx, &v.v_tx, "")
}

/// `R² = V_τx V_xx⁻¹ V_xτ / V_ττ`, clamped into [0, 1] when the excursion is tiny.
pub fn squared_multiple_correlation(v: &VMatrix) -> Result<f64> {
    if !(v.v_tt > 0.0) {
        return Err(Error::UndefinedRSquared(format!("V_tt = {}", v.v_tt)));
    }
    let beta = projection_beta(v)?;
    let r2 = v.v_tx.dot(&beta) / v.v_tt;
    if !(-R2_CLAMP_TOL..=1.0 + R2_CLAMP_TOL).contains(&r2) {
        return Err(Error::UndefinedRSquared(format!("R^2 = {r2} is outside [0, 1]")));
    }
    Ok(r2.clamp(0.0, 1.0))
}

/// Difference-in-means estimator of the average causal effect.
pub fn diff_in_means_tau(pop: &Population, w: &Assignment) -> Result<f64> {
    let (y1, y0) = pop.outcomes()?;
    w.check_for(pop)?;
    let mut st = 0.0;
    let mut sc = 0.0;
    for (i, &wi) in w.as_slice().iter().enumerate() {
        if wi == 1 {
            st += y1[i];
        } else {
            sc += y0[i];
        }
    }
    Ok(st / pop.n_treated() as f64 - sc / pop.n_control() as f64)
}

/// `D = X̄_t - X̄_c`.
pub fn covariate_diff(pop: &Population, w: &Assignment) -> Result<DVector<f64>> {
    w.check_for(pop)?;
    let p = pop.p();
    let mut st = vec![0.0; p];
    let mut sc = vec![0.0; p];
    for (i, &wi) in w.as_slice().iter().enumerate() {
        let acc = if wi == 1 { &mut st } else { &mut sc };
        for (a, v) in acc.iter_mut().zip(pop.row(i)) {
            *a += v;
        }
    }
    let nt = pop.n_treated() as f64;
    let nc = pop.n_control() as f64;
    Ok(DVector::from_iterator(p, st.iter().zip(&sc).map(|(t, c)| t / nt - c / nc)))
}
