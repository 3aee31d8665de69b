//! Asymptotic efficiency of re-randomization designs.
//!
//! All single-stage results have the form `PRIASV = 100 (1 - v) R²`, where
//! `v` is the variance multiplier on the projected part of `τ̂`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::criteria::{self, equal_positive_spectrum, weighted_chisq_draws, EigenSpectrum, McConfig};
use crate::error::{Error, Result};
use crate::linalg;
use crate::special;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Analytic,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub alpha: f64,
    pub p: usize,
    pub r_squared: f64,
    pub v_value: f64,
    pub priasv: f64,
    pub method: Method,
    pub mc_stderr: Option<f64>,
}

impl EfficiencyReport {
    fn new(alpha: f64, p: usize, r_squared: f64, v_value: f64, method: Method, mc_stderr: Option<f64>) -> Self {
        Self { alpha, p, r_squared, v_value, priasv: 100.0 * (1.0 - v_value) * r_squared, method, mc_stderr }
    }

    /// The same report evaluated at another `R²`.
    pub fn with_r_squared(&self, r_squared: f64) -> Result<Self> {
        check_r2(r_squared)?;
        Ok(Self::new(self.alpha, self.p, r_squared, self.v_value, self.method, self.mc_stderr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointMassAngle {
    pub cos2_theta: f64,
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    Ok(())
}

fn check_r2(r2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r2) {
        return Err(Error::Range(format!("R^2 must lie in [0, 1], got {r2}")));
    }
    Ok(())
}

/// `v_{α,p} = E(χ²_p | χ²_p <= ξ_{α,p}) / p`, evaluated as `P(χ²_{p+2} <= ξ_{α,p}) / α`.
pub fn v_alpha_p(alpha: f64, p: usize) -> Result<f64> {
    check_alpha(alpha)?;
    if p == 0 {
        return Err(Error::Range("p must be >= 1".into()));
    }
    let xi = special::chisq_quantile(p as u32, alpha)?;
    Ok((special::chisq_cdf(xi, (p + 2) as f64) / alpha).min(1.0))
}

pub fn priasv_rem(alpha: f64, p: usize, r_squared: f64) -> Result<EfficiencyReport> {
    check_r2(r_squared)?;
    Ok(EfficiencyReport::new(alpha, p, r_squared, v_alpha_p(alpha, p)?, Method::Analytic, None))
}

pub fn priasv_reo(alpha: f64, r_squared: f64) -> Result<EfficiencyReport> {
    priasv_rem(alpha, 1, r_squared)
}

/// `(1 - v_{α,p}) / (1 - v_{α,1})`.
pub fn priasv_ratio_rem_over_reo(alpha: f64, p: usize) -> Result<f64> {
    Ok((1.0 - v_alpha_p(alpha, p)?) / (1.0 - v_alpha_p(alpha, 1)?))
}

/// Smallest `cos²θ` at which a point-mass ReB beats ReM; equal to the ReM/ReO ratio.
pub fn cos2_outperformance_threshold(alpha: f64, p: usize) -> Result<f64> {
    priasv_ratio_rem_over_reo(alpha, p)
}

/// `v_{α,π}` for a prior with characteristic matrix `lambda_pi`.
///
/// The report's `priasv` is per unit `R²`; use [`EfficiencyReport::with_r_squared`].
/// A rank-one `lambda_pi` is handed to [`v_alpha_pi_pointmass`].
pub fn v_alpha_pi(v_xx: &DMatrix<f64>, lambda_pi: &DMatrix<f64>, beta: &DVector<f64>, alpha: f64, mc: &McConfig) -> Result<EfficiencyReport> {
    check_alpha(alpha)?;
    let p = beta.len();
    if v_xx.nrows() != p || lambda_pi.nrows() != p || !lambda_pi.is_square() {
        return Err(Error::Shape(format!("beta has length {p}, V_xx is {}x{}, Lambda is {}x{}", v_xx.nrows(), v_xx.ncols(), lambda_pi.nrows(), lambda_pi.ncols())));
    }
    let sigma2_beta = linalg::quad_form(v_xx, beta);
    if !(sigma2_beta > 0.0) {
        return Err(Error::UndefinedAngle("beta is zero in the V_xx metric".into()));
    }

    let (lam_vals, lam_vecs) = linalg::sym_eigen_desc(lambda_pi);
    let top = lam_vals[0];
    let rank = lam_vals.iter().filter(|&&v| v > linalg::EIGEN_CLAMP * top).count();
    if top <= 0.0 {
        return Err(Error::DegeneratePrior("characteristic matrix is zero".into()));
    }
    if rank == 1 {
        let mu = lam_vecs.column(0) * top.sqrt();
        return v_alpha_pi_pointmass(v_xx, &mu.into_owned(), beta, alpha).map(|(_, r)| r);
    }
    if rank < p {
        return Err(Error::NotPositiveDefinite(format!(
            "characteristic matrix has rank {rank} of {p}; only full-rank and rank-one priors are supported"
        )));
    }

    // Λ = M Mᵀ, Mᵀ V_xx M = Q diag(λ) Qᵀ, a = Qᵀ M⁻¹ β
    let m = linalg::cholesky_lower(lambda_pi)?;
    let s = linalg::symmetrize(&(m.transpose() * v_xx * &m));
    let (lambdas, q) = linalg::sym_eigen_desc(&s);
    let m_inv_beta = m
        .clone()
        .solve_lower_triangular(beta)
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factor of Lambda is singular".into()))?;
    let a = q.transpose() * m_inv_beta;
    let weights: Vec<f64> = a.iter().map(|x| x * x / sigma2_beta).collect();
    let lambdas: Vec<f64> = lambdas.iter().map(|&l| l.max(0.0)).collect();

    let spectrum = EigenSpectrum { lambdas: lambdas.clone() };
    if equal_positive_spectrum(&spectrum.positive()).map(|(_, m)| m) == Some(p) {
        return Ok(EfficiencyReport::new(alpha, p, 1.0, v_alpha_p(alpha, p)?, Method::Analytic, None));
    }

    if mc.draws < 2 {
        return Err(Error::Range(format!("need at least 2 Monte Carlo draws, got {}", mc.draws)));
    }
    // Pass 1: the threshold. Pass 2: conditional means on the same normals.
    let xi = criteria::weighted_chisq_quantile(&spectrum, alpha, mc.draws, mc.seed)?.xi;
    let mut n_acc = 0usize;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    weighted_chisq_draws(&lambdas, mc.draws, mc.seed, |terms, total| {
        if total <= xi {
            let q: f64 = terms.iter().zip(&weights).map(|(t, w)| t * w).sum();
            n_acc += 1;
            sum += q;
            sum_sq += q * q;
        }
    });
    if n_acc < 2 {
        return Err(Error::Range("too few accepted Monte Carlo draws for v_alpha_pi".into()));
    }
    let mean = sum / n_acc as f64;
    let var = (sum_sq / n_acc as f64 - mean * mean).max(0.0) * n_acc as f64 / (n_acc - 1) as f64;
    let stderr = (var / n_acc as f64).sqrt();
    Ok(EfficiencyReport::new(alpha, p, 1.0, mean, Method::MonteCarlo, Some(stderr)))
}

/// Angle and `v_{α,π} = 1 - (1 - v_{α,1}) cos²θ` for a point-mass prior at `mu`.
///
/// The report's `priasv` is per unit `R²`.
pub fn v_alpha_pi_pointmass(v_xx: &DMatrix<f64>, mu: &DVector<f64>, beta: &DVector<f64>, alpha: f64) -> Result<(PointMassAngle, EfficiencyReport)> {
    let p = beta.len();
    if mu.len() != p || v_xx.nrows() != p || !v_xx.is_square() {
        return Err(Error::Shape(format!("mu has length {}, beta {p}, V_xx is {}x{}", mu.len(), v_xx.nrows(), v_xx.ncols())));
    }
    let mm = linalg::quad_form(v_xx, mu);
    let bb = linalg::quad_form(v_xx, beta);
    if !(mm > 0.0) || !(bb > 0.0) {
        return Err(Error::UndefinedAngle("mu and beta must be nonzero in the V_xx metric".into()));
    }
    let mb = mu.dot(&(v_xx * beta));
    let cos2 = ((mb * mb) / (mm * bb)).clamp(0.0, 1.0);
    let v = 1.0 - (1.0 - v_alpha_p(alpha, 1)?) * cos2;
    Ok((PointMassAngle { cos2_theta: cos2 }, EfficiencyReport::new(alpha, p, 1.0, v, Method::Analytic, None)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TwoStageDesign {
    /// BCRD pilot, ReB at `alpha` in stage 2.
    BcrdReb { alpha: f64 },
    /// ReM pilot at `alpha_stage1`, ReB at `alpha_stage2`.
    RemReb { alpha_stage1: f64, alpha_stage2: f64 },
}

/// Two-stage PRIASV with stage-1 fraction `rho_star` (`0` and `1` allowed as limits).
pub fn priasv_two_stage(design: TwoStageDesign, rho_star: f64, p: usize, r_squared: f64) -> Result<EfficiencyReport> {
    check_r2(r_squared)?;
    if !(0.0..=1.0).contains(&rho_star) {
        return Err(Error::Range(format!("rho must lie in [0, 1], got {rho_star}")));
    }
    let (alpha, gain) = match design {
        TwoStageDesign::BcrdReb { alpha } => (alpha, (1.0 - rho_star) * (1.0 - v_alpha_p(alpha, 1)?)),
        TwoStageDesign::RemReb { alpha_stage1, alpha_stage2 } => (
            alpha_stage2,
            rho_star * (1.0 - v_alpha_p(alpha_stage1, p)?) + (1.0 - rho_star) * (1.0 - v_alpha_p(alpha_stage2, 1)?),
        ),
    };
    Ok(EfficiencyReport::new(alpha, p, r_squared, 1.0 - gain, Method::Analytic, None))
}
