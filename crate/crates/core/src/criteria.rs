//! Imbalance distances, prior specifications and acceptance thresholds.
//!
//! Every criterion is the quadratic form `d = N Dᵀ Λ D` on the covariate
//! mean difference `D`, accepted when `d <= threshold`. The matrix `Λ`
//! decides the flavour:
//!
//! | kind      | `Λ`                          | threshold                    |
//! |-----------|------------------------------|------------------------------|
//! | ReM       | `(N Σ_D)⁻¹`                  | `ξ_{α,p}`                    |
//! | ReO       | `β βᵀ`                       | `βᵀ V_xx β · ξ_{α,1}`        |
//! | ReB       | `μ μᵀ + Σ`                   | `ξ_{α,λ}`                    |
//! | Ridge-ReM | `N⁻¹ (Σ_D + λ I)⁻¹`          | `ξ_{α,λ}`                    |
//! | PCA-ReM   | `(N Σ_D^{(k)})⁻¹` (g-inverse) | `ξ_{α,λ}`                    |
//!
//! where `ξ_{α,λ}` is the α-quantile of `Σ λ_j Z_j²` and `λ` are the
//! eigenvalues of `Lᵀ Λ L` with `L Lᵀ = V_xx`.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, serde_rows, EIGEN_CLAMP};
use crate::population::{self, Population};
use crate::rng::RngStream;
use crate::special;

/// Relative spread under which a spectrum's positive eigenvalues count as equal.
const EQUAL_SPECTRUM_TOL: f64 = 1e-9;

/// Mean and covariance of a prior over the projection coefficient β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    #[serde(with = "serde_rows::vector")]
    pub mu: DVector<f64>,
    #[serde(with = "serde_rows")]
    pub sigma: DMatrix<f64>,
}

impl PriorSpec {
    pub fn new(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        if sigma.nrows() != p || sigma.ncols() != p {
            return Err(Error::Shape(format!("prior mean has length {p}, covariance is {}x{}", sigma.nrows(), sigma.ncols())));
        }
        if !linalg::is_symmetric(&sigma, 1e-10) {
            return Err(Error::DegeneratePrior("prior covariance is not symmetric".into()));
        }
        if p > 0 {
            let (vals, _) = linalg::sym_eigen_desc(&sigma);
            let floor = -EIGEN_CLAMP * vals[0].abs().max(1.0);
            if vals[p - 1] < floor {
                return Err(Error::DegeneratePrior(format!("prior covariance has eigenvalue {}", vals[p - 1])));
            }
        }
        Ok(Self { mu, sigma })
    }

    /// A prior concentrated at `mu` (Σ = 0).
    pub fn point_mass(mu: DVector<f64>) -> Self {
        let p = mu.len();
        Self { mu, sigma: DMatrix::zeros(p, p) }
    }

    pub fn p(&self) -> usize {
        self.mu.len()
    }
}

/// `Λ_π = μ μᵀ + Σ`.
pub fn characteristic_matrix(prior: &PriorSpec) -> Result<DMatrix<f64>> {
    let lambda = linalg::symmetrize(&(&prior.mu * prior.mu.transpose() + &prior.sigma));
    if lambda.amax() == 0.0 {
        return Err(Error::DegeneratePrior("characteristic matrix is zero (mu = 0 and Sigma = 0)".into()));
    }
    Ok(lambda)
}

/// How PCA-ReM picks its principal subspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaSelection {
    Components(usize),
    VarianceFraction(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CriterionKind {
    Rem,
    Reo {
        beta: Vec<f64>,
    },
    Reb {
        prior: PriorSpec,
    },
    Ridge {
        lambda: f64,
    },
    Pca {
        selection: PcaSelection,
    },
}

impl CriterionKind {
    pub fn name(&self) -> &'static str {
        match self {
            CriterionKind::Rem => "ReM",
            CriterionKind::Reo { .. } => "ReO",
            CriterionKind::Reb { .. } => "ReB",
            CriterionKind::Ridge { .. } => "Ridge-ReM",
            CriterionKind::Pca { .. } => "PCA-ReM",
        }
    }
}

/// Design-phase quantities derived from covariates alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignInputs {
    pub n: usize,
    pub s2_x: DMatrix<f64>,
    pub sigma_d: DMatrix<f64>,
    pub v_xx: DMatrix<f64>,
}

impl DesignInputs {
    pub fn from_population(pop: &Population) -> Result<Self> {
        let m = population::finite_population_moments(pop)?;
        let sigma_d = population::sigma_d(&m, m.n)?;
        let v_xx = &sigma_d * m.n as f64;
        Ok(Self { n: m.n, s2_x: m.s2_x, sigma_d, v_xx })
    }

    pub fn p(&self) -> usize {
        self.s2_x.nrows()
    }
}

/// A kind together with its quadratic-form matrix, before a threshold is attached.
#[derive(Debug, Clone, PartialEq)]
pub struct CriterionSkeleton {
    pub kind: CriterionKind,
    pub lambda_matrix: DMatrix<f64>,
}

/// Build the `Λ` matrix for a named criterion.
pub fn prior_from_named(kind: &CriterionKind, sigma_d: &DMatrix<f64>, s2_x: &DMatrix<f64>, n: usize) -> Result<CriterionSkeleton> {
    let p = sigma_d.nrows();
    let nf = n as f64;
    let lambda_matrix = match kind {
        CriterionKind::Rem => linalg::inverse_spd(&(sigma_d * nf), "; Ridge-ReM handles collinear covariates")?,
        CriterionKind::Reo { beta } => {
            if beta.len() != p {
                return Err(Error::Shape(format!("beta has length {}, expected {p}", beta.len())));
            }
            let b = DVector::from_column_slice(beta);
            if b.amax() == 0.0 {
                return Err(Error::DegeneratePrior("ReO needs a nonzero beta".into()));
            }
            &b * b.transpose()
        }
        CriterionKind::Reb { prior } => {
            if prior.p() != p {
                return Err(Error::Shape(format!("prior has dimension {}, expected {p}", prior.p())));
            }
            characteristic_matrix(prior)?
        }
        CriterionKind::Ridge { lambda } => {
            if !(*lambda > 0.0) || !lambda.is_finite() {
                return Err(Error::Range(format!("ridge lambda must be positive, got {lambda}")));
            }
            let shifted = sigma_d + DMatrix::identity(p, p) * *lambda;
            linalg::inverse_spd(&shifted, "")? / nf
        }
        CriterionKind::Pca { selection } => {
            let (vals, vecs) = linalg::sym_eigen_desc(s2_x);
            let k = match *selection {
                PcaSelection::Components(k) => {
                    if k == 0 || k > p {
                        return Err(Error::Range(format!("PCA needs 1 <= k <= {p}, got {k}")));
                    }
                    k
                }
                PcaSelection::VarianceFraction(f) => {
                    if !(f > 0.0 && f <= 1.0) {
                        return Err(Error::Range(format!("PCA variance fraction must lie in (0, 1], got {f}")));
                    }
                    let total: f64 = vals.iter().map(|v| v.max(0.0)).sum();
                    let mut cum = 0.0;
                    let mut k = p;
                    for (i, v) in vals.iter().enumerate() {
                        cum += v.max(0.0);
                        if cum >= f * total * (1.0 - 1e-12) {
                            k = i + 1;
                            break;
                        }
                    }
                    k
                }
            };
            let basis = vecs.columns(0, k).into_owned();
            let restricted = basis.transpose() * sigma_d * &basis * nf;
            let inner = linalg::inverse_spd(&restricted, "; retained principal components are degenerate")?;
            linalg::symmetrize(&(&basis * inner * basis.transpose()))
        }
    };
    Ok(CriterionSkeleton { kind: kind.clone(), lambda_matrix })
}

/// Mahalanobis distance `Dᵀ Σ_D⁻¹ D`.
pub fn mahalanobis_distance(d: &DVector<f64>, sigma_d: &DMatrix<f64>) -> Result<f64> {
    if sigma_d.nrows() != d.len() || !sigma_d.is_square() {
        return Err(Error::Shape(format!("D has length {}, Sigma_D is {}x{}", d.len(), sigma_d.nrows(), sigma_d.ncols())));
    }
    let x = linalg::solve_spd(sigma_d, d, "; Ridge-ReM handles collinear covariates")?;
    Ok(d.dot(&x).max(0.0))
}

/// Prior-induced distance `N Dᵀ Λ D`.
pub fn prior_distance(d: &DVector<f64>, lambda_matrix: &DMatrix<f64>, n: usize) -> f64 {
    (n as f64 * linalg::quad_form(lambda_matrix, d)).max(0.0)
}

/// Eigenvalues of `Lᵀ Λ L` (with `L Lᵀ = V_xx`), sorted descending, PSD-clamped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenSpectrum {
    pub lambdas: Vec<f64>,
}

impl EigenSpectrum {
    /// The strictly positive part of the spectrum.
    pub fn positive(&self) -> Vec<f64> {
        self.lambdas.iter().cloned().filter(|&l| l > 0.0).collect()
    }

    pub fn rank(&self) -> usize {
        self.lambdas.iter().filter(|&&l| l > 0.0).count()
    }
}

pub fn weighted_chisq_eigenvalues(v_xx: &DMatrix<f64>, lambda_matrix: &DMatrix<f64>) -> Result<EigenSpectrum> {
    if v_xx.nrows() != lambda_matrix.nrows() || !lambda_matrix.is_square() {
        return Err(Error::Shape(format!("V_xx is {}x{}, Lambda is {}x{}", v_xx.nrows(), v_xx.ncols(), lambda_matrix.nrows(), lambda_matrix.ncols())));
    }
    let l = linalg::cholesky_lower(v_xx)?;
    let p_mat = l.transpose() * lambda_matrix * &l;
    let (vals, _) = linalg::sym_eigen_desc(&p_mat);
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let cut = EIGEN_CLAMP * max;
    let mut lambdas = Vec::with_capacity(vals.len());
    for v in vals.iter() {
        if *v < -cut.max(1e-300) && *v < -1e-10 {
            return Err(Error::Range(format!("quadratic-form matrix is not PSD (eigenvalue {v})")));
        }
        lambdas.push(if v.abs() <= cut { 0.0 } else { v.max(0.0) });
    }
    Ok(EigenSpectrum { lambdas })
}

/// Closed-form chi-square quantile.
pub fn chisq_quantile(dof: usize, alpha: f64) -> Result<f64> {
    special::chisq_quantile(dof as u32, alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMethod {
    AnalyticChisq,
    WeightedChisqMc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdSpec {
    pub xi: f64,
    pub method: ThresholdMethod,
    pub mc_draws: usize,
    pub mc_seed: u64,
    pub mc_stderr: Option<f64>,
}

/// Monte Carlo settings for weighted chi-square quantities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct McConfig {
    pub draws: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self { draws: 1_000_000, seed: 0x5EED }
    }
}

/// If every positive eigenvalue is the same `c`, returns `(c, multiplicity)`.
pub(crate) fn equal_positive_spectrum(pos: &[f64]) -> Option<(f64, usize)> {
    let max = pos.iter().cloned().fold(f64::MIN, f64::max);
    let min = pos.iter().cloned().fold(f64::MAX, f64::min);
    if pos.is_empty() || max - min > EQUAL_SPECTRUM_TOL * max {
        return None;
    }
    Some((max, pos.len()))
}

/// Fills `out` with `Σ_j λ_j Z_j²` for `draws` i.i.d. standard normal vectors.
///
/// The normals are drawn in a fixed order from stream 0 of `seed`, so a
/// second pass with the same arguments sees exactly the same `Z`.
pub(crate) fn weighted_chisq_draws(weights: &[f64], draws: usize, seed: u64, mut visit: impl FnMut(&[f64], f64)) {
    let mut rng = RngStream::new(seed, 0).rng();
    let mut terms = vec![0.0; weights.len()];
    for _ in 0..draws {
        let mut total = 0.0;
        for (t, &w) in terms.iter_mut().zip(weights) {
            let z: f64 = StandardNormal.sample(&mut rng);
            *t = w * z * z;
            total += *t;
        }
        visit(&terms, total);
    }
}

/// Empirical α-quantile of sorted samples, with its order-statistic standard error.
pub(crate) fn empirical_quantile(sorted: &[f64], alpha: f64) -> (f64, f64) {
    let n = sorted.len();
    let k = ((alpha * n as f64).ceil() as usize).clamp(1, n) - 1;
    let xi = sorted[k];
    // density at the quantile from a symmetric spacing of m order statistics
    let m = ((n as f64).sqrt() as usize).max(1);
    let lo = k.saturating_sub(m);
    let hi = (k + m).min(n - 1);
    let spread = sorted[hi] - sorted[lo];
    let h = (hi - lo) as f64 / n as f64;
    let stderr = if spread > 0.0 && h > 0.0 {
        (alpha * (1.0 - alpha) / n as f64).sqrt() * spread / h
    } else {
        0.0
    };
    (xi, stderr)
}

/// α-quantile `ξ_{α,λ}` of the weighted chi-square `Σ λ_j Z_j²`.
///
/// Rank-one spectra and spectra whose positive part is constant use the
/// closed form `c · ξ_{α,m}`; anything else is estimated by Monte Carlo.
pub fn weighted_chisq_quantile(spectrum: &EigenSpectrum, alpha: f64, mc_draws: usize, seed: u64) -> Result<ThresholdSpec> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let pos = spectrum.positive();
    if pos.is_empty() {
        return Err(Error::DegeneratePrior("weighted chi-square spectrum is identically zero".into()));
    }
    if let Some((c, m)) = equal_positive_spectrum(&pos) {
        return Ok(ThresholdSpec {
            xi: c * chisq_quantile(m, alpha)?,
            method: ThresholdMethod::AnalyticChisq,
            mc_draws: 0,
            mc_seed: seed,
            mc_stderr: None,
        });
    }
    if mc_draws < 2 {
        return Err(Error::Range(format!("need at least 2 Monte Carlo draws, got {mc_draws}")));
    }
    let mut totals = Vec::with_capacity(mc_draws);
    weighted_chisq_draws(&pos, mc_draws, seed, |_, t| totals.push(t));
    totals.sort_unstable_by(f64::total_cmp);
    let (xi, stderr) = empirical_quantile(&totals, alpha);
    Ok(ThresholdSpec {
        xi,
        method: ThresholdMethod::WeightedChisqMc,
        mc_draws,
        mc_seed: seed,
        mc_stderr: Some(stderr),
    })
}

/// Threshold as a function of the acceptance rate for one fixed `Λ`.
///
/// Used when the same quadratic form has to be thresholded at many rates,
/// as in equal-cost calibration.
#[derive(Debug, Clone)]
pub enum ThresholdCurve {
    /// `scale · ξ_{α,dof}`.
    Scaled { scale: f64, dof: usize },
    /// Sorted Monte Carlo sample of the weighted chi-square.
    Empirical(Vec<f64>),
}

impl ThresholdCurve {
    pub fn for_kind(kind: &CriterionKind, design: &DesignInputs, spectrum: &EigenSpectrum, mc: &McConfig) -> Result<Self> {
        match kind {
            CriterionKind::Rem => Ok(ThresholdCurve::Scaled { scale: 1.0, dof: design.p() }),
            CriterionKind::Reo { beta } => {
                let b = DVector::from_column_slice(beta);
                Ok(ThresholdCurve::Scaled { scale: linalg::quad_form(&design.v_xx, &b), dof: 1 })
            }
            CriterionKind::Reb { prior } if prior.sigma.iter().all(|v| *v == 0.0) => {
                Ok(ThresholdCurve::Scaled { scale: linalg::quad_form(&design.v_xx, &prior.mu), dof: 1 })
            }
            _ => {
                let pos = spectrum.positive();
                if pos.is_empty() {
                    return Err(Error::DegeneratePrior("weighted chi-square spectrum is identically zero".into()));
                }
                if let Some((c, m)) = equal_positive_spectrum(&pos) {
                    return Ok(ThresholdCurve::Scaled { scale: c, dof: m });
                }
                let mut totals = Vec::with_capacity(mc.draws);
                weighted_chisq_draws(&pos, mc.draws, mc.seed, |_, t| totals.push(t));
                totals.sort_unstable_by(f64::total_cmp);
                Ok(ThresholdCurve::Empirical(totals))
            }
        }
    }

    pub fn at(&self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
        }
        match self {
            ThresholdCurve::Scaled { scale, dof } => Ok(scale * chisq_quantile(*dof, alpha)?),
            ThresholdCurve::Empirical(sorted) => Ok(empirical_quantile(sorted, alpha).0),
        }
    }
}

/// A fully specified, immutable acceptance rule `N Dᵀ Λ D <= threshold`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BalanceCriterion {
    pub kind: CriterionKind,
    pub p: usize,
    pub n: usize,
    pub alpha: f64,
    #[serde(with = "serde_rows")]
    pub lambda_matrix: DMatrix<f64>,
    pub threshold: f64,
    pub threshold_spec: ThresholdSpec,
    pub spectrum: EigenSpectrum,
    #[serde(skip)]
    factor: OnceLock<DMatrix<f64>>,
}

impl PartialEq for BalanceCriterion {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.p == other.p
            && self.n == other.n
            && self.alpha == other.alpha
            && self.lambda_matrix == other.lambda_matrix
            && self.threshold == other.threshold
            && self.threshold_spec == other.threshold_spec
            && self.spectrum == other.spectrum
    }
}

impl BalanceCriterion {
    /// Assemble a criterion from its parts (used by builders and deserialization paths).
    pub fn from_parts(
        kind: CriterionKind,
        n: usize,
        alpha: f64,
        lambda_matrix: DMatrix<f64>,
        threshold_spec: ThresholdSpec,
        spectrum: EigenSpectrum,
    ) -> Result<Self> {
        if !(threshold_spec.xi >= 0.0) {
            return Err(Error::Range(format!("threshold must be >= 0, got {}", threshold_spec.xi)));
        }
        if !lambda_matrix.is_square() {
            return Err(Error::Shape("quadratic-form matrix must be square".into()));
        }
        Ok(Self {
            kind,
            p: lambda_matrix.nrows(),
            n,
            alpha,
            lambda_matrix,
            threshold: threshold_spec.xi,
            threshold_spec,
            spectrum,
            factor: OnceLock::new(),
        })
    }

    /// Same rule with a different threshold.
    pub fn with_threshold(&self, threshold: f64) -> Self {
        let mut c = self.clone();
        c.threshold = threshold;
        c.threshold_spec.xi = threshold;
        c
    }

    /// `N Dᵀ Λ D`.
    pub fn distance(&self, d: &DVector<f64>) -> Result<f64> {
        if d.len() != self.p {
            return Err(Error::Shape(format!("D has length {}, criterion expects {}", d.len(), self.p)));
        }
        Ok(prior_distance(d, &self.lambda_matrix, self.n))
    }

    /// `G` with `N Λ = G Gᵀ`; the sampler evaluates `‖Gᵀ D‖²`.
    pub fn factor(&self) -> &DMatrix<f64> {
        self.factor.get_or_init(|| linalg::psd_factor(&(&self.lambda_matrix * self.n as f64)))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: BalanceCriterion = serde_json::from_str(s)?;
        if c.lambda_matrix.nrows() != c.p || c.lambda_matrix.ncols() != c.p {
            return Err(Error::Shape(format!("criterion declares p={} but matrix is {}x{}", c.p, c.lambda_matrix.nrows(), c.lambda_matrix.ncols())));
        }
        Ok(c)
    }
}

/// Build a complete criterion for `kind` on the given design at acceptance rate `alpha`.
pub fn build_criterion(kind: &CriterionKind, design: &DesignInputs, alpha: f64, mc: &McConfig) -> Result<BalanceCriterion> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Range(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let skeleton = prior_from_named(kind, &design.sigma_d, &design.s2_x, design.n)?;
    let spectrum = weighted_chisq_eigenvalues(&design.v_xx, &skeleton.lambda_matrix)?;
    let threshold_spec = match kind {
        CriterionKind::Rem => ThresholdSpec {
            xi: chisq_quantile(design.p(), alpha)?,
            method: ThresholdMethod::AnalyticChisq,
            mc_draws: 0,
            mc_seed: mc.seed,
            mc_stderr: None,
        },
        CriterionKind::Reo { beta } => {
            let b = DVector::from_column_slice(beta);
            let sigma2_beta = linalg::quad_form(&design.v_xx, &b);
            ThresholdSpec {
                xi: sigma2_beta * chisq_quantile(1, alpha)?,
                method: ThresholdMethod::AnalyticChisq,
                mc_draws: 0,
                mc_seed: mc.seed,
                mc_stderr: None,
            }
        }
        // point-mass prior: same rule as ReO with beta = mu
        CriterionKind::Reb { prior } if prior.sigma.iter().all(|v| *v == 0.0) => ThresholdSpec {
            xi: linalg::quad_form(&design.v_xx, &prior.mu) * chisq_quantile(1, alpha)?,
            method: ThresholdMethod::AnalyticChisq,
            mc_draws: 0,
            mc_seed: mc.seed,
            mc_stderr: None,
        },
        _ => weighted_chisq_quantile(&spectrum, alpha, mc.draws, mc.seed)?,
    };
    BalanceCriterion::from_parts(skeleton.kind, design.n, alpha, skeleton.lambda_matrix, threshold_spec, spectrum)
}

/// `distance(d) <= threshold`.
pub fn accept(criterion: &BalanceCriterion, d: &DVector<f64>) -> Result<bool> {
    Ok(criterion.distance(d)? <= criterion.threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{covariate_diff, Assignment};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn gaussian_design(n: usize, p: usize, seed: u64) -> Population {
        let mut rng = RngStream::new(seed, 0).rng();
        let x = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        Population::design_only(x, n / 2).unwrap()
    }

    #[test]
    fn characteristic_matrix_examples() {
        let pm = PriorSpec::point_mass(DVector::from_vec(vec![1.0, 0.0]));
        assert_eq!(characteristic_matrix(&pm).unwrap(), DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]));
        let iso = PriorSpec::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(characteristic_matrix(&iso).unwrap(), DMatrix::identity(2, 2));
        let both = PriorSpec::new(DVector::from_vec(vec![1.0, 1.0]), DMatrix::identity(2, 2) * 0.25).unwrap();
        assert_eq!(characteristic_matrix(&both).unwrap(), DMatrix::from_row_slice(2, 2, &[1.25, 1.0, 1.0, 1.25]));
        let zero = PriorSpec::point_mass(DVector::zeros(3));
        assert!(matches!(characteristic_matrix(&zero), Err(Error::DegeneratePrior(_))));
    }

    #[test]
    fn prior_rejects_indefinite_covariance() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(PriorSpec::new(DVector::zeros(2), s), Err(Error::DegeneratePrior(_))));
    }

    #[test]
    fn rem_lambda_is_identity_when_sigma_d_is_identity_over_n() {
        let n = 50;
        let sd = DMatrix::identity(3, 3) / n as f64;
        let sk = prior_from_named(&CriterionKind::Rem, &sd, &DMatrix::identity(3, 3), n).unwrap();
        assert!((sk.lambda_matrix - DMatrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn ridge_vanishes_for_huge_lambda() {
        let sd = DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]);
        let sk = prior_from_named(&CriterionKind::Ridge { lambda: 1e12 }, &sd, &sd, 100).unwrap();
        assert!(sk.lambda_matrix.amax() < 1e-10);
        assert!(matches!(
            prior_from_named(&CriterionKind::Ridge { lambda: 0.0 }, &sd, &sd, 100),
            Err(Error::Range(_))
        ));
    }

    #[test]
    fn full_rank_pca_equals_rem() {
        let pop = gaussian_design(80, 4, 1);
        let d = DesignInputs::from_population(&pop).unwrap();
        let rem = prior_from_named(&CriterionKind::Rem, &d.sigma_d, &d.s2_x, d.n).unwrap();
        let pca = prior_from_named(&CriterionKind::Pca { selection: PcaSelection::Components(4) }, &d.sigma_d, &d.s2_x, d.n).unwrap();
        assert!((rem.lambda_matrix - pca.lambda_matrix).amax() < 1e-8);
        let frac = prior_from_named(&CriterionKind::Pca { selection: PcaSelection::VarianceFraction(1.0) }, &d.sigma_d, &d.s2_x, d.n).unwrap();
        assert_eq!(frac.lambda_matrix.nrows(), 4);
    }

    #[test]
    fn pca_variance_fraction_picks_smallest_k() {
        let s2x = DMatrix::from_diagonal(&DVector::from_vec(vec![6.0, 3.0, 1.0]));
        let sd = &s2x / 25.0;
        let sk = prior_from_named(&CriterionKind::Pca { selection: PcaSelection::VarianceFraction(0.9) }, &sd, &s2x, 100).unwrap();
        // top two components explain 90%
        let spec = weighted_chisq_eigenvalues(&(&sd * 100.0), &sk.lambda_matrix).unwrap();
        assert_eq!(spec.rank(), 2);
        assert!(prior_from_named(&CriterionKind::Pca { selection: PcaSelection::Components(0) }, &sd, &s2x, 100).is_err());
    }

    #[test]
    fn rem_singular_sigma_suggests_ridge() {
        let sd = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match prior_from_named(&CriterionKind::Rem, &sd, &sd, 10) {
            Err(Error::SingularCovariance { hint, .. }) => assert!(hint.contains("Ridge")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mahalanobis_examples() {
        let sd = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        assert_eq!(mahalanobis_distance(&DVector::zeros(2), &sd).unwrap(), 0.0);
        let e1 = DVector::from_vec(vec![1.0, 0.0]);
        assert!((mahalanobis_distance(&e1, &DMatrix::identity(2, 2)).unwrap() - 1.0).abs() < 1e-15);
        let ones = DVector::from_vec(vec![1.0, 1.0]);
        // inverse of [[2,1],[1,2]] is [[2,-1],[-1,2]]/3, so 1ᵀ A⁻¹ 1 = 2/3
        assert!((mahalanobis_distance(&ones, &sd).unwrap() - 2.0 / 3.0).abs() < 1e-14);
        let sing = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(mahalanobis_distance(&ones, &sing), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn prior_distance_special_cases() {
        let pop = gaussian_design(60, 3, 2);
        let d = DesignInputs::from_population(&pop).unwrap();
        let rem = prior_from_named(&CriterionKind::Rem, &d.sigma_d, &d.s2_x, d.n).unwrap();
        let beta = vec![0.5, -1.0, 2.0];
        let reo = prior_from_named(&CriterionKind::Reo { beta: beta.clone() }, &d.sigma_d, &d.s2_x, d.n).unwrap();
        let mut rng = RngStream::new(3, 0).rng();
        for _ in 0..50 {
            let dv = DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5));
            let dm = mahalanobis_distance(&dv, &d.sigma_d).unwrap();
            assert!((prior_distance(&dv, &rem.lambda_matrix, d.n) - dm).abs() <= 1e-10 * dm.max(1.0));
            let proj: f64 = beta.iter().zip(dv.iter()).map(|(b, x)| b * x).sum();
            let db = d.n as f64 * proj * proj;
            assert!((prior_distance(&dv, &reo.lambda_matrix, d.n) - db).abs() <= 1e-10 * db.max(1.0));
        }
        assert_eq!(prior_distance(&DVector::zeros(3), &rem.lambda_matrix, d.n), 0.0);
    }

    #[test]
    fn spectrum_examples() {
        let vxx = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = vxx.clone().try_inverse().unwrap();
        let s = weighted_chisq_eigenvalues(&vxx, &inv).unwrap();
        for l in &s.lambdas {
            assert!((l - 1.0).abs() < 1e-12);
        }
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let s = weighted_chisq_eigenvalues(&vxx, &(&b * b.transpose())).unwrap();
        assert_eq!(s.rank(), 1);
        let trace = linalg::quad_form(&vxx, &b);
        assert!((s.lambdas[0] - trace).abs() < 1e-12 * trace);
        let s = weighted_chisq_eigenvalues(&DMatrix::identity(2, 2), &DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 3.0]))).unwrap();
        assert!((s.lambdas[0] - 3.0).abs() < 1e-14 && (s.lambdas[1] - 2.0).abs() < 1e-14);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(weighted_chisq_eigenvalues(&bad, &DMatrix::identity(2, 2)), Err(Error::NotPositiveDefinite(_))));
    }

    #[test]
    fn weighted_quantile_paths() {
        let rank1 = EigenSpectrum { lambdas: vec![2.5, 0.0, 0.0] };
        let t = weighted_chisq_quantile(&rank1, 0.3, 1000, 1).unwrap();
        assert_eq!(t.method, ThresholdMethod::AnalyticChisq);
        assert_eq!(t.xi, 2.5 * chisq_quantile(1, 0.3).unwrap());

        let mixed = EigenSpectrum { lambdas: vec![2.0, 1.0] };
        let a = weighted_chisq_quantile(&mixed, 0.5, 100_000, 9).unwrap();
        let b = weighted_chisq_quantile(&mixed, 0.5, 100_000, 9).unwrap();
        assert_eq!(a.xi.to_bits(), b.xi.to_bits());
        assert_eq!(a.method, ThresholdMethod::WeightedChisqMc);
        assert!(a.mc_stderr.unwrap() > 0.0);

        let zero = EigenSpectrum { lambdas: vec![0.0, 0.0] };
        assert!(matches!(weighted_chisq_quantile(&zero, 0.5, 10, 1), Err(Error::DegeneratePrior(_))));
        assert!(matches!(weighted_chisq_quantile(&mixed, 1.5, 10, 1), Err(Error::Range(_))));
    }

    #[test]
    fn mc_quantile_matches_chisq_when_weights_nearly_equal() {
        // Slightly perturbed weights force the Monte Carlo path.
        for &(p, alpha) in &[(1usize, 0.05), (3, 0.05), (5, 0.5), (10, 0.2)] {
            let lambdas: Vec<f64> = (0..p).map(|j| 1.0 + 1e-7 * j as f64).collect();
            let t = weighted_chisq_quantile(&EigenSpectrum { lambdas }, alpha, 200_000, 11).unwrap();
            let exact = chisq_quantile(p, alpha).unwrap();
            if p == 1 {
                assert_eq!(t.method, ThresholdMethod::AnalyticChisq);
                continue;
            }
            let se = t.mc_stderr.unwrap();
            assert!((t.xi - exact).abs() <= 4.0 * se, "p={p} alpha={alpha}: {} vs {exact} (se {se})", t.xi);
        }
    }

    #[test]
    fn reo_ribbon_region() {
        // beta = e1 with V_xx = I: accept iff N D1^2 <= xi_{0.5,1}, regardless of D2.
        let n = 40;
        let design = DesignInputs {
            n,
            s2_x: DMatrix::identity(2, 2) / 4.0,
            sigma_d: DMatrix::identity(2, 2) / n as f64,
            v_xx: DMatrix::identity(2, 2),
        };
        let crit = build_criterion(&CriterionKind::Reo { beta: vec![1.0, 0.0] }, &design, 0.5, &McConfig::default()).unwrap();
        let xi = chisq_quantile(1, 0.5).unwrap();
        let nf = n as f64;
        for i in -20..=20 {
            for j in -20..=20 {
                let d1 = i as f64 * 0.01;
                let d2 = j as f64 * 0.5;
                let expect = nf * d1 * d1 <= xi;
                assert_eq!(accept(&crit, &DVector::from_vec(vec![d1, d2])).unwrap(), expect, "d=({d1},{d2})");
            }
        }
    }

    #[test]
    fn accept_checks_shape_and_zero() {
        let pop = gaussian_design(40, 2, 5);
        let d = DesignInputs::from_population(&pop).unwrap();
        let crit = build_criterion(&CriterionKind::Rem, &d, 0.05, &McConfig::default()).unwrap();
        assert!(accept(&crit, &DVector::zeros(2)).unwrap());
        assert!(matches!(accept(&crit, &DVector::zeros(3)), Err(Error::Shape(_))));
    }

    #[test]
    fn json_round_trip_is_exact() {
        let pop = gaussian_design(50, 3, 6);
        let d = DesignInputs::from_population(&pop).unwrap();
        let prior = PriorSpec::new(DVector::from_vec(vec![1.0, 0.5, -0.2]), DMatrix::identity(3, 3) * 0.3).unwrap();
        let crit = build_criterion(&CriterionKind::Reb { prior }, &d, 0.1, &McConfig { draws: 20_000, seed: 4 }).unwrap();
        let json = crit.to_json().unwrap();
        let back = BalanceCriterion::from_json(&json).unwrap();
        assert_eq!(back, crit);
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert_eq!(v["kind"]["kind"], "reb");
        assert!(v["threshold_spec"]["mc_seed"].is_u64());
    }

    #[test]
    fn corollary_scale_invariance_with_mc_threshold() {
        let pop = gaussian_design(100, 4, 8);
        let d = DesignInputs::from_population(&pop).unwrap();
        let mu = DVector::from_vec(vec![1.0, 2.0, -0.5, 0.3]);
        let sigma = DMatrix::identity(4, 4) * 0.4;
        let mc = McConfig { draws: 50_000, seed: 77 };
        let a = build_criterion(&CriterionKind::Reb { prior: PriorSpec::new(mu.clone(), sigma.clone()).unwrap() }, &d, 0.2, &mc).unwrap();
        let r = 7.3_f64;
        let b = build_criterion(
            &CriterionKind::Reb { prior: PriorSpec::new(&mu * r.sqrt(), &sigma * r).unwrap() },
            &d,
            0.2,
            &mc,
        )
        .unwrap();
        let mut rng = RngStream::new(9, 0).rng();
        let mut idx: Vec<usize> = (0..100).collect();
        for _ in 0..500 {
            idx.shuffle(&mut rng);
            let mut w = vec![0u8; 100];
            for &i in &idx[..50] {
                w[i] = 1;
            }
            let dv = covariate_diff(&pop, &Assignment::new(w, 50).unwrap()).unwrap();
            assert_eq!(accept(&a, &dv).unwrap(), accept(&b, &dv).unwrap());
        }
    }

    proptest! {
        #[test]
        fn accept_is_symmetric(vals in proptest::collection::vec(-3.0f64..3.0, 3), scale in 0.01f64..2.0) {
            let design = DesignInputs {
                n: 30,
                s2_x: DMatrix::identity(3, 3),
                sigma_d: DMatrix::identity(3, 3) * (4.0 / 30.0),
                v_xx: DMatrix::identity(3, 3) * 4.0,
            };
            let prior = PriorSpec::new(DVector::from_vec(vec![1.0, 0.2, -0.7]), DMatrix::identity(3, 3) * 0.1).unwrap();
            let crit = build_criterion(&CriterionKind::Reb { prior }, &design, 0.3, &McConfig { draws: 5_000, seed: 1 }).unwrap();
            let d = DVector::from_vec(vals) * scale;
            prop_assert_eq!(accept(&crit, &d).unwrap(), accept(&crit, &(-&d)).unwrap());
            prop_assert!(crit.distance(&d).unwrap() >= 0.0);
        }
    }
}
