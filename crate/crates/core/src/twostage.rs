//! Pilot-then-ReB designs.
//!
//! A random fraction `ρ` of the units runs a pilot experiment (BCRD or ReM).
//! Arm-wise OLS on the pilot's revealed outcomes yields a prior for `β`,
//! which drives ReB on the remaining units. The two difference-in-means
//! estimates are pooled by stage size.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::criteria::{build_criterion, BalanceCriterion, CriterionKind, DesignInputs, McConfig, PriorSpec};
use crate::error::{Error, Result};
use crate::linalg;
use crate::population::{diff_in_means_tau, Assignment, Population};
use crate::rng::RngStream;
use crate::sampler::{bcrd_assignment, rerandomize, SamplerStats, DEFAULT_MAX_DRAWS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage1Kind {
    Bcrd,
    Rem,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorMode {
    /// Mean and covariance from the pilot fit.
    Full,
    /// Mean only (Σ = 0), giving BCRD-ReO / ReM-ReO.
    PointMass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoStageConfig {
    pub rho: f64,
    pub stage1_kind: Stage1Kind,
    /// Only used when `stage1_kind` is ReM.
    pub alpha_stage1: f64,
    pub alpha_stage2: f64,
    pub prior_mode: PriorMode,
    #[serde(default = "default_max_draws")]
    pub max_draws: u64,
}

fn default_max_draws() -> u64 {
    DEFAULT_MAX_DRAWS
}

impl TwoStageConfig {
    pub fn bcrd_reb(rho: f64, alpha: f64) -> Self {
        Self { rho, stage1_kind: Stage1Kind::Bcrd, alpha_stage1: alpha, alpha_stage2: alpha, prior_mode: PriorMode::Full, max_draws: DEFAULT_MAX_DRAWS }
    }

    pub fn rem_reb(rho: f64, alpha_stage1: f64, alpha_stage2: f64) -> Self {
        Self { rho, stage1_kind: Stage1Kind::Rem, alpha_stage1, alpha_stage2, prior_mode: PriorMode::Full, max_draws: DEFAULT_MAX_DRAWS }
    }

    pub fn name(&self) -> &'static str {
        match (self.stage1_kind, self.prior_mode) {
            (Stage1Kind::Bcrd, PriorMode::Full) => "BCRD-ReB",
            (Stage1Kind::Bcrd, PriorMode::PointMass) => "BCRD-ReO",
            (Stage1Kind::Rem, PriorMode::Full) => "ReM-ReB",
            (Stage1Kind::Rem, PriorMode::PointMass) => "ReM-ReO",
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Range(format!("rho must lie in (0, 1), got {}", self.rho)));
        }
        for a in [self.alpha_stage1, self.alpha_stage2] {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Range(format!("alpha must lie in (0, 1), got {a}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotFit {
    #[serde(with = "linalg::serde_rows::vector")]
    pub beta1_hat: DVector<f64>,
    #[serde(with = "linalg::serde_rows::vector")]
    pub beta0_hat: DVector<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub v1: DMatrix<f64>,
    #[serde(with = "linalg::serde_rows")]
    pub v0: DMatrix<f64>,
    pub tau1_hat: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoStageResult {
    pub tau_hat: f64,
    pub tau1_hat: f64,
    pub tau2_hat: f64,
    /// Realized stage-1 fraction `N1 / N`, the pooling weight.
    pub rho: f64,
    pub prior: PriorSpec,
    pub pilot: PilotFit,
    pub stats1: SamplerStats,
    pub stats2: SamplerStats,
    pub stage1_units: Vec<usize>,
    pub stage2_units: Vec<usize>,
    pub stage1_assignment: Assignment,
    pub stage2_assignment: Assignment,
    pub stage2_criterion: BalanceCriterion,
}

/// A random partition of the population into pilot and main stages.
#[derive(Debug, Clone)]
pub struct Split {
    pub stage1: Population,
    pub stage2: Population,
    pub idx1: Vec<usize>,
    pub idx2: Vec<usize>,
}

fn stage_treated(size: usize, pop: &Population) -> usize {
    let share = pop.n_treated() as f64 / pop.n() as f64;
    ((size as f64 * share).floor() as usize).clamp(1, size.saturating_sub(1).max(1))
}

/// Uniform split with `N1 = round(ρ N)`; each stage keeps the population's treated share (rounded down).
pub fn split_population<R: Rng + ?Sized>(pop: &Population, rho: f64, rng: &mut R) -> Result<Split> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::Split(format!("rho must lie in (0, 1), got {rho}")));
    }
    let n = pop.n();
    let n1 = (rho * n as f64).round() as usize;
    if n1 < 2 || n - n1 < 2 {
        return Err(Error::Split(format!("stage sizes {n1} and {} must both be >= 2", n.saturating_sub(n1))));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for i in 0..n1 {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
    let mut idx1 = perm[..n1].to_vec();
    let mut idx2 = perm[n1..].to_vec();
    idx1.sort_unstable();
    idx2.sort_unstable();
    let stage1 = pop.subset(&idx1, stage_treated(n1, pop)).map_err(|e| Error::Split(e.to_string()))?;
    let stage2 = pop.subset(&idx2, stage_treated(n - n1, pop)).map_err(|e| Error::Split(e.to_string()))?;
    Ok(Split { stage1, stage2, idx1, idx2 })
}

/// OLS with intercept of `y` on the rows `idx` of `pop`; returns slopes and the slope-block covariance.
fn arm_ols(pop: &Population, idx: &[usize], y: &[f64], arm: &str) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let p = pop.p();
    let n = idx.len();
    if n < p + 2 {
        return Err(Error::PilotSingular(format!("{arm} arm has {n} units, needs at least p + 2 = {}", p + 2)));
    }
    // Centering within the arm absorbs the intercept; the slope block of
    // (X̃ᵀX̃)⁻¹ is then (X_cᵀX_c)⁻¹.
    let nf = n as f64;
    let mut xbar = vec![0.0; p];
    let mut ybar = 0.0;
    for &i in idx {
        for (m, v) in xbar.iter_mut().zip(pop.row(i)) {
            *m += v / nf;
        }
        ybar += y[i] / nf;
    }
    let xc = DMatrix::from_fn(n, p, |r, c| pop.row(idx[r])[c] - xbar[c]);
    let yc = DVector::from_fn(n, |r, _| y[idx[r]] - ybar);
    let xtx = xc.transpose() * &xc;
    let inv = linalg::inverse_spd(&xtx, "").map_err(|e| Error::PilotSingular(format!("{arm} arm: {e}")))?;
    let beta = &inv * (xc.transpose() * &yc);
    let resid = &yc - &xc * &beta;
    let sigma2 = resid.norm_squared() / (n - p - 1) as f64;
    Ok((beta, linalg::symmetrize(&(inv * sigma2))))
}

/// Arm-wise OLS on the pilot's observed outcomes.
pub fn pilot_estimate(stage1: &Population, w1: &Assignment) -> Result<PilotFit> {
    let (y1, y0) = stage1.outcomes()?;
    let tau1_hat = diff_in_means_tau(stage1, w1)?;
    let treated: Vec<usize> = (0..stage1.n()).filter(|&i| w1.is_treated(i)).collect();
    let control: Vec<usize> = (0..stage1.n()).filter(|&i| !w1.is_treated(i)).collect();
    let (beta1_hat, v1) = arm_ols(stage1, &treated, y1, "treated")?;
    let (beta0_hat, v0) = arm_ols(stage1, &control, y0, "control")?;
    Ok(PilotFit { beta1_hat, beta0_hat, v1, v0, tau1_hat })
}

/// `μ = r0 β̂1 + r1 β̂0`, `Σ = r0² V1 + r1² V0` (or `Σ = 0` for a point mass).
pub fn pilot_prior(fit: &PilotFit, r0: f64, r1: f64, mode: PriorMode) -> Result<PriorSpec> {
    let mu = &fit.beta1_hat * r0 + &fit.beta0_hat * r1;
    match mode {
        PriorMode::PointMass => Ok(PriorSpec::point_mass(mu)),
        PriorMode::Full => PriorSpec::new(mu, linalg::symmetrize(&(&fit.v1 * (r0 * r0) + &fit.v0 * (r1 * r1)))),
    }
}

/// Run one complete two-stage experiment.
pub fn run_two_stage(pop: &Population, config: &TwoStageConfig, mc: &McConfig, stream: RngStream) -> Result<TwoStageResult> {
    config.validate()?;
    pop.outcomes()?;
    let split = split_population(pop, config.rho, &mut stream.child(&[0]).rng())?;
    let s1 = &split.stage1;
    let s2 = &split.stage2;

    let mut rng1 = stream.child(&[1]).rng();
    let (w1, stats1) = match config.stage1_kind {
        Stage1Kind::Bcrd => (bcrd_assignment(s1.n(), s1.n_treated(), &mut rng1)?, SamplerStats::from_counts(1, 1)),
        Stage1Kind::Rem => {
            let crit = build_criterion(&CriterionKind::Rem, &DesignInputs::from_population(s1)?, config.alpha_stage1, mc)?;
            rerandomize(s1, &crit, &mut rng1, config.max_draws)?
        }
    };

    let pilot = pilot_estimate(s1, &w1)?;
    let r1 = s2.n_treated() as f64 / s2.n() as f64;
    let prior = pilot_prior(&pilot, 1.0 - r1, r1, config.prior_mode)?;
    let crit2 = build_criterion(&CriterionKind::Reb { prior: prior.clone() }, &DesignInputs::from_population(s2)?, config.alpha_stage2, mc)?;
    let (w2, stats2) = rerandomize(s2, &crit2, &mut stream.child(&[2]).rng(), config.max_draws)?;
    let tau2_hat = diff_in_means_tau(s2, &w2)?;

    let rho = s1.n() as f64 / pop.n() as f64;
    Ok(TwoStageResult {
        tau_hat: rho * pilot.tau1_hat + (1.0 - rho) * tau2_hat,
        tau1_hat: pilot.tau1_hat,
        tau2_hat,
        rho,
        prior,
        pilot,
        stats1,
        stats2,
        stage1_units: split.idx1,
        stage2_units: split.idx2,
        stage1_assignment: w1,
        stage2_assignment: w2,
        stage2_criterion: crit2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criteria::accept;
    use crate::population::covariate_diff;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_pop(n: usize, p: usize, noise: f64, seed: u64) -> (Population, DVector<f64>, DVector<f64>) {
        let mut rng = RngStream::new(seed, 0).rng();
        let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(&mut rng));
        let b1 = DVector::from_fn(p, |i, _| 1.0 + i as f64);
        let b0 = DVector::from_fn(p, |i, _| 0.5 - i as f64 * 0.3);
        let mut e = || -> f64 { let z: f64 = StandardNormal.sample(&mut rng); noise * z };
        let y1: Vec<f64> = (0..n).map(|i| 5.0 + x.row(i).transpose().dot(&b1) + e()).collect();
        let y0: Vec<f64> = (0..n).map(|i| x.row(i).transpose().dot(&b0) + e()).collect();
        (Population::with_outcomes(x, y1, y0, n / 2).unwrap(), b1, b0)
    }

    #[test]
    fn split_sizes() {
        let (pop, _, _) = linear_pop(100, 2, 1.0, 1);
        let s = split_population(&pop, 0.5, &mut RngStream::new(1, 0).rng()).unwrap();
        assert_eq!((s.stage1.n(), s.stage2.n()), (50, 50));
        assert_eq!((s.stage1.n_treated(), s.stage2.n_treated()), (25, 25));
        let mut all: Vec<usize> = s.idx1.iter().chain(&s.idx2).cloned().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());

        let (big, _, _) = linear_pop(1200, 2, 1.0, 2);
        let s = split_population(&big, 0.2, &mut RngStream::new(2, 0).rng()).unwrap();
        assert_eq!(s.stage1.n(), 240);
        assert!(matches!(split_population(&pop, 0.001, &mut RngStream::new(1, 0).rng()), Err(Error::Split(_))));
    }

    #[test]
    fn noiseless_pilot_recovers_slopes() {
        let (pop, b1, b0) = linear_pop(60, 3, 0.0, 3);
        let w = bcrd_assignment(60, 30, &mut RngStream::new(4, 0).rng()).unwrap();
        let fit = pilot_estimate(&pop, &w).unwrap();
        assert!((fit.beta1_hat - b1).amax() < 1e-8);
        assert!((fit.beta0_hat - b0).amax() < 1e-8);
        assert!(fit.v1.amax() < 1e-12);
    }

    #[test]
    fn pure_noise_slopes_are_centered() {
        let p = 3;
        let reps = 200;
        let mut est = Vec::new();
        for r in 0..reps {
            let mut rng = RngStream::new(50 + r, 0).rng();
            let x: DMatrix<f64> = DMatrix::from_fn(40, p, |_, _| StandardNormal.sample(&mut rng));
            let y1: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            let y0: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
            let pop = Population::with_outcomes(x, y1, y0, 20).unwrap();
            let w = bcrd_assignment(40, 20, &mut rng).unwrap();
            est.push(pilot_estimate(&pop, &w).unwrap().beta1_hat);
        }
        for j in 0..p {
            let vals: Vec<f64> = est.iter().map(|b| b[j]).collect();
            let m = vals.iter().sum::<f64>() / reps as f64;
            let sd = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
            assert!(m.abs() <= 4.0 * sd / (reps as f64).sqrt(), "component {j}: {m}");
        }
    }

    #[test]
    fn small_pilot_is_singular() {
        let (pop, _, _) = linear_pop(200, 20, 1.0, 5);
        let cfg = TwoStageConfig::bcrd_reb(0.2, 0.05);
        let err = run_two_stage(&pop, &cfg, &McConfig { draws: 10_000, seed: 1 }, RngStream::new(1, 0)).unwrap_err();
        assert!(matches!(err, Error::PilotSingular(_)), "{err:?}");
    }

    #[test]
    fn prior_algebra() {
        let b = DVector::from_vec(vec![1.0, -2.0]);
        let fit = PilotFit { beta1_hat: b.clone(), beta0_hat: b.clone(), v1: DMatrix::identity(2, 2) * 4.0, v0: DMatrix::zeros(2, 2), tau1_hat: 0.0 };
        let full = pilot_prior(&fit, 0.5, 0.5, PriorMode::Full).unwrap();
        assert_eq!(full.mu, b);
        assert!((full.sigma.clone() - DMatrix::identity(2, 2)).amax() < 1e-15);
        let zero = PilotFit { v1: DMatrix::zeros(2, 2), ..fit };
        assert_eq!(pilot_prior(&zero, 0.5, 0.5, PriorMode::Full).unwrap(), pilot_prior(&zero, 0.5, 0.5, PriorMode::PointMass).unwrap());
    }

    #[test]
    fn result_fields_are_consistent() {
        let (pop, _, _) = linear_pop(200, 3, 1.0, 6);
        let mc = McConfig { draws: 20_000, seed: 2 };
        for cfg in [TwoStageConfig::bcrd_reb(0.3, 0.1), TwoStageConfig::rem_reb(0.3, 0.1, 0.1)] {
            let r = run_two_stage(&pop, &cfg, &mc, RngStream::new(7, 0)).unwrap();
            assert_eq!(r.tau_hat, r.rho * r.tau1_hat + (1.0 - r.rho) * r.tau2_hat);
            assert_eq!(r.rho, 60.0 / 200.0);
            // replay stage 2 through the exact criterion
            let s2 = pop.subset(&r.stage2_units, 70).unwrap();
            let d = covariate_diff(&s2, &r.stage2_assignment).unwrap();
            assert!(accept(&r.stage2_criterion, &d).unwrap());
            assert!(r.stats2.accepted == 1 && r.stats2.draws_total >= 1);
            let again = run_two_stage(&pop, &cfg, &mc, RngStream::new(7, 0)).unwrap();
            assert_eq!(again.tau_hat.to_bits(), r.tau_hat.to_bits());
        }
    }

    #[test]
    fn point_mass_stage_two_matches_reo() {
        let (pop, _, _) = linear_pop(300, 4, 1.0, 8);
        let mut cfg = TwoStageConfig::bcrd_reb(0.4, 0.1);
        cfg.prior_mode = PriorMode::PointMass;
        let mc = McConfig { draws: 20_000, seed: 3 };
        let r = run_two_stage(&pop, &cfg, &mc, RngStream::new(9, 0)).unwrap();
        let s2 = pop.subset(&r.stage2_units, r.stage2_units.len() / 2).unwrap();
        let reo = build_criterion(&CriterionKind::Reo { beta: r.prior.mu.as_slice().to_vec() }, &DesignInputs::from_population(&s2).unwrap(), 0.1, &mc).unwrap();
        let mut rng = RngStream::new(10, 0).rng();
        for _ in 0..300 {
            let w = bcrd_assignment(s2.n(), s2.n_treated(), &mut rng).unwrap();
            let d = covariate_diff(&s2, &w).unwrap();
            assert_eq!(accept(&reo, &d).unwrap(), accept(&r.stage2_criterion, &d).unwrap());
        }
    }
}
