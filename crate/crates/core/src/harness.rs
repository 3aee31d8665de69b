//! Simulation harness: synthetic populations, PRIV estimation and grid runs.
//!
//! PRIV (percent reduction in variance) compares the Monte Carlo variance of
//! `τ̂` over accepted allocations of a design against the variance over the
//! same number of plain BCRD allocations drawn from a separate stream.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{build_criterion, BalanceCriterion, CriterionKind, DesignInputs, McConfig, PcaSelection, PriorSpec};
use crate::error::{Error, Result};
use crate::population::{self, Population};
use crate::rng::RngStream;
use crate::sampler::{partial_shuffle, sample_accepted_with, DEFAULT_MAX_DRAWS};
use crate::twostage::{run_two_stage, TwoStageConfig};

/// Intercept of the treated potential outcome in the synthetic model.
const TREATED_INTERCEPT: f64 = 5.0;
/// Probe datasets averaged per noise-tuning evaluation.
const TUNING_PROBES: usize = 50;
const TUNING_TOL: f64 = 0.005;

/// A design scheme as named in a simulation config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scheme {
    Bcrd,
    Rem,
    /// ReO with the given `beta`, or the dataset's own projection coefficient when absent.
    Reo {
        #[serde(default)]
        beta: Option<Vec<f64>>,
    },
    /// ReB with the generating prior `μ = 1.5·1`, `Σ = σ²_β I`.
    RebOracle,
    Reb {
        prior: PriorSpec,
    },
    Ridge {
        lambda: f64,
    },
    Pca {
        selection: PcaSelection,
    },
    TwoStage {
        config: TwoStageConfig,
    },
}

/// One cell of a simulation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub p: usize,
    #[serde(default)]
    pub rho: f64,
    pub sigma2_beta: f64,
    pub target_r2: f64,
    pub n: usize,
    pub schemes: Vec<Scheme>,
    #[serde(default = "default_datasets")]
    pub n_datasets: usize,
    #[serde(default = "default_accepted")]
    pub n_accepted: usize,
    /// Cell seed; derived from the grid's master seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub nonlinear: bool,
    #[serde(default = "default_mc_draws")]
    pub mc_draws: usize,
    #[serde(default = "default_two_stage_mc_draws")]
    pub two_stage_mc_draws: usize,
}

fn default_datasets() -> usize {
    100
}
fn default_accepted() -> usize {
    1000
}
fn default_alpha() -> f64 {
    0.05
}
fn default_mc_draws() -> usize {
    100_000
}
fn default_two_stage_mc_draws() -> usize {
    10_000
}

impl SimConfig {
    pub fn new(n: usize, p: usize, rho: f64, sigma2_beta: f64, target_r2: f64) -> Self {
        Self {
            p,
            rho,
            sigma2_beta,
            target_r2,
            n,
            schemes: vec![Scheme::Rem],
            n_datasets: default_datasets(),
            n_accepted: default_accepted(),
            seed: None,
            alpha: default_alpha(),
            nonlinear: false,
            mc_draws: default_mc_draws(),
            two_stage_mc_draws: default_two_stage_mc_draws(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 || self.n < 4 {
            return Err(Error::Range(format!("need p >= 1 and N >= 4, got p={}, N={}", self.p, self.n)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Range(format!("equicorrelation must lie in [0, 1), got {}", self.rho)));
        }
        if !(self.sigma2_beta >= 0.0) {
            return Err(Error::Range(format!("sigma2_beta must be >= 0, got {}", self.sigma2_beta)));
        }
        if !(self.target_r2 > 0.0 && self.target_r2 < 1.0) {
            return Err(Error::Range(format!("target R^2 must lie in (0, 1), got {}", self.target_r2)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Range(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.n_datasets == 0 || self.n_accepted < 2 {
            return Err(Error::Range("need n_datasets >= 1 and n_accepted >= 2".into()));
        }
        Ok(())
    }
}

/// A synthetic population with its generating coefficients.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub pop: Population,
    /// `0.5 β1 + 0.5 β0`.
    pub beta: DVector<f64>,
    pub beta1: DVector<f64>,
    pub beta0: DVector<f64>,
    /// Realized `R²` of the finite population.
    pub r_squared: f64,
}

/// Everything random about a dataset except the noise scale.
struct Signal {
    x: DMatrix<f64>,
    mean1: Vec<f64>,
    mean0: Vec<f64>,
    e1: Vec<f64>,
    e0: Vec<f64>,
    beta1: DVector<f64>,
    beta0: DVector<f64>,
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn draw_signal<R: Rng + ?Sized>(cfg: &SimConfig, nonlinear: bool, rng: &mut R) -> Signal {
    let (n, p) = (cfg.n, cfg.p);
    let (a, b) = ((1.0 - cfg.rho).sqrt(), cfg.rho.sqrt());
    let mut x = DMatrix::zeros(n, p);
    for i in 0..n {
        let common = normal(rng);
        for j in 0..p {
            x[(i, j)] = a * normal(rng) + b * common;
        }
    }
    let sd = (2.0 * cfg.sigma2_beta).sqrt();
    let beta1 = DVector::from_fn(p, |_, _| 2.0 + sd * normal(rng));
    let beta0 = DVector::from_fn(p, |_, _| 1.0 + sd * normal(rng));
    let feature = |v: f64| if nonlinear { v.exp() } else { v };
    let mut mean1 = Vec::with_capacity(n);
    let mut mean0 = Vec::with_capacity(n);
    for i in 0..n {
        let (mut s1, mut s0) = (TREATED_INTERCEPT, 0.0);
        for j in 0..p {
            let f = feature(x[(i, j)]);
            s1 += beta1[j] * f;
            s0 += beta0[j] * f;
        }
        mean1.push(s1);
        mean0.push(s0);
    }
    let e1 = (0..n).map(|_| normal(rng)).collect();
    let e0 = (0..n).map(|_| normal(rng)).collect();
    Signal { x, mean1, mean0, e1, e0, beta1, beta0 }
}

fn realized_r2(pop: &Population) -> Result<f64> {
    let m = population::finite_population_moments(pop)?;
    population::squared_multiple_correlation(&population::v_matrix(&m)?)
}

fn assemble(sig: &Signal, sigma2_eps: f64) -> Result<SyntheticData> {
    let s = sigma2_eps.max(0.0).sqrt();
    let y1 = sig.mean1.iter().zip(&sig.e1).map(|(m, e)| m + s * e).collect();
    let y0 = sig.mean0.iter().zip(&sig.e0).map(|(m, e)| m + s * e).collect();
    let n = sig.x.nrows();
    let pop = Population::with_outcomes(sig.x.clone(), y1, y0, n / 2)?;
    let r_squared = realized_r2(&pop)?;
    let beta = (&sig.beta1 + &sig.beta0) * 0.5;
    Ok(SyntheticData { pop, beta, beta1: sig.beta1.clone(), beta0: sig.beta0.clone(), r_squared })
}

/// Linear potential outcomes `Y(1) = 5 + β1ᵀX + ε1`, `Y(0) = β0ᵀX + ε0`.
pub fn gen_linear_population<R: Rng + ?Sized>(cfg: &SimConfig, sigma2_eps: f64, rng: &mut R) -> Result<SyntheticData> {
    assemble(&draw_signal(cfg, false, rng), sigma2_eps)
}

/// As [`gen_linear_population`] with `exp(X)` as regression features; the population still carries raw `X`.
pub fn gen_nonlinear_population<R: Rng + ?Sized>(cfg: &SimConfig, sigma2_eps: f64, rng: &mut R) -> Result<SyntheticData> {
    assemble(&draw_signal(cfg, true, rng), sigma2_eps)
}

/// Linear or nonlinear generator according to `cfg.nonlinear`.
pub fn gen_population<R: Rng + ?Sized>(cfg: &SimConfig, sigma2_eps: f64, rng: &mut R) -> Result<SyntheticData> {
    assemble(&draw_signal(cfg, cfg.nonlinear, rng), sigma2_eps)
}

/// Noise variance `σ²_ε` at which the mean realized `R²` over probe datasets hits `target_r2`.
pub fn tune_noise_for_r2(cfg: &SimConfig, target_r2: f64, stream: RngStream) -> Result<f64> {
    let probes: Vec<Signal> = (0..TUNING_PROBES)
        .map(|k| draw_signal(cfg, cfg.nonlinear, &mut stream.child(&[k as u64]).rng()))
        .collect();
    tune_on_signals(&probes, target_r2)
}

/// Bisection on `σ_ε`; the signals are fixed, so the mean `R²` is monotone in `σ_ε`.
fn tune_on_signals(signals: &[Signal], target_r2: f64) -> Result<f64> {
    if !(target_r2 > 0.0 && target_r2 < 1.0) {
        return Err(Error::Range(format!("target R^2 must lie in (0, 1), got {target_r2}")));
    }
    let mean_r2 = |sigma: f64| -> Result<f64> {
        let r2s: Result<Vec<f64>> = signals.par_iter().map(|sig| Ok(assemble(sig, sigma * sigma)?.r_squared)).collect();
        Ok(r2s?.iter().sum::<f64>() / signals.len() as f64)
    };

    let top = mean_r2(0.0)?;
    if top < target_r2 {
        return Err(Error::Tuning(format!("noiseless mean R^2 is {top:.4}, below the target {target_r2}")));
    }
    if top - target_r2 <= TUNING_TOL {
        return Ok(0.0);
    }
    let mut hi = 1.0;
    let mut r_hi = mean_r2(hi)?;
    let mut doublings = 0;
    while r_hi > target_r2 {
        hi *= 2.0;
        r_hi = mean_r2(hi)?;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::Tuning(format!("mean R^2 stays above {target_r2} for any noise level")));
        }
    }
    let mut lo = 0.0;
    let mut mid = hi;
    for _ in 0..100 {
        mid = 0.5 * (lo + hi);
        let r = mean_r2(mid)?;
        if (r - target_r2).abs() <= TUNING_TOL {
            return Ok(mid * mid);
        }
        if r > target_r2 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let r = mean_r2(mid)?;
    if (r - target_r2).abs() <= 0.02 {
        Ok(mid * mid)
    } else {
        Err(Error::Tuning(format!("bisection stalled at mean R^2 {r:.4} for target {target_r2}")))
    }
}

/// Noise variance of the response surface, read as a variance.
pub const SURFACE_NOISE_VAR: f64 = 3.0;
const SURFACE_SUPPORT: [f64; 5] = [0.0, 1.0, 2.0, 3.0, 4.0];
const SURFACE_PROBS: [f64; 5] = [0.5, 0.2, 0.15, 0.1, 0.05];

/// Draw one coefficient from the response-surface support.
pub fn draw_surface_coefficient<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (v, p) in SURFACE_SUPPORT.iter().zip(SURFACE_PROBS) {
        cum += p;
        if u < cum {
            return *v;
        }
    }
    SURFACE_SUPPORT[SURFACE_SUPPORT.len() - 1]
}

/// Response surface on real covariates: `Y(0) ~ N(X̃β, 3)`, `Y(1) ~ N(X̃β + 4, 3)` with `X̃ = [1, X]`.
///
/// Returns the population (raw covariates, same treated count) and `β` (intercept first).
pub fn gen_response_surface<R: Rng + ?Sized>(covariates: &Population, rng: &mut R) -> Result<(Population, DVector<f64>)> {
    let (n, p) = (covariates.n(), covariates.p());
    let beta = DVector::from_fn(p + 1, |_, _| draw_surface_coefficient(rng));
    let sd = SURFACE_NOISE_VAR.sqrt();
    let mut y1 = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    for i in 0..n {
        let mean = beta[0] + covariates.row(i).iter().zip(beta.iter().skip(1)).map(|(x, b)| x * b).sum::<f64>();
        y0.push(mean + sd * normal(rng));
        y1.push(mean + 4.0 + sd * normal(rng));
    }
    Ok((Population::with_outcomes(covariates.x_matrix(), y1, y0, covariates.n_treated())?, beta))
}

/// A resolved design ready for PRIV estimation.
#[derive(Debug, Clone)]
pub enum Design {
    Bcrd,
    Criterion(BalanceCriterion),
    TwoStage { config: TwoStageConfig, mc: McConfig },
}

impl Design {
    pub fn name(&self) -> String {
        match self {
            Design::Bcrd => "BCRD".into(),
            Design::Criterion(c) => c.kind.name().into(),
            Design::TwoStage { config, .. } => config.name().into(),
        }
    }
}

impl Scheme {
    pub fn name(&self) -> String {
        match self {
            Scheme::Bcrd => "BCRD".into(),
            Scheme::Rem => "ReM".into(),
            Scheme::Reo { .. } => "ReO".into(),
            Scheme::RebOracle | Scheme::Reb { .. } => "ReB".into(),
            Scheme::Ridge { .. } => "Ridge-ReM".into(),
            Scheme::Pca { .. } => "PCA-ReM".into(),
            Scheme::TwoStage { config } => config.name().into(),
        }
    }

    /// Build the design for `pop`. `sigma2_beta` feeds the oracle prior.
    pub fn resolve(&self, pop: &Population, alpha: f64, sigma2_beta: f64, mc: &McConfig, two_stage_mc: &McConfig) -> Result<Design> {
        let kind = match self {
            Scheme::Bcrd => return Ok(Design::Bcrd),
            Scheme::TwoStage { config } => return Ok(Design::TwoStage { config: config.clone(), mc: *two_stage_mc }),
            Scheme::Rem => CriterionKind::Rem,
            Scheme::Reo { beta: Some(b) } => CriterionKind::Reo { beta: b.clone() },
            Scheme::Reo { beta: None } => {
                let m = population::finite_population_moments(pop)?;
                let b = population::projection_beta(&population::v_matrix(&m)?)?;
                CriterionKind::Reo { beta: b.as_slice().to_vec() }
            }
            Scheme::RebOracle => CriterionKind::Reb { prior: oracle_prior(pop.p(), sigma2_beta)? },
            Scheme::Reb { prior } => CriterionKind::Reb { prior: prior.clone() },
            Scheme::Ridge { lambda } => CriterionKind::Ridge { lambda: *lambda },
            Scheme::Pca { selection } => CriterionKind::Pca { selection: *selection },
        };
        Ok(Design::Criterion(build_criterion(&kind, &DesignInputs::from_population(pop)?, alpha, mc)?))
    }
}

/// `μ = 1.5·1`, `Σ = σ²_β I`: the distribution of `β` in the synthetic generator.
pub fn oracle_prior(p: usize, sigma2_beta: f64) -> Result<PriorSpec> {
    PriorSpec::new(DVector::from_element(p, 1.5), DMatrix::identity(p, p) * sigma2_beta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivResult {
    pub priv_pct: f64,
    pub var_scheme: f64,
    pub var_bcrd: f64,
    pub mean_tau_hat: f64,
    pub n_accepted: usize,
    pub scheme: String,
    pub dataset_id: usize,
    pub realized_alpha: f64,
    pub draws_per_accept: f64,
}

/// Difference in means from the treated index set.
struct TauEval<'a> {
    y1: &'a [f64],
    y0: &'a [f64],
    sum_y0: f64,
    nt: f64,
    nc: f64,
}

impl<'a> TauEval<'a> {
    fn new(pop: &'a Population) -> Result<Self> {
        let (y1, y0) = pop.outcomes()?;
        Ok(Self { y1, y0, sum_y0: y0.iter().sum(), nt: pop.n_treated() as f64, nc: pop.n_control() as f64 })
    }

    fn tau(&self, treated: &[usize]) -> f64 {
        let (mut s1, mut s0) = (0.0, 0.0);
        for &i in treated {
            s1 += self.y1[i];
            s0 += self.y0[i];
        }
        s1 / self.nt - (self.sum_y0 - s0) / self.nc
    }
}

pub(crate) fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// `τ̂` over `count` independent BCRD allocations.
pub fn bcrd_tau_draws(pop: &Population, count: usize, stream: RngStream) -> Result<Vec<f64>> {
    let eval = TauEval::new(pop)?;
    let mut perm: Vec<usize> = (0..pop.n()).collect();
    let nt = pop.n_treated();
    let mut rng = stream.rng();
    Ok((0..count)
        .map(|_| {
            partial_shuffle(&mut perm, nt, &mut rng);
            eval.tau(&perm[..nt])
        })
        .collect())
}

/// `τ̂` over `count` accepted allocations of `design`, with (realized rate, draws per accept).
pub fn design_tau_draws(pop: &Population, design: &Design, count: usize, stream: RngStream, workers: usize) -> Result<(Vec<f64>, f64, f64)> {
    match design {
        Design::Bcrd => Ok((bcrd_tau_draws(pop, count, stream)?, 1.0, 1.0)),
        Design::Criterion(c) => {
            let eval = TauEval::new(pop)?;
            let (taus, st) = sample_accepted_with(pop, c, count, stream, DEFAULT_MAX_DRAWS, workers, |t| eval.tau(t))?;
            Ok((taus, st.realized_rate, st.draws_per_accept))
        }
        Design::TwoStage { config, mc } => {
            let runs: Vec<Result<(f64, u64, u64, u64)>> = (0..count)
                .into_par_iter()
                .map(|i| {
                    let r = run_two_stage(pop, config, mc, stream.child(&[i as u64]))?;
                    Ok((r.tau_hat, r.stats2.draws_total, r.stats2.accepted, r.stats1.draws_total))
                })
                .collect();
            let mut taus = Vec::with_capacity(count);
            let (mut d2, mut a2, mut d1) = (0u64, 0u64, 0u64);
            for r in runs {
                let (t, d, a, s1) = r?;
                taus.push(t);
                d2 += d;
                a2 += a;
                d1 += s1;
            }
            Ok((taus, a2 as f64 / d2 as f64, (d1 + d2) as f64 / count as f64))
        }
    }
}

/// PRIV of `design` against BCRD on one population.
pub fn estimate_priv(pop: &Population, design: &Design, n_accepted: usize, stream: RngStream, workers: usize) -> Result<PrivResult> {
    if n_accepted < 2 {
        return Err(Error::Range("n_accepted must be >= 2".into()));
    }
    let base = bcrd_tau_draws(pop, n_accepted, stream.child(&[1]))?;
    let (taus, realized_alpha, draws_per_accept) = design_tau_draws(pop, design, n_accepted, stream.child(&[2]), workers)?;
    let (_, var_bcrd) = mean_var(&base);
    if !(var_bcrd > 0.0) {
        return Err(Error::DegeneratePopulation("BCRD variance of the estimator is zero".into()));
    }
    let (mean_tau_hat, var_scheme) = mean_var(&taus);
    Ok(PrivResult {
        priv_pct: 100.0 * (1.0 - var_scheme / var_bcrd),
        var_scheme,
        var_bcrd,
        mean_tau_hat,
        n_accepted,
        scheme: design.name(),
        dataset_id: 0,
        realized_alpha,
        draws_per_accept,
    })
}

/// Per-dataset outcome of one cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub config: SimConfig,
    pub sigma2_eps: f64,
    pub mean_r2: f64,
    /// `results[d][s]`: dataset `d`, scheme `s`.
    pub results: Vec<Vec<std::result::Result<PrivResult, String>>>,
}

fn cell_stream(cfg: &SimConfig, master_seed: u64, cell: usize) -> RngStream {
    match cfg.seed {
        Some(s) => RngStream::new(s, 0),
        None => RngStream::new(master_seed, 0).child(&[cell as u64]),
    }
}

/// Run every dataset of one cell. Datasets are processed in parallel; output is by index.
pub fn run_cell(cfg: &SimConfig, stream: RngStream) -> Result<CellResult> {
    cfg.validate()?;
    let signals: Vec<Signal> = (0..cfg.n_datasets)
        .into_par_iter()
        .map(|d| draw_signal(cfg, cfg.nonlinear, &mut stream.child(&[3, d as u64, 0]).rng()))
        .collect();
    let sigma2_eps = tune_on_signals(&signals, cfg.target_r2)?;
    let mc = McConfig { draws: cfg.mc_draws, seed: stream.child(&[1]).seed };
    let mc2 = McConfig { draws: cfg.two_stage_mc_draws, seed: stream.child(&[2]).seed };
    let per_dataset: Vec<(f64, Vec<std::result::Result<PrivResult, String>>)> = signals
        .par_iter()
        .enumerate()
        .map(|(d, sig)| {
            let ds = stream.child(&[3, d as u64]);
            let data = match assemble(sig, sigma2_eps) {
                Ok(x) => x,
                Err(e) => return (f64::NAN, cfg.schemes.iter().map(|_| Err(e.to_string())).collect()),
            };
            let res = cfg
                .schemes
                .iter()
                .enumerate()
                .map(|(s, scheme)| {
                    scheme
                        .resolve(&data.pop, cfg.alpha, cfg.sigma2_beta, &mc, &mc2)
                        .and_then(|design| estimate_priv(&data.pop, &design, cfg.n_accepted, ds.child(&[1, s as u64]), 1))
                        .map(|mut r| {
                            r.dataset_id = d;
                            r.scheme = scheme.name();
                            r
                        })
                        .map_err(|e| e.to_string())
                })
                .collect();
            (data.r_squared, res)
        })
        .collect();
    let r2s: Vec<f64> = per_dataset.iter().map(|(r, _)| *r).filter(|r| r.is_finite()).collect();
    let mean_r2 = if r2s.is_empty() { f64::NAN } else { r2s.iter().sum::<f64>() / r2s.len() as f64 };
    Ok(CellResult { config: cfg.clone(), sigma2_eps, mean_r2, results: per_dataset.into_iter().map(|(_, r)| r).collect() })
}

/// One summary row of a grid run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub cell: usize,
    pub n: usize,
    pub p: usize,
    pub rho: f64,
    pub sigma2_beta: f64,
    pub target_r2: f64,
    pub nonlinear: bool,
    pub alpha: f64,
    pub scheme: String,
    pub sigma2_eps: f64,
    pub mean_r2: f64,
    pub n_datasets: usize,
    pub n_failed: usize,
    pub mean_priv: f64,
    pub sd_priv: f64,
    pub realized_alpha: f64,
    pub mean_draws_per_accept: f64,
    pub first_error: String,
}

impl CellResult {
    pub fn summarize(&self, cell: usize) -> Vec<GridRow> {
        let cfg = &self.config;
        cfg.schemes
            .iter()
            .enumerate()
            .map(|(s, scheme)| {
                let ok: Vec<&PrivResult> = self.results.iter().filter_map(|r| r[s].as_ref().ok()).collect();
                let first_error = self.results.iter().find_map(|r| r[s].as_ref().err().cloned()).unwrap_or_default();
                let privs: Vec<f64> = ok.iter().map(|r| r.priv_pct).collect();
                let avg = |f: &dyn Fn(&PrivResult) -> f64| if ok.is_empty() { f64::NAN } else { ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64 };
                let (mean_priv, sd_priv) = match privs.len() {
                    0 => (f64::NAN, f64::NAN),
                    1 => (privs[0], 0.0),
                    _ => {
                        let (m, v) = mean_var(&privs);
                        (m, v.sqrt())
                    }
                };
                GridRow {
                    cell,
                    n: cfg.n,
                    p: cfg.p,
                    rho: cfg.rho,
                    sigma2_beta: cfg.sigma2_beta,
                    target_r2: cfg.target_r2,
                    nonlinear: cfg.nonlinear,
                    alpha: cfg.alpha,
                    scheme: scheme.name(),
                    sigma2_eps: self.sigma2_eps,
                    mean_r2: self.mean_r2,
                    n_datasets: ok.len(),
                    n_failed: self.results.len() - ok.len(),
                    mean_priv,
                    sd_priv,
                    realized_alpha: avg(&|r| r.realized_alpha),
                    mean_draws_per_accept: avg(&|r| r.draws_per_accept),
                    first_error,
                }
            })
            .collect()
    }
}

/// Run a grid of cells on `threads` worker threads (0 = rayon default).
///
/// A cell whose noise tuning fails contributes one row per scheme with every
/// dataset counted as failed.
pub fn run_grid(configs: &[SimConfig], master_seed: u64, threads: usize) -> Result<Vec<GridRow>> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Io(e.to_string()))?;
    pool.install(|| {
        let mut rows = Vec::new();
        for (cell, cfg) in configs.iter().enumerate() {
            match run_cell(cfg, cell_stream(cfg, master_seed, cell)) {
                Ok(res) => rows.extend(res.summarize(cell)),
                Err(e) => {
                    let failed = CellResult {
                        config: cfg.clone(),
                        sigma2_eps: f64::NAN,
                        mean_r2: f64::NAN,
                        results: (0..cfg.n_datasets).map(|_| cfg.schemes.iter().map(|_| Err(e.to_string())).collect()).collect(),
                    };
                    rows.extend(failed.summarize(cell));
                }
            }
        }
        Ok(rows)
    })
}

pub fn write_grid_csv<W: std::io::Write>(rows: &[GridRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
