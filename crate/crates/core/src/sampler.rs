//! Rejection sampling of balanced complete randomizations.
//!
//! Every draw is a uniform assignment with the population's fixed group
//! sizes (a partial Fisher-Yates shuffle), kept only when the criterion
//! accepts its covariate mean difference.

use nalgebra::DVector;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criteria::{BalanceCriterion, CriterionKind, DesignInputs, McConfig, ThresholdCurve, ThresholdMethod, ThresholdSpec};
use crate::error::{Error, Result};
use crate::population::{Assignment, Population};
use crate::rng::RngStream;
use crate::criteria;

/// Default cap on draws spent looking for a single accepted assignment.
pub const DEFAULT_MAX_DRAWS: u64 = 10_000_000;

/// Distances this close to the threshold (relative) are re-evaluated on the exact path.
const TIE_BAND: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerStats {
    pub draws_total: u64,
    pub accepted: u64,
    pub realized_rate: f64,
    pub draws_per_accept: f64,
}

impl SamplerStats {
    pub fn from_counts(draws_total: u64, accepted: u64) -> Self {
        let realized_rate = if draws_total == 0 { 0.0 } else { accepted as f64 / draws_total as f64 };
        let draws_per_accept = if accepted == 0 { f64::INFINITY } else { draws_total as f64 / accepted as f64 };
        Self { draws_total, accepted, realized_rate, draws_per_accept }
    }

    pub fn merge(&self, other: &SamplerStats) -> SamplerStats {
        SamplerStats::from_counts(self.draws_total + other.draws_total, self.accepted + other.accepted)
    }
}

/// One uniform draw from the balanced complete randomization with `n_treated` of `n` units treated.
pub fn bcrd_assignment<R: Rng + ?Sized>(n: usize, n_treated: usize, rng: &mut R) -> Result<Assignment> {
    if n_treated == 0 || n_treated >= n {
        return Err(Error::Range(format!("need 1 <= n_treated < N, got n_treated={n_treated}, N={n}")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    partial_shuffle(&mut perm, n_treated, rng);
    Ok(indices_to_assignment(n, &perm[..n_treated]))
}

pub(crate) fn partial_shuffle<R: Rng + ?Sized>(perm: &mut [usize], k: usize, rng: &mut R) {
    let n = perm.len();
    for i in 0..k {
        let j = rng.random_range(i..n);
        perm.swap(i, j);
    }
}

fn indices_to_assignment(n: usize, treated: &[usize]) -> Assignment {
    let mut w = vec![0u8; n];
    for &i in treated {
        w[i] = 1;
    }
    Assignment::from_raw(w)
}

/// Reusable rejection-sampling state for one population and criterion.
///
/// The quadratic form is evaluated through the factor `N Λ = G Gᵀ`: with
/// `U = X G` precomputed, a draw costs one pass over the treated rows of `U`.
pub struct Sampler<'a> {
    pop: &'a Population,
    criterion: &'a BalanceCriterion,
    u: Vec<f64>,
    k: usize,
    u_total: Vec<f64>,
    x_total: Vec<f64>,
    perm: Vec<usize>,
    nt: usize,
    sums: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(pop: &'a Population, criterion: &'a BalanceCriterion) -> Result<Self> {
        if criterion.p != pop.p() {
            return Err(Error::Shape(format!("criterion has p={}, population has p={}", criterion.p, pop.p())));
        }
        if criterion.n != pop.n() {
            return Err(Error::Shape(format!("criterion was built for N={}, population has N={}", criterion.n, pop.n())));
        }
        let g = criterion.factor();
        let k = g.ncols();
        let (n, p) = (pop.n(), pop.p());
        let mut u = vec![0.0; n * k];
        let mut u_total = vec![0.0; k];
        for i in 0..n {
            let row = pop.row(i);
            for c in 0..k {
                let mut acc = 0.0;
                for j in 0..p {
                    acc += row[j] * g[(j, c)];
                }
                u[i * k + c] = acc;
                u_total[c] += acc;
            }
        }
        let x_total = pop.col_means().iter().map(|m| m * n as f64).collect();
        Ok(Self {
            pop,
            criterion,
            u,
            k,
            u_total,
            x_total,
            perm: (0..n).collect(),
            nt: pop.n_treated(),
            sums: vec![0.0; k.max(p)],
        })
    }

    pub fn criterion(&self) -> &BalanceCriterion {
        self.criterion
    }

    /// Treated unit indices of the current draw (unordered).
    pub fn treated(&self) -> &[usize] {
        &self.perm[..self.nt]
    }

    pub fn assignment(&self) -> Assignment {
        indices_to_assignment(self.pop.n(), self.treated())
    }

    /// Draw a fresh BCRD assignment and return its distance.
    pub fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> f64 {
        partial_shuffle(&mut self.perm, self.nt, rng);
        self.fast_distance()
    }

    fn fast_distance(&mut self) -> f64 {
        let k = self.k;
        let sums = &mut self.sums[..k];
        sums.iter_mut().for_each(|s| *s = 0.0);
        for &i in &self.perm[..self.nt] {
            let row = &self.u[i * k..(i + 1) * k];
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        let nt = self.nt as f64;
        let nc = (self.pop.n() - self.nt) as f64;
        let mut dist = 0.0;
        for (s, t) in sums.iter().zip(&self.u_total) {
            let d = s / nt - (t - s) / nc;
            dist += d * d;
        }
        dist
    }

    /// Covariate mean difference of the current draw.
    pub fn covariate_diff(&self) -> DVector<f64> {
        let p = self.pop.p();
        let mut st = vec![0.0; p];
        for &i in self.treated() {
            for (s, v) in st.iter_mut().zip(self.pop.row(i)) {
                *s += v;
            }
        }
        let nt = self.nt as f64;
        let nc = (self.pop.n() - self.nt) as f64;
        DVector::from_iterator(p, st.iter().zip(&self.x_total).map(|(s, t)| s / nt - (t - s) / nc))
    }

    /// Acceptance decision for the current draw given its fast distance.
    fn decide(&self, fast: f64) -> bool {
        let thr = self.criterion.threshold;
        if thr.is_infinite() {
            return true;
        }
        if (fast - thr).abs() <= TIE_BAND * thr.abs().max(f64::MIN_POSITIVE) {
            let d = self.covariate_diff();
            return criteria::prior_distance(&d, &self.criterion.lambda_matrix, self.criterion.n) <= thr;
        }
        fast <= thr
    }

    /// Draw until acceptance; returns the number of draws used.
    pub fn next_accepted<R: Rng + ?Sized>(&mut self, rng: &mut R, max_draws: u64) -> Result<u64> {
        let infinite = self.criterion.threshold.is_infinite();
        for draws in 1..=max_draws {
            if infinite {
                partial_shuffle(&mut self.perm, self.nt, rng);
                return Ok(draws);
            }
            let d = self.draw(rng);
            if self.decide(d) {
                return Ok(draws);
            }
        }
        Err(Error::Starvation { draws: max_draws, accepted: 0 })
    }
}

/// First accepted assignment and the number of draws it took.
pub fn rerandomize<R: Rng + ?Sized>(
    pop: &Population,
    criterion: &BalanceCriterion,
    rng: &mut R,
    max_draws: u64,
) -> Result<(Assignment, SamplerStats)> {
    let mut s = Sampler::new(pop, criterion)?;
    let draws = s.next_accepted(rng, max_draws)?;
    Ok((s.assignment(), SamplerStats::from_counts(draws, 1)))
}

/// How many of `count` items worker `w` of `workers` produces.
fn worker_share(count: usize, workers: usize, w: usize) -> usize {
    count / workers + usize::from(w < count % workers)
}

/// Draw `count` accepted assignments and map each through `f` (called with the treated indices).
///
/// Work is split over `workers` logical streams `stream.child(&[w])`; the
/// output is ordered by worker, so it depends only on `stream` and `workers`.
pub fn sample_accepted_with<T, F>(
    pop: &Population,
    criterion: &BalanceCriterion,
    count: usize,
    stream: RngStream,
    max_draws_per: u64,
    workers: usize,
    f: F,
) -> Result<(Vec<T>, SamplerStats)>
where
    T: Send,
    F: Fn(&[usize]) -> T + Sync,
{
    if count == 0 {
        return Err(Error::Range("count must be >= 1".into()));
    }
    Sampler::new(pop, criterion)?;
    let workers = workers.max(1).min(count);
    let parts: Vec<Result<(Vec<T>, SamplerStats)>> = (0..workers)
        .into_par_iter()
        .map(|w| {
            let mut rng = stream.child(&[w as u64]).rng();
            let mut s = Sampler::new(pop, criterion)?;
            let share = worker_share(count, workers, w);
            let mut out = Vec::with_capacity(share);
            let mut draws_total = 0u64;
            for _ in 0..share {
                match s.next_accepted(&mut rng, max_draws_per) {
                    Ok(d) => draws_total += d,
                    Err(_) => {
                        return Err(Error::Starvation { draws: draws_total + max_draws_per, accepted: out.len() as u64 });
                    }
                }
                out.push(f(s.treated()));
            }
            Ok((out, SamplerStats::from_counts(draws_total, share as u64)))
        })
        .collect();
    let mut all = Vec::with_capacity(count);
    let mut stats = SamplerStats::from_counts(0, 0);
    for part in parts {
        let (items, st) = part?;
        all.extend(items);
        stats = stats.merge(&st);
    }
    Ok((all, stats))
}

pub fn sample_accepted(
    pop: &Population,
    criterion: &BalanceCriterion,
    count: usize,
    stream: RngStream,
    max_draws_per: u64,
    workers: usize,
) -> Result<(Vec<Assignment>, SamplerStats)> {
    let n = pop.n();
    sample_accepted_with(pop, criterion, count, stream, max_draws_per, workers, |t| indices_to_assignment(n, t))
}

/// Distances of `draws` independent BCRD assignments under `criterion`.
pub fn bcrd_distances(pop: &Population, criterion: &BalanceCriterion, draws: usize, stream: RngStream) -> Result<Vec<f64>> {
    let mut s = Sampler::new(pop, criterion)?;
    let mut rng = stream.rng();
    Ok((0..draws).map(|_| s.draw(&mut rng)).collect())
}

/// Fraction of `draws` BCRD assignments the criterion accepts.
pub fn estimate_acceptance_rate(pop: &Population, criterion: &BalanceCriterion, draws: usize, stream: RngStream) -> Result<SamplerStats> {
    let mut s = Sampler::new(pop, criterion)?;
    let mut rng = stream.rng();
    let mut accepted = 0u64;
    for _ in 0..draws {
        let d = s.draw(&mut rng);
        if s.decide(d) {
            accepted += 1;
        }
    }
    Ok(SamplerStats::from_counts(draws as u64, accepted))
}

/// One stage of a candidate procedure in equal-cost calibration.
///
/// `kind = None` is a plain BCRD stage, which never evaluates a quadratic form.
#[derive(Debug, Clone)]
pub struct CostStage<'a> {
    pub pop: &'a Population,
    pub kind: Option<CriterionKind>,
    pub cost_units: f64,
}

/// Empirical acceptance rate as a function of α for one stage, from a fixed set of draws.
struct RateCurve {
    sorted: Vec<f64>,
    curve: ThresholdCurve,
}

impl RateCurve {
    fn new(pop: &Population, kind: &CriterionKind, budget: usize, mc: &McConfig, stream: RngStream) -> Result<Self> {
        let design = DesignInputs::from_population(pop)?;
        let sk = criteria::prior_from_named(kind, &design.sigma_d, &design.s2_x, design.n)?;
        let spectrum = criteria::weighted_chisq_eigenvalues(&design.v_xx, &sk.lambda_matrix)?;
        let curve = ThresholdCurve::for_kind(kind, &design, &spectrum, mc)?;
        let spec = ThresholdSpec { xi: f64::INFINITY, method: ThresholdMethod::AnalyticChisq, mc_draws: 0, mc_seed: mc.seed, mc_stderr: None };
        let crit = BalanceCriterion::from_parts(kind.clone(), design.n, 0.5, sk.lambda_matrix, spec, spectrum)?;
        let mut sorted = bcrd_distances(pop, &crit, budget, stream)?;
        sorted.sort_unstable_by(f64::total_cmp);
        Ok(Self { sorted, curve })
    }

    fn rate(&self, alpha: f64) -> Result<f64> {
        let t = self.curve.at(alpha)?;
        Ok(self.sorted.partition_point(|&d| d <= t) as f64 / self.sorted.len() as f64)
    }
}

/// Acceptance rate α' at which `candidate` costs as much per accepted allocation as `reference`.
///
/// Cost is counted in quadratic-form evaluations: a procedure pays
/// `Σ_s cost_units_s / rate_s` per accepted allocation, and every stage of the
/// candidate runs at the same α'. Rates are estimated from `budget_draws`
/// BCRD draws per stage, reused across all α' (common random numbers).
pub fn calibrate_equal_cost(
    reference: &BalanceCriterion,
    reference_pop: &Population,
    candidate: &[CostStage<'_>],
    budget_draws: usize,
    mc: &McConfig,
    stream: RngStream,
) -> Result<f64> {
    const LO: f64 = 1e-4;
    const HI: f64 = 0.5;
    if budget_draws < 10_000 {
        return Err(Error::Range(format!("budget_draws must be >= 10000, got {budget_draws}")));
    }
    if candidate.is_empty() {
        return Err(Error::Range("candidate procedure has no stages".into()));
    }
    let ref_rate = estimate_acceptance_rate(reference_pop, reference, budget_draws, stream.child(&[0]))?.realized_rate;
    if ref_rate == 0.0 {
        return Err(Error::Calibration("reference accepted none of the budget draws".into()));
    }
    let target = 1.0 / ref_rate;

    let mut curves = Vec::new();
    for (s, stage) in candidate.iter().enumerate() {
        if !(stage.cost_units >= 0.0) {
            return Err(Error::Range(format!("cost units must be >= 0, got {}", stage.cost_units)));
        }
        if let (Some(kind), true) = (&stage.kind, stage.cost_units > 0.0) {
            curves.push((stage.cost_units, RateCurve::new(stage.pop, kind, budget_draws, mc, stream.child(&[s as u64]))?));
        }
    }
    if curves.is_empty() {
        return Err(Error::Calibration("candidate has no cost-bearing stage".into()));
    }
    let cost = |alpha: f64| -> Result<f64> {
        let mut c = 0.0;
        for (units, curve) in &curves {
            let r = curve.rate(alpha)?;
            if r == 0.0 {
                return Ok(f64::INFINITY);
            }
            c += units / r;
        }
        Ok(c)
    };

    if cost(HI)? > target {
        return Err(Error::Calibration(format!("candidate costs more than the reference even at alpha={HI}")));
    }
    if cost(LO)? < target {
        return Err(Error::Calibration(format!("candidate costs less than the reference even at alpha={LO}")));
    }
    let (mut lo, mut hi) = (LO, HI);
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if cost(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Exact distance of an assignment, bypassing the factored evaluator.
pub fn assignment_distance(pop: &Population, criterion: &BalanceCriterion, w: &Assignment) -> Result<f64> {
    let d = crate::population::covariate_diff(pop, w)?;
    criterion.distance(&d)
}
