use rayon::prelude::*;

use rerand::criteria::McConfig;
use rerand::harness::{self, run_cell, Scheme, SimConfig};
use rerand::population::covariate_diff;
use rerand::twostage::{run_two_stage, TwoStageConfig};
use rerand::{accept, RngStream};

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0))
}

fn linear_population(n: usize, p: usize, target: f64, seed: u64) -> harness::SyntheticData {
    let cfg = SimConfig::new(n, p, 0.0, 0.1, target);
    let stream = RngStream::new(seed, 0);
    let s2 = harness::tune_noise_for_r2(&cfg, target, stream.child(&[0])).unwrap();
    harness::gen_linear_population(&cfg, s2, &mut stream.child(&[1]).rng()).unwrap()
}

fn two_stage_taus(pop: &rerand::Population, config: &TwoStageConfig, reps: u64, seed: u64) -> Vec<f64> {
    let mc = McConfig { draws: 10_000, seed };
    (0..reps)
        .into_par_iter()
        .map(|i| run_two_stage(pop, config, &mc, RngStream::new(seed, 0).child(&[i])).unwrap().tau_hat)
        .collect()
}

#[test]
fn two_stage_fields_and_replay() {
    let data = linear_population(200, 4, 0.6, 1);
    let mc = McConfig { draws: 10_000, seed: 1 };
    for (i, config) in [TwoStageConfig::bcrd_reb(0.3, 0.1), TwoStageConfig::rem_reb(0.3, 0.1, 0.1)].iter().enumerate() {
        for rep in 0..20u64 {
            let r = run_two_stage(&data.pop, config, &mc, RngStream::new(rep, i as u64)).unwrap();
            assert_eq!(r.tau_hat, r.rho * r.tau1_hat + (1.0 - r.rho) * r.tau2_hat);
            let stage2 = data.pop.subset(&r.stage2_units, r.stage2_assignment.n_treated()).unwrap();
            let d = covariate_diff(&stage2, &r.stage2_assignment).unwrap();
            assert!(accept(&r.stage2_criterion, &d).unwrap());
        }
    }
}

#[test]
fn two_stage_is_unbiased() {
    let data = linear_population(200, 4, 0.6, 2);
    let tau = data.pop.tau().unwrap();
    for config in [TwoStageConfig::bcrd_reb(0.3, 0.1), TwoStageConfig::rem_reb(0.3, 0.1, 0.1)] {
        let taus = two_stage_taus(&data.pop, &config, 1000, 3);
        let (m, v) = mean_var(&taus);
        let se = (v / taus.len() as f64).sqrt();
        assert!((m - tau).abs() <= 4.0 * se, "{}: mean {m} tau {tau} se {se}", config.name());
    }
}

#[test]
fn rem_pilot_beats_bcrd_pilot() {
    let data = linear_population(600, 5, 0.8, 4);
    let bcrd = mean_var(&two_stage_taus(&data.pop, &TwoStageConfig::bcrd_reb(0.3, 0.05), 600, 5)).1;
    let rem = mean_var(&two_stage_taus(&data.pop, &TwoStageConfig::rem_reb(0.3, 0.05, 0.05), 600, 5)).1;
    assert!(rem < bcrd, "ReM-ReB {rem} vs BCRD-ReB {bcrd}");
}

#[test]
fn bcrd_pilot_loses_efficiency_as_pilot_grows() {
    let data = linear_population(600, 5, 0.8, 6);
    let vars: Vec<f64> = [0.2, 0.3, 0.4].iter().map(|&r| mean_var(&two_stage_taus(&data.pop, &TwoStageConfig::bcrd_reb(r, 0.05), 1500, 7)).1).collect();
    assert!(vars[0] < vars[1] && vars[1] < vars[2], "{vars:?}");
}

#[test]
fn rem_priv_is_positive_across_datasets() {
    let mut cfg = SimConfig::new(200, 5, 0.0, 1.0, 0.5);
    cfg.schemes = vec![Scheme::Rem];
    cfg.n_datasets = 20;
    cfg.n_accepted = 500;
    let res = run_cell(&cfg, RngStream::new(8, 0)).unwrap();
    let privs: Vec<f64> = res.results.iter().map(|r| r[0].as_ref().unwrap().priv_pct).collect();
    // percentile bootstrap of the mean
    let mut rng = RngStream::new(9, 0).rng();
    let mut means: Vec<f64> = (0..2000)
        .map(|_| {
            use rand::Rng;
            (0..privs.len()).map(|_| privs[rng.random_range(0..privs.len())]).sum::<f64>() / privs.len() as f64
        })
        .collect();
    means.sort_by(f64::total_cmp);
    assert!(means[50] > 0.0, "lower 2.5% bound {}", means[50]);
}

#[test]
fn reo_is_flat_in_p_while_rem_decreases() {
    let mut reo = Vec::new();
    let mut rem = Vec::new();
    for (k, p) in [2usize, 5, 10, 20].into_iter().enumerate() {
        let mut cfg = SimConfig::new(600, p, 0.0, 0.1, 0.5);
        cfg.schemes = vec![Scheme::Reo { beta: None }, Scheme::Rem];
        cfg.n_datasets = 40;
        cfg.n_accepted = 2000;
        let rows = run_cell(&cfg, RngStream::new(10, k as u64)).unwrap().summarize(k);
        reo.push(rows[0].mean_priv);
        rem.push(rows[1].mean_priv);
    }
    let range = reo.iter().cloned().fold(f64::MIN, f64::max) - reo.iter().cloned().fold(f64::MAX, f64::min);
    assert!(range <= 3.0, "ReO {reo:?}");
    assert!(rem.windows(2).all(|w| w[1] < w[0]), "ReM {rem:?}");
}

#[test]
fn reb_beats_rem_for_most_correlated_datasets() {
    let mut cfg = SimConfig::new(600, 20, 0.5, 0.1, 0.5);
    cfg.n_datasets = 20;
    cfg.n_accepted = 1000;
    cfg.schemes = vec![Scheme::RebOracle, Scheme::Rem];
    let res = run_cell(&cfg, RngStream::new(11, 0)).unwrap();
    let wins = res
        .results
        .iter()
        .filter(|r| r[0].as_ref().unwrap().priv_pct / r[1].as_ref().unwrap().priv_pct > 1.0)
        .count();
    assert!(wins > 10, "ReB/ReM > 1 in {wins}/20 datasets");
}
