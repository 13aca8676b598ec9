mod common;

use common::*;
use iwmm::baselines::{proposal_log_density, ParametricProposal, ProposalFamily};
use iwmm::estimators::{
    balance_heuristic_log_weights, common_log_weights, is_estimate, simple_mc_estimate, snis_estimate,
};
use iwmm::iwmm::{adapt_simple_mc, adapt_snis, split_snis_estimate, standard_is_estimate, AdaptOptions, FnIntegrand};
use iwmm::loo::{loo_log_weights, mm_loo, naive_loo, psis_loo, LooOptions};
use iwmm::models::*;
use iwmm::pareto::{gpd_fit, maybe_smooth};
use iwmm::{DrawMatrix, FunctionValues};
use ndarray::array;

fn column(d: &DrawMatrix) -> Vec<f64> {
    d.rows().map(|r| r[0]).collect()
}

#[test]
fn simple_mc_second_moment() {
    let x = column(&normal_draws(100_000, 1, 1));
    let sq: Vec<f64> = x.iter().map(|v| v * v).collect();
    let est = simple_mc_estimate(&FunctionValues::from_values(&sq).unwrap()).unwrap();
    let (_, se) = mean_and_se(&sq);
    assert!((est - 1.0).abs() < 3.0 * se, "{est} {se}");
}

#[test]
fn common_weight_of_wider_target() {
    let w = common_log_weights(&[normal_lpdf(0.0, 0.0, 2.0)], &[normal_lpdf(0.0, 0.0, 1.0)], true).unwrap();
    assert!((w.log_mag()[0] + 2f64.ln()).abs() < 1e-15);
}

#[test]
fn standard_is_second_moment() {
    // g = N(0, 2^2), p = N(0, 1)
    let x: Vec<f64> = column(&normal_draws(100_000, 1, 2)).iter().map(|v| 2.0 * v).collect();
    let lp: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 1.0)).collect();
    let lg: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 2.0)).collect();
    let h: Vec<f64> = x.iter().map(|v| v * v).collect();
    let w = common_log_weights(&lp, &lg, true).unwrap();
    let est = is_estimate(&w, &FunctionValues::from_values(&h).unwrap()).unwrap();
    let terms: Vec<f64> = w.log_mag().iter().zip(&h).map(|(l, h)| l.exp() * h).collect();
    let (_, se) = mean_and_se(&terms);
    assert!((est - 1.0).abs() < 3.0 * se, "{est} {se}");
}

#[test]
fn standard_is_is_unbiased_over_replications() {
    let ests: Vec<f64> = (0..500)
        .map(|r| {
            let x: Vec<f64> = column(&normal_draws(200, 1, 1000 + r)).iter().map(|v| 2.0 * v).collect();
            let lp: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 1.0)).collect();
            let lg: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 2.0)).collect();
            let h: Vec<f64> = x.iter().map(|v| v * v).collect();
            is_estimate(&common_log_weights(&lp, &lg, true).unwrap(), &FunctionValues::from_values(&h).unwrap()).unwrap()
        })
        .collect();
    let (m, se) = mean_and_se(&ests);
    assert!((m - 1.0).abs() < 4.0 * se, "{m} {se}");
}

#[test]
fn discrete_snis_by_enumeration() {
    let p = [0.2, 0.3, 0.5];
    let g = [1.0 / 3.0; 3];
    let lp: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
    let lg: Vec<f64> = g.iter().map(|v: &f64| v.ln()).collect();
    let w = common_log_weights(&lp, &lg, false).unwrap();
    let h = FunctionValues::from_values(&[1.0, 2.0, 3.0]).unwrap();
    let exact: f64 = p.iter().zip([1.0, 2.0, 3.0]).map(|(a, b)| a * b).sum();
    assert!((snis_estimate(&w, &h).unwrap() - exact).abs() < 1e-12);
}

#[test]
fn balance_heuristic_at_origin() {
    let lp = [normal_lpdf(0.0, 0.0, 1.0)];
    let g1 = vec![normal_lpdf(0.0, -1.0, 1.0)];
    let g2 = vec![normal_lpdf(0.0, 1.0, 1.0)];
    let w = balance_heuristic_log_weights(&lp, &[g1.clone(), g2.clone()], &[0.5, 0.5], true).unwrap();
    let expect = lp[0] - (0.5 * g1[0].exp() + 0.5 * g2[0].exp()).ln();
    assert!((w.log_mag()[0] - expect).abs() < 1e-14);
}

#[test]
fn gpd_shape_half_is_recovered() {
    let hits = (0..100)
        .filter(|&seed| {
            let mut x = gpd_sample(0.5, 1.0, 1000, seed);
            x.sort_by(f64::total_cmp);
            let (k, _) = gpd_fit(&x).unwrap();
            (k - 0.5).abs() <= 0.15
        })
        .count();
    assert!(hits >= 95, "{hits}");
}

#[test]
fn smoothing_reduces_variance_of_heavy_tailed_snis() {
    let (mut raw, mut smooth) = (Vec::new(), Vec::new());
    for seed in 0..200 {
        let x = column(&normal_draws(4000, 1, 5000 + seed));
        let lp: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 3.0)).collect();
        let lg: Vec<f64> = x.iter().map(|&v| normal_lpdf(v, 0.0, 1.0)).collect();
        let w = common_log_weights(&lp, &lg, false).unwrap();
        let h = FunctionValues::from_values(&x.iter().map(|v| v * v).collect::<Vec<_>>()).unwrap();
        raw.push(snis_estimate(&w, &h).unwrap());
        smooth.push(snis_estimate(&maybe_smooth(&w, true).0, &h).unwrap());
    }
    let var = |v: &[f64]| {
        let (_, se) = mean_and_se(v);
        se * se * v.len() as f64
    };
    assert!(var(&smooth) < var(&raw), "{} {}", var(&smooth), var(&raw));
}

#[test]
fn rare_tail_probability_after_adaptation() {
    let a = 3.0;
    let cb = FnIntegrand {
        log_p: |d: &DrawMatrix| Ok(d.rows().map(|r| normal_lpdf(r[0], 0.0, 1.0)).collect()),
        log_g: |d: &DrawMatrix| Ok(d.rows().map(|r| normal_lpdf(r[0], 0.0, 1.0)).collect()),
        h: move |d: &DrawMatrix| FunctionValues::from_values(&d.rows().map(|r| f64::from(u8::from(r[0] > a))).collect::<Vec<_>>()),
        normalized: true,
    };
    let draws = normal_draws(4000, 1, 21);
    let opts = AdaptOptions::default();
    let res = adapt_simple_mc(&cb, &draws, &opts).unwrap();
    assert!(res.converged && res.khat < 0.7, "{:?}", res.history);
    let est = standard_is_estimate(&cb, &res, true).unwrap();
    let terms: Vec<f64> = res.final_weights.log_mag().iter().map(|l| l.exp()).collect();
    let (_, se) = mean_and_se(&terms);
    let exact = normal_upper_tail(a);
    assert!((est - exact).abs() < 3.0 * se, "{est} {exact} {se}");
}

fn loo_integrand(model: &GaussianModel, fold: usize) -> impl iwmm::iwmm::Integrand + '_ {
    FnIntegrand {
        log_p: move |d: &DrawMatrix| {
            Ok(d.rows().map(|r| model.log_joint(r.as_slice().unwrap()) - model.log_lik(r.as_slice().unwrap(), fold)).collect())
        },
        log_g: move |d: &DrawMatrix| Ok(d.rows().map(|r| model.log_joint(r.as_slice().unwrap())).collect()),
        h: move |d: &DrawMatrix| {
            FunctionValues::from_log_positive(&d.rows().map(|r| model.log_lik(r.as_slice().unwrap(), fold)).collect::<Vec<_>>())
        },
        normalized: false,
    }
}

#[test]
fn double_adaptation_on_outlier_predictive() {
    let y = gaussian_outlier_data(3, 29, 20.0);
    let exact = gaussian_analytic_loo_lpd(&y, 29).unwrap();
    let model = GaussianModel::new(y).unwrap();
    let cb = loo_integrand(&model, 29);
    let (mut close, mut psis_far) = (0, 0);
    let reps = 10;
    for seed in 0..reps {
        let draws = model.sample_posterior(4000, 300 + seed, None).unwrap();
        let opts = AdaptOptions { seed, ..Default::default() };
        let fit = adapt_snis(&cb, &draws, &opts).unwrap();
        let (est, _) = split_snis_estimate(&cb, &fit.split, true).unwrap();
        close += usize::from((est.estimate.ln() - exact).abs() < 1.0);
        let ll: Vec<f64> = draws.rows().map(|r| model.log_lik(r.as_slice().unwrap(), 29)).collect();
        let psis = psis_loo_from_loglik(&ll);
        psis_far += usize::from((psis - exact).abs() > 5.0);
    }
    assert_eq!(psis_far, reps as usize);
    assert!(close * 10 >= 7 * reps as usize, "{close}/{reps}");
}

fn psis_loo_from_loglik(ll: &[f64]) -> f64 {
    let w = loo_log_weights(ll).unwrap();
    let (ws, _) = maybe_smooth(&w, true);
    let h = FunctionValues::from_log_positive(ll).unwrap();
    iwmm::estimators::log_snis_estimate(&ws, &h).unwrap()
}

#[test]
fn gaussian_posterior_concentrates() {
    let y = column(&normal_draws(100_000, 1, 8));
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let m = GaussianModel::new(y).unwrap();
    let d = m.sample_posterior(10_000, 1, None).unwrap();
    assert!((d.column_means()[0] - ybar).abs() < 0.02);
}

#[test]
fn conjugate_sampler_error_shrinks_at_root_rate() {
    let y = column(&normal_draws(50, 1, 4));
    let m = GaussianModel::new(y.clone()).unwrap();
    let ybar = y.iter().sum::<f64>() / y.len() as f64;
    let rms = |s: usize| {
        let sq: f64 = (0..40)
            .map(|r| (m.sample_posterior(s, 7000 + r, None).unwrap().column_means()[0] - ybar).powi(2))
            .sum();
        (sq / 40.0).sqrt()
    };
    let ratio = rms(100) / rms(10_000);
    assert!((6.0..16.0).contains(&ratio), "{ratio}");
}

#[test]
fn metropolis_standard_normal_moments() {
    let cfg = MetropolisConfig::new(vec![0.5]);
    let d = rw_metropolis(|t| normal_lpdf(t[0], 0.0, 1.0), 100_000, 3, &cfg).unwrap();
    let x = column(&d);
    let mean = x.iter().sum::<f64>() / x.len() as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / x.len() as f64;
    assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.05, "{mean} {var}");
}

#[test]
fn poisson_posterior_mean_matches_grid() {
    let data = poisson_outlier_data(&PoissonDataConfig { n: 60, shape: 2.0, n_outliers: 0, ..Default::default() }).unwrap();
    let m = PoissonGlm::new(&data).unwrap();
    let (mode, cov) = m.map_estimate(None).unwrap();
    let sd: Vec<f64> = (0..4).map(|j| cov[[j, j]].sqrt()).collect();
    let n: usize = 21;
    let axis = |j: usize, i: usize| mode[j] + sd[j] * (-6.0 + 12.0 * i as f64 / (n - 1) as f64);
    let mut pts = Vec::with_capacity(n.pow(4));
    for a in 0..n {
        for b in 0..n {
            for c in 0..n {
                for e in 0..n {
                    let t = [axis(0, a), axis(1, b), axis(2, c), axis(3, e)];
                    pts.push((m.log_joint(&t), t));
                }
            }
        }
    }
    let top = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = pts.iter().map(|p| (p.0 - top).exp()).sum();
    let grid_mean: Vec<f64> = (0..4).map(|j| pts.iter().map(|p| (p.0 - top).exp() * p.1[j]).sum::<f64>() / z).collect();

    let draws = m.sample_posterior(20_000, 12, None).unwrap();
    for j in 0..4 {
        let col: Vec<f64> = draws.rows().map(|r| r[j]).collect();
        let mean = col.iter().sum::<f64>() / col.len() as f64;
        let se = batch_means_se(&col, 20);
        assert!((mean - grid_mean[j]).abs() < 3.0 * se, "coef {j}: {mean} vs {} (se {se})", grid_mean[j]);
    }
}

#[test]
fn log_joint_factorizes() {
    let gm = GaussianModel::new(vec![0.3, -1.0, 2.2, 0.4]).unwrap();
    let kv = KnownVarianceGaussian::new(vec![0.3, -1.0, 2.2], 1.3).unwrap();
    let pm = PoissonGlm::new(&poisson_outlier_data(&PoissonDataConfig::default()).unwrap()).unwrap();
    let check = |m: &dyn Model, theta: &[f64]| {
        let sum: f64 = (0..m.n_obs()).map(|i| m.log_lik(theta, i)).sum();
        let rest = m.log_joint(theta) - sum;
        assert!((rest - m.log_prior(theta)).abs() < 1e-9 * (1.0 + sum.abs()), "{}", m.name());
    };
    check(&gm, &[0.1, -0.2]);
    check(&kv, &[0.7]);
    check(&pm, &[1.0, 0.3, -0.2, 0.1]);
}

#[test]
fn large_outlier_predictive_density() {
    // magnitude only: the base observations are a different realization
    let y = gaussian_outlier_data(3, 29, 20.0);
    let lpd = gaussian_analytic_loo_lpd(&y, 29).unwrap();
    assert!((lpd + 44.3).abs() < 5.0, "{lpd}");
}

#[test]
fn easy_outlier_free_fold_matches_closed_form() {
    let y = gaussian_outlier_data(3, 29, 0.0);
    let exact = gaussian_analytic_loo_lpd(&y, 29).unwrap();
    let m = GaussianModel::new(y).unwrap();
    let opts = LooOptions { folds: Some(vec![29]), ..Default::default() };
    let mean_err = (0..20)
        .map(|seed| {
            let d = m.sample_posterior(4000, seed, None).unwrap();
            let lp = log_joint_at(&m, &d);
            psis_loo(&m, &d, &lp, &opts).unwrap().folds[0].elpd - exact
        })
        .sum::<f64>()
        / 20.0;
    assert!(mean_err.abs() < 0.05, "{mean_err}");
}

#[test]
fn moment_matching_and_psis_agree_on_easy_data() {
    let y = column(&normal_draws(40, 1, 77));
    let m = GaussianModel::new(y.clone()).unwrap();
    let d = m.sample_posterior(4000, 2, None).unwrap();
    let lp = log_joint_at(&m, &d);
    let opts = LooOptions::default();
    let a = psis_loo(&m, &d, &lp, &opts).unwrap();
    let b = mm_loo(&m, &d, &lp, &opts).unwrap();
    let exact: f64 = (0..y.len()).map(|i| gaussian_analytic_loo_lpd(&y, i).unwrap()).sum();
    assert_eq!(a.n_bad, 0);
    assert!((a.elpd_loo - b.elpd_loo).abs() < 0.1);
    assert!((b.elpd_loo - exact).abs() < 0.5, "{} {exact}", b.elpd_loo);
}

#[test]
fn naive_refit_is_biased_low_for_outlier() {
    let y = gaussian_outlier_data(3, 29, 20.0);
    let exact = gaussian_analytic_loo_lpd(&y, 29).unwrap();
    let m = GaussianModel::new(y).unwrap();
    let low = (0..10)
        .filter(|&seed| {
            let opts = LooOptions { folds: Some(vec![29]), adapt: AdaptOptions { seed, ..Default::default() }, ..Default::default() };
            naive_loo(&m, 4000, &opts).unwrap().folds[0].elpd < exact
        })
        .count();
    assert_eq!(low, 10);
}

#[test]
fn proposal_densities_integrate_to_one() {
    for family in [ProposalFamily::Gaussian, ProposalFamily::StudentT3] {
        let prop = ParametricProposal::new(family, vec![0.7], array![[1.3]]).unwrap();
        let f = |x: f64| {
            let d = DrawMatrix::from_rows(&[vec![x], vec![x]]).unwrap();
            proposal_log_density(&prop, &d).unwrap()[0].exp()
        };
        let mass = quad(f, -4000.0, 4000.0, 1e-12);
        // t3 mass beyond |x| > 4000 is about 2e-10
        assert!((mass - 1.0).abs() < 1e-8, "{family:?} {mass}");
    }
}

#[test]
fn loo_weights_with_empty_chain_differ_by_a_constant() {
    let m = GaussianModel::new(column(&normal_draws(20, 1, 9))).unwrap();
    let d = m.sample_posterior(500, 1, None).unwrap();
    let ll: Vec<f64> = d.rows().map(|r| m.log_lik(r.as_slice().unwrap(), 4)).collect();
    let raw = loo_log_weights(&ll).unwrap();
    let lp = log_joint_at(&m, &d);
    // p(theta | y_-i) / g with g the full posterior, both unnormalized
    let lt: Vec<f64> = lp.iter().zip(&ll).map(|(p, l)| p - l).collect();
    let general = common_log_weights(&lt, &lp, false).unwrap();
    let c = general.log_mag()[0] - raw.log_mag()[0];
    for (a, b) in general.log_mag().iter().zip(raw.log_mag()) {
        assert!((a - b - c).abs() < 1e-9);
    }
}
