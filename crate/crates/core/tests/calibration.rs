//! Outer Monte-Carlo checks of the null ensembles on correctly specified data.

use lmmgof::rng::{derive_seed, stream_rng};
use lmmgof::{
    fit_lmm, run_gof, run_gof_multi, simulate_dataset, FitOptions, GofOptions, Method, NullScheme, ProcessSpec,
    SchemeKind, SimulationScenario,
};
use rayon::prelude::*;

#[test]
fn refit_flip_rejects_at_nominal_rates_under_the_null() {
    let sc = SimulationScenario::example_i(30, 6);
    let r = 150;
    let pvals: Vec<(f64, f64)> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let ds = simulate_dataset(&sc, &mut stream_rng(51, rep as u64)).unwrap();
            let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
            let scheme = NullScheme::new(SchemeKind::RefitFlip, 99, derive_seed(52, rep as u64));
            let res = run_gof_multi(
                &ds,
                &fit,
                &[ProcessSpec::O, ProcessSpec::F],
                &scheme,
                &Default::default(),
            )
            .unwrap();
            (res[0].p_cvm, res[1].p_cvm)
        })
        .collect();
    for alpha in [0.01, 0.05, 0.10] {
        let band = 3.0 * (alpha * (1.0 - alpha) / r as f64).sqrt();
        for (name, pick) in [("O", 0usize), ("F", 1)] {
            let rate = pvals
                .iter()
                .filter(|p| if pick == 0 { p.0 } else { p.1 } <= alpha)
                .count() as f64
                / r as f64;
            assert!(
                (rate - alpha).abs() <= band,
                "{name} at {alpha}: {rate} outside ±{band}"
            );
        }
    }
}

#[test]
fn refit_ensemble_spread_matches_the_sampling_spread() {
    // variance of the observed F-process at the median score across datasets,
    // against the spread of one dataset's refit ensemble at the same point
    let sc = SimulationScenario::example_i(50, 10);
    let r = 300;
    let observed: Vec<f64> = (0..r)
        .into_par_iter()
        .map(|rep| {
            let ds = simulate_dataset(&sc, &mut stream_rng(53, rep as u64)).unwrap();
            let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
            let mut scores: Vec<f64> = fit
                .population_fitted(&ds)
                .iter()
                .flat_map(|v| v.iter().copied())
                .collect();
            scores.sort_by(f64::total_cmp);
            let opts = GofOptions {
                keep_processes: true,
                ..Default::default()
            };
            let res = run_gof(
                &ds,
                &fit,
                &ProcessSpec::F,
                &NullScheme::new(SchemeKind::SimPan, 1, 1),
                &opts,
            )
            .unwrap();
            res.observed.eval(scores[scores.len() / 2])
        })
        .collect();
    let var = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let outer = var(&observed);

    let ds = simulate_dataset(&sc, &mut stream_rng(54, 0)).unwrap();
    let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
    let mut scores: Vec<f64> = fit
        .population_fitted(&ds)
        .iter()
        .flat_map(|v| v.iter().copied())
        .collect();
    scores.sort_by(f64::total_cmp);
    let opts = GofOptions {
        keep_processes: true,
        ..Default::default()
    };
    let res = run_gof(
        &ds,
        &fit,
        &ProcessSpec::F,
        &NullScheme::new(SchemeKind::RefitFlip, 500, 55),
        &opts,
    )
    .unwrap();
    let at = scores[scores.len() / 2];
    let inner: Vec<f64> = res.null_processes.iter().map(|p| p.eval(at)).collect();
    let inner_var = var(&inner);

    // sample variances of near-normal values: SE ≈ var·√(2/(r−1))
    let se = (outer.powi(2) * 2.0 / (r - 1) as f64 + inner_var.powi(2) * 2.0 / 499.0).sqrt();
    assert!(
        (outer - inner_var).abs() <= 3.0 * se,
        "outer {outer:.4} vs ensemble {inner_var:.4} (se {se:.4})"
    );
}
