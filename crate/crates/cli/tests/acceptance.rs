//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Failures are reported, not hidden; set `LMMGOF_ACCEPTANCE_STRICT=1` to
//! turn any FAIL into a nonzero exit.
//!
//! Seeds are fixed up front and were not tuned against the outcomes.

use std::fs;
use std::process::Command;
use std::time::Instant;

use lmmgof::nalgebra::{DMatrix, DVector};
use lmmgof::numerics::{max_abs, pseudo_inverse, symmetrize};
use lmmgof::rng::stream_rng;
use lmmgof::transform::{build_ab_block, build_ab_full, weight_matrices};
use lmmgof::{
    cusum, fit_lmm, margin_of_error, run_study, simulate_dataset, Cluster, ClusteredDataset, FitOptions, FittedLmm,
    GofOptions, Method, NullEngine, NullScheme, ProcessSpec, SchemeKind, SimulationScenario, Statistic, StudyProcess,
    VarianceComponents, WeightKind,
};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

const IDENTITY_TOL: f64 = 1e-8;
const ANOVA_REL_TOL: f64 = 1e-4;
const GLS_TOL: f64 = 1e-6;
const ALPHA: f64 = 0.05;

struct Report {
    lines: Vec<(bool, String)>,
    gls_max: f64,
}

impl Report {
    fn record(&mut self, id: usize, pass: bool, detail: String) {
        let line = format!("[{}] criterion {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        self.lines.push((pass, line));
    }

    fn note_gls(&mut self, v: f64) {
        self.gls_max = self.gls_max.max(v);
    }
}

fn normal(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_spd(rng: &mut impl Rng, k: usize) -> DMatrix<f64> {
    let f = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
    symmetrize(&(&f * f.transpose() + DMatrix::identity(k, k) * 0.1))
}

fn names(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|j| format!("{prefix}{j}")).collect()
}

fn dataset(clusters: Vec<Cluster>, p: usize, k: usize) -> ClusteredDataset {
    ClusteredDataset::from_clusters(clusters, names("x", p), names("z", k)).expect("valid design")
}

/// Random unbalanced design: intercept plus Gaussian covariates in both parts.
fn general_design(rng: &mut impl Rng, n: usize, k: usize) -> ClusteredDataset {
    let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(k.max(2)..=8)).collect();
    // at least one residual degree of freedom
    let p = rng.random_range(1..=3).min(sizes.iter().sum::<usize>() - 1);
    let clusters = sizes
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let x = DMatrix::from_fn(m, p, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            let z = DMatrix::from_fn(m, k, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            let y = DVector::from_fn(m, |_, _| normal(rng));
            Cluster {
                label: i.to_string(),
                y,
                x,
                z,
            }
        })
        .collect();
    dataset(clusters, p, k)
}

/// Fixed columns are the leading random columns, so Im(X_i) ⊂ Im(Z_i).
fn nested_design(rng: &mut impl Rng, n: usize, k: usize) -> ClusteredDataset {
    let p = rng.random_range(1..=k);
    let clusters = (0..n)
        .map(|i| {
            let m = rng.random_range(k.max(2)..=8);
            let z = DMatrix::from_fn(m, k, |_, c| if c == 0 { 1.0 } else { normal(rng) });
            let x = z.columns(0, p).into_owned();
            let y = DVector::from_fn(m, |_, _| normal(rng));
            Cluster {
                label: i.to_string(),
                y,
                x,
                z,
            }
        })
        .collect();
    dataset(clusters, p, k)
}

/// Random intercept with covariates centered over the stacked data.
fn centered_design(rng: &mut impl Rng, n: usize) -> ClusteredDataset {
    let sizes: Vec<usize> = (0..n).map(|_| rng.random_range(2..=8)).collect();
    let total: usize = sizes.iter().sum();
    let p = rng.random_range(1..=3).min(total - 1);
    let mut cov = DMatrix::from_fn(total, p, |_, c| if c == 0 { 1.0 } else { normal(rng) });
    for c in 1..p {
        let mean = cov.column(c).mean();
        cov.column_mut(c).add_scalar_mut(-mean);
    }
    let mut at = 0;
    let clusters = sizes
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let x = cov.rows(at, m).into_owned();
            at += m;
            Cluster {
                label: i.to_string(),
                y: DVector::from_fn(m, |_, _| normal(rng)),
                x,
                z: DMatrix::from_element(m, 1, 1.0),
            }
        })
        .collect();
    dataset(clusters, p, 1)
}

fn components(rng: &mut impl Rng, ds: &ClusteredDataset) -> FittedLmm {
    let vc = VarianceComponents::new(random_spd(rng, ds.k()), rng.random_range(0.2..2.0)).unwrap();
    FittedLmm::from_components(ds, vc, Method::Reml).unwrap()
}

/// Condition number of `B̃_i` on its numerical range.
fn range_condition(b: &DMatrix<f64>) -> f64 {
    let ev = lmmgof::numerics::sym_eigen(b).values;
    let top = ev.amax();
    let low = ev
        .iter()
        .map(|v| v.abs())
        .filter(|&v| v > top * 1e-14)
        .fold(f64::INFINITY, f64::min);
    top / low
}

fn theorem_residual(ds: &ClusteredDataset, fit: &FittedLmm) -> f64 {
    let (a, b) = build_ab_full(ds, fit, usize::MAX).unwrap();
    max_abs(&(&a - &a * pseudo_inverse(&b, None) * &b))
}

fn criterion_1(rep: &mut Report) {
    let start = Instant::now();
    let (mut block, mut nested, mut centered, mut lemma, mut mp) = (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    // diagnostics: clusters with n_i > k, designs where every n_i > k, worst conditioning
    let (mut block_tall, mut nested_tall, mut worst_cond) = (0.0f64, 0.0f64, 0.0f64);
    for d in 0..200u64 {
        let mut rng = stream_rng(1, d);
        let n = rng.random_range(1..=20);
        let k = rng.random_range(1..=3);

        let ds = general_design(&mut rng, n, k);
        let fit = components(&mut rng, &ds);
        for ((a, b), c) in build_ab_block(&ds, &fit).iter().zip(ds.clusters()) {
            let e = max_abs(&(a - a * pseudo_inverse(b, None) * b));
            block = block.max(e);
            if c.len() > k {
                block_tall = block_tall.max(e);
            }
            worst_cond = worst_cond.max(range_condition(b));
        }

        let ds = nested_design(&mut rng, n, k);
        let fit = components(&mut rng, &ds);
        let e = theorem_residual(&ds, &fit);
        nested = nested.max(e);
        if ds.clusters().iter().all(|c| c.len() > k) {
            nested_tall = nested_tall.max(e);
        }

        let ds = centered_design(&mut rng, n);
        let fit = components(&mut rng, &ds);
        centered = centered.max(theorem_residual(&ds, &fit));

        // P, M share the invariant subspace Im(P) by construction
        let q = rng.random_range(2..=20);
        let r = rng.random_range(1..=q);
        let basis = DMatrix::from_fn(q, q, |_, _| normal(&mut rng)).qr().q();
        let u = basis.columns(0, r).into_owned();
        let w = basis.columns(r, q - r).into_owned();
        let lam = DVector::from_fn(r, |_, _| {
            rng.random_range(0.2..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }
        });
        let p = &u * DMatrix::from_diagonal(&lam) * u.transpose();
        let s = symmetrize(&DMatrix::from_fn(r, r, |_, _| normal(&mut rng)));
        let t = symmetrize(&DMatrix::from_fn(q - r, q - r, |_, _| normal(&mut rng)));
        let m = &u * s * u.transpose() + &w * t * w.transpose();
        let c = &m * p.transpose();
        let qm = &p * &m * p.transpose();
        lemma = lemma.max(max_abs(&(&c - &c * pseudo_inverse(&qm, None) * &qm)));

        // rank-deficient PSD matrix with nonzero spectrum in [0.1, 10]
        let q = rng.random_range(1..=50);
        let rank = rng.random_range(0..=q);
        let basis = DMatrix::from_fn(q, q, |_, _| normal(&mut rng)).qr().q();
        let spec = DVector::from_fn(q, |i, _| if i < rank { rng.random_range(0.1..10.0) } else { 0.0 });
        let b = symmetrize(&(&basis * DMatrix::from_diagonal(&spec) * basis.transpose()));
        let bp = pseudo_inverse(&b, None);
        let (bbp, bpb) = (&b * &bp, &bp * &b);
        for e in [
            max_abs(&(&bbp * &b - &b)),
            max_abs(&(&bpb * &bp - &bp)),
            max_abs(&(bbp.transpose() - &bbp)),
            max_abs(&(bpb.transpose() - &bpb)),
        ] {
            mp = mp.max(e);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let worst = block.max(nested).max(centered).max(lemma).max(mp);
    rep.record(
        1,
        worst < IDENTITY_TOL && secs < 60.0,
        format!(
            "matrix identities over 200 designs: blocks {block:.1e}, nested {nested:.1e}, centered {centered:.1e}, \
             lemma {lemma:.1e}, Moore-Penrose {mp:.1e} (tol {IDENTITY_TOL:.0e}); {secs:.1}s (limit 60s) \
             [diagnostic: blocks with n_i > k {block_tall:.1e}, nested designs with all n_i > k {nested_tall:.1e}, \
             largest cond(B_i) {worst_cond:.1e}]"
        ),
    );
}

fn criterion_2(rep: &mut Report) {
    let start = Instant::now();
    let (n, m) = (30usize, 5usize);
    let (mut worst, mut boundary) = (0.0f64, 0usize);
    for d in 0..100u64 {
        let mut rng = stream_rng(2, d);
        let groups: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let b = 0.6 * normal(&mut rng);
                (0..m).map(|_| 1.0 + b + normal(&mut rng)).collect()
            })
            .collect();
        let clusters = groups
            .iter()
            .enumerate()
            .map(|(i, g)| Cluster {
                label: i.to_string(),
                y: DVector::from_vec(g.clone()),
                x: DMatrix::from_element(m, 1, 1.0),
                z: DMatrix::from_element(m, 1, 1.0),
            })
            .collect();
        let ds = dataset(clusters, 1, 1);
        let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
        rep.note_gls(fit.gls_score_max(&ds));

        let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / m as f64).collect();
        let grand = means.iter().sum::<f64>() / n as f64;
        let sse: f64 = groups
            .iter()
            .zip(&means)
            .map(|(g, mu)| g.iter().map(|y| (y - mu).powi(2)).sum::<f64>())
            .sum();
        let ssb: f64 = means.iter().map(|mu| m as f64 * (mu - grand).powi(2)).sum();
        let mse = sse / (n * (m - 1)) as f64;
        let msb = ssb / (n - 1) as f64;
        let d_hat = fit.vc.d[(0, 0)];
        let err = if msb > mse {
            let sb2 = (msb - mse) / m as f64;
            ((fit.vc.sigma2 - mse).abs() / mse).max((d_hat - sb2).abs() / sb2)
        } else {
            // on the boundary the REML variance is the pooled SST/(N−1)
            boundary += 1;
            let sst = sse + ssb;
            let s2 = sst / (n * m - 1) as f64;
            ((fit.vc.sigma2 - s2).abs() / s2).max(d_hat / s2)
        };
        worst = worst.max(err);
    }
    let secs = start.elapsed().as_secs_f64();
    rep.record(
        2,
        worst < ANOVA_REL_TOL && secs < 60.0,
        format!(
            "REML vs ANOVA on 100 balanced one-way datasets ({boundary} on the boundary): max rel err {worst:.2e} \
             (tol {ANOVA_REL_TOL:.0e}); {secs:.1}s (limit 60s)"
        ),
    );
}

/// Quantiles of the fitted-value grid used as evaluation points.
fn grid_quantile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Covariance of the SimPan fixed-part process given the data: `V_i`
/// replaced by `e_i^P e_i^Pᵀ` inside the fitted-model covariance.
fn conditional_pan_cov<'a>(
    ds: &'a ClusteredDataset,
    fit: &'a FittedLmm,
    weights: &'a [DMatrix<f64>],
) -> impl Fn(f64, f64) -> f64 + 'a {
    let e = fit.marginal_residuals(ds);
    let fitted: Vec<DVector<f64>> = fit.population_fitted(ds);
    move |t: f64, s: f64| {
        let coef = |at: f64| -> Vec<f64> {
            let chi = |i: usize| fitted[i].map(|v| if v <= at { 1.0 } else { 0.0 });
            let mut c = DVector::<f64>::zeros(ds.p()).transpose();
            for (i, cl) in ds.clusters().iter().enumerate() {
                c += chi(i).transpose() * &weights[i] * &fit.g[i] * &cl.x;
            }
            ds.clusters()
                .iter()
                .enumerate()
                .map(|(i, cl)| {
                    let direct = (chi(i).transpose() * &weights[i] * &fit.g[i] * &e[i])[0];
                    let proj = (&c * &fit.h_inv * cl.x.transpose() * &fit.v_inv[i] * &e[i])[0];
                    direct - proj
                })
                .collect()
        };
        let (a, b) = (coef(t), coef(s));
        a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / ds.n_clusters() as f64
    }
}

fn criterion_4(rep: &mut Report) {
    let sc = SimulationScenario::example_i(50, 10);
    let ds = simulate_dataset(&sc, &mut stream_rng(4, 0)).unwrap();
    let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
    rep.note_gls(fit.gls_score_max(&ds));
    let opts = GofOptions {
        keep_processes: true,
        ..Default::default()
    };
    let mut engine = NullEngine::new(&ds, &fit, &[ProcessSpec::F], &opts).unwrap();
    let res = engine.run(&NullScheme::new(SchemeKind::SimPan, 5000, 4)).unwrap();
    let procs = &res[0].null_processes;

    let mut fitted: Vec<f64> = ds
        .clusters()
        .iter()
        .flat_map(|c| (&c.x * &fit.beta).data.as_vec().clone())
        .collect();
    fitted.sort_by(f64::total_cmp);
    let pairs = [(0.25, 0.25), (0.5, 0.5), (0.75, 0.75), (0.25, 0.5), (0.25, 0.75)];
    let weights = weight_matrices(&fit, WeightKind::InvSqrtV).unwrap();
    let cond = conditional_pan_cov(&ds, &fit, &weights);
    let r = procs.len() as f64;
    let mut all_in = true;
    let mut parts = Vec::new();
    for (qt, qs) in pairs {
        let (t, s) = (grid_quantile(&fitted, qt), grid_quantile(&fitted, qs));
        let wt: Vec<f64> = procs.iter().map(|p| p.eval(t)).collect();
        let ws: Vec<f64> = procs.iter().map(|p| p.eval(s)).collect();
        let (mt, ms) = (wt.iter().sum::<f64>() / r, ws.iter().sum::<f64>() / r);
        let prods: Vec<f64> = wt.iter().zip(&ws).map(|(a, b)| (a - mt) * (b - ms)).collect();
        let cov = prods.iter().sum::<f64>() / (r - 1.0);
        let sd = (prods.iter().map(|x| (x - cov).powi(2)).sum::<f64>() / (r - 1.0)).sqrt();
        let se = sd / r.sqrt();
        let k = cusum::covariance_kn(&ds, &fit, &weights, t, s);
        let z = (cov - k) / se;
        all_in &= z.abs() <= 3.0;
        let kc = cond(t, s);
        parts.push(format!(
            "({qt},{qs}): emp {cov:.4} vs K_N {k:.4}, z {z:+.2} [given data {kc:.4}, z {:+.2}]",
            (cov - kc) / se
        ));
    }
    rep.record(
        4,
        all_in,
        format!(
            "SimPan F covariance, 5000 replicates, |z| <= 3 at 5 pairs: {}",
            parts.join("; ")
        ),
    );
}

fn rate(out: &lmmgof::StudyOutcome, scheme: SchemeKind, process: StudyProcess) -> f64 {
    out.table
        .get(ALPHA, scheme, process, Statistic::Cvm)
        .expect("row present")
        .rate
}

fn study(rep: &mut Report, mut sc: SimulationScenario, seed: u64) -> lmmgof::StudyOutcome {
    sc.replications = 500;
    sc.m = 500;
    sc.seed = seed;
    let start = Instant::now();
    let out = run_study(&sc).unwrap();
    rep.note_gls(out.max_gls_score);
    eprintln!(
        "  {}: {:.0}s, {} failed replications, {} excluded null replicates",
        sc.name,
        start.elapsed().as_secs_f64(),
        out.failed_replications.len(),
        out.excluded_null_replicates
    );
    out
}

fn within(x: f64, centre: f64, tol: f64) -> bool {
    (x - centre).abs() <= tol
}

fn criterion_5(rep: &mut Report) {
    let out = study(rep, SimulationScenario::example_i(50, 10), 5);
    let (o, f) = (
        rate(&out, SchemeKind::RefitFlip, StudyProcess::O),
        rate(&out, SchemeKind::RefitFlip, StudyProcess::F),
    );
    rep.record(
        5,
        within(o, 0.0542, 0.03) && within(f, 0.0428, 0.03),
        format!("Example I size: O {o:.4} (0.0542 ± 0.03), F {f:.4} (0.0428 ± 0.03)"),
    );
}

fn criterion_6(rep: &mut Report) {
    let mut sc = SimulationScenario::example_ii(50, 10);
    sc.schemes = vec![SchemeKind::RefitFlip, SchemeKind::SimPan];
    let out = study(rep, sc, 6);
    let o = rate(&out, SchemeKind::RefitFlip, StudyProcess::O);
    let f = rate(&out, SchemeKind::RefitFlip, StudyProcess::F);
    let pan = rate(&out, SchemeKind::SimPan, StudyProcess::O);
    let band = |x: f64| (0.02..=0.08).contains(&x);
    rep.record(
        6,
        band(o) && band(f) && pan < 0.03,
        format!("Example II size: refit O {o:.4}, F {f:.4} (in [0.02, 0.08]); SimPan O {pan:.4} (< 0.03)"),
    );
}

fn criterion_7(rep: &mut Report) {
    let out = study(rep, SimulationScenario::example_iii(50, 1.5), 7);
    let o = rate(&out, SchemeKind::RefitFlip, StudyProcess::O);
    let f = rate(&out, SchemeKind::RefitFlip, StudyProcess::F);
    rep.record(
        7,
        o >= 0.30 && within(f, 0.05, 0.03),
        format!("Example III: O power {o:.4} (>= 0.30), F size {f:.4} (0.05 ± 0.03)"),
    );
}

fn criterion_8(rep: &mut Report) {
    let out = study(rep, SimulationScenario::example_iv(75, 1.5), 8);
    let o = rate(&out, SchemeKind::RefitFlip, StudyProcess::O);
    let f = rate(&out, SchemeKind::RefitFlip, StudyProcess::F);
    rep.record(
        8,
        f >= 0.80 && f > o,
        format!("Example IV: F power {f:.4} (>= 0.80), O power {o:.4} (< F)"),
    );
}

fn on_lattice(p: f64, m: usize) -> bool {
    let j = p * (m + 1) as f64 - 1.0;
    (j - j.round()).abs() < 1e-9 && j.round() >= 0.0 && j.round() <= m as f64
}

fn criterion_9(rep: &mut Report) {
    let mut lattice = true;
    let mut checked = 0;
    for (d, sc) in [
        SimulationScenario::example_i(20, 6),
        SimulationScenario::example_iii(20, 1.5),
        SimulationScenario::example_iv(20, 1.0),
    ]
    .into_iter()
    .enumerate()
    {
        let ds = simulate_dataset(&sc, &mut stream_rng(9, d as u64)).unwrap();
        let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
        rep.note_gls(fit.gls_score_max(&ds));
        for kind in [SchemeKind::RefitFlip, SchemeKind::SimPan, SchemeKind::SimChol] {
            let mut engine =
                NullEngine::new(&ds, &fit, &[ProcessSpec::O, ProcessSpec::F], &GofOptions::default()).unwrap();
            for r in engine.run(&NullScheme::new(kind, 99, 9)).unwrap() {
                lattice &= on_lattice(r.p_ks, r.effective_m()) && on_lattice(r.p_cvm, r.effective_m());
                checked += 2;
            }
        }
    }
    // strong quadratic misfit: no null replicate reaches the observed statistic
    let ds = simulate_dataset(&SimulationScenario::example_iv(75, 3.0), &mut stream_rng(9, 100)).unwrap();
    let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
    rep.note_gls(fit.gls_score_max(&ds));
    let mut engine = NullEngine::new(&ds, &fit, &[ProcessSpec::F], &GofOptions::default()).unwrap();
    let r = engine
        .run(&NullScheme::new(SchemeKind::RefitFlip, 500, 9))
        .unwrap()
        .remove(0);
    let floor = r.p_cvm == 1.0 / 501.0 && r.effective_m() == 500;
    rep.record(
        9,
        lattice && floor,
        format!(
            "p-values on (1+j)/(M+1) for {checked} values: {lattice}; strong misfit p_CvM = {:.6} with M = {} \
             (expected exactly 1/501)",
            r.p_cvm,
            r.effective_m()
        ),
    );
}

fn criterion_10(rep: &mut Report) {
    let dir = tempfile::TempDir::new().unwrap();
    let mut sc = SimulationScenario::example_iv(15, 1.0);
    sc.replications = 8;
    sc.m = 39;
    sc.schemes = vec![SchemeKind::RefitFlip, SchemeKind::SimPan, SchemeKind::SimChol];
    let config = dir.path().join("scenario.json");
    fs::write(&config, serde_json::to_string(&sc).unwrap()).unwrap();
    let mut tables = Vec::new();
    for (run, threads) in [(0, "1"), (1, "1"), (2, "3")] {
        let out = dir.path().join(format!("run{run}"));
        let status = Command::new(env!("CARGO_BIN_EXE_lmmgof"))
            .args(["--threads", threads, "simulate", "--config"])
            .arg(&config)
            .args(["--seed", "10", "--out"])
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success());
        tables.push(fs::read(out.join("table.csv")).unwrap());
    }
    let same = tables.windows(2).all(|w| w[0] == w[1]);
    rep.record(
        10,
        same && !tables[0].is_empty(),
        format!(
            "simulate table.csv byte-identical across 2 runs at 1 thread and 1 run at 3 threads ({} bytes)",
            tables[0].len()
        ),
    );
}

fn main() {
    let mut rep = Report {
        lines: Vec::new(),
        gls_max: 0.0,
    };
    // LMMGOF_ACCEPTANCE_ONLY=1,4 restricts the run to a comma-separated subset
    let only: Option<Vec<usize>> = std::env::var("LMMGOF_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let criteria: [(usize, fn(&mut Report)); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (4, criterion_4),
        (9, criterion_9),
        (10, criterion_10),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    for (id, run) in criteria {
        if only.as_ref().is_none_or(|o| o.contains(&id)) {
            run(&mut rep);
        }
    }
    let g = rep.gls_max;
    rep.record(
        3,
        g <= GLS_TOL,
        format!("GLS score max |Σ X_iᵀV̂_i⁻¹e_i^P| over every fit above: {g:.2e} (tol {GLS_TOL:.0e})"),
    );
    println!(
        "note: binomial margin at R=500, alpha={ALPHA}: ±{:.4}",
        margin_of_error(ALPHA, 500)
    );
    let failed = rep.lines.iter().filter(|(ok, _)| !ok).count();
    println!("acceptance: {} passed, {failed} failed", rep.lines.len() - failed);
    // the report is the product; a nonzero exit is opt-in
    if failed > 0 && std::env::var_os("LMMGOF_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
