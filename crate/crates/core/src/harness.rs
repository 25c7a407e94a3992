//! Monte-Carlo size and power studies on the quadratic-trend generator
//!
//! `y = β₀ + β₁x₁ + β₂x₂ + β₃x₁² + b₀ + b₁x₁ + ε` with `x₁, x₂ ~ U(0,1)`.
//!
//! Replication `r` simulates from stream `(seed, r)` and seeds its null
//! ensembles with `derive_seed`, so tables are identical for any thread count.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Cluster, ClusteredDataset};
use crate::error::{Error, Result};
use crate::estimation::{fit_lmm, FitOptions, Method};
use crate::null::{run_gof_multi, GofOptions, NullScheme, ProcessSpec, SchemeKind};
use crate::rng::{derive_seed, stream_rng};
use crate::transform::{ResidualFlavor, Variant};

/// Law of the three noise sources `ε`, `b₀`, `b₁`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum NoiseLaw {
    /// Centered normal with the scenario's variances.
    Normal,
    /// `Gamma(shape, scale) − shape·scale` for every source; the scenario's
    /// variances are not used.
    CenteredGamma { shape: f64, scale: f64 },
}

impl NoiseLaw {
    /// `Gamma(1, 2) − 2`: skewed, zero mean, variance 4.
    pub fn centered_gamma_1_2() -> Self {
        NoiseLaw::CenteredGamma { shape: 1.0, scale: 2.0 }
    }

    /// Zero-mean draw. `variance` applies to the normal law only.
    pub fn sample<R: Rng + ?Sized>(&self, variance: f64, rng: &mut R) -> f64 {
        match *self {
            NoiseLaw::Normal => {
                let z: f64 = StandardNormal.sample(rng);
                variance.sqrt() * z
            }
            NoiseLaw::CenteredGamma { shape, scale } => {
                Gamma::new(shape, scale)
                    .expect("validated gamma parameters")
                    .sample(rng)
                    - shape * scale
            }
        }
    }
}

/// Columns available to the fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Intercept,
    X1,
    X2,
    X1sq,
}

impl Term {
    fn value(self, x1: f64, x2: f64) -> f64 {
        match self {
            Term::Intercept => 1.0,
            Term::X1 => x1,
            Term::X2 => x2,
            Term::X1sq => x1 * x1,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Term::Intercept => "(Intercept)",
            Term::X1 => "x1",
            Term::X2 => "x2",
            Term::X1sq => "x1^2",
        }
    }
}

/// Processes tracked by a study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StudyProcess {
    O,
    F,
}

impl fmt::Display for StudyProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StudyProcess::O => "O",
            StudyProcess::F => "F",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Ks,
    Cvm,
}

impl fmt::Display for Statistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Statistic::Ks => "KS",
            Statistic::Cvm => "CvM",
        })
    }
}

fn default_intercept() -> f64 {
    -1.0
}
fn default_beta1() -> f64 {
    0.25
}
fn default_beta2() -> f64 {
    0.5
}
fn default_sigma2_eps() -> f64 {
    0.5
}
fn default_sigma2_b() -> f64 {
    0.25
}
fn default_law() -> NoiseLaw {
    NoiseLaw::Normal
}
fn default_fixed() -> Vec<Term> {
    vec![Term::Intercept, Term::X1, Term::X2]
}
fn default_random() -> Vec<Term> {
    vec![Term::Intercept, Term::X1]
}
fn default_replications() -> usize {
    500
}
fn default_m() -> usize {
    500
}
fn default_schemes() -> Vec<SchemeKind> {
    vec![SchemeKind::RefitFlip]
}
fn default_processes() -> Vec<StudyProcess> {
    vec![StudyProcess::O, StudyProcess::F]
}
fn default_alphas() -> Vec<f64> {
    vec![0.01, 0.05, 0.10]
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationScenario {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    pub n_i: usize,
    #[serde(default = "default_intercept")]
    pub beta0: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default)]
    pub beta3: f64,
    #[serde(default = "default_sigma2_eps")]
    pub sigma2_eps: f64,
    #[serde(default = "default_sigma2_b")]
    pub sigma2_b0: f64,
    #[serde(default = "default_sigma2_b")]
    pub sigma2_b1: f64,
    #[serde(default = "default_law")]
    pub law: NoiseLaw,
    #[serde(default = "default_fixed")]
    pub fixed: Vec<Term>,
    #[serde(default = "default_random")]
    pub random: Vec<Term>,
    #[serde(default)]
    pub method: Method,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default = "default_m")]
    pub m: usize,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeKind>,
    #[serde(default = "default_processes")]
    pub processes: Vec<StudyProcess>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub flavor: ResidualFlavor,
    /// Start null refits from the fitted variance components.
    #[serde(default = "default_true")]
    pub warm_start: bool,
}

impl SimulationScenario {
    /// Correctly specified model with normal noise.
    pub fn example_i(n: usize, n_i: usize) -> Self {
        Self {
            name: "example-I".into(),
            n,
            n_i,
            beta0: default_intercept(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            beta3: 0.0,
            sigma2_eps: default_sigma2_eps(),
            sigma2_b0: default_sigma2_b(),
            sigma2_b1: default_sigma2_b(),
            law: NoiseLaw::Normal,
            fixed: default_fixed(),
            random: default_random(),
            method: Method::Reml,
            replications: default_replications(),
            m: default_m(),
            schemes: default_schemes(),
            processes: default_processes(),
            alphas: default_alphas(),
            seed: 0,
            variant: Variant::Block,
            flavor: ResidualFlavor::Individual,
            warm_start: true,
        }
    }

    /// Correctly specified model with centered gamma noise.
    pub fn example_ii(n: usize, n_i: usize) -> Self {
        Self {
            name: "example-II".into(),
            law: NoiseLaw::centered_gamma_1_2(),
            ..Self::example_i(n, n_i)
        }
    }

    /// Random slope omitted from the fitted model.
    pub fn example_iii(n: usize, sigma2_b1: f64) -> Self {
        Self {
            name: "example-III".into(),
            sigma2_b1,
            random: vec![Term::Intercept],
            ..Self::example_i(n, 10)
        }
    }

    /// Quadratic trend omitted from the fitted model.
    pub fn example_iv(n: usize, beta3: f64) -> Self {
        Self {
            name: "example-IV".into(),
            beta3,
            ..Self::example_i(n, 10)
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sc: Self = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidInput(format!("scenario: {msg}")));
        if self.n == 0 || self.n_i == 0 {
            return bad("n and n_i must be positive");
        }
        if self.replications == 0 || self.m == 0 {
            return bad("replications and m must be positive");
        }
        for v in [self.sigma2_eps, self.sigma2_b0, self.sigma2_b1] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad("variances must be finite and non-negative");
            }
        }
        if matches!(self.law, NoiseLaw::Normal) && self.sigma2_eps <= 0.0 {
            return bad("error variance must be positive");
        }
        if let NoiseLaw::CenteredGamma { shape, scale } = self.law {
            if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                return bad("gamma shape and scale must be positive");
            }
        }
        if self.fixed.is_empty() || self.random.is_empty() {
            return bad("fitted model needs fixed and random columns");
        }
        for terms in [&self.fixed, &self.random] {
            for (a, t) in terms.iter().enumerate() {
                if terms[..a].contains(t) {
                    return bad("repeated column in fitted model");
                }
            }
        }
        if self.schemes.is_empty() || self.processes.is_empty() || self.alphas.is_empty() {
            return bad("schemes, processes and alphas must be non-empty");
        }
        if self.alphas.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return bad("alphas must lie in (0, 1)");
        }
        Ok(())
    }
}

/// One dataset from the scenario's generator, laid out for its fitted model.
pub fn simulate_dataset<R: Rng + ?Sized>(sc: &SimulationScenario, rng: &mut R) -> Result<ClusteredDataset> {
    let p = sc.fixed.len();
    let k = sc.random.len();
    let clusters = (0..sc.n)
        .map(|i| {
            let b0 = sc.law.sample(sc.sigma2_b0, rng);
            let b1 = sc.law.sample(sc.sigma2_b1, rng);
            let mut x = DMatrix::zeros(sc.n_i, p);
            let mut z = DMatrix::zeros(sc.n_i, k);
            let mut y = DVector::zeros(sc.n_i);
            for r in 0..sc.n_i {
                let x1: f64 = rng.random();
                let x2: f64 = rng.random();
                let eps = sc.law.sample(sc.sigma2_eps, rng);
                y[r] = sc.beta0 + sc.beta1 * x1 + sc.beta2 * x2 + sc.beta3 * x1 * x1 + b0 + b1 * x1 + eps;
                for (c, t) in sc.fixed.iter().enumerate() {
                    x[(r, c)] = t.value(x1, x2);
                }
                for (c, t) in sc.random.iter().enumerate() {
                    z[(r, c)] = t.value(x1, x2);
                }
            }
            Cluster {
                label: (i + 1).to_string(),
                y,
                x,
                z,
            }
        })
        .collect();
    ClusteredDataset::from_clusters(
        clusters,
        sc.fixed.iter().map(|t| t.name().to_string()).collect(),
        sc.random.iter().map(|t| t.name().to_string()).collect(),
    )
}

/// `1.96·√(α(1−α)/R)`, the half-width of a 95% interval around a nominal size.
pub fn margin_of_error(alpha: f64, replications: usize) -> f64 {
    1.96 * (alpha * (1.0 - alpha) / replications as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionRow {
    pub alpha: f64,
    pub n: usize,
    pub n_i: usize,
    pub sigma2_b1: f64,
    pub beta3: f64,
    pub scheme: SchemeKind,
    pub process: StudyProcess,
    pub statistic: Statistic,
    pub rejections: usize,
    /// Replications that produced a p-value.
    pub replications: usize,
    pub rate: f64,
    /// `√(p̂(1−p̂)/R)`.
    pub se: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct RejectionTable {
    pub rows: Vec<RejectionRow>,
}

impl RejectionTable {
    pub fn get(
        &self,
        alpha: f64,
        scheme: SchemeKind,
        process: StudyProcess,
        statistic: Statistic,
    ) -> Option<&RejectionRow> {
        self.rows.iter().find(|r| {
            (r.alpha - alpha).abs() < 1e-12 && r.scheme == scheme && r.process == process && r.statistic == statistic
        })
    }

    /// CSV with fixed decimals, one row per (α, scheme, process, statistic).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "alpha",
            "n",
            "n_i",
            "sigma2_b1",
            "beta3",
            "scheme",
            "process",
            "statistic",
            "rejections",
            "replications",
            "rate",
            "se",
        ])?;
        for r in &self.rows {
            w.write_record([
                format!("{:.2}", r.alpha),
                r.n.to_string(),
                r.n_i.to_string(),
                format!("{:.4}", r.sigma2_b1),
                format!("{:.4}", r.beta3),
                r.scheme.to_string(),
                r.process.to_string(),
                r.statistic.to_string(),
                r.rejections.to_string(),
                r.replications.to_string(),
                format!("{:.4}", r.rate),
                format!("{:.4}", r.se),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// p-values of one replication, indexed `[scheme][process]` as `(ks, cvm)`.
type ReplicationPvalues = Vec<Vec<(f64, f64)>>;

struct Replication {
    pvalues: ReplicationPvalues,
    excluded: usize,
    gls_score: f64,
}

#[derive(Debug, Clone)]
pub struct StudyOutcome {
    pub table: RejectionTable,
    /// Replications excluded because the fit or every null refit failed, starting at 1.
    pub failed_replications: Vec<(usize, String)>,
    /// Null replicates dropped across all replications.
    pub excluded_null_replicates: usize,
    /// Per replication p-values (`None` for failed ones).
    pub pvalues: Vec<Option<ReplicationPvalues>>,
    /// Largest `|Σ X_iᵀV̂_i⁻¹e_i^P|` over the replications' fits.
    pub max_gls_score: f64,
}

fn run_replication(sc: &SimulationScenario, r: usize) -> Result<Replication> {
    let mut rng = stream_rng(sc.seed, r as u64);
    let ds = simulate_dataset(sc, &mut rng)?;
    let fit = fit_lmm(&ds, sc.method, &FitOptions::default())?;
    if !fit.converged {
        return Err(Error::NoConvergence {
            iterations: fit.iterations,
        });
    }
    let specs: Vec<ProcessSpec> = sc
        .processes
        .iter()
        .map(|p| match p {
            StudyProcess::O => ProcessSpec::O,
            StudyProcess::F => ProcessSpec::F,
        })
        .collect();
    let opts = GofOptions {
        variant: sc.variant,
        flavor: sc.flavor,
        warm_start: sc.warm_start,
        ..Default::default()
    };
    let rep_seed = derive_seed(sc.seed, r as u64);
    let mut excluded = 0;
    let mut out = Vec::with_capacity(sc.schemes.len());
    for (s, &kind) in sc.schemes.iter().enumerate() {
        let scheme = NullScheme::new(kind, sc.m, derive_seed(rep_seed, s as u64));
        let res = run_gof_multi(&ds, &fit, &specs, &scheme, &opts)?;
        excluded += res[0].failed_replicates.len();
        out.push(res.iter().map(|g| (g.p_ks, g.p_cvm)).collect());
    }
    Ok(Replication {
        pvalues: out,
        excluded,
        gls_score: fit.gls_score_max(&ds),
    })
}

/// Runs every replication and tabulates rejection rates.
pub fn run_study(sc: &SimulationScenario) -> Result<StudyOutcome> {
    sc.validate()?;
    let results: Vec<std::result::Result<Replication, String>> = (0..sc.replications)
        .into_par_iter()
        .map(|r| run_replication(sc, r).map_err(|e| e.to_string()))
        .collect();

    let mut failed = Vec::new();
    let mut excluded = 0;
    let mut pvalues = Vec::with_capacity(results.len());
    let mut max_gls_score = 0.0_f64;
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rep) => {
                excluded += rep.excluded;
                max_gls_score = max_gls_score.max(rep.gls_score);
                pvalues.push(Some(rep.pvalues));
            }
            Err(reason) => {
                log::warn!("replication {} excluded: {reason}", r + 1);
                failed.push((r + 1, reason));
                pvalues.push(None);
            }
        }
    }
    let ok: Vec<&ReplicationPvalues> = pvalues.iter().flatten().collect();
    let reps = ok.len();
    let mut rows = Vec::new();
    for &alpha in &sc.alphas {
        for (s, &scheme) in sc.schemes.iter().enumerate() {
            for (q, &process) in sc.processes.iter().enumerate() {
                for statistic in [Statistic::Ks, Statistic::Cvm] {
                    let rejections = ok
                        .iter()
                        .filter(|p| {
                            let (ks, cvm) = p[s][q];
                            let pv = match statistic {
                                Statistic::Ks => ks,
                                Statistic::Cvm => cvm,
                            };
                            pv <= alpha
                        })
                        .count();
                    let rate = if reps == 0 {
                        f64::NAN
                    } else {
                        rejections as f64 / reps as f64
                    };
                    rows.push(RejectionRow {
                        alpha,
                        n: sc.n,
                        n_i: sc.n_i,
                        sigma2_b1: sc.sigma2_b1,
                        beta3: sc.beta3,
                        scheme,
                        process,
                        statistic,
                        rejections,
                        replications: reps,
                        rate,
                        se: (rate * (1.0 - rate) / reps as f64).sqrt(),
                    });
                }
            }
        }
    }
    Ok(StudyOutcome {
        table: RejectionTable { rows },
        failed_replications: failed,
        excluded_null_replicates: excluded,
        pvalues,
        max_gls_score,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn binomial_margins_at_full_scale() {
        assert_eq!(format!("{:.3}", margin_of_error(0.01, 5000)), "0.003");
        assert_eq!(format!("{:.3}", margin_of_error(0.05, 5000)), "0.006");
        assert_eq!(format!("{:.3}", margin_of_error(0.10, 5000)), "0.008");
    }

    #[test]
    fn generator_constants() {
        let sc = SimulationScenario::example_i(50, 10);
        assert_eq!((sc.beta0, sc.beta1, sc.beta2, sc.beta3), (-1.0, 0.25, 0.5, 0.0));
        assert_eq!((sc.sigma2_eps, sc.sigma2_b0, sc.sigma2_b1), (0.5, 0.25, 0.25));
        let ds = simulate_dataset(&sc, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!((ds.n_clusters(), ds.n_obs(), ds.p(), ds.k()), (50, 500, 3, 2));
    }

    #[test]
    fn degenerate_noise_gives_mean_surface() {
        let sc = SimulationScenario {
            sigma2_b0: 0.0,
            sigma2_b1: 0.0,
            sigma2_eps: 1e-20,
            beta3: 0.7,
            fixed: vec![Term::Intercept, Term::X1, Term::X2, Term::X1sq],
            ..SimulationScenario::example_i(4, 6)
        };
        let ds = simulate_dataset(&sc, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        for c in ds.clusters() {
            for r in 0..c.len() {
                let (x1, x2) = (c.x[(r, 1)], c.x[(r, 2)]);
                assert_eq!(c.x[(r, 3)], x1 * x1);
                let mean = -1.0 + 0.25 * x1 + 0.5 * x2 + 0.7 * x1 * x1;
                assert!((c.y[r] - mean).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gamma_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let law = NoiseLaw::centered_gamma_1_2();
        let n = 1_000_000;
        let draws: Vec<f64> = (0..n).map(|_| law.sample(123.0, &mut rng)).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Gamma(1, 2): variance 4, fourth central moment 9·16 = 144
        let se_mean = (4.0 / n as f64).sqrt();
        let se_var = ((144.0 - 16.0) / n as f64).sqrt();
        assert!(mean.abs() < 3.0 * se_mean, "mean {mean}");
        assert!((var - 4.0).abs() < 3.0 * se_var, "variance {var}");
    }

    #[test]
    fn scenario_json_round_trip_and_defaults() {
        let sc = SimulationScenario::from_json(
            r#"{"n": 10, "n_i": 5, "law": {"family": "centered-gamma", "shape": 1.0, "scale": 2.0}}"#,
        )
        .unwrap();
        assert_eq!(sc.fixed, default_fixed());
        assert_eq!(sc.method, Method::Reml);
        assert_eq!(sc.law, NoiseLaw::centered_gamma_1_2());
        let back: SimulationScenario = serde_json::from_str(&serde_json::to_string(&sc).unwrap()).unwrap();
        assert_eq!(back, sc);
        assert!(SimulationScenario::from_json(r#"{"n": 0, "n_i": 5}"#).is_err());
        assert!(SimulationScenario::from_json(r#"{"n": 3, "n_i": 5, "alphas": [1.5]}"#).is_err());
        assert!(SimulationScenario::from_json(r#"{"n": 3, "n_i": 5, "bogus": 1}"#).is_err());
    }

    #[test]
    fn small_study_is_deterministic_across_pools() {
        let sc = SimulationScenario {
            replications: 6,
            m: 19,
            schemes: vec![SchemeKind::RefitFlip, SchemeKind::SimPan],
            seed: 9,
            ..SimulationScenario::example_i(12, 5)
        };
        let run = |threads| {
            let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
            let out = pool.install(|| run_study(&sc)).unwrap();
            let mut buf = Vec::new();
            out.table.write_csv(&mut buf).unwrap();
            buf
        };
        let a = run(1);
        assert_eq!(a, run(3));
        let text = String::from_utf8(a).unwrap();
        // 3 alphas × 2 schemes × 2 processes × 2 statistics, plus header
        assert_eq!(text.lines().count(), 25);
        assert!(text.starts_with("alpha,n,n_i,"));
    }

    #[test]
    fn rows_are_proportions_with_binomial_se() {
        let sc = SimulationScenario {
            replications: 8,
            m: 19,
            schemes: vec![SchemeKind::SimChol],
            ..SimulationScenario::example_iv(10, 1.5)
        };
        let out = run_study(&sc).unwrap();
        for r in &out.table.rows {
            assert!((0.0..=1.0).contains(&r.rate));
            assert!((r.se - (r.rate * (1.0 - r.rate) / r.replications as f64).sqrt()).abs() < 1e-15);
        }
    }
}

#[cfg(test)]
mod timing {
    use super::*;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn time_one_replication() {
        for sc in [
            SimulationScenario::example_i(50, 10),
            SimulationScenario::example_iii(50, 1.5),
            SimulationScenario::example_iv(75, 1.5),
        ] {
            let sc = SimulationScenario { replications: 2, ..sc };
            let t = Instant::now();
            let out = run_study(&sc).unwrap();
            eprintln!(
                "{}: {:?} per replication, excluded {}",
                sc.name,
                t.elapsed() / 2,
                out.excluded_null_replicates
            );
        }
    }
}

#[cfg(test)]
mod refit_profile {
    use super::*;
    use crate::estimation::estimate;
    use crate::null::{draw_pi, WeightLaw};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn refit_effort() {
        for sc in [
            SimulationScenario::example_i(50, 10),
            SimulationScenario::example_iv(75, 1.5),
        ] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let ds = simulate_dataset(&sc, &mut rng).unwrap();
            let fit = fit_lmm(&ds, Method::Reml, &FitOptions::default()).unwrap();
            eprintln!("{} D = {:?} s2 = {}", sc.name, fit.vc.d.as_slice(), fit.vc.sigma2);
            let opts = FitOptions {
                start: Some(fit.vc.clone()),
                ..Default::default()
            };
            let (mut it, mut ev, mut fails, mut nc) = (vec![], vec![], 0, 0);
            let t = Instant::now();
            for _ in 0..100 {
                let y: Vec<_> = fit
                    .v_chol
                    .iter()
                    .zip(fit.marginal_residuals(&ds))
                    .zip(fit.population_fitted(&ds))
                    .map(|((l, e), yp)| {
                        let mut u = DMatrix::from_column_slice(e.len(), 1, e.as_slice());
                        crate::numerics::forward_substitute(l, &mut u);
                        let pi = draw_pi(e.len(), WeightLaw::Rademacher, &mut rng);
                        yp + l * DVector::from_column_slice(u.as_slice()).component_mul(&pi)
                    })
                    .collect();
                match estimate(&ds.with_outcome(y), Method::Reml, &opts) {
                    Ok(e) => {
                        it.push(e.iterations);
                        ev.push(e.evaluations);
                        if !e.converged {
                            nc += 1;
                        }
                    }
                    Err(e) => {
                        eprintln!("  fail: {e}");
                        fails += 1
                    }
                }
            }
            it.sort();
            ev.sort();
            eprintln!(
                "{}: {:?}/refit, iter median {} max {}, evals median {} max {}, fails {fails}, nonconv {nc}",
                sc.name,
                t.elapsed() / 100,
                it[it.len() / 2],
                it.last().unwrap(),
                ev[ev.len() / 2],
                ev.last().unwrap()
            );
        }
    }
}
