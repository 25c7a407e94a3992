//! Null ensembles for the cusum processes and Monte-Carlo p-values.
//!
//! Three schemes are available. `RefitFlip` perturbs the outcome with
//! `ŷ^P + L̂ΠL̂⁻¹e^P` and refits the model. `SimPan` and `SimChol` perturb the
//! residuals directly and project out the GLS direction, reusing the original
//! fit. Replicate `m` draws from its own stream keyed by `(seed, m)`, so
//! results do not depend on scheduling.

use std::fmt;
use std::str::FromStr;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cusum::{CusumGrid, CusumProcess, ProcessKind, TestStatistics};
use crate::data::{ClusteredDataset, ColumnSubset};
use crate::error::{Error, Result};
use crate::estimation::{estimate, FitOptions, FittedLmm, VarianceComponents};
use crate::numerics::{forward_substitute, symmetrize};
use crate::rng::stream_rng;
use crate::transform::{
    apply_weights, weight_matrices, BlockOperator, ResidualFlavor, TransformKit, TransformOptions, Variant, WeightKind,
    DEFAULT_FULL_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeKind {
    RefitFlip,
    SimPan,
    SimChol,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightLaw {
    Rademacher,
    #[serde(rename = "normal")]
    StdNormal,
    Mammen,
}

impl SchemeKind {
    pub fn default_law(self) -> WeightLaw {
        match self {
            SchemeKind::RefitFlip | SchemeKind::SimChol => WeightLaw::Rademacher,
            SchemeKind::SimPan => WeightLaw::StdNormal,
        }
    }
}

impl fmt::Display for SchemeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SchemeKind::RefitFlip => "refit-flip",
            SchemeKind::SimPan => "sim-pan",
            SchemeKind::SimChol => "sim-chol",
        })
    }
}

impl FromStr for SchemeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "refit-flip" => Ok(SchemeKind::RefitFlip),
            "sim-pan" => Ok(SchemeKind::SimPan),
            "sim-chol" => Ok(SchemeKind::SimChol),
            _ => Err(Error::InvalidInput(format!("unknown scheme `{s}`"))),
        }
    }
}

impl fmt::Display for WeightLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightLaw::Rademacher => "rademacher",
            WeightLaw::StdNormal => "normal",
            WeightLaw::Mammen => "mammen",
        })
    }
}

impl FromStr for WeightLaw {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rademacher" => Ok(WeightLaw::Rademacher),
            "normal" => Ok(WeightLaw::StdNormal),
            "mammen" => Ok(WeightLaw::Mammen),
            _ => Err(Error::InvalidInput(format!("unknown weight law `{s}`"))),
        }
    }
}

impl WeightLaw {
    /// One draw with mean 0 and variance 1.
    pub fn sample<R: Rng + ?Sized>(self, rng: &mut R) -> f64 {
        match self {
            WeightLaw::Rademacher => {
                if rng.random_bool(0.5) {
                    1.0
                } else {
                    -1.0
                }
            }
            WeightLaw::StdNormal => StandardNormal.sample(rng),
            WeightLaw::Mammen => {
                let s5 = 5f64.sqrt();
                if rng.random_bool((s5 + 1.0) / (2.0 * s5)) {
                    -(s5 - 1.0) / 2.0
                } else {
                    (s5 + 1.0) / 2.0
                }
            }
        }
    }
}

/// Diagonal of a random `Π_i` with iid entries from `law`.
pub fn draw_pi<R: Rng + ?Sized>(n: usize, law: WeightLaw, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| law.sample(rng))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NullScheme {
    pub kind: SchemeKind,
    pub law: WeightLaw,
    /// Number of null replicates.
    pub m: usize,
    pub seed: u64,
}

impl NullScheme {
    pub fn new(kind: SchemeKind, m: usize, seed: u64) -> Self {
        Self {
            kind,
            law: kind.default_law(),
            m,
            seed,
        }
    }

    pub fn with_law(mut self, law: WeightLaw) -> Self {
        self.law = law;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessSpec {
    O,
    F,
    FSubset(ColumnSubset),
}

impl ProcessSpec {
    pub fn kind(&self, variant: Variant) -> ProcessKind {
        match self {
            ProcessSpec::O => ProcessKind::for_variant(variant),
            ProcessSpec::F => ProcessKind::F,
            ProcessSpec::FSubset(_) => ProcessKind::FSubset,
        }
    }
}

impl fmt::Display for ProcessSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProcessSpec::O => f.write_str("O"),
            ProcessSpec::F => f.write_str("F"),
            ProcessSpec::FSubset(s) => {
                let cols: Vec<String> = s.indices().iter().map(|i| i.to_string()).collect();
                write!(f, "Fsub:{}", cols.join(","))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GofOptions {
    pub variant: Variant,
    pub flavor: ResidualFlavor,
    pub weights: WeightKind,
    /// Options for null refits.
    pub fit: FitOptions,
    /// Start null refits from the original variance components.
    pub warm_start: bool,
    /// Rebuild `Â_i`, `B̂_i` from every refit instead of reusing the original ones.
    pub reestimate_transform: bool,
    /// Order each refit replicate by its own predictions instead of the
    /// original fit's.
    pub refit_own_order: bool,
    pub keep_processes: bool,
    pub full_cap: usize,
    pub pinv_tol: Option<f64>,
}

impl Default for GofOptions {
    fn default() -> Self {
        Self {
            variant: Variant::Block,
            flavor: ResidualFlavor::Individual,
            weights: WeightKind::InvSqrtV,
            fit: FitOptions::default(),
            warm_start: true,
            reestimate_transform: true,
            refit_own_order: false,
            keep_processes: false,
            full_cap: DEFAULT_FULL_CAP,
            pinv_tol: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GofResult {
    pub spec: ProcessSpec,
    pub scheme: NullScheme,
    pub observed: CusumProcess,
    pub observed_stats: TestStatistics,
    /// Statistics of the successful replicates, in replicate order.
    pub null_stats: Vec<TestStatistics>,
    /// Null processes (empty unless requested), aligned with `replicate_ids`.
    pub null_processes: Vec<CusumProcess>,
    /// Replicate index of every entry of `null_stats`, starting at 1.
    pub replicate_ids: Vec<usize>,
    /// Replicates excluded after a failed refit, starting at 1.
    pub failed_replicates: Vec<usize>,
    pub p_ks: f64,
    pub p_cvm: f64,
}

impl GofResult {
    pub fn effective_m(&self) -> usize {
        self.null_stats.len()
    }
}

/// `(1 + #{T^m ≥ T}) / (M + 1)` for both statistics.
pub fn p_value(observed: &TestStatistics, nulls: &[TestStatistics]) -> (f64, f64) {
    let denom = (nulls.len() + 1) as f64;
    let ks = nulls.iter().filter(|t| t.ks >= observed.ks).count();
    let cvm = nulls.iter().filter(|t| t.cvm >= observed.cvm).count();
    ((1 + ks) as f64 / denom, (1 + cvm) as f64 / denom)
}

/// Values and ordering scores of one process; `scores` stays empty when the
/// original grid is used.
struct Components {
    values: Vec<f64>,
    scores: Vec<f64>,
}

/// What one replicate produces for each requested process.
enum Output {
    Stats(Vec<TestStatistics>),
    Processes(Vec<CusumProcess>),
}

/// Shared, read-only state for the observed process and every replicate.
pub struct NullEngine<'a> {
    ds: &'a ClusteredDataset,
    fit: &'a FittedLmm,
    specs: Vec<ProcessSpec>,
    opts: GofOptions,
    weights: Vec<DMatrix<f64>>,
    op: BlockOperator,
    full_kit: Option<TransformKit>,
    marginal: Vec<DVector<f64>>,
    population_fitted: Vec<DVector<f64>>,
    /// `L̂_i⁻¹ e_i^P`.
    whitened: Vec<DVector<f64>>,
    /// `X_iᵀ V̂_i⁻¹`.
    xt_vinv: Vec<DMatrix<f64>>,
    /// Grids of the original fit, one per spec.
    grids: Vec<CusumGrid>,
    sim: Option<SimParts>,
}

/// Precomputed pieces of the no-refit schemes.
struct SimParts {
    /// `Ŝ_i Ĵ_i` per cluster (block) or `ŜĴ` (full).
    sj: Transformer,
    /// `Ŝ_i Ĝ_i`, or `Ŝ_i` for cluster residuals.
    sg: Vec<DMatrix<f64>>,
    observed: Vec<CusumProcess>,
}

enum Transformer {
    Block(Vec<DMatrix<f64>>),
    Full(DMatrix<f64>),
}

fn stack(vectors: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        vectors.iter().map(|v| v.len()).sum(),
        vectors.iter().flat_map(|v| v.iter().copied()),
    )
}

fn flatten(vectors: &[DVector<f64>]) -> Vec<f64> {
    vectors.iter().flat_map(|v| v.iter().copied()).collect()
}

impl<'a> NullEngine<'a> {
    pub fn new(ds: &'a ClusteredDataset, fit: &'a FittedLmm, specs: &[ProcessSpec], opts: &GofOptions) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidInput("no process requested".into()));
        }
        for spec in specs {
            if let ProcessSpec::FSubset(s) = spec {
                if s.indices().iter().any(|&l| l >= ds.p()) {
                    return Err(Error::InvalidSubset(format!(
                        "column index out of range for p = {}",
                        ds.p()
                    )));
                }
            }
        }
        let weights = weight_matrices(fit, opts.weights)?;
        let op = BlockOperator::new(ds, &fit.vc, opts.pinv_tol)?;
        let full_kit = if opts.variant == Variant::Full {
            Some(TransformKit::build(
                ds,
                fit,
                &TransformOptions {
                    variants: vec![Variant::Full],
                    full_cap: opts.full_cap,
                    pinv_tol: opts.pinv_tol,
                },
            )?)
        } else {
            None
        };
        let marginal = fit.marginal_residuals(ds);
        let population_fitted = fit.population_fitted(ds);
        let whitened = fit
            .v_chol
            .iter()
            .zip(&marginal)
            .map(|(l, e)| {
                let mut u = DMatrix::from_column_slice(e.len(), 1, e.as_slice());
                forward_substitute(l, &mut u);
                DVector::from_column_slice(u.as_slice())
            })
            .collect();
        let xt_vinv = ds
            .clusters()
            .iter()
            .zip(&fit.v_inv)
            .map(|(c, vinv)| c.x.transpose() * vinv)
            .collect();
        let grids = specs
            .iter()
            .map(|spec| {
                let scores = match spec {
                    ProcessSpec::O => {
                        let yi: Vec<DVector<f64>> = ds
                            .clusters()
                            .iter()
                            .zip(&fit.blups)
                            .zip(&population_fitted)
                            .map(|((c, b), yp)| yp + &c.z * b)
                            .collect();
                        flatten(&yi)
                    }
                    ProcessSpec::F => flatten(&population_fitted),
                    ProcessSpec::FSubset(s) => crate::cusum::subset_scores(ds, &fit.beta, s)?,
                };
                CusumGrid::new(&scores)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ds,
            fit,
            specs: specs.to_vec(),
            opts: opts.clone(),
            weights,
            op,
            full_kit,
            marginal,
            population_fitted,
            whitened,
            xt_vinv,
            grids,
            sim: None,
        })
    }

    pub fn specs(&self) -> &[ProcessSpec] {
        &self.specs
    }

    /// Values and scores of every requested process for outcome `ds_y`
    /// with coefficients `beta` and variance components `vc`.
    fn components(
        &self,
        ds_y: &ClusteredDataset,
        beta: &DVector<f64>,
        vc: &VarianceComponents,
        refit: bool,
    ) -> Result<Vec<Components>> {
        let ds = ds_y;
        let flavor = self.opts.flavor;
        let fitted_p: Vec<DVector<f64>> = ds.clusters().iter().map(|c| &c.x * beta).collect();
        let marginal: Vec<DVector<f64>> = ds.clusters().iter().zip(&fitted_p).map(|(c, f)| &c.y - f).collect();

        let own_op;
        let op = if refit {
            own_op = BlockOperator::new(ds, vc, self.opts.pinv_tol)?;
            &own_op
        } else {
            &self.op
        };
        let j_op = if self.opts.reestimate_transform { op } else { &self.op };

        let mut individual = Vec::with_capacity(ds.n_clusters());
        let mut individual_fitted = Vec::with_capacity(ds.n_clusters());
        let mut transformed = Vec::with_capacity(ds.n_clusters());
        let needs_o = self.specs.iter().any(|s| matches!(s, ProcessSpec::O));
        // scores only matter when a refit is ordered by its own predictions
        let own_scores = refit && self.opts.refit_own_order;
        for (i, c) in ds.clusters().iter().enumerate() {
            let e = &marginal[i];
            let ei = op.scaled_vinv(i, e);
            if needs_o {
                if own_scores {
                    let b = op.blup_from_scaled(ds, i, &ei);
                    individual_fitted.push(&fitted_p[i] + &c.z * b);
                }
                if self.opts.variant == Variant::Block {
                    let je = if std::ptr::eq(j_op, op) {
                        op.transform_from_scaled(ds, i, e, &ei, flavor)
                    } else {
                        j_op.transform(ds, i, e, flavor).0
                    };
                    transformed.push(je);
                }
            }
            individual.push(ei);
        }
        if needs_o && self.opts.variant == Variant::Full {
            transformed = self.full_transform(ds, vc, &marginal, refit)?;
        }

        let fixed_values = || {
            let base = match flavor {
                ResidualFlavor::Individual => &individual,
                ResidualFlavor::Cluster => &marginal,
            };
            flatten(&apply_weights(&self.weights, base))
        };
        self.specs
            .iter()
            .map(|spec| {
                Ok(match spec {
                    ProcessSpec::O => Components {
                        values: flatten(&apply_weights(&self.weights, &transformed)),
                        scores: flatten(&individual_fitted),
                    },
                    ProcessSpec::F => Components {
                        values: fixed_values(),
                        scores: if own_scores { flatten(&fitted_p) } else { Vec::new() },
                    },
                    ProcessSpec::FSubset(subset) => Components {
                        values: fixed_values(),
                        scores: if own_scores {
                            crate::cusum::subset_scores(ds, beta, subset)?
                        } else {
                            Vec::new()
                        },
                    },
                })
            })
            .collect()
    }

    fn full_transform(
        &self,
        ds: &ClusteredDataset,
        vc: &VarianceComponents,
        marginal: &[DVector<f64>],
        refit: bool,
    ) -> Result<Vec<DVector<f64>>> {
        let own;
        let kit = if refit && self.opts.reestimate_transform {
            let fit = FittedLmm::from_components(ds, vc.clone(), self.fit.method)?;
            own = TransformKit::build(
                ds,
                &fit,
                &TransformOptions {
                    variants: vec![Variant::Full],
                    full_cap: self.opts.full_cap,
                    pinv_tol: self.opts.pinv_tol,
                },
            )?;
            &own
        } else {
            self.full_kit.as_ref().ok_or(Error::VariantMissing("full"))?
        };
        crate::transform::apply_transform(kit, Variant::Full, self.opts.flavor, marginal)
    }

    /// Cusums of `comps`, on their own scores or on the original grids.
    fn finish(&self, comps: Vec<Components>, keep: bool, own_order: bool) -> Result<Output> {
        let n = self.ds.n_clusters();
        let mut stats = Vec::with_capacity(comps.len());
        let mut procs = Vec::with_capacity(comps.len());
        for ((c, spec), original) in comps.into_iter().zip(&self.specs).zip(&self.grids) {
            let own;
            let grid = if own_order {
                own = CusumGrid::new(&c.scores)?;
                &own
            } else {
                original
            };
            if keep {
                procs.push(grid.process(&c.values, n, spec.kind(self.opts.variant))?);
            } else {
                stats.push(grid.statistics(&c.values, n)?);
            }
        }
        Ok(if keep {
            Output::Processes(procs)
        } else {
            Output::Stats(stats)
        })
    }

    /// Observed processes, one per requested spec.
    pub fn observed(&self) -> Result<Vec<CusumProcess>> {
        let comps = self.components(self.ds, &self.fit.beta, &self.fit.vc, false)?;
        match self.finish(comps, true, false)? {
            Output::Processes(p) => Ok(p),
            Output::Stats(_) => unreachable!(),
        }
    }

    /// Outcome `ŷ^P + L̂ Π L̂⁻¹ e^P` for the given diagonals of `Π_i`.
    pub fn flipped_outcome(&self, pis: &[DVector<f64>]) -> Vec<DVector<f64>> {
        self.fit
            .v_chol
            .iter()
            .zip(&self.whitened)
            .zip(pis)
            .zip(&self.population_fitted)
            .map(|(((l, u), pi), yp)| yp + l * u.component_mul(pi))
            .collect()
    }

    fn refit_output(&self, pis: &[DVector<f64>], keep: bool) -> Result<Output> {
        let ds_m = self.ds.with_outcome(self.flipped_outcome(pis));
        let mut fit_opts = self.opts.fit.clone();
        if self.opts.warm_start {
            fit_opts.start = Some(self.fit.vc.clone());
        }
        let est = estimate(&ds_m, self.fit.method, &fit_opts)?;
        if !est.converged {
            return Err(Error::NoConvergence {
                iterations: est.iterations,
            });
        }
        let comps = self.components(&ds_m, &est.beta, &est.vc, true)?;
        self.finish(comps, keep, self.opts.refit_own_order)
    }

    /// Processes of one refit replicate with explicit `Π_i` diagonals.
    pub fn refit_replicate(&self, pis: &[DVector<f64>]) -> Result<Vec<CusumProcess>> {
        match self.refit_output(pis, true)? {
            Output::Processes(p) => Ok(p),
            Output::Stats(_) => unreachable!(),
        }
    }

    fn ensure_sim(&mut self) -> Result<()> {
        if self.sim.is_some() {
            return Ok(());
        }
        let flavor = self.opts.flavor;
        let sj = match self.opts.variant {
            Variant::Block => Transformer::Block(
                (0..self.ds.n_clusters())
                    .map(|i| &self.weights[i] * self.op.j_matrix(self.ds, i, flavor))
                    .collect(),
            ),
            Variant::Full => {
                let kit = self.full_kit.as_ref().ok_or(Error::VariantMissing("full"))?;
                let n = self.ds.n_obs();
                let mut s = DMatrix::zeros(n, n);
                let mut at = 0;
                for w in &self.weights {
                    s.view_mut((at, at), (w.nrows(), w.nrows())).copy_from(w);
                    at += w.nrows();
                }
                Transformer::Full(s * kit.full_j(flavor)?)
            }
        };
        let sg = self
            .weights
            .iter()
            .zip(&self.fit.g)
            .map(|(s, g)| match flavor {
                ResidualFlavor::Individual => s * g,
                ResidualFlavor::Cluster => s.clone(),
            })
            .collect();
        let observed = self.observed()?;
        self.sim = Some(SimParts { sj, sg, observed });
        Ok(())
    }

    /// Perturbed residuals of the no-refit schemes after removing the GLS
    /// direction. `draws[i]` holds one value (SimPan) or `n_i` values (SimChol).
    pub fn simulated_residuals(&self, kind: SchemeKind, draws: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
        let raw: Vec<DVector<f64>> = match kind {
            SchemeKind::SimPan => self
                .marginal
                .iter()
                .zip(draws)
                .map(|(e, d)| {
                    if d.len() != 1 {
                        return Err(Error::LengthMismatch("one draw per cluster expected".into()));
                    }
                    Ok(e * d[0])
                })
                .collect::<Result<_>>()?,
            SchemeKind::SimChol => self
                .fit
                .v_chol
                .iter()
                .zip(&self.whitened)
                .zip(draws)
                .map(|((l, u), d)| {
                    if d.len() != u.len() {
                        return Err(Error::LengthMismatch("one draw per observation expected".into()));
                    }
                    Ok(l * u.component_mul(d))
                })
                .collect::<Result<_>>()?,
            SchemeKind::RefitFlip => {
                return Err(Error::InvalidInput("refit scheme has no simulated residuals".into()));
            }
        };
        let mut score = DVector::<f64>::zeros(self.ds.p());
        for (w, r) in self.xt_vinv.iter().zip(&raw) {
            score += w * r;
        }
        let shift = &self.fit.h_inv * score;
        Ok(raw
            .into_iter()
            .zip(self.ds.clusters())
            .map(|(r, c)| r - &c.x * &shift)
            .collect())
    }

    fn sim_output(&self, kind: SchemeKind, draws: &[DVector<f64>], keep: bool) -> Result<Output> {
        let sim = self.sim.as_ref().expect("simulation parts prepared");
        let e = self.simulated_residuals(kind, draws)?;
        let needs_o = self.specs.iter().any(|s| matches!(s, ProcessSpec::O));
        let o_values = if needs_o {
            match &sim.sj {
                Transformer::Block(sj) => flatten(&sj.iter().zip(&e).map(|(m, v)| m * v).collect::<Vec<_>>()),
                Transformer::Full(sj) => (sj * stack(&e)).as_slice().to_vec(),
            }
        } else {
            Vec::new()
        };
        let f_values = flatten(&sim.sg.iter().zip(&e).map(|(m, v)| m * v).collect::<Vec<_>>());
        let n = self.ds.n_clusters();
        let mut stats = Vec::with_capacity(self.specs.len());
        let mut procs = Vec::with_capacity(self.specs.len());
        for (spec, grid) in self.specs.iter().zip(&self.grids) {
            let values = match spec {
                ProcessSpec::O => &o_values,
                _ => &f_values,
            };
            if keep {
                procs.push(grid.process(values, n, spec.kind(self.opts.variant))?);
            } else {
                stats.push(grid.statistics(values, n)?);
            }
        }
        Ok(if keep {
            Output::Processes(procs)
        } else {
            Output::Stats(stats)
        })
    }

    /// Processes of one simulation replicate with explicit draws.
    pub fn sim_replicate(&mut self, kind: SchemeKind, draws: &[DVector<f64>]) -> Result<Vec<CusumProcess>> {
        self.ensure_sim()?;
        match self.sim_output(kind, draws, true)? {
            Output::Processes(p) => Ok(p),
            Output::Stats(_) => unreachable!(),
        }
    }

    fn draw<R: Rng>(&self, scheme: &NullScheme, rng: &mut R) -> Vec<DVector<f64>> {
        self.ds
            .clusters()
            .iter()
            .map(|c| match scheme.kind {
                SchemeKind::SimPan => draw_pi(1, scheme.law, rng),
                _ => draw_pi(c.len(), scheme.law, rng),
            })
            .collect()
    }

    /// Runs the whole ensemble and assembles one result per spec.
    pub fn run(&mut self, scheme: &NullScheme) -> Result<Vec<GofResult>> {
        if scheme.m == 0 {
            return Err(Error::InvalidInput("at least one null replicate is required".into()));
        }
        let keep = self.opts.keep_processes;
        let observed = match scheme.kind {
            SchemeKind::RefitFlip => self.observed()?,
            _ => {
                self.ensure_sim()?;
                self.sim.as_ref().unwrap().observed.clone()
            }
        };
        let this = &*self;
        let outputs: Vec<std::result::Result<Output, String>> = (0..scheme.m)
            .into_par_iter()
            .map(|m| {
                let mut rng = stream_rng(scheme.seed, m as u64);
                match scheme.kind {
                    SchemeKind::RefitFlip => {
                        // one redraw after a failed refit, then give up on the replicate
                        let first = this.draw(scheme, &mut rng);
                        match this.refit_output(&first, keep) {
                            Ok(out) => Ok(out),
                            Err(_) => {
                                let second = this.draw(scheme, &mut rng);
                                this.refit_output(&second, keep).map_err(|e| e.to_string())
                            }
                        }
                    }
                    kind => {
                        let draws = this.draw(scheme, &mut rng);
                        this.sim_output(kind, &draws, keep).map_err(|e| e.to_string())
                    }
                }
            })
            .collect();

        let mut results: Vec<GofResult> = self
            .specs
            .iter()
            .zip(observed)
            .map(|(spec, obs)| {
                let stats = crate::cusum::statistics(&obs);
                GofResult {
                    spec: spec.clone(),
                    scheme: *scheme,
                    observed: obs,
                    observed_stats: stats,
                    null_stats: Vec::with_capacity(scheme.m),
                    null_processes: Vec::new(),
                    replicate_ids: Vec::with_capacity(scheme.m),
                    failed_replicates: Vec::new(),
                    p_ks: 1.0,
                    p_cvm: 1.0,
                }
            })
            .collect();
        let mut failures = Vec::new();
        for (m, out) in outputs.into_iter().enumerate() {
            let id = m + 1;
            match out {
                Ok(Output::Stats(stats)) => {
                    for (r, s) in results.iter_mut().zip(stats) {
                        r.null_stats.push(s);
                        r.replicate_ids.push(id);
                    }
                }
                Ok(Output::Processes(procs)) => {
                    for (r, p) in results.iter_mut().zip(procs) {
                        r.null_stats.push(crate::cusum::statistics(&p));
                        r.null_processes.push(p);
                        r.replicate_ids.push(id);
                    }
                }
                Err(reason) => failures.push((id, reason)),
            }
        }
        if !failures.is_empty() && failures.len() * 100 > scheme.m {
            warn!(
                "{} of {} null refits failed and were excluded (first: replicate {}: {})",
                failures.len(),
                scheme.m,
                failures[0].0,
                failures[0].1
            );
        }
        if failures.len() == scheme.m {
            let (replicate, reason) = failures.swap_remove(0);
            return Err(Error::NullRefitFailure { replicate, reason });
        }
        for r in &mut results {
            r.failed_replicates = failures.iter().map(|(id, _)| *id).collect();
            let (ks, cvm) = p_value(&r.observed_stats, &r.null_stats);
            r.p_ks = ks;
            r.p_cvm = cvm;
        }
        Ok(results)
    }
}

/// Goodness-of-fit test for several processes sharing one null ensemble.
pub fn run_gof_multi(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    specs: &[ProcessSpec],
    scheme: &NullScheme,
    opts: &GofOptions,
) -> Result<Vec<GofResult>> {
    NullEngine::new(ds, fit, specs, opts)?.run(scheme)
}

pub fn run_gof(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    spec: &ProcessSpec,
    scheme: &NullScheme,
    opts: &GofOptions,
) -> Result<GofResult> {
    Ok(run_gof_multi(ds, fit, std::slice::from_ref(spec), scheme, opts)?.remove(0))
}

fn ensemble(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    spec: &ProcessSpec,
    scheme: &NullScheme,
    opts: &GofOptions,
    expected: &[SchemeKind],
) -> Result<Vec<CusumProcess>> {
    if !expected.contains(&scheme.kind) {
        return Err(Error::InvalidInput(format!("scheme {} not valid here", scheme.kind)));
    }
    let opts = GofOptions {
        keep_processes: true,
        ..opts.clone()
    };
    Ok(run_gof(ds, fit, spec, scheme, &opts)?.null_processes)
}

/// Null processes from refits on sign-flipped outcomes.
pub fn refit_null(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    scheme: &NullScheme,
    spec: &ProcessSpec,
    opts: &GofOptions,
) -> Result<Vec<CusumProcess>> {
    ensemble(ds, fit, spec, scheme, opts, &[SchemeKind::RefitFlip])
}

/// Null processes from one scalar draw per cluster, without refitting.
pub fn sim_null_pan(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    scheme: &NullScheme,
    spec: &ProcessSpec,
    opts: &GofOptions,
) -> Result<Vec<CusumProcess>> {
    ensemble(ds, fit, spec, scheme, opts, &[SchemeKind::SimPan])
}

/// Null processes from Cholesky-rotated flips, without refitting.
pub fn sim_null_chol(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    scheme: &NullScheme,
    spec: &ProcessSpec,
    opts: &GofOptions,
) -> Result<Vec<CusumProcess>> {
    ensemble(ds, fit, spec, scheme, opts, &[SchemeKind::SimChol])
}

/// Advice from the iterative model-checking workflow, based on CvM p-values.
///
/// A significant fixed-part process (F or an F-subset) points at the fixed
/// effects first; a significant O with a non-significant F points at the
/// random effects.
pub fn workflow_hint(results: &[GofResult], alpha: f64) -> String {
    let significant = |r: &&GofResult| r.p_cvm <= alpha;
    let of = |pred: fn(&ProcessSpec) -> bool| results.iter().filter(move |r| pred(&r.spec));
    let o: Vec<&GofResult> = of(|s| matches!(s, ProcessSpec::O)).collect();
    let f: Vec<&GofResult> = of(|s| matches!(s, ProcessSpec::F)).collect();
    let fs: Vec<&GofResult> = of(|s| matches!(s, ProcessSpec::FSubset(_))).collect();
    let o_sig = o.iter().any(|r| significant(r));
    let f_sig = f.iter().any(|r| significant(r));
    let fs_sig: Vec<String> = fs
        .iter()
        .filter(|r| significant(r))
        .map(|r| r.spec.to_string())
        .collect();

    if f_sig || !fs_sig.is_empty() {
        let mut msg = String::from(
            "fixed-effects part looks mis-specified: revise the fixed effects until p_F is no longer significant, then re-check O",
        );
        if !fs_sig.is_empty() {
            msg.push_str(&format!("; significant subset processes: {}", fs_sig.join(", ")));
        } else if fs.is_empty() {
            msg.push_str("; F-subset processes can locate the responsible covariates");
        }
        return msg;
    }
    if o_sig {
        return if f.is_empty() {
            "p_O significant: the fixed and/or random effects may be mis-specified; run the F process to separate them"
                .into()
        } else {
            "p_O significant, p_F not: implies mis-specification of the random effects part".into()
        };
    }
    if o.is_empty() {
        "no evidence against the fixed-effects part; run the O process to check the whole model".into()
    } else {
        "no evidence of lack-of-fit".into()
    }
}

/// Dense symmetric helper re-exported for tests of the ensemble covariance.
pub fn empirical_covariance(samples: &[DVector<f64>]) -> DMatrix<f64> {
    let q = samples.first().map_or(0, |s| s.len());
    let r = samples.len() as f64;
    let mean = samples.iter().fold(DVector::zeros(q), |acc, s| acc + s) / r;
    let mut cov = DMatrix::zeros(q, q);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    symmetrize(&(cov / (r - 1.0)))
}
