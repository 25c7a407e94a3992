//! Cusum residual processes, their KS/CvM functionals and the covariance
//! function of the fixed-part process.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{ClusteredDataset, ColumnSubset};
use crate::error::{Error, Result};
use crate::estimation::FittedLmm;
use crate::rng::stream_rng;
use crate::transform::{apply_transform, BlockOperator, ResidualBundle, ResidualFlavor, TransformKit, Variant};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ProcessKind {
    /// Whole-model process with the full `N × N` transform.
    #[serde(rename = "O")]
    O,
    /// Whole-model process with the per-cluster transform.
    #[serde(rename = "O-block")]
    OBlock,
    #[serde(rename = "F")]
    F,
    #[serde(rename = "F-subset")]
    FSubset,
}

impl ProcessKind {
    pub fn for_variant(variant: Variant) -> Self {
        match variant {
            Variant::Block => ProcessKind::OBlock,
            Variant::Full => ProcessKind::O,
        }
    }
}

impl fmt::Display for ProcessKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProcessKind::O => "O",
            ProcessKind::OBlock => "O-block",
            ProcessKind::F => "F",
            ProcessKind::FSubset => "F-subset",
        })
    }
}

/// Step function `W(t)` recorded at its distinct jump locations.
#[derive(Debug, Clone, PartialEq)]
pub struct CusumProcess {
    pub kind: ProcessKind,
    /// Distinct ordering scores, ascending.
    pub t: Vec<f64>,
    /// `W` at each `t`, all ties at that location included.
    pub w: Vec<f64>,
    /// Number of observations sharing each `t`.
    pub multiplicity: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TestStatistics {
    /// `max_j |W(t_j)|`.
    pub ks: f64,
    /// `Σ_j W(t_j)²` with one slot per observation.
    pub cvm: f64,
}

impl CusumProcess {
    /// `W(at)`, using every observation with score `≤ at`; zero below the grid.
    pub fn eval(&self, at: f64) -> f64 {
        let idx = self.t.partition_point(|&t| t <= at);
        if idx == 0 {
            0.0
        } else {
            self.w[idx - 1]
        }
    }

    pub fn n_obs(&self) -> usize {
        self.multiplicity.iter().sum()
    }
}

pub fn statistics(p: &CusumProcess) -> TestStatistics {
    let mut ks = 0.0_f64;
    let mut cvm = 0.0;
    for (w, &m) in p.w.iter().zip(&p.multiplicity) {
        ks = ks.max(w.abs());
        cvm += m as f64 * w * w;
    }
    TestStatistics { ks, cvm }
}

/// Sorted ordering with ties grouped, reusable across value vectors that
/// share the same scores.
#[derive(Debug, Clone)]
pub struct CusumGrid {
    order: Vec<usize>,
    t: Vec<f64>,
    /// Exclusive end of each tie group within `order`.
    ends: Vec<usize>,
}

impl CusumGrid {
    pub fn new(scores: &[f64]) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite ordering score {bad}")));
        }
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut t = Vec::new();
        let mut ends = Vec::new();
        for (pos, &idx) in order.iter().enumerate() {
            let s = scores[idx];
            if t.last() == Some(&s) {
                *ends.last_mut().unwrap() = pos + 1;
            } else {
                t.push(s);
                ends.push(pos + 1);
            }
        }
        Ok(Self { order, t, ends })
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn locations(&self) -> &[f64] {
        &self.t
    }

    fn check(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.order.len() {
            return Err(Error::LengthMismatch(format!(
                "{} values for {} ordering scores",
                values.len(),
                self.order.len()
            )));
        }
        Ok(())
    }

    pub fn process(&self, values: &[f64], n_clusters: usize, kind: ProcessKind) -> Result<CusumProcess> {
        self.check(values)?;
        let scale = 1.0 / (n_clusters as f64).sqrt();
        let mut w = Vec::with_capacity(self.t.len());
        let mut multiplicity = Vec::with_capacity(self.t.len());
        let mut acc = 0.0;
        let mut start = 0;
        for &end in &self.ends {
            for &idx in &self.order[start..end] {
                acc += values[idx];
            }
            w.push(acc * scale);
            multiplicity.push(end - start);
            start = end;
        }
        Ok(CusumProcess {
            kind,
            t: self.t.clone(),
            w,
            multiplicity,
        })
    }

    /// KS and CvM without materializing the process.
    pub fn statistics(&self, values: &[f64], n_clusters: usize) -> Result<TestStatistics> {
        self.check(values)?;
        let scale = 1.0 / (n_clusters as f64).sqrt();
        let mut acc = 0.0;
        let mut start = 0;
        let mut ks = 0.0_f64;
        let mut cvm = 0.0;
        for &end in &self.ends {
            for &idx in &self.order[start..end] {
                acc += values[idx];
            }
            let w = acc * scale;
            ks = ks.max(w.abs());
            cvm += (end - start) as f64 * w * w;
            start = end;
        }
        Ok(TestStatistics { ks, cvm })
    }
}

/// `W(t) = n^{-1/2} Σ_ij v_ij 1{s_ij ≤ t}` at every distinct score.
pub fn cusum_from(values: &[f64], scores: &[f64], n_clusters: usize, kind: ProcessKind) -> Result<CusumProcess> {
    if values.len() != scores.len() {
        return Err(Error::LengthMismatch(format!(
            "{} values but {} scores",
            values.len(),
            scores.len()
        )));
    }
    if n_clusters == 0 {
        return Err(Error::InvalidInput("cluster count must be positive".into()));
    }
    CusumGrid::new(scores)?.process(values, n_clusters, kind)
}

pub(crate) fn flatten(vectors: &[DVector<f64>]) -> Vec<f64> {
    vectors.iter().flat_map(|v| v.iter().copied()).collect()
}

/// `Σ_{l∈S} X_{ij,l} β̂_l` for every observation.
pub fn subset_scores(ds: &ClusteredDataset, beta: &DVector<f64>, subset: &ColumnSubset) -> Result<Vec<f64>> {
    if subset.indices().iter().any(|&l| l >= ds.p()) {
        return Err(Error::InvalidSubset(format!(
            "column index out of range for p = {}",
            ds.p()
        )));
    }
    Ok(ds
        .clusters()
        .iter()
        .flat_map(|c| (0..c.len()).map(move |r| subset.indices().iter().map(|&l| c.x[(r, l)] * beta[l]).sum()))
        .collect())
}

/// Whole-model process: weighted transformed residuals ordered by `ŷ^I`.
pub fn process_o(
    bundle: &ResidualBundle,
    kit: &TransformKit,
    variant: Variant,
    flavor: ResidualFlavor,
) -> Result<CusumProcess> {
    let ec = apply_transform(kit, variant, flavor, &bundle.marginal)?;
    let weighted: Vec<DVector<f64>> = bundle.weights.iter().zip(&ec).map(|(s, e)| s * e).collect();
    cusum_from(
        &flatten(&weighted),
        &flatten(&bundle.individual_fitted),
        bundle.n_clusters,
        ProcessKind::for_variant(variant),
    )
}

fn weighted_fixed_residuals(bundle: &ResidualBundle, flavor: ResidualFlavor) -> Vec<f64> {
    let base = match flavor {
        ResidualFlavor::Individual => &bundle.individual,
        ResidualFlavor::Cluster => &bundle.marginal,
    };
    let weighted: Vec<DVector<f64>> = bundle.weights.iter().zip(base).map(|(s, e)| s * e).collect();
    flatten(&weighted)
}

/// Fixed-part process: weighted residuals ordered by `ŷ^P`.
pub fn process_f(bundle: &ResidualBundle, flavor: ResidualFlavor) -> Result<CusumProcess> {
    cusum_from(
        &weighted_fixed_residuals(bundle, flavor),
        &flatten(&bundle.population_fitted),
        bundle.n_clusters,
        ProcessKind::F,
    )
}

/// Fixed-part process ordered by the contribution of a column subset.
pub fn process_f_subset(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    bundle: &ResidualBundle,
    subset: &ColumnSubset,
    flavor: ResidualFlavor,
) -> Result<CusumProcess> {
    cusum_from(
        &weighted_fixed_residuals(bundle, flavor),
        &subset_scores(ds, &fit.beta, subset)?,
        bundle.n_clusters,
        ProcessKind::FSubset,
    )
}

/// Covariance function of the fixed-part process at every pair of `points`:
/// `K(t,s) = n⁻¹[Σ χ_i(t)ᵀ S G V G S χ_i(s) − c(t) H⁻¹ c(s)ᵀ]` with
/// `c(t) = Σ χ_i(t)ᵀ S G X_i` and `χ_i(t) = 1{X_iβ̂ ≤ t}`.
pub fn covariance_kn_matrix(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    weights: &[DMatrix<f64>],
    flavor: ResidualFlavor,
    points: &[f64],
) -> DMatrix<f64> {
    let q = points.len();
    let p = ds.p();
    let mut first = DMatrix::<f64>::zeros(q, q);
    let mut c = DMatrix::<f64>::zeros(q, p);
    for (i, cl) in ds.clusters().iter().enumerate() {
        let n = cl.len();
        let sg = match flavor {
            ResidualFlavor::Individual => &weights[i] * &fit.g[i],
            ResidualFlavor::Cluster => weights[i].clone(),
        };
        let inner = &sg * &fit.v[i] * sg.transpose();
        let sgx = &sg * &cl.x;
        let fitted = &cl.x * &fit.beta;
        // χ as a q × n indicator matrix
        let chi = DMatrix::from_fn(q, n, |a, r| if fitted[r] <= points[a] { 1.0 } else { 0.0 });
        first += &chi * inner * chi.transpose();
        c += &chi * sgx;
    }
    let k = (first - &c * &fit.h_inv * c.transpose()) / ds.n_clusters() as f64;
    crate::numerics::symmetrize(&k)
}

pub fn covariance_kn(ds: &ClusteredDataset, fit: &FittedLmm, weights: &[DMatrix<f64>], t: f64, s: f64) -> f64 {
    covariance_kn_matrix(ds, fit, weights, ResidualFlavor::Individual, &[t, s])[(0, 1)]
}

/// Monte-Carlo covariance of the block whole-model process at `points`.
///
/// Outcomes are drawn as `y* = Xβ̂ + ξ` with `ξ_i ~ N(0, V̂_i)`; the
/// variance components stay at their fitted values while `β̂`, the BLUPs and
/// the ordering are recomputed for every draw.
pub fn covariance_o_mc(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    weights: &[DMatrix<f64>],
    points: &[f64],
    reps: usize,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let op = BlockOperator::new(ds, &fit.vc, None)?;
    let q = points.len();
    let mut sum = DVector::<f64>::zeros(q);
    let mut cross = DMatrix::<f64>::zeros(q, q);
    for rep in 0..reps {
        let mut rng = stream_rng(seed, rep as u64);
        let xi: Vec<DVector<f64>> = fit
            .v_chol
            .iter()
            .map(|l| l * DVector::from_fn(l.nrows(), |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let mut score = DVector::<f64>::zeros(ds.p());
        for (c, (vinv, x)) in ds.clusters().iter().zip(fit.v_inv.iter().zip(&xi)) {
            score += c.x.transpose() * (vinv * x);
        }
        let shift = &fit.h_inv * score;
        let mut values = Vec::with_capacity(ds.n_obs());
        let mut scores = Vec::with_capacity(ds.n_obs());
        for (i, c) in ds.clusters().iter().enumerate() {
            let e = &xi[i] - &c.x * &shift;
            let b = op.blup(ds, i, &e);
            let (ec, _) = op.transform(ds, i, &e, ResidualFlavor::Individual);
            values.extend((&weights[i] * ec).iter());
            scores.extend((&c.x * (&fit.beta + &shift) + &c.z * b).iter());
        }
        let proc = cusum_from(&values, &scores, ds.n_clusters(), ProcessKind::OBlock)?;
        let w = DVector::from_iterator(q, points.iter().map(|&t| proc.eval(t)));
        sum += &w;
        cross += &w * w.transpose();
    }
    let r = reps as f64;
    let mean = sum / r;
    Ok((cross / r - &mean * mean.transpose()) * (r / (r - 1.0)))
}

/// One trace line per jump: `variant,replicate_id,t,W`. Replicate 0 is the
/// observed process.
pub fn write_traces<W: Write>(writer: W, traces: &[(usize, &CusumProcess)]) -> Result<()> {
    let labels: Vec<String> = traces.iter().map(|(_, p)| p.kind.to_string()).collect();
    let rows: Vec<(&str, usize, &CusumProcess)> = traces
        .iter()
        .zip(&labels)
        .map(|((id, p), l)| (l.as_str(), *id, *p))
        .collect();
    write_labeled_traces(writer, &rows)
}

/// Same layout as [`write_traces`] with a caller-chosen `variant` label.
pub fn write_labeled_traces<W: Write>(writer: W, traces: &[(&str, usize, &CusumProcess)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["variant", "replicate_id", "t", "W"])?;
    for (label, id, p) in traces {
        let id = id.to_string();
        for (t, w) in p.t.iter().zip(&p.w) {
            out.write_record([*label, id.as_str(), &format!("{t:e}"), &format!("{w:e}")])?;
        }
    }
    out.flush()?;
    Ok(())
}
