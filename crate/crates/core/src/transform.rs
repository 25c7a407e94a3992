//! Residual flavors, weight matrices and the `A`/`B`/`J` transform that
//! decorrelates residuals from individual predicted values.
//!
//! Two routes compute the block transform. [`TransformKit`] assembles the
//! `n_i × n_i` matrices literally and pseudo-inverts `B̂_i`. [`BlockOperator`]
//! applies the same `Ĵ_i` to a vector through `k × k` algebra: with
//! `C_i = Z_i D Z_iᵀ` and `S_i = Z_iᵀ V_i⁻¹ Z_i`, full column rank of `Z_i`
//! gives `C_i B̃_i⁺ C_i = Z_i D (D S_i D)⁺ D Z_iᵀ`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::estimation::{FittedLmm, VarianceComponents};
use crate::numerics::{cholesky, inv_sqrt, pseudo_inverse, solve_with_cholesky, sym_eigen, symmetrize};

/// Default cap on `N` for dense `N × N` assembly.
pub const DEFAULT_FULL_CAP: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Block,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResidualFlavor {
    #[default]
    Individual,
    Cluster,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WeightKind {
    /// `Ŝ_i = V̂_i^{-1/2}`.
    #[default]
    InvSqrtV,
    Identity,
}

macro_rules! text_enum {
    ($ty:ty, $($variant:path => $text:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $text),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($text => Ok($variant),)+
                    _ => Err(Error::InvalidInput(format!(
                        "unknown {} `{s}`",
                        stringify!($ty)
                    ))),
                }
            }
        }
    };
}

text_enum!(Variant, Variant::Block => "block", Variant::Full => "full");
text_enum!(ResidualFlavor, ResidualFlavor::Individual => "individual", ResidualFlavor::Cluster => "cluster");
text_enum!(WeightKind, WeightKind::InvSqrtV => "inv-sqrt-v", WeightKind::Identity => "identity");

/// Per-cluster residuals, predictions and weights of one fit.
#[derive(Debug, Clone)]
pub struct ResidualBundle {
    /// `e_i^P = y_i − X_i β̂`.
    pub marginal: Vec<DVector<f64>>,
    /// `e_i^I = y_i − X_i β̂ − Z_i b̂_i`.
    pub individual: Vec<DVector<f64>>,
    /// `ŷ_i^P = X_i β̂`.
    pub population_fitted: Vec<DVector<f64>>,
    /// `ŷ_i^I = X_i β̂ + Z_i b̂_i`.
    pub individual_fitted: Vec<DVector<f64>>,
    pub weights: Vec<DMatrix<f64>>,
    pub g: Vec<DMatrix<f64>>,
    pub n_clusters: usize,
}

/// Residuals of `fit` with the requested weight matrices.
pub fn residuals(ds: &ClusteredDataset, fit: &FittedLmm, weights: WeightKind) -> Result<ResidualBundle> {
    let marginal = fit.marginal_residuals(ds);
    let population_fitted = fit.population_fitted(ds);
    let mut individual = Vec::with_capacity(ds.n_clusters());
    let mut individual_fitted = Vec::with_capacity(ds.n_clusters());
    for ((c, b), yp) in ds.clusters().iter().zip(&fit.blups).zip(&population_fitted) {
        let zb = &c.z * b;
        individual.push(&c.y - yp - &zb);
        individual_fitted.push(yp + zb);
    }
    Ok(ResidualBundle {
        marginal,
        individual,
        population_fitted,
        individual_fitted,
        weights: weight_matrices(fit, weights)?,
        g: fit.g.clone(),
        n_clusters: ds.n_clusters(),
    })
}

/// `Ŝ_i` per cluster: `V̂_i^{-1/2}` or the identity.
pub fn weight_matrices(fit: &FittedLmm, kind: WeightKind) -> Result<Vec<DMatrix<f64>>> {
    match kind {
        WeightKind::InvSqrtV => fit.v.iter().map(inv_sqrt).collect(),
        WeightKind::Identity => Ok(fit.v.iter().map(|v| DMatrix::identity(v.nrows(), v.nrows())).collect()),
    }
}

/// Applies block-diagonal weights to per-cluster vectors.
pub fn apply_weights(weights: &[DMatrix<f64>], vectors: &[DVector<f64>]) -> Vec<DVector<f64>> {
    weights.iter().zip(vectors).map(|(s, v)| s * v).collect()
}

fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, at), (b.nrows(), b.nrows())).copy_from(b);
        at += b.nrows();
    }
    out
}

fn stack(vectors: &[DVector<f64>]) -> DVector<f64> {
    DVector::from_iterator(
        vectors.iter().map(|v| v.len()).sum(),
        vectors.iter().flat_map(|v| v.iter().copied()),
    )
}

fn split_like(v: &DVector<f64>, sizes: impl Iterator<Item = usize>) -> Vec<DVector<f64>> {
    let mut at = 0;
    sizes
        .map(|n| {
            let part = v.rows(at, n).into_owned();
            at += n;
            part
        })
        .collect()
}

/// `(Â, B̂)` as dense `N × N` matrices:
/// `Â = σ̂²V̂⁻¹[V̂ − XĤ⁻¹Xᵀ](I − σ̂²V̂⁻¹)`, `B̂ = (I − σ̂²V̂⁻¹)[V̂ − XĤ⁻¹Xᵀ](I − σ̂²V̂⁻¹)`.
pub fn build_ab_full(ds: &ClusteredDataset, fit: &FittedLmm, cap: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = ds.n_obs();
    if n > cap {
        return Err(Error::DimensionGuard { n, cap });
    }
    let g = block_diag(&fit.g);
    let v = block_diag(&fit.v);
    let x = ds.stacked_x();
    let middle = v - &x * &fit.h_inv * x.transpose();
    let complement = DMatrix::identity(n, n) - &g;
    let a = &g * &middle * &complement;
    let b = symmetrize(&(&complement * &middle * &complement));
    Ok((a, b))
}

/// Limit-form blocks `Ã_i = σ²V_i⁻¹Z_iDZ_iᵀ` and `B̃_i = Z_iDZ_iᵀV_i⁻¹Z_iDZ_iᵀ`.
pub fn build_ab_block(ds: &ClusteredDataset, fit: &FittedLmm) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    ds.clusters()
        .iter()
        .zip(fit.g.iter().zip(&fit.v_inv))
        .map(|(c, (g, vinv))| {
            let zdz = &c.z * &fit.vc.d * c.z.transpose();
            let a = g * &zdz;
            let b = symmetrize(&(&zdz * vinv * &zdz));
            (a, b)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BlockKit {
    pub a: Vec<DMatrix<f64>>,
    pub b: Vec<DMatrix<f64>>,
    pub b_pinv: Vec<DMatrix<f64>>,
    /// `Ĵ_i = Ĝ_i − Â_iB̂_i⁺Z_iD̂Z_iᵀV̂_i⁻¹`.
    pub j: Vec<DMatrix<f64>>,
    /// `I − (Â_i + B̂_i)B̂_i⁺Z_iD̂Z_iᵀV̂_i⁻¹`.
    pub j_cluster: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct FullKit {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_pinv: DMatrix<f64>,
    /// `Ĵ = σ̂²V̂⁻¹ − ÂB̂⁺Z(I⊗D̂)ZᵀV̂⁻¹`.
    pub j: DMatrix<f64>,
    pub j_cluster: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct TransformOptions {
    pub variants: Vec<Variant>,
    pub full_cap: usize,
    /// Relative pseudo-inverse tolerance; `None` uses the numerics default.
    pub pinv_tol: Option<f64>,
}

impl Default for TransformOptions {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Block],
            full_cap: DEFAULT_FULL_CAP,
            pinv_tol: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformKit {
    pub block: Option<BlockKit>,
    pub full: Option<FullKit>,
    /// Lower Cholesky factors `L̂_i` of `V̂_i`.
    pub chol: Vec<DMatrix<f64>>,
}

impl TransformKit {
    pub fn build(ds: &ClusteredDataset, fit: &FittedLmm, opts: &TransformOptions) -> Result<Self> {
        let block = if opts.variants.contains(&Variant::Block) {
            let mut kit = BlockKit {
                a: Vec::new(),
                b: Vec::new(),
                b_pinv: Vec::new(),
                j: Vec::new(),
                j_cluster: Vec::new(),
            };
            for ((a, b), (g, c)) in build_ab_block(ds, fit).into_iter().zip(fit.g.iter().zip(ds.clusters())) {
                let n = c.len();
                let b_pinv = pseudo_inverse(&b, opts.pinv_tol);
                let complement = DMatrix::identity(n, n) - g;
                let j = g - &a * &b_pinv * &complement;
                let j_cluster = DMatrix::identity(n, n) - (&a + &b) * &b_pinv * &complement;
                kit.a.push(a);
                kit.b.push(b);
                kit.b_pinv.push(b_pinv);
                kit.j.push(j);
                kit.j_cluster.push(j_cluster);
            }
            Some(kit)
        } else {
            None
        };
        let full = if opts.variants.contains(&Variant::Full) {
            let (a, b) = build_ab_full(ds, fit, opts.full_cap)?;
            let n = a.nrows();
            let b_pinv = pseudo_inverse(&b, opts.pinv_tol);
            let g = block_diag(&fit.g);
            let complement = DMatrix::identity(n, n) - &g;
            let ab = &a * &b_pinv;
            let j = &g - &ab * &complement;
            let j_cluster = DMatrix::identity(n, n) - (&ab + &b * &b_pinv) * &complement;
            Some(FullKit {
                a,
                b,
                b_pinv,
                j,
                j_cluster,
            })
        } else {
            None
        };
        Ok(Self {
            block,
            full,
            chol: fit.v_chol.clone(),
        })
    }

    /// Per-cluster transform matrices for the block variant.
    pub fn block_j(&self, flavor: ResidualFlavor) -> Result<&[DMatrix<f64>]> {
        let kit = self.block.as_ref().ok_or(Error::VariantMissing("block"))?;
        Ok(match flavor {
            ResidualFlavor::Individual => &kit.j,
            ResidualFlavor::Cluster => &kit.j_cluster,
        })
    }

    pub fn full_j(&self, flavor: ResidualFlavor) -> Result<&DMatrix<f64>> {
        let kit = self.full.as_ref().ok_or(Error::VariantMissing("full"))?;
        Ok(match flavor {
            ResidualFlavor::Individual => &kit.j,
            ResidualFlavor::Cluster => &kit.j_cluster,
        })
    }
}

/// Unweighted transformed residuals `Ĵ e^P`, split per cluster.
pub fn transform_residuals(
    bundle: &ResidualBundle,
    kit: &TransformKit,
    variant: Variant,
    flavor: ResidualFlavor,
) -> Result<Vec<DVector<f64>>> {
    apply_transform(kit, variant, flavor, &bundle.marginal)
}

/// Applies `Ĵ` (block or full) to arbitrary per-cluster vectors.
pub fn apply_transform(
    kit: &TransformKit,
    variant: Variant,
    flavor: ResidualFlavor,
    e: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    match variant {
        Variant::Block => Ok(kit.block_j(flavor)?.iter().zip(e).map(|(j, v)| j * v).collect()),
        Variant::Full => {
            let j = kit.full_j(flavor)?;
            let out = j * stack(e);
            Ok(split_like(&out, e.iter().map(|v| v.len())))
        }
    }
}

/// `e^I − ÂB̂⁺Zb̂` (individual) or `e^P − (Â + B̂)B̂⁺Zb̂` (cluster), computed
/// by subtraction rather than through `Ĵ`.
pub fn transform_by_subtraction(
    ds: &ClusteredDataset,
    fit: &FittedLmm,
    bundle: &ResidualBundle,
    kit: &TransformKit,
    variant: Variant,
    flavor: ResidualFlavor,
) -> Result<Vec<DVector<f64>>> {
    let zb: Vec<DVector<f64>> = ds.clusters().iter().zip(&fit.blups).map(|(c, b)| &c.z * b).collect();
    let base = match flavor {
        ResidualFlavor::Individual => &bundle.individual,
        ResidualFlavor::Cluster => &bundle.marginal,
    };
    match variant {
        Variant::Block => {
            let kit = kit.block.as_ref().ok_or(Error::VariantMissing("block"))?;
            Ok((0..ds.n_clusters())
                .map(|i| {
                    let left = match flavor {
                        ResidualFlavor::Individual => kit.a[i].clone(),
                        ResidualFlavor::Cluster => &kit.a[i] + &kit.b[i],
                    };
                    &base[i] - left * &kit.b_pinv[i] * &zb[i]
                })
                .collect())
        }
        Variant::Full => {
            let kit = kit.full.as_ref().ok_or(Error::VariantMissing("full"))?;
            let left = match flavor {
                ResidualFlavor::Individual => kit.a.clone(),
                ResidualFlavor::Cluster => &kit.a + &kit.b,
            };
            let out = stack(base) - left * &kit.b_pinv * stack(&zb);
            Ok(split_like(&out, base.iter().map(|v| v.len())))
        }
    }
}

/// Matrix-free block algebra for one set of variance components, using
/// `V_i = σ²(I + Z_iΛΛᵀZ_iᵀ)` with `D = σ²ΛΛᵀ`.
#[derive(Debug, Clone)]
pub struct BlockOperator {
    sigma2: f64,
    d: DMatrix<f64>,
    /// `Z_i Λ`.
    zl: Vec<DMatrix<f64>>,
    /// Cholesky factor of `I + ΛᵀZ_iᵀZ_iΛ`.
    m_chol: Vec<DMatrix<f64>>,
    /// `D (D S_i D)⁺ D` with `S_i = Z_iᵀV_i⁻¹Z_i`.
    core: Vec<DMatrix<f64>>,
}

impl BlockOperator {
    pub fn new(ds: &ClusteredDataset, vc: &VarianceComponents, pinv_tol: Option<f64>) -> Result<Self> {
        let k = vc.k();
        let rel = &vc.d / vc.sigma2;
        let lambda = if k == 0 {
            DMatrix::zeros(0, 0)
        } else {
            sym_eigen(&rel).map_spectrum(|l| l.max(0.0).sqrt())
        };
        let mut zl = Vec::with_capacity(ds.n_clusters());
        let mut m_chol = Vec::with_capacity(ds.n_clusters());
        let mut core = Vec::with_capacity(ds.n_clusters());
        for c in ds.clusters() {
            let zli = &c.z * &lambda;
            let mut m = zli.transpose() * &zli;
            for a in 0..k {
                m[(a, a)] += 1.0;
            }
            let lm = cholesky(&m)?;
            // S_i = σ⁻²(ZᵀZ − ZᵀZΛ M⁻¹ ΛᵀZᵀZ)
            let ztz = c.z.transpose() * &c.z;
            let ztzl = &ztz * &lambda;
            let s = (&ztz - &ztzl * solve_with_cholesky(&lm, &ztzl.transpose())) / vc.sigma2;
            let dsd = symmetrize(&(&vc.d * s * &vc.d));
            core.push(symmetrize(&(&vc.d * pseudo_inverse(&dsd, pinv_tol) * &vc.d)));
            zl.push(zli);
            m_chol.push(lm);
        }
        Ok(Self {
            sigma2: vc.sigma2,
            d: vc.d.clone(),
            zl,
            m_chol,
            core,
        })
    }

    /// `σ² V_i⁻¹ e = e − ZΛ M⁻¹ ΛᵀZᵀ e`, the individual residual of `e`.
    pub fn scaled_vinv(&self, i: usize, e: &DVector<f64>) -> DVector<f64> {
        let zl = &self.zl[i];
        let t = zl.tr_mul(e);
        let t = solve_with_cholesky(&self.m_chol[i], &DMatrix::from_column_slice(t.len(), 1, t.as_slice()));
        e - zl * t.column(0)
    }

    /// `b̂_i = D Z_iᵀ V_i⁻¹ e`.
    pub fn blup(&self, ds: &ClusteredDataset, i: usize, e: &DVector<f64>) -> DVector<f64> {
        self.blup_from_scaled(ds, i, &self.scaled_vinv(i, e))
    }

    /// `b̂_i` from an already computed `σ²V_i⁻¹e`.
    pub fn blup_from_scaled(&self, ds: &ClusteredDataset, i: usize, ei: &DVector<f64>) -> DVector<f64> {
        &self.d * ds.cluster(i).z.tr_mul(ei) / self.sigma2
    }

    /// `Ĵ_i e` in the requested flavor. Returns `(Ĵ_i e, σ²V_i⁻¹e)`.
    pub fn transform(
        &self,
        ds: &ClusteredDataset,
        i: usize,
        e: &DVector<f64>,
        flavor: ResidualFlavor,
    ) -> (DVector<f64>, DVector<f64>) {
        let ei = self.scaled_vinv(i, e);
        let out = self.transform_from_scaled(ds, i, e, &ei, flavor);
        (out, ei)
    }

    /// `Ĵ_i e` given `ei = σ²V_i⁻¹e`.
    pub fn transform_from_scaled(
        &self,
        ds: &ClusteredDataset,
        i: usize,
        e: &DVector<f64>,
        ei: &DVector<f64>,
        flavor: ResidualFlavor,
    ) -> DVector<f64> {
        let z = &ds.cluster(i).z;
        // Z core Zᵀ V⁻¹ e
        let h = z * (&self.core[i] * z.tr_mul(ei)) / self.sigma2;
        match flavor {
            ResidualFlavor::Individual => ei - self.scaled_vinv(i, &h),
            ResidualFlavor::Cluster => e - h,
        }
    }

    /// Dense `Ĵ_i` obtained by applying the operator to unit vectors.
    pub fn j_matrix(&self, ds: &ClusteredDataset, i: usize, flavor: ResidualFlavor) -> DMatrix<f64> {
        let n = ds.cluster(i).len();
        let mut j = DMatrix::zeros(n, n);
        for col in 0..n {
            let mut unit = DVector::zeros(n);
            unit[col] = 1.0;
            j.set_column(col, &self.transform(ds, i, &unit, flavor).0);
        }
        j
    }
}
