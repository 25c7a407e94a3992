//! Linear mixed model fitting: GLS fixed effects, ML/REML variance
//! components and BLUPs.
//!
//! The optimizer works on the relative covariance `T = D / σ²` through its
//! log-Cholesky factor `Λ` and profiles `σ²` out in closed form. With
//! `M_i = I + Λᵀ Z_iᵀ Z_i Λ` every quantity the likelihood needs reduces to
//! `k × k` and `p × p` algebra on per-cluster cross-products, so an objective
//! evaluation never touches an `n_i × n_i` matrix.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ClusteredDataset;
use crate::error::{Error, Result};
use crate::numerics::{cholesky, log_det_spd, solve_with_cholesky, sym_eigen, symmetrize};
use crate::optim::{minimize, Bounds, MinimizeOptions};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound on a log-diagonal entry of the relative Cholesky factor.
const LOG_DIAG_FLOOR: f64 = -20.0;
const LOG_DIAG_CEIL: f64 = 12.0;

/// A log-diagonal of `chol(D̂)` below this value marks a boundary estimate.
pub const BOUNDARY_LOG_DIAG: f64 = -15.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Method {
    #[serde(rename = "ML", alias = "ml")]
    Ml,
    #[default]
    #[serde(rename = "REML", alias = "reml")]
    Reml,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ml => "ML",
            Method::Reml => "REML",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "ML" => Ok(Method::Ml),
            "REML" => Ok(Method::Reml),
            _ => Err(Error::InvalidInput(format!("unknown method `{s}`"))),
        }
    }
}

/// Random-effect covariance `D` and residual variance `σ²`.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub d: DMatrix<f64>,
    pub sigma2: f64,
}

impl VarianceComponents {
    /// Checks `σ² > 0`, symmetry of `D` and `λ_min(D) ≥ -1e-10·trace(D)`.
    pub fn new(d: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::InvalidInput(format!("sigma2 must be positive, got {sigma2}")));
        }
        if !d.is_square() || d.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("D must be a finite square matrix".into()));
        }
        let k = d.nrows();
        let trace: f64 = (0..k).map(|i| d[(i, i)]).sum();
        let scale = trace.abs().max(f64::MIN_POSITIVE);
        for i in 0..k {
            for j in 0..i {
                if (d[(i, j)] - d[(j, i)]).abs() > 1e-10 * scale.max(1.0) {
                    return Err(Error::InvalidInput("D is not symmetric".into()));
                }
            }
        }
        let d = symmetrize(&d);
        if k > 0 {
            let eig = sym_eigen(&d);
            let min = eig.values[k - 1];
            if min < -1e-10 * scale {
                return Err(Error::InvalidInput(format!(
                    "D is not positive semidefinite (smallest eigenvalue {min:.3e})"
                )));
            }
        }
        Ok(Self { d, sigma2 })
    }

    pub fn k(&self) -> usize {
        self.d.nrows()
    }

    /// `V_i = Z_i D Z_iᵀ + σ² I`.
    pub fn marginal_cov(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let n = z.nrows();
        let mut v = z * &self.d * z.transpose();
        for i in 0..n {
            v[(i, i)] += self.sigma2;
        }
        symmetrize(&v)
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_iter: usize,
    pub param_tol: f64,
    pub grad_tol: f64,
    /// Starting variance components; `None` uses `D₀ = 0.1·σ²₀·I`.
    pub start: Option<VarianceComponents>,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iter: 500,
            param_tol: 1e-8,
            grad_tol: 1e-6,
            start: None,
        }
    }
}

/// A fitted model with every per-cluster matrix the residual transforms need.
#[derive(Debug, Clone)]
pub struct FittedLmm {
    pub beta: DVector<f64>,
    pub vc: VarianceComponents,
    /// `V̂_i = Z_i D̂ Z_iᵀ + σ̂² I`.
    pub v: Vec<DMatrix<f64>>,
    /// Lower Cholesky factors of `V̂_i`.
    pub v_chol: Vec<DMatrix<f64>>,
    pub v_inv: Vec<DMatrix<f64>>,
    /// `Ĝ_i = σ̂² V̂_i⁻¹`.
    pub g: Vec<DMatrix<f64>>,
    /// `Ĥ = Σ X_iᵀ V̂_i⁻¹ X_i`.
    pub h: DMatrix<f64>,
    pub h_inv: DMatrix<f64>,
    pub blups: Vec<DVector<f64>>,
    pub method: Method,
    pub loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    pub boundary: bool,
}

impl FittedLmm {
    /// Assembles GLS, BLUPs and the derived matrices at fixed variance
    /// components. The optimizer metadata is left at its neutral values.
    pub fn from_components(ds: &ClusteredDataset, vc: VarianceComponents, method: Method) -> Result<Self> {
        let p = ds.p();
        let mut v = Vec::with_capacity(ds.n_clusters());
        let mut v_chol = Vec::with_capacity(ds.n_clusters());
        let mut v_inv = Vec::with_capacity(ds.n_clusters());
        let mut h = DMatrix::<f64>::zeros(p, p);
        let mut rhs = DVector::<f64>::zeros(p);
        let mut log_det_v = 0.0;
        for c in ds.clusters() {
            let vi = vc.marginal_cov(&c.z);
            let li = cholesky(&vi)?;
            log_det_v += 2.0 * li.diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let n = c.len();
            let vinv = symmetrize(&solve_with_cholesky(&li, &DMatrix::identity(n, n)));
            let xt_vinv = c.x.transpose() * &vinv;
            h += &xt_vinv * &c.x;
            rhs += &xt_vinv * &c.y;
            v.push(vi);
            v_chol.push(li);
            v_inv.push(vinv);
        }
        let h = symmetrize(&h);
        let lh = cholesky(&h).map_err(|_| Error::SingularH)?;
        let beta = DVector::from_column_slice(
            solve_with_cholesky(&lh, &DMatrix::from_column_slice(p, 1, rhs.as_slice())).as_slice(),
        );
        let h_inv = symmetrize(&solve_with_cholesky(&lh, &DMatrix::identity(p, p)));

        let mut quad = 0.0;
        let mut blups = Vec::with_capacity(ds.n_clusters());
        for (c, vinv) in ds.clusters().iter().zip(&v_inv) {
            let e = &c.y - &c.x * &beta;
            let ve = vinv * &e;
            quad += e.dot(&ve);
            blups.push(&vc.d * (c.z.transpose() * ve));
        }
        let g = v_inv.iter().map(|m| m * vc.sigma2).collect();

        let n = ds.n_obs() as f64;
        let loglik = match method {
            Method::Ml => -0.5 * (log_det_v + quad) - 0.5 * n * LN_2PI,
            Method::Reml => {
                let log_det_h = 2.0 * lh.diagonal().iter().map(|d| d.ln()).sum::<f64>();
                -0.5 * (log_det_v + quad + log_det_h) - 0.5 * (n - p as f64) * LN_2PI
            }
        };

        Ok(Self {
            beta,
            vc,
            v,
            v_chol,
            v_inv,
            g,
            h,
            h_inv,
            blups,
            method,
            loglik,
            converged: true,
            iterations: 0,
            boundary: false,
        })
    }

    /// Marginal residuals `e_i^P = y_i − X_i β̂`.
    pub fn marginal_residuals(&self, ds: &ClusteredDataset) -> Vec<DVector<f64>> {
        ds.clusters().iter().map(|c| &c.y - &c.x * &self.beta).collect()
    }

    /// `X_i β̂` per cluster.
    pub fn population_fitted(&self, ds: &ClusteredDataset) -> Vec<DVector<f64>> {
        ds.clusters().iter().map(|c| &c.x * &self.beta).collect()
    }

    /// `X_i β̂ + Z_i b̂_i` per cluster.
    pub fn cluster_fitted(&self, ds: &ClusteredDataset) -> Vec<DVector<f64>> {
        ds.clusters()
            .iter()
            .zip(&self.blups)
            .map(|(c, b)| &c.x * &self.beta + &c.z * b)
            .collect()
    }

    /// `max |Σ X_iᵀ V̂_i⁻¹ e_i^P|`, zero at a GLS solution.
    pub fn gls_score_max(&self, ds: &ClusteredDataset) -> f64 {
        let mut s = DVector::<f64>::zeros(ds.p());
        for (c, vinv) in ds.clusters().iter().zip(&self.v_inv) {
            s += c.x.transpose() * (vinv * (&c.y - &c.x * &self.beta));
        }
        s.amax()
    }
}

/// `β̂ = H⁻¹ Σ X_iᵀ V_i⁻¹ y_i`.
pub fn gls_beta(ds: &ClusteredDataset, vc: &VarianceComponents) -> Result<DVector<f64>> {
    let p = ds.p();
    let mut h = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DMatrix::<f64>::zeros(p, 1);
    for c in ds.clusters() {
        let li = cholesky(&vc.marginal_cov(&c.z))?;
        let mut xy = DMatrix::<f64>::zeros(c.len(), p + 1);
        xy.columns_mut(0, p).copy_from(&c.x);
        xy.column_mut(p).copy_from(&c.y);
        let vinv_xy = solve_with_cholesky(&li, &xy);
        let xt = c.x.transpose();
        h += &xt * vinv_xy.columns(0, p);
        rhs += &xt * vinv_xy.column(p);
    }
    let lh = cholesky(&symmetrize(&h)).map_err(|_| Error::SingularH)?;
    Ok(DVector::from_column_slice(solve_with_cholesky(&lh, &rhs).as_slice()))
}

/// Log-likelihood at `vc` with `β` profiled out by GLS. REML adds
/// `−½ log det H` and uses `N − p` in the constant.
pub fn profile_loglik(ds: &ClusteredDataset, vc: &VarianceComponents, method: Method) -> Result<f64> {
    let beta = gls_beta(ds, vc)?;
    let p = ds.p();
    let mut log_det_v = 0.0;
    let mut quad = 0.0;
    let mut h = DMatrix::<f64>::zeros(p, p);
    for c in ds.clusters() {
        let vi = vc.marginal_cov(&c.z);
        let li = cholesky(&vi)?;
        log_det_v += 2.0 * li.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let e = &c.y - &c.x * &beta;
        let ve = solve_with_cholesky(&li, &DMatrix::from_column_slice(e.len(), 1, e.as_slice()));
        quad += e.dot(&ve.column(0));
        if method == Method::Reml {
            h += c.x.transpose() * solve_with_cholesky(&li, &c.x);
        }
    }
    let n = ds.n_obs() as f64;
    Ok(match method {
        Method::Ml => -0.5 * (log_det_v + quad) - 0.5 * n * LN_2PI,
        Method::Reml => {
            let log_det_h = log_det_spd(&symmetrize(&h)).map_err(|_| Error::SingularH)?;
            -0.5 * (log_det_v + quad + log_det_h) - 0.5 * (n - p as f64) * LN_2PI
        }
    })
}

/// Best linear unbiased predictors `b̂_i = D̂ Z_iᵀ V̂_i⁻¹ e_i^P`.
pub fn blup(ds: &ClusteredDataset, fit: &FittedLmm) -> Vec<DVector<f64>> {
    ds.clusters()
        .iter()
        .zip(&fit.v_inv)
        .map(|(c, vinv)| &fit.vc.d * (c.z.transpose() * (vinv * (&c.y - &c.x * &fit.beta))))
        .collect()
}

/// Variance components and GLS coefficients at the likelihood optimum,
/// without the per-cluster matrices of [`FittedLmm`].
#[derive(Debug, Clone)]
pub struct VcEstimate {
    pub vc: VarianceComponents,
    pub beta: DVector<f64>,
    pub loglik: f64,
    pub method: Method,
    pub converged: bool,
    pub iterations: usize,
    /// Objective evaluations spent by the optimizer.
    pub evaluations: usize,
    pub boundary: bool,
}

/// Maximizes the ML or REML likelihood over the variance components.
pub fn estimate(ds: &ClusteredDataset, method: Method, opts: &FitOptions) -> Result<VcEstimate> {
    let k = ds.k();
    let mut obj = ProfiledObjective::new(ds, method);
    let n_theta = k * (k + 1) / 2;

    let theta0 = match &opts.start {
        Some(vc) => theta_from_relative(&(&vc.d / vc.sigma2)),
        None => {
            // D₀ = 0.1·σ²₀·I is T₀ = 0.1·I whatever the pooled σ²₀ is
            let mut t = vec![0.0; n_theta];
            for i in 0..k {
                t[diag_index(i)] = 0.5 * 0.1_f64.ln();
            }
            t
        }
    };
    let bounds: Vec<Bounds> = (0..n_theta)
        .map(|idx| {
            if is_diag_index(idx) {
                Bounds {
                    lower: LOG_DIAG_FLOOR,
                    upper: LOG_DIAG_CEIL,
                }
            } else {
                Bounds::FREE
            }
        })
        .collect();

    if !obj.eval(&theta0).is_finite() {
        return Err(Error::SingularH);
    }
    let mopts = MinimizeOptions {
        max_iter: opts.max_iter,
        param_tol: opts.param_tol,
        grad_tol: opts.grad_tol,
        simplex_iter: if opts.start.is_some() { 0 } else { 20 * n_theta.max(1) },
        ..MinimizeOptions::default()
    };
    let report = minimize(|t| obj.eval(t), &theta0, &bounds, &mopts);
    if !report.f.is_finite() {
        return Err(Error::SingularH);
    }
    if !report.converged && report.iterations >= opts.max_iter {
        return Err(Error::NoConvergence {
            iterations: report.iterations,
        });
    }

    let loglik = -obj.eval(&report.x);
    let sigma2 = obj.last_rss / obj.residual_dof();
    let beta = obj.beta_from_last();
    let lambda = lambda_matrix(&report.x, k);
    let d = symmetrize(&(&lambda * lambda.transpose() * sigma2));
    let half_log_sigma = 0.5 * sigma2.ln();
    let boundary = (0..k).any(|i| report.x[diag_index(i)] + half_log_sigma < BOUNDARY_LOG_DIAG);
    Ok(VcEstimate {
        vc: VarianceComponents { d, sigma2 },
        beta,
        loglik,
        method,
        converged: report.converged,
        iterations: report.iterations,
        evaluations: report.evaluations,
        boundary,
    })
}

/// Maximizes the ML or REML likelihood and assembles the fitted model.
pub fn fit_lmm(ds: &ClusteredDataset, method: Method, opts: &FitOptions) -> Result<FittedLmm> {
    let est = estimate(ds, method, opts)?;
    let mut fit = FittedLmm::from_components(ds, est.vc, method)?;
    fit.converged = est.converged;
    fit.iterations = est.iterations;
    fit.boundary = est.boundary;
    Ok(fit)
}

/// Position of `Λ[i][i]` in the packed row-major lower triangle.
fn diag_index(i: usize) -> usize {
    i * (i + 1) / 2 + i
}

fn is_diag_index(idx: usize) -> bool {
    let mut row = 0;
    while (row + 1) * (row + 2) / 2 <= idx {
        row += 1;
    }
    idx == diag_index(row)
}

fn lambda_matrix(theta: &[f64], k: usize) -> DMatrix<f64> {
    let mut l = DMatrix::<f64>::zeros(k, k);
    let mut idx = 0;
    for i in 0..k {
        for j in 0..=i {
            l[(i, j)] = if i == j { theta[idx].exp() } else { theta[idx] };
            idx += 1;
        }
    }
    l
}

fn theta_from_relative(t: &DMatrix<f64>) -> Vec<f64> {
    let k = t.nrows();
    let trace: f64 = (0..k).map(|i| t[(i, i)]).sum();
    let jitter = (1e-10 * trace).max(1e-14);
    let mut shifted = symmetrize(t);
    for i in 0..k {
        shifted[(i, i)] += jitter;
    }
    let l = cholesky(&shifted).unwrap_or_else(|_| DMatrix::identity(k, k) * jitter.sqrt());
    let mut theta = Vec::with_capacity(k * (k + 1) / 2);
    for i in 0..k {
        for j in 0..=i {
            theta.push(if i == j {
                l[(i, i)].ln().clamp(LOG_DIAG_FLOOR, LOG_DIAG_CEIL)
            } else {
                l[(i, j)]
            });
        }
    }
    theta
}

/// Negative profiled log-likelihood on flat row-major buffers.
struct ProfiledObjective {
    k: usize,
    /// `p + 1`: the design augmented with the response.
    q: usize,
    p: usize,
    n_obs: usize,
    method: Method,
    /// `Σ [X y]ᵀ [X y]`, `q × q`.
    base: Vec<f64>,
    /// Per-cluster `Z_iᵀ Z_i`, `k × k` each.
    ztz: Vec<f64>,
    /// Per-cluster `Z_iᵀ [X_i y_i]`, `k × q` each.
    zta: Vec<f64>,
    n_clusters: usize,
    lam: Vec<f64>,
    t1: Vec<f64>,
    m: Vec<f64>,
    w: Vec<f64>,
    aug: Vec<f64>,
    last_rss: f64,
}

impl ProfiledObjective {
    fn new(ds: &ClusteredDataset, method: Method) -> Self {
        let k = ds.k();
        let p = ds.p();
        let q = p + 1;
        let mut base = vec![0.0; q * q];
        let mut ztz = Vec::with_capacity(ds.n_clusters() * k * k);
        let mut zta = Vec::with_capacity(ds.n_clusters() * k * q);
        for c in ds.clusters() {
            let n = c.len();
            let a = |r: usize, j: usize| if j < p { c.x[(r, j)] } else { c.y[r] };
            for i in 0..q {
                for j in 0..q {
                    base[i * q + j] += (0..n).map(|r| a(r, i) * a(r, j)).sum::<f64>();
                }
            }
            for i in 0..k {
                for j in 0..k {
                    ztz.push((0..n).map(|r| c.z[(r, i)] * c.z[(r, j)]).sum());
                }
            }
            for i in 0..k {
                for j in 0..q {
                    zta.push((0..n).map(|r| c.z[(r, i)] * a(r, j)).sum());
                }
            }
        }
        Self {
            k,
            q,
            p,
            n_obs: ds.n_obs(),
            method,
            base,
            ztz,
            zta,
            n_clusters: ds.n_clusters(),
            lam: vec![0.0; k * k],
            t1: vec![0.0; k * k],
            m: vec![0.0; k * k],
            w: vec![0.0; k * q],
            aug: vec![0.0; q * q],
            last_rss: f64::NAN,
        }
    }

    fn residual_dof(&self) -> f64 {
        match self.method {
            Method::Ml => self.n_obs as f64,
            Method::Reml => (self.n_obs - self.p) as f64,
        }
    }

    /// GLS coefficients from the factor left by the last [`Self::eval`]:
    /// the bottom row of `chol([A c; cᵀ r])` holds `(L_A⁻¹ c)ᵀ`.
    fn beta_from_last(&self) -> DVector<f64> {
        let (p, q) = (self.p, self.q);
        let mut beta: Vec<f64> = (0..p).map(|j| self.aug[p * q + j]).collect();
        for i in (0..p).rev() {
            let mut s = beta[i];
            for r in (i + 1)..p {
                s -= self.aug[r * q + i] * beta[r];
            }
            beta[i] = s / self.aug[i * q + i];
        }
        DVector::from_vec(beta)
    }

    #[cfg(test)]
    fn sigma2_at(&mut self, theta: &[f64]) -> f64 {
        self.eval(theta);
        self.last_rss / self.residual_dof()
    }

    /// Subtracts every cluster's `WᵀW` from `aug`; returns `Σ log det M_i`.
    fn clusters_dynamic(&mut self) -> Option<f64> {
        let (k, q) = (self.k, self.q);
        let mut log_det_w = 0.0;
        for c in 0..self.n_clusters {
            let ztz = &self.ztz[c * k * k..(c + 1) * k * k];
            let zta = &self.zta[c * k * q..(c + 1) * k * q];
            // t1 = ZᵀZ Λ
            for a in 0..k {
                for b in 0..k {
                    let mut s = 0.0;
                    for r in b..k {
                        s += ztz[a * k + r] * self.lam[r * k + b];
                    }
                    self.t1[a * k + b] = s;
                }
            }
            // M = I + Λᵀ t1
            for a in 0..k {
                for b in 0..=a {
                    let mut s = if a == b { 1.0 } else { 0.0 };
                    for r in a..k {
                        s += self.lam[r * k + a] * self.t1[r * k + b];
                    }
                    self.m[a * k + b] = s;
                }
            }
            if !chol_lower_in_place(&mut self.m, k) {
                return None;
            }
            let mut diag_prod = 1.0;
            for a in 0..k {
                diag_prod *= self.m[a * k + a];
            }
            log_det_w += 2.0 * diag_prod.ln();
            // w = L_M⁻¹ Λᵀ Zᵀ[X y]
            for a in 0..k {
                for j in 0..q {
                    let mut s = 0.0;
                    for r in a..k {
                        s += self.lam[r * k + a] * zta[r * q + j];
                    }
                    self.w[a * q + j] = s;
                }
            }
            for j in 0..q {
                for a in 0..k {
                    let mut s = self.w[a * q + j];
                    for r in 0..a {
                        s -= self.m[a * k + r] * self.w[r * q + j];
                    }
                    self.w[a * q + j] = s / self.m[a * k + a];
                }
            }
            for i in 0..q {
                for j in 0..=i {
                    let mut s = 0.0;
                    for a in 0..k {
                        s += self.w[a * q + i] * self.w[a * q + j];
                    }
                    self.aug[i * q + j] -= s;
                }
            }
        }

        Some(log_det_w)
    }

    /// Same as [`Self::clusters_dynamic`] with the random-effect dimension
    /// fixed at compile time.
    fn clusters_fixed<const K: usize>(&mut self) -> Option<f64> {
        let q = self.q;
        let mut lam = [[0.0; K]; K];
        for (a, row) in lam.iter_mut().enumerate() {
            row.copy_from_slice(&self.lam[a * K..(a + 1) * K]);
        }
        let mut log_det_w = 0.0;
        let w = &mut self.w;
        for (ztz, zta) in self.ztz.chunks_exact(K * K).zip(self.zta.chunks_exact(K * q)) {
            let mut t1 = [[0.0; K]; K];
            for a in 0..K {
                for b in 0..K {
                    let mut s = 0.0;
                    for r in b..K {
                        s += ztz[a * K + r] * lam[r][b];
                    }
                    t1[a][b] = s;
                }
            }
            let mut m = [[0.0; K]; K];
            for a in 0..K {
                for b in 0..=a {
                    let mut s = if a == b { 1.0 } else { 0.0 };
                    for r in a..K {
                        s += lam[r][a] * t1[r][b];
                    }
                    m[a][b] = s;
                }
            }
            let mut diag_prod = 1.0;
            for j in 0..K {
                let mut d = m[j][j];
                for r in 0..j {
                    d -= m[j][r] * m[j][r];
                }
                if !(d > 0.0) {
                    return None;
                }
                let d = d.sqrt();
                m[j][j] = d;
                diag_prod *= d;
                for i in (j + 1)..K {
                    let mut s = m[i][j];
                    for r in 0..j {
                        s -= m[i][r] * m[j][r];
                    }
                    m[i][j] = s / d;
                }
            }
            log_det_w += 2.0 * diag_prod.ln();
            for j in 0..q {
                let mut col = [0.0; K];
                for a in 0..K {
                    let mut s = 0.0;
                    for r in a..K {
                        s += lam[r][a] * zta[r * q + j];
                    }
                    for r in 0..a {
                        s -= m[a][r] * col[r];
                    }
                    col[a] = s / m[a][a];
                }
                w[j * K..(j + 1) * K].copy_from_slice(&col);
            }
            for i in 0..q {
                let wi = &w[i * K..(i + 1) * K];
                let row = &mut self.aug[i * q..i * q + i + 1];
                for (j, slot) in row.iter_mut().enumerate() {
                    let wj = &w[j * K..(j + 1) * K];
                    let mut s = 0.0;
                    for a in 0..K {
                        s += wi[a] * wj[a];
                    }
                    *slot -= s;
                }
            }
        }
        Some(log_det_w)
    }

    fn eval(&mut self, theta: &[f64]) -> f64 {
        let (k, q) = (self.k, self.q);
        self.lam.iter_mut().for_each(|v| *v = 0.0);
        let mut idx = 0;
        for i in 0..k {
            for j in 0..=i {
                self.lam[i * k + j] = if i == j { theta[idx].exp() } else { theta[idx] };
                idx += 1;
            }
        }
        self.aug.copy_from_slice(&self.base);
        let log_det_w = match k {
            1 => self.clusters_fixed::<1>(),
            2 => self.clusters_fixed::<2>(),
            3 => self.clusters_fixed::<3>(),
            _ => self.clusters_dynamic(),
        };
        let Some(log_det_w) = log_det_w else {
            return f64::INFINITY;
        };

        // chol of [A c; cᵀ r]: the last pivot squared is the GLS residual sum of squares
        if !chol_lower_in_place(&mut self.aug, q) {
            return f64::INFINITY;
        }
        let p = self.p;
        let rss = self.aug[p * q + p].powi(2);
        self.last_rss = rss;
        let dof = self.residual_dof();
        let sigma2 = rss / dof;
        if !(sigma2 > 0.0) {
            return f64::INFINITY;
        }
        let mut value = dof * sigma2.ln() + log_det_w + dof * (1.0 + LN_2PI);
        if self.method == Method::Reml {
            for a in 0..p {
                value += 2.0 * self.aug[a * q + a].ln();
            }
        }
        0.5 * value
    }
}

/// In-place lower Cholesky of a row-major `n × n` matrix, reading only the
/// lower triangle. Returns `false` on a non-positive pivot.
fn chol_lower_in_place(a: &mut [f64], n: usize) -> bool {
    for j in 0..n {
        let mut d = a[j * n + j];
        for r in 0..j {
            d -= a[j * n + r] * a[j * n + r];
        }
        if !(d > 0.0) || !d.is_finite() {
            return false;
        }
        let d = d.sqrt();
        a[j * n + j] = d;
        for i in (j + 1)..n {
            let mut s = a[i * n + j];
            for r in 0..j {
                s -= a[i * n + r] * a[j * n + r];
            }
            a[i * n + j] = s / d;
        }
    }
    true
}

/// Returns `(σ̂², σ̂_b²)` from the balanced one-way REML closed form.
#[cfg(test)]
pub(crate) fn anova_reml(groups: &[Vec<f64>]) -> (f64, f64) {
    let a = groups.len() as f64;
    let m = groups[0].len() as f64;
    let means: Vec<f64> = groups.iter().map(|g| g.iter().sum::<f64>() / m).collect();
    let grand = means.iter().sum::<f64>() / a;
    let ssb: f64 = means.iter().map(|mu| m * (mu - grand).powi(2)).sum();
    let ssw: f64 = groups
        .iter()
        .zip(&means)
        .map(|(g, mu)| g.iter().map(|v| (v - mu).powi(2)).sum::<f64>())
        .sum();
    let msb = ssb / (a - 1.0);
    let mse = ssw / (a * (m - 1.0));
    if msb > mse {
        (mse, (msb - mse) / m)
    } else {
        ((ssb + ssw) / (a * m - 1.0), 0.0)
    }
}
