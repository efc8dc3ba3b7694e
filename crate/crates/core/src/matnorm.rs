//! Zero-mean matrix normal distribution over `N x Q` error matrices.
//!
//! The covariance of `vec(E)` is `Σ_Q ⊗ Σ_N`. Both factors are parameterized
//! through lower-triangular Cholesky factors of their *precision* matrices,
//! `Λ = L·Lᵀ`, with the diagonal of `L` passed through a softplus so that any
//! raw parameter matrix yields a positive definite precision.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DrError, Result};

/// `ln(1 + e^x)`, evaluated without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    debug_assert!(y > 0.0);
    if y > 30.0 {
        y + (-(-y).exp_m1()).ln()
    } else {
        y.exp_m1().ln()
    }
}

/// Derivative of [`softplus`], the logistic sigmoid.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Raw trainable parameters of one lower-triangular precision factor.
///
/// Strictly-lower entries are used as-is, diagonal entries go through
/// [`softplus`], strictly-upper entries are forced to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangularFactor {
    raw: DMatrix<f64>,
}

impl TriangularFactor {
    pub fn from_raw(mut raw: DMatrix<f64>) -> Result<Self> {
        if raw.nrows() != raw.ncols() || raw.nrows() == 0 {
            return Err(DrError::dims(
                "triangular factor",
                "non-empty square matrix",
                format!("{}x{}", raw.nrows(), raw.ncols()),
            ));
        }
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(DrError::NonFinite("triangular factor"));
        }
        let n = raw.nrows();
        for j in 0..n {
            for i in 0..j {
                raw[(i, j)] = 0.0;
            }
        }
        Ok(Self { raw })
    }

    /// Factor whose effective matrix is the identity.
    pub fn identity(dim: usize) -> Self {
        let mut raw = DMatrix::zeros(dim, dim);
        raw.fill_diagonal(softplus_inv(1.0));
        Self { raw }
    }

    /// Builds the raw parameters that reproduce a given effective factor.
    /// `l` must be lower triangular with a strictly positive diagonal.
    pub fn from_effective(l: &DMatrix<f64>) -> Result<Self> {
        let n = l.nrows();
        if l.ncols() != n {
            return Err(DrError::dims("effective factor", "square", format!("{}x{}", n, l.ncols())));
        }
        let mut raw = l.lower_triangle();
        for i in 0..n {
            let d = l[(i, i)];
            if !(d > 0.0) || !d.is_finite() {
                return Err(DrError::Config(format!(
                    "effective factor diagonal must be positive, got {d} at {i}"
                )));
            }
            raw[(i, i)] = softplus_inv(d);
        }
        Self::from_raw(raw)
    }

    /// Builds the factor whose induced covariance is `sigma` (symmetric
    /// positive definite): `L = chol(Σ⁻¹)`.
    pub fn from_covariance(sigma: &DMatrix<f64>) -> Result<Self> {
        let precision = sigma
            .clone()
            .try_inverse()
            .ok_or_else(|| DrError::Config("covariance matrix is singular".into()))?;
        let sym = (&precision + precision.transpose()) * 0.5;
        let chol = sym
            .cholesky()
            .ok_or_else(|| DrError::Config("covariance matrix is not positive definite".into()))?;
        Self::from_effective(&chol.l())
    }

    pub fn dim(&self) -> usize {
        self.raw.nrows()
    }

    pub fn raw(&self) -> &DMatrix<f64> {
        &self.raw
    }

    /// Replaces the raw parameters in place (strictly-upper part is zeroed).
    pub fn set_raw(&mut self, raw: DMatrix<f64>) -> Result<()> {
        if raw.shape() != self.raw.shape() {
            return Err(DrError::dims(
                "triangular factor",
                format!("{0}x{0}", self.dim()),
                format!("{}x{}", raw.nrows(), raw.ncols()),
            ));
        }
        *self = Self::from_raw(raw)?;
        Ok(())
    }

    /// Effective lower-triangular factor `L`.
    pub fn effective(&self) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.raw[(i, j)],
            std::cmp::Ordering::Equal => softplus(self.raw[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    /// Precision `Λ = L·Lᵀ`.
    pub fn precision(&self) -> DMatrix<f64> {
        let l = self.effective();
        &l * l.transpose()
    }

    /// Covariance `Σ = Λ⁻¹ = L⁻ᵀ·L⁻¹`, via two triangular solves.
    pub fn covariance(&self) -> DMatrix<f64> {
        let l = self.effective();
        let n = self.dim();
        let l_inv = l
            .solve_lower_triangular(&DMatrix::identity(n, n))
            .expect("positive diagonal");
        let sigma = l_inv.transpose() * &l_inv;
        (&sigma + sigma.transpose()) * 0.5
    }

    /// `log|Σ| = -2 Σᵢ log L[i][i]`.
    pub fn log_det_cov(&self) -> f64 {
        -2.0 * self.sum_log_diag()
    }

    fn sum_log_diag(&self) -> f64 {
        (0..self.dim()).map(|i| softplus(self.raw[(i, i)]).ln()).sum()
    }

    /// Folds a gradient with respect to the effective factor back onto the
    /// raw parameters.
    fn chain_to_raw(&self, grad_l: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.dim();
        DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => grad_l[(i, j)],
            std::cmp::Ordering::Equal => grad_l[(i, i)] * sigmoid(self.raw[(i, i)]),
            std::cmp::Ordering::Less => 0.0,
        })
    }
}

/// Analytic gradients of [`MatrixNormalModel::nll`].
#[derive(Debug, Clone)]
pub struct NllGrad {
    pub factor_n: DMatrix<f64>,
    pub factor_q: DMatrix<f64>,
    pub error: DMatrix<f64>,
}

/// `MN(0, Σ_N, Σ_Q)` with `Σ_N = (L_N L_Nᵀ)⁻¹`, `Σ_Q = (L_Q L_Qᵀ)⁻¹`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixNormalModel {
    pub factor_n: TriangularFactor,
    pub factor_q: TriangularFactor,
}

impl MatrixNormalModel {
    pub fn new(factor_n: TriangularFactor, factor_q: TriangularFactor) -> Self {
        Self { factor_n, factor_q }
    }

    pub fn identity(n: usize, q: usize) -> Self {
        Self::new(TriangularFactor::identity(n), TriangularFactor::identity(q))
    }

    pub fn n(&self) -> usize {
        self.factor_n.dim()
    }

    pub fn q(&self) -> usize {
        self.factor_q.dim()
    }

    fn check(&self, e: &DMatrix<f64>) -> Result<()> {
        if e.nrows() != self.n() || e.ncols() != self.q() {
            return Err(DrError::dims(
                "matrix normal",
                format!("{}x{}", self.n(), self.q()),
                format!("{}x{}", e.nrows(), e.ncols()),
            ));
        }
        if e.iter().any(|v| !v.is_finite()) {
            return Err(DrError::NonFinite("matrix normal error matrix"));
        }
        Ok(())
    }

    /// Negative log-likelihood without the `(NQ/2)·log 2π` constant:
    /// `½‖L_Nᵀ E L_Q‖²_F − Q Σ log L_N[n][n] − N Σ log L_Q[q][q]`.
    pub fn nll(&self, e: &DMatrix<f64>) -> Result<f64> {
        self.check(e)?;
        let k = self.factor_n.effective().transpose() * e * self.factor_q.effective();
        let (n, q) = (self.n() as f64, self.q() as f64);
        Ok(0.5 * k.norm_squared() - q * self.factor_n.sum_log_diag() - n * self.factor_q.sum_log_diag())
    }

    /// Full negative log-likelihood, constant included.
    pub fn nll_with_constant(&self, e: &DMatrix<f64>) -> Result<f64> {
        Ok(self.nll(e)? + (self.n() * self.q()) as f64 * HALF_LN_2PI)
    }

    /// Gradients of [`Self::nll`] with respect to both raw factors and `E`.
    pub fn nll_grad(&self, e: &DMatrix<f64>) -> Result<NllGrad> {
        self.check(e)?;
        let l_n = self.factor_n.effective();
        let l_q = self.factor_q.effective();
        let e_lq = e * &l_q;
        let k = l_n.transpose() * &e_lq;
        let ln_t_e = l_n.transpose() * e;

        let mut g_ln = &e_lq * k.transpose();
        let mut g_lq = ln_t_e.transpose() * &k;
        let (nf, qf) = (self.n() as f64, self.q() as f64);
        for i in 0..self.n() {
            g_ln[(i, i)] -= qf / l_n[(i, i)];
        }
        for i in 0..self.q() {
            g_lq[(i, i)] -= nf / l_q[(i, i)];
        }
        Ok(NllGrad {
            factor_n: self.factor_n.chain_to_raw(&g_ln),
            factor_q: self.factor_q.chain_to_raw(&g_lq),
            error: &l_n * &k * l_q.transpose(),
        })
    }

    /// Draws `E = L_N⁻ᵀ·Z·L_Q⁻¹` with standard-normal `Z`.
    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let z = DMatrix::from_fn(self.n(), self.q(), |_, _| rng.sample::<f64, _>(StandardNormal));
        self.color(&z)
    }

    /// Deterministic draw for a given seed.
    pub fn sample(&self, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_with(&mut rng)
    }

    /// Maps white noise `Z` to `L_N⁻ᵀ·Z·L_Q⁻¹`.
    pub fn color(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        let l_n = self.factor_n.effective();
        let l_q = self.factor_q.effective();
        // L_Nᵀ W = Z
        let w = l_n.tr_solve_lower_triangular(z).expect("positive diagonal");
        // E L_Q = W  <=>  L_Qᵀ Eᵀ = Wᵀ
        let e_t = l_q
            .tr_solve_lower_triangular(&w.transpose())
            .expect("positive diagonal");
        e_t.transpose()
    }

    /// Kronecker covariance `Σ_Q ⊗ Σ_N` of `vec(E)` (column-major vec).
    pub fn kron_covariance(&self) -> DMatrix<f64> {
        self.factor_q.covariance().kronecker(&self.factor_n.covariance())
    }
}
