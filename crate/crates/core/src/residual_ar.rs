//! Bilinear seasonal autoregression on matrix residuals,
//! `R_t = A·R_{t−Δ}·B + E_t`.

use nalgebra::DMatrix;

use crate::error::{DrError, Result};

/// Spatial coefficient `A` (N×N), horizon coefficient `B` (Q×Q) and the
/// seasonal lag Δ in time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct ArCoefficients {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub seasonal_lag: usize,
}

impl ArCoefficients {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, seasonal_lag: usize) -> Result<Self> {
        if !a.is_square() || !b.is_square() {
            return Err(DrError::dims(
                "ar coefficients",
                "square A and B",
                format!("A {:?}, B {:?}", a.shape(), b.shape()),
            ));
        }
        if seasonal_lag < b.nrows() {
            return Err(DrError::Config(format!(
                "seasonal lag {seasonal_lag} is shorter than the horizon {}",
                b.nrows()
            )));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(DrError::NonFinite("ar coefficients"));
        }
        Ok(Self { a, b, seasonal_lag })
    }

    pub fn zeros(n: usize, q: usize, seasonal_lag: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(n, n), DMatrix::zeros(q, q), seasonal_lag)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn q(&self) -> usize {
        self.b.nrows()
    }

    fn check(&self, what: &'static str, m: &DMatrix<f64>) -> Result<()> {
        if m.shape() != (self.n(), self.q()) {
            return Err(DrError::dims(
                what,
                format!("{}x{}", self.n(), self.q()),
                format!("{}x{}", m.nrows(), m.ncols()),
            ));
        }
        Ok(())
    }

    /// `A·M·B`.
    pub fn apply(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        &self.a * m * &self.b
    }

    /// `E = R_t − A·R_{t−Δ}·B`.
    pub fn corrected_error(&self, p: &ResidualPair) -> Result<DMatrix<f64>> {
        self.check("current residual", &p.r_current)?;
        self.check("lagged residual", &p.r_lagged)?;
        Ok(&p.r_current - self.apply(&p.r_lagged))
    }

    /// `Bᵀ ⊗ A`, so that `vec(A·R·B) = (Bᵀ⊗A)·vec(R)` with column-major vec.
    pub fn vectorized_coefficient(&self) -> DMatrix<f64> {
        self.b.transpose().kronecker(&self.a)
    }

    /// Corrected forecast `base + A·(lagged residual)·B`. Entries of the lagged
    /// residual marked unobserved are treated as zero; their count is returned
    /// alongside the forecast.
    pub fn adjust_prediction(
        &self,
        base_pred: &DMatrix<f64>,
        lagged_residual: &DMatrix<f64>,
        lagged_mask: Option<&DMatrix<bool>>,
    ) -> Result<(DMatrix<f64>, usize)> {
        self.check("base prediction", base_pred)?;
        self.check("lagged residual", lagged_residual)?;
        let mut missing = 0;
        let term = match lagged_mask {
            Some(mask) => {
                if mask.shape() != lagged_residual.shape() {
                    return Err(DrError::dims(
                        "lagged mask",
                        format!("{:?}", lagged_residual.shape()),
                        format!("{:?}", mask.shape()),
                    ));
                }
                let zeroed = lagged_residual.zip_map(mask, |v, m| if m { v } else { 0.0 });
                missing = mask.iter().filter(|m| !**m).count();
                self.apply(&zeroed)
            }
            None => self.apply(lagged_residual),
        };
        Ok((base_pred + term, missing))
    }

    /// `‖A‖₁/N² + ‖B‖₁/Q²` with entrywise l1 norms.
    pub fn l1_penalty(&self) -> f64 {
        let n2 = (self.n() * self.n()) as f64;
        let q2 = (self.q() * self.q()) as f64;
        self.a.iter().map(|v| v.abs()).sum::<f64>() / n2 + self.b.iter().map(|v| v.abs()).sum::<f64>() / q2
    }

    /// Subgradient of [`Self::l1_penalty`] (zero at kinks).
    pub fn l1_subgradient(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let n2 = (self.n() * self.n()) as f64;
        let q2 = (self.q() * self.q()) as f64;
        let sgn = |v: f64| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 };
        (self.a.map(|v| sgn(v) / n2), self.b.map(|v| sgn(v) / q2))
    }

    /// Backpropagates `∂loss/∂E` through [`Self::corrected_error`].
    pub fn ar_grads(&self, p: &ResidualPair, upstream: &DMatrix<f64>) -> Result<ArGrads> {
        self.check("upstream gradient", upstream)?;
        self.check("lagged residual", &p.r_lagged)?;
        let up_bt = upstream * self.b.transpose();
        Ok(ArGrads {
            a: -(&up_bt * p.r_lagged.transpose()),
            b: -((&self.a * &p.r_lagged).transpose() * upstream),
            r_current: upstream.clone(),
            r_lagged: -(self.a.transpose() * up_bt),
        })
    }
}

/// Gradients of a scalar loss with respect to the inputs of
/// [`ArCoefficients::corrected_error`].
#[derive(Debug, Clone)]
pub struct ArGrads {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r_current: DMatrix<f64>,
    pub r_lagged: DMatrix<f64>,
}

/// Current and lagged residual matrices with their observation masks.
/// Unobserved entries are stored as zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualPair {
    pub r_current: DMatrix<f64>,
    pub r_lagged: DMatrix<f64>,
    pub mask_current: DMatrix<bool>,
    pub mask_lagged: DMatrix<bool>,
}

impl ResidualPair {
    /// Fully observed pair.
    pub fn observed(r_current: DMatrix<f64>, r_lagged: DMatrix<f64>) -> Result<Self> {
        let (n, q) = r_current.shape();
        Self::masked(r_current, r_lagged, DMatrix::from_element(n, q, true), DMatrix::from_element(n, q, true))
    }

    /// Builds a pair, zeroing entries whose mask is false.
    pub fn masked(
        r_current: DMatrix<f64>,
        r_lagged: DMatrix<f64>,
        mask_current: DMatrix<bool>,
        mask_lagged: DMatrix<bool>,
    ) -> Result<Self> {
        let shape = r_current.shape();
        for (what, s) in [
            ("lagged residual", r_lagged.shape()),
            ("current mask", mask_current.shape()),
            ("lagged mask", mask_lagged.shape()),
        ] {
            if s != shape {
                return Err(DrError::dims(what, format!("{shape:?}"), format!("{s:?}")));
            }
        }
        Ok(Self {
            r_current: r_current.zip_map(&mask_current, |v, m| if m { v } else { 0.0 }),
            r_lagged: r_lagged.zip_map(&mask_lagged, |v, m| if m { v } else { 0.0 }),
            mask_current,
            mask_lagged,
        })
    }

    pub fn fully_observed(&self) -> bool {
        self.mask_current.iter().chain(self.mask_lagged.iter()).all(|m| *m)
    }
}
