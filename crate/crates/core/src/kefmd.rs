//! The lifted LTI predictor: lift the initial condition once, evolve
//! diagonally with the library eigenvalues, reconstruct the state linearly.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::eigen::EigenfunctionLibrary;
use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Relative singular-value cutoff of the reconstruction pseudoinverse.
pub const SVD_CUTOFF: f64 = 1e-10;

/// Diagnostics of the reconstruction fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitDiagnostics<T: Scalar> {
    /// Number of singular values above the cutoff.
    pub effective_rank: usize,
    /// Set when the effective rank is below the state dimension.
    pub rank_deficient: bool,
    /// Root-mean-square reconstruction residual ‖x − Vz‖ over the data.
    pub training_rmse: T,
    /// Magnitude of the fitted constant-mode column (≈ 0 for systems with
    /// their attractor at the origin).
    pub constant_mode_norm: T,
}

/// Fit the reconstruction matrix `V` minimizing Σ‖x⁽ⁱ⁾ − V z⁽ⁱ⁾‖².
///
/// Pseudoinverse with relative singular-value cutoff [`SVD_CUTOFF`]; an
/// optional ridge term replaces the pseudoinverse for ill-conditioned lifts.
/// Rank deficiency is reported, not an error.
pub fn fit_reconstruction<T: Scalar>(
    xs: &DMatrix<T>,
    zs: &DMatrix<T>,
    ridge: Option<T>,
) -> Result<(DMatrix<T>, FitDiagnostics<T>)> {
    let n = xs.ncols();
    if n == 0 {
        return Err(Error::Config("reconstruction fit needs data".into()));
    }
    if zs.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: zs.ncols(),
        });
    }
    let d = xs.nrows();
    let big_d = zs.nrows();

    let (v, effective_rank) = match ridge {
        None => {
            let svd = zs.clone().svd(true, true);
            let u = svd.u.as_ref().expect("left singular vectors");
            let v_t = svd.v_t.as_ref().expect("right singular vectors");
            let smax = svd.singular_values[0];
            let cutoff = smax * cast::<T>(SVD_CUTOFF);
            let rank = svd
                .singular_values
                .iter()
                .filter(|s| **s > cutoff)
                .count();
            // V = X Z† = (X Ṽ) Σ† Uᵀ
            let xv = xs * v_t.transpose();
            let mut scaled = xv;
            for (j, s) in svd.singular_values.iter().enumerate() {
                let inv = if *s > cutoff { T::one() / *s } else { T::zero() };
                scaled.column_mut(j).scale_mut(inv);
            }
            (scaled * u.transpose(), rank)
        }
        Some(lambda) => {
            let gram = zs * zs.transpose();
            let mean_diag = gram.trace() / cast::<T>(big_d as f64);
            let reg = gram + DMatrix::<T>::identity(big_d, big_d) * (lambda * mean_diag);
            let rhs = zs * xs.transpose(); // D×d
            let sol = reg
                .lu()
                .solve(&rhs)
                .ok_or_else(|| Error::NumericalFailure("ridge system singular".into()))?;
            (sol.transpose(), big_d)
        }
    };

    let residual = xs - &v * zs;
    let training_rmse = (residual.norm_squared() / cast::<T>(n as f64)).sqrt();
    let constant_mode_norm = v.column(0).norm();
    Ok((
        v,
        FitDiagnostics {
            effective_rank,
            rank_deficient: effective_rank < d,
            training_rmse,
            constant_mode_norm,
        },
    ))
}

/// Element-wise exponential of the diagonal spectrum: `Λ_d = e^{Λ·dt}`.
pub fn discretize<T: Scalar>(lambdas: &[T], dt: T) -> DVector<T> {
    DVector::from_iterator(lambdas.len(), lambdas.iter().map(|l| (*l * dt).exp()))
}

/// The assembled linear predictor `(Λ, Λ_d, V, lift)`.
#[derive(Clone)]
pub struct LiftedLTIModel<T: Scalar> {
    /// Diagonal of `Λ` (library eigenvalues, lift order).
    pub lambdas: DVector<T>,
    /// Diagonal of `Λ_d = e^{Λ·dt}`.
    pub lambda_d: DVector<T>,
    /// `d × D` reconstruction matrix.
    pub v: DMatrix<T>,
    pub library: Arc<EigenfunctionLibrary<T>>,
    pub dt: T,
}

impl<T: Scalar> std::fmt::Debug for LiftedLTIModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LiftedLTIModel")
            .field("dim_lifted", &self.lambdas.len())
            .field("dt", &self.dt.to_f64())
            .finish()
    }
}

impl<T: Scalar> LiftedLTIModel<T> {
    /// Fit the reconstruction over the dataset's states and assemble the
    /// discrete evolution for time step `dt`.
    pub fn fit(
        library: Arc<EigenfunctionLibrary<T>>,
        xs: &DMatrix<T>,
        dt: T,
        ridge: Option<T>,
    ) -> Result<(Self, FitDiagnostics<T>)> {
        if dt <= T::zero() {
            return Err(Error::Config("model time step dt must be positive".into()));
        }
        let zs = library.lift_matrix(xs);
        let (v, diag) = fit_reconstruction(xs, &zs, ridge)?;
        let lambdas = DVector::from_column_slice(library.lambdas());
        let lambda_d = discretize(library.lambdas(), dt);
        Ok((
            Self {
                lambdas,
                lambda_d,
                v,
                library,
                dt,
            },
            diag,
        ))
    }

    pub fn dim_lifted(&self) -> usize {
        self.lambdas.len()
    }

    pub fn state_dim(&self) -> usize {
        self.v.nrows()
    }

    /// Predict `k_steps + 1` states from `x0`: the lift is applied only to
    /// the initial condition, the evolution is strictly linear.
    pub fn predict_trajectory(&self, x0: &DVector<T>, k_steps: usize) -> Vec<DVector<T>> {
        let mut z = self.library.lift(x0);
        let mut out = Vec::with_capacity(k_steps + 1);
        out.push(&self.v * &z);
        for _ in 0..k_steps {
            z.component_mul_assign(&self.lambda_d);
            out.push(&self.v * &z);
        }
        out
    }

    /// `V Λ φ̂(x)`: the model's vector field at `x`.
    pub fn predict_derivative(&self, x: &DVector<T>) -> DVector<T> {
        let z = self.library.lift(x);
        &self.v * z.component_mul(&self.lambdas)
    }
}
