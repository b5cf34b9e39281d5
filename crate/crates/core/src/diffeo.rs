//! Differentiable state-space maps shared by the eigenfunction machinery.

use nalgebra::{DMatrix, DVector};

use crate::Scalar;

/// A continuously differentiable bijection of the state space.
///
/// The eigenfunction library only needs the forward image and the Jacobian,
/// so inverses stay on the concrete types that have them.
pub trait Diffeomorphism<T: Scalar>: Send + Sync {
    fn dim(&self) -> usize;

    /// Image of `x` under the map.
    fn forward(&self, x: &DVector<T>) -> DVector<T>;

    /// Jacobian matrix of the map at `x`.
    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T>;
}

/// The identity map; realizes an untrained lift.
#[derive(Debug, Clone)]
pub struct IdentityDiffeo {
    dim: usize,
}

impl IdentityDiffeo {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }
}

impl<T: Scalar> Diffeomorphism<T> for IdentityDiffeo {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &DVector<T>) -> DVector<T> {
        x.clone()
    }

    fn jacobian(&self, _x: &DVector<T>) -> DMatrix<T> {
        DMatrix::identity(self.dim, self.dim)
    }
}
