//! Eigenfunction library construction: principal eigenpairs of the
//! linearization, the multi-index product library, unit-box scaling, and the
//! composed nonlinear eigenfunctions.
//!
//! Eigenvalues transfer unchanged across the conjugacy, so the library's
//! spectrum depends only on the linearization and the chosen maximum powers,
//! never on the learned map.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::diffeo::Diffeomorphism;
use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Inflation applied to the observed principal-coordinate radii so training
/// data lands strictly inside the unit box.
pub const RADIUS_MARGIN: f64 = 1.05;

/// Principal-coordinate magnitude beyond which a lift counts as extrapolating.
pub const EXTRAPOLATION_FLAG: f64 = 1.5;

/// Eigenvalues and bi-orthogonal eigenvector bases of the linearization.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalEigenpairs<T: Scalar> {
    /// Real eigenvalues of `A`, all strictly negative.
    pub lambdas: Vec<T>,
    /// Right eigenvectors as columns.
    pub right_eigvecs: DMatrix<T>,
    /// Adjoint basis `W` with `⟨vᵢ, wⱼ⟩ = δᵢⱼ`; columns are eigenvectors
    /// of `Aᵀ`.
    pub adjoint_basis: DMatrix<T>,
}

/// Condition-number gate on the eigenvector basis.
const DIAGONALIZABILITY_COND_MAX: f64 = 1e8;

/// Eigen-decompose a Hurwitz matrix with real spectrum.
///
/// The adjoint basis solves `V_Aᵀ W = I` by LU rather than through cofactor
/// matrices; the result matches up to scaling with better conditioning.
pub fn principal_eigenpairs<T: Scalar>(a: &DMatrix<T>) -> Result<PrincipalEigenpairs<T>> {
    if a.nrows() != a.ncols() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    let d = a.nrows();

    // Exactly diagonal input keeps exactly canonical bases.
    let diagonal = a
        .iter()
        .enumerate()
        .all(|(k, v)| k / d == k % d || *v == T::zero());
    if diagonal {
        let lambdas: Vec<T> = (0..d).map(|i| a[(i, i)]).collect();
        for l in &lambdas {
            if *l >= T::zero() {
                return Err(Error::StabilityViolation {
                    re: l.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        return Ok(PrincipalEigenpairs {
            lambdas,
            right_eigvecs: DMatrix::identity(d, d),
            adjoint_basis: DMatrix::identity(d, d),
        });
    }

    let scale = a.norm().max(T::one());
    let imag_tol = scale * cast::<T>(1e-9);
    let eigs = a.complex_eigenvalues();
    let mut lambdas = Vec::with_capacity(d);
    for e in eigs.iter() {
        if e.im.abs() > imag_tol {
            return Err(Error::UnsupportedSpectrum(format!(
                "complex eigenvalue {} + {}i; only real spectra are supported",
                e.re.to_f64().unwrap_or(f64::NAN),
                e.im.to_f64().unwrap_or(f64::NAN)
            )));
        }
        lambdas.push(e.re);
    }
    for l in &lambdas {
        if *l >= T::zero() {
            return Err(Error::StabilityViolation {
                re: l.to_f64().unwrap_or(f64::NAN),
            });
        }
    }

    // Right eigenvectors from the null space of (A − λI) via SVD.
    let mut v = DMatrix::zeros(d, d);
    for (j, lambda) in lambdas.iter().enumerate() {
        let shifted = a - DMatrix::<T>::identity(d, d) * *lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
        let mut vec = v_t.row(d - 1).transpose();
        // deterministic sign: largest-magnitude entry positive
        let lead = vec
            .iter()
            .enumerate()
            .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
            .map(|(i, _)| i)
            .unwrap_or(0);
        if vec[lead] < T::zero() {
            vec = -vec;
        }
        v.set_column(j, &vec);
    }

    let svd = v.clone().svd(false, false);
    let sv = &svd.singular_values;
    let cond = (sv[0] / sv[sv.len() - 1]).to_f64().unwrap_or(f64::INFINITY);
    if !cond.is_finite() || cond > DIAGONALIZABILITY_COND_MAX {
        return Err(Error::Diagonalizability(format!(
            "eigenvector basis condition number {cond:.3e}"
        )));
    }

    let w = v
        .transpose()
        .lu()
        .solve(&DMatrix::identity(d, d))
        .ok_or_else(|| Error::Diagonalizability("singular eigenvector basis".into()))?;

    Ok(PrincipalEigenpairs {
        lambdas,
        right_eigvecs: v,
        adjoint_basis: w,
    })
}

/// Multi-index powers of the principal eigenpairs and their eigenvalues.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiIndexLibrary<T: Scalar> {
    pub max_powers: Vec<usize>,
    /// Lexicographically ordered multi-indices, the all-zero index first.
    pub indices: Vec<Vec<usize>>,
    /// `λᵢ = Σⱼ mⱼ λ_p,ⱼ`, in `indices` order.
    pub lambdas: Vec<T>,
}

/// Enumerate all multi-indices `0 ≤ mⱼ ≤ pⱼ` with their summed eigenvalues.
pub fn enumerate_library<T: Scalar>(lambdas_p: &[T], max_powers: &[usize]) -> MultiIndexLibrary<T> {
    assert_eq!(lambdas_p.len(), max_powers.len());
    let d = max_powers.len();
    let count: usize = max_powers.iter().map(|p| p + 1).product();
    let mut indices = Vec::with_capacity(count);
    let mut lambdas = Vec::with_capacity(count);
    let mut m = vec![0usize; d];
    for _ in 0..count {
        let mut lambda = T::zero();
        for j in 0..d {
            lambda += cast::<T>(m[j] as f64) * lambdas_p[j];
        }
        indices.push(m.clone());
        lambdas.push(lambda);
        for k in (0..d).rev() {
            m[k] += 1;
            if m[k] <= max_powers[k] {
                break;
            }
            m[k] = 0;
        }
    }
    MultiIndexLibrary {
        max_powers: max_powers.to_vec(),
        indices,
        lambdas,
    }
}

impl<T: Scalar> MultiIndexLibrary<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-coordinate radii of the principal-coordinate box the data maps into.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxScaling<T: Scalar> {
    pub radius: DVector<T>,
}

impl<T: Scalar> BoxScaling<T> {
    pub fn unit(dim: usize) -> Self {
        Self {
            radius: DVector::from_element(dim, T::one()),
        }
    }
}

/// Fit the unit-box scaling from training data: for every state, map it
/// through the diffeomorphism into principal coordinates and record the
/// per-coordinate maximum magnitude, inflated by [`RADIUS_MARGIN`].
pub fn fit_box_scaling<T: Scalar>(
    diffeo: &dyn Diffeomorphism<T>,
    adjoint_basis: &DMatrix<T>,
    dataset: &TrajectoryDataset<T>,
) -> Result<BoxScaling<T>> {
    let d = diffeo.dim();
    let maxima = dataset
        .trajectories
        .par_iter()
        .map(|traj| {
            let mut m = DVector::<T>::zeros(d);
            for x in &traj.states {
                let c = adjoint_basis.tr_mul(&diffeo.forward(x));
                for j in 0..d {
                    m[j] = m[j].max(c[j].abs());
                }
            }
            m
        })
        .reduce(
            || DVector::<T>::zeros(d),
            |mut acc, m| {
                for j in 0..d {
                    acc[j] = acc[j].max(m[j]);
                }
                acc
            },
        );
    let margin = cast::<T>(RADIUS_MARGIN);
    let mut radius = DVector::zeros(d);
    for j in 0..d {
        if maxima[j] == T::zero() {
            return Err(Error::DegenerateData { coord: j });
        }
        radius[j] = maxima[j] * margin;
    }
    Ok(BoxScaling { radius })
}

/// The library of nonlinear-system eigenfunctions: multi-index products of
/// scaled principal coordinates composed with the diffeomorphism.
#[derive(Clone)]
pub struct EigenfunctionLibrary<T: Scalar> {
    pub principal: PrincipalEigenpairs<T>,
    pub library: MultiIndexLibrary<T>,
    pub scaling: BoxScaling<T>,
    diffeo: Arc<dyn Diffeomorphism<T>>,
}

impl<T: Scalar> std::fmt::Debug for EigenfunctionLibrary<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EigenfunctionLibrary")
            .field("principal", &self.principal)
            .field("library_size", &self.library.len())
            .field("scaling", &self.scaling)
            .finish()
    }
}

impl<T: Scalar> EigenfunctionLibrary<T> {
    /// Build the full library for linearization `a`: eigen-decompose, fit
    /// the box scaling from `dataset`, and enumerate the product library.
    pub fn build(
        a: &DMatrix<T>,
        max_powers: &[usize],
        diffeo: Arc<dyn Diffeomorphism<T>>,
        dataset: &TrajectoryDataset<T>,
    ) -> Result<Self> {
        if max_powers.len() != a.nrows() {
            return Err(Error::DimensionMismatch {
                expected: a.nrows(),
                got: max_powers.len(),
            });
        }
        let principal = principal_eigenpairs(a)?;
        let scaling = fit_box_scaling(diffeo.as_ref(), &principal.adjoint_basis, dataset)?;
        let library = enumerate_library(&principal.lambdas, max_powers);
        Ok(Self {
            principal,
            library,
            scaling,
            diffeo,
        })
    }

    /// Assemble a library from explicit parts (tests and deserialization).
    pub fn from_parts(
        principal: PrincipalEigenpairs<T>,
        library: MultiIndexLibrary<T>,
        scaling: BoxScaling<T>,
        diffeo: Arc<dyn Diffeomorphism<T>>,
    ) -> Self {
        assert_eq!(principal.lambdas.len(), scaling.radius.len());
        Self {
            principal,
            library,
            scaling,
            diffeo,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.principal.lambdas.len()
    }

    /// Lifted dimension `D`.
    pub fn dim_lifted(&self) -> usize {
        self.library.len()
    }

    /// Library eigenvalues in lift order.
    pub fn lambdas(&self) -> &[T] {
        &self.library.lambdas
    }

    pub fn diffeo(&self) -> &Arc<dyn Diffeomorphism<T>> {
        &self.diffeo
    }

    /// Scaled principal coordinates `c(x) = diag(r)⁻¹ Wᵀ d̂(x)`.
    pub fn principal_values(&self, x: &DVector<T>) -> DVector<T> {
        let y = self.diffeo.forward(x);
        let mut c = self.principal.adjoint_basis.tr_mul(&y);
        for j in 0..c.len() {
            c[j] /= self.scaling.radius[j];
        }
        c
    }

    /// Evaluate all library eigenfunctions at `x`.
    ///
    /// Entry `i` is `Πⱼ cⱼ^{mⱼ}` for multi-index `m = indices[i]`; the
    /// all-zero index yields the constant 1.
    pub fn lift(&self, x: &DVector<T>) -> DVector<T> {
        self.lift_with_flag(x).0
    }

    /// [`lift`](Self::lift), also flagging extrapolation: any scaled
    /// principal coordinate with magnitude above [`EXTRAPOLATION_FLAG`].
    pub fn lift_with_flag(&self, x: &DVector<T>) -> (DVector<T>, bool) {
        let c = self.principal_values(x);
        let flag = c.iter().any(|v| v.abs() > cast::<T>(EXTRAPOLATION_FLAG));
        // power tables: pows[j][k] = c_j^k
        let d = c.len();
        let pows: Vec<Vec<T>> = (0..d)
            .map(|j| {
                let p = self.library.max_powers[j];
                let mut tab = Vec::with_capacity(p + 1);
                tab.push(T::one());
                for k in 1..=p {
                    tab.push(tab[k - 1] * c[j]);
                }
                tab
            })
            .collect();
        let z = DVector::from_iterator(
            self.library.len(),
            self.library.indices.iter().map(|m| {
                let mut prod = T::one();
                for j in 0..d {
                    prod *= pows[j][m[j]];
                }
                prod
            }),
        );
        (z, flag)
    }

    /// Lift every column of a `d × N` state matrix into a `D × N` matrix.
    pub fn lift_matrix(&self, xs: &DMatrix<T>) -> DMatrix<T> {
        let n = xs.ncols();
        let cols: Vec<DVector<T>> = (0..n)
            .into_par_iter()
            .map(|c| self.lift(&xs.column(c).into_owned()))
            .collect();
        let mut z = DMatrix::zeros(self.dim_lifted(), n);
        for (c, col) in cols.iter().enumerate() {
            z.set_column(c, col);
        }
        z
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffeo::IdentityDiffeo;
    use crate::dynamics::{
        boundary_starts, generate_dataset, grid_starts, integrate, DomainBox, ExactDiffeoEx1,
        Trajectory, VectorFieldSpec,
    };
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    fn ex1_dataset() -> TrajectoryDataset<f64> {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let starts = boundary_starts(&box_, 12, 7);
        generate_dataset(&sys, &box_, &starts, 0.065, 60).unwrap()
    }

    /// Dataset whose states are exactly the given points (no integration).
    fn point_dataset(points: &[DVector<f64>]) -> TrajectoryDataset<f64> {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0, 2);
        let trajectories = points
            .iter()
            .map(|p| Trajectory {
                dt: 0.065,
                states: vec![p.clone()],
                derivs: vec![sys.eval_rhs(p).unwrap()],
            })
            .collect();
        TrajectoryDataset {
            trajectories,
            system: sys,
            box_,
        }
    }

    #[test]
    fn diagonal_matrix_keeps_canonical_bases_exactly() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, -0.3]);
        let p = principal_eigenpairs(&a).unwrap();
        assert_eq!(p.lambdas, vec![-0.7, -0.3]);
        assert_eq!(p.right_eigvecs, DMatrix::identity(2, 2));
        assert_eq!(p.adjoint_basis, DMatrix::identity(2, 2));
    }

    #[test]
    fn triangular_matrix_gives_biorthogonal_bases_and_eigen_pde() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -2.0]);
        let p = principal_eigenpairs(&a).unwrap();
        let mut sorted = p.lambdas.clone();
        sorted.sort_by(f64::total_cmp);
        assert!((sorted[0] + 2.0).abs() < 1e-12 && (sorted[1] + 1.0).abs() < 1e-12);

        // ⟨vᵢ, wⱼ⟩ = δᵢⱼ
        let gram = p.right_eigvecs.tr_mul(&p.adjoint_basis);
        for i in 0..2 {
            for j in 0..2 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - expect).abs() <= 1e-10);
            }
        }

        // φ_j(y) = ⟨y, wⱼ⟩ satisfies ∇φ·(Ay) = λⱼ φ(y)
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let y = v2(rng.random::<f64>() * 4.0 - 2.0, rng.random::<f64>() * 4.0 - 2.0);
            for j in 0..2 {
                let w = p.adjoint_basis.column(j);
                let lhs = w.dot(&(&a * &y));
                let rhs = p.lambdas[j] * w.dot(&y);
                assert!((lhs - rhs).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn complex_spectrum_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]);
        assert!(matches!(
            principal_eigenpairs(&a).unwrap_err(),
            Error::UnsupportedSpectrum(_)
        ));
    }

    #[test]
    fn defective_matrix_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        assert!(matches!(
            principal_eigenpairs(&a).unwrap_err(),
            Error::Diagonalizability(_)
        ));
    }

    #[test]
    fn positive_real_eigenvalue_is_a_stability_violation() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, -1.0]);
        assert!(matches!(
            principal_eigenpairs(&a).unwrap_err(),
            Error::StabilityViolation { .. }
        ));
    }

    #[test]
    fn library_combinatorics_match_protocol_dimensions() {
        let lib = enumerate_library(&[-0.7, -0.3], &[5, 5]);
        assert_eq!(lib.len(), 36);
        let lib = enumerate_library(&[-1.3, -2.0], &[13, 13]);
        assert_eq!(lib.len(), 196);
    }

    #[test]
    fn library_eigenvalues_are_integer_weighted_sums() {
        let lambdas_p = [-0.7, -0.3];
        let lib = enumerate_library(&lambdas_p, &[5, 5]);
        assert_eq!(lib.indices[0], vec![0, 0]);
        assert_eq!(lib.lambdas[0], 0.0);
        for (m, l) in lib.indices.iter().zip(lib.lambdas.iter()) {
            let mut expect = 0.0;
            for j in 0..2 {
                expect += m[j] as f64 * lambdas_p[j];
            }
            assert_eq!(*l, expect, "index {m:?}");
            if m.iter().any(|v| *v > 0) {
                assert!(*l < 0.0);
            }
        }
        let i21 = lib.indices.iter().position(|m| m == &vec![2, 1]).unwrap();
        assert!((lib.lambdas[i21] - (-1.7)).abs() <= 1e-15);
    }

    #[test]
    fn library_order_is_lexicographic() {
        let lib = enumerate_library(&[-1.0, -2.0], &[1, 2]);
        let expect: Vec<Vec<usize>> = vec![
            vec![0, 0],
            vec![0, 1],
            vec![0, 2],
            vec![1, 0],
            vec![1, 1],
            vec![1, 2],
        ];
        assert_eq!(lib.indices, expect);
    }

    #[test]
    fn box_scaling_from_boundary_point_dataset() {
        let box_ = DomainBox::centered(5.0, 2);
        let pts = boundary_starts(&box_, 24, 3);
        let ds = point_dataset(&pts);
        let id = IdentityDiffeo::new(2);
        let scaling = fit_box_scaling(&id, &DMatrix::identity(2, 2), &ds).unwrap();
        // Some point lies on each dimension's face, so the radius is
        // exactly the face value times the margin.
        for j in 0..2 {
            assert!((scaling.radius[j] - 5.25).abs() <= 1e-12, "r[{j}] = {}", scaling.radius[j]);
        }
    }

    #[test]
    fn degenerate_dataset_is_rejected() {
        let ds = point_dataset(&[v2(0.0, 0.0)]);
        let id = IdentityDiffeo::new(2);
        let err = fit_box_scaling(&id, &DMatrix::identity(2, 2), &ds).unwrap_err();
        assert!(matches!(err, Error::DegenerateData { .. }));
    }

    #[test]
    fn scaled_coordinates_of_training_data_stay_in_unit_box() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let lib =
            EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(IdentityDiffeo::new(2)), &ds)
                .unwrap();
        for traj in &ds.trajectories {
            for x in &traj.states {
                let c = lib.principal_values(x);
                assert!(c.iter().all(|v| v.abs() <= 1.0));
                let z = lib.lift(x);
                assert!(z.iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn lift_at_origin_is_the_constant_coordinate() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let lib =
            EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(IdentityDiffeo::new(2)), &ds)
                .unwrap();
        let z = lib.lift(&v2(0.0, 0.0));
        assert_eq!(z[0], 1.0);
        for i in 1..z.len() {
            assert_eq!(z[i], 0.0);
        }
    }

    #[test]
    fn lift_with_unit_radius_matches_hand_product() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, -0.3]);
        let principal = principal_eigenpairs(&a).unwrap();
        let library = enumerate_library(&principal.lambdas, &[1, 1]);
        let lib = EigenfunctionLibrary::from_parts(
            principal,
            library,
            BoxScaling::unit(2),
            Arc::new(IdentityDiffeo::new(2)),
        );
        let z = lib.lift(&v2(0.5, 0.5));
        // indices: (0,0), (0,1), (1,0), (1,1)
        assert_eq!(z.as_slice(), &[1.0, 0.5, 0.5, 0.25]);
    }

    #[test]
    fn lift_flags_extrapolation() {
        let a = DMatrix::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, -0.3]);
        let principal = principal_eigenpairs(&a).unwrap();
        let library = enumerate_library(&principal.lambdas, &[2, 2]);
        let lib = EigenfunctionLibrary::from_parts(
            principal,
            library,
            BoxScaling::unit(2),
            Arc::new(IdentityDiffeo::new(2)),
        );
        assert!(!lib.lift_with_flag(&v2(0.9, 0.9)).1);
        assert!(lib.lift_with_flag(&v2(2.0, 0.0)).1);
    }

    #[test]
    fn exact_oracle_entry_for_first_power_is_scaled_state() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let oracle = Arc::new(ExactDiffeoEx1::new(-0.7, -0.3).unwrap());
        let lib = EigenfunctionLibrary::build(&a, &[5, 5], oracle, &ds).unwrap();
        let i10 = lib.library.indices.iter().position(|m| m == &vec![1, 0]).unwrap();
        let x = v2(1.3, -0.4);
        let z = lib.lift(&x);
        assert!((z[i10] - x[0] / lib.scaling.radius[0]).abs() <= 1e-14);
    }

    #[test]
    fn semigroup_closure_of_products() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let lib =
            EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(IdentityDiffeo::new(2)), &ds)
                .unwrap();
        let find = |m: &[usize]| lib.library.indices.iter().position(|i| i == m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = v2(rng.random::<f64>() * 8.0 - 4.0, rng.random::<f64>() * 8.0 - 4.0);
            let z = lib.lift(&x);
            for (m1, m2) in [([1, 2], [2, 1]), ([0, 1], [3, 2]), ([2, 0], [2, 2])] {
                let sum = [m1[0] + m2[0], m1[1] + m2[1]];
                let lhs = z[find(&sum)];
                let rhs = z[find(&m1)] * z[find(&m2)];
                assert!(
                    (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0),
                    "{m1:?}+{m2:?}: {lhs} vs {rhs}"
                );
                // eigenvalues add up to summation rounding
                let lsum = lib.library.lambdas[find(&sum)];
                let lparts = lib.library.lambdas[find(&m1)] + lib.library.lambdas[find(&m2)];
                assert!((lsum - lparts).abs() <= 1e-14 * lsum.abs().max(1.0));
            }
        }
    }

    #[test]
    fn library_eigenvalues_ignore_the_diffeomorphism() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let with_id =
            EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(IdentityDiffeo::new(2)), &ds)
                .unwrap();
        let with_oracle = EigenfunctionLibrary::build(
            &a,
            &[5, 5],
            Arc::new(ExactDiffeoEx1::new(-0.7, -0.3).unwrap()),
            &ds,
        )
        .unwrap();
        // bit-identical spectra
        assert_eq!(with_id.library.lambdas, with_oracle.library.lambdas);
    }

    #[test]
    fn eigenfunction_evolution_property_with_exact_oracle() {
        // φ̂(F^t x₀) = e^{λt} φ̂(x₀) along flows of the true system, to the
        // integration tolerance, when the diffeomorphism is exact.
        let ds = ex1_dataset();
        let sys = ds.system.clone();
        let a = sys.jacobian_linearization().unwrap();
        let oracle = Arc::new(ExactDiffeoEx1::new(-0.7, -0.3).unwrap());
        let lib = EigenfunctionLibrary::build(&a, &[5, 5], oracle, &ds).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dt = 0.002;
        let steps = 500; // T = 1.0
        for _ in 0..10 {
            let x0 = v2(rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0);
            let traj = integrate(&sys, &x0, dt, steps).unwrap();
            let xt = traj.states.last().unwrap();
            let z0 = lib.lift(&x0);
            let zt = lib.lift(xt);
            let t = dt * steps as f64;
            for i in 0..lib.dim_lifted() {
                let expect = (lib.library.lambdas[i] * t).exp() * z0[i];
                let err = (zt[i] - expect).abs();
                let tol = 1e-6 * z0[i].abs().max(1.0);
                assert!(err <= tol, "entry {i}: err {err:.3e} > {tol:.3e}");
            }
        }
    }

    #[test]
    fn generator_pde_residual_with_exact_oracle() {
        // ∇φ̂ᵢ(x)·f(x) = λᵢ φ̂ᵢ(x); gradient by central differences of the lift.
        let ds = ex1_dataset();
        let sys = ds.system.clone();
        let a = sys.jacobian_linearization().unwrap();
        let oracle = Arc::new(ExactDiffeoEx1::new(-0.7, -0.3).unwrap());
        let lib = EigenfunctionLibrary::build(&a, &[5, 5], oracle, &ds).unwrap();

        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let h = 1e-6;
        for _ in 0..20 {
            let x = v2(rng.random::<f64>() * 6.0 - 3.0, rng.random::<f64>() * 6.0 - 3.0);
            let f = sys.eval_rhs(&x).unwrap();
            let z = lib.lift(&x);
            let mut grad_dot_f = DVector::<f64>::zeros(lib.dim_lifted());
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                grad_dot_f += (lib.lift(&xp) - lib.lift(&xm)) * (f[c] / (2.0 * h));
            }
            for i in 0..lib.dim_lifted() {
                let err = (grad_dot_f[i] - lib.library.lambdas[i] * z[i]).abs();
                assert!(err <= 1e-6 * z[i].abs().max(1.0), "entry {i}: {err:.3e}");
            }
        }
    }

    #[test]
    fn grid_lift_is_bounded_near_box() {
        let ds = ex1_dataset();
        let a = ds.system.jacobian_linearization().unwrap();
        let lib =
            EigenfunctionLibrary::build(&a, &[5, 5], Arc::new(IdentityDiffeo::new(2)), &ds)
                .unwrap();
        let grid = grid_starts(&DomainBox::centered(5.0, 2), 5);
        let z = lib.lift_matrix(&{
            let mut m = DMatrix::zeros(2, grid.len());
            for (c, p) in grid.iter().enumerate() {
                m.set_column(c, p);
            }
            m
        });
        assert_eq!(z.nrows(), 36);
        assert!(z.iter().all(|v| v.is_finite()));
    }
}
