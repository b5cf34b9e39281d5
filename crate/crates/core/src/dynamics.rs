//! Benchmark vector fields, Jacobian linearizations, RK4 integration, and
//! trajectory dataset generation.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffeo::Diffeomorphism;
use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Closed-form right-hand sides known to the crate.
#[derive(Debug, Clone, PartialEq)]
enum SystemKind<T> {
    /// `ẋ₁ = μ x₁`, `ẋ₂ = λ (x₂ − x₁²)`.
    SlowManifold { mu: T, lambda: T },
    /// `ẋ₁ = (a + c sin²(x₂)) x₁`, `ẋ₂ = b x₂`.
    SineDamped { a: T, b: T, c: T },
    /// `ẋᵢ = dᵢ xᵢ` with diagonal entries `d₁..d_n` from params `a1..an`.
    LinearDiag { diag: Vec<T> },
}

/// A named vector field with its parameters.
#[derive(Debug, Clone)]
pub struct VectorFieldSpec<T: Scalar> {
    pub name: String,
    pub params: BTreeMap<String, T>,
    pub dim: usize,
    kind: SystemKind<T>,
}

fn param<T: Copy>(params: &BTreeMap<String, T>, key: &str, system: &str) -> Result<T> {
    params.get(key).copied().ok_or_else(|| {
        Error::Config(format!("system `{system}` requires parameter `{key}`"))
    })
}

impl<T: Scalar> VectorFieldSpec<T> {
    /// Resolve a named system from its parameter map.
    pub fn new(name: &str, params: BTreeMap<String, T>) -> Result<Self> {
        let kind = match name {
            "ex1" => SystemKind::SlowManifold {
                mu: param(&params, "mu", name)?,
                lambda: param(&params, "lambda", name)?,
            },
            "ex3" => SystemKind::SineDamped {
                a: param(&params, "a", name)?,
                b: param(&params, "b", name)?,
                c: param(&params, "c", name)?,
            },
            "linear" => {
                let mut diag = Vec::new();
                for i in 1.. {
                    match params.get(&format!("a{i}")) {
                        Some(v) => diag.push(*v),
                        None => break,
                    }
                }
                if diag.is_empty() {
                    return Err(Error::Config(
                        "system `linear` requires diagonal parameters a1, a2, ...".into(),
                    ));
                }
                SystemKind::LinearDiag { diag }
            }
            other => return Err(Error::UnknownSystem(other.to_string())),
        };
        let dim = match &kind {
            SystemKind::SlowManifold { .. } | SystemKind::SineDamped { .. } => 2,
            SystemKind::LinearDiag { diag } => diag.len(),
        };
        Ok(Self {
            name: name.to_string(),
            params,
            dim,
            kind,
        })
    }

    /// The slow-manifold system with parameters `μ`, `λ`.
    pub fn ex1(mu: T, lambda: T) -> Self {
        let mut params = BTreeMap::new();
        params.insert("mu".into(), mu);
        params.insert("lambda".into(), lambda);
        Self::new("ex1", params).expect("ex1 params are complete")
    }

    /// The sine-damped system with parameters `a`, `b`, `c`.
    pub fn ex3(a: T, b: T, c: T) -> Self {
        let mut params = BTreeMap::new();
        params.insert("a".into(), a);
        params.insert("b".into(), b);
        params.insert("c".into(), c);
        Self::new("ex3", params).expect("ex3 params are complete")
    }

    /// A diagonal linear system `ẋᵢ = dᵢ xᵢ`.
    pub fn linear_diag(diag: &[T]) -> Self {
        let mut params = BTreeMap::new();
        for (i, d) in diag.iter().enumerate() {
            params.insert(format!("a{}", i + 1), *d);
        }
        Self::new("linear", params).expect("linear params are complete")
    }

    fn check_dim(&self, x: &DVector<T>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Evaluate the vector field `f(x)`.
    pub fn eval_rhs(&self, x: &DVector<T>) -> Result<DVector<T>> {
        self.check_dim(x)?;
        Ok(match &self.kind {
            SystemKind::SlowManifold { mu, lambda } => DVector::from_vec(vec![
                *mu * x[0],
                *lambda * (x[1] - x[0] * x[0]),
            ]),
            SystemKind::SineDamped { a, b, c } => {
                let s = x[1].sin();
                DVector::from_vec(vec![(*a + *c * s * s) * x[0], *b * x[1]])
            }
            SystemKind::LinearDiag { diag } => {
                DVector::from_iterator(diag.len(), diag.iter().zip(x.iter()).map(|(d, v)| *d * *v))
            }
        })
    }

    /// The Jacobian of `f` at the origin, rejected unless it is Hurwitz.
    pub fn jacobian_linearization(&self) -> Result<DMatrix<T>> {
        let a = match &self.kind {
            SystemKind::SlowManifold { mu, lambda } => {
                DMatrix::from_diagonal(&DVector::from_vec(vec![*mu, *lambda]))
            }
            SystemKind::SineDamped { a, b, .. } => {
                DMatrix::from_diagonal(&DVector::from_vec(vec![*a, *b]))
            }
            SystemKind::LinearDiag { diag } => {
                DMatrix::from_diagonal(&DVector::from_vec(diag.clone()))
            }
        };
        for eig in a.complex_eigenvalues().iter() {
            if eig.re >= T::zero() {
                return Err(Error::StabilityViolation {
                    re: eig.re.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        Ok(a)
    }
}

/// An axis-aligned box `[lo, hi]` in state space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBox<T: Scalar> {
    pub lo: DVector<T>,
    pub hi: DVector<T>,
}

impl<T: Scalar> DomainBox<T> {
    pub fn new(lo: DVector<T>, hi: DVector<T>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::DimensionMismatch {
                expected: lo.len(),
                got: hi.len(),
            });
        }
        if lo.iter().zip(hi.iter()).any(|(l, h)| l >= h) {
            return Err(Error::Config("box bounds must satisfy lo < hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The centered cube `[-r, r]^d`.
    pub fn centered(radius: T, dim: usize) -> Self {
        Self {
            lo: DVector::from_element(dim, -radius),
            hi: DVector::from_element(dim, radius),
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Whether `x` lies inside the box inflated about its center by `margin`.
    pub fn contains_with_margin(&self, x: &DVector<T>, margin: T) -> bool {
        x.iter().enumerate().all(|(j, v)| {
            let c = (self.lo[j] + self.hi[j]) / cast(2.0);
            let half = (self.hi[j] - self.lo[j]) / cast(2.0) * margin;
            (*v - c).abs() <= half
        })
    }
}

/// Start points sampled uniformly over the boundary of `box_`.
///
/// Each point lands on exactly one face; faces are chosen proportionally to
/// their (d−1)-dimensional measure. Deterministic under `seed`.
pub fn boundary_starts<T: Scalar>(
    box_: &DomainBox<T>,
    n_trajectories: usize,
    seed: u64,
) -> Vec<DVector<T>> {
    let d = box_.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Measure of one face orthogonal to axis j (both faces of a dim match).
    let widths: Vec<f64> = (0..d)
        .map(|j| (box_.hi[j] - box_.lo[j]).to_f64().unwrap())
        .collect();
    let face_area: Vec<f64> = (0..d)
        .map(|j| {
            (0..d)
                .filter(|k| *k != j)
                .map(|k| widths[k])
                .product::<f64>()
        })
        .collect();
    let total: f64 = face_area.iter().map(|a| 2.0 * a).sum();

    (0..n_trajectories)
        .map(|_| {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut axis = d - 1;
            let mut side_hi = true;
            for j in 0..d {
                for side in [false, true] {
                    if u < face_area[j] {
                        axis = j;
                        side_hi = side;
                        u = f64::NAN; // face found; skip the rest
                        break;
                    }
                    u -= face_area[j];
                }
                if u.is_nan() {
                    break;
                }
            }
            let mut x = DVector::zeros(d);
            for k in 0..d {
                if k == axis {
                    x[k] = if side_hi { box_.hi[k] } else { box_.lo[k] };
                } else {
                    let t: f64 = rng.random();
                    x[k] = box_.lo[k] + (box_.hi[k] - box_.lo[k]) * cast(t);
                }
            }
            x
        })
        .collect()
}

/// A uniform lattice of `per_dim^d` points over the box, bounds included.
pub fn grid_starts<T: Scalar>(box_: &DomainBox<T>, per_dim: usize) -> Vec<DVector<T>> {
    assert!(per_dim >= 2, "grid needs at least two points per dimension");
    let d = box_.dim();
    let n = per_dim.pow(d as u32);
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; d];
    for _ in 0..n {
        let x = DVector::from_iterator(
            d,
            (0..d).map(|k| {
                let t = cast::<T>(idx[k] as f64 / (per_dim - 1) as f64);
                box_.lo[k] + (box_.hi[k] - box_.lo[k]) * t
            }),
        );
        out.push(x);
        // odometer increment, last axis fastest
        for k in (0..d).rev() {
            idx[k] += 1;
            if idx[k] < per_dim {
                break;
            }
            idx[k] = 0;
        }
    }
    out
}

/// A single integrated trajectory with analytic derivatives at every state.
#[derive(Debug, Clone)]
pub struct Trajectory<T: Scalar> {
    pub dt: T,
    pub states: Vec<DVector<T>>,
    pub derivs: Vec<DVector<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// One classical RK4 step of `ẋ = f(x)`.
fn rk4_step<T: Scalar>(
    system: &VectorFieldSpec<T>,
    x: &DVector<T>,
    dt: T,
) -> Result<DVector<T>> {
    let half = dt / cast(2.0);
    let sixth = dt / cast(6.0);
    let two = cast::<T>(2.0);
    let k1 = system.eval_rhs(x)?;
    let k2 = system.eval_rhs(&(x + &k1 * half))?;
    let k3 = system.eval_rhs(&(x + &k2 * half))?;
    let k4 = system.eval_rhs(&(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * two + k3 * two + k4) * sixth)
}

/// Integrate with fixed-step classical RK4, storing `steps + 1` states.
///
/// Derivatives are re-evaluated from the analytic vector field at each stored
/// state rather than differenced.
pub fn integrate<T: Scalar>(
    system: &VectorFieldSpec<T>,
    x0: &DVector<T>,
    dt: T,
    steps: usize,
) -> Result<Trajectory<T>> {
    if dt <= T::zero() {
        return Err(Error::Config("integration step dt must be positive".into()));
    }
    if steps == 0 {
        return Err(Error::Config("integration needs at least one step".into()));
    }
    system.check_dim(x0)?;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    for step in 0..steps {
        let next = rk4_step(system, &states[step], dt)?;
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        states.push(next);
    }
    let derivs = states
        .iter()
        .map(|x| system.eval_rhs(x))
        .collect::<Result<Vec<_>>>()?;
    Ok(Trajectory { dt, states, derivs })
}

/// Sampled state/derivative pairs with their provenance.
#[derive(Debug, Clone)]
pub struct TrajectoryDataset<T: Scalar> {
    pub trajectories: Vec<Trajectory<T>>,
    pub system: VectorFieldSpec<T>,
    pub box_: DomainBox<T>,
}

impl<T: Scalar> TrajectoryDataset<T> {
    /// Total number of (x, ẋ) pairs.
    pub fn n_pairs(&self) -> usize {
        self.trajectories.iter().map(|t| t.len()).sum()
    }

    /// Drop trailing pairs so that exactly `n` remain.
    pub fn truncate_pairs(&mut self, n: usize) {
        let mut kept = 0;
        self.trajectories.retain_mut(|traj| {
            if kept >= n {
                return false;
            }
            let take = (n - kept).min(traj.len());
            traj.states.truncate(take);
            traj.derivs.truncate(take);
            kept += take;
            true
        });
    }

    /// All pairs flattened into `d × N` state and derivative matrices.
    pub fn to_matrices(&self) -> (DMatrix<T>, DMatrix<T>) {
        let d = self.system.dim;
        let n = self.n_pairs();
        let mut xs = DMatrix::zeros(d, n);
        let mut xdots = DMatrix::zeros(d, n);
        let mut col = 0;
        for traj in &self.trajectories {
            for (x, xd) in traj.states.iter().zip(traj.derivs.iter()) {
                xs.set_column(col, x);
                xdots.set_column(col, xd);
                col += 1;
            }
        }
        (xs, xdots)
    }
}

/// Integrate one trajectory per start point.
pub fn generate_dataset<T: Scalar>(
    system: &VectorFieldSpec<T>,
    box_: &DomainBox<T>,
    starts: &[DVector<T>],
    dt: T,
    steps: usize,
) -> Result<TrajectoryDataset<T>> {
    let trajectories = starts
        .par_iter()
        .map(|x0| integrate(system, x0, dt, steps))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrajectoryDataset {
        trajectories,
        system: system.clone(),
        box_: box_.clone(),
    })
}

/// The closed-form conjugacy for the slow-manifold system:
/// `d(x) = [x₁, x₂ − λ/(λ−2μ) x₁²]`. Test oracle only.
pub fn exact_diffeo_ex1<T: Scalar>(x: &DVector<T>, mu: T, lambda: T) -> Result<DVector<T>> {
    if lambda == cast::<T>(2.0) * mu {
        return Err(Error::Resonance);
    }
    let kappa = lambda / (lambda - cast::<T>(2.0) * mu);
    Ok(DVector::from_vec(vec![x[0], x[1] - kappa * x[0] * x[0]]))
}

/// The closed-form slow-manifold diffeomorphism with its analytic Jacobian
/// and inverse.
#[derive(Debug, Clone)]
pub struct ExactDiffeoEx1<T: Scalar> {
    mu: T,
    lambda: T,
    kappa: T,
}

impl<T: Scalar> ExactDiffeoEx1<T> {
    pub fn new(mu: T, lambda: T) -> Result<Self> {
        if lambda == cast::<T>(2.0) * mu {
            return Err(Error::Resonance);
        }
        Ok(Self {
            mu,
            lambda,
            kappa: lambda / (lambda - cast::<T>(2.0) * mu),
        })
    }

    pub fn params(&self) -> (T, T) {
        (self.mu, self.lambda)
    }

    pub fn inverse(&self, y: &DVector<T>) -> DVector<T> {
        DVector::from_vec(vec![y[0], y[1] + self.kappa * y[0] * y[0]])
    }
}

impl<T: Scalar> Diffeomorphism<T> for ExactDiffeoEx1<T> {
    fn dim(&self) -> usize {
        2
    }

    fn forward(&self, x: &DVector<T>) -> DVector<T> {
        DVector::from_vec(vec![x[0], x[1] - self.kappa * x[0] * x[0]])
    }

    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        DMatrix::from_row_slice(2, 2, &[
            T::one(),
            T::zero(),
            -cast::<T>(2.0) * self.kappa * x[0],
            T::one(),
        ])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    #[test]
    fn rhs_matches_hand_evaluation() {
        let ex1 = VectorFieldSpec::ex1(-0.7, -0.3);
        assert_eq!(ex1.eval_rhs(&v2(0.0, 0.0)).unwrap(), v2(0.0, 0.0));
        let r = ex1.eval_rhs(&v2(2.0, 1.0)).unwrap();
        assert_relative_eq!(r[0], -1.4, max_relative = 1e-15);
        assert_relative_eq!(r[1], 0.9, max_relative = 1e-15);

        let ex3 = VectorFieldSpec::ex3(-1.3, -2.0, 1.5);
        let r = ex3.eval_rhs(&v2(1.0, 0.0)).unwrap();
        assert_eq!(r, v2(-1.3, 0.0));
    }

    #[test]
    fn origin_is_fixed_point_for_all_registered_systems() {
        let systems = vec![
            VectorFieldSpec::ex1(-0.7, -0.3),
            VectorFieldSpec::ex3(-1.3, -2.0, 1.5),
            VectorFieldSpec::linear_diag(&[-1.0, -2.0, -0.5]),
        ];
        for sys in systems {
            let zero = DVector::zeros(sys.dim);
            assert_eq!(sys.eval_rhs(&zero).unwrap(), zero, "system {}", sys.name);
        }
    }

    #[test]
    fn unknown_system_is_a_configuration_error() {
        let err = VectorFieldSpec::<f64>::new("duffing", BTreeMap::new()).unwrap_err();
        assert!(matches!(err, Error::UnknownSystem(_)));
    }

    #[test]
    fn linearization_matches_block_form() {
        let a = VectorFieldSpec::ex1(-0.7, -0.3)
            .jacobian_linearization()
            .unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[-0.7, 0.0, 0.0, -0.3]));

        let a = VectorFieldSpec::ex3(-1.3, -2.0, 1.5)
            .jacobian_linearization()
            .unwrap();
        assert_eq!(a, DMatrix::from_row_slice(2, 2, &[-1.3, 0.0, 0.0, -2.0]));
    }

    #[test]
    fn non_hurwitz_linearization_is_rejected() {
        let err = VectorFieldSpec::linear_diag(&[1.0, -1.0])
            .jacobian_linearization()
            .unwrap_err();
        assert!(matches!(err, Error::StabilityViolation { .. }));
    }

    #[test]
    fn fixed_point_stays_fixed_under_integration() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let traj = integrate(&sys, &v2(0.0, 0.0), 0.065, 50).unwrap();
        for x in &traj.states {
            assert_eq!(*x, v2(0.0, 0.0));
        }
    }

    #[test]
    fn integrator_matches_closed_form_linear_decay() {
        // ẋ = −x in each coordinate: x(t) = e^{−t} x(0). One RK4 step at
        // dt = 0.1 multiplies by the degree-4 Taylor polynomial of e^{−dt},
        // which is off by 8.2e-8; compounded over ten steps the terminal
        // error is ≈3.3e-7.
        let sys = VectorFieldSpec::linear_diag(&[-1.0, -1.0]);
        let traj = integrate(&sys, &v2(1.0, 1.0), 0.1, 10).unwrap();
        let expect = (-1.0f64).exp();
        for k in 0..2 {
            let err = (traj.states[10][k] - expect).abs();
            assert!(err < 5e-7, "error {err:.3e} above RK4 truncation bound");
        }
    }

    #[test]
    fn integrator_matches_fine_step_reference() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let coarse = integrate(&sys, &v2(2.0, 1.0), 0.065, 100).unwrap();
        // Reference: the same dynamics at dt = 1e-4 over the same horizon.
        let fine = integrate(&sys, &v2(2.0, 1.0), 1e-4, 65_000).unwrap();
        let terminal = &coarse.states[100];
        let reference = &fine.states[65_000];
        for k in 0..2 {
            assert!(
                (terminal[k] - reference[k]).abs() <= 1e-6,
                "component {k}: {} vs {}",
                terminal[k],
                reference[k]
            );
        }
    }

    #[test]
    fn integrator_is_fourth_order() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let reference = integrate(&sys, &v2(2.0, 1.0), 1e-4, 13_000).unwrap();
        let x_ref = reference.states.last().unwrap().clone();

        let err_at = |dt: f64, steps: usize| -> f64 {
            let traj = integrate(&sys, &v2(2.0, 1.0), dt, steps).unwrap();
            (traj.states.last().unwrap() - &x_ref).norm()
        };
        let e1 = err_at(0.13, 10);
        let e2 = err_at(0.065, 20);
        assert!(
            e1 / e2 >= 8.0,
            "halving dt should cut the error ≥8×, got {e1:.3e} / {e2:.3e}"
        );
    }

    #[test]
    fn derivatives_are_analytic_not_differenced() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let traj = integrate(&sys, &v2(3.0, -4.0), 0.065, 20).unwrap();
        for (x, xd) in traj.states.iter().zip(traj.derivs.iter()) {
            assert_eq!(*xd, sys.eval_rhs(x).unwrap());
        }
    }

    #[test]
    fn boundary_starts_land_on_faces_and_are_seed_deterministic() {
        let box_ = DomainBox::centered(5.0f64, 2);
        let pts = boundary_starts(&box_, 24, 7);
        assert_eq!(pts.len(), 24);
        for p in &pts {
            assert!(
                (p[0].abs() - 5.0).abs() < 1e-15 || (p[1].abs() - 5.0).abs() < 1e-15,
                "point {p:?} not on a face"
            );
            assert!(p.iter().all(|v| v.abs() <= 5.0 + 1e-15));
        }
        let again = boundary_starts(&box_, 24, 7);
        assert_eq!(pts, again);
        let other_box = DomainBox::centered(5.5f64, 2);
        assert_eq!(boundary_starts(&other_box, 56, 3).len(), 56);
    }

    #[test]
    fn grid_starts_counts_and_midpoint() {
        let box_ = DomainBox::centered(5.0f64, 2);
        assert_eq!(grid_starts(&box_, 10).len(), 100);

        let box1 = DomainBox::new(DVector::from_vec(vec![0.0]), DVector::from_vec(vec![1.0]))
            .unwrap();
        let g = grid_starts(&box1, 2);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0][0], 0.0);
        assert_eq!(g[1][0], 1.0);

        let box_ = DomainBox::centered(1.0f64, 2);
        let g = grid_starts(&box_, 3);
        assert_eq!(g.len(), 9);
        assert!(g.iter().any(|p| p[0] == 0.0 && p[1] == 0.0));
    }

    #[test]
    fn dataset_pair_counts_match_protocol() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0f64, 2);
        let starts = boundary_starts(&box_, 24, 11);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 199).unwrap();
        assert_eq!(ds.n_pairs(), 4800);

        let sys3 = VectorFieldSpec::ex3(-1.3, -2.0, 1.5);
        let box3 = DomainBox::centered(5.5f64, 2);
        let starts3 = boundary_starts(&box3, 56, 11);
        let ds3 = generate_dataset(&sys3, &box3, &starts3, 0.015, 199).unwrap();
        assert_eq!(ds3.n_pairs(), 11_200);
    }

    #[test]
    fn dataset_from_origin_is_all_zero_pairs() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0f64, 2);
        let starts = vec![v2(0.0, 0.0)];
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 9).unwrap();
        assert_eq!(ds.n_pairs(), 10);
        for traj in &ds.trajectories {
            for (x, xd) in traj.states.iter().zip(traj.derivs.iter()) {
                assert_eq!(*x, v2(0.0, 0.0));
                assert_eq!(*xd, v2(0.0, 0.0));
            }
        }
    }

    #[test]
    fn truncation_hits_requested_pair_count() {
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0f64, 2);
        let starts = boundary_starts(&box_, 5, 2);
        let mut ds = generate_dataset(&sys, &box_, &starts, 0.065, 9).unwrap();
        assert_eq!(ds.n_pairs(), 50);
        ds.truncate_pairs(33);
        assert_eq!(ds.n_pairs(), 33);
        assert_eq!(ds.trajectories.len(), 4);
    }

    #[test]
    fn states_stay_within_inflated_box() {
        // Trajectories may overshoot the sampling box transiently (for ex1 the
        // x₂ coordinate chases x₁² before decaying) but stay under a fixed
        // inflation of it.
        let sys = VectorFieldSpec::ex1(-0.7, -0.3);
        let box_ = DomainBox::centered(5.0f64, 2);
        let starts = boundary_starts(&box_, 24, 11);
        let ds = generate_dataset(&sys, &box_, &starts, 0.065, 199).unwrap();
        for traj in &ds.trajectories {
            for x in &traj.states {
                assert!(box_.contains_with_margin(x, 1.5), "state {x:?} escaped");
            }
        }
    }

    #[test]
    fn trajectories_decay_after_transient() {
        for (sys, box_, dt) in [
            (VectorFieldSpec::ex1(-0.7, -0.3), DomainBox::centered(5.0f64, 2), 0.065),
            (VectorFieldSpec::ex3(-1.3, -2.0, 1.5), DomainBox::centered(5.5f64, 2), 0.015),
        ] {
            let starts = boundary_starts(&box_, 8, 5);
            for x0 in &starts {
                let traj = integrate(&sys, x0, dt, 400).unwrap();
                let norms: Vec<f64> = traj.states.iter().map(|x| x.norm()).collect();
                // The transient may contain several growth windows (for ex3
                // the x₁ rate oscillates with sin²x₂); it must end well
                // before the horizon, with monotone decay afterwards.
                let last_increase = norms
                    .windows(2)
                    .enumerate()
                    .filter(|(_, w)| w[1] > w[0] * (1.0 + 1e-9))
                    .map(|(k, _)| k + 1)
                    .next_back()
                    .unwrap_or(0);
                assert!(
                    last_increase < norms.len() * 3 / 4,
                    "transient did not settle: last increase at {last_increase}/{}",
                    norms.len()
                );
                assert!(
                    norms.last().unwrap() < &norms[0],
                    "terminal norm not below initial"
                );
            }
        }
    }

    #[test]
    fn exact_diffeo_hand_values() {
        let x = v2(2.0, 1.0);
        let y = exact_diffeo_ex1(&x, -0.7, -0.3).unwrap();
        assert_eq!(y[0], 2.0);
        assert_relative_eq!(y[1], 1.0 + 12.0 / 11.0, max_relative = 1e-15);

        assert_eq!(exact_diffeo_ex1(&v2(0.0, 0.0), -0.7, -0.3).unwrap(), v2(0.0, 0.0));
        let y = exact_diffeo_ex1(&v2(0.0, 3.5), -0.7, -0.3).unwrap();
        assert_eq!(y, v2(0.0, 3.5));

        let err = exact_diffeo_ex1(&x, -0.5, -1.0).unwrap_err();
        assert!(matches!(err, Error::Resonance));
    }

    #[test]
    fn exact_diffeo_satisfies_conjugacy_pde() {
        // J_d(x) f(x) − A d(x) = 0 pointwise for the closed-form map.
        let (mu, lambda) = (-0.7, -0.3);
        let sys = VectorFieldSpec::ex1(mu, lambda);
        let a = sys.jacobian_linearization().unwrap();
        let d = ExactDiffeoEx1::new(mu, lambda).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let x = v2(rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0);
            let res = d.jacobian(&x) * sys.eval_rhs(&x).unwrap() - &a * d.forward(&x);
            assert!(res.norm() <= 1e-12, "residual {} at {x:?}", res.norm());
        }
    }

    #[test]
    fn exact_diffeo_inverse_round_trips() {
        let d = ExactDiffeoEx1::new(-0.7, -0.3).unwrap();
        let x = v2(1.7, -2.4);
        let y = d.forward(&x);
        let back = d.inverse(&y);
        assert_relative_eq!(back[0], x[0], max_relative = 1e-15);
        assert_relative_eq!(back[1], x[1], max_relative = 1e-15);
    }
}
