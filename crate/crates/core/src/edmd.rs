//! Generator-EDMD baselines: least-squares fit of a finite Koopman-generator
//! matrix on a fixed dictionary from (x, ẋ) pairs, with matrix-exponential
//! multi-step prediction.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// A differentiable function dictionary with analytic gradients.
#[derive(Debug, Clone, PartialEq)]
pub enum Dictionary<T: Scalar> {
    /// All monomials `x^m` of total degree ≤ `max_degree` (constant
    /// included), in graded lexicographic order.
    Monomial { dim: usize, max_degree: usize },
    /// Gaussian bumps `exp(−γ‖x−cᵢ‖²)` plus the constant and the linear
    /// coordinates.
    Rbf { centers: Vec<DVector<T>>, gamma: T },
}

/// Multi-indices of total degree ≤ `max_degree` in graded lex order:
/// degree-0 first, within a degree the leading coordinate dominates.
fn graded_monomial_indices(dim: usize, max_degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for degree in 0..=max_degree {
        // enumerate compositions of `degree` into `dim` parts, lex descending
        fn rec(dim: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if cur.len() == dim - 1 {
                let mut m = cur.clone();
                m.push(left);
                out.push(m);
                return;
            }
            for v in (0..=left).rev() {
                cur.push(v);
                rec(dim, left - v, cur, out);
                cur.pop();
            }
        }
        rec(dim, degree, &mut Vec::new(), &mut out);
    }
    out
}

impl<T: Scalar> Dictionary<T> {
    pub fn monomial(dim: usize, max_degree: usize) -> Self {
        Dictionary::Monomial { dim, max_degree }
    }

    /// RBF dictionary with centers subsampled from the training states
    /// (seeded, without replacement) and width from the median pairwise
    /// center distance.
    pub fn rbf_from_data(xs: &DMatrix<T>, n_centers: usize, seed: u64) -> Result<Self> {
        let n = xs.ncols();
        if n_centers == 0 || n_centers > n {
            return Err(Error::Config(format!(
                "need 1 ≤ centers ≤ data points, got {n_centers} of {n}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let mut chosen: Vec<usize> = idx.into_iter().take(n_centers).collect();
        chosen.sort_unstable();
        let centers: Vec<DVector<T>> = chosen
            .iter()
            .map(|&i| xs.column(i).into_owned())
            .collect();

        let mut dists: Vec<f64> = Vec::with_capacity(n_centers * (n_centers - 1) / 2);
        for i in 0..n_centers {
            for j in (i + 1)..n_centers {
                dists.push((&centers[i] - &centers[j]).norm().to_f64().unwrap());
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = if dists.is_empty() {
            1.0
        } else if dists.len() % 2 == 1 {
            dists[dists.len() / 2]
        } else {
            0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
        };
        let gamma = if median > 0.0 { 1.0 / (2.0 * median * median) } else { 1.0 };
        Ok(Dictionary::Rbf {
            centers,
            gamma: cast(gamma),
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            Dictionary::Monomial { dim, .. } => *dim,
            Dictionary::Rbf { centers, .. } => centers[0].len(),
        }
    }

    /// Number of dictionary functions `D_ψ`.
    pub fn size(&self) -> usize {
        match self {
            Dictionary::Monomial { dim, max_degree } => {
                graded_monomial_indices(*dim, *max_degree).len()
            }
            Dictionary::Rbf { centers, .. } => 1 + self.dim() + centers.len(),
        }
    }

    /// Evaluate all dictionary functions at `x`.
    pub fn eval(&self, x: &DVector<T>) -> DVector<T> {
        match self {
            Dictionary::Monomial { dim, max_degree } => {
                let indices = graded_monomial_indices(*dim, *max_degree);
                DVector::from_iterator(
                    indices.len(),
                    indices.iter().map(|m| {
                        let mut prod = T::one();
                        for (j, &p) in m.iter().enumerate() {
                            prod *= x[j].powi(p as i32);
                        }
                        prod
                    }),
                )
            }
            Dictionary::Rbf { centers, gamma } => {
                let d = self.dim();
                let mut out = DVector::zeros(self.size());
                out[0] = T::one();
                for j in 0..d {
                    out[1 + j] = x[j];
                }
                for (i, c) in centers.iter().enumerate() {
                    out[1 + d + i] = (-(*gamma) * (x - c).norm_squared()).exp();
                }
                out
            }
        }
    }

    /// Analytic gradient, `size() × dim`.
    pub fn grad(&self, x: &DVector<T>) -> DMatrix<T> {
        match self {
            Dictionary::Monomial { dim, max_degree } => {
                let indices = graded_monomial_indices(*dim, *max_degree);
                let mut g = DMatrix::zeros(indices.len(), *dim);
                for (r, m) in indices.iter().enumerate() {
                    for k in 0..*dim {
                        if m[k] == 0 {
                            continue;
                        }
                        let mut prod = cast::<T>(m[k] as f64);
                        for (j, &p) in m.iter().enumerate() {
                            let pw = if j == k { p - 1 } else { p };
                            prod *= x[j].powi(pw as i32);
                        }
                        g[(r, k)] = prod;
                    }
                }
                g
            }
            Dictionary::Rbf { centers, gamma } => {
                let d = self.dim();
                let mut g = DMatrix::zeros(self.size(), d);
                for j in 0..d {
                    g[(1 + j, j)] = T::one();
                }
                for (i, c) in centers.iter().enumerate() {
                    let diff = x - c;
                    let val = (-(*gamma) * diff.norm_squared()).exp();
                    for j in 0..d {
                        g[(1 + d + i, j)] = -cast::<T>(2.0) * *gamma * diff[j] * val;
                    }
                }
                g
            }
        }
    }
}

/// Fit diagnostics for the generator regression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdmdDiagnostics<T: Scalar> {
    pub effective_rank: usize,
    pub rank_deficient: bool,
    /// max Re λ(L): positive entries mean the fitted generator can diverge.
    pub spectral_abscissa: T,
    pub reconstruction_rmse: T,
}

/// A fitted continuous-time EDMD model `ψ̇ ≈ L ψ`, `x ≈ C ψ`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorEDMDModel<T: Scalar> {
    pub l: DMatrix<T>,
    pub c: DMatrix<T>,
    pub dict: Dictionary<T>,
}

/// Least-squares fit of the generator matrix and the reconstruction.
///
/// `ridge` is an absolute Tikhonov shift on the (sample-mean) Gram matrix;
/// its inverse goes through a symmetric eigendecomposition with a relative
/// cutoff, so rank deficiency degrades gracefully and is reported.
pub fn fit_generator_edmd<T: Scalar>(
    dataset: &TrajectoryDataset<T>,
    dict: &Dictionary<T>,
    ridge: T,
) -> Result<(GeneratorEDMDModel<T>, EdmdDiagnostics<T>)> {
    let (xs, xdots) = dataset.to_matrices();
    let n = xs.ncols();
    if n == 0 {
        return Err(Error::Config("EDMD fit needs a nonempty dataset".into()));
    }
    let dpsi = dict.size();
    let d = xs.nrows();

    let cols: Vec<(DVector<T>, DVector<T>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let x = xs.column(i).into_owned();
            let psi = dict.eval(&x);
            let psi_dot = dict.grad(&x) * xdots.column(i).into_owned();
            (psi, psi_dot)
        })
        .collect();
    let mut psi = DMatrix::zeros(dpsi, n);
    let mut psi_dot = DMatrix::zeros(dpsi, n);
    for (i, (p, pd)) in cols.iter().enumerate() {
        psi.set_column(i, p);
        psi_dot.set_column(i, pd);
    }

    let inv_n = T::one() / cast::<T>(n as f64);
    let gram = (&psi * psi.transpose()) * inv_n;
    let reg = &gram + DMatrix::<T>::identity(dpsi, dpsi) * ridge;

    let eig = reg.symmetric_eigen();
    let max_ev = eig
        .eigenvalues
        .iter()
        .fold(T::zero(), |a, b| a.max(b.abs()));
    let cutoff = max_ev * cast::<T>(1e-13);
    let effective_rank = eig.eigenvalues.iter().filter(|l| l.abs() > cutoff).count();
    // pseudo-solve M (G+reg)⁻¹ through the eigenbasis
    let solve_right = |b: &DMatrix<T>| -> DMatrix<T> {
        let bq = b * &eig.eigenvectors;
        let mut scaled = bq;
        for (j, l) in eig.eigenvalues.iter().enumerate() {
            let inv = if l.abs() > cutoff { T::one() / *l } else { T::zero() };
            scaled.column_mut(j).scale_mut(inv);
        }
        scaled * eig.eigenvectors.transpose()
    };

    let l = solve_right(&((&psi_dot * psi.transpose()) * inv_n));
    let c = solve_right(&((&xs * psi.transpose()) * inv_n));

    let abscissa = l
        .complex_eigenvalues()
        .iter()
        .map(|e| e.re)
        .fold(cast::<T>(f64::NEG_INFINITY), |a, b| a.max(b));
    let reconstruction_rmse =
        ((&xs - &c * &psi).norm_squared() * inv_n).sqrt();

    Ok((
        GeneratorEDMDModel {
            l,
            c,
            dict: dict.clone(),
        },
        EdmdDiagnostics {
            effective_rank,
            rank_deficient: effective_rank < d,
            spectral_abscissa: abscissa,
            reconstruction_rmse,
        },
    ))
}

impl<T: Scalar> GeneratorEDMDModel<T> {
    /// Predict `k_steps + 1` states: `x̂_k = C·expm(L·dt)^k·ψ(x₀)`, with the
    /// matrix exponential computed once and powered.
    pub fn predict_trajectory(&self, x0: &DVector<T>, dt: T, k_steps: usize) -> Vec<DVector<T>> {
        let e = (&self.l * dt).exp();
        let mut psi = self.dict.eval(x0);
        let mut out = Vec::with_capacity(k_steps + 1);
        out.push(&self.c * &psi);
        for _ in 0..k_steps {
            psi = &e * psi;
            out.push(&self.c * &psi);
        }
        out
    }
}
