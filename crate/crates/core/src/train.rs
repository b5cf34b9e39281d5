//! Trains a coupling flow toward the conjugacy PDE of the Jacobian
//! linearization: the learned map must push data-pair derivatives onto the
//! linear field, fix the origin, and have unit Jacobian there.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::diffeo::Diffeomorphism;
use crate::dynamics::TrajectoryDataset;
use crate::error::{Error, Result};
use crate::flow::{FlowGrads, FlowModel};
use crate::net::{adam_step, AdamParams, AdamState};
use crate::{cast, Scalar};

/// Fixed shard width for parallel gradient accumulation. Shards are summed
/// in index order, so results do not depend on the thread count.
const GRAD_CHUNK: usize = 32;

/// Which algebraic form of the conjugacy residual to minimize.
///
/// Both share the zero set `J_d(x) ẋ = A d(x)`; the premultiplied form avoids
/// a per-sample matrix inversion and its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResidualForm {
    /// `‖ẋ − J_d(x)⁻¹ A d(x)‖²`
    InverseJacobian,
    /// `‖J_d(x) ẋ − A d(x)‖²`
    Premultiplied,
}

/// Relative weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights<T: Scalar> {
    pub conjugacy: T,
    pub jacobian_origin: T,
    pub origin: T,
}

impl<T: Scalar> Default for LossWeights<T> {
    fn default() -> Self {
        Self {
            conjugacy: T::one(),
            jacobian_origin: T::one(),
            origin: T::one(),
        }
    }
}

/// Stop when the running-best total loss improves by less than `rel_tol`
/// over `window` consecutive epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EarlyStop {
    pub window: usize,
    pub rel_tol: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            window: 20,
            rel_tol: 1e-5,
        }
    }
}

/// Training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T: Scalar> {
    pub batch_size: usize,
    pub epochs: usize,
    pub adam: AdamParams<T>,
    pub seed: u64,
    pub residual_form: ResidualForm,
    pub loss_weights: LossWeights<T>,
    pub early_stop: Option<EarlyStop>,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 200,
            adam: AdamParams::default(),
            seed: 0,
            residual_form: ResidualForm::Premultiplied,
            loss_weights: LossWeights::default(),
            early_stop: None,
        }
    }
}

/// The three loss terms at one data pair, plus their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    pub conjugacy: T,
    pub jacobian_at_origin: T,
    pub origin_fixed: T,
    pub total: T,
}

/// Per-epoch mean losses (raw terms; `total` applies the configured weights).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats<T: Scalar> {
    pub epoch: usize,
    pub conjugacy: T,
    pub jac0: T,
    pub orig0: T,
    pub total: T,
}

/// Evaluate the loss terms of any differentiable map at one data pair.
pub fn loss_terms<T: Scalar>(
    diffeo: &dyn Diffeomorphism<T>,
    a: &DMatrix<T>,
    x: &DVector<T>,
    xdot: &DVector<T>,
    form: ResidualForm,
    weights: &LossWeights<T>,
) -> Result<LossBreakdown<T>> {
    let d = diffeo.dim();
    let y = diffeo.forward(x);
    let jac = diffeo.jacobian(x);
    let ay = a * &y;
    let conjugacy = match form {
        ResidualForm::Premultiplied => (&jac * xdot - &ay).norm_squared(),
        ResidualForm::InverseJacobian => {
            let w = jac.clone().lu().solve(&ay).ok_or_else(|| {
                Error::NumericalFailure("Jacobian singular to machine precision".into())
            })?;
            (xdot - w).norm_squared()
        }
    };
    let zero = DVector::zeros(d);
    let j0 = diffeo.jacobian(&zero);
    let jacobian_at_origin = (&j0 - DMatrix::<T>::identity(d, d)).norm_squared();
    let origin_fixed = diffeo.forward(&zero).norm_squared();
    let total = weights.conjugacy * conjugacy
        + weights.jacobian_origin * jacobian_at_origin
        + weights.origin * origin_fixed;
    Ok(LossBreakdown {
        conjugacy,
        jacobian_at_origin,
        origin_fixed,
        total,
    })
}

/// Loss and gradient of one mini-batch (data residual averaged over the
/// batch; origin terms evaluated once per batch).
///
/// Returns `(conjugacy_mean, jac0, orig0)` and accumulates the weighted
/// gradient into `grad_flat`.
pub(crate) fn batch_loss_and_grads<T: Scalar>(
    flow: &FlowModel<T>,
    a: &DMatrix<T>,
    xs: &DMatrix<T>,
    xdots: &DMatrix<T>,
    form: ResidualForm,
    weights: &LossWeights<T>,
    grad_flat: &mut DVector<T>,
) -> Result<(T, T, T)> {
    let d = flow.dim();
    let b = xs.ncols();
    let n_params = flow.param_count();
    let inv_b = T::one() / cast::<T>(b as f64);

    // Data term, sharded deterministically.
    let chunk_results: Vec<Result<(T, DVector<T>)>> = (0..b.div_ceil(GRAD_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * GRAD_CHUNK;
            let hi = (lo + GRAD_CHUNK).min(b);
            let cols = hi - lo;
            let x = xs.columns(lo, cols).into_owned();
            let v = xdots.columns(lo, cols).into_owned();
            let mut grads = FlowGrads::zeros_like(flow);
            let mut loss = T::zero();
            match form {
                ResidualForm::Premultiplied => {
                    let trace = flow.forward_dual(&x, &v);
                    // r = J ẋ − A y per column
                    let r = trace.output_tangents() - a * trace.output_values();
                    loss = r.iter().map(|e| *e * *e).fold(T::zero(), |s, e| s + e);
                    let scale = cast::<T>(2.0) * weights.conjugacy * inv_b;
                    let g_tan = &r * scale;
                    let g_val = -(a.transpose() * &r) * scale;
                    flow.backward_dual(&trace, &g_val, &g_tan, &mut grads);
                }
                ResidualForm::InverseJacobian => {
                    for s in 0..cols {
                        let xcol = x.column(s).into_owned();
                        let xdot = v.column(s).into_owned();
                        let values = DMatrix::from_fn(d, d, |r_, _| xcol[r_]);
                        let trace = flow.forward_dual(&values, &DMatrix::identity(d, d));
                        let jac = trace.output_tangents().clone();
                        let y = trace.output_values().column(0).into_owned();
                        let ay = a * &y;
                        let lu = jac.clone().lu();
                        let w = lu.solve(&ay).ok_or_else(|| {
                            Error::NumericalFailure(
                                "Jacobian singular to machine precision".into(),
                            )
                        })?;
                        let r = &xdot - &w;
                        loss += r.norm_squared();
                        let scale = weights.conjugacy * inv_b;
                        let q = jac
                            .transpose()
                            .lu()
                            .solve(&(&r * cast::<T>(2.0)))
                            .ok_or_else(|| {
                                Error::NumericalFailure(
                                    "Jacobian singular to machine precision".into(),
                                )
                            })?;
                        // dL = qᵀ dJ w − qᵀ A dy
                        let g_tan = &q * w.transpose() * scale;
                        let mut g_val = DMatrix::zeros(d, d);
                        g_val.set_column(0, &(-(a.transpose() * &q) * scale));
                        flow.backward_dual(&trace, &g_val, &g_tan, &mut grads);
                    }
                }
            }
            if !loss.is_finite() {
                return Err(Error::NumericalFailure("non-finite data loss".into()));
            }
            Ok((loss, grads.params_flat(n_params)))
        })
        .collect();

    let mut conj_sum = T::zero();
    for res in chunk_results {
        let (loss, g) = res?;
        conj_sum += loss;
        *grad_flat += g;
    }

    // Origin terms once per batch: columns are the d unit tangents at 0.
    let zeros = DMatrix::zeros(d, d);
    let eye = DMatrix::identity(d, d);
    let trace = flow.forward_dual(&zeros, &eye);
    let j0_minus_i = trace.output_tangents() - &eye;
    let jac0 = j0_minus_i.norm_squared();
    let y0 = trace.output_values().column(0).into_owned();
    let orig0 = y0.norm_squared();
    let mut grads = FlowGrads::zeros_like(flow);
    let g_tan = &j0_minus_i * (cast::<T>(2.0) * weights.jacobian_origin);
    let mut g_val = DMatrix::zeros(d, d);
    g_val.set_column(0, &(&y0 * (cast::<T>(2.0) * weights.origin)));
    flow.backward_dual(&trace, &g_val, &g_tan, &mut grads);
    *grad_flat += grads.params_flat(n_params);

    Ok((conj_sum * inv_b, jac0, orig0))
}

/// Train `flow` against the linearization `a` on `dataset`.
///
/// Mini-batches are a seeded full permutation per epoch; updates are Adam.
/// `observer` sees the flow and stats after every epoch.
pub fn train_observed<T: Scalar>(
    mut flow: FlowModel<T>,
    dataset: &TrajectoryDataset<T>,
    a: &DMatrix<T>,
    config: &TrainConfig<T>,
    mut observer: impl FnMut(usize, &FlowModel<T>, &EpochStats<T>),
) -> Result<(FlowModel<T>, Vec<EpochStats<T>>)> {
    if dataset.n_pairs() == 0 {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be ≥ 1".into()));
    }
    for eig in a.complex_eigenvalues().iter() {
        if eig.re >= T::zero() {
            return Err(Error::StabilityViolation {
                re: eig.re.to_f64().unwrap_or(f64::NAN),
            });
        }
    }
    let (xs, xdots) = dataset.to_matrices();
    let n = xs.ncols();
    let d = flow.dim();
    if xs.nrows() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: xs.nrows(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = flow.params_flat();
    let mut adam = AdamState::new(params.len());
    let mut history = Vec::with_capacity(config.epochs);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_at: Vec<f64> = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        perm.shuffle(&mut rng);
        let mut conj_weighted = T::zero();
        let mut jac0_sum = T::zero();
        let mut orig0_sum = T::zero();
        let mut n_batches = 0usize;
        for (bi, batch) in perm.chunks(config.batch_size).enumerate() {
            let bx = DMatrix::from_fn(d, batch.len(), |r, c| xs[(r, batch[c])]);
            let bv = DMatrix::from_fn(d, batch.len(), |r, c| xdots[(r, batch[c])]);
            let mut grad = DVector::zeros(params.len());
            let (conj, jac0, orig0) = batch_loss_and_grads(
                &flow,
                a,
                &bx,
                &bv,
                config.residual_form,
                &config.loss_weights,
                &mut grad,
            )
            .map_err(|e| {
                Error::NumericalFailure(format!("epoch {epoch}, batch {bi}: {e}"))
            })?;
            let batch_total = config.loss_weights.conjugacy * conj
                + config.loss_weights.jacobian_origin * jac0
                + config.loss_weights.origin * orig0;
            if !batch_total.is_finite() {
                return Err(Error::NumericalFailure(format!(
                    "non-finite loss at epoch {epoch}, batch {bi}"
                )));
            }
            conj_weighted += conj * cast::<T>(batch.len() as f64);
            jac0_sum += jac0;
            orig0_sum += orig0;
            n_batches += 1;
            adam_step(&mut params, &grad, &mut adam, &config.adam);
            flow.read_params(params.as_slice());
        }
        let stats = EpochStats {
            epoch,
            conjugacy: conj_weighted / cast::<T>(n as f64),
            jac0: jac0_sum / cast::<T>(n_batches as f64),
            orig0: orig0_sum / cast::<T>(n_batches as f64),
            total: (conj_weighted / cast::<T>(n as f64)) * config.loss_weights.conjugacy
                + (jac0_sum / cast::<T>(n_batches as f64)) * config.loss_weights.jacobian_origin
                + (orig0_sum / cast::<T>(n_batches as f64)) * config.loss_weights.origin,
        };
        observer(epoch, &flow, &stats);
        history.push(stats);

        let total_f64 = stats.total.to_f64().unwrap_or(f64::INFINITY);
        let best = best_at.last().copied().unwrap_or(f64::INFINITY).min(total_f64);
        best_at.push(best);
        if let Some(es) = &config.early_stop {
            if best_at.len() > es.window {
                let then = best_at[best_at.len() - 1 - es.window];
                if then - best < es.rel_tol * then.abs().max(f64::MIN_POSITIVE) {
                    break;
                }
            }
        }
    }
    Ok((flow, history))
}

/// [`train_observed`] without an observer.
pub fn train<T: Scalar>(
    flow: FlowModel<T>,
    dataset: &TrajectoryDataset<T>,
    a: &DMatrix<T>,
    config: &TrainConfig<T>,
) -> Result<(FlowModel<T>, Vec<EpochStats<T>>)> {
    train_observed(flow, dataset, a, config, |_, _, _| {})
}
