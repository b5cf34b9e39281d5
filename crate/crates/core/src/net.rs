//! Dense feed-forward networks with the differentiation surface the
//! conjugacy loss needs: exact input-Jacobians, and parameter gradients of
//! losses that read both network values and input-Jacobian entries.
//!
//! Differentiation is by analytic layer-wise rules. A forward pass carries a
//! tangent column alongside every value column (forward mode); reverse
//! accumulation then backpropagates adjoints of both streams, which yields
//! the mixed ∂²net/∂x∂w terms without any external autodiff.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::{cast, Scalar};

/// Hidden-layer activation; the output layer is always identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// Exponential linear unit with α = 1; C¹ everywhere.
    Elu,
    /// No nonlinearity (linear network).
    Identity,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "elu" => Ok(Activation::Elu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }

    #[inline]
    fn value<T: Scalar>(&self, a: T) -> T {
        match self {
            Activation::Elu => {
                if a > T::zero() {
                    a
                } else {
                    a.exp_m1()
                }
            }
            Activation::Identity => a,
        }
    }

    #[inline]
    fn deriv<T: Scalar>(&self, a: T) -> T {
        match self {
            Activation::Elu => {
                if a > T::zero() {
                    T::one()
                } else {
                    a.exp()
                }
            }
            Activation::Identity => T::one(),
        }
    }

    #[inline]
    fn second_deriv<T: Scalar>(&self, a: T) -> T {
        match self {
            Activation::Elu => {
                if a > T::zero() {
                    T::zero()
                } else {
                    a.exp()
                }
            }
            Activation::Identity => T::zero(),
        }
    }
}

/// A fully connected network `dims[0] → dims[1] → … → dims.last()`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet<T: Scalar> {
    pub layer_dims: Vec<usize>,
    /// `weights[l]` has shape `dims[l+1] × dims[l]`.
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
    pub activation: Activation,
}

impl<T: Scalar> DenseNet<T> {
    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Self {
        assert!(layer_dims.len() >= 2, "need at least input and output dims");
        let weights = layer_dims
            .windows(2)
            .map(|w| DMatrix::zeros(w[1], w[0]))
            .collect();
        let biases = layer_dims[1..]
            .iter()
            .map(|&m| DVector::zeros(m))
            .collect();
        Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        }
    }

    /// He-scaled normal init on all layers except optionally the last, which
    /// can be pinned to zero so the enclosing map starts as the identity.
    pub fn he_init<R: Rng>(
        layer_dims: &[usize],
        activation: Activation,
        zero_final: bool,
        rng: &mut R,
    ) -> Self {
        let mut net = Self::zeros(layer_dims, activation);
        let n_layers = net.weights.len();
        for l in 0..n_layers {
            if zero_final && l == n_layers - 1 {
                break;
            }
            let std = (2.0 / layer_dims[l] as f64).sqrt();
            net.weights[l].apply(|w| {
                let z: f64 = StandardNormal.sample(rng);
                *w = cast(z * std);
            });
        }
        net
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// Plain forward pass for a single input.
    pub fn forward(&self, x: &DVector<T>) -> DVector<T> {
        assert_eq!(x.len(), self.input_dim(), "input dimension mismatch");
        let last = self.weights.len() - 1;
        let mut h = x.clone();
        for l in 0..=last {
            let mut a = &self.weights[l] * &h + &self.biases[l];
            if l < last {
                a.apply(|v| *v = self.activation.value(*v));
            }
            h = a;
        }
        h
    }

    /// Exact Jacobian ∂net/∂x at `x`, one chain-rule tangent per input axis.
    pub fn input_jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let n = self.input_dim();
        let xs = DMatrix::from_fn(n, n, |r, _| x[r]);
        let tangents = DMatrix::identity(n, n);
        let trace = self.forward_dual(&xs, &tangents);
        trace.output_tangents().clone()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(self.biases.iter())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    /// Append all parameters (per layer: weights column-major, then bias).
    pub fn write_params(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
    }

    /// Read parameters back in the `write_params` order; returns the slice tail.
    pub fn read_params<'a>(&mut self, mut data: &'a [T]) -> &'a [T] {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for v in w.iter_mut() {
                *v = data[0];
                data = &data[1..];
            }
            for v in b.iter_mut() {
                *v = data[0];
                data = &data[1..];
            }
        }
        data
    }

    /// Forward pass carrying one tangent column per value column.
    ///
    /// Column `k` of `values` is an input point and column `k` of `tangents`
    /// a direction; the trace holds everything the reverse pass needs.
    pub fn forward_dual(&self, values: &DMatrix<T>, tangents: &DMatrix<T>) -> DualTrace<T> {
        assert_eq!(values.nrows(), self.input_dim());
        assert_eq!(values.shape(), tangents.shape());
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(last + 2);
        let mut act_tangents = Vec::with_capacity(last + 2);
        let mut pre_acts = Vec::with_capacity(last + 1);
        let mut pre_act_tangents = Vec::with_capacity(last + 1);
        acts.push(values.clone());
        act_tangents.push(tangents.clone());
        for l in 0..=last {
            let mut a = &self.weights[l] * &acts[l];
            for mut col in a.column_iter_mut() {
                col += &self.biases[l];
            }
            let adot = &self.weights[l] * &act_tangents[l];
            let (h, hdot) = if l < last {
                let h = a.map(|v| self.activation.value(v));
                let mut hdot = adot.clone();
                hdot.zip_apply(&a, |t, av| *t *= self.activation.deriv(av));
                (h, hdot)
            } else {
                (a.clone(), adot.clone())
            };
            pre_acts.push(a);
            pre_act_tangents.push(adot);
            acts.push(h);
            act_tangents.push(hdot);
        }
        DualTrace {
            acts,
            act_tangents,
            pre_acts,
            pre_act_tangents,
        }
    }

    /// Reverse pass over a dual trace.
    ///
    /// `g_values` / `g_tangents` seed the adjoints of the output value and
    /// tangent streams; parameter gradients accumulate into `grads` and the
    /// adjoints of the input streams are returned.
    pub fn backward_dual(
        &self,
        trace: &DualTrace<T>,
        g_values: &DMatrix<T>,
        g_tangents: &DMatrix<T>,
        grads: &mut NetGrads<T>,
    ) -> (DMatrix<T>, DMatrix<T>) {
        let last = self.weights.len() - 1;
        let mut g_a = g_values.clone();
        let mut g_adot = g_tangents.clone();
        for l in (0..=last).rev() {
            if l < last {
                // through h = σ(a), ḣ = σ'(a) ⊙ ȧ
                let a = &trace.pre_acts[l];
                let adot = &trace.pre_act_tangents[l];
                let mut g_a_new = g_a.clone();
                for ((gv, &av), (&tv, gt)) in g_a_new
                    .iter_mut()
                    .zip(a.iter())
                    .zip(adot.iter().zip(g_adot.iter_mut()))
                {
                    let d1 = self.activation.deriv(av);
                    let d2 = self.activation.second_deriv(av);
                    *gv = *gv * d1 + *gt * d2 * tv;
                    *gt *= d1;
                }
                g_a = g_a_new;
            }
            let h_prev = &trace.acts[l];
            let hdot_prev = &trace.act_tangents[l];
            grads.weights[l].gemm(T::one(), &g_a, &h_prev.transpose(), T::one());
            grads.weights[l].gemm(T::one(), &g_adot, &hdot_prev.transpose(), T::one());
            for col in g_a.column_iter() {
                grads.biases[l] += col;
            }
            if l > 0 {
                g_a = self.weights[l].tr_mul(&g_a);
                g_adot = self.weights[l].tr_mul(&g_adot);
            } else {
                return (
                    self.weights[0].tr_mul(&g_a),
                    self.weights[0].tr_mul(&g_adot),
                );
            }
        }
        unreachable!("loop returns at layer 0");
    }
}

/// Intermediates of a dual forward pass.
#[derive(Debug, Clone)]
pub struct DualTrace<T: Scalar> {
    /// `acts[0]` is the input; `acts[l+1]` the activation after layer `l`.
    acts: Vec<DMatrix<T>>,
    act_tangents: Vec<DMatrix<T>>,
    pre_acts: Vec<DMatrix<T>>,
    pre_act_tangents: Vec<DMatrix<T>>,
}

impl<T: Scalar> DualTrace<T> {
    pub fn output_values(&self) -> &DMatrix<T> {
        self.acts.last().unwrap()
    }

    pub fn output_tangents(&self) -> &DMatrix<T> {
        self.act_tangents.last().unwrap()
    }
}

/// Gradient buffer shaped like a [`DenseNet`]'s parameters.
#[derive(Debug, Clone)]
pub struct NetGrads<T: Scalar> {
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
}

impl<T: Scalar> NetGrads<T> {
    pub fn zeros_like(net: &DenseNet<T>) -> Self {
        Self {
            weights: net.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: net.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
        }
    }

    pub fn write_params(&self, out: &mut Vec<T>) {
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Scalar> Default for AdamParams<T> {
    fn default() -> Self {
        Self {
            lr: cast(1e-3),
            beta1: cast(0.9),
            beta2: cast(0.999),
            eps: cast(1e-8),
        }
    }
}

/// First/second-moment state for Adam.
#[derive(Debug, Clone)]
pub struct AdamState<T: Scalar> {
    pub m: DVector<T>,
    pub v: DVector<T>,
    pub step: u32,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(n_params: usize) -> Self {
        Self {
            m: DVector::zeros(n_params),
            v: DVector::zeros(n_params),
            step: 0,
        }
    }
}

/// One Adam update with bias correction, in place.
pub fn adam_step<T: Scalar>(
    params: &mut DVector<T>,
    grads: &DVector<T>,
    state: &mut AdamState<T>,
    cfg: &AdamParams<T>,
) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.step += 1;
    let b1 = cfg.beta1;
    let b2 = cfg.beta2;
    let bc1 = T::one() - b1.powi(state.step as i32);
    let bc2 = T::one() - b2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (T::one() - b1) * g;
        state.v[i] = b2 * state.v[i] + (T::one() - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
