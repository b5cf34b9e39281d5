//! Affine coupling layers and their composition into an exactly invertible
//! diffeomorphism with analytic forward map, inverse, and Jacobian.
//!
//! Each layer passes one coordinate block through unchanged and maps the
//! complement `x_b ↦ x_b ⊙ exp(s(x_a)) + t(x_a)`; `s` and `t` are dense
//! networks. Inverses are algebraic, so bijectivity holds for any weights.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::diffeo::Diffeomorphism;
use crate::error::{Error, Result};
use crate::net::{Activation, DenseNet, DualTrace, NetGrads};
use crate::{cast, Scalar};

/// Default soft bound on the scale-net output.
pub const DEFAULT_S_CLAMP: f64 = 5.0;

/// One affine coupling layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingLayer<T: Scalar> {
    /// `true` entries form the pass-through block `x_a`.
    pub mask: Vec<bool>,
    pub s_net: DenseNet<T>,
    pub t_net: DenseNet<T>,
    /// Scale outputs are soft-clamped to `[-s_clamp, s_clamp]` via
    /// `s = c·tanh(u/c)` to keep `exp(s)` bounded during training.
    pub s_clamp: T,
    idx_a: Vec<usize>,
    idx_b: Vec<usize>,
}

impl<T: Scalar> CouplingLayer<T> {
    pub fn new(mask: Vec<bool>, s_net: DenseNet<T>, t_net: DenseNet<T>, s_clamp: T) -> Result<Self> {
        let idx_a: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| **m).map(|(i, _)| i).collect();
        let idx_b: Vec<usize> = mask.iter().enumerate().filter(|(_, m)| !**m).map(|(i, _)| i).collect();
        if idx_a.is_empty() || idx_b.is_empty() {
            return Err(Error::Config(
                "coupling mask must leave both blocks non-empty (state dim ≥ 2)".into(),
            ));
        }
        if s_net.input_dim() != idx_a.len()
            || t_net.input_dim() != idx_a.len()
            || s_net.output_dim() != idx_b.len()
            || t_net.output_dim() != idx_b.len()
        {
            return Err(Error::Config("coupling nets must map |x_a| → |x_b|".into()));
        }
        Ok(Self {
            mask,
            s_net,
            t_net,
            s_clamp,
            idx_a,
            idx_b,
        })
    }

    pub fn dim(&self) -> usize {
        self.mask.len()
    }

    #[inline]
    fn clamp(&self, u: T) -> T {
        self.s_clamp * (u / self.s_clamp).tanh()
    }

    #[inline]
    fn clamp_deriv(&self, u: T) -> T {
        let th = (u / self.s_clamp).tanh();
        T::one() - th * th
    }

    #[inline]
    fn clamp_second_deriv(&self, u: T) -> T {
        let th = (u / self.s_clamp).tanh();
        -cast::<T>(2.0) / self.s_clamp * th * (T::one() - th * th)
    }

    fn gather(&self, x: &DVector<T>, idx: &[usize]) -> DVector<T> {
        DVector::from_iterator(idx.len(), idx.iter().map(|&i| x[i]))
    }

    /// `y_a = x_a`, `y_b = x_b ⊙ exp(s(x_a)) + t(x_a)`.
    pub fn forward(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let y = self.forward_unchecked(x);
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite output in coupling layer forward".into(),
            ));
        }
        Ok(y)
    }

    fn forward_unchecked(&self, x: &DVector<T>) -> DVector<T> {
        let xa = self.gather(x, &self.idx_a);
        let s = self.s_net.forward(&xa).map(|u| self.clamp(u));
        let t = self.t_net.forward(&xa);
        let mut y = x.clone();
        for (k, &i) in self.idx_b.iter().enumerate() {
            y[i] = x[i] * s[k].exp() + t[k];
        }
        y
    }

    /// `x_a = y_a`, `x_b = (y_b − t(y_a)) ⊙ exp(−s(y_a))`.
    pub fn inverse(&self, y: &DVector<T>) -> Result<DVector<T>> {
        let ya = self.gather(y, &self.idx_a);
        let s = self.s_net.forward(&ya).map(|u| self.clamp(u));
        let t = self.t_net.forward(&ya);
        let mut x = y.clone();
        for (k, &i) in self.idx_b.iter().enumerate() {
            x[i] = (y[i] - t[k]) * (-s[k]).exp();
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure(
                "non-finite output in coupling layer inverse".into(),
            ));
        }
        Ok(x)
    }

    /// Analytic layer Jacobian in the original coordinate order: identity on
    /// the `a` block, `diag(exp(s))` on the `b` block, and the cross block
    /// from the chain rule through `s` and `t`.
    pub fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let d = self.dim();
        let xa = self.gather(x, &self.idx_a);
        let u = self.s_net.forward(&xa);
        let s = u.map(|v| self.clamp(v));
        let js = self.s_net.input_jacobian(&xa);
        let jt = self.t_net.input_jacobian(&xa);
        let mut j = DMatrix::zeros(d, d);
        for &i in &self.idx_a {
            j[(i, i)] = T::one();
        }
        for (k, &i) in self.idx_b.iter().enumerate() {
            let e = s[k].exp();
            j[(i, i)] = e;
            for (l, &q) in self.idx_a.iter().enumerate() {
                j[(i, q)] = x[i] * e * self.clamp_deriv(u[k]) * js[(k, l)] + jt[(k, l)];
            }
        }
        j
    }
}

/// Composition of coupling layers; a diffeomorphism for any parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowModel<T: Scalar> {
    pub layers: Vec<CouplingLayer<T>>,
    dim: usize,
}

/// Pass-through mask for layer `index`: strict alternation for d = 2, and
/// alternating complementary half-splits for larger d, so no coordinate is
/// left unaltered by every layer.
pub fn alternating_mask(dim: usize, index: usize) -> Vec<bool> {
    assert!(dim >= 2, "coupling flows need state dim ≥ 2");
    let half = dim.div_ceil(2);
    (0..dim)
        .map(|i| if index % 2 == 0 { i < half } else { i >= half })
        .collect()
}

impl<T: Scalar> FlowModel<T> {
    /// Build a flow of `n_layers` coupling layers with alternating masks.
    ///
    /// `hidden` gives the hidden widths of every `s`/`t` net. Final layers
    /// start at exactly zero, so the fresh flow is the identity map.
    pub fn new<R: Rng>(
        dim: usize,
        n_layers: usize,
        hidden: &[usize],
        s_clamp: T,
        rng: &mut R,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("coupling flows need state dim ≥ 2".into()));
        }
        if n_layers == 0 {
            return Err(Error::Config("flow needs at least one layer".into()));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let mask = alternating_mask(dim, i);
            let n_a = mask.iter().filter(|m| **m).count();
            let n_b = dim - n_a;
            let mut dims = Vec::with_capacity(hidden.len() + 2);
            dims.push(n_a);
            dims.extend_from_slice(hidden);
            dims.push(n_b);
            let s_net = DenseNet::he_init(&dims, Activation::Elu, true, rng);
            let t_net = DenseNet::he_init(&dims, Activation::Elu, true, rng);
            layers.push(CouplingLayer::new(mask, s_net, t_net, s_clamp)?);
        }
        Ok(Self { layers, dim })
    }

    pub fn from_layers(layers: Vec<CouplingLayer<T>>) -> Result<Self> {
        let dim = layers
            .first()
            .ok_or_else(|| Error::Config("flow needs at least one layer".into()))?
            .dim();
        if layers.iter().any(|l| l.dim() != dim) {
            return Err(Error::Config("all coupling layers must share one dim".into()));
        }
        Ok(Self { layers, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Layer-wise composition `d̂ = d̂_k ∘ … ∘ d̂₁`.
    pub fn forward(&self, x: &DVector<T>) -> Result<DVector<T>> {
        let mut y = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            y = layer
                .forward(&y)
                .map_err(|_| Error::NumericalFailure(format!("overflow in coupling layer {i}")))?;
        }
        Ok(y)
    }

    /// Inverse composition, layer inverses applied in reverse order.
    pub fn inverse(&self, y: &DVector<T>) -> Result<DVector<T>> {
        let mut x = y.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            x = layer
                .inverse(&x)
                .map_err(|_| Error::NumericalFailure(format!("overflow in coupling layer {i}")))?;
        }
        Ok(x)
    }

    /// Chain-rule product of the per-layer analytic Jacobians.
    pub fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        let mut j = DMatrix::identity(self.dim, self.dim);
        let mut cur = x.clone();
        for layer in &self.layers {
            j = layer.jacobian(&cur) * j;
            cur = layer.forward_unchecked(&cur);
        }
        j
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.s_net.param_count() + l.t_net.param_count())
            .sum()
    }

    /// Flatten all parameters: per layer, `s`-net then `t`-net.
    pub fn write_params(&self, out: &mut Vec<T>) {
        for layer in &self.layers {
            layer.s_net.write_params(out);
            layer.t_net.write_params(out);
        }
    }

    pub fn params_flat(&self) -> DVector<T> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_params(&mut out);
        DVector::from_vec(out)
    }

    pub fn read_params(&mut self, data: &[T]) {
        assert_eq!(data.len(), self.param_count(), "parameter slice length");
        let mut rest = data;
        for layer in self.layers.iter_mut() {
            rest = layer.s_net.read_params(rest);
            rest = layer.t_net.read_params(rest);
        }
    }

    /// Names and flat-vector ranges of every parameter block, in
    /// `write_params` order.
    pub fn param_layout(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            for (tag, net) in [("s", &layer.s_net), ("t", &layer.t_net)] {
                for l in 0..net.weights.len() {
                    let wlen = net.weights[l].len();
                    out.push((format!("layer{i}/{tag}/w{l}"), offset..offset + wlen));
                    offset += wlen;
                    let blen = net.biases[l].len();
                    out.push((format!("layer{i}/{tag}/b{l}"), offset..offset + blen));
                    offset += blen;
                }
            }
        }
        out
    }

    /// Dual forward pass over `K` independent columns.
    ///
    /// Column `k` of `values` is an input point with tangent column `k` of
    /// `tangents`; the output tangent is the Jacobian-vector product at that
    /// point.
    pub fn forward_dual(&self, values: &DMatrix<T>, tangents: &DMatrix<T>) -> FlowTrace<T> {
        assert_eq!(values.nrows(), self.dim);
        assert_eq!(values.shape(), tangents.shape());
        let k = values.ncols();
        let mut cur = values.clone();
        let mut cur_dot = tangents.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let na = layer.idx_a.len();
            let nb = layer.idx_b.len();
            let gather = |m: &DMatrix<T>, idx: &[usize]| {
                DMatrix::from_fn(idx.len(), k, |r, c| m[(idx[r], c)])
            };
            let xa = gather(&cur, &layer.idx_a);
            let xa_dot = gather(&cur_dot, &layer.idx_a);
            let xb = gather(&cur, &layer.idx_b);
            let xb_dot = gather(&cur_dot, &layer.idx_b);

            let s_trace = layer.s_net.forward_dual(&xa, &xa_dot);
            let t_trace = layer.t_net.forward_dual(&xa, &xa_dot);
            let u = s_trace.output_values().clone();
            let u_dot = s_trace.output_tangents().clone();
            let exp_s = u.map(|v| layer.clamp(v).exp());
            let mut s_dot = u_dot.clone();
            s_dot.zip_apply(&u, |sd, uv| *sd *= layer.clamp_deriv(uv));

            let mut next = cur.clone();
            let mut next_dot = cur_dot.clone();
            for (r, &i) in layer.idx_b.iter().enumerate() {
                for c in 0..k {
                    let e = exp_s[(r, c)];
                    next[(i, c)] = xb[(r, c)] * e + t_trace.output_values()[(r, c)];
                    next_dot[(i, c)] = xb_dot[(r, c)] * e
                        + xb[(r, c)] * e * s_dot[(r, c)]
                        + t_trace.output_tangents()[(r, c)];
                }
            }
            layers.push(FlowLayerTrace {
                s_trace,
                t_trace,
                u,
                u_dot,
                exp_s,
                s_dot,
                xb,
                xb_dot,
                _na: na,
                _nb: nb,
            });
            cur = next;
            cur_dot = next_dot;
        }
        FlowTrace {
            layers,
            out_values: cur,
            out_tangents: cur_dot,
        }
    }

    /// Reverse pass over a flow trace: accumulates parameter gradients and
    /// returns the input adjoints for both streams.
    pub fn backward_dual(
        &self,
        trace: &FlowTrace<T>,
        g_values: &DMatrix<T>,
        g_tangents: &DMatrix<T>,
        grads: &mut FlowGrads<T>,
    ) -> (DMatrix<T>, DMatrix<T>) {
        let k = g_values.ncols();
        let mut g_y = g_values.clone();
        let mut g_ydot = g_tangents.clone();
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let tr = &trace.layers[li];
            let nb = layer.idx_b.len();
            let gather = |m: &DMatrix<T>, idx: &[usize]| {
                DMatrix::from_fn(idx.len(), k, |r, c| m[(idx[r], c)])
            };
            let g_yb = gather(&g_y, &layer.idx_b);
            let g_ybdot = gather(&g_ydot, &layer.idx_b);

            let mut g_xb = DMatrix::zeros(nb, k);
            let mut g_xbdot = DMatrix::zeros(nb, k);
            let mut g_s = DMatrix::zeros(nb, k);
            let mut g_sdot = DMatrix::zeros(nb, k);
            for r in 0..nb {
                for c in 0..k {
                    let e = tr.exp_s[(r, c)];
                    let xb = tr.xb[(r, c)];
                    let xbd = tr.xb_dot[(r, c)];
                    let sd = tr.s_dot[(r, c)];
                    let gy = g_yb[(r, c)];
                    let gyd = g_ybdot[(r, c)];
                    g_xb[(r, c)] = gy * e + gyd * e * sd;
                    g_xbdot[(r, c)] = gyd * e;
                    g_s[(r, c)] = gy * xb * e + gyd * e * (xbd + xb * sd);
                    g_sdot[(r, c)] = gyd * xb * e;
                }
            }
            // through the soft clamp s = c·tanh(u/c), ṡ = clamp'(u)·u̇
            let mut g_u = DMatrix::zeros(nb, k);
            let mut g_udot = DMatrix::zeros(nb, k);
            for r in 0..nb {
                for c in 0..k {
                    let c1 = layer.clamp_deriv(tr.u[(r, c)]);
                    let c2 = layer.clamp_second_deriv(tr.u[(r, c)]);
                    g_u[(r, c)] = g_s[(r, c)] * c1 + g_sdot[(r, c)] * c2 * tr.u_dot[(r, c)];
                    g_udot[(r, c)] = g_sdot[(r, c)] * c1;
                }
            }
            let (gxa_s, gxadot_s) =
                layer
                    .s_net
                    .backward_dual(&tr.s_trace, &g_u, &g_udot, &mut grads.layers[li].0);
            let (gxa_t, gxadot_t) =
                layer
                    .t_net
                    .backward_dual(&tr.t_trace, &g_yb, &g_ybdot, &mut grads.layers[li].1);

            let mut g_x = DMatrix::zeros(self.dim, k);
            let mut g_xdot = DMatrix::zeros(self.dim, k);
            for (r, &i) in layer.idx_a.iter().enumerate() {
                for c in 0..k {
                    g_x[(i, c)] = g_y[(i, c)] + gxa_s[(r, c)] + gxa_t[(r, c)];
                    g_xdot[(i, c)] = g_ydot[(i, c)] + gxadot_s[(r, c)] + gxadot_t[(r, c)];
                }
            }
            for (r, &i) in layer.idx_b.iter().enumerate() {
                for c in 0..k {
                    g_x[(i, c)] = g_xb[(r, c)];
                    g_xdot[(i, c)] = g_xbdot[(r, c)];
                }
            }
            g_y = g_x;
            g_ydot = g_xdot;
        }
        (g_y, g_ydot)
    }
}

impl<T: Scalar> Diffeomorphism<T> for FlowModel<T> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn forward(&self, x: &DVector<T>) -> DVector<T> {
        let mut y = x.clone();
        for layer in &self.layers {
            y = layer.forward_unchecked(&y);
        }
        y
    }

    fn jacobian(&self, x: &DVector<T>) -> DMatrix<T> {
        FlowModel::jacobian(self, x)
    }
}

/// Per-layer intermediates of a flow dual pass.
#[derive(Debug, Clone)]
struct FlowLayerTrace<T: Scalar> {
    s_trace: DualTrace<T>,
    t_trace: DualTrace<T>,
    /// Raw s-net outputs (pre-clamp).
    u: DMatrix<T>,
    u_dot: DMatrix<T>,
    exp_s: DMatrix<T>,
    s_dot: DMatrix<T>,
    xb: DMatrix<T>,
    xb_dot: DMatrix<T>,
    _na: usize,
    _nb: usize,
}

/// Trace of a flow dual forward pass.
#[derive(Debug, Clone)]
pub struct FlowTrace<T: Scalar> {
    layers: Vec<FlowLayerTrace<T>>,
    out_values: DMatrix<T>,
    out_tangents: DMatrix<T>,
}

impl<T: Scalar> FlowTrace<T> {
    pub fn output_values(&self) -> &DMatrix<T> {
        &self.out_values
    }

    pub fn output_tangents(&self) -> &DMatrix<T> {
        &self.out_tangents
    }
}

/// Gradient buffer shaped like a [`FlowModel`]'s parameters.
#[derive(Debug, Clone)]
pub struct FlowGrads<T: Scalar> {
    /// Per layer: (`s`-net grads, `t`-net grads).
    pub layers: Vec<(NetGrads<T>, NetGrads<T>)>,
}

impl<T: Scalar> FlowGrads<T> {
    pub fn zeros_like(flow: &FlowModel<T>) -> Self {
        Self {
            layers: flow
                .layers
                .iter()
                .map(|l| (NetGrads::zeros_like(&l.s_net), NetGrads::zeros_like(&l.t_net)))
                .collect(),
        }
    }

    pub fn params_flat(&self, n_params: usize) -> DVector<T> {
        let mut out = Vec::with_capacity(n_params);
        for (s, t) in &self.layers {
            s.write_params(&mut out);
            t.write_params(&mut out);
        }
        DVector::from_vec(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v2(a: f64, b: f64) -> DVector<f64> {
        DVector::from_vec(vec![a, b])
    }

    /// A flow with non-trivial weights everywhere (final layers included),
    /// moderately scaled to keep test round-trips well conditioned.
    fn random_flow(dim: usize, n_layers: usize, seed: u64) -> FlowModel<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut flow = FlowModel::new(dim, n_layers, &[8, 8], cast(DEFAULT_S_CLAMP), &mut rng).unwrap();
        let n = flow.param_count();
        let mut params = Vec::with_capacity(n);
        flow.write_params(&mut params);
        for p in params.iter_mut() {
            *p = 0.3 * (rng.random::<f64>() - 0.5);
        }
        flow.read_params(&params);
        flow
    }

    #[test]
    fn identity_at_initialization_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let flow = FlowModel::new(2, 7, &[16, 16], cast(DEFAULT_S_CLAMP), &mut rng).unwrap();
        for _ in 0..20 {
            let x = v2(rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0);
            assert_eq!(flow.forward(&x).unwrap(), x);
            assert_eq!(flow.jacobian(&x), DMatrix::identity(2, 2));
        }
    }

    #[test]
    fn hand_built_shift_layer_matches_closed_form() {
        // s ≡ 0, t(x₁) = x₁ through a linear t-net: (x₁, x₂) ↦ (x₁, x₂ + x₁).
        let s_net = DenseNet::<f64>::zeros(&[1, 1], Activation::Identity);
        let mut t_net = DenseNet::<f64>::zeros(&[1, 1], Activation::Identity);
        t_net.weights[0][(0, 0)] = 1.0;
        let layer =
            CouplingLayer::new(vec![true, false], s_net, t_net, cast(DEFAULT_S_CLAMP)).unwrap();
        let y = layer.forward(&v2(2.0, 1.5)).unwrap();
        assert_eq!(y, v2(2.0, 3.5));
        let back = layer.inverse(&y).unwrap();
        assert_eq!(back, v2(2.0, 1.5));
        // Jacobian: [[1, 0], [1, 1]]
        let j = layer.jacobian(&v2(2.0, 1.5));
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 1.0]));
    }

    #[test]
    fn layer_round_trip_is_algebraically_tight() {
        let flow = random_flow(2, 1, 17);
        let layer = &flow.layers[0];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let x = v2(rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0);
            let back = layer.inverse(&layer.forward(&x).unwrap()).unwrap();
            assert!((back - &x).norm() <= 1e-12);
        }
    }

    #[test]
    fn flow_round_trip_over_training_box() {
        for seed in [5, 6] {
            let flow = random_flow(2, 7, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for _ in 0..1000 {
                let x = v2(rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0);
                let y = flow.forward(&x).unwrap();
                let back = flow.inverse(&y).unwrap();
                assert!(
                    (back - &x).norm() <= 1e-10,
                    "round-trip error {} at {x:?}",
                    (flow.inverse(&flow.forward(&x).unwrap()).unwrap() - &x).norm()
                );
            }
        }
    }

    #[test]
    fn mask_alternation_covers_every_coordinate() {
        for dim in [2, 3, 4, 5] {
            for n_layers in [2, 3, 7] {
                let masks: Vec<Vec<bool>> =
                    (0..n_layers).map(|i| alternating_mask(dim, i)).collect();
                for coord in 0..dim {
                    assert!(
                        masks.iter().any(|m| !m[coord]),
                        "coordinate {coord} passes through all {n_layers} layers (dim {dim})"
                    );
                }
            }
        }
    }

    #[test]
    fn jacobian_matches_central_differences_and_has_positive_det() {
        let flow = random_flow(2, 4, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let x = v2(rng.random::<f64>() * 10.0 - 5.0, rng.random::<f64>() * 10.0 - 5.0);
            let j = flow.jacobian(&x);
            assert!(j.determinant() > 0.0);
            let h = 1e-6;
            for c in 0..2 {
                let mut xp = x.clone();
                xp[c] += h;
                let mut xm = x.clone();
                xm[c] -= h;
                let fd = (flow.forward(&xp).unwrap() - flow.forward(&xm).unwrap()) / (2.0 * h);
                for r in 0..2 {
                    let denom = j[(r, c)].abs().max(1.0);
                    assert!(
                        (j[(r, c)] - fd[r]).abs() / denom < 1e-6,
                        "J[{r},{c}]={} fd={}",
                        j[(r, c)],
                        fd[r]
                    );
                }
            }
        }
    }

    #[test]
    fn dual_pass_with_identity_tangents_reproduces_jacobian() {
        let flow = random_flow(2, 3, 31);
        let x = v2(1.2, -0.7);
        let values = DMatrix::from_fn(2, 2, |r, _| x[r]);
        let trace = flow.forward_dual(&values, &DMatrix::identity(2, 2));
        let j = flow.jacobian(&x);
        for r in 0..2 {
            for c in 0..2 {
                assert!((trace.output_tangents()[(r, c)] - j[(r, c)]).abs() <= 1e-12);
            }
        }
        let y = flow.forward(&x).unwrap();
        for r in 0..2 {
            assert!((trace.output_values()[(r, 0)] - y[r]).abs() <= 1e-14);
        }
    }

    #[test]
    fn flow_parameter_gradients_match_finite_differences() {
        let mut flow = random_flow(2, 2, 47);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let k = 3;
        let x = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let v = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() * 2.0 - 1.0);
        let c1 = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() - 0.5);
        let c2 = DMatrix::from_fn(2, k, |_, _| rng.random::<f64>() - 0.5);

        let loss = |f: &FlowModel<f64>| -> f64 {
            let tr = f.forward_dual(&x, &v);
            tr.output_values().dot(&c1) + tr.output_tangents().dot(&c2)
        };

        let trace = flow.forward_dual(&x, &v);
        let mut grads = FlowGrads::zeros_like(&flow);
        flow.backward_dual(&trace, &c1, &c2, &mut grads);
        let analytic = grads.params_flat(flow.param_count());

        let base = flow.params_flat();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            flow.read_params(p.as_slice());
            let lp = loss(&flow);
            p[i] -= 2.0 * h;
            flow.read_params(p.as_slice());
            let lm = loss(&flow);
            let fd = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(1.0);
            assert!(
                (analytic[i] - fd).abs() / denom < 1e-4,
                "param {i}: {} vs {}",
                analytic[i],
                fd
            );
        }
        flow.read_params(base.as_slice());
    }

    #[test]
    fn pass_through_only_loss_gives_zero_gradients_to_that_layer() {
        // With a single layer passing x₁ through, a loss reading only y₁ has
        // exactly zero gradient on the layer's s and t nets.
        let flow = random_flow(2, 1, 53);
        let x = DMatrix::from_row_slice(2, 1, &[0.4, -0.9]);
        let trace = flow.forward_dual(&x, &DMatrix::zeros(2, 1));
        let mut grads = FlowGrads::zeros_like(&flow);
        let mut g_y = DMatrix::zeros(2, 1);
        g_y[(0, 0)] = 1.0; // x₁ is the pass-through coordinate of layer 0
        flow.backward_dual(&trace, &g_y, &DMatrix::zeros(2, 1), &mut grads);
        let flat = grads.params_flat(flow.param_count());
        assert!(flat.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn param_layout_covers_the_flat_vector() {
        let flow = random_flow(2, 3, 61);
        let layout = flow.param_layout();
        let mut covered = 0;
        for (name, range) in &layout {
            assert_eq!(range.start, covered, "gap before {name}");
            covered = range.end;
        }
        assert_eq!(covered, flow.param_count());
    }

    #[test]
    fn f32_flow_round_trips_loosely() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let flow = FlowModel::<f32>::new(2, 3, &[6], cast(DEFAULT_S_CLAMP), &mut rng).unwrap();
        let x = DVector::from_vec(vec![0.5f32, -1.5]);
        assert_eq!(flow.forward(&x).unwrap(), x);
    }
}
