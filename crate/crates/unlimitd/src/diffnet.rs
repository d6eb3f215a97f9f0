//! Fully-connected regressor with exact batch Jacobians w.r.t. the parameters.
//!
//! The network is a plain MLP `x -> W_L(..act(W_1 x + b_1)..) + b_L` over `f64`.
//! Parameters are kept flattened in a [`ParamVector`]; per layer the weight matrix
//! is stored column-major, followed by the bias. Besides `forward`, the module
//! exposes the batch Jacobian of the vectorized outputs w.r.t. the parameters
//! (the feature map everything else is built on), the first-order linearization
//! around a base point, and vector-Jacobian products through the Jacobian map
//! itself — i.e. second-order differentiation of the network, computed with a
//! forward-over-reverse pass. Activations are restricted to ReLU and identity so
//! the second derivative of the activation vanishes almost everywhere.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element-wise activation applied to every hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "relu")]
    ReLU,
    #[serde(rename = "identity")]
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            // Subgradient at 0 is taken as 0, so the kink contributes nothing.
            Activation::ReLU => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    #[inline]
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// Architecture of the regressor: layer widths from input to output, plus the
/// hidden activation. The output layer is always affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    activation: Activation,
}

/// One affine layer inside the flattened parameter vector.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerSlot {
    pub w_off: usize,
    pub b_off: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if layer_widths.len() < 2 {
            return Err(Error::InvalidSpec(
                "a network needs at least input and output widths".into(),
            ));
        }
        if layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidSpec("all layer widths must be >= 1".into()));
        }
        if activation == Activation::ReLU && layer_widths.len() < 3 {
            return Err(Error::InvalidSpec(
                "a ReLU network needs at least one hidden layer".into(),
            ));
        }
        Ok(Self {
            layer_widths,
            activation,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().unwrap()
    }

    /// Total number of parameters: sum over layers of `in*out + out`.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    pub(crate) fn layer_slots(&self) -> Vec<LayerSlot> {
        let mut slots = Vec::with_capacity(self.layer_widths.len() - 1);
        let mut off = 0;
        for w in self.layer_widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            slots.push(LayerSlot {
                w_off: off,
                b_off: off + fan_in * fan_out,
                fan_in,
                fan_out,
            });
            off += fan_in * fan_out + fan_out;
        }
        slots
    }

    /// He-initialized parameters: weights `N(0, 2/fan_in)`, biases zero.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = DVector::zeros(self.param_count());
        for slot in self.layer_slots() {
            let std = (2.0 / slot.fan_in as f64).sqrt();
            for i in 0..slot.fan_in * slot.fan_out {
                values[slot.w_off + i] = std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        ParamVector {
            spec: self.clone(),
            values,
        }
    }
}

/// Flattened network parameters together with the architecture they belong to.
///
/// Layout per layer: weight matrix column-major, then bias. `unflatten` of
/// `flatten` is the identity on layer tensors by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    spec: NetworkSpec,
    values: DVector<f64>,
}

impl ParamVector {
    pub fn new(spec: NetworkSpec, values: DVector<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "parameter vector has length {}, spec requires {}",
                values.len(),
                spec.param_count()
            )));
        }
        Ok(Self { spec, values })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut DVector<f64> {
        &mut self.values
    }

    /// Weight entry `(row, col)` of layer `l`, for tests and hand-built nets.
    pub fn weight(&self, layer: usize, row: usize, col: usize) -> f64 {
        let slot = self.spec.layer_slots()[layer];
        self.values[slot.w_off + col * slot.fan_out + row]
    }

    pub fn set_weight(&mut self, layer: usize, row: usize, col: usize, v: f64) {
        let slot = self.spec.layer_slots()[layer];
        self.values[slot.w_off + col * slot.fan_out + row] = v;
    }

    pub fn bias(&self, layer: usize, row: usize) -> f64 {
        let slot = self.spec.layer_slots()[layer];
        self.values[slot.b_off + row]
    }

    pub fn set_bias(&mut self, layer: usize, row: usize, v: f64) {
        let slot = self.spec.layer_slots()[layer];
        self.values[slot.b_off + row] = v;
    }
}

/// A batch of `K` inputs stored as the columns of an `N_x x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchInputs(DMatrix<f64>);

impl BatchInputs {
    pub fn new(inputs: DMatrix<f64>) -> Result<Self> {
        if inputs.ncols() == 0 {
            return Err(Error::ShapeMismatch("input batch must be nonempty".into()));
        }
        if inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::ShapeMismatch(
                "input batch contains non-finite entries".into(),
            ));
        }
        Ok(Self(inputs))
    }

    /// Scalar inputs as a `1 x K` batch.
    pub fn from_scalars(xs: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_row_slice(1, xs.len(), xs))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn input_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn len(&self) -> usize {
        self.0.ncols()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn column(&self, t: usize) -> Vec<f64> {
        self.0.column(t).iter().copied().collect()
    }
}

fn check_input(theta: &ParamVector, inputs: &BatchInputs) -> Result<()> {
    if inputs.input_dim() != theta.spec().input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input dimension {} does not match network input width {}",
            inputs.input_dim(),
            theta.spec().input_dim()
        )));
    }
    Ok(())
}

/// Primal evaluation trace for one input: post-activation values per layer and
/// activation derivatives of each hidden layer.
struct Trace {
    acts: Vec<Vec<f64>>,
    dmask: Vec<Vec<f64>>,
}

fn forward_trace(theta: &ParamVector, x: &[f64]) -> Trace {
    let spec = theta.spec();
    let slots = spec.layer_slots();
    let values = theta.values().as_slice();
    let n_layers = slots.len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    let mut dmask = Vec::with_capacity(n_layers.saturating_sub(1));
    acts.push(x.to_vec());
    for (l, slot) in slots.iter().enumerate() {
        let prev = &acts[l];
        let mut z = vec![0.0; slot.fan_out];
        for (o, zo) in z.iter_mut().enumerate() {
            let mut sum = values[slot.b_off + o];
            for (i, &a) in prev.iter().enumerate() {
                sum += values[slot.w_off + i * slot.fan_out + o] * a;
            }
            *zo = sum;
        }
        let hidden = l + 1 < n_layers;
        if hidden {
            let act = spec.activation();
            dmask.push(z.iter().map(|&v| act.derivative(v)).collect());
            for v in z.iter_mut() {
                *v = act.apply(*v);
            }
        }
        acts.push(z);
    }
    Trace { acts, dmask }
}

/// Evaluates the network on a batch. Columns are independent per-input
/// evaluations; the result is `N_y x K`.
pub fn forward(theta: &ParamVector, inputs: &BatchInputs) -> Result<DMatrix<f64>> {
    check_input(theta, inputs)?;
    let n_y = theta.spec().output_dim();
    let k = inputs.len();
    let mut out = DMatrix::zeros(n_y, k);
    for t in 0..k {
        let trace = forward_trace(theta, &inputs.column(t));
        let y = trace.acts.last().unwrap();
        for (r, &v) in y.iter().enumerate() {
            out[(r, t)] = v;
        }
    }
    Ok(out)
}

/// Vectorizes an `N_y x K` output batch output-dimension-major per input, i.e.
/// the row block of input `t` occupies indices `t*N_y .. (t+1)*N_y`.
pub fn vectorize_outputs(outputs: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(outputs.as_slice())
}

/// Inverse of [`vectorize_outputs`].
pub fn unvectorize_outputs(v: &DVector<f64>, n_y: usize) -> DMatrix<f64> {
    let k = v.len() / n_y;
    DMatrix::from_column_slice(n_y, k, v.as_slice())
}

/// Exact Jacobian of the vectorized batch outputs w.r.t. the parameters,
/// shaped `(N_y * K) x P`. Row `t*N_y + r` is the gradient of output
/// component `r` at input `t`.
pub fn jacobian(theta: &ParamVector, inputs: &BatchInputs) -> Result<DMatrix<f64>> {
    check_input(theta, inputs)?;
    let spec = theta.spec();
    let slots = spec.layer_slots();
    let values = theta.values().as_slice();
    let n_y = spec.output_dim();
    let p = spec.param_count();
    let k = inputs.len();
    let mut jac = DMatrix::zeros(n_y * k, p);

    let n_layers = slots.len();
    for t in 0..k {
        let trace = forward_trace(theta, &inputs.column(t));
        for r in 0..n_y {
            let row = t * n_y + r;
            // Reverse pass seeded with e_r at the output layer.
            let mut delta = vec![0.0; n_y];
            delta[r] = 1.0;
            for l in (0..n_layers).rev() {
                let slot = &slots[l];
                let prev = &trace.acts[l];
                for o in 0..slot.fan_out {
                    let d = delta[o];
                    if d != 0.0 {
                        for (i, &a) in prev.iter().enumerate() {
                            jac[(row, slot.w_off + i * slot.fan_out + o)] = d * a;
                        }
                    }
                    jac[(row, slot.b_off + o)] = d;
                }
                if l > 0 {
                    let mask = &trace.dmask[l - 1];
                    let mut next = vec![0.0; slot.fan_in];
                    for (i, n) in next.iter_mut().enumerate() {
                        let mut sum = 0.0;
                        for (o, &d) in delta.iter().enumerate() {
                            sum += values[slot.w_off + i * slot.fan_out + o] * d;
                        }
                        *n = sum * mask[i];
                    }
                    delta = next;
                }
            }
        }
    }
    Ok(jac)
}

/// First-order prediction around `theta0`:
/// `forward(theta0, X) + J(theta0, X) (theta - theta0)`, un-vectorized back to
/// `N_y x K`.
pub fn linearized_predict(
    theta0: &ParamVector,
    theta: &ParamVector,
    inputs: &BatchInputs,
) -> Result<DMatrix<f64>> {
    if theta.spec() != theta0.spec() {
        return Err(Error::ShapeMismatch(
            "linearization point and query parameters use different specs".into(),
        ));
    }
    let base = forward(theta0, inputs)?;
    let jac = jacobian(theta0, inputs)?;
    let correction = &jac * (theta.values() - theta0.values());
    Ok(&base + unvectorize_outputs(&correction, theta.spec().output_dim()))
}

/// Vector-Jacobian product of `forward`: the gradient w.r.t. the parameters of
/// `sum(cotangent .* forward(theta, X))`, with `cotangent` shaped `N_y x K`.
pub fn backprop(
    theta: &ParamVector,
    inputs: &BatchInputs,
    cotangent: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_input(theta, inputs)?;
    let spec = theta.spec();
    let n_y = spec.output_dim();
    let k = inputs.len();
    if cotangent.nrows() != n_y || cotangent.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "cotangent is {}x{}, expected {}x{}",
            cotangent.nrows(),
            cotangent.ncols(),
            n_y,
            k
        )));
    }
    let slots = spec.layer_slots();
    let values = theta.values().as_slice();
    let mut grad = DVector::zeros(spec.param_count());
    let n_layers = slots.len();
    for t in 0..k {
        let trace = forward_trace(theta, &inputs.column(t));
        let mut delta: Vec<f64> = cotangent.column(t).iter().copied().collect();
        for l in (0..n_layers).rev() {
            let slot = &slots[l];
            let prev = &trace.acts[l];
            for (o, &d) in delta.iter().enumerate() {
                for (i, &a) in prev.iter().enumerate() {
                    grad[slot.w_off + i * slot.fan_out + o] += d * a;
                }
                grad[slot.b_off + o] += d;
            }
            if l > 0 {
                let mask = &trace.dmask[l - 1];
                let mut next = vec![0.0; slot.fan_in];
                for (i, n) in next.iter_mut().enumerate() {
                    let mut sum = 0.0;
                    for (o, &d) in delta.iter().enumerate() {
                        sum += values[slot.w_off + i * slot.fan_out + o] * d;
                    }
                    *n = sum * mask[i];
                }
                delta = next;
            }
        }
    }
    Ok(grad)
}

/// Gradient w.r.t. the parameters of `sum(cotangent .* J(theta, X))`, i.e. the
/// vector-Jacobian product through the Jacobian map itself.
///
/// Row `t*N_y + r` of the Jacobian is the gradient `g_r` of one scalar output,
/// so the result is a sum of Hessian-vector products `H_r v_r` with `v_r` the
/// matching cotangent row. Each product is computed with one forward-mode
/// tangent sweep along `v_r` followed by a reverse sweep that differentiates
/// the stored backprop quantities; the activation's second derivative is zero
/// almost everywhere, which keeps both sweeps in closed form.
pub fn jacobian_vjp(
    theta: &ParamVector,
    inputs: &BatchInputs,
    cotangent: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    check_input(theta, inputs)?;
    let spec = theta.spec();
    let slots = spec.layer_slots();
    let values = theta.values().as_slice();
    let n_y = spec.output_dim();
    let p = spec.param_count();
    let k = inputs.len();
    if cotangent.nrows() != n_y * k || cotangent.ncols() != p {
        return Err(Error::ShapeMismatch(format!(
            "cotangent is {}x{}, expected {}x{}",
            cotangent.nrows(),
            cotangent.ncols(),
            n_y * k,
            p
        )));
    }
    let n_layers = slots.len();
    let mut grad = DVector::zeros(p);
    let mut v = vec![0.0; p];

    for t in 0..k {
        let trace = forward_trace(theta, &inputs.column(t));
        for r in 0..n_y {
            let row = t * n_y + r;
            for (dst, src) in v.iter_mut().zip(cotangent.row(row).iter()) {
                *dst = *src;
            }

            // Tangent forward sweep along v.
            let mut tacts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
            tacts.push(vec![0.0; trace.acts[0].len()]);
            for (l, slot) in slots.iter().enumerate() {
                let prev = &trace.acts[l];
                let tprev = &tacts[l];
                let mut tz = vec![0.0; slot.fan_out];
                for (o, tzo) in tz.iter_mut().enumerate() {
                    let mut sum = v[slot.b_off + o];
                    for i in 0..slot.fan_in {
                        let idx = slot.w_off + i * slot.fan_out + o;
                        sum += v[idx] * prev[i] + values[idx] * tprev[i];
                    }
                    *tzo = sum;
                }
                if l + 1 < n_layers {
                    let mask = &trace.dmask[l];
                    for (tzo, &m) in tz.iter_mut().zip(mask.iter()) {
                        *tzo *= m;
                    }
                }
                tacts.push(tz);
            }

            // Reverse sweep carrying (delta, tangent-of-delta).
            let mut delta = vec![0.0; n_y];
            delta[r] = 1.0;
            let mut tdelta = vec![0.0; n_y];
            for l in (0..n_layers).rev() {
                let slot = &slots[l];
                let prev = &trace.acts[l];
                let tprev = &tacts[l];
                for o in 0..slot.fan_out {
                    let d = delta[o];
                    let td = tdelta[o];
                    for i in 0..slot.fan_in {
                        grad[slot.w_off + i * slot.fan_out + o] += td * prev[i] + d * tprev[i];
                    }
                    grad[slot.b_off + o] += td;
                }
                if l > 0 {
                    let mask = &trace.dmask[l - 1];
                    let mut next = vec![0.0; slot.fan_in];
                    let mut tnext = vec![0.0; slot.fan_in];
                    for i in 0..slot.fan_in {
                        let mut sum = 0.0;
                        let mut tsum = 0.0;
                        for o in 0..slot.fan_out {
                            let idx = slot.w_off + i * slot.fan_out + o;
                            sum += values[idx] * delta[o];
                            tsum += v[idx] * delta[o] + values[idx] * tdelta[o];
                        }
                        next[i] = sum * mask[i];
                        tnext[i] = tsum * mask[i];
                    }
                    delta = next;
                    tdelta = tnext;
                }
            }
        }
    }
    Ok(grad)
}

/// Gradient w.r.t. `theta` of a scalar function of the Jacobian. The caller
/// supplies the function's derivative in the Jacobian entries, evaluated at
/// `J(theta, X)`; the chain rule through the network is handled here.
pub fn grad_through_jacobian<F>(
    theta: &ParamVector,
    inputs: &BatchInputs,
    d_scalar_d_jacobian: F,
) -> Result<DVector<f64>>
where
    F: FnOnce(&DMatrix<f64>) -> DMatrix<f64>,
{
    let jac = jacobian(theta, inputs)?;
    let cotangent = d_scalar_d_jacobian(&jac);
    jacobian_vjp(theta, inputs, &cotangent)
}
