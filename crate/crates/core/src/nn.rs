//! Dense networks with hand-written backpropagation, plus AdamW.
//!
//! Parameters of an [`Mlp`] live in one flat vector so optimisers, gradient
//! checks and checkpoints can treat every network uniformly. Each matrix
//! product accumulates every output element in input-index order, so a row's
//! result never depends on which other rows share the batch.

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::uniform;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                what: "matrix data length",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LayerLayout {
    inputs: usize,
    outputs: usize,
    weight: usize,
    bias: usize,
}

/// Multi-layer perceptron with SiLU hidden activations and a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    layers: Vec<LayerLayout>,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer.
    inputs: Vec<Matrix>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Matrix>,
}

fn layouts(sizes: &[usize]) -> (Vec<LayerLayout>, usize) {
    let mut offset = 0;
    let layers = sizes
        .windows(2)
        .map(|w| {
            let l = LayerLayout {
                inputs: w[0],
                outputs: w[1],
                weight: offset,
                bias: offset + w[0] * w[1],
            };
            offset += w[0] * w[1] + w[1];
            l
        })
        .collect();
    (layers, offset)
}

impl Mlp {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        let (layers, count) = layouts(sizes);
        let mut params = vec![0.0; count];
        for l in &layers {
            let bound = 1.0 / (l.inputs as f64).sqrt();
            for w in &mut params[l.weight..l.bias] {
                *w = uniform(rng, -bound, bound);
            }
        }
        Self {
            sizes: sizes.to_vec(),
            layers,
            params,
        }
    }

    pub fn from_params(sizes: &[usize], params: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidParameter(format!("bad layer sizes {sizes:?}")));
        }
        let (layers, count) = layouts(sizes);
        if params.len() != count {
            return Err(Error::DimensionMismatch {
                what: "parameter count",
                expected: count,
                actual: params.len(),
            });
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            layers,
            params,
        })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Multiplies the head's weights and bias by `factor`.
    pub fn scale_head(&mut self, factor: f64) {
        let l = *self.layers.last().expect("at least one layer");
        for p in &mut self.params[l.weight..l.bias + l.outputs] {
            *p *= factor;
        }
    }

    /// `(name, shape, values)` for every tensor, weights stored `[in, out]`.
    pub fn tensors(&self, prefix: &str) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("{prefix}.l{i}.weight"),
                vec![l.inputs, l.outputs],
                &self.params[l.weight..l.bias],
            ));
            out.push((
                format!("{prefix}.l{i}.bias"),
                vec![l.outputs],
                &self.params[l.bias..l.bias + l.outputs],
            ));
        }
        out
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "network input width",
                expected: self.input_dim(),
                actual: x.cols,
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut h = self.affine(&self.layers[0], x);
        if last > 0 {
            h.data.iter_mut().for_each(|v| *v = silu(*v));
        }
        for (i, l) in self.layers.iter().enumerate().skip(1) {
            h = self.affine(l, &h);
            if i < last {
                h.data.iter_mut().for_each(|v| *v = silu(*v));
            }
        }
        Ok(h)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let z = self.affine(l, &h);
            inputs.push(h);
            if i < last {
                let mut a = z.clone();
                a.data.iter_mut().for_each(|v| *v = silu(*v));
                pre.push(z);
                h = a;
            } else {
                h = z;
            }
        }
        Ok((h, ForwardCache { inputs, pre }))
    }

    /// Accumulates `∂L/∂θ` into `grads` given `∂L/∂output`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &Matrix, grads: &mut [f64]) -> Result<()> {
        self.backward_impl(cache, grad_out, grads, false).map(|_| ())
    }

    /// Like [`Mlp::backward`] but also returns `∂L/∂input`.
    pub fn backward_with_input(
        &self,
        cache: &ForwardCache,
        grad_out: &Matrix,
        grads: &mut [f64],
    ) -> Result<Matrix> {
        self.backward_impl(cache, grad_out, grads, true)
            .map(|g| g.expect("input gradient requested"))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        grad_out: &Matrix,
        grads: &mut [f64],
        want_input: bool,
    ) -> Result<Option<Matrix>> {
        if grads.len() != self.params.len() {
            return Err(Error::DimensionMismatch {
                what: "gradient buffer",
                expected: self.params.len(),
                actual: grads.len(),
            });
        }
        if grad_out.cols != self.output_dim() || grad_out.rows != cache.inputs[0].rows {
            return Err(Error::DimensionMismatch {
                what: "output gradient shape",
                expected: self.output_dim(),
                actual: grad_out.cols,
            });
        }
        let mut delta = grad_out.clone();
        for (i, l) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            let (gw, rest) = grads[l.weight..].split_at_mut(l.inputs * l.outputs);
            let gb = &mut rest[..l.outputs];
            for r in 0..delta.rows {
                let d = delta.row(r);
                let x = input.row(r);
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for (k, &xv) in x.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let row = &mut gw[k * l.outputs..(k + 1) * l.outputs];
                    for (g, &dv) in row.iter_mut().zip(d) {
                        *g += xv * dv;
                    }
                }
            }
            if i == 0 && !want_input {
                return Ok(None);
            }
            let w = &self.params[l.weight..l.bias];
            let mut next = Matrix::zeros(delta.rows, l.inputs);
            for r in 0..delta.rows {
                let d = delta.row(r);
                let out = next.row_mut(r);
                for (k, o) in out.iter_mut().enumerate() {
                    let wrow = &w[k * l.outputs..(k + 1) * l.outputs];
                    *o = dot(wrow, d);
                }
            }
            if i > 0 {
                for (g, &z) in next.data.iter_mut().zip(&cache.pre[i - 1].data) {
                    *g *= silu_grad(z);
                }
            }
            delta = next;
        }
        Ok(Some(delta))
    }

    fn affine(&self, l: &LayerLayout, x: &Matrix) -> Matrix {
        let w = &self.params[l.weight..l.bias];
        let b = &self.params[l.bias..l.bias + l.outputs];
        let n = l.outputs;
        let mut out = Matrix::zeros(x.rows, n);
        let mut r = 0;
        // Four rows at a time share each weight row load; every output still
        // accumulates bias first, then inputs in index order.
        while r + 4 <= x.rows {
            let (o0, rest) = out.data[r * n..(r + 4) * n].split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            o0.copy_from_slice(b);
            o1.copy_from_slice(b);
            o2.copy_from_slice(b);
            o3.copy_from_slice(b);
            let (x0, x1, x2, x3) = (x.row(r), x.row(r + 1), x.row(r + 2), x.row(r + 3));
            for k in 0..l.inputs {
                let wrow = &w[k * n..(k + 1) * n];
                let (a0, a1, a2, a3) = (x0[k], x1[k], x2[k], x3[k]);
                for j in 0..n {
                    let wv = wrow[j];
                    o0[j] += a0 * wv;
                    o1[j] += a1 * wv;
                    o2[j] += a2 * wv;
                    o3[j] += a3 * wv;
                }
            }
            r += 4;
        }
        while r < x.rows {
            let o = &mut out.data[r * n..(r + 1) * n];
            o.copy_from_slice(b);
            let xr = x.row(r);
            for k in 0..l.inputs {
                let wrow = &w[k * n..(k + 1) * n];
                let a = xr[k];
                for j in 0..n {
                    o[j] += a * wrow[j];
                }
            }
            r += 1;
        }
        out
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Euclidean norm of a gradient vector.
pub fn grad_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad_norm(grads);
    if norm > max_norm {
        let scale = max_norm / norm;
        grads.iter_mut().for_each(|g| *g *= scale);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-6,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
        }
    }
}

/// Decoupled-weight-decay Adam with global gradient-norm clipping.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self {
            config,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Clips, then applies one update. An all-zero gradient leaves both the
    /// parameters and the optimiser state untouched. Returns the pre-clip norm.
    pub fn step(&mut self, params: &mut [f64], grads: &mut [f64]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                what: "optimiser parameter count",
                expected: self.m.len(),
                actual: grads.len(),
            });
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::non_finite("gradient"));
        }
        let norm = clip_grad_norm(grads, self.config.max_grad_norm);
        if norm == 0.0 {
            return Ok(0.0);
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * c.weight_decay * params[i];
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(norm)
    }
}

/// Central finite-difference gradient of `loss` with respect to `params`.
pub fn finite_difference<F>(params: &mut [f64], h: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let plus = loss(params);
        params[i] = orig - h;
        let minus = loss(params);
        params[i] = orig;
        out[i] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Largest elementwise `|a−b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
