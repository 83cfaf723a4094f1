//! Minimal feed-forward network engine with exact reverse-mode gradients.
//!
//! Just enough for MLP actor-critic training: tanh hidden layers, a linear or
//! tanh output layer, orthogonal-style initialization, flat parameter access,
//! and Adam with global-norm gradient clipping. Everything is f64 and
//! deterministic given the RNG seed. Any non-finite value is an error, never
//! silently propagated.

use crate::error::{Error, Result};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Tensor2 {
        Tensor2 {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    fn check(&self) -> Result<()> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "tensor data {} != {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Linear,
    Tanh,
}

/// Multilayer perceptron: affine + tanh for every hidden layer, affine +
/// `final_activation` for the output layer. Weights are (out x in).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpNet {
    pub sizes: Vec<usize>,
    pub weights: Vec<Tensor2>,
    pub biases: Vec<Vec<f64>>,
    pub final_activation: Activation,
}

/// Activations recorded by a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct FwdCache {
    input: Vec<f64>,
    /// Post-activation outputs of every layer.
    post: Vec<Vec<f64>>,
}

/// Per-layer parameter gradients in the same shapes as the network.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_weights: Vec<Tensor2>,
    pub d_biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &MlpNet) -> MlpGrads {
        MlpGrads {
            d_weights: net
                .weights
                .iter()
                .map(|w| Tensor2::zeros(w.rows, w.cols))
                .collect(),
            d_biases: net.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.d_weights.iter_mut().zip(&other.d_weights) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += *y;
            }
        }
        for (a, b) in self.d_biases.iter_mut().zip(&other.d_biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.d_weights {
            for x in &mut w.data {
                *x *= s;
            }
        }
        for b in &mut self.d_biases {
            for x in b.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Flatten in the same order as `MlpNet::flat_params`.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.d_weights.iter().zip(&self.d_biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Fill `mat` with an orthogonal-style matrix scaled by `gain`: Gram-Schmidt
/// over Gaussian draws, orthonormalizing along the shorter dimension.
fn orthogonal_fill(mat: &mut Tensor2, gain: f64, rng: &mut ChaCha8Rng) {
    let (r, c) = (mat.rows, mat.cols);
    let transpose = r > c;
    let (n_vecs, dim) = if transpose { (c, r) } else { (r, c) };
    // Orthonormal basis first; the gain is applied on write-out.
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(n_vecs);
    while vecs.len() < n_vecs {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for u in &vecs {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= dot * *y;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue; // degenerate draw; redraw
        }
        for x in &mut v {
            *x /= norm;
        }
        vecs.push(v);
    }
    for i in 0..r {
        for j in 0..c {
            let v = if transpose { vecs[j][i] } else { vecs[i][j] };
            mat.set(i, j, gain * v);
        }
    }
}

impl MlpNet {
    /// Zero-initialized network with the given layer sizes.
    pub fn zeros(sizes: &[usize], final_activation: Activation) -> Result<MlpNet> {
        if sizes.len() < 2 {
            return Err(Error::ShapeMismatch(format!(
                "need at least input and output sizes, got {sizes:?}"
            )));
        }
        let weights = sizes
            .windows(2)
            .map(|w| Tensor2::zeros(w[1], w[0]))
            .collect();
        let biases = sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(MlpNet {
            sizes: sizes.to_vec(),
            weights,
            biases,
            final_activation,
        })
    }

    /// Orthogonal-style init: `hidden_gain` for all hidden layers, `final_gain`
    /// for the output layer; biases zero.
    pub fn init(
        sizes: &[usize],
        final_activation: Activation,
        hidden_gain: f64,
        final_gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<MlpNet> {
        let mut net = MlpNet::zeros(sizes, final_activation)?;
        let last = net.weights.len() - 1;
        for (l, w) in net.weights.iter_mut().enumerate() {
            let gain = if l == last { final_gain } else { hidden_gain };
            orthogonal_fill(w, gain, rng);
        }
        Ok(net)
    }

    pub fn input_len(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_len(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data.len() + b.len())
            .sum()
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} params, got {}",
                self.param_count(),
                params.len()
            )));
        }
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wl = w.data.len();
            w.data.copy_from_slice(&params[off..off + wl]);
            off += wl;
            let bl = b.len();
            b.copy_from_slice(&params[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    /// Forward pass for a single input vector, caching activations.
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, FwdCache)> {
        if input.len() != self.input_len() {
            return Err(Error::ShapeMismatch(format!(
                "input {} != expected {}",
                input.len(),
                self.input_len()
            )));
        }
        let n_layers = self.weights.len();
        let mut post = Vec::with_capacity(n_layers);
        let mut cur = input.to_vec();
        for l in 0..n_layers {
            let w = &self.weights[l];
            w.check()?;
            let b = &self.biases[l];
            let mut z = vec![0.0; w.rows];
            for r in 0..w.rows {
                let row = &w.data[r * w.cols..(r + 1) * w.cols];
                let mut acc = b[r];
                for (wv, xv) in row.iter().zip(&cur) {
                    acc += wv * xv;
                }
                z[r] = acc;
            }
            let last = l == n_layers - 1;
            let act = if last { self.final_activation } else { Activation::Tanh };
            if act == Activation::Tanh {
                for v in &mut z {
                    *v = v.tanh();
                }
            }
            post.push(z.clone());
            cur = z;
        }
        for v in &cur {
            if !v.is_finite() {
                return Err(Error::NonFinite("network output".into()));
            }
        }
        let cache = FwdCache {
            input: input.to_vec(),
            post,
        };
        Ok((cur, cache))
    }

    /// Reverse-mode gradients of a scalar objective with the given gradient
    /// at the network output. Returns parameter gradients and the gradient
    /// with respect to the input.
    pub fn backward(&self, cache: &FwdCache, d_out: &[f64]) -> Result<(MlpGrads, Vec<f64>)> {
        if d_out.len() != self.output_len() {
            return Err(Error::ShapeMismatch(format!(
                "output grad {} != expected {}",
                d_out.len(),
                self.output_len()
            )));
        }
        if cache.post.len() != self.weights.len() || cache.input.len() != self.input_len() {
            return Err(Error::ShapeMismatch("stale forward cache".into()));
        }
        let n_layers = self.weights.len();
        let mut grads = MlpGrads::zeros_like(self);
        let mut da = d_out.to_vec();
        for l in (0..n_layers).rev() {
            let w = &self.weights[l];
            let a_out = &cache.post[l];
            let a_in: &[f64] = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            let last = l == n_layers - 1;
            let act = if last { self.final_activation } else { Activation::Tanh };
            // dz = da * act'(z); for tanh layers post = tanh(z), so
            // act'(z) = 1 - post^2.
            let dz: Vec<f64> = match act {
                Activation::Linear => da.clone(),
                Activation::Tanh => da
                    .iter()
                    .zip(a_out)
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect(),
            };
            let dw = &mut grads.d_weights[l];
            for r in 0..w.rows {
                let g = dz[r];
                let drow = &mut dw.data[r * w.cols..(r + 1) * w.cols];
                for (dv, xv) in drow.iter_mut().zip(a_in) {
                    *dv += g * xv;
                }
            }
            for (db, g) in grads.d_biases[l].iter_mut().zip(&dz) {
                *db += *g;
            }
            let mut da_prev = vec![0.0; w.cols];
            for r in 0..w.rows {
                let g = dz[r];
                let row = &w.data[r * w.cols..(r + 1) * w.cols];
                for (dp, wv) in da_prev.iter_mut().zip(row) {
                    *dp += g * wv;
                }
            }
            da = da_prev;
        }
        Ok((grads, da))
    }
}

/// Scale `grad` in place so its Euclidean norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

/// Adam optimizer state over one flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(n_params: usize) -> AdamState {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update: clip the gradient to `max_grad_norm` globally, then
    /// apply bias-corrected moment estimates. `grad` is consumed clipped.
    pub fn step(
        &mut self,
        params: &mut [f64],
        grad: &mut [f64],
        lr: f64,
        max_grad_norm: f64,
    ) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam sizes: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        clip_global_norm(grad, max_grad_norm);
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient entry {i}")));
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mhat = self.m[i] / b1t;
            let vhat = self.v[i] / b2t;
            params[i] -= lr * mhat / (vhat.sqrt() + self.eps);
            if !params[i].is_finite() {
                return Err(Error::NonFinite(format!("parameter {i} after update")));
            }
        }
        Ok(())
    }
}
