//! Three-layer perceptrons with analytic backpropagation and Adam.
//!
//! Parameters live in one flat buffer, layer-major:
//! `W1 (n1×n0, row-major) | b1 | W2 (n2×n1, row-major) | b2`. Gradients,
//! Adam moments, Polyak averaging and federated exchange all work on that
//! buffer directly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Linear,
}

impl Activation {
    fn tag(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Linear => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        match t {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Linear),
            _ => Err(Error::Format(format!("unknown activation tag {t}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub n_in: usize,
    pub n_hidden: usize,
    pub n_out: usize,
    pub output: Activation,
}

impl MlpDims {
    /// Hidden width `round(eta · n_in)`.
    pub fn with_eta(n_in: usize, eta: f64, n_out: usize, output: Activation) -> Self {
        let n_hidden = ((eta * n_in as f64).round() as usize).max(1);
        Self { n_in, n_hidden, n_out, output }
    }

    pub fn param_count(&self) -> usize {
        self.n_hidden * self.n_in + self.n_hidden + self.n_out * self.n_hidden + self.n_out
    }

    fn offsets(&self) -> [usize; 4] {
        let w1 = 0;
        let b1 = self.n_hidden * self.n_in;
        let w2 = b1 + self.n_hidden;
        let b2 = w2 + self.n_out * self.n_hidden;
        [w1, b1, w2, b2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: MlpDims,
    params: Vec<f64>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

impl Mlp {
    /// Uniform initialization in `±1/√fan_in`.
    pub fn new<R: Rng + ?Sized>(dims: MlpDims, rng: &mut R) -> Self {
        let [_, b1, w2, b2] = dims.offsets();
        let mut params = vec![0.0; dims.param_count()];
        let lim1 = 1.0 / (dims.n_in as f64).sqrt();
        let lim2 = 1.0 / (dims.n_hidden as f64).sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let lim = if i < w2 { lim1 } else { lim2 };
            *p = rng.random_range(-lim..=lim);
        }
        debug_assert!(b1 < w2 && w2 < b2);
        Self { dims, params }
    }

    pub fn zeros(dims: MlpDims) -> Self {
        Self { dims, params: vec![0.0; dims.param_count()] }
    }

    pub fn from_params(dims: MlpDims, params: Vec<f64>) -> Result<Self> {
        shape_check(dims.param_count(), params.len())?;
        Ok(Self { dims, params })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_cached(x)?.output)
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache> {
        let d = self.dims;
        shape_check(d.n_in, x.len())?;
        let [w1, b1, w2, b2] = d.offsets();
        let p = &self.params;
        let hidden: Vec<f64> = (0..d.n_hidden)
            .map(|j| {
                let row = &p[w1 + j * d.n_in..w1 + (j + 1) * d.n_in];
                tanh(dot(row, x) + p[b1 + j])
            })
            .collect();
        let output = (0..d.n_out)
            .map(|o| {
                let row = &p[w2 + o * d.n_hidden..w2 + (o + 1) * d.n_hidden];
                let z = dot(row, &hidden) + p[b2 + o];
                match d.output {
                    Activation::Tanh => tanh(z),
                    Activation::Linear => z,
                }
            })
            .collect();
        Ok(ForwardCache { input: x.to_vec(), hidden, output })
    }

    /// Backpropagates `upstream = ∂L/∂y`.
    ///
    /// Parameter gradients are accumulated into `grads` when given; the
    /// gradient with respect to the input is returned.
    pub fn backward(&self, cache: &ForwardCache, upstream: &[f64], grads: Option<&mut [f64]>) -> Result<Vec<f64>> {
        let d = self.dims;
        shape_check(d.n_out, upstream.len())?;
        shape_check(d.n_in, cache.input.len())?;
        let [w1, b1, w2, b2] = d.offsets();
        let p = &self.params;
        let delta_out: Vec<f64> = match d.output {
            Activation::Tanh => upstream.iter().zip(&cache.output).map(|(g, y)| g * (1.0 - y * y)).collect(),
            Activation::Linear => upstream.to_vec(),
        };
        let mut delta_hidden = vec![0.0; d.n_hidden];
        for (o, &dout) in delta_out.iter().enumerate() {
            if dout == 0.0 {
                continue;
            }
            let row = &p[w2 + o * d.n_hidden..w2 + (o + 1) * d.n_hidden];
            axpy(dout, row, &mut delta_hidden);
        }
        for (dh, h) in delta_hidden.iter_mut().zip(&cache.hidden) {
            *dh *= 1.0 - h * h;
        }
        let mut grad_in = vec![0.0; d.n_in];
        for (j, &dh) in delta_hidden.iter().enumerate() {
            if dh == 0.0 {
                continue;
            }
            axpy(dh, &p[w1 + j * d.n_in..w1 + (j + 1) * d.n_in], &mut grad_in);
        }
        if let Some(g) = grads {
            shape_check(self.params.len(), g.len())?;
            for (o, &dout) in delta_out.iter().enumerate() {
                g[b2 + o] += dout;
                axpy(dout, &cache.hidden, &mut g[w2 + o * d.n_hidden..w2 + (o + 1) * d.n_hidden]);
            }
            for (j, &dh) in delta_hidden.iter().enumerate() {
                g[b1 + j] += dh;
                axpy(dh, &cache.input, &mut g[w1 + j * d.n_in..w1 + (j + 1) * d.n_in]);
            }
        }
        Ok(grad_in)
    }

    /// `θ' ← (1−τ)·θ' + τ·θ`.
    pub fn polyak_update(&mut self, source: &Mlp, tau: f64) -> Result<()> {
        if self.dims != source.dims {
            return Err(Error::Shape { expected: self.param_count(), got: source.param_count() });
        }
        if !(tau > 0.0 && tau <= 1.0) {
            return Err(Error::Domain(format!("Polyak factor {tau} outside (0, 1]")));
        }
        if tau == 1.0 {
            self.params.copy_from_slice(&source.params);
            return Ok(());
        }
        for (t, s) in self.params.iter_mut().zip(&source.params) {
            *t += tau * (s - *t);
        }
        Ok(())
    }

    pub fn to_param_vector(&self) -> ParamVector {
        ParamVector { version: ParamVector::VERSION, dims: self.dims, values: self.params.clone() }
    }

    pub fn from_param_vector(pv: &ParamVector, dims: MlpDims) -> Result<Self> {
        if pv.version != ParamVector::VERSION {
            return Err(Error::Format(format!(
                "parameter layout version {} (expected {})",
                pv.version,
                ParamVector::VERSION
            )));
        }
        if pv.dims != dims {
            return Err(Error::Format("parameter vector dims do not match network".into()));
        }
        Self::from_params(dims, pv.values.clone())
    }
}

/// Row-major activations of a whole minibatch.
#[derive(Debug, Clone)]
pub struct BatchCache {
    pub rows: usize,
    /// `rows × n_in`.
    pub input: Vec<f64>,
    /// `rows × n_hidden`.
    pub hidden: Vec<f64>,
    /// `rows × n_out`.
    pub output: Vec<f64>,
}

/// `C (m×n) = A (m×k) · B (k×n) + beta·C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the callers size `a`, `b` and `c` to cover every strided
    // element addressed for the given dimensions.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    /// Forward pass over `rows` inputs stored row-major in `x`.
    pub fn forward_batch(&self, x: &[f64], rows: usize) -> Result<BatchCache> {
        let d = self.dims;
        shape_check(rows * d.n_in, x.len())?;
        let [w1, b1, w2, b2] = d.offsets();
        let p = &self.params;
        let mut hidden = vec![0.0; rows * d.n_hidden];
        for r in 0..rows {
            hidden[r * d.n_hidden..(r + 1) * d.n_hidden].copy_from_slice(&p[b1..w2]);
        }
        gemm(rows, d.n_in, d.n_hidden, x, d.n_in, 1, &p[w1..b1], 1, d.n_in, 1.0, &mut hidden);
        hidden.iter_mut().for_each(|h| *h = tanh(*h));
        let mut output = vec![0.0; rows * d.n_out];
        for r in 0..rows {
            output[r * d.n_out..(r + 1) * d.n_out].copy_from_slice(&p[b2..]);
        }
        gemm(rows, d.n_hidden, d.n_out, &hidden, d.n_hidden, 1, &p[w2..b2], 1, d.n_hidden, 1.0, &mut output);
        if d.output == Activation::Tanh {
            output.iter_mut().for_each(|y| *y = tanh(*y));
        }
        Ok(BatchCache { rows, input: x.to_vec(), hidden, output })
    }

    /// Batched backward pass for `upstream = ∂L/∂Y` (`rows × n_out`).
    /// Parameter gradients are summed over rows into `grads` when given;
    /// input gradients (`rows × n_in`) are returned when `want_input` is set.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        upstream: &[f64],
        grads: Option<&mut [f64]>,
        want_input: bool,
    ) -> Result<Vec<f64>> {
        let d = self.dims;
        let rows = cache.rows;
        shape_check(rows * d.n_out, upstream.len())?;
        let [w1, b1, w2, b2] = d.offsets();
        let p = &self.params;
        let delta_out: Vec<f64> = match d.output {
            Activation::Tanh => upstream.iter().zip(&cache.output).map(|(g, y)| g * (1.0 - y * y)).collect(),
            Activation::Linear => upstream.to_vec(),
        };
        let mut delta_hidden = vec![0.0; rows * d.n_hidden];
        gemm(rows, d.n_out, d.n_hidden, &delta_out, d.n_out, 1, &p[w2..b2], d.n_hidden, 1, 0.0, &mut delta_hidden);
        for (dh, h) in delta_hidden.iter_mut().zip(&cache.hidden) {
            *dh *= 1.0 - h * h;
        }
        let mut grad_in = Vec::new();
        if want_input {
            grad_in = vec![0.0; rows * d.n_in];
            gemm(rows, d.n_hidden, d.n_in, &delta_hidden, d.n_hidden, 1, &p[w1..b1], d.n_in, 1, 0.0, &mut grad_in);
        }
        if let Some(g) = grads {
            shape_check(self.params.len(), g.len())?;
            // dW2 += δ_outᵀ H, dW1 += δ_hᵀ X.
            gemm(d.n_out, rows, d.n_hidden, &delta_out, 1, d.n_out, &cache.hidden, d.n_hidden, 1, 1.0, &mut g[w2..b2]);
            gemm(d.n_hidden, rows, d.n_in, &delta_hidden, 1, d.n_hidden, &cache.input, d.n_in, 1, 1.0, &mut g[w1..b1]);
            for r in 0..rows {
                axpy(1.0, &delta_out[r * d.n_out..(r + 1) * d.n_out], &mut g[b2..]);
                axpy(1.0, &delta_hidden[r * d.n_hidden..(r + 1) * d.n_hidden], &mut g[b1..w2]);
            }
        }
        Ok(grad_in)
    }
}

/// `tanh` through a single `exp`; absolute error within a few ulps of 1,
/// several times cheaper than the libm routine.
#[inline]
pub fn tanh(x: f64) -> f64 {
    let a = x.abs();
    if a > 20.0 {
        return 1.0f64.copysign(x);
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(x)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Flattened network parameters, the unit of federated exchange and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub version: u8,
    pub dims: MlpDims,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub const VERSION: u8 = 1;

    /// Wire layout: version byte, activation tag, `n0, n1, n2` as u32 LE,
    /// value count as u64 LE, then f64 LE values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + 8 * self.values.len());
        out.push(self.version);
        out.push(self.dims.output.tag());
        for d in [self.dims.n_in, self.dims.n_hidden, self.dims.n_out] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(self.values.len() as u64).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses one vector from the front of `bytes`, returning it and the bytes consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let take = |at: usize, len: usize| -> Result<&[u8]> {
            bytes.get(at..at + len).ok_or_else(|| Error::Format("truncated parameter vector".into()))
        };
        let version = take(0, 1)?[0];
        if version != Self::VERSION {
            return Err(Error::Format(format!("parameter layout version {version} (expected {})", Self::VERSION)));
        }
        let output = Activation::from_tag(take(1, 1)?[0])?;
        let u32_at = |at: usize| -> Result<usize> { Ok(u32::from_le_bytes(take(at, 4)?.try_into().unwrap()) as usize) };
        let dims = MlpDims { n_in: u32_at(2)?, n_hidden: u32_at(6)?, n_out: u32_at(10)?, output };
        let len = u64::from_le_bytes(take(14, 8)?.try_into().unwrap()) as usize;
        if len != dims.param_count() {
            return Err(Error::Format(format!("parameter count {len} does not match dims ({})", dims.param_count())));
        }
        let body = take(22, 8 * len)?;
        let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Ok((Self { version, dims, values }, 22 + 8 * len))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(param_count: usize, lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: vec![0.0; param_count], v: vec![0.0; param_count] }
    }

    /// One bias-corrected Adam descent step on `net` along `grads`.
    pub fn step(&mut self, net: &mut Mlp, grads: &[f64]) -> Result<()> {
        shape_check(net.param_count(), grads.len())?;
        shape_check(self.m.len(), grads.len())?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in net.params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in [self.lr, self.beta1, self.beta2, self.eps] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for x in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize)> {
        let f = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(i * 8..i * 8 + 8)
                .map(|s| s.try_into().unwrap())
                .ok_or_else(|| Error::Format("truncated optimizer state".into()))
        };
        let [lr, beta1, beta2, eps] = [0, 1, 2, 3].map(|i| f(i).map(f64::from_le_bytes));
        let step = u64::from_le_bytes(f(4)?);
        let len = u64::from_le_bytes(f(5)?) as usize;
        let mut vals = Vec::with_capacity(2 * len);
        for i in 0..2 * len {
            vals.push(f64::from_le_bytes(f(6 + i)?));
        }
        let v = vals.split_off(len);
        Ok((Self { lr: lr?, beta1: beta1?, beta2: beta2?, eps: eps?, step, m: vals, v }, (6 + 2 * len) * 8))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn net(seed: u64, n_in: usize, n_hidden: usize, n_out: usize, output: Activation) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mlp::new(MlpDims { n_in, n_hidden, n_out, output }, &mut rng);
        // Spread weights beyond the init range so every nonlinearity is exercised.
        m.params_mut().iter_mut().for_each(|p| *p *= 2.0);
        m
    }

    /// Per-neuron scalar loops, independent of the slice helpers above.
    fn loop_forward(m: &Mlp, x: &[f64]) -> Vec<f64> {
        let d = m.dims();
        let p = m.params();
        let mut h = vec![0.0; d.n_hidden];
        for j in 0..d.n_hidden {
            let mut z = p[d.n_hidden * d.n_in + j];
            for i in 0..d.n_in {
                z += p[j * d.n_in + i] * x[i];
            }
            h[j] = z.tanh();
        }
        let w2 = d.n_hidden * d.n_in + d.n_hidden;
        let b2 = w2 + d.n_out * d.n_hidden;
        (0..d.n_out)
            .map(|o| {
                let mut z = p[b2 + o];
                for j in 0..d.n_hidden {
                    z += p[w2 + o * d.n_hidden + j] * h[j];
                }
                if d.output == Activation::Tanh {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect()
    }

    #[test]
    fn forward_matches_scalar_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..10 {
            for act in [Activation::Tanh, Activation::Linear] {
                let m = net(seed, 5, 7, 3, act);
                let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
                let a = m.forward(&x).unwrap();
                let b = loop_forward(&m, &x);
                for (u, v) in a.iter().zip(&b) {
                    assert!((u - v).abs() <= 1e-14 * v.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn forward_trivial_nets() {
        let zero = Mlp::zeros(MlpDims { n_in: 3, n_hidden: 4, n_out: 2, output: Activation::Tanh });
        assert_eq!(zero.forward(&[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        let dims = MlpDims { n_in: 1, n_hidden: 1, n_out: 1, output: Activation::Tanh };
        let one = Mlp::from_params(dims, vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let y = one.forward(&[0.7]).unwrap()[0];
        assert!((y - 0.7f64.tanh().tanh()).abs() <= 8.0 * f64::EPSILON);
        assert!(one.forward(&[0.7, 1.0]).is_err());
    }

    fn finite_difference_check(m: &Mlp, x: &[f64], up: &[f64]) -> f64 {
        let loss = |net: &Mlp, x: &[f64]| -> f64 { net.forward(x).unwrap().iter().zip(up).map(|(y, u)| y * u).sum() };
        let cache = m.forward_cached(x).unwrap();
        let mut grads = vec![0.0; m.param_count()];
        let gin = m.backward(&cache, up, Some(&mut grads)).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
        for i in 0..m.param_count() {
            let mut p = m.clone();
            p.params_mut()[i] += h;
            let fp = loss(&p, x);
            p.params_mut()[i] -= 2.0 * h;
            let fm = loss(&p, x);
            worst = worst.max(rel(grads[i], (fp - fm) / (2.0 * h)));
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let fp = loss(m, &xp);
            xp[i] -= 2.0 * h;
            let fm = loss(m, &xp);
            worst = worst.max(rel(gin[i], (fp - fm) / (2.0 * h)));
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..10 {
            for act in [Activation::Tanh, Activation::Linear] {
                let m = net(seed, 4, 8, 2, act);
                let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                let up: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
                let err = finite_difference_check(&m, &x, &up);
                assert!(err <= 1e-5, "seed {seed} {act:?}: {err}");
            }
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let m = net(3, 3, 5, 2, Activation::Tanh);
        let cache = m.forward_cached(&[0.1, 0.2, 0.3]).unwrap();
        let mut grads = vec![0.0; m.param_count()];
        let gin = m.backward(&cache, &[0.0, 0.0], Some(&mut grads)).unwrap();
        assert!(grads.iter().chain(&gin).all(|g| *g == 0.0));
    }

    #[test]
    fn linear_head_bias_gradient_is_upstream() {
        let m = net(4, 3, 5, 2, Activation::Linear);
        let cache = m.forward_cached(&[0.1, -0.2, 0.3]).unwrap();
        let mut grads = vec![0.0; m.param_count()];
        m.backward(&cache, &[0.25, -1.5], Some(&mut grads)).unwrap();
        let n = grads.len();
        assert_eq!(&grads[n - 2..], &[0.25, -1.5]);
    }

    #[test]
    fn tanh_matches_libm() {
        let mut r = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100_000 {
            let x: f64 = r.random_range(-25.0..25.0) * r.random::<f64>().powi(3);
            assert!((tanh(x) - x.tanh()).abs() <= 4.0 * f64::EPSILON, "{x}");
        }
        assert_eq!(tanh(0.0), 0.0);
        assert_eq!(tanh(-50.0), -1.0);
    }

    #[test]
    fn batch_passes_match_per_sample_passes() {
        let mut r = ChaCha8Rng::seed_from_u64(40);
        for output in [Activation::Tanh, Activation::Linear] {
            let m = net(41, 5, 7, 3, output);
            let rows = 6;
            let x: Vec<f64> = (0..rows * 5).map(|_| r.random_range(-2.0..2.0)).collect();
            let up: Vec<f64> = (0..rows * 3).map(|_| r.random_range(-1.0..1.0)).collect();
            let cache = m.forward_batch(&x, rows).unwrap();
            let mut g_batch = vec![0.0; m.param_count()];
            let gin = m.backward_batch(&cache, &up, Some(&mut g_batch), true).unwrap();
            let mut g_loop = vec![0.0; m.param_count()];
            for i in 0..rows {
                let c = m.forward_cached(&x[i * 5..(i + 1) * 5]).unwrap();
                for (a, b) in c.output.iter().zip(&cache.output[i * 3..(i + 1) * 3]) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
                let gi = m.backward(&c, &up[i * 3..(i + 1) * 3], Some(&mut g_loop)).unwrap();
                for (a, b) in gi.iter().zip(&gin[i * 5..(i + 1) * 5]) {
                    assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
                }
            }
            for (a, b) in g_loop.iter().zip(&g_batch) {
                assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_weights() {
        let mut m = net(5, 2, 3, 1, Activation::Linear);
        let before = m.clone();
        let mut opt = AdamState::new(m.param_count(), 1e-3);
        opt.step(&mut m, &vec![0.0; before.param_count()]).unwrap();
        assert_eq!(m, before);
        assert!(opt.m.iter().chain(&opt.v).all(|v| *v == 0.0));
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut m = net(6, 2, 3, 1, Activation::Linear);
        let before = m.params().to_vec();
        let grads: Vec<f64> = (0..m.param_count()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        let mut opt = AdamState::new(m.param_count(), 1e-3);
        opt.step(&mut m, &grads).unwrap();
        for ((a, b), g) in m.params().iter().zip(&before).zip(&grads) {
            // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
            let expect = -1e-3 * g / (g.abs() + 1e-8);
            assert!(((a - b) - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_is_reproducible() {
        let grads = vec![0.1; net(7, 2, 3, 1, Activation::Linear).param_count()];
        let run = || {
            let mut m = net(7, 2, 3, 1, Activation::Linear);
            let mut opt = AdamState::new(m.param_count(), 1e-2);
            opt.step(&mut m, &grads).unwrap();
            opt.step(&mut m, &grads).unwrap();
            (m, opt)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn polyak_cases() {
        let src = net(8, 2, 3, 2, Activation::Tanh);
        let mut tgt = net(9, 2, 3, 2, Activation::Tanh);
        tgt.polyak_update(&src, 1.0).unwrap();
        assert_eq!(tgt, src);
        let mut same = src.clone();
        same.polyak_update(&src, 0.3).unwrap();
        assert_eq!(same, src);

        let dims = MlpDims { n_in: 1, n_hidden: 1, n_out: 1, output: Activation::Linear };
        let mut z = Mlp::zeros(dims);
        let two = Mlp::from_params(dims, vec![2.0; 4]).unwrap();
        z.polyak_update(&two, 0.5).unwrap();
        assert_eq!(z.params(), &[1.0; 4]);
        assert!(z.polyak_update(&src, 0.5).is_err());
        assert!(z.polyak_update(&two, 0.0).is_err());
    }

    #[test]
    fn polyak_contracts_geometrically() {
        let src = net(10, 3, 4, 2, Activation::Tanh);
        let mut tgt = net(11, 3, 4, 2, Activation::Tanh);
        let tau = 0.1;
        let gap0: Vec<f64> = tgt.params().iter().zip(src.params()).map(|(a, b)| a - b).collect();
        for _ in 0..25 {
            tgt.polyak_update(&src, tau).unwrap();
        }
        let factor = (1.0f64 - tau).powi(25);
        for ((a, b), g0) in tgt.params().iter().zip(src.params()).zip(&gap0) {
            assert!(((a - b) - factor * g0).abs() <= 1e-12 * g0.abs().max(1e-3));
        }
    }

    #[test]
    fn param_vector_layout() {
        let m = net(12, 4, 6, 3, Activation::Tanh);
        assert_eq!(m.param_count(), 6 * 4 + 6 + 3 * 6 + 3);
        let bytes = m.to_param_vector().to_bytes();
        let (pv, used) = ParamVector::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(Mlp::from_param_vector(&pv, m.dims()).unwrap(), m);
        assert!(ParamVector::from_bytes(&bytes[..bytes.len() - 8]).is_err());
        let mut bad = bytes.clone();
        bad[14] ^= 1;
        assert!(ParamVector::from_bytes(&bad).is_err());
        let mut ver = bytes;
        ver[0] = 9;
        assert!(ParamVector::from_bytes(&ver).is_err());
        let short = ParamVector { values: vec![0.0; 3], ..m.to_param_vector() };
        assert!(Mlp::from_param_vector(&short, m.dims()).is_err());
    }

    #[test]
    fn adam_state_round_trip() {
        let mut m = net(13, 2, 3, 1, Activation::Linear);
        let mut opt = AdamState::new(m.param_count(), 1e-3);
        let g = vec![0.2; m.param_count()];
        opt.step(&mut m, &g).unwrap();
        let bytes = opt.to_bytes();
        let (back, used) = AdamState::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, opt);
    }

    proptest! {
        #[test]
        fn tanh_head_is_bounded(seed in 0u64..1000, scale in 0.1f64..50.0) {
            let m = net(seed, 3, 5, 4, Activation::Tanh);
            let x = [scale, -scale, 0.5 * scale];
            let y = m.forward(&x).unwrap();
            prop_assert!(y.iter().all(|v| v.abs() <= 1.0));
        }

        #[test]
        fn serialization_is_bit_exact(seed in 0u64..1000) {
            let m = net(seed, 3, 4, 2, Activation::Linear);
            let (pv, _) = ParamVector::from_bytes(&m.to_param_vector().to_bytes()).unwrap();
            prop_assert_eq!(Mlp::from_param_vector(&pv, m.dims()).unwrap(), m);
        }
    }
}
