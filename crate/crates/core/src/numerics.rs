//! Dense kernels with explicit backward passes, a finite-difference checker
//! and Adam.
//!
//! Backward functions *accumulate* into parameter gradients (`+=`) and return
//! the gradient with respect to their vector input, so callers can chain them
//! in reverse order of the forward pass.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch {
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Binary layout: `u32` rank, `u64` dims, `u8` dtype (0 = f32, 1 = f64),
    /// then the values; all little-endian.
    pub fn write_to(&self, w: &mut impl Write, dtype: DType) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[dtype as u8])?;
        match dtype {
            DType::F32 => {
                for &x in &self.data {
                    w.write_all(&(x as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for &x in &self.data {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated tensor: {e}"));
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4).map_err(bad)?;
        let rank = u32::from_le_bytes(b4) as usize;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("tensor rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut b8 = [0u8; 8];
        for _ in 0..rank {
            r.read_exact(&mut b8).map_err(bad)?;
            shape.push(u64::from_le_bytes(b8) as usize);
        }
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(bad)?;
        let n: usize = shape.iter().product();
        let data = match tag[0] {
            0 => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf).map_err(bad)?;
                buf.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            1 => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf).map_err(bad)?;
                buf.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
            t => return Err(Error::Checkpoint(format!("unknown dtype tag {t}"))),
        };
        Ok(Tensor { shape, data })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

/// `w · x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.cols();
    debug_assert_eq!(cols, x.len());
    w.data
        .chunks_exact(cols)
        .map(|row| dot(row, x))
        .collect()
}

/// `w · x + b`.
pub fn affine(w: &Tensor, x: &[f64], b: &[f64]) -> Vec<f64> {
    let mut y = matvec(w, x);
    for (y, b) in y.iter_mut().zip(b) {
        *y += b;
    }
    y
}

/// Backward of [`affine`] (and of [`matvec`] when `gb` is `None`).
/// Accumulates `gw += gy xᵀ`, `gb += gy`; returns `wᵀ gy`.
pub fn affine_backward(
    w: &Tensor,
    x: &[f64],
    gy: &[f64],
    gw: &mut Tensor,
    gb: Option<&mut [f64]>,
) -> Vec<f64> {
    let cols = w.cols();
    let mut gx = vec![0.0; cols];
    for (r, &g) in gy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let wr = &w.data[r * cols..(r + 1) * cols];
        let gwr = &mut gw.data[r * cols..(r + 1) * cols];
        for c in 0..cols {
            gwr[c] += g * x[c];
            gx[c] += g * wr[c];
        }
    }
    if let Some(gb) = gb {
        for (b, g) in gb.iter_mut().zip(gy) {
            *b += g;
        }
    }
    gx
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    pub fn forward(self, xs: &mut [f64]) {
        xs.iter_mut().for_each(|x| *x = self.apply(*x));
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
        }
    }

    pub fn backward(self, ys: &[f64], gy: &[f64]) -> Vec<f64> {
        ys.iter()
            .zip(gy)
            .map(|(&y, &g)| g * self.derivative_from_output(y))
            .collect()
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::Invalid(format!("unknown activation `{other}`"))),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted softmax.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut y: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= sum);
    y
}

/// `gx_i = y_i (gy_i − Σ_j y_j gy_j)`.
pub fn softmax_backward(y: &[f64], gy: &[f64]) -> Vec<f64> {
    let inner = dot(y, gy);
    y.iter().zip(gy).map(|(y, g)| y * (g - inner)).collect()
}

pub fn mean_pool(vectors: &[&[f64]]) -> Vec<f64> {
    let d = vectors[0].len();
    let mut out = vec![0.0; d];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// Every input receives `gy / n`.
pub fn mean_pool_backward(n: usize, gy: &[f64]) -> Vec<f64> {
    gy.iter().map(|g| g / n as f64).collect()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Backward of [`concat`]: splits the upstream gradient at `left_len`.
pub fn concat_backward(gy: &[f64], left_len: usize) -> (&[f64], &[f64]) {
    gy.split_at(left_len)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradients of `g · dot(a, b)` with respect to `a` and `b`.
pub fn dot_backward(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    (
        b.iter().map(|x| g * x).collect(),
        a.iter().map(|x| g * x).collect(),
    )
}

pub fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Compares the analytic gradient returned by `f` at `x` with central
/// differences. Returns the largest
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)` over coordinates.
pub fn grad_check<F>(mut f: F, x: &[f64], eps: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(x);
    assert_eq!(analytic.len(), x.len(), "gradient length must match input");
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let (up, _) = f(&probe);
        probe[i] = x[i] - eps;
        let (down, _) = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * eps);
        let err = (analytic[i] - numeric).abs() / 1f64.max(analytic[i].abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        AdamState {
            config,
            step: 0,
            first_moment: params.iter().map(|p| p.zeros_like()).collect(),
            second_moment: params.iter().map(|p| p.zeros_like()).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::Invalid(format!(
                "adam expects {} tensors, got {} params and {} grads",
                self.first_moment.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape != g.shape || p.shape != self.first_moment[k].shape {
                return Err(Error::ShapeMismatch {
                    expected: self.first_moment[k].shape.clone(),
                    actual: g.shape.clone(),
                });
            }
            let m = &mut self.first_moment[k].data;
            let v = &mut self.second_moment[k].data;
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
