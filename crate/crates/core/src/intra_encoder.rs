//! Intra-sequence encoder: a GRU over the fused context items, a
//! user-personalized attention over its hidden states, and the final
//! interest vector `s = W_h [Σ a_j h_j ; h_L]`.

use rand::Rng;

use crate::numerics::{self, affine, affine_backward, concat, matvec, softmax, softmax_backward, Activation, Tensor};

/// Standard GRU cell weights; the initial hidden state is zero.
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// c  = tanh(W_c x + U_c (r ⊙ h) + b_c)
/// h' = (1 − z) ⊙ h + z ⊙ c
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_c: Tensor,
    pub u_c: Tensor,
    pub b_c: Tensor,
}

impl GruParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut m = || Tensor::uniform(&[dim, dim], bound, rng);
        let (w_z, u_z, w_r, u_r, w_c, u_c) = (m(), m(), m(), m(), m(), m());
        GruParams {
            w_z,
            u_z,
            b_z: Tensor::zeros(&[dim]),
            w_r,
            u_r,
            b_r: Tensor::zeros(&[dim]),
            w_c,
            u_c,
            b_c: Tensor::zeros(&[dim]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_c, &self.u_c, &self.b_c,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_c,
            &mut self.u_c,
            &mut self.b_c,
        ]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }
}

#[derive(Debug, Clone)]
struct GruStep {
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    c: Vec<f64>,
    rh: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GruPass {
    pub hidden: Vec<Vec<f64>>,
    steps: Vec<GruStep>,
}

fn gate(w: &Tensor, x: &[f64], u: &Tensor, h: &[f64], b: &Tensor, act: Activation) -> Vec<f64> {
    let mut y = affine(w, x, &b.data);
    numerics::add_into(&mut y, &matvec(u, h));
    act.forward(&mut y);
    y
}

pub fn gru_forward(xs: &[Vec<f64>], params: &GruParams) -> GruPass {
    assert!(!xs.is_empty(), "GRU needs at least one step");
    let dim = params.b_z.len();
    let mut h = vec![0.0; dim];
    let mut hidden = Vec::with_capacity(xs.len());
    let mut steps = Vec::with_capacity(xs.len());
    for x in xs {
        let z = gate(&params.w_z, x, &params.u_z, &h, &params.b_z, Activation::Sigmoid);
        let r = gate(&params.w_r, x, &params.u_r, &h, &params.b_r, Activation::Sigmoid);
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let c = gate(&params.w_c, x, &params.u_c, &rh, &params.b_c, Activation::Tanh);
        let next: Vec<f64> = (0..dim).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        steps.push(GruStep {
            h_prev: std::mem::replace(&mut h, next.clone()),
            z,
            r,
            c,
            rh,
        });
        hidden.push(next);
    }
    GruPass { hidden, steps }
}

/// Backpropagation through time. `grad_hidden[t]` is the gradient arriving
/// at `h_t` from outside the recurrence; returns gradients for each input.
pub fn gru_backward(
    xs: &[Vec<f64>],
    pass: &GruPass,
    grad_hidden: &[Vec<f64>],
    params: &GruParams,
    grads: &mut GruParams,
) -> Vec<Vec<f64>> {
    let dim = params.b_z.len();
    let mut g_xs = vec![vec![0.0; xs[0].len()]; xs.len()];
    let mut carry = vec![0.0; dim];
    for t in (0..xs.len()).rev() {
        let s = &pass.steps[t];
        let gh: Vec<f64> = grad_hidden[t].iter().zip(&carry).map(|(a, b)| a + b).collect();
        let mut g_prev: Vec<f64> = (0..dim).map(|i| gh[i] * (1.0 - s.z[i])).collect();
        let gz_pre: Vec<f64> = (0..dim)
            .map(|i| gh[i] * (s.c[i] - s.h_prev[i]) * s.z[i] * (1.0 - s.z[i]))
            .collect();
        let gc_pre: Vec<f64> = (0..dim)
            .map(|i| gh[i] * s.z[i] * (1.0 - s.c[i] * s.c[i]))
            .collect();

        let x = &xs[t];
        let gx_c = affine_backward(&params.w_c, x, &gc_pre, &mut grads.w_c, Some(&mut grads.b_c.data));
        let g_rh = affine_backward(&params.u_c, &s.rh, &gc_pre, &mut grads.u_c, None);
        let gr_pre: Vec<f64> = (0..dim)
            .map(|i| g_rh[i] * s.h_prev[i] * s.r[i] * (1.0 - s.r[i]))
            .collect();
        for i in 0..dim {
            g_prev[i] += g_rh[i] * s.r[i];
        }
        let gx_z = affine_backward(&params.w_z, x, &gz_pre, &mut grads.w_z, Some(&mut grads.b_z.data));
        numerics::add_into(&mut g_prev, &affine_backward(&params.u_z, &s.h_prev, &gz_pre, &mut grads.u_z, None));
        let gx_r = affine_backward(&params.w_r, x, &gr_pre, &mut grads.w_r, Some(&mut grads.b_r.data));
        numerics::add_into(&mut g_prev, &affine_backward(&params.u_r, &s.h_prev, &gr_pre, &mut grads.u_r, None));

        let gx = &mut g_xs[t];
        numerics::add_into(gx, &gx_c);
        numerics::add_into(gx, &gx_z);
        numerics::add_into(gx, &gx_r);
        carry = g_prev;
    }
    g_xs
}

/// Attention MLP: `a'_j = w_1 · act(W_2 [e_u; h_j] + b_2) + b_1`.
/// `w_1` is a single row so each position gets one scalar score.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `d × 2d`
    pub w2: Tensor,
    pub b2: Tensor,
    /// `1 × d`
    pub w1: Tensor,
    /// `[1]`
    pub b1: Tensor,
}

impl AttentionParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        AttentionParams {
            w2: Tensor::uniform(&[dim, 2 * dim], bound, rng),
            b2: Tensor::zeros(&[dim]),
            w1: Tensor::uniform(&[1, dim], bound, rng),
            b1: Tensor::zeros(&[1]),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.w2, &self.b2, &self.w1, &self.b1]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w2, &mut self.b2, &mut self.w1, &mut self.b1]
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
        z
    }
}

#[derive(Debug, Clone)]
pub struct AttentionPass {
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

pub fn attention_forward(
    user: &[f64],
    hs: &[Vec<f64>],
    params: &AttentionParams,
    act: Activation,
) -> AttentionPass {
    let mut inputs = Vec::with_capacity(hs.len());
    let mut hidden = Vec::with_capacity(hs.len());
    let mut scores = Vec::with_capacity(hs.len());
    for h in hs {
        let input = concat(user, h);
        let mut a = affine(&params.w2, &input, &params.b2.data);
        act.forward(&mut a);
        scores.push(affine(&params.w1, &a, &params.b1.data)[0]);
        inputs.push(input);
        hidden.push(a);
    }
    let weights = softmax(&scores);
    AttentionPass {
        inputs,
        hidden,
        scores,
        weights,
    }
}

/// Softmax-normalized attention weights over the hidden states.
pub fn attention_weights(user: &[f64], hs: &[Vec<f64>], params: &AttentionParams, act: Activation) -> Vec<f64> {
    attention_forward(user, hs, params, act).weights
}

/// Returns `(∂/∂e_u, ∂/∂h_j)`.
pub fn attention_backward(
    pass: &AttentionPass,
    grad_weights: &[f64],
    params: &AttentionParams,
    act: Activation,
    grads: &mut AttentionParams,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = params.b2.len();
    let g_scores = softmax_backward(&pass.weights, grad_weights);
    let mut g_user = vec![0.0; dim];
    let mut g_hs = Vec::with_capacity(pass.inputs.len());
    for (j, &gs) in g_scores.iter().enumerate() {
        let g_hidden = affine_backward(&params.w1, &pass.hidden[j], &[gs], &mut grads.w1, Some(&mut grads.b1.data));
        let g_pre = act.backward(&pass.hidden[j], &g_hidden);
        let g_in = affine_backward(&params.w2, &pass.inputs[j], &g_pre, &mut grads.w2, Some(&mut grads.b2.data));
        numerics::add_into(&mut g_user, &g_in[..dim]);
        g_hs.push(g_in[dim..].to_vec());
    }
    (g_user, g_hs)
}

/// `W_h ∈ R^{d×2d}` mixing the attended state with the latest hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct InterestCombineParams {
    pub w_h: Tensor,
}

impl InterestCombineParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        InterestCombineParams {
            w_h: Tensor::uniform(&[dim, 2 * dim], 1.0 / (dim as f64).sqrt(), rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        InterestCombineParams {
            w_h: self.w_h.zeros_like(),
        }
    }
}

/// Returns `(s', s)` with `s' = Σ a_j h_j` and `s = W_h [s'; h_L]`.
pub fn interest(weights: &[f64], hs: &[Vec<f64>], w_h: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let mut attended = vec![0.0; hs[0].len()];
    for (a, h) in weights.iter().zip(hs) {
        for (s, x) in attended.iter_mut().zip(h) {
            *s += a * x;
        }
    }
    let s = matvec(w_h, &concat(&attended, hs.last().unwrap()));
    (attended, s)
}

/// Returns `(∂/∂weights, ∂/∂h_j)`.
pub fn interest_backward(
    weights: &[f64],
    hs: &[Vec<f64>],
    attended: &[f64],
    w_h: &Tensor,
    grad_s: &[f64],
    grad_w_h: &mut Tensor,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = attended.len();
    let last = hs.last().unwrap();
    let g_cat = affine_backward(w_h, &concat(attended, last), grad_s, grad_w_h, None);
    let (g_att, g_last) = g_cat.split_at(dim);
    let g_weights: Vec<f64> = hs.iter().map(|h| numerics::dot(g_att, h)).collect();
    let mut g_hs: Vec<Vec<f64>> = weights
        .iter()
        .map(|&a| g_att.iter().map(|g| a * g).collect())
        .collect();
    numerics::add_into(g_hs.last_mut().unwrap(), g_last);
    (g_weights, g_hs)
}

/// All intra-sequence weights.
#[derive(Debug, Clone, PartialEq)]
pub struct IntraParams {
    pub gru: GruParams,
    pub attention: AttentionParams,
    pub combine: InterestCombineParams,
}

impl IntraParams {
    pub fn init<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        IntraParams {
            gru: GruParams::init(dim, rng),
            attention: AttentionParams::init(dim, rng),
            combine: InterestCombineParams::init(dim, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        IntraParams {
            gru: self.gru.zeros_like(),
            attention: self.attention.zeros_like(),
            combine: self.combine.zeros_like(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct IntraPass {
    gru: GruPass,
    attention: Option<(AttentionPass, Vec<f64>)>,
    pub interest: Vec<f64>,
}

/// GRU → attention → interest. With `use_attention = false` the interest
/// vector is the last hidden state.
pub fn intra_forward(
    user: &[f64],
    xs: &[Vec<f64>],
    params: &IntraParams,
    use_attention: bool,
    act: Activation,
) -> IntraPass {
    let gru = gru_forward(xs, &params.gru);
    if use_attention {
        let att = attention_forward(user, &gru.hidden, &params.attention, act);
        let (attended, s) = interest(&att.weights, &gru.hidden, &params.combine.w_h);
        IntraPass {
            gru,
            attention: Some((att, attended)),
            interest: s,
        }
    } else {
        let s = gru.hidden.last().unwrap().clone();
        IntraPass {
            gru,
            attention: None,
            interest: s,
        }
    }
}

/// Returns `(∂/∂e_u, ∂/∂x_j)`.
pub fn intra_backward(
    xs: &[Vec<f64>],
    pass: &IntraPass,
    grad_interest: &[f64],
    params: &IntraParams,
    act: Activation,
    grads: &mut IntraParams,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let dim = grad_interest.len();
    let (g_user, g_hidden) = match &pass.attention {
        Some((att, attended)) => {
            let (g_w, mut g_hs) = interest_backward(
                &att.weights,
                &pass.gru.hidden,
                attended,
                &params.combine.w_h,
                grad_interest,
                &mut grads.combine.w_h,
            );
            let (g_user, g_hs_att) = attention_backward(att, &g_w, &params.attention, act, &mut grads.attention);
            for (g, a) in g_hs.iter_mut().zip(&g_hs_att) {
                numerics::add_into(g, a);
            }
            (g_user, g_hs)
        }
        None => {
            let mut g_hs = vec![vec![0.0; dim]; xs.len()];
            g_hs.last_mut().unwrap().copy_from_slice(grad_interest);
            (vec![0.0; dim], g_hs)
        }
    };
    let g_xs = gru_backward(xs, &pass.gru, &g_hidden, &params.gru, &mut grads.gru);
    (g_user, g_xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, sigmoid};
    use crate::seed;

    fn rand_vecs(n: usize, d: usize, s: u64) -> Vec<Vec<f64>> {
        let mut rng = seed::rng(s, &[]);
        (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    }

    fn flatten(ts: &[&Tensor]) -> Vec<f64> {
        ts.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    fn assign(ts: Vec<&mut Tensor>, flat: &[f64]) -> usize {
        let mut off = 0;
        for t in ts {
            let n = t.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        off
    }

    #[test]
    fn zero_weights_zero_inputs() {
        let dim = 3;
        let p = GruParams::init(dim, &mut seed::rng(0, &[])).zeros_like();
        let pass = gru_forward(&vec![vec![0.0; dim]; 4], &p);
        assert!(pass.hidden.iter().flatten().all(|&h| h == 0.0));
    }

    #[test]
    fn single_step_by_hand() {
        // 2-dim: from h = 0, h' = z ⊙ c with z = σ(W_z x + b_z), c = tanh(W_c x + b_c)
        let mut p = GruParams::init(2, &mut seed::rng(0, &[])).zeros_like();
        p.w_z = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        p.b_z = Tensor::from_vec(&[2], vec![0.0, -1.0]).unwrap();
        p.w_c = Tensor::from_vec(&[2, 2], vec![0.5, 0.5, -1.0, 0.0]).unwrap();
        p.b_c = Tensor::from_vec(&[2], vec![0.1, 0.0]).unwrap();
        p.u_z = Tensor::identity(2);
        p.u_c = Tensor::identity(2);
        let x = vec![1.0, 2.0];
        let h = &gru_forward(&[x], &p).hidden[0];
        let z = [sigmoid(1.0), sigmoid(4.0 - 1.0)];
        let c = [(1.5f64 + 0.1).tanh(), (-1.0f64).tanh()];
        assert!((h[0] - z[0] * c[0]).abs() < 1e-12);
        assert!((h[1] - z[1] * c[1]).abs() < 1e-12);
    }

    #[test]
    fn gru_gradient_through_five_steps() {
        let dim = 3;
        let base = GruParams::init(dim, &mut seed::rng(1, &[]));
        let xs0 = rand_vecs(5, dim, 2);
        let ups = rand_vecs(5, dim, 3);
        let mut theta = flatten(&base.tensors());
        let n_w = theta.len();
        theta.extend(xs0.iter().flatten());
        let f = |x: &[f64]| {
            let mut p = base.clone();
            assign(p.tensors_mut().into(), &x[..n_w]);
            let xs: Vec<Vec<f64>> = x[n_w..].chunks(dim).map(<[f64]>::to_vec).collect();
            let pass = gru_forward(&xs, &p);
            let loss: f64 = pass.hidden.iter().zip(&ups).map(|(h, u)| numerics::dot(h, u)).sum();
            let mut g = p.zeros_like();
            let gx = gru_backward(&xs, &pass, &ups, &p, &mut g);
            let mut grad = flatten(&g.tensors());
            grad.extend(gx.into_iter().flatten());
            (loss, grad)
        };
        assert!(grad_check(f, &theta, 1e-5) < 1e-4);
    }

    #[test]
    fn attention_symmetry_cases() {
        let dim = 3;
        let p = AttentionParams::init(dim, &mut seed::rng(4, &[]));
        let u = vec![0.2, -0.1, 0.5];
        let h = vec![0.3, 0.3, -0.7];
        let w = attention_weights(&u, &vec![h.clone(); 4], &p, Activation::Tanh);
        assert!(w.iter().all(|a| (a - 0.25).abs() < 1e-12));
        assert_eq!(attention_weights(&u, &[h], &p, Activation::Tanh), [1.0]);
    }

    #[test]
    fn attention_toy_by_hand() {
        // d = 2; W_2 picks [e_u0 + h0, h1], tanh; w_1 = [1, 1], b_1 = 0
        let p = AttentionParams {
            w2: Tensor::from_vec(&[2, 4], vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
            b2: Tensor::from_vec(&[2], vec![0.0, 0.5]).unwrap(),
            w1: Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap(),
            b1: Tensor::from_vec(&[1], vec![0.3]).unwrap(),
        };
        let u = vec![0.5, 9.0];
        let hs = vec![vec![0.0, 0.0], vec![1.0, -1.0]];
        let w = attention_weights(&u, &hs, &p, Activation::Tanh);
        let s0 = 0.5f64.tanh() + 0.5f64.tanh() + 0.3;
        let s1 = 1.5f64.tanh() + (-0.5f64).tanh() + 0.3;
        let e0 = 1.0 / (1.0 + (s1 - s0).exp());
        assert!((w[0] - e0).abs() < 1e-12 && (w[1] - (1.0 - e0)).abs() < 1e-12);
    }

    #[test]
    fn attention_permutation_equivariance_and_shift() {
        let dim = 4;
        let p = AttentionParams::init(dim, &mut seed::rng(5, &[]));
        let u = rand_vecs(1, dim, 6).remove(0);
        let hs = rand_vecs(5, dim, 7);
        let w = attention_weights(&u, &hs, &p, Activation::Tanh);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<Vec<f64>> = perm.iter().map(|&i| hs[i].clone()).collect();
        let wp = attention_weights(&u, &permuted, &p, Activation::Tanh);
        for (k, &i) in perm.iter().enumerate() {
            assert!((wp[k] - w[i]).abs() < 1e-12);
        }
        // s' is invariant under the joint permutation
        let w_h = Tensor::zeros(&[dim, 2 * dim]);
        let (a, _) = interest(&w, &hs, &w_h);
        let (b, _) = interest(&wp, &permuted, &w_h);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        // shifting b_1 shifts every score
        let mut q = p.clone();
        q.b1.data[0] += 17.0;
        let ws = attention_weights(&u, &hs, &q, Activation::Tanh);
        for (x, y) in w.iter().zip(&ws) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn interest_cases() {
        let hs = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 0.0]];
        let mut proj = Tensor::zeros(&[2, 4]);
        proj.data[0] = 1.0;
        proj.data[5] = 1.0; // [I | 0]
        let (att, s) = interest(&[1.0 / 3.0; 3], &hs, &proj);
        assert!((att[0] - 2.0).abs() < 1e-12 && att[1].abs() < 1e-12);
        assert_eq!(att, s);
        let (att, _) = interest(&[0.0, 1.0, 0.0], &hs, &proj);
        assert_eq!(att, hs[1]);
    }

    #[test]
    fn intra_end_to_end_gradient() {
        let dim = 3;
        for use_attention in [true, false] {
            let base = IntraParams::init(dim, &mut seed::rng(8, &[]));
            let xs0 = rand_vecs(4, dim, 9);
            let u0 = rand_vecs(1, dim, 10).remove(0);
            let up = rand_vecs(1, dim, 11).remove(0);
            let all = |p: &IntraParams| -> Vec<f64> {
                let mut v = flatten(&p.gru.tensors());
                v.extend(flatten(&p.attention.tensors()));
                v.extend(&p.combine.w_h.data);
                v
            };
            let mut theta = all(&base);
            let n_w = theta.len();
            theta.extend(&u0);
            theta.extend(xs0.iter().flatten());
            let f = |x: &[f64]| {
                let mut p = base.clone();
                let mut off = assign(p.gru.tensors_mut().into(), x);
                off += assign(p.attention.tensors_mut().into(), &x[off..]);
                let n = p.combine.w_h.len();
                p.combine.w_h.data.copy_from_slice(&x[off..off + n]);
                let u = &x[n_w..n_w + dim];
                let xs: Vec<Vec<f64>> = x[n_w + dim..].chunks(dim).map(<[f64]>::to_vec).collect();
                let pass = intra_forward(u, &xs, &p, use_attention, Activation::Tanh);
                let loss = numerics::dot(&pass.interest, &up);
                let mut g = p.zeros_like();
                let (gu, gx) = intra_backward(&xs, &pass, &up, &p, Activation::Tanh, &mut g);
                let mut grad = all(&g);
                grad.extend(gu);
                grad.extend(gx.into_iter().flatten());
                (loss, grad)
            };
            assert!(grad_check(f, &theta, 1e-5) < 1e-4, "attention={use_attention}");
        }
    }
}
