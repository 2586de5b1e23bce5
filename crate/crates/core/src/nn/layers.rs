use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("consistent shape")
}

/// Square matrix with orthonormal rows (Gram-Schmidt on Gaussian rows).
fn orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            rows.push(v);
        }
    }
    rows.concat()
}

/// Fully connected layer `y = x W^T + b`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = store.add(format!("{name}.weight"), fan_in_uniform(output, input, rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.w);
        let b = tape.param(self.b);
        tape.linear(x, w, Some(b))
    }
}

/// Two dense layers with a ReLU in between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp2 {
    pub hidden: Dense,
    pub out: Dense,
}

impl Mlp2 {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            hidden: Dense::new(store, &format!("{name}.0"), input, hidden, rng),
            out: Dense::new(store, &format!("{name}.1"), hidden, output, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h);
        self.out.forward(tape, h)
    }
}

/// Gated recurrent unit with reset gate `r`, update gate `z` and
/// candidate `n`:
///
/// ```text
/// r  = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z  = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n  = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_ih = store.add(format!("{name}.weight_ih"), fan_in_uniform(3 * hidden, input, rng));
        let mut recurrent = Vec::with_capacity(3 * hidden * hidden);
        for _ in 0..3 {
            recurrent.extend(orthogonal(hidden, rng));
        }
        let w_hh = store.add(
            format!("{name}.weight_hh"),
            Tensor::matrix(3 * hidden, hidden, recurrent).expect("consistent shape"),
        );
        let b_ih = store.add(format!("{name}.bias_ih"), Tensor::zeros(&[3 * hidden]));
        let b_hh = store.add(format!("{name}.bias_hh"), Tensor::zeros(&[3 * hidden]));
        Self { w_ih, w_hh, b_ih, b_hh, input, hidden }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let (w_ih, b_ih, w_hh, b_hh) = (
            tape.param(self.w_ih),
            tape.param(self.b_ih),
            tape.param(self.w_hh),
            tape.param(self.b_hh),
        );
        let gi = tape.linear(x, w_ih, Some(b_ih))?;
        let gh = tape.linear(h, w_hh, Some(b_hh))?;
        let gi_r = tape.slice_cols(gi, 0, hd)?;
        let gi_z = tape.slice_cols(gi, hd, 2 * hd)?;
        let gi_n = tape.slice_cols(gi, 2 * hd, 3 * hd)?;
        let gh_r = tape.slice_cols(gh, 0, hd)?;
        let gh_z = tape.slice_cols(gh, hd, 2 * hd)?;
        let gh_n = tape.slice_cols(gh, 2 * hd, 3 * hd)?;
        let r = tape.add(gi_r, gh_r)?;
        let r = tape.sigmoid(r);
        let z = tape.add(gi_z, gh_z)?;
        let z = tape.sigmoid(z);
        let gated = tape.mul(r, gh_n)?;
        let n = tape.add(gi_n, gated)?;
        let n = tape.tanh(n);
        // h' = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let kept = tape.mul(z, diff)?;
        tape.add(n, kept)
    }
}

/// Log-density of each row of `actions` under `N(mean, sigma^2 I)` with
/// `sigma = exp(log_std)`; returns an `n x 1` column.
pub fn gaussian_log_prob(tape: &mut Tape<'_>, mean: Var, log_std: Var, actions: Var) -> Result<Var> {
    let (n, m) = tape.shape(mean);
    let diff = tape.sub(actions, mean)?;
    let neg = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg);
    let inv_std = tape.broadcast(inv_std, n, m)?;
    let z = tape.mul(diff, inv_std)?;
    let z2 = tape.square(z);
    let quad = tape.sum_cols(z2);
    let quad = tape.scale(quad, -0.5);
    let norm = tape.scale(log_std, m as f64);
    let norm = tape.broadcast(norm, n, 1)?;
    let lp = tape.sub(quad, norm)?;
    Ok(tape.offset(lp, -0.5 * m as f64 * (2.0 * std::f64::consts::PI).ln()))
}

/// Differential entropy of `N(mu, sigma^2 I_m)`, a `1 x 1` node.
pub fn gaussian_entropy(tape: &mut Tape<'_>, log_std: Var, dims: usize) -> Var {
    let scaled = tape.scale(log_std, dims as f64);
    tape.offset(scaled, 0.5 * dims as f64 * (1.0 + (2.0 * std::f64::consts::PI).ln()))
}

/// Plain-number version of [`gaussian_log_prob`] for one action.
pub fn gaussian_log_prob_value(mean: &[f64], log_std: f64, action: &[f64]) -> f64 {
    let sigma = log_std.exp();
    let m = mean.len() as f64;
    let quad: f64 = mean.iter().zip(action).map(|(mu, a)| ((a - mu) / sigma).powi(2)).sum();
    -0.5 * quad - m * log_std - 0.5 * m * (2.0 * std::f64::consts::PI).ln()
}
