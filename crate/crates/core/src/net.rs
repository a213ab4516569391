//! Fixed tanh MLP denoiser with hand-written reverse mode.
//!
//! The network maps the concatenated input `[x_t, t/T, c]` to a noise
//! prediction of the same dimension as `x_t`. Parameters live in one flat
//! vector laid out layer by layer as `W` (row-major, `fan_out × fan_in`)
//! followed by `b`.

use std::ops::{Deref, DerefMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::math::Matrix;

/// Layer sizes of the MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetArch {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub output_dim: usize,
}

impl NetArch {
    /// `hidden_layers == 0` gives a single affine layer.
    pub fn new(
        input_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
        output_dim: usize,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_width == 0 || output_dim == 0 {
            return Err(Error::InvalidArch(format!(
                "dims must be >= 1 (input {input_dim}, hidden {hidden_width}, output {output_dim})"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_width,
            hidden_layers,
            output_dim,
        })
    }

    /// Architecture for data dimension `m` and condition dimension `k`.
    pub fn for_data(
        data_dim: usize,
        cond_dim: usize,
        hidden_width: usize,
        hidden_layers: usize,
    ) -> Result<Self> {
        Self::new(
            data_dim + 1 + cond_dim,
            hidden_width,
            hidden_layers,
            data_dim,
        )
    }

    /// `(fan_in, fan_out)` per affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.input_dim;
        for _ in 0..self.hidden_layers {
            dims.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        dims.push((fan_in, self.output_dim));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| (i + 1) * o).sum()
    }

    fn check_input(&self, x_t: &[f64], c: &[f64]) -> Result<()> {
        check_len("x_t", self.output_dim, x_t.len())?;
        check_len("network input", self.input_dim, x_t.len() + 1 + c.len())
    }
}

/// Flat parameter vector θ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        crate::math::dot(&self.0, &other.0)
    }

    /// `self += a · other`.
    pub fn axpy(&mut self, a: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len());
        for (s, o) in self.0.iter_mut().zip(&other.0) {
            *s += a * o;
        }
    }

    pub fn scaled(&self, a: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * a).collect())
    }

    /// `self - other`.
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), other.len());
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Weights uniform in `±1/√fan_in`, biases zero.
pub fn init_params(arch: &NetArch, seed: u64) -> ParamVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(arch.param_count());
    for (fan_in, fan_out) in arch.layer_dims() {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        values.extend((0..fan_in * fan_out).map(|_| dist.sample(&mut rng)));
        values.extend(std::iter::repeat_n(0.0, fan_out));
    }
    ParamVector(values)
}

fn assemble_input(x_t: &[f64], t_norm: f64, c: &[f64]) -> Vec<f64> {
    let mut input = Vec::with_capacity(x_t.len() + 1 + c.len());
    input.extend_from_slice(x_t);
    input.push(t_norm);
    input.extend_from_slice(c);
    input
}

/// Layer activations; `acts[0]` is the input, the last entry the output.
fn forward_trace(arch: &NetArch, params: &[f64], input: Vec<f64>) -> Vec<Vec<f64>> {
    let dims = arch.layer_dims();
    let n_layers = dims.len();
    let mut acts = Vec::with_capacity(n_layers + 1);
    acts.push(input);
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out];
        offset += (fan_in + 1) * fan_out;
        let prev = &acts[l];
        let hidden = l + 1 < n_layers;
        let next: Vec<f64> = (0..fan_out)
            .map(|o| {
                let z = b[o] + crate::math::dot(&w[o * fan_in..(o + 1) * fan_in], prev);
                if hidden {
                    z.tanh()
                } else {
                    z
                }
            })
            .collect();
        acts.push(next);
    }
    acts
}

fn check_params(arch: &NetArch, params: &ParamVector) -> Result<()> {
    check_len("params", arch.param_count(), params.len())
}

/// Noise prediction ε̂(x_t, t_norm, c).
pub fn forward(
    arch: &NetArch,
    params: &ParamVector,
    x_t: &[f64],
    t_norm: f64,
    c: &[f64],
) -> Result<Vec<f64>> {
    check_params(arch, params)?;
    arch.check_input(x_t, c)?;
    let mut acts = forward_trace(arch, params, assemble_input(x_t, t_norm, c));
    Ok(acts.pop().expect("at least one layer"))
}

/// `upstreamᵀ · ∂forward/∂θ`.
pub fn vjp(
    arch: &NetArch,
    params: &ParamVector,
    x_t: &[f64],
    t_norm: f64,
    c: &[f64],
    upstream: &[f64],
) -> Result<ParamVector> {
    check_params(arch, params)?;
    arch.check_input(x_t, c)?;
    check_len("upstream", arch.output_dim, upstream.len())?;

    let acts = forward_trace(arch, params, assemble_input(x_t, t_norm, c));
    let dims = arch.layer_dims();
    let mut grad = vec![0.0; params.len()];
    let mut offsets = Vec::with_capacity(dims.len());
    let mut off = 0;
    for &(fan_in, fan_out) in &dims {
        offsets.push(off);
        off += (fan_in + 1) * fan_out;
    }

    // output layer is linear, so the incoming delta is the upstream itself
    let mut delta = upstream.to_vec();
    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let base = offsets[l];
        let prev = &acts[l];
        for o in 0..fan_out {
            let d = delta[o];
            if d != 0.0 {
                let row = &mut grad[base + o * fan_in..base + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(prev) {
                    *g += d * a;
                }
            }
            grad[base + fan_in * fan_out + o] = d;
        }
        if l == 0 {
            break;
        }
        let w = &params[base..base + fan_in * fan_out];
        let mut back = vec![0.0; fan_in];
        for o in 0..fan_out {
            let d = delta[o];
            if d != 0.0 {
                for (bk, wv) in back.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *bk += d * wv;
                }
            }
        }
        // prev is a tanh activation here
        for (bk, a) in back.iter_mut().zip(prev) {
            *bk *= 1.0 - a * a;
        }
        delta = back;
    }
    Ok(ParamVector(grad))
}

/// Full `m × P` Jacobian of the output, one vjp per output coordinate.
pub fn jacobian(
    arch: &NetArch,
    params: &ParamVector,
    x_t: &[f64],
    t_norm: f64,
    c: &[f64],
) -> Result<Matrix> {
    let m = arch.output_dim;
    let mut rows = Vec::with_capacity(m);
    let mut basis = vec![0.0; m];
    for i in 0..m {
        basis[i] = 1.0;
        rows.push(vjp(arch, params, x_t, t_norm, c, &basis)?.into_vec());
        basis[i] = 0.0;
    }
    Ok(Matrix::from_rows(&rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::central_difference_grad;
    use rand::Rng;

    fn default_arch() -> NetArch {
        NetArch::for_data(2, 2, 16, 2).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let arch = default_arch();
        assert_eq!(init_params(&arch, 7), init_params(&arch, 7));
        assert_ne!(init_params(&arch, 0), init_params(&arch, 1));
        assert_eq!(init_params(&arch, 0).len(), arch.param_count());
    }

    #[test]
    fn biases_start_at_zero() {
        let arch = NetArch::new(2, 4, 1, 2).unwrap();
        let p = init_params(&arch, 3);
        // layer 0: W 4x2 then b 4; layer 1: W 2x4 then b 2
        assert_eq!(arch.param_count(), 8 + 4 + 8 + 2);
        assert!(p[8..12].iter().all(|&v| v == 0.0));
        assert!(p[20..22].iter().all(|&v| v == 0.0));
        let bound = 1.0 / 2f64.sqrt();
        assert!(p[..8].iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn zero_dims_rejected() {
        assert!(NetArch::new(0, 4, 1, 2).is_err());
        assert!(NetArch::new(3, 0, 1, 2).is_err());
        assert!(NetArch::new(3, 4, 1, 0).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let arch = default_arch();
        let p = ParamVector::zeros(arch.param_count());
        let out = forward(&arch, &p, &[0.3, -1.0], 0.5, &[0.1, 0.2]).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
    }

    #[test]
    #[allow(clippy::neg_multiply)]
    fn single_layer_is_affine_matmul() {
        // input [x(2), t, c(1)] = 4 inputs, 2 outputs, no hidden layers
        let arch = NetArch::new(4, 1, 0, 2).unwrap();
        let w = [1.0, 2.0, 3.0, 4.0, -1.0, 0.5, 0.0, 2.0];
        let mut v = w.to_vec();
        v.extend([0.0, 0.0]);
        let p = ParamVector::from_vec(v);
        let input = [0.5, -1.0, 0.25, 2.0];
        let expected = [
            1.0 * 0.5 + 2.0 * -1.0 + 3.0 * 0.25 + 4.0 * 2.0,
            -1.0 * 0.5 + 0.5 * -1.0 + 0.0 * 0.25 + 2.0 * 2.0,
        ];
        let out = forward(&arch, &p, &input[..2], input[2], &input[3..]).unwrap();
        assert_eq!(out, expected.to_vec());
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let arch = default_arch();
        let p = init_params(&arch, 0);
        assert!(forward(&arch, &p, &[0.0; 3], 0.5, &[0.0; 2]).is_err());
        assert!(forward(&arch, &p, &[0.0; 2], 0.5, &[0.0; 1]).is_err());
        assert!(vjp(&arch, &p, &[0.0; 2], 0.5, &[0.0; 2], &[1.0]).is_err());
        let short = ParamVector::zeros(3);
        assert!(forward(&arch, &short, &[0.0; 2], 0.5, &[0.0; 2]).is_err());
    }

    #[test]
    fn vjp_zero_upstream_and_linearity() {
        let arch = default_arch();
        let p = init_params(&arch, 11);
        let (x, c) = ([0.4, -0.2], [0.7, 0.1]);
        let z = vjp(&arch, &p, &x, 0.3, &c, &[0.0, 0.0]).unwrap();
        assert!(z.iter().all(|&g| g == 0.0));
        let u = [0.8, -1.3];
        let g1 = vjp(&arch, &p, &x, 0.3, &c, &u).unwrap();
        let g3 = vjp(&arch, &p, &x, 0.3, &c, &[2.5 * u[0], 2.5 * u[1]]).unwrap();
        assert!(g3.max_abs_diff(&g1.scaled(2.5)) < 1e-12);
    }

    #[test]
    fn vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for seed in 0..5 {
            let arch = NetArch::for_data(2, 2, 8, 2).unwrap();
            let p = init_params(&arch, seed);
            let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let c: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = rng.gen_range(0.0..1.0);
            let u: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let analytic = vjp(&arch, &p, &x, t, &c, &u).unwrap();
            let numeric = central_difference_grad(
                |theta| {
                    let out =
                        forward(&arch, &ParamVector::from_vec(theta.to_vec()), &x, t, &c).unwrap();
                    crate::math::dot(&out, &u)
                },
                &p,
                1e-5,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!((a - n).abs() / denom < 1e-5, "a={a} n={n}");
            }
        }
    }

    #[test]
    fn jacobian_rows_are_basis_vjps() {
        let arch = default_arch();
        let p = init_params(&arch, 5);
        let (x, c) = ([1.0, 0.5], [-0.3, 0.9]);
        let j = jacobian(&arch, &p, &x, 0.8, &c).unwrap();
        assert_eq!((j.rows(), j.cols()), (2, arch.param_count()));
        let e1 = vjp(&arch, &p, &x, 0.8, &c, &[0.0, 1.0]).unwrap();
        assert_eq!(j.row(1), &e1[..]);
        let u = [0.3, -2.0];
        let via_j = j.tmul_vec(&u);
        let direct = vjp(&arch, &p, &x, 0.8, &c, &u).unwrap();
        let err = via_j
            .iter()
            .zip(direct.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
    }

    #[test]
    fn linear_scalar_model_jacobian_is_input() {
        // μ(x) = θᵀ[x, t, c] + b, so ∂μ/∂θ = [x, t, c, 1]
        let arch = NetArch::new(3, 1, 0, 1).unwrap();
        let p = ParamVector::from_vec(vec![0.2, -0.7, 1.1, 0.4]);
        let j = jacobian(&arch, &p, &[2.0], 0.5, &[-3.0]).unwrap();
        assert_eq!(j.row(0), &[2.0, 0.5, -3.0, 1.0]);
    }
}
