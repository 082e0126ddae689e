//! Recurrent sequence approximator shared by every learned function.
//!
//! One gated recurrent unit (GRU, Cho et al. formulation) followed by a linear
//! output head. Per step, with `x` the input and `h` the previous hidden state:
//!
//! ```text
//! r  = sigmoid(W_r x + U_r h + b_r)
//! u  = sigmoid(W_u x + U_u h + b_u)
//! n  = tanh(W_n x + U_n (r * h) + b_n)
//! h' = (1 - u) * n + u * h
//! y  = V h' + c
//! ```
//!
//! All parameters live in one flat `f64` buffer so that the optimizer, target
//! network syncs, serialization and finite-difference checks can treat the
//! network as a single vector. Block layout (in order):
//!
//! | block        | shape            | storage                         |
//! |--------------|------------------|---------------------------------|
//! | `cell.w_in`  | `3H x I`         | column-major (one column per input) |
//! | `cell.w_hid` | `3H x H`         | column-major (one column per hidden unit) |
//! | `cell.bias`  | `3H`             |                                 |
//! | `head.w`     | `O x H`          | row-major                       |
//! | `head.bias`  | `O`              |                                 |
//!
//! Gate rows within each `3H` column are ordered reset, update, candidate.

mod adam;
mod gru;
mod io;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CirlError, Result};

pub use adam::{optimizer_step, AdamConfig, OptimizerState};
pub use gru::{ForwardCache, Runner};
pub use io::{load_params, read_params, save_params, write_params, PARAMS_MAGIC};

static NEXT_NET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_NET_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NetDims {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl NetDims {
    pub fn new(input: usize, hidden: usize, output: usize) -> Result<Self> {
        if input == 0 || hidden == 0 || output == 0 {
            return Err(CirlError::invalid(format!(
                "network dimensions must be >= 1 (input={input}, hidden={hidden}, output={output})"
            )));
        }
        Ok(NetDims { input, hidden, output })
    }

    pub(crate) fn gates(&self) -> usize {
        3 * self.hidden
    }

    fn offsets(&self) -> [usize; 6] {
        let g = self.gates();
        let w_in = 0;
        let w_hid = w_in + g * self.input;
        let bias = w_hid + g * self.hidden;
        let head_w = bias + g;
        let head_b = head_w + self.output * self.hidden;
        let end = head_b + self.output;
        [w_in, w_hid, bias, head_w, head_b, end]
    }

    pub fn param_count(&self) -> usize {
        self.offsets()[5]
    }

    /// Human-readable name of the parameter at a flat index.
    pub fn param_name(&self, index: usize) -> String {
        let o = self.offsets();
        let g = self.gates();
        if index < o[1] {
            let (col, row) = (index / g, index % g);
            format!("cell.w_in[{row},{col}]")
        } else if index < o[2] {
            let k = index - o[1];
            format!("cell.w_hid[{},{}]", k % g, k / g)
        } else if index < o[3] {
            format!("cell.bias[{}]", index - o[2])
        } else if index < o[4] {
            let k = index - o[3];
            format!("head.w[{},{}]", k / self.hidden, k % self.hidden)
        } else if index < o[5] {
            format!("head.bias[{}]", index - o[4])
        } else {
            format!("<out of range {index}>")
        }
    }
}

/// Named views into a flat parameter (or gradient) buffer.
pub(crate) struct Blocks<'a> {
    pub w_in: &'a [f64],
    pub w_hid: &'a [f64],
    pub bias: &'a [f64],
    pub head_w: &'a [f64],
    pub head_b: &'a [f64],
}

pub(crate) struct BlocksMut<'a> {
    pub w_in: &'a mut [f64],
    pub w_hid: &'a mut [f64],
    pub bias: &'a mut [f64],
    pub head_w: &'a mut [f64],
    pub head_b: &'a mut [f64],
}

pub(crate) fn split<'a>(dims: &NetDims, data: &'a [f64]) -> Blocks<'a> {
    let o = dims.offsets();
    Blocks {
        w_in: &data[o[0]..o[1]],
        w_hid: &data[o[1]..o[2]],
        bias: &data[o[2]..o[3]],
        head_w: &data[o[3]..o[4]],
        head_b: &data[o[4]..o[5]],
    }
}

pub(crate) fn split_mut<'a>(dims: &NetDims, data: &'a mut [f64]) -> BlocksMut<'a> {
    let o = dims.offsets();
    let (w_in, rest) = data.split_at_mut(o[1]);
    let (w_hid, rest) = rest.split_at_mut(o[2] - o[1]);
    let (bias, rest) = rest.split_at_mut(o[3] - o[2]);
    let (head_w, head_b) = rest.split_at_mut(o[4] - o[3]);
    BlocksMut {
        w_in,
        w_hid,
        bias,
        head_w,
        head_b,
    }
}

/// Weights of one recurrent approximator.
///
/// Each instance carries an identity and a generation counter; a
/// [`ForwardCache`] remembers both so that backpropagating through a tape
/// recorded with different (or since-updated) parameters is rejected.
#[derive(Debug)]
pub struct NetworkParams {
    dims: NetDims,
    data: Vec<f64>,
    id: u64,
    generation: u64,
}

impl Clone for NetworkParams {
    fn clone(&self) -> Self {
        copy_params(self)
    }
}

impl PartialEq for NetworkParams {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.data == other.data
    }
}

impl NetworkParams {
    pub fn zeros(dims: NetDims) -> Self {
        NetworkParams {
            dims,
            data: vec![0.0; dims.param_count()],
            id: fresh_id(),
            generation: 0,
        }
    }

    pub fn from_vec(dims: NetDims, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.param_count() {
            return Err(CirlError::invalid(format!(
                "expected {} parameters for {:?}, got {}",
                dims.param_count(),
                dims,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(CirlError::invalid(format!(
                "parameter {} is not finite",
                dims.param_name(i)
            )));
        }
        Ok(NetworkParams {
            dims,
            data,
            id: fresh_id(),
            generation: 0,
        })
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; invalidates outstanding forward caches.
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.generation += 1;
        &mut self.data
    }

    pub(crate) fn blocks(&self) -> Blocks<'_> {
        split(&self.dims, &self.data)
    }

    pub(crate) fn stamp(&self) -> (u64, u64) {
        (self.id, self.generation)
    }

    /// Overwrite this network's weights with `src` (target-network sync).
    pub fn sync_from(&mut self, src: &NetworkParams) {
        assert_eq!(self.dims, src.dims, "sync between mismatched networks");
        self.data.copy_from_slice(&src.data);
        self.generation += 1;
    }
}

/// Deterministic initialization: weights uniform in `[-1/sqrt(H), 1/sqrt(H)]`,
/// biases zero.
pub fn init_network(seed: u64, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<NetworkParams> {
    let dims = NetDims::new(input_dim, hidden_dim, output_dim)?;
    let mut params = NetworkParams::zeros(dims);
    let bound = 1.0 / (hidden_dim as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = split_mut(&dims, &mut params.data);
    for w in b.w_in.iter_mut().chain(b.w_hid.iter_mut()).chain(b.head_w.iter_mut()) {
        *w = rng.random_range(-bound..=bound);
    }
    Ok(params)
}

/// Independent deep copy.
pub fn copy_params(src: &NetworkParams) -> NetworkParams {
    NetworkParams {
        dims: src.dims,
        data: src.data.clone(),
        id: fresh_id(),
        generation: 0,
    }
}

/// Gradient buffer with the same layout as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    dims: NetDims,
    data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(dims: NetDims) -> Self {
        Gradients {
            dims,
            data: vec![0.0; dims.param_count()],
        }
    }

    pub fn dims(&self) -> NetDims {
        self.dims
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn clear(&mut self) {
        self.data.fill(0.0);
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn head_bias(&self) -> &[f64] {
        split(&self.dims, &self.data).head_b
    }

    pub(crate) fn blocks_mut(&mut self) -> BlocksMut<'_> {
        split_mut(&self.dims, &mut self.data)
    }
}

/// Forward pass over a whole sequence, recording a tape for [`backward`].
///
/// `sequence` is a flat row-major `T x input_dim` buffer; the returned outputs
/// are a flat `T x output_dim` buffer where row `t` depends only on rows
/// `0..=t` of the input.
pub fn forward(params: &NetworkParams, sequence: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    gru::forward(params, sequence)
}

/// Exact parameter gradients of the scalar loss whose derivative with respect
/// to the outputs is `output_gradients` (flat `T x output_dim`).
pub fn backward(params: &NetworkParams, cache: &ForwardCache, output_gradients: &[f64]) -> Result<Gradients> {
    let mut grads = Gradients::zeros(params.dims());
    gru::backward_into(params, cache, output_gradients, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into an existing buffer.
pub fn backward_into(
    params: &NetworkParams,
    cache: &ForwardCache,
    output_gradients: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    gru::backward_into(params, cache, output_gradients, grads)
}

/// Output at the final step of `sequence`, without recording a tape.
pub fn eval_last(params: &NetworkParams, sequence: &[f64]) -> Result<Vec<f64>> {
    let mut runner = Runner::new(params);
    check_sequence(&params.dims(), sequence)?;
    for x in sequence.chunks_exact(params.dims().input) {
        runner.step(params, x);
    }
    Ok(runner.output(params))
}

/// Output at the final step of `prefix ++ [extra]` for each extra input row,
/// sharing the recurrent state over the common prefix.
pub fn eval_branches(params: &NetworkParams, prefix: &[f64], extras: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    check_sequence(&params.dims(), prefix)?;
    let mut runner = Runner::new(params);
    for x in prefix.chunks_exact(params.dims().input) {
        runner.step(params, x);
    }
    extras
        .iter()
        .map(|x| {
            if x.len() != params.dims().input {
                return Err(CirlError::invalid("branch input has wrong dimension"));
            }
            let mut branch = runner.clone();
            branch.step(params, x);
            Ok(branch.output(params))
        })
        .collect()
}

pub(crate) fn check_sequence(dims: &NetDims, sequence: &[f64]) -> Result<()> {
    if sequence.is_empty() {
        return Err(CirlError::invalid("empty input sequence"));
    }
    if !sequence.len().is_multiple_of(dims.input) {
        return Err(CirlError::invalid(format!(
            "sequence length {} is not a multiple of input_dim {}",
            sequence.len(),
            dims.input
        )));
    }
    Ok(())
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_in_seed() {
        let a = init_network(7, 3, 8, 2).unwrap();
        let b = init_network(7, 3, 8, 2).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        let c = init_network(8, 3, 8, 2).unwrap();
        assert_ne!(a.as_slice(), c.as_slice());
    }

    #[test]
    fn init_rejects_zero_dims() {
        assert!(matches!(init_network(7, 3, 0, 2), Err(CirlError::InvalidArgument(_))));
        assert!(init_network(7, 0, 4, 2).is_err());
        assert!(init_network(7, 3, 4, 0).is_err());
    }

    #[test]
    fn init_scale_and_zero_biases() {
        let p = init_network(3, 4, 16, 3).unwrap();
        let bound = 0.25;
        let b = p.blocks();
        assert!(b.w_in.iter().chain(b.w_hid).chain(b.head_w).all(|w| w.abs() <= bound));
        assert!(b.bias.iter().chain(b.head_b).all(|&w| w == 0.0));
    }

    #[test]
    fn copy_is_independent() {
        let src = init_network(1, 2, 4, 1).unwrap();
        let mut dst = copy_params(&src);
        assert_eq!(dst.as_slice(), src.as_slice());
        dst.as_mut_slice()[0] += 1.0;
        assert_ne!(dst.as_slice()[0], src.as_slice()[0]);
        let again = copy_params(&copy_params(&src));
        assert_eq!(again, src);
    }

    #[test]
    fn param_names_cover_blocks() {
        let d = NetDims::new(2, 3, 1).unwrap();
        assert_eq!(d.param_name(0), "cell.w_in[0,0]");
        assert_eq!(d.param_name(d.param_count() - 1), "head.bias[0]");
        assert!(d.param_name(18).starts_with("cell.w_hid"));
    }

    #[test]
    fn dot_matches_naive() {
        let a: Vec<f64> = (0..11).map(|i| i as f64 * 0.3).collect();
        let b: Vec<f64> = (0..11).map(|i| 1.0 - i as f64).collect();
        let naive: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - naive).abs() < 1e-12);
    }
}
