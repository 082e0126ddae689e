use super::{axpy, check_sequence, dot, Gradients, NetDims, NetworkParams};
use crate::error::{CirlError, Result};

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Tape of one forward pass: everything backprop needs, flat per step.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    dims: NetDims,
    stamp: (u64, u64),
    steps: usize,
    inputs: Vec<f64>,
    /// `(steps + 1) x H`, row 0 is the zero initial state.
    hidden: Vec<f64>,
    reset: Vec<f64>,
    update: Vec<f64>,
    candidate: Vec<f64>,
}

impl ForwardCache {
    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Incremental evaluator holding the recurrent state between steps.
#[derive(Debug, Clone)]
pub struct Runner {
    h: Vec<f64>,
    next: Vec<f64>,
    gates: Vec<f64>,
}

impl Runner {
    pub fn new(params: &NetworkParams) -> Self {
        let d = params.dims();
        Runner {
            h: vec![0.0; d.hidden],
            next: vec![0.0; d.hidden],
            gates: vec![0.0; d.gates()],
        }
    }

    pub fn hidden(&self) -> &[f64] {
        &self.h
    }

    pub fn step(&mut self, params: &NetworkParams, x: &[f64]) {
        cell_step(params, x, &self.h, &mut self.gates, &mut self.next);
        std::mem::swap(&mut self.h, &mut self.next);
    }

    pub fn output(&self, params: &NetworkParams) -> Vec<f64> {
        let mut y = vec![0.0; params.dims().output];
        head(params, &self.h, &mut y);
        y
    }
}

/// One cell step. `gates` receives `[r, u, n]` post-activation; `h_next` the new state.
fn cell_step(params: &NetworkParams, x: &[f64], h: &[f64], gates: &mut [f64], h_next: &mut [f64]) {
    let d = params.dims();
    let hd = d.hidden;
    let g = d.gates();
    let b = params.blocks();

    gates.copy_from_slice(b.bias);
    for (j, &xj) in x.iter().enumerate() {
        if xj != 0.0 {
            axpy(xj, &b.w_in[j * g..(j + 1) * g], gates);
        }
    }
    let (ru, n_pre) = gates.split_at_mut(2 * hd);
    for (j, &hj) in h.iter().enumerate() {
        if hj != 0.0 {
            axpy(hj, &b.w_hid[j * g..j * g + 2 * hd], ru);
        }
    }
    for v in ru.iter_mut() {
        *v = sigmoid(*v);
    }
    let (r, u) = ru.split_at(hd);
    for j in 0..hd {
        let rh = r[j] * h[j];
        if rh != 0.0 {
            axpy(rh, &b.w_hid[j * g + 2 * hd..(j + 1) * g], n_pre);
        }
    }
    for j in 0..hd {
        let n = n_pre[j].tanh();
        n_pre[j] = n;
        h_next[j] = (1.0 - u[j]) * n + u[j] * h[j];
    }
}

fn head(params: &NetworkParams, h: &[f64], y: &mut [f64]) {
    let d = params.dims();
    let b = params.blocks();
    for (o, yo) in y.iter_mut().enumerate() {
        *yo = b.head_b[o] + dot(&b.head_w[o * d.hidden..(o + 1) * d.hidden], h);
    }
}

pub(super) fn forward(params: &NetworkParams, sequence: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
    let d = params.dims();
    check_sequence(&d, sequence)?;
    let steps = sequence.len() / d.input;
    let hd = d.hidden;
    let mut cache = ForwardCache {
        dims: d,
        stamp: params.stamp(),
        steps,
        inputs: sequence.to_vec(),
        hidden: vec![0.0; (steps + 1) * hd],
        reset: vec![0.0; steps * hd],
        update: vec![0.0; steps * hd],
        candidate: vec![0.0; steps * hd],
    };
    let mut outputs = vec![0.0; steps * d.output];
    let mut gates = vec![0.0; d.gates()];
    for t in 0..steps {
        let x = &sequence[t * d.input..(t + 1) * d.input];
        let (prev, next) = cache.hidden.split_at_mut((t + 1) * hd);
        let h_prev = &prev[t * hd..];
        let h_next = &mut next[..hd];
        cell_step(params, x, h_prev, &mut gates, h_next);
        cache.reset[t * hd..(t + 1) * hd].copy_from_slice(&gates[..hd]);
        cache.update[t * hd..(t + 1) * hd].copy_from_slice(&gates[hd..2 * hd]);
        cache.candidate[t * hd..(t + 1) * hd].copy_from_slice(&gates[2 * hd..]);
        head(params, h_next, &mut outputs[t * d.output..(t + 1) * d.output]);
    }
    Ok((outputs, cache))
}

pub(super) fn backward_into(
    params: &NetworkParams,
    cache: &ForwardCache,
    dy: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let d = params.dims();
    if cache.dims != d || cache.stamp != params.stamp() {
        return Err(CirlError::invalid(
            "forward cache does not belong to these parameters (stale or mismatched)",
        ));
    }
    if grads.dims() != d {
        return Err(CirlError::invalid("gradient buffer has mismatched dimensions"));
    }
    if dy.len() != cache.steps * d.output {
        return Err(CirlError::invalid(format!(
            "expected {} output gradients, got {}",
            cache.steps * d.output,
            dy.len()
        )));
    }
    let hd = d.hidden;
    let g = d.gates();
    let p = params.blocks();
    let gb = grads.blocks_mut();

    let mut dh_next = vec![0.0; hd];
    let mut dh = vec![0.0; hd];
    let mut dgate = vec![0.0; g];
    let mut d_rh = vec![0.0; hd];

    for t in (0..cache.steps).rev() {
        let h = &cache.hidden[(t + 1) * hd..(t + 2) * hd];
        let h_prev = &cache.hidden[t * hd..(t + 1) * hd];
        let r = &cache.reset[t * hd..(t + 1) * hd];
        let u = &cache.update[t * hd..(t + 1) * hd];
        let n = &cache.candidate[t * hd..(t + 1) * hd];
        let x = &cache.inputs[t * d.input..(t + 1) * d.input];
        let dy_t = &dy[t * d.output..(t + 1) * d.output];

        dh.copy_from_slice(&dh_next);
        for (o, &g_o) in dy_t.iter().enumerate() {
            if g_o != 0.0 {
                axpy(g_o, &p.head_w[o * hd..(o + 1) * hd], &mut dh);
                axpy(g_o, h, &mut gb.head_w[o * hd..(o + 1) * hd]);
                gb.head_b[o] += g_o;
            }
        }

        // candidate and update gates
        for j in 0..hd {
            let dn = dh[j] * (1.0 - u[j]);
            let du = dh[j] * (h_prev[j] - n[j]);
            dgate[2 * hd + j] = dn * (1.0 - n[j] * n[j]);
            dgate[hd + j] = du * u[j] * (1.0 - u[j]);
        }
        // d(r * h_prev) through U_n
        for (j, d) in d_rh.iter_mut().enumerate() {
            *d = dot(&p.w_hid[j * g + 2 * hd..(j + 1) * g], &dgate[2 * hd..]);
        }
        for j in 0..hd {
            let dr = d_rh[j] * h_prev[j];
            dgate[j] = dr * r[j] * (1.0 - r[j]);
        }

        for j in 0..hd {
            let col = &p.w_hid[j * g..(j + 1) * g];
            dh_next[j] = dh[j] * u[j] + d_rh[j] * r[j] + dot(&col[..2 * hd], &dgate[..2 * hd]);
            let gcol = &mut gb.w_hid[j * g..(j + 1) * g];
            if h_prev[j] != 0.0 {
                axpy(h_prev[j], &dgate[..2 * hd], &mut gcol[..2 * hd]);
                axpy(r[j] * h_prev[j], &dgate[2 * hd..], &mut gcol[2 * hd..]);
            }
        }
        for (j, &xj) in x.iter().enumerate() {
            if xj != 0.0 {
                axpy(xj, &dgate, &mut gb.w_in[j * g..(j + 1) * g]);
            }
        }
        for (b, dg) in gb.bias.iter_mut().zip(&dgate) {
            *b += dg;
        }
    }
    Ok(())
}
