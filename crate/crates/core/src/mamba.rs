//! Latent dynamics: max-pool aggregation of point features into a single
//! latent vector, then autoregressive rollout through a stack of gated
//! selective state-space layers.
//!
//! The rollout carries recurrent state forward (O(T)); re-scanning the full
//! prefix per step is the equivalent reference definition and is kept as a
//! test oracle.

use crate::error::{Error, Result};
use crate::params::MambaLayer;
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct MambaParams<T> {
    pub layers: Vec<MambaLayer<T>>,
    pub state_width: usize,
}

impl<T> MambaParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MambaParams<U> {
        MambaParams {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
            state_width: self.state_width,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.layer{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.layer{i}"), f);
        }
    }
}

impl MambaParams<Tensor> {
    pub fn init(rng: &mut Rng, width: usize, state: usize, layers: usize) -> Self {
        MambaParams {
            layers: (0..layers)
                .map(|_| MambaLayer::init(rng, width, state))
                .collect(),
            state_width: state,
        }
    }
}

/// Latent trajectory on the tape: `z0` plus one row per generated step, all
/// `[1 x n_g]`.
#[derive(Clone, Debug)]
pub struct LatentTrajectory {
    pub z0: NodeId,
    pub z: Vec<NodeId>,
}

/// Channel-wise max over points: `[n x n_g] -> [1 x n_g]`.
pub fn aggregate_z0(tape: &mut Tape, g0: NodeId) -> Result<NodeId> {
    let shape = tape.shape(g0).to_vec();
    if shape[0] == 0 {
        return Err(Error::InvalidShape {
            op: "aggregate_z0",
            msg: "needs at least one point".into(),
            shape,
        });
    }
    let m = tape.reduce_max(g0, 0)?;
    tape.reshape(m, vec![1, shape[1]])
}

/// Per-layer recurrent state: `[n_g x n_s]`.
pub struct LayerState {
    pub h: NodeId,
}

pub fn zero_states(tape: &mut Tape, params: &MambaParams<NodeId>, width: usize) -> Vec<LayerState> {
    params
        .layers
        .iter()
        .map(|_| LayerState {
            h: tape
                .constant(
                    vec![width, params.state_width],
                    vec![0.0; width * params.state_width],
                )
                .unwrap(),
        })
        .collect()
}

/// One token through one layer, updating its recurrent state.
fn layer_step(
    tape: &mut Tape,
    layer: &MambaLayer<NodeId>,
    token: NodeId,
    state: &mut LayerState,
) -> Result<NodeId> {
    let width = tape.shape(token)[1];
    let n_s = tape.shape(state.h)[1];

    let normed = tape.rms_norm(token, RMS_EPS)?;
    let xn = tape.mul(normed, layer.norm_scale)?;
    let x = layer.in_proj.forward(tape, xn)?;
    let gate = layer.gate_proj.forward(tape, xn)?;
    let dt_raw = layer.dt_proj.forward(tape, xn)?;
    let dt = tape.softplus(dt_raw); // positive step size
    let b = layer.b_proj.forward(tape, xn)?;
    let c = layer.c_proj.forward(tape, xn)?;

    // A = -exp(a_log); discretized decay exp(dt * A) is in (0, 1)
    let a_exp = tape.exp(layer.a_log);
    let a = tape.scale(a_exp, -1.0);
    let dt_col = tape.reshape(dt, vec![width, 1])?;
    let ones = tape.constant(vec![1, n_s], vec![1.0; n_s])?;
    let dt_mat = tape.matmul(dt_col, ones)?;
    let da = tape.mul(a, dt_mat)?;
    let decay = tape.exp(da);

    let dx = tape.mul(dt, x)?;
    let dx_col = tape.reshape(dx, vec![width, 1])?;
    let drive = tape.matmul(dx_col, b)?; // [width x n_s]

    let kept = tape.mul(decay, state.h)?;
    let h_new = tape.add(kept, drive)?;
    state.h = h_new;

    let c_col = tape.transpose(c)?;
    let y_col = tape.matmul(h_new, c_col)?; // [width x 1]
    let y = tape.reshape(y_col, vec![1, width])?;

    let gated_gate = tape.silu(gate);
    let gated = tape.mul(y, gated_gate)?;
    let projected = layer.out_proj.forward(tape, gated)?;
    tape.add(token, projected)
}

/// One token through the whole stack.
fn stack_step(
    tape: &mut Tape,
    params: &MambaParams<NodeId>,
    token: NodeId,
    states: &mut [LayerState],
) -> Result<NodeId> {
    let mut h = token;
    for (layer, state) in params.layers.iter().zip(states.iter_mut()) {
        h = layer_step(tape, layer, h, state)?;
    }
    Ok(h)
}

/// Causal scan over a token sequence; `outputs[t]` depends only on
/// `tokens[0..=t]`.
pub fn ssm_scan(
    tape: &mut Tape,
    params: &MambaParams<NodeId>,
    tokens: &[NodeId],
) -> Result<Vec<NodeId>> {
    if tokens.is_empty() {
        return Err(Error::Validation("ssm_scan needs at least one token".into()));
    }
    let width = tape.shape(tokens[0])[1];
    let mut states = zero_states(tape, params, width);
    let mut outputs = Vec::with_capacity(tokens.len());
    for &token in tokens {
        outputs.push(stack_step(tape, params, token, &mut states)?);
    }
    Ok(outputs)
}

/// Autoregressive rollout: each generated step is fed back as the next
/// token. Matches re-scanning the growing prefix, but carries state forward.
pub fn rollout(
    tape: &mut Tape,
    params: &MambaParams<NodeId>,
    z0: NodeId,
    t_steps: usize,
) -> Result<LatentTrajectory> {
    let width = tape.shape(z0)[1];
    let mut states = zero_states(tape, params, width);
    let mut z = Vec::with_capacity(t_steps);
    let mut token = z0;
    for _ in 0..t_steps {
        let next = stack_step(tape, params, token, &mut states)?;
        z.push(next);
        token = next;
    }
    Ok(LatentTrajectory { z0, z })
}
