//! Whole-model composition: configuration, the stage-1 parameter set, and the
//! forward pass from a sample to decoded fields.

use crate::dataio::FieldPack;
use crate::decoder::{self, DecoderParams};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::mamba::{self, LatentTrajectory, MambaParams};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Model widths and structural knobs. `n_g` must be divisible by `heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_phi: usize,
    pub n_c: usize,
    pub n_g: usize,
    pub heads: usize,
    pub attn_layers: usize,
    pub mamba_layers: usize,
    pub state_width: usize,
    pub k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 2,
            n_phi: 4,
            n_c: 16,
            n_g: 64,
            heads: 4,
            attn_layers: 2,
            mamba_layers: 2,
            state_width: 16,
            k: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_g % self.heads != 0 {
            return Err(Error::Config(format!(
                "n_g {} must be divisible by heads {}",
                self.n_g, self.heads
            )));
        }
        if self.k < 1 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Stage-1 trainable parameters: encoder, latent dynamics, decoder.
#[derive(Clone, Debug)]
pub struct ModelParams<T> {
    pub encoder: EncoderParams<T>,
    pub mamba: MambaParams<T>,
    pub decoder: DecoderParams<T>,
}

impl<T> ModelParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelParams<U> {
        ModelParams {
            encoder: self.encoder.map(f),
            mamba: self.mamba.map(f),
            decoder: self.decoder.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.encoder.visit("encoder", f);
        self.mamba.visit("mamba", f);
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        self.encoder.visit_mut("encoder", f);
        self.mamba.visit_mut("mamba", f);
        self.decoder.visit_mut("decoder", f);
    }
}

impl ModelParams<Tensor> {
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        ModelParams {
            encoder: EncoderParams::init(
                rng,
                cfg.d,
                cfg.n_phi,
                cfg.n_c,
                cfg.n_g,
                cfg.heads,
                cfg.attn_layers,
            ),
            mamba: MambaParams::init(rng, cfg.n_g, cfg.state_width, cfg.mamba_layers),
            decoder: DecoderParams::init(rng, cfg.d, cfg.n_phi, cfg.n_g, cfg.heads),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelParams<NodeId> {
        self.map(&mut |t| tape.leaf(t))
    }

    /// After `tape.backward`, add each bound node's gradient into the owning
    /// tensor. `bound` must come from `bind` on this same struct.
    pub fn collect_grads(&mut self, tape: &Tape, bound: &ModelParams<NodeId>) {
        let mut ids = Vec::new();
        bound.visit(&mut |_, id| ids.push(*id));
        let mut i = 0;
        self.visit_mut(&mut |_, t| {
            if let Some(g) = tape.grad(ids[i]) {
                t.accumulate_grad(g);
            }
            i += 1;
        });
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(&mut |_, t| t.zero_grad());
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }
}

/// Everything a forward pass leaves on the tape.
pub struct Forward {
    pub g0: NodeId,
    pub traj: LatentTrajectory,
    pub h_q: NodeId,
    /// Per-step decoded fields, each `[n_q x n_phi]`.
    pub fields: Vec<NodeId>,
}

/// Full pipeline on explicit inputs: encode -> aggregate -> rollout ->
/// decode, for `t_steps` generated steps at the given query coordinates.
pub fn forward(
    tape: &mut Tape,
    bound: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    x_bd: &Tensor,
    id: &[u8],
    phi0: &Tensor,
    x_q: &Tensor,
    t_steps: usize,
) -> Result<Forward> {
    let g0 = encoder::encode(tape, &bound.encoder, cfg.k, x_bd, id, phi0)?;
    let z0 = mamba::aggregate_z0(tape, g0)?;
    let traj = mamba::rollout(tape, &bound.mamba, z0, t_steps)?;
    let xq_node = tape.leaf(x_q);
    let h_q = decoder::encode_queries(tape, &bound.decoder, xq_node)?;
    let fields = decoder::decode_fields(tape, &bound.decoder, &traj, g0, h_q)?;
    Ok(Forward {
        g0,
        traj,
        h_q,
        fields,
    })
}

/// Forward pass on a sample, optionally overriding the query set.
pub fn forward_pack(
    tape: &mut Tape,
    bound: &ModelParams<NodeId>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    queries: Option<&Tensor>,
    t_steps: usize,
) -> Result<Forward> {
    let x_bd = Tensor::from_vec(vec![pack.n_bd, pack.d], pack.x_bd.clone())?;
    let phi0 = Tensor::from_vec(vec![pack.n_bd, pack.n_phi], pack.phi0.clone())?;
    let default_q;
    let x_q = match queries {
        Some(q) => q,
        None => {
            default_q = Tensor::from_vec(vec![pack.n_q, pack.d], pack.x_q.clone())?;
            &default_q
        }
    };
    forward(tape, bound, cfg, &x_bd, &pack.id, &phi0, x_q, t_steps)
}

/// Inference convenience: run a forward pass on a fresh tape and return the
/// decoded fields as a flat `[t x n_q x n_phi]` buffer.
pub fn predict(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    queries: Option<&Tensor>,
    t_steps: usize,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = forward_pack(&mut tape, &bound, cfg, pack, queries, t_steps)?;
    let mut out = Vec::new();
    for f in &fwd.fields {
        out.extend_from_slice(tape.data(*f));
    }
    Ok(out)
}
