//! Parameter containers shared by the encoder, latent rollout, and decoder.
//!
//! Each container is generic over its tensor slot so the same struct serves
//! two roles: `Struct<Tensor>` owns the weights, `Struct<NodeId>` is the
//! tape-bound view used during a forward pass. `map` converts between them
//! and `visit`/`visit_mut` enumerate slots in the identical, fixed order —
//! checkpointing, the optimizer, and gradient collection all rely on that
//! order being stable.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

/// Normalization constant used by every Galerkin attention block.
pub const ATTN_EPS: f64 = 1e-5;

/// Carves a flat parameter vector already on the tape into per-slot nodes of
/// the right shapes, keeping every slice differentiable. Used to gradient-check
/// whole parameter structs against finite differences on one flat tensor.
pub struct FlatCursor<'a> {
    tape: &'a mut Tape,
    column: NodeId,
    pos: usize,
}

impl<'a> FlatCursor<'a> {
    pub fn new(tape: &'a mut Tape, flat: NodeId) -> Self {
        let len = tape.data(flat).len();
        let column = tape.reshape(flat, vec![len, 1]).expect("flat reshape");
        FlatCursor {
            tape,
            column,
            pos: 0,
        }
    }

    pub fn next_like(&mut self, like: &Tensor) -> NodeId {
        let n = like.numel();
        let slice = self
            .tape
            .slice_rows(self.column, self.pos, n)
            .expect("flat cursor overrun");
        self.pos += n;
        self.tape
            .reshape(slice, like.shape().to_vec())
            .expect("flat cursor reshape")
    }
}

/// All tensor data of a parameter struct, concatenated in visit order.
pub fn flatten_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> Vec<f64> {
    let mut flat = Vec::new();
    for t in tensors {
        flat.extend_from_slice(t.data());
    }
    flat
}

// -- Linear -------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Linear<U> {
        Linear {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.w"), &self.w);
        f(format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w"), &mut self.w);
        f(format!("{prefix}.b"), &mut self.b);
    }
}

impl Linear<Tensor> {
    /// Truncated-normal weights with 1/sqrt(fan_in) scale, zero bias.
    pub fn init(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_vec(
            vec![fan_in, fan_out],
            (0..fan_in * fan_out)
                .map(|_| rng.truncated_normal(std))
                .collect(),
        )
        .unwrap()
        .with_grad();
        let b = Tensor::zeros(vec![fan_out]).with_grad();
        Linear { w, b }
    }

    /// All-zero layer; used for heads that must start as the identity of the
    /// surrounding sum.
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Tensor::zeros(vec![fan_in, fan_out]).with_grad(),
            b: Tensor::zeros(vec![fan_out]).with_grad(),
        }
    }
}

impl Linear<NodeId> {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let xw = tape.matmul(x, self.w)?;
        tape.add(xw, self.b)
    }
}

// -- MLP ----------------------------------------------------------------------

/// Stack of linear layers with GELU between them; the final layer is linear.
#[derive(Clone, Debug)]
pub struct Mlp<T> {
    pub layers: Vec<Linear<T>>,
}

impl<T> Mlp<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Mlp<U> {
        Mlp {
            layers: self.layers.iter().map(|l| l.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("{prefix}.{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("{prefix}.{i}"), f);
        }
    }
}

impl Mlp<Tensor> {
    /// `dims = [in, hidden..., out]`.
    pub fn init(rng: &mut Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1]))
            .collect();
        Mlp { layers }
    }

    /// Initialized layers except a zeroed final one, so the whole MLP maps
    /// everything to zero at start while interior features stay expressive.
    pub fn init_zero_head(rng: &mut Rng, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                if i + 1 == n {
                    Linear::zeros(w[0], w[1])
                } else {
                    Linear::init(rng, w[0], w[1])
                }
            })
            .collect();
        Mlp { layers }
    }
}

impl Mlp<NodeId> {
    pub fn forward(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, h)?;
            if i != last {
                h = tape.gelu(h);
            }
        }
        Ok(h)
    }
}

// -- Galerkin attention ---------------------------------------------------------

#[derive(Clone, Debug)]
pub struct AttnHead<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

impl<T> AttnHead<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttnHead<U> {
        AttnHead {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

/// Multi-head softmax-free attention: per head,
/// `out = Q (K_norm^T V_norm) / n_kv` with keys and values normalized per
/// channel over the key sequence. Head outputs are projected and summed.
/// Cost is linear in the key count; no n x n matrix is ever formed.
#[derive(Clone, Debug)]
pub struct GalerkinAttention<T> {
    pub heads: Vec<AttnHead<T>>,
}

impl<T> GalerkinAttention<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GalerkinAttention<U> {
        GalerkinAttention {
            heads: self.heads.iter().map(|h| h.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        for (i, h) in self.heads.iter().enumerate() {
            h.visit(&format!("{prefix}.h{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.visit_mut(&format!("{prefix}.h{i}"), f);
        }
    }
}

impl GalerkinAttention<Tensor> {
    pub fn init(rng: &mut Rng, width: usize, heads: usize) -> Self {
        assert!(
            width % heads == 0,
            "width {width} not divisible by {heads} heads"
        );
        let dh = width / heads;
        let heads = (0..heads)
            .map(|_| {
                let std = 1.0 / (width as f64).sqrt();
                let proj = |rng: &mut Rng, r: usize, c: usize| {
                    Tensor::from_vec(
                        vec![r, c],
                        (0..r * c).map(|_| rng.truncated_normal(std)).collect(),
                    )
                    .unwrap()
                    .with_grad()
                };
                AttnHead {
                    wq: proj(rng, width, dh),
                    wk: proj(rng, width, dh),
                    wv: proj(rng, width, dh),
                    wo: proj(rng, dh, width),
                }
            })
            .collect();
        GalerkinAttention { heads }
    }
}

impl GalerkinAttention<NodeId> {
    /// Attention of `queries` over `keys_values`, without the residual
    /// connection (callers wire that). Both arguments are `[rows x width]`.
    pub fn forward(&self, tape: &mut Tape, queries: NodeId, keys_values: NodeId) -> Result<NodeId> {
        let n_kv = tape.shape(keys_values)[0];
        let mut total: Option<NodeId> = None;
        for head in &self.heads {
            let q = tape.matmul(queries, head.wq)?;
            let k = tape.matmul(keys_values, head.wk)?;
            let v = tape.matmul(keys_values, head.wv)?;
            let kn = tape.seq_norm(k, ATTN_EPS)?;
            let vn = tape.seq_norm(v, ATTN_EPS)?;
            let kt = tape.transpose(kn)?;
            let ktv = tape.matmul(kt, vn)?;
            let qktv = tape.matmul(q, ktv)?;
            let scaled = tape.scale(qktv, 1.0 / n_kv as f64);
            let projected = tape.matmul(scaled, head.wo)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, projected)?,
                None => projected,
            });
        }
        Ok(total.expect("attention needs at least one head"))
    }
}

// -- Selective state-space layer --------------------------------------------------

/// One gated selective-SSM layer. The recurrence is
/// `h_t = exp(dt_t * A) ⊙ h_{t-1} + (dt_t ⊙ x_t) ⊗ B_t`, `y_t = h_t C_t`,
/// with input-dependent `dt`, `B`, `C`; `A = -exp(a_log)` keeps every decay
/// factor strictly inside the unit interval.
#[derive(Clone, Debug)]
pub struct MambaLayer<T> {
    pub norm_scale: T,
    pub in_proj: Linear<T>,
    pub gate_proj: Linear<T>,
    pub dt_proj: Linear<T>,
    pub b_proj: Linear<T>,
    pub c_proj: Linear<T>,
    pub a_log: T,
    pub out_proj: Linear<T>,
}

impl<T> MambaLayer<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MambaLayer<U> {
        MambaLayer {
            norm_scale: f(&self.norm_scale),
            in_proj: self.in_proj.map(f),
            gate_proj: self.gate_proj.map(f),
            dt_proj: self.dt_proj.map(f),
            b_proj: self.b_proj.map(f),
            c_proj: self.c_proj.map(f),
            a_log: f(&self.a_log),
            out_proj: self.out_proj.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        f(format!("{prefix}.norm_scale"), &self.norm_scale);
        self.in_proj.visit(&format!("{prefix}.in_proj"), f);
        self.gate_proj.visit(&format!("{prefix}.gate_proj"), f);
        self.dt_proj.visit(&format!("{prefix}.dt_proj"), f);
        self.b_proj.visit(&format!("{prefix}.b_proj"), f);
        self.c_proj.visit(&format!("{prefix}.c_proj"), f);
        f(format!("{prefix}.a_log"), &self.a_log);
        self.out_proj.visit(&format!("{prefix}.out_proj"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        f(format!("{prefix}.norm_scale"), &mut self.norm_scale);
        self.in_proj.visit_mut(&format!("{prefix}.in_proj"), f);
        self.gate_proj.visit_mut(&format!("{prefix}.gate_proj"), f);
        self.dt_proj.visit_mut(&format!("{prefix}.dt_proj"), f);
        self.b_proj.visit_mut(&format!("{prefix}.b_proj"), f);
        self.c_proj.visit_mut(&format!("{prefix}.c_proj"), f);
        f(format!("{prefix}.a_log"), &mut self.a_log);
        self.out_proj.visit_mut(&format!("{prefix}.out_proj"), f);
    }
}

impl MambaLayer<Tensor> {
    pub fn init(rng: &mut Rng, width: usize, state: usize) -> Self {
        // A[c,s] = -(s+1); step sizes log-uniform in [1e-3, 1e-1]
        let a_log = Tensor::from_vec(
            vec![width, state],
            (0..width * state)
                .map(|i| (((i % state) + 1) as f64).ln())
                .collect(),
        )
        .unwrap()
        .with_grad();
        let mut dt_proj = Linear::init(rng, width, width);
        for b in dt_proj.b.data_mut().iter_mut() {
            let dt0 = (rng.uniform_in((1e-3f64).ln(), (1e-1f64).ln())).exp();
            *b = (dt0.exp() - 1.0).ln(); // softplus inverse
        }
        MambaLayer {
            norm_scale: Tensor::full(vec![width], 1.0).with_grad(),
            in_proj: Linear::init(rng, width, width),
            gate_proj: Linear::init(rng, width, width),
            dt_proj,
            b_proj: Linear::init(rng, width, state),
            c_proj: Linear::init(rng, width, state),
            a_log,
            out_proj: Linear::init(rng, width, width),
        }
    }
}
