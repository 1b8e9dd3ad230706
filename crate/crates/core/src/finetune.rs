//! Self-supervised physics fine-tuning.
//!
//! The backbone (encoder, latent rollout, decoder, output head) is frozen; a
//! residual encoder turns the backbone prediction's equation residuals into
//! per-step latent corrections, and a second zero-initialized head refines
//! the decoded fields. The loss anchors the refined prediction to the
//! backbone prediction on a random subset of points and penalizes equation
//! residuals of the refined prediction; ground truth is never consulted.
//!
//! Residual gradients flow through the finite-difference stencil queries:
//! the offset queries are part of the differentiable graph.

use std::path::Path;

use crate::checkpoint::{self, CheckpointData, KIND_FINETUNE};
use crate::dataio::FieldPack;
use crate::decoder;
use crate::error::{Error, Result};
use crate::mamba::LatentTrajectory;
use crate::model::{self, ModelConfig, ModelParams};
use crate::params::Mlp;
use crate::physics::{
    r_metric, residuals_euler, stencil_offsets, EulerFieldState, FdConfig, ResidualField,
    StencilFields,
};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};
use crate::train::AdamW;

/// Pooled statistics per equation component: mean, mean of squares, max.
const STATS_PER_COMPONENT: usize = 3;

pub fn stat_width(d: usize) -> usize {
    STATS_PER_COMPONENT * (1 + d)
}

/// Stage-2 trainable parameters. Both final layers start at zero so the
/// fine-tuned prediction begins exactly at the backbone prediction.
#[derive(Clone, Debug)]
pub struct FinetuneParams<T> {
    pub e3: Mlp<T>,
    pub ffn_ft: Mlp<T>,
}

impl<T> FinetuneParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FinetuneParams<U> {
        FinetuneParams {
            e3: self.e3.map(f),
            ffn_ft: self.ffn_ft.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a T)) {
        self.e3.visit("e3", f);
        self.ffn_ft.visit("ffn_ft", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut T)) {
        self.e3.visit_mut("e3", f);
        self.ffn_ft.visit_mut("ffn_ft", f);
    }
}

impl FinetuneParams<Tensor> {
    /// Narrow hidden layers keep each optimizer step's field perturbation
    /// small relative to the backbone prediction; the correction terms only
    /// need tiny, well-aimed nudges because differentiation amplifies them.
    pub fn init(rng: &mut Rng, cfg: &ModelConfig) -> Self {
        let hidden = (cfg.n_g / 4).max(4);
        FinetuneParams {
            e3: Mlp::init_zero_head(rng, &[stat_width(cfg.d), hidden, cfg.n_g]),
            ffn_ft: Mlp::init_zero_head(rng, &[cfg.n_g, hidden, cfg.n_phi]),
        }
    }
}

/// Per-channel binary anchor masks over `(t, n_q)`, sampled once per run
/// without replacement; each mask carries exactly `round(xi * n_q * t)` ones
/// (so its mean is within one element of `xi`).
#[derive(Clone, Debug)]
pub struct MaskSpec {
    pub xi: Vec<f64>,
    pub seed: u64,
    pub t: usize,
    pub n_q: usize,
    /// One flat `[t * n_q]` 0/1 buffer per channel.
    pub masks: Vec<Vec<f64>>,
}

impl MaskSpec {
    pub fn sample(xi: &[f64], seed: u64, t: usize, n_q: usize) -> Result<Self> {
        for &x in xi {
            if !(x > 0.0 && x <= 1.0) {
                return Err(Error::Config(format!(
                    "self-supervision proportion must be in (0, 1], got {x}"
                )));
            }
        }
        let slots = t * n_q;
        let mut rng = Rng::new(seed ^ 0x66696e65);
        let masks = xi
            .iter()
            .map(|&x| {
                let count = ((x * slots as f64).round() as usize).clamp(1, slots);
                let chosen = rng.sample_indices(slots, count);
                let mut m = vec![0.0; slots];
                for i in chosen {
                    m[i] = 1.0;
                }
                m
            })
            .collect();
        Ok(MaskSpec {
            xi: xi.to_vec(),
            seed,
            t,
            n_q,
            masks,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneConfig {
    pub lambda_phi: f64,
    pub lambda_r: f64,
    pub xi: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    /// FD spatial step as a fraction of the sample bounding-box diagonal.
    pub fd_fraction: f64,
    /// Optimizer epsilon; large values damp the early sign-step behavior
    /// that a zero-initialized head is sensitive to.
    pub adam_eps: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            lambda_phi: 1.0,
            lambda_r: 1.0,
            xi: 0.5,
            steps: 200,
            lr: 2e-3,
            seed: 0,
            fd_fraction: 0.01,
            adam_eps: 1e-8,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_phi < 0.0 || self.lambda_r < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("lr must be > 0".into()));
        }
        Ok(())
    }
}

// -- residuals on the tape ------------------------------------------------------

/// Residual nodes per step and component; each node is `[n_q x 1]`.
pub struct TapeResiduals {
    pub r1: Vec<NodeId>,
    /// `r2[step][axis]`
    pub r2: Vec<Vec<NodeId>>,
    pub n_q: usize,
    pub d: usize,
}

/// Differentiable mirror of the plain residual evaluation: `fields` holds
/// one `[(1 + 2d) * n_q x n_phi]` node per step, offset blocks stacked in
/// stencil order.
pub fn residuals_on_tape(
    tape: &mut Tape,
    fields: &[NodeId],
    state: &EulerFieldState,
    fd: &FdConfig,
    dt: f64,
    n_q: usize,
) -> Result<TapeResiduals> {
    if fields.len() < 2 {
        return Err(Error::Config(
            "residuals need at least 2 steps for the forward time difference".into(),
        ));
    }
    let d = fd.dx.len();
    let col = |tape: &mut Tape, node: NodeId, block: usize, channel: usize| -> Result<NodeId> {
        let rows = tape.slice_rows(node, block * n_q, n_q)?;
        tape.slice_cols(rows, channel, 1)
    };
    let mut r1 = Vec::new();
    let mut r2 = Vec::new();
    for s in 0..fields.len() - 1 {
        let rho_now = col(tape, fields[s], 0, state.rho)?;
        let rho_next = col(tape, fields[s + 1], 0, state.rho)?;
        let ddt = tape.sub(rho_next, rho_now)?;
        let mut c_res = tape.scale(ddt, 1.0 / dt);
        for a in 0..d {
            let rp = col(tape, fields[s], StencilFields::plus(a), state.rho)?;
            let up = col(tape, fields[s], StencilFields::plus(a), state.u[a])?;
            let fp = tape.mul(rp, up)?;
            let rm = col(tape, fields[s], StencilFields::minus(a), state.rho)?;
            let um = col(tape, fields[s], StencilFields::minus(a), state.u[a])?;
            let fm = tape.mul(rm, um)?;
            let diff = tape.sub(fp, fm)?;
            let term = tape.scale(diff, 1.0 / (2.0 * fd.dx[a]));
            c_res = tape.add(c_res, term)?;
        }
        r1.push(c_res);

        let mut comps = Vec::with_capacity(d);
        for comp in 0..d {
            let u_now = col(tape, fields[s], 0, state.u[comp])?;
            let mu_now = tape.mul(rho_now, u_now)?;
            let u_next = col(tape, fields[s + 1], 0, state.u[comp])?;
            let mu_next = tape.mul(rho_next, u_next)?;
            let ddt = tape.sub(mu_next, mu_now)?;
            let mut m_res = tape.scale(ddt, 1.0 / dt);
            for b in 0..d {
                let rp = col(tape, fields[s], StencilFields::plus(b), state.rho)?;
                let ucp = col(tape, fields[s], StencilFields::plus(b), state.u[comp])?;
                let ubp = col(tape, fields[s], StencilFields::plus(b), state.u[b])?;
                let fp = tape.mul(rp, ucp)?;
                let fp = tape.mul(fp, ubp)?;
                let rm = col(tape, fields[s], StencilFields::minus(b), state.rho)?;
                let ucm = col(tape, fields[s], StencilFields::minus(b), state.u[comp])?;
                let ubm = col(tape, fields[s], StencilFields::minus(b), state.u[b])?;
                let fm = tape.mul(rm, ucm)?;
                let fm = tape.mul(fm, ubm)?;
                let diff = tape.sub(fp, fm)?;
                let term = tape.scale(diff, 1.0 / (2.0 * fd.dx[b]));
                m_res = tape.add(m_res, term)?;
            }
            let pp = col(tape, fields[s], StencilFields::plus(comp), state.p)?;
            let pm = col(tape, fields[s], StencilFields::minus(comp), state.p)?;
            let pdiff = tape.sub(pp, pm)?;
            let pterm = tape.scale(pdiff, 1.0 / (2.0 * fd.dx[comp]));
            m_res = tape.add(m_res, pterm)?;
            comps.push(m_res);
        }
        r2.push(comps);
    }
    Ok(TapeResiduals { r1, r2, n_q, d })
}

/// Detach residual node values into a plain field for metric reporting.
pub fn residual_values(tape: &Tape, res: &TapeResiduals) -> ResidualField {
    let tp = res.r1.len();
    let mut r1 = Vec::with_capacity(tp * res.n_q);
    let mut r2 = Vec::with_capacity(tp * res.n_q * res.d);
    for s in 0..tp {
        r1.extend_from_slice(tape.data(res.r1[s]));
        for q in 0..res.n_q {
            for a in 0..res.d {
                r2.push(tape.data(res.r2[s][a])[q]);
            }
        }
    }
    ResidualField {
        t: tp,
        n_q: res.n_q,
        d: res.d,
        r1,
        r2,
    }
}

// -- operations -------------------------------------------------------------------

/// Pooled residual statistics per step (mean, mean of squares, max, per
/// component), computed from the cached backbone residuals. Row `i` of the
/// output feeds the correction for step `i + 1`; the final residual row is
/// reused for trailing steps because the forward time difference yields one
/// fewer residual row than there are decoded steps.
pub fn residual_stats(res: &ResidualField, t_steps: usize) -> Vec<f64> {
    let width = stat_width(res.d);
    let mut rows = Vec::with_capacity(res.t * width);
    for s in 0..res.t {
        let mut push_stats = |values: Vec<f64>| {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let meansq = values.iter().map(|v| v * v).sum::<f64>() / n;
            let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            rows.extend_from_slice(&[mean, meansq, max]);
        };
        push_stats(res.r1[s * res.n_q..(s + 1) * res.n_q].to_vec());
        for a in 0..res.d {
            push_stats(
                (0..res.n_q)
                    .map(|q| res.r2[(s * res.n_q + q) * res.d + a])
                    .collect(),
            );
        }
    }
    let mut out = Vec::with_capacity(t_steps * width);
    for i in 0..t_steps {
        let s = i.min(res.t - 1);
        out.extend_from_slice(&rows[s * width..(s + 1) * width]);
    }
    out
}

/// `delta_z = e3(stats)`: `[t x n_g]`, exactly zero at initialization.
pub fn encode_residuals(
    tape: &mut Tape,
    e3: &Mlp<NodeId>,
    stats: NodeId,
) -> Result<NodeId> {
    e3.forward(tape, stats)
}

/// `z_i <- z_i + delta_z_i`; `z0` is untouched and the input trajectory is
/// not mutated.
pub fn apply_correction(
    tape: &mut Tape,
    traj: &LatentTrajectory,
    delta_z: NodeId,
) -> Result<LatentTrajectory> {
    let mut z = Vec::with_capacity(traj.z.len());
    for (i, &zi) in traj.z.iter().enumerate() {
        let dz = tape.slice_rows(delta_z, i, 1)?;
        z.push(tape.add(zi, dz)?);
    }
    Ok(LatentTrajectory { z0: traj.z0, z })
}

/// One decoder pass feeding both heads: the frozen output head plus the
/// trainable zero-initialized head, summed.
pub fn decode_finetuned(
    tape: &mut Tape,
    decoder_bound: &decoder::DecoderParams<NodeId>,
    ffn_ft: &Mlp<NodeId>,
    traj: &LatentTrajectory,
    g0: NodeId,
    h_q: NodeId,
) -> Result<Vec<NodeId>> {
    let feats = decoder::decode_features(tape, decoder_bound, traj, g0, h_q)?;
    feats
        .into_iter()
        .map(|f| {
            let base = decoder_bound.ffn.forward(tape, f)?;
            let extra = ffn_ft.forward(tape, f)?;
            tape.add(base, extra)
        })
        .collect()
}

/// Fine-tune loss: anchor term over masked entries plus residual term, with
/// the stated normalizations. The anchor compares against the cached
/// backbone prediction; ground truth never enters.
///
/// Returns `(loss, anchor_term)`; the anchor term (before its weight) is
/// recorded in the history.
#[allow(clippy::too_many_arguments)]
pub fn loss_l2(
    tape: &mut Tape,
    phi_tilde_center: &[NodeId],
    phi_hat_center: &[Vec<f64>],
    masks: &MaskSpec,
    res_tilde: &TapeResiduals,
    cfg: &FinetuneConfig,
    n_q: usize,
    n_phi: usize,
) -> Result<(NodeId, NodeId)> {
    let t = phi_tilde_center.len();
    for &x in &masks.xi {
        if x <= 0.0 {
            return Err(Error::Config("xi must be positive".into()));
        }
    }
    // anchor: sum_i 1/(n_q * t * xi_i) * sum masked (phi_tilde - phi_hat)^2
    let mut anchor: Option<NodeId> = None;
    for (s, &pt) in phi_tilde_center.iter().enumerate() {
        let hat = tape.constant(vec![n_q, n_phi], phi_hat_center[s].clone())?;
        let diff = tape.sub(pt, hat)?;
        let sq = tape.mul(diff, diff)?;
        let mut weights = vec![0.0; n_q * n_phi];
        for c in 0..n_phi {
            let norm = 1.0 / (n_q as f64 * t as f64 * masks.xi[c]);
            for q in 0..n_q {
                weights[q * n_phi + c] = masks.masks[c][s * n_q + q] * norm;
            }
        }
        let w = tape.constant(vec![n_q, n_phi], weights)?;
        let contrib = tape.mul(sq, w)?;
        let ssum = tape.sum_all(contrib);
        anchor = Some(match anchor {
            Some(acc) => tape.add(acc, ssum)?,
            None => ssum,
        });
    }
    let anchor = anchor.ok_or_else(|| Error::Config("loss needs at least one step".into()))?;

    // residual: sum over equation components of 1/(n_q * t) * ||r||^2
    let mut res_term: Option<NodeId> = None;
    let add_sq = |tape: &mut Tape, node: NodeId, acc: Option<NodeId>| -> Result<NodeId> {
        let sq = tape.mul(node, node)?;
        let s = tape.sum_all(sq);
        Ok(match acc {
            Some(a) => tape.add(a, s)?,
            None => s,
        })
    };
    for s in 0..res_tilde.r1.len() {
        res_term = Some(add_sq(tape, res_tilde.r1[s], res_term)?);
        for a in 0..res_tilde.d {
            res_term = Some(add_sq(tape, res_tilde.r2[s][a], res_term)?);
        }
    }
    let res_term = res_term.ok_or_else(|| Error::Config("no residuals in loss".into()))?;
    let res_term = tape.scale(res_term, 1.0 / (n_q as f64 * t as f64));

    let weighted_anchor = tape.scale(anchor, cfg.lambda_phi);
    let weighted_res = tape.scale(res_term, cfg.lambda_r);
    let loss = tape.add(weighted_anchor, weighted_res)?;
    Ok((loss, anchor))
}

// -- the loop ----------------------------------------------------------------------

/// Backbone quantities cached once per run: the backbone is frozen, so its
/// encoder output, latent trajectory, query encodings, prediction, and
/// residual statistics are all constant.
pub struct FinetuneContext {
    pub g0: Tensor,
    pub z0: Tensor,
    pub z: Vec<Tensor>,
    pub h_q_ext: Tensor,
    pub phi_hat_ext: Vec<Vec<f64>>,
    pub phi_hat_center: Vec<Vec<f64>>,
    pub stats: Tensor,
    pub fd: FdConfig,
    pub state: EulerFieldState,
    pub n_q: usize,
    pub initial_r: ResidualField,
}

pub fn prepare_context(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    fd: &FdConfig,
) -> Result<FinetuneContext> {
    let state = EulerFieldState::from_channels(&pack.channel_names, pack.d)?;
    let offsets = stencil_offsets(fd, pack.d);
    let n_q = pack.n_q;
    let n_ext = offsets.len() * n_q;

    let mut extended = Vec::with_capacity(n_ext * pack.d);
    for off in &offsets {
        for q in 0..n_q {
            for a in 0..pack.d {
                extended.push(pack.x_q[q * pack.d + a] + off[a]);
            }
        }
    }
    let queries = Tensor::from_vec(vec![n_ext, pack.d], extended)?;

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = model::forward_pack(&mut tape, &bound, cfg, pack, Some(&queries), pack.t)?;

    let g0 = tape.to_tensor(fwd.g0);
    let z0 = tape.to_tensor(fwd.traj.z0);
    let z: Vec<Tensor> = fwd.traj.z.iter().map(|&n| tape.to_tensor(n)).collect();
    let h_q_ext = tape.to_tensor(fwd.h_q);
    let phi_hat_ext: Vec<Vec<f64>> = fwd.fields.iter().map(|&f| tape.data(f).to_vec()).collect();
    let phi_hat_center: Vec<Vec<f64>> = phi_hat_ext
        .iter()
        .map(|b| b[..n_q * pack.n_phi].to_vec())
        .collect();

    // plain residuals of the backbone prediction
    let mut blocks = vec![Vec::new(); offsets.len()];
    for step in &phi_hat_ext {
        for (b, block) in blocks.iter_mut().enumerate() {
            block.extend_from_slice(&step[b * n_q * pack.n_phi..(b + 1) * n_q * pack.n_phi]);
        }
    }
    let stencil = StencilFields {
        d: pack.d,
        t: pack.t,
        n_q,
        n_phi: pack.n_phi,
        channel_names: pack.channel_names.clone(),
        blocks,
        dt: pack.dt,
    };
    let initial_r = residuals_euler(&stencil, &state, fd)?;
    let stats = Tensor::from_vec(
        vec![pack.t, stat_width(pack.d)],
        residual_stats(&initial_r, pack.t),
    )?;

    Ok(FinetuneContext {
        g0,
        z0,
        z,
        h_q_ext,
        phi_hat_ext,
        phi_hat_center,
        stats,
        fd: fd.clone(),
        state,
        n_q,
        initial_r,
    })
}

pub struct FinetuneStep {
    pub loss: f64,
    pub anchor: f64,
    pub residuals: ResidualField,
    /// Refined prediction at the unshifted queries, `[t x n_q x n_phi]`.
    pub phi_tilde: Vec<f64>,
}

/// Build the fine-tune graph at the current stage-2 parameters and return
/// the loss node plus extracted diagnostics. Backbone tensors enter the tape
/// as constants.
fn build_step(
    tape: &mut Tape,
    ctx: &FinetuneContext,
    model_params: &ModelParams<Tensor>,
    ft_bound: &FinetuneParams<NodeId>,
    cfg: &FinetuneConfig,
    masks: &MaskSpec,
    pack: &FieldPack,
) -> Result<(NodeId, FinetuneStep)> {
    let frozen_decoder = model_params
        .decoder
        .map(&mut |t| tape.constant(t.shape().to_vec(), t.data().to_vec()).unwrap());
    let g0 = tape.constant(ctx.g0.shape().to_vec(), ctx.g0.data().to_vec())?;
    let z0 = tape.constant(ctx.z0.shape().to_vec(), ctx.z0.data().to_vec())?;
    let z: Vec<NodeId> = ctx
        .z
        .iter()
        .map(|t| tape.constant(t.shape().to_vec(), t.data().to_vec()))
        .collect::<Result<_>>()?;
    let traj = LatentTrajectory { z0, z };
    let h_q = tape.constant(ctx.h_q_ext.shape().to_vec(), ctx.h_q_ext.data().to_vec())?;
    let stats = tape.leaf(&ctx.stats);

    let delta_z = encode_residuals(tape, &ft_bound.e3, stats)?;
    let corrected = apply_correction(tape, &traj, delta_z)?;
    let phi_tilde_ext = decode_finetuned(
        tape,
        &frozen_decoder,
        &ft_bound.ffn_ft,
        &corrected,
        g0,
        h_q,
    )?;
    let phi_tilde_center: Vec<NodeId> = phi_tilde_ext
        .iter()
        .map(|&f| tape.slice_rows(f, 0, ctx.n_q))
        .collect::<Result<_>>()?;
    let res_tilde = residuals_on_tape(
        tape,
        &phi_tilde_ext,
        &ctx.state,
        &ctx.fd,
        pack.dt,
        ctx.n_q,
    )?;
    let (loss, anchor) = loss_l2(
        tape,
        &phi_tilde_center,
        &ctx.phi_hat_center,
        masks,
        &res_tilde,
        cfg,
        ctx.n_q,
        pack.n_phi,
    )?;

    let mut phi_tilde = Vec::with_capacity(pack.t * ctx.n_q * pack.n_phi);
    for &node in &phi_tilde_center {
        phi_tilde.extend_from_slice(tape.data(node));
    }
    let diag = FinetuneStep {
        loss: tape.scalar_value(loss),
        anchor: tape.scalar_value(anchor),
        residuals: residual_values(tape, &res_tilde),
        phi_tilde,
    };
    Ok((loss, diag))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    pub loss: f64,
    pub l_selfsup: f64,
    pub r_continuity: f64,
    pub r_momentum: Vec<f64>,
    pub mse_vs_gt: Option<f64>,
}

pub fn render_history(history: &[HistoryEntry], d: usize) -> String {
    let mut out = String::from("step,loss,l_selfsup,r_continuity");
    for a in 0..d {
        out.push_str(&format!(",r_momentum_{}", ["x", "y", "z"][a]));
    }
    out.push_str(",mse_vs_gt\n");
    for e in history {
        out.push_str(&format!("{},{},{},{}", e.step, e.loss, e.l_selfsup, e.r_continuity));
        for v in &e.r_momentum {
            out.push_str(&format!(",{v}"));
        }
        match e.mse_vs_gt {
            Some(m) => out.push_str(&format!(",{m}\n")),
            None => out.push_str(",n/a\n"),
        }
    }
    out
}

/// Run the self-supervised loop: gradient steps on the stage-2 parameters
/// only. The history records one entry per evaluated state, including the
/// initial one; `mse_vs_gt` is diagnostic and never enters the loss.
pub fn finetune_loop(
    model_params: &ModelParams<Tensor>,
    model_cfg: &ModelConfig,
    ft_params: &mut FinetuneParams<Tensor>,
    pack: &FieldPack,
    cfg: &FinetuneConfig,
    use_gt_diagnostics: bool,
) -> Result<Vec<HistoryEntry>> {
    cfg.validate()?;
    let fd = FdConfig::relative(cfg.fd_fraction, pack);
    let ctx = prepare_context(model_params, model_cfg, pack, &fd)?;
    let masks = MaskSpec::sample(&vec![cfg.xi; pack.n_phi], cfg.seed, pack.t, pack.n_q)?;
    let mut opt = AdamW::new(cfg.lr, 0.9, 0.999, cfg.adam_eps, 0.0);
    let mut history = Vec::with_capacity(cfg.steps + 1);

    for step in 0..=cfg.steps {
        let mut tape = Tape::new();
        let ft_bound = ft_params.map(&mut |t| tape.leaf(t));
        let (loss, diag) = build_step(
            &mut tape,
            &ctx,
            model_params,
            &ft_bound,
            cfg,
            &masks,
            pack,
        )?;
        if !diag.loss.is_finite() {
            return Err(Error::NonFinite {
                context: format!("fine-tune loss at step {step}"),
            });
        }
        let mse_vs_gt = if use_gt_diagnostics {
            Some(
                crate::physics::mse_metric(&diag.phi_tilde, &pack.phi, pack.t, pack.n_q, pack.n_phi)?
                    .total,
            )
        } else {
            None
        };
        let r = r_metric(&diag.residuals);
        history.push(HistoryEntry {
            step: step as u64,
            loss: diag.loss,
            l_selfsup: diag.anchor,
            r_continuity: r.continuity,
            r_momentum: r.momentum,
            mse_vs_gt,
        });
        if step == cfg.steps {
            break;
        }
        tape.backward(loss)?;
        let mut ids = Vec::new();
        ft_bound.visit(&mut |_, id| ids.push(*id));
        let mut i = 0;
        ft_params.visit_mut(&mut |_, t| {
            if let Some(g) = tape.grad(ids[i]) {
                t.accumulate_grad(g);
            }
            i += 1;
        });
        let mut tensors: Vec<&mut Tensor> = Vec::new();
        ft_params.visit_mut(&mut |_, t| tensors.push(t));
        opt.step(&mut tensors);
        ft_params.visit_mut(&mut |_, t| t.zero_grad());
    }
    Ok(history)
}

/// Refined prediction and its residuals at the sample's own queries for a
/// trained stage-2 parameter set.
pub fn predict_finetuned(
    model_params: &ModelParams<Tensor>,
    model_cfg: &ModelConfig,
    ft_params: &FinetuneParams<Tensor>,
    pack: &FieldPack,
    fd: &FdConfig,
) -> Result<(Vec<f64>, ResidualField)> {
    let ctx = prepare_context(model_params, model_cfg, pack, fd)?;
    let mut tape = Tape::new();
    let ft_bound = ft_params.map(&mut |t| tape.leaf(t));
    let cfg = FinetuneConfig::default();
    let masks = MaskSpec::sample(&vec![1.0; pack.n_phi], 0, pack.t, pack.n_q)?;
    let (_, diag) = build_step(&mut tape, &ctx, model_params, &ft_bound, &cfg, &masks, pack)?;
    Ok((diag.phi_tilde, diag.residuals))
}

// -- persistence --------------------------------------------------------------------

pub fn save_finetune(
    path: &Path,
    ft: &FinetuneParams<Tensor>,
    model_cfg: &ModelConfig,
    cfg: &FinetuneConfig,
    config_echo: &str,
) -> Result<()> {
    let mut tensors = Vec::new();
    ft.visit(&mut |n, t| tensors.push((n, t.clone())));
    let data = CheckpointData {
        kind: KIND_FINETUNE,
        config_echo: config_echo.to_string(),
        model_cfg: model_cfg.clone(),
        rng_state: cfg.seed,
        step: cfg.steps as u64,
        opt_t: 0,
        hyper_f: vec![
            cfg.lambda_phi,
            cfg.lambda_r,
            cfg.xi,
            cfg.lr,
            cfg.fd_fraction,
            cfg.adam_eps,
        ],
        hyper_u: vec![cfg.steps as u64, cfg.seed],
        m: tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        v: tensors.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        tensors,
    };
    checkpoint::save_checkpoint(path, &data)
}

pub fn load_finetune(path: &Path) -> Result<(FinetuneParams<Tensor>, ModelConfig, FinetuneConfig)> {
    let data = checkpoint::load_checkpoint(path)?;
    if data.kind != KIND_FINETUNE {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: format!("checkpoint kind {} is not a fine-tune set", data.kind),
        });
    }
    if data.hyper_f.len() != 6 || data.hyper_u.len() != 2 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            msg: "unexpected hyperparameter layout".into(),
        });
    }
    let cfg = FinetuneConfig {
        lambda_phi: data.hyper_f[0],
        lambda_r: data.hyper_f[1],
        xi: data.hyper_f[2],
        lr: data.hyper_f[3],
        fd_fraction: data.hyper_f[4],
        adam_eps: data.hyper_f[5],
        steps: data.hyper_u[0] as usize,
        seed: data.hyper_u[1],
    };
    let mut rng = Rng::new(cfg.seed);
    let mut ft = FinetuneParams::init(&mut rng, &data.model_cfg);
    checkpoint::restore_named(&data.tensors, |f| ft.visit_mut(f), path)?;
    Ok((ft, data.model_cfg, cfg))
}
