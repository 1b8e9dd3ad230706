//! Finite-difference derivative queries, inviscid flow residuals, and the
//! MSE / residual evaluation pair.
//!
//! Spatial derivatives use second-order central differences at offset query
//! points; the time derivative is the first-order forward difference between
//! consecutive decoded steps, so residuals exist for steps `1..T-1`.
//! Composite fluxes (rho*u, rho*u*u) are formed from the field values at each
//! offset point first and differenced afterwards.

use crate::dataio::{AnalyticCase, FieldPack};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor};

/// Temporal step policy: residuals always use the sample's own step spacing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum DtMode {
    #[default]
    ModelStep,
}

/// Spatial step per axis, in domain units.
#[derive(Clone, Debug, PartialEq)]
pub struct FdConfig {
    pub dx: Vec<f64>,
    pub dt_mode: DtMode,
}

impl FdConfig {
    pub fn uniform(dx: f64, d: usize) -> Self {
        assert!(dx > 0.0, "dx must be positive");
        FdConfig {
            dx: vec![dx; d],
            dt_mode: DtMode::ModelStep,
        }
    }

    /// Step as a fraction of the sample's bounding-box diagonal (default
    /// fraction 0.01).
    pub fn relative(fraction: f64, pack: &FieldPack) -> Self {
        Self::uniform(fraction * pack.bbox_diagonal(), pack.d)
    }
}

// -- stencils -----------------------------------------------------------------

/// Central first derivative: exact on polynomials up to degree 2.
pub fn fd_spatial_first(f_plus: f64, f_minus: f64, dx: f64) -> f64 {
    (f_plus - f_minus) / (2.0 * dx)
}

/// Central second derivative: exact on polynomials up to degree 3.
pub fn fd_spatial_second(f_plus: f64, f_center: f64, f_minus: f64, dx: f64) -> f64 {
    (f_plus - 2.0 * f_center + f_minus) / (dx * dx)
}

/// Forward time difference: exact on linear functions of t.
pub fn fd_time(f_t: f64, f_t_next: f64, dt: f64) -> f64 {
    (f_t_next - f_t) / dt
}

// -- stencil field containers ----------------------------------------------------

/// Offset layout shared by every stencil consumer: block 0 is the unshifted
/// query set, block `1 + 2a` is `+dx[a]` along axis `a`, block `2 + 2a` is
/// `-dx[a]`.
pub fn stencil_offsets(fd: &FdConfig, d: usize) -> Vec<Vec<f64>> {
    let mut offsets = vec![vec![0.0; d]];
    for a in 0..d {
        let mut plus = vec![0.0; d];
        plus[a] = fd.dx[a];
        let mut minus = vec![0.0; d];
        minus[a] = -fd.dx[a];
        offsets.push(plus);
        offsets.push(minus);
    }
    offsets
}

/// Field values on the full stencil: one block per offset, each
/// `[t x n_q x n_phi]` row-major.
#[derive(Clone, Debug)]
pub struct StencilFields {
    pub d: usize,
    pub t: usize,
    pub n_q: usize,
    pub n_phi: usize,
    pub channel_names: Vec<String>,
    pub blocks: Vec<Vec<f64>>,
    pub dt: f64,
}

impl StencilFields {
    pub fn value(&self, block: usize, step: usize, q: usize, channel: usize) -> f64 {
        self.blocks[block][(step * self.n_q + q) * self.n_phi + channel]
    }

    pub fn center_block(&self) -> &[f64] {
        &self.blocks[0]
    }

    pub fn plus(axis: usize) -> usize {
        1 + 2 * axis
    }

    pub fn minus(axis: usize) -> usize {
        2 + 2 * axis
    }

    /// Sample an analytic solution onto the stencil: times are
    /// `(s + 1) * dt` matching the decoded-step convention.
    pub fn from_case(
        case: &AnalyticCase,
        x_q: &[f64],
        d: usize,
        t_steps: usize,
        dt: f64,
        fd: &FdConfig,
    ) -> Self {
        let n_q = x_q.len() / d;
        let offsets = stencil_offsets(fd, d);
        let mut blocks = Vec::with_capacity(offsets.len());
        for off in &offsets {
            let mut block = Vec::with_capacity(t_steps * n_q * 4);
            for s in 0..t_steps {
                let t = (s + 1) as f64 * dt;
                for q in 0..n_q {
                    let pos: Vec<f64> = (0..d).map(|a| x_q[q * d + a] + off[a]).collect();
                    block.extend_from_slice(&case.eval(&pos, t));
                }
            }
            blocks.push(block);
        }
        StencilFields {
            d,
            t: t_steps,
            n_q,
            n_phi: 4,
            channel_names: crate::dataio::CHANNELS.iter().map(|s| s.to_string()).collect(),
            blocks,
            dt,
        }
    }
}

/// Channel layout of a flow state: velocity per axis, pressure, density.
#[derive(Clone, Debug)]
pub struct EulerFieldState {
    pub u: Vec<usize>,
    pub p: usize,
    pub rho: usize,
}

impl EulerFieldState {
    /// Resolve channels by name: `u_x, u_y[, u_z], p, rho`.
    pub fn from_channels(names: &[String], d: usize) -> Result<Self> {
        let find = |want: &str| -> Result<usize> {
            names
                .iter()
                .position(|n| n == want)
                .ok_or_else(|| Error::Config(format!("missing channel {want}")))
        };
        let axes = ["u_x", "u_y", "u_z"];
        let u = (0..d).map(|a| find(axes[a])).collect::<Result<Vec<_>>>()?;
        Ok(EulerFieldState {
            u,
            p: find("p")?,
            rho: find("rho")?,
        })
    }
}

/// Pointwise residuals of the continuity and momentum equations on steps
/// `1..T-1` (the forward time difference consumes the final step).
#[derive(Clone, Debug)]
pub struct ResidualField {
    /// T - 1
    pub t: usize,
    pub n_q: usize,
    pub d: usize,
    /// `[t x n_q]`
    pub r1: Vec<f64>,
    /// `[t x n_q x d]`
    pub r2: Vec<f64>,
}

/// Continuity: `d_t rho + div(rho u)`. Momentum component a:
/// `d_t(rho u_a) + sum_b d_b(rho u_a u_b) + d_a p`.
pub fn residuals_euler(
    fields: &StencilFields,
    state: &EulerFieldState,
    fd: &FdConfig,
) -> Result<ResidualField> {
    if fields.t < 2 {
        return Err(Error::Config(
            "residuals need at least 2 steps for the forward time difference".into(),
        ));
    }
    if fd.dx.len() != fields.d {
        return Err(Error::Config(format!(
            "fd has {} axes, fields have {}",
            fd.dx.len(),
            fields.d
        )));
    }
    let d = fields.d;
    let n_q = fields.n_q;
    let tp = fields.t - 1;
    let dt = fields.dt;
    let mut r1 = vec![0.0; tp * n_q];
    let mut r2 = vec![0.0; tp * n_q * d];

    let v = |block: usize, s: usize, q: usize, c: usize| fields.value(block, s, q, c);
    for s in 0..tp {
        for q in 0..n_q {
            let mut c_res = fd_time(v(0, s, q, state.rho), v(0, s + 1, q, state.rho), dt);
            for a in 0..d {
                let fp = v(StencilFields::plus(a), s, q, state.rho)
                    * v(StencilFields::plus(a), s, q, state.u[a]);
                let fm = v(StencilFields::minus(a), s, q, state.rho)
                    * v(StencilFields::minus(a), s, q, state.u[a]);
                c_res += fd_spatial_first(fp, fm, fd.dx[a]);
            }
            r1[s * n_q + q] = c_res;

            for comp in 0..d {
                let mut m_res = fd_time(
                    v(0, s, q, state.rho) * v(0, s, q, state.u[comp]),
                    v(0, s + 1, q, state.rho) * v(0, s + 1, q, state.u[comp]),
                    dt,
                );
                for b in 0..d {
                    let fp = v(StencilFields::plus(b), s, q, state.rho)
                        * v(StencilFields::plus(b), s, q, state.u[comp])
                        * v(StencilFields::plus(b), s, q, state.u[b]);
                    let fm = v(StencilFields::minus(b), s, q, state.rho)
                        * v(StencilFields::minus(b), s, q, state.u[comp])
                        * v(StencilFields::minus(b), s, q, state.u[b]);
                    m_res += fd_spatial_first(fp, fm, fd.dx[b]);
                }
                m_res += fd_spatial_first(
                    v(StencilFields::plus(comp), s, q, state.p),
                    v(StencilFields::minus(comp), s, q, state.p),
                    fd.dx[comp],
                );
                r2[(s * n_q + q) * d + comp] = m_res;
            }
        }
    }
    Ok(ResidualField {
        t: tp,
        n_q,
        d,
        r1,
        r2,
    })
}

impl ResidualField {
    pub fn max_abs(&self) -> f64 {
        self.r1
            .iter()
            .chain(&self.r2)
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

// -- model stencil queries ---------------------------------------------------------

/// Decode fields at the query set shifted by each offset, in a single
/// forward pass: the latent trajectory is computed once and all offset
/// blocks ride the same cross-attention. Returns one `[t x n_q x n_phi]`
/// block per offset.
pub fn query_with_offsets(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    offsets: &[Vec<f64>],
) -> Result<Vec<Vec<f64>>> {
    let n_q = pack.n_q;
    let d = pack.d;
    let mut extended = Vec::with_capacity(offsets.len() * n_q * d);
    for off in offsets {
        for q in 0..n_q {
            for a in 0..d {
                extended.push(pack.x_q[q * d + a] + off[a]);
            }
        }
    }
    let queries = Tensor::from_vec(vec![offsets.len() * n_q, d], extended)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fwd = model::forward_pack(&mut tape, &bound, cfg, pack, Some(&queries), pack.t)?;

    let mut blocks = vec![Vec::with_capacity(pack.t * n_q * pack.n_phi); offsets.len()];
    for f in &fwd.fields {
        let data = tape.data(*f);
        for (b, block) in blocks.iter_mut().enumerate() {
            block.extend_from_slice(&data[b * n_q * pack.n_phi..(b + 1) * n_q * pack.n_phi]);
        }
    }
    Ok(blocks)
}

/// Full stencil of model predictions for residual evaluation.
pub fn model_stencil(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    fd: &FdConfig,
) -> Result<StencilFields> {
    let offsets = stencil_offsets(fd, pack.d);
    let blocks = query_with_offsets(params, cfg, pack, &offsets)?;
    Ok(StencilFields {
        d: pack.d,
        t: pack.t,
        n_q: pack.n_q,
        n_phi: pack.n_phi,
        channel_names: pack.channel_names.clone(),
        blocks,
        dt: pack.dt,
    })
}

// -- metrics ------------------------------------------------------------------------

/// Per-channel mean squared error over `(t, n_q)`, plus the sum over channels.
#[derive(Clone, Debug, PartialEq)]
pub struct MseResult {
    pub per_channel: Vec<f64>,
    pub total: f64,
}

pub fn mse_metric(
    pred: &[f64],
    gt: &[f64],
    t: usize,
    n_q: usize,
    n_phi: usize,
) -> Result<MseResult> {
    let expected = t * n_q * n_phi;
    if pred.len() != expected || gt.len() != expected {
        return Err(Error::Validation(format!(
            "mse expects {} values, got pred {} and gt {}",
            expected,
            pred.len(),
            gt.len()
        )));
    }
    let mut per_channel = vec![0.0; n_phi];
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        let d = p - g;
        per_channel[i % n_phi] += d * d;
    }
    let norm = (t * n_q) as f64;
    for c in per_channel.iter_mut() {
        *c /= norm;
    }
    let total = per_channel.iter().sum();
    Ok(MseResult { per_channel, total })
}

/// Mean squared residual per equation component, and their mean as the
/// scalar summary.
#[derive(Clone, Debug, PartialEq)]
pub struct RMetric {
    pub continuity: f64,
    pub momentum: Vec<f64>,
    pub total: f64,
}

pub fn r_metric(res: &ResidualField) -> RMetric {
    let norm = (res.t * res.n_q) as f64;
    let continuity = res.r1.iter().map(|v| v * v).sum::<f64>() / norm;
    let momentum: Vec<f64> = (0..res.d)
        .map(|a| {
            res.r2
                .iter()
                .skip(a)
                .step_by(res.d)
                .map(|v| v * v)
                .sum::<f64>()
                / norm
        })
        .collect();
    let total =
        (continuity + momentum.iter().sum::<f64>()) / (1.0 + res.d as f64);
    RMetric {
        continuity,
        momentum,
        total,
    }
}

/// Joint accuracy/realism record. MSE fields are absent, not zero, when no
/// ground truth is available.
#[derive(Clone, Debug)]
pub struct MseRReport {
    pub mse: Option<MseResult>,
    pub channel_names: Vec<String>,
    pub r: RMetric,
    pub n_q: usize,
    pub t: usize,
    pub dx: Vec<f64>,
    pub dt: f64,
}

const AXIS_NAMES: [&str; 3] = ["x", "y", "z"];

/// Deterministic `key = value` rendering; float formatting is Rust's
/// shortest round-trip form.
pub fn render_report(report: &MseRReport) -> String {
    let mut out = String::new();
    match &report.mse {
        Some(mse) => {
            out.push_str(&format!("mse.total = {}\n", mse.total));
            for (name, v) in report.channel_names.iter().zip(&mse.per_channel) {
                out.push_str(&format!("mse.{name} = {v}\n"));
            }
        }
        None => out.push_str("mse = n/a\n"),
    }
    out.push_str(&format!("r.total = {}\n", report.r.total));
    out.push_str(&format!("r.continuity = {}\n", report.r.continuity));
    for (a, v) in report.r.momentum.iter().enumerate() {
        out.push_str(&format!("r.momentum_{} = {}\n", AXIS_NAMES[a], v));
    }
    out.push_str(&format!("n_q = {}\n", report.n_q));
    out.push_str(&format!("t = {}\n", report.t));
    let dx: Vec<String> = report.dx.iter().map(|v| v.to_string()).collect();
    out.push_str(&format!("dx = {}\n", dx.join(",")));
    out.push_str(&format!("dt = {}\n", report.dt));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gaussian_case, uniform_flow_case, vortex_case, CHANNELS};
    use crate::rng::Rng;

    fn channel_names() -> Vec<String> {
        CHANNELS.iter().map(|s| s.to_string()).collect()
    }

    fn state2d() -> EulerFieldState {
        EulerFieldState::from_channels(&channel_names(), 2).unwrap()
    }

    #[test]
    fn first_derivative_examples() {
        // f = x^2 at x=1, dx=0.1: exact up to roundoff
        let f = |x: f64| x * x;
        assert!((fd_spatial_first(f(1.1), f(0.9), 0.1) - 2.0).abs() < 1e-12);
        assert_eq!(fd_spatial_first(3.0, 3.0, 0.1), 0.0);
        // f = x^3 at x=1: (1.331 - 0.729) / 0.2 = 3.01
        let g = |x: f64| x * x * x;
        let got = fd_spatial_first(g(1.1), g(0.9), 0.1);
        assert!((got - 3.01).abs() < 1e-12);
    }

    #[test]
    fn second_derivative_examples() {
        let f = |x: f64| x * x;
        let got = fd_spatial_second(f(0.8), f(0.7), f(0.6), 0.1);
        assert!((got - 2.0).abs() < 1e-10);
        let lin = |x: f64| 3.0 * x + 1.0;
        let got = fd_spatial_second(lin(1.1), lin(1.0), lin(0.9), 0.1);
        assert!(got.abs() < 1e-10);
        let got = fd_spatial_second((0.1f64).sin(), 0.0, (-0.1f64).sin(), 0.1);
        assert!(got.abs() < 1e-3, "sin'' at 0 should be ~0, got {got}");
    }

    #[test]
    fn time_derivative_examples() {
        assert_eq!(fd_time(1.0, 1.5, 0.5), 1.0);
        assert_eq!(fd_time(2.0, 2.0, 0.5), 0.0);
        // f = t^2 at t=1, dt=0.1: biased by dt * f''/2 = 0.1
        let got = fd_time(1.0, 1.21, 0.1);
        assert!((got - 2.1).abs() < 1e-12);
    }

    #[test]
    fn uniform_state_has_zero_residuals() {
        let case = uniform_flow_case();
        let mut rng = Rng::new(1);
        let x_q: Vec<f64> = (0..20).map(|_| rng.uniform()).collect();
        let fd = FdConfig::uniform(0.01, 2);
        let fields = StencilFields::from_case(&case, &x_q, 2, 4, 0.1, &fd);
        let res = residuals_euler(&fields, &state2d(), &fd).unwrap();
        assert_eq!(res.max_abs(), 0.0);
    }

    #[test]
    fn residuals_require_two_steps() {
        let case = uniform_flow_case();
        let fd = FdConfig::uniform(0.01, 2);
        let fields = StencilFields::from_case(&case, &[0.5, 0.5], 2, 1, 0.1, &fd);
        assert!(residuals_euler(&fields, &state2d(), &fd).is_err());
    }

    #[test]
    fn missing_channel_is_config_error() {
        let names: Vec<String> = ["u_x", "u_y", "pressure", "rho"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert!(matches!(
            EulerFieldState::from_channels(&names, 2),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn linear_terms_superpose() {
        // with u == 0 the only surviving terms are d_t rho (continuity) and
        // grad p (momentum), both linear in the fields
        let fd = FdConfig::uniform(0.05, 2);
        let mut rng = Rng::new(7);
        let mk = |rng: &mut Rng| {
            let t = 3;
            let n_q = 4;
            let blocks: Vec<Vec<f64>> = (0..5)
                .map(|_| {
                    (0..t * n_q * 4)
                        .map(|i| if i % 4 >= 2 { rng.normal() } else { 0.0 })
                        .collect()
                })
                .collect();
            StencilFields {
                d: 2,
                t,
                n_q,
                n_phi: 4,
                channel_names: channel_names(),
                blocks,
                dt: 0.1,
            }
        };
        let a = mk(&mut rng);
        let b = mk(&mut rng);
        let combined = StencilFields {
            blocks: a
                .blocks
                .iter()
                .zip(&b.blocks)
                .map(|(x, y)| x.iter().zip(y).map(|(p, q)| 2.0 * p + 0.5 * q).collect())
                .collect(),
            ..a.clone()
        };
        let ra = residuals_euler(&a, &state2d(), &fd).unwrap();
        let rb = residuals_euler(&b, &state2d(), &fd).unwrap();
        let rc = residuals_euler(&combined, &state2d(), &fd).unwrap();
        for i in 0..ra.r1.len() {
            let want = 2.0 * ra.r1[i] + 0.5 * rb.r1[i];
            assert!((rc.r1[i] - want).abs() < 1e-12);
        }
        for i in 0..ra.r2.len() {
            let want = 2.0 * ra.r2[i] + 0.5 * rb.r2[i];
            assert!((rc.r2[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn mse_matches_double_loop_oracle() {
        let mut rng = Rng::new(3);
        let (t, n_q, n_phi) = (3, 5, 2);
        let pred: Vec<f64> = (0..t * n_q * n_phi).map(|_| rng.normal()).collect();
        let gt: Vec<f64> = (0..t * n_q * n_phi).map(|_| rng.normal()).collect();
        let got = mse_metric(&pred, &gt, t, n_q, n_phi).unwrap();

        let mut oracle = vec![0.0; n_phi];
        for s in 0..t {
            for q in 0..n_q {
                for c in 0..n_phi {
                    let i = (s * n_q + q) * n_phi + c;
                    oracle[c] += (pred[i] - gt[i]).powi(2) / (t * n_q) as f64;
                }
            }
        }
        for (a, b) in got.per_channel.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((got.total - oracle.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn mse_trivial_cases() {
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let zero = mse_metric(&v, &v, 2, 1, 2).unwrap();
        assert_eq!(zero.total, 0.0);
        let shifted: Vec<f64> = v
            .iter()
            .enumerate()
            .map(|(i, x)| if i % 2 == 0 { x + 1.0 } else { *x })
            .collect();
        let one = mse_metric(&shifted, &v, 2, 1, 2).unwrap();
        assert_eq!(one.per_channel, vec![1.0, 0.0]);
        assert_eq!(one.total, 1.0);
    }

    #[test]
    fn r_metric_definition_and_oracle() {
        let res = ResidualField {
            t: 2,
            n_q: 3,
            d: 2,
            r1: vec![0.0; 6],
            r2: {
                let mut v = vec![0.0; 12];
                v[0] = 0.7; // one momentum-x slot
                v
            },
        };
        let m = r_metric(&res);
        assert_eq!(m.continuity, 0.0);
        assert!((m.momentum[0] - 0.49 / 6.0).abs() < 1e-15);
        assert_eq!(m.momentum[1], 0.0);
        assert!((m.total - (0.49 / 6.0) / 3.0).abs() < 1e-15);

        let mut rng = Rng::new(8);
        let res = ResidualField {
            t: 3,
            n_q: 4,
            d: 2,
            r1: (0..12).map(|_| rng.normal()).collect(),
            r2: (0..24).map(|_| rng.normal()).collect(),
        };
        let m = r_metric(&res);
        let mut c = 0.0;
        let mut mx = 0.0;
        let mut my = 0.0;
        for s in 0..3 {
            for q in 0..4 {
                c += res.r1[s * 4 + q].powi(2) / 12.0;
                mx += res.r2[(s * 4 + q) * 2].powi(2) / 12.0;
                my += res.r2[(s * 4 + q) * 2 + 1].powi(2) / 12.0;
            }
        }
        assert!((m.continuity - c).abs() < 1e-12);
        assert!((m.momentum[0] - mx).abs() < 1e-12);
        assert!((m.momentum[1] - my).abs() < 1e-12);
        assert!((m.total - (c + mx + my) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn report_rendering() {
        let base = MseRReport {
            mse: Some(MseResult {
                per_channel: vec![0.1, 0.3432],
                total: 0.4432,
            }),
            channel_names: vec!["u_x".into(), "u_y".into()],
            r: RMetric {
                continuity: 1e-3,
                momentum: vec![2e-3, 3e-3],
                total: 2e-3,
            },
            n_q: 10,
            t: 5,
            dx: vec![0.01, 0.01],
            dt: 0.05,
        };
        let text = render_report(&base);
        assert!(text.contains("0.4432"), "{text}");
        assert!(text.contains("mse.u_y = 0.3432"));
        assert!(text.contains("r.momentum_y = 0.003"));
        assert!(text.contains("n_q = 10"));
        assert_eq!(text, render_report(&base), "rendering must be deterministic");

        let no_gt = MseRReport { mse: None, ..base };
        let text = render_report(&no_gt);
        assert!(text.contains("mse = n/a"));
        assert!(!text.contains("mse.total"));
        assert!(text.contains("r.total"));
    }

    #[test]
    fn gaussian_analytic_residual_is_fd_truncation_only() {
        // closed-form solution: residual should shrink ~4x when dx halves
        let case = gaussian_case([0.3, 0.1], 0.2);
        let mut rng = Rng::new(4);
        let x_q: Vec<f64> = (0..30).map(|_| rng.uniform_in(0.3, 0.7)).collect();
        let mut norms = Vec::new();
        for halvings in 0..3 {
            let dx = 0.02 / f64::powi(2.0, halvings);
            let fd = FdConfig::uniform(dx, 2);
            // isolate the spatial error with an effectively exact time step
            let fields = StencilFields::from_case(&case, &x_q, 2, 2, 1e-7, &fd);
            let res = residuals_euler(&fields, &state2d(), &fd).unwrap();
            norms.push(res.max_abs());
        }
        for w in norms.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                ratio > 3.5 && ratio < 4.5,
                "expected ~4x per halving, got {ratio} ({norms:?})"
            );
        }
    }

    #[test]
    fn vortex_isentropic_relation_on_stencil() {
        let case = vortex_case(0.5, 1.4);
        let fd = FdConfig::uniform(0.005, 2);
        let fields = StencilFields::from_case(&case, &[0.45, 0.45, 0.2, 0.8], 2, 3, 0.02, &fd);
        for block in &fields.blocks {
            for row in block.chunks(4) {
                assert!((row[2] - row[3].powf(1.4)).abs() < 1e-14);
            }
        }
    }
}
