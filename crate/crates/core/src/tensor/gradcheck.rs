//! Central finite-difference gradient verification.

use super::{NodeId, Tape, Tensor};
use crate::error::Result;

/// Compare the tape gradient of a scalar-valued function against central
/// finite differences at `x`. Returns the max over coordinates of
/// `|analytic - fd| / max(|analytic|, |fd|, 1e-12)`.
///
/// Sample `x` away from activation kinks (relu at 0) — the subgradient
/// convention there is deliberate and not checkable by FD.
pub fn grad_check<F>(f: &mut F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut probe = x.clone();
    probe.set_requires_grad(true);

    let mut tape = Tape::new();
    let xid = tape.leaf(&probe);
    let loss = f(&mut tape, xid)?;
    tape.backward(loss)?;
    let analytic: Vec<f64> = tape
        .grad(xid)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    probe.set_requires_grad(false);
    let mut max_rel: f64 = 0.0;
    for i in 0..probe.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let fp = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig - eps;
        let fm = eval_scalar(f, &probe)?;
        probe.data_mut()[i] = orig;
        let fd = (fp - fm) / (2.0 * eps);
        let denom = analytic[i].abs().max(fd.abs()).max(1e-12);
        max_rel = max_rel.max((analytic[i] - fd).abs() / denom);
    }
    Ok(max_rel)
}

fn eval_scalar<F>(f: &mut F, x: &Tensor) -> Result<f64>
where
    F: FnMut(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let xid = tape.leaf(x);
    let out = f(&mut tape, xid)?;
    Ok(tape.scalar_value(out))
}
