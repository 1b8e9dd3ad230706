//! Decoder: query-coordinate encoding, recursive fusion of point features
//! with the latent trajectory, Galerkin cross-attention from queries, and the
//! shared output head.
//!
//! One cross-attention block and one FFN are reused at every time step; the
//! per-step features are `h_i = fuse(h_{i-1}, z_i)` with `h_0 = g0`.

use crate::error::Result;
use crate::mamba::LatentTrajectory;
use crate::params::{GalerkinAttention, Mlp};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct DecoderParams<T> {
    pub mlp_query: Mlp<T>,
    pub mlp_fuse: Mlp<T>,
    pub cross_attn: GalerkinAttention<T>,
    pub ffn: Mlp<T>,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            mlp_query: self.mlp_query.map(f),
            mlp_fuse: self.mlp_fuse.map(f),
            cross_attn: self.cross_attn.map(f),
            ffn: self.ffn.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.mlp_query.visit(&format!("{prefix}.mlp_query"), f);
        self.mlp_fuse.visit(&format!("{prefix}.mlp_fuse"), f);
        self.cross_attn.visit(&format!("{prefix}.cross_attn"), f);
        self.ffn.visit(&format!("{prefix}.ffn"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.mlp_query.visit_mut(&format!("{prefix}.mlp_query"), f);
        self.mlp_fuse.visit_mut(&format!("{prefix}.mlp_fuse"), f);
        self.cross_attn.visit_mut(&format!("{prefix}.cross_attn"), f);
        self.ffn.visit_mut(&format!("{prefix}.ffn"), f);
    }
}

impl DecoderParams<Tensor> {
    pub fn init(rng: &mut Rng, d: usize, n_phi: usize, n_g: usize, heads: usize) -> Self {
        DecoderParams {
            mlp_query: Mlp::init(rng, &[d, n_g, n_g]),
            mlp_fuse: Mlp::init(rng, &[2 * n_g, n_g, n_g]),
            cross_attn: GalerkinAttention::init(rng, n_g, heads),
            ffn: Mlp::init(rng, &[n_g, n_g, n_phi]),
        }
    }
}

/// Per-point MLP mapping query coordinates into the latent width.
pub fn encode_queries(
    tape: &mut Tape,
    params: &DecoderParams<NodeId>,
    x_q: NodeId,
) -> Result<NodeId> {
    params.mlp_query.forward(tape, x_q)
}

/// `h_i = mlp_fuse(concat(h_prev, z_i))` with `z_i` broadcast over points.
pub fn fuse_step(
    tape: &mut Tape,
    params: &DecoderParams<NodeId>,
    h_prev: NodeId,
    z_i: NodeId,
) -> Result<NodeId> {
    let n = tape.shape(h_prev)[0];
    let z_rows = tape.repeat_rows(z_i, n)?;
    let cat = tape.concat_cols(&[h_prev, z_rows])?;
    params.mlp_fuse.forward(tape, cat)
}

/// Cross-attention of encoded queries over per-step point features, with a
/// residual connection on the query side. Each query row depends on its own
/// encoding and all of `h_i`, never on other queries.
pub fn galerkin_cross_attention(
    tape: &mut Tape,
    params: &DecoderParams<NodeId>,
    h_q: NodeId,
    h_i: NodeId,
) -> Result<NodeId> {
    let attended = params.cross_attn.forward(tape, h_q, h_i)?;
    tape.add(h_q, attended)
}

/// Attended query features for every step: `[n_q x n_g]` per step, before
/// any output head.
pub fn decode_features(
    tape: &mut Tape,
    params: &DecoderParams<NodeId>,
    traj: &LatentTrajectory,
    g0: NodeId,
    h_q: NodeId,
) -> Result<Vec<NodeId>> {
    let mut h = g0;
    let mut feats = Vec::with_capacity(traj.z.len());
    for &z_i in &traj.z {
        h = fuse_step(tape, params, h, z_i)?;
        feats.push(galerkin_cross_attention(tape, params, h_q, h)?);
    }
    Ok(feats)
}

/// Decoded fields, one `[n_q x n_phi]` node per step, sharing the attention
/// block and FFN across steps.
pub fn decode_fields(
    tape: &mut Tape,
    params: &DecoderParams<NodeId>,
    traj: &LatentTrajectory,
    g0: NodeId,
    h_q: NodeId,
) -> Result<Vec<NodeId>> {
    let feats = decode_features(tape, params, traj, g0, h_q)?;
    feats
        .into_iter()
        .map(|f| params.ffn.forward(tape, f))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{flatten_tensors, FlatCursor};
    use crate::tensor::grad_check;

    const NG: usize = 8;
    const NPHI: usize = 3;

    fn tiny(rng: &mut Rng) -> DecoderParams<Tensor> {
        DecoderParams::init(rng, 2, NPHI, NG, 2)
    }

    fn fake_traj(tape: &mut Tape, rng: &mut Rng, t: usize) -> LatentTrajectory {
        let z0 = tape
            .constant(vec![1, NG], (0..NG).map(|_| rng.normal()).collect())
            .unwrap();
        let z = (0..t)
            .map(|_| {
                tape.constant(vec![1, NG], (0..NG).map(|_| rng.normal()).collect())
                    .unwrap()
            })
            .collect();
        LatentTrajectory { z0, z }
    }

    #[test]
    fn queries_are_per_point_and_single_query_works() {
        let mut rng = Rng::new(1);
        let params = tiny(&mut rng);
        let q: Vec<f64> = (0..8).map(|_| rng.uniform()).collect();

        let run = |pts: &[f64]| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let xq = tape
                .constant(vec![pts.len() / 2, 2], pts.to_vec())
                .unwrap();
            let h = encode_queries(&mut tape, &bound, xq).unwrap();
            tape.data(h).to_vec()
        };
        let base = run(&q);
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&p| q[2 * p..2 * p + 2].to_vec())
            .collect();
        let out = run(&permuted);
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(&out[r * NG..(r + 1) * NG], &base[p * NG..(p + 1) * NG]);
        }
        let single = run(&q[..2]);
        assert_eq!(single.len(), NG);
        assert_eq!(&single[..], &base[..NG]);
    }

    #[test]
    fn fuse_step_is_pointwise_and_equivariant() {
        let mut rng = Rng::new(2);
        let params = tiny(&mut rng);
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));

        let row: Vec<f64> = (0..NG).map(|i| (i as f64).sin()).collect();
        let mut two = row.clone();
        two.extend_from_slice(&row);
        let h_prev = tape.constant(vec![2, NG], two).unwrap();
        let z = tape
            .constant(vec![1, NG], (0..NG).map(|_| rng.normal()).collect())
            .unwrap();
        let h = fuse_step(&mut tape, &bound, h_prev, z).unwrap();
        let data = tape.data(h);
        assert_eq!(&data[..NG], &data[NG..]);

        // permutation equivariance over points
        let rows: Vec<f64> = (0..3 * NG).map(|_| rng.normal()).collect();
        let h3 = tape.constant(vec![3, NG], rows.clone()).unwrap();
        let out = fuse_step(&mut tape, &bound, h3, z).unwrap();
        let base = tape.data(out).to_vec();
        let perm = [1usize, 2, 0];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&p| rows[p * NG..(p + 1) * NG].to_vec())
            .collect();
        let h3p = tape.constant(vec![3, NG], permuted).unwrap();
        let outp = fuse_step(&mut tape, &bound, h3p, z).unwrap();
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(
                &tape.data(outp)[r * NG..(r + 1) * NG],
                &base[p * NG..(p + 1) * NG]
            );
        }
    }

    #[test]
    fn fuse_step_zero_weights_give_zero() {
        let mut rng = Rng::new(3);
        let mut params = tiny(&mut rng);
        for layer in &mut params.mlp_fuse.layers {
            layer.w = Tensor::zeros(layer.w.shape().to_vec()).with_grad();
            layer.b = Tensor::zeros(layer.b.shape().to_vec()).with_grad();
        }
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let h_prev = tape
            .constant(vec![4, NG], (0..4 * NG).map(|_| rng.normal()).collect())
            .unwrap();
        let z = tape
            .constant(vec![1, NG], (0..NG).map(|_| rng.normal()).collect())
            .unwrap();
        let h = fuse_step(&mut tape, &bound, h_prev, z).unwrap();
        assert!(tape.data(h).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_attention_per_query_independence() {
        let mut rng = Rng::new(4);
        let params = tiny(&mut rng);
        let n_q = 6;
        let hq_data: Vec<f64> = (0..n_q * NG).map(|_| rng.normal()).collect();
        let hi_data: Vec<f64> = (0..5 * NG).map(|_| rng.normal()).collect();

        let run = |hq: &[f64]| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let hq = tape.constant(vec![hq.len() / NG, NG], hq.to_vec()).unwrap();
            let hi = tape.constant(vec![5, NG], hi_data.clone()).unwrap();
            let out = galerkin_cross_attention(&mut tape, &bound, hq, hi).unwrap();
            tape.data(out).to_vec()
        };
        let full = run(&hq_data);
        let mut srng = Rng::new(77);
        for _ in 0..5 {
            let m = 1 + srng.below(n_q);
            let subset = srng.sample_indices(n_q, m);
            let sub_hq: Vec<f64> = subset
                .iter()
                .flat_map(|&q| hq_data[q * NG..(q + 1) * NG].to_vec())
                .collect();
            let sub_out = run(&sub_hq);
            for (r, &q) in subset.iter().enumerate() {
                assert_eq!(
                    &sub_out[r * NG..(r + 1) * NG],
                    &full[q * NG..(q + 1) * NG],
                    "query {q} depends on other queries"
                );
            }
        }
    }

    #[test]
    fn cross_attention_matches_dense_oracle() {
        let mut rng = Rng::new(5);
        let params = tiny(&mut rng);
        let n_bd = 5;
        let n_q = 3;
        let hq: Vec<f64> = (0..n_q * NG).map(|_| rng.normal()).collect();
        let hi: Vec<f64> = (0..n_bd * NG).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let hqn = tape.constant(vec![n_q, NG], hq.clone()).unwrap();
        let hin = tape.constant(vec![n_bd, NG], hi.clone()).unwrap();
        let got = galerkin_cross_attention(&mut tape, &bound, hqn, hin).unwrap();

        let dh = NG / params.cross_attn.heads.len();
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    for l in 0..k {
                        out[i * n + j] += a[i * k + l] * b[l * n + j];
                    }
                }
            }
            out
        };
        let norm = |x: &mut [f64], rows: usize, cols: usize| {
            for j in 0..cols {
                let mean: f64 = (0..rows).map(|i| x[i * cols + j]).sum::<f64>() / rows as f64;
                let var: f64 = (0..rows)
                    .map(|i| (x[i * cols + j] - mean).powi(2))
                    .sum::<f64>()
                    / rows as f64;
                let inv = 1.0 / (var + crate::params::ATTN_EPS).sqrt();
                for i in 0..rows {
                    x[i * cols + j] = (x[i * cols + j] - mean) * inv;
                }
            }
        };
        let mut expect = hq.clone();
        for head in &params.cross_attn.heads {
            let q = mm(&hq, head.wq.data(), n_q, NG, dh);
            let mut k = mm(&hi, head.wk.data(), n_bd, NG, dh);
            let mut v = mm(&hi, head.wv.data(), n_bd, NG, dh);
            norm(&mut k, n_bd, dh);
            norm(&mut v, n_bd, dh);
            let mut ktv = vec![0.0; dh * dh];
            for i in 0..n_bd {
                for a in 0..dh {
                    for b in 0..dh {
                        ktv[a * dh + b] += k[i * dh + a] * v[i * dh + b];
                    }
                }
            }
            let qktv = mm(&q, &ktv, n_q, dh, dh);
            let scaled: Vec<f64> = qktv.iter().map(|x| x / n_bd as f64).collect();
            let o = mm(&scaled, head.wo.data(), n_q, dh, NG);
            for (e, val) in expect.iter_mut().zip(o) {
                *e += val;
            }
        }
        for (g, e) in tape.data(got).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "cross attention {g} vs oracle {e}");
        }
    }

    #[test]
    fn decode_shapes_and_query_permutation() {
        let mut rng = Rng::new(6);
        let params = tiny(&mut rng);

        // T=1, N_Q=1
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let traj = fake_traj(&mut tape, &mut rng, 1);
        let g0 = tape
            .constant(vec![4, NG], (0..4 * NG).map(|_| rng.normal()).collect())
            .unwrap();
        let xq = tape.constant(vec![1, 2], vec![0.3, 0.4]).unwrap();
        let hq = encode_queries(&mut tape, &bound, xq).unwrap();
        let out = decode_fields(&mut tape, &bound, &traj, g0, hq).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(tape.shape(out[0]), &[1, NPHI]);

        // permuting queries permutes outputs rows only
        let mut rng2 = Rng::new(7);
        let qdata: Vec<f64> = (0..10).map(|_| rng2.uniform()).collect();
        let run = |q: &[f64]| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let mut r = Rng::new(55);
            let traj = fake_traj(&mut tape, &mut r, 3);
            let g0 = tape
                .constant(vec![4, NG], (0..4 * NG).map(|_| r.normal()).collect())
                .unwrap();
            let xq = tape.constant(vec![5, 2], q.to_vec()).unwrap();
            let hq = encode_queries(&mut tape, &bound, xq).unwrap();
            let out = decode_fields(&mut tape, &bound, &traj, g0, hq).unwrap();
            out.iter().map(|&o| tape.data(o).to_vec()).collect::<Vec<_>>()
        };
        let base = run(&qdata);
        let perm = [4usize, 2, 0, 1, 3];
        let qperm: Vec<f64> = perm
            .iter()
            .flat_map(|&p| qdata[2 * p..2 * p + 2].to_vec())
            .collect();
        let permuted = run(&qperm);
        for t in 0..3 {
            for (r, &p) in perm.iter().enumerate() {
                assert_eq!(
                    &permuted[t][r * NPHI..(r + 1) * NPHI],
                    &base[t][p * NPHI..(p + 1) * NPHI]
                );
            }
        }
    }

    #[test]
    fn decode_prefix_truncation_equivalence() {
        // step i depends only on z_1..z_i: decoding a truncated trajectory
        // reproduces the prefix bitwise
        let mut rng = Rng::new(8);
        let params = tiny(&mut rng);
        let zdata: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..NG).map(|_| rng.normal()).collect())
            .collect();
        let g0_data: Vec<f64> = (0..4 * NG).map(|_| rng.normal()).collect();

        let run = |steps: usize| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let z0 = tape.constant(vec![1, NG], vec![0.0; NG]).unwrap();
            let z = zdata[..steps]
                .iter()
                .map(|d| tape.constant(vec![1, NG], d.clone()).unwrap())
                .collect();
            let traj = LatentTrajectory { z0, z };
            let g0 = tape.constant(vec![4, NG], g0_data.clone()).unwrap();
            let xq = tape
                .constant(vec![2, 2], vec![0.1, 0.9, 0.6, 0.2])
                .unwrap();
            let hq = encode_queries(&mut tape, &bound, xq).unwrap();
            let out = decode_fields(&mut tape, &bound, &traj, g0, hq).unwrap();
            out.iter().map(|&o| tape.data(o).to_vec()).collect::<Vec<_>>()
        };
        let full = run(4);
        let truncated = run(2);
        assert_eq!(&full[..2], &truncated[..]);
    }

    #[test]
    fn decode_gradients_match_fd() {
        let mut rng = Rng::new(9);
        let params = tiny(&mut rng);
        let g0_data: Vec<f64> = (0..10 * NG).map(|_| rng.normal() * 0.5).collect();
        let zdata: Vec<Vec<f64>> = (0..2)
            .map(|_| (0..NG).map(|_| rng.normal() * 0.5).collect())
            .collect();
        let qdata: Vec<f64> = (0..6).map(|_| rng.uniform()).collect();

        let mut all = Vec::new();
        params.visit("dec", &mut |_, t| all.push(t));
        let flat = flatten_tensors(all.iter().copied());
        let flat = Tensor::from_vec(vec![flat.len()], flat).unwrap();

        let err = grad_check(
            &mut |tape, pid| {
                let bound = {
                    let mut cursor = FlatCursor::new(tape, pid);
                    params.map(&mut |t| cursor.next_like(t))
                };
                let z0 = tape.constant(vec![1, NG], vec![0.0; NG])?;
                let z = zdata
                    .iter()
                    .map(|d| tape.constant(vec![1, NG], d.clone()))
                    .collect::<Result<Vec<_>>>()?;
                let traj = LatentTrajectory { z0, z };
                let g0 = tape.constant(vec![10, NG], g0_data.clone())?;
                let xq = tape.constant(vec![3, 2], qdata.clone())?;
                let hq = encode_queries(tape, &bound, xq)?;
                let out = decode_fields(tape, &bound, &traj, g0, hq)?;
                let mut total: Option<NodeId> = None;
                for o in out {
                    let sq = tape.mul(o, o)?;
                    let s = tape.sum_all(sq);
                    total = Some(match total {
                        Some(acc) => tape.add(acc, s)?,
                        None => s,
                    });
                }
                Ok(total.unwrap())
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "decoder grad err {err}");
    }
}
