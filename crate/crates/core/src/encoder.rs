//! Point-cloud encoder: per-input embeddings, feature fusion, KNN local
//! feature embedding, and Galerkin self-attention producing per-point global
//! features.

use crate::error::{Error, Result};
use crate::params::{GalerkinAttention, Mlp};
use crate::rng::Rng;
use crate::tensor::{NodeId, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct EncoderParams<T> {
    pub mlp_xy: Mlp<T>,
    pub mlp_id: Mlp<T>,
    pub mlp_phi: Mlp<T>,
    pub mlp_fusion: Mlp<T>,
    pub edge_mlp: Mlp<T>,
    pub attn: Vec<GalerkinAttention<T>>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            mlp_xy: self.mlp_xy.map(f),
            mlp_id: self.mlp_id.map(f),
            mlp_phi: self.mlp_phi.map(f),
            mlp_fusion: self.mlp_fusion.map(f),
            edge_mlp: self.edge_mlp.map(f),
            attn: self.attn.iter().map(|a| a.map(f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T)) {
        self.mlp_xy.visit(&format!("{prefix}.mlp_xy"), f);
        self.mlp_id.visit(&format!("{prefix}.mlp_id"), f);
        self.mlp_phi.visit(&format!("{prefix}.mlp_phi"), f);
        self.mlp_fusion.visit(&format!("{prefix}.mlp_fusion"), f);
        self.edge_mlp.visit(&format!("{prefix}.edge_mlp"), f);
        for (i, a) in self.attn.iter().enumerate() {
            a.visit(&format!("{prefix}.attn{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(String, &'a mut T)) {
        self.mlp_xy.visit_mut(&format!("{prefix}.mlp_xy"), f);
        self.mlp_id.visit_mut(&format!("{prefix}.mlp_id"), f);
        self.mlp_phi.visit_mut(&format!("{prefix}.mlp_phi"), f);
        self.mlp_fusion.visit_mut(&format!("{prefix}.mlp_fusion"), f);
        self.edge_mlp.visit_mut(&format!("{prefix}.edge_mlp"), f);
        for (i, a) in self.attn.iter_mut().enumerate() {
            a.visit_mut(&format!("{prefix}.attn{i}"), f);
        }
    }
}

impl EncoderParams<Tensor> {
    pub fn init(
        rng: &mut Rng,
        d: usize,
        n_phi: usize,
        n_c: usize,
        n_g: usize,
        heads: usize,
        attn_layers: usize,
    ) -> Self {
        EncoderParams {
            mlp_xy: Mlp::init(rng, &[d, n_c, n_c]),
            mlp_id: Mlp::init(rng, &[1, n_c, n_c]),
            mlp_phi: Mlp::init(rng, &[n_phi, n_c, n_c]),
            mlp_fusion: Mlp::init(rng, &[3 * n_c, n_g, n_g]),
            edge_mlp: Mlp::init(rng, &[2 * n_g, n_g, n_g]),
            attn: (0..attn_layers)
                .map(|_| GalerkinAttention::init(rng, n_g, heads))
                .collect(),
        }
    }
}

/// Exact k-nearest-neighbor indices (self excluded) by brute force, which is
/// the right tool at desk scale. Distance ties break to the lower index.
/// Returns a flat `[n x k]` index table.
pub fn knn_grouping(points: &[f64], n: usize, d: usize, k: usize) -> Result<Vec<usize>> {
    if k < 1 || k >= n {
        return Err(Error::Validation(format!(
            "knn requires 1 <= k < n, got k={k}, n={n}"
        )));
    }
    debug_assert_eq!(points.len(), n * d);
    let mut idx = Vec::with_capacity(n * k);
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n - 1);
    for i in 0..n {
        dist.clear();
        let pi = &points[i * d..(i + 1) * d];
        for j in 0..n {
            if j == i {
                continue;
            }
            let pj = &points[j * d..(j + 1) * d];
            let d2: f64 = pi
                .iter()
                .zip(pj)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dist.push((d2, j));
        }
        dist.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        idx.extend(dist[..k].iter().map(|&(_, j)| j));
    }
    Ok(idx)
}

/// The three per-input embeddings. The identifier is embedded from its value
/// cast to float.
pub fn embed_inputs(
    tape: &mut Tape,
    params: &EncoderParams<NodeId>,
    x_bd: NodeId,
    id: NodeId,
    phi0: NodeId,
) -> Result<(NodeId, NodeId, NodeId)> {
    let y1 = params.mlp_xy.forward(tape, x_bd)?;
    let y2 = params.mlp_id.forward(tape, id)?;
    let y3 = params.mlp_phi.forward(tape, phi0)?;
    Ok((y1, y2, y3))
}

/// Row-wise fusion of the three embeddings: `MLP(concat(y1, y2, y3))`.
pub fn fuse(
    tape: &mut Tape,
    params: &EncoderParams<NodeId>,
    y1: NodeId,
    y2: NodeId,
    y3: NodeId,
) -> Result<NodeId> {
    let cat = tape.concat_cols(&[y1, y2, y3])?;
    params.mlp_fusion.forward(tape, cat)
}

/// Edge-conv style local embedding: per edge (point, neighbor), the feature
/// is `concat(f(nbr) - f(point), f(point))`, run through the edge MLP, then
/// max-pooled over each point's k edges.
pub fn local_feature_embedding(
    tape: &mut Tape,
    params: &EncoderParams<NodeId>,
    y_fusion: NodeId,
    idx: &[usize],
    k: usize,
) -> Result<NodeId> {
    let n = tape.shape(y_fusion)[0];
    let width = tape.shape(y_fusion)[1];
    debug_assert_eq!(idx.len(), n * k);
    let center_idx: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let nbr = tape.gather_rows(y_fusion, idx)?;
    let ctr = tape.gather_rows(y_fusion, &center_idx)?;
    let delta = tape.sub(nbr, ctr)?;
    let edge_in = tape.concat_cols(&[delta, ctr])?;
    let edge_out = params.edge_mlp.forward(tape, edge_in)?;
    let grouped = tape.reshape(edge_out, vec![n, k, width])?;
    tape.reduce_max(grouped, 1)
}

/// One self-attention layer with residual connection.
pub fn galerkin_self_attention(
    tape: &mut Tape,
    layer: &GalerkinAttention<NodeId>,
    y: NodeId,
) -> Result<NodeId> {
    let attended = layer.forward(tape, y, y)?;
    tape.add(y, attended)
}

/// Full encoder: embeddings -> fusion -> local embedding -> attention stack.
/// Output is `[n_bd x n_g]` global point features.
pub fn encode(
    tape: &mut Tape,
    params: &EncoderParams<NodeId>,
    k: usize,
    x_bd: &Tensor,
    id: &[u8],
    phi0: &Tensor,
) -> Result<NodeId> {
    let n = x_bd.shape()[0];
    let d = x_bd.shape()[1];
    let idx = knn_grouping(x_bd.data(), n, d, k)?;
    let x_id = tape.leaf(x_bd);
    let id_f: Vec<f64> = id.iter().map(|&v| v as f64).collect();
    let id_node = tape.constant(vec![n, 1], id_f)?;
    let phi_node = tape.leaf(phi0);

    let (y1, y2, y3) = embed_inputs(tape, params, x_id, id_node, phi_node)?;
    let y_fusion = fuse(tape, params, y1, y2, y3)?;
    let mut y = local_feature_embedding(tape, params, y_fusion, &idx, k)?;
    for layer in &params.attn {
        y = galerkin_self_attention(tape, layer, y)?;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::FlatCursor;
    use crate::tensor::grad_check;

    fn tiny_params(rng: &mut Rng) -> EncoderParams<Tensor> {
        EncoderParams::init(rng, 2, 4, 4, 8, 2, 1)
    }

    fn random_inputs(rng: &mut Rng, n: usize) -> (Tensor, Vec<u8>, Tensor) {
        let x = Tensor::from_vec(vec![n, 2], (0..2 * n).map(|_| rng.uniform()).collect()).unwrap();
        let id: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let phi =
            Tensor::from_vec(vec![n, 4], (0..4 * n).map(|_| rng.normal() * 0.5).collect()).unwrap();
        (x, id, phi)
    }

    #[test]
    fn knn_line_of_three() {
        let pts = [0.0, 0.0, 1.0, 0.0, 3.0, 0.0];
        let idx = knn_grouping(&pts, 3, 2, 1).unwrap();
        assert_eq!(idx, vec![1, 0, 1]);
    }

    #[test]
    fn knn_k2_orders_by_distance() {
        let pts = [0.0, 0.0, 1.0, 0.0, 3.0, 0.0];
        let idx = knn_grouping(&pts, 3, 2, 2).unwrap();
        assert_eq!(idx, vec![1, 2, 0, 2, 1, 0]);
    }

    #[test]
    fn knn_rejects_bad_k() {
        let pts = [0.0, 0.0, 1.0, 0.0];
        assert!(knn_grouping(&pts, 2, 2, 2).is_err());
        assert!(knn_grouping(&pts, 2, 2, 0).is_err());
    }

    #[test]
    fn knn_matches_selection_oracle() {
        // oracle: repeated linear minimum selection, no sorting
        let mut rng = Rng::new(17);
        let n = 100;
        let k = 5;
        let pts: Vec<f64> = (0..2 * n).map(|_| rng.uniform()).collect();
        let idx = knn_grouping(&pts, n, 2, k).unwrap();
        for i in 0..n {
            let mut remaining: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            let mut picked = Vec::new();
            for _ in 0..k {
                let (pos, &best) = remaining
                    .iter()
                    .enumerate()
                    .min_by(|(_, &a), (_, &b)| {
                        let da: f64 = (0..2)
                            .map(|c| (pts[i * 2 + c] - pts[a * 2 + c]).powi(2))
                            .sum();
                        let db: f64 = (0..2)
                            .map(|c| (pts[i * 2 + c] - pts[b * 2 + c]).powi(2))
                            .sum();
                        da.partial_cmp(&db).unwrap().then(a.cmp(&b))
                    })
                    .unwrap();
                picked.push(best);
                remaining.remove(pos);
            }
            let mut got: Vec<usize> = idx[i * k..(i + 1) * k].to_vec();
            got.sort_unstable();
            picked.sort_unstable();
            assert_eq!(got, picked, "neighbor set differs at point {i}");
        }
    }

    #[test]
    fn zeroed_embedding_mlps_give_zero() {
        let mut rng = Rng::new(1);
        let mut params = tiny_params(&mut rng);
        for mlp in [&mut params.mlp_xy, &mut params.mlp_id, &mut params.mlp_phi] {
            for layer in &mut mlp.layers {
                layer.w = Tensor::zeros(layer.w.shape().to_vec()).with_grad();
                layer.b = Tensor::zeros(layer.b.shape().to_vec()).with_grad();
            }
        }
        let (x, id, phi) = random_inputs(&mut rng, 6);
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let xn = tape.leaf(&x);
        let idn = tape
            .constant(vec![6, 1], id.iter().map(|&v| v as f64).collect())
            .unwrap();
        let pn = tape.leaf(&phi);
        let (y1, y2, y3) = embed_inputs(&mut tape, &bound, xn, idn, pn).unwrap();
        for y in [y1, y2, y3] {
            assert!(tape.data(y).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn embeddings_are_per_point() {
        let mut rng = Rng::new(2);
        let params = tiny_params(&mut rng);
        let (x, id, phi) = random_inputs(&mut rng, 5);
        let perm = [3usize, 0, 4, 1, 2];

        let run = |x: &Tensor, id: &[u8], phi: &Tensor| -> Vec<Vec<f64>> {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let xn = tape.leaf(x);
            let idn = tape
                .constant(vec![5, 1], id.iter().map(|&v| v as f64).collect())
                .unwrap();
            let pn = tape.leaf(phi);
            let (y1, y2, y3) = embed_inputs(&mut tape, &bound, xn, idn, pn).unwrap();
            vec![
                tape.data(y1).to_vec(),
                tape.data(y2).to_vec(),
                tape.data(y3).to_vec(),
            ]
        };

        let base = run(&x, &id, &phi);
        let permute_rows = |t: &Tensor, w: usize| {
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * w..(p + 1) * w]);
            }
            Tensor::from_vec(vec![5, w], data).unwrap()
        };
        let xp = permute_rows(&x, 2);
        let idp: Vec<u8> = perm.iter().map(|&p| id[p]).collect();
        let php = permute_rows(&phi, 4);
        let permuted = run(&xp, &idp, &php);
        for (a, b) in base.iter().zip(&permuted) {
            for (r, &p) in perm.iter().enumerate() {
                assert_eq!(&b[r * 4..(r + 1) * 4], &a[p * 4..(p + 1) * 4]);
            }
        }
    }

    #[test]
    fn fusion_output_width_and_identical_rows() {
        let mut rng = Rng::new(3);
        let params = tiny_params(&mut rng);
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        // two identical rows in each embedding
        let row: Vec<f64> = (0..4).map(|i| i as f64 * 0.1).collect();
        let mk = |tape: &mut Tape| {
            let mut d = row.clone();
            d.extend_from_slice(&row);
            tape.constant(vec![2, 4], d).unwrap()
        };
        let y1 = mk(&mut tape);
        let y2 = mk(&mut tape);
        let y3 = mk(&mut tape);
        let fused = fuse(&mut tape, &bound, y1, y2, y3).unwrap();
        assert_eq!(tape.shape(fused), &[2, 8]);
        let data = tape.data(fused);
        assert_eq!(&data[..8], &data[8..]);
    }

    #[test]
    fn fuse_rejects_row_mismatch() {
        let mut rng = Rng::new(3);
        let params = tiny_params(&mut rng);
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let y1 = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        let y2 = tape.constant(vec![3, 4], vec![0.0; 12]).unwrap();
        let y3 = tape.constant(vec![2, 4], vec![0.0; 8]).unwrap();
        assert!(fuse(&mut tape, &bound, y1, y2, y3).is_err());
    }

    #[test]
    fn local_embedding_constant_features_use_repeat_branch_only() {
        let mut rng = Rng::new(4);
        let params = tiny_params(&mut rng);
        let n = 5;
        let k = 2;
        let feat: Vec<f64> = (0..8).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut data = Vec::new();
        for _ in 0..n {
            data.extend_from_slice(&feat);
        }
        let idx = knn_grouping(
            &(0..2 * n).map(|i| i as f64).collect::<Vec<_>>(),
            n,
            2,
            k,
        )
        .unwrap();

        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let yf = tape.constant(vec![n, 8], data).unwrap();
        let yl = local_feature_embedding(&mut tape, &bound, yf, &idx, k).unwrap();

        // reference: single edge with zero delta
        let mut refin = vec![0.0; 8];
        refin.extend_from_slice(&feat);
        let refin = tape.constant(vec![1, 16], refin).unwrap();
        let refout = bound.edge_mlp.forward(&mut tape, refin).unwrap();
        for row in tape.data(yl).chunks(8) {
            assert_eq!(row, tape.data(refout));
        }
    }

    #[test]
    fn local_embedding_neighbor_order_invariance() {
        let mut rng = Rng::new(5);
        let params = tiny_params(&mut rng);
        let n = 8;
        let k = 3;
        let feats: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
        let pts: Vec<f64> = (0..2 * n).map(|_| rng.uniform()).collect();
        let idx = knn_grouping(&pts, n, 2, k).unwrap();

        let run = |idx: &[usize]| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let yf = tape.constant(vec![n, 8], feats.clone()).unwrap();
            let yl = local_feature_embedding(&mut tape, &bound, yf, idx, k).unwrap();
            tape.data(yl).to_vec()
        };
        let base = run(&idx);
        for trial in 0..5 {
            let mut shuffled = idx.clone();
            let mut r = Rng::new(100 + trial);
            for row in shuffled.chunks_mut(k) {
                r.shuffle(row);
            }
            assert_eq!(run(&shuffled), base);
        }
    }

    #[test]
    fn attention_with_zero_values_is_pure_residual() {
        let mut rng = Rng::new(6);
        let mut params = tiny_params(&mut rng);
        for head in &mut params.attn[0].heads {
            head.wv = Tensor::zeros(head.wv.shape().to_vec()).with_grad();
        }
        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let y = tape
            .constant(vec![4, 8], (0..32).map(|i| (i as f64).sin()).collect())
            .unwrap();
        let out = galerkin_self_attention(&mut tape, &bound.attn[0], y).unwrap();
        assert_eq!(tape.data(out), tape.data(y));
    }

    #[test]
    fn attention_matches_dense_oracle() {
        let mut rng = Rng::new(7);
        let params = tiny_params(&mut rng);
        let n = 4;
        let width = 8;
        let y: Vec<f64> = (0..n * width).map(|_| rng.normal()).collect();

        let mut tape = Tape::new();
        let bound = params.map(&mut |t| tape.leaf(t));
        let yn = tape.constant(vec![n, width], y.clone()).unwrap();
        let got = bound.attn[0].forward(&mut tape, yn, yn).unwrap();

        // dense oracle with explicit loops
        let layer = &params.attn[0];
        let dh = width / layer.heads.len();
        let mm = |a: &[f64], b: &[f64], m: usize, k: usize, nn: usize| {
            let mut out = vec![0.0; m * nn];
            for i in 0..m {
                for j in 0..nn {
                    for l in 0..k {
                        out[i * nn + j] += a[i * k + l] * b[l * nn + j];
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
        let mut expect = vec![0.0; n * width];
        for head in &layer.heads {
            let q = mm(&y, head.wq.data(), n, width, dh);
            let mut k = mm(&y, head.wk.data(), n, width, dh);
            let mut v = mm(&y, head.wv.data(), n, width, dh);
            norm(&mut k, n, dh);
            norm(&mut v, n, dh);
            let mut ktv = vec![0.0; dh * dh];
            for i in 0..n {
                for a in 0..dh {
                    for b in 0..dh {
                        ktv[a * dh + b] += k[i * dh + a] * v[i * dh + b];
                    }
                }
            }
            let qktv = mm(&q, &ktv, n, dh, dh);
            let scaled: Vec<f64> = qktv.iter().map(|x| x / n as f64).collect();
            let o = mm(&scaled, head.wo.data(), n, dh, width);
            for (e, val) in expect.iter_mut().zip(o) {
                *e += val;
            }
        }
        for (g, e) in tape.data(got).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12, "attention {g} vs oracle {e}");
        }
    }

    #[test]
    fn attention_row_magnitude_stays_bounded_as_n_doubles() {
        for seed in 0..3 {
            let mut rng = Rng::new(40 + seed);
            let params = tiny_params(&mut rng);
            let mut mags = Vec::new();
            for n in [64usize, 128, 256] {
                let mut tape = Tape::new();
                let bound = params.map(&mut |t| tape.leaf(t));
                let y: Vec<f64> = (0..n * 8).map(|_| rng.normal()).collect();
                let yn = tape.constant(vec![n, 8], y).unwrap();
                let out = bound.attn[0].forward(&mut tape, yn, yn).unwrap();
                let rms = (tape.data(out).iter().map(|v| v * v).sum::<f64>()
                    / (n * 8) as f64)
                    .sqrt();
                mags.push(rms);
            }
            for w in mags.windows(2) {
                assert!(
                    w[1] / w[0] < 2.0 && w[0] / w[1] < 2.0,
                    "per-row magnitude drifted: {mags:?}"
                );
            }
        }
    }

    #[test]
    fn encode_shape_and_permutation_equivariance() {
        let mut rng = Rng::new(8);
        let params = tiny_params(&mut rng);
        let n = 10;
        let (x, id, phi) = random_inputs(&mut rng, n);

        let run = |x: &Tensor, id: &[u8], phi: &Tensor| {
            let mut tape = Tape::new();
            let bound = params.map(&mut |t| tape.leaf(t));
            let g0 = encode(&mut tape, &bound, 3, x, id, phi).unwrap();
            assert_eq!(tape.shape(g0), &[n, 8]);
            tape.data(g0).to_vec()
        };
        let base = run(&x, &id, &phi);

        let mut perm: Vec<usize> = (0..n).collect();
        let mut prng = Rng::new(99);
        prng.shuffle(&mut perm);
        let permute = |t: &Tensor, w: usize| {
            let mut data = Vec::new();
            for &p in &perm {
                data.extend_from_slice(&t.data()[p * w..(p + 1) * w]);
            }
            Tensor::from_vec(vec![n, w], data).unwrap()
        };
        let xp = permute(&x, 2);
        let idp: Vec<u8> = perm.iter().map(|&p| id[p]).collect();
        let php = permute(&phi, 4);
        let out = run(&xp, &idp, &php);
        for (r, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                let diff = (out[r * 8 + c] - base[p * 8 + c]).abs();
                assert!(diff < 1e-10, "equivariance violated by {diff}");
            }
        }
    }

    #[test]
    fn encode_gradients_match_fd() {
        let mut rng = Rng::new(9);
        let params = tiny_params(&mut rng);
        let (x, id, phi) = random_inputs(&mut rng, 6);

        let mut flat = Vec::new();
        params.visit("enc", &mut |_, t| flat.extend_from_slice(t.data()));
        let flat = Tensor::from_vec(vec![flat.len()], flat).unwrap();

        let err = grad_check(
            &mut |tape, pid| {
                let bound = {
                    let mut cursor = FlatCursor::new(tape, pid);
                    params.map(&mut |t| cursor.next_like(t))
                };
                let g0 = encode(tape, &bound, 2, &x, &id, &phi)?;
                Ok(tape.sum_all(g0))
            },
            &flat,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "encoder grad err {err}");
    }
}
