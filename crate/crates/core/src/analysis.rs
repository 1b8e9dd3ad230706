//! Latent-space analysis: PCA over initial latent vectors, k-means over
//! their projections with silhouette-based cluster-count selection, and
//! segment-ablation probes of the latent vector.

use std::ops::Range;

use crate::dataio::FieldPack;
use crate::decoder;
use crate::error::{Error, Result};
use crate::mamba::{self, LatentTrajectory};
use crate::model::{ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

// -- PCA ------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct PcaResult {
    /// `[dim x dim]`, orthonormal rows sorted by explained variance.
    pub components: Vec<f64>,
    /// Explained-variance ratios, non-increasing, summing to 1.
    pub evr: Vec<f64>,
    pub mean: Vec<f64>,
    pub dim: usize,
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    (eig, v)
}

/// PCA of row vectors: eigendecomposition of the centered covariance with a
/// deterministic sign convention (the largest-magnitude coordinate of each
/// component is positive).
pub fn pca(vectors: &[f64], n: usize, dim: usize) -> Result<PcaResult> {
    if n < 2 {
        return Err(Error::Validation(format!(
            "pca needs at least 2 vectors, got {n}"
        )));
    }
    debug_assert_eq!(vectors.len(), n * dim);
    let mut mean = vec![0.0; dim];
    for row in vectors.chunks(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0; dim * dim];
    for row in vectors.chunks(dim) {
        for i in 0..dim {
            let di = row[i] - mean[i];
            for j in i..dim {
                cov[i * dim + j] += di * (row[j] - mean[j]);
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let val = cov[i * dim + j] / (n - 1) as f64;
            cov[i * dim + j] = val;
            cov[j * dim + i] = val;
        }
    }

    let (eig, vecs) = jacobi_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig[b].partial_cmp(&eig[a]).unwrap().then(a.cmp(&b)));

    let total: f64 = eig.iter().map(|&l| l.max(0.0)).sum();
    if total <= 0.0 {
        return Err(Error::Validation(
            "pca input has zero variance".into(),
        ));
    }
    let mut components = vec![0.0; dim * dim];
    let mut evr = Vec::with_capacity(dim);
    for (row, &src) in order.iter().enumerate() {
        let mut comp: Vec<f64> = (0..dim).map(|k| vecs[k * dim + src]).collect();
        let lead = comp
            .iter()
            .enumerate()
            .max_by(|(i, a), (j, b)| {
                a.abs()
                    .partial_cmp(&b.abs())
                    .unwrap()
                    .then(j.cmp(i))
            })
            .map(|(i, _)| i)
            .unwrap();
        if comp[lead] < 0.0 {
            for c in comp.iter_mut() {
                *c = -*c;
            }
        }
        components[row * dim..(row + 1) * dim].copy_from_slice(&comp);
        evr.push(eig[src].max(0.0) / total);
    }
    Ok(PcaResult {
        components,
        evr,
        mean,
        dim,
    })
}

/// Centered projection onto the top `m` components: `[n x m]` scores.
pub fn project(vectors: &[f64], result: &PcaResult, m: usize) -> Vec<f64> {
    assert!(m <= result.dim, "cannot project onto {m} of {} axes", result.dim);
    let dim = result.dim;
    let n = vectors.len() / dim;
    let mut scores = vec![0.0; n * m];
    for (r, row) in vectors.chunks(dim).enumerate() {
        for c in 0..m {
            let comp = &result.components[c * dim..(c + 1) * dim];
            scores[r * m + c] = row
                .iter()
                .zip(&result.mean)
                .zip(comp)
                .map(|((x, mu), w)| (x - mu) * w)
                .sum();
        }
    }
    scores
}

/// Inverse of [`project`]: reconstruct vectors from scores.
pub fn inverse_project(scores: &[f64], result: &PcaResult, m: usize) -> Vec<f64> {
    let dim = result.dim;
    let n = scores.len() / m;
    let mut out = vec![0.0; n * dim];
    for r in 0..n {
        let row = &mut out[r * dim..(r + 1) * dim];
        row.copy_from_slice(&result.mean);
        for c in 0..m {
            let s = scores[r * m + c];
            let comp = &result.components[c * dim..(c + 1) * dim];
            for (o, w) in row.iter_mut().zip(comp) {
                *o += s * w;
            }
        }
    }
    out
}

// -- k-means -----------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ClusterResult {
    pub k: usize,
    pub assignments: Vec<usize>,
    /// `[k x dim]`
    pub centroids: Vec<f64>,
    pub inertia: f64,
    /// Mean silhouette score; absent for k = 1 where it is undefined.
    pub silhouette: Option<f64>,
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn assign(points: &[f64], dim: usize, centroids: &[f64], k: usize, out: &mut [usize]) {
    for (i, p) in points.chunks(dim).enumerate() {
        let mut best = 0;
        let mut best_d = dist2(p, &centroids[..dim]);
        for c in 1..k {
            let d = dist2(p, &centroids[c * dim..(c + 1) * dim]);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out[i] = best;
    }
}

fn inertia_of(points: &[f64], dim: usize, centroids: &[f64], assignments: &[usize]) -> f64 {
    points
        .chunks(dim)
        .zip(assignments)
        .map(|(p, &c)| dist2(p, &centroids[c * dim..(c + 1) * dim]))
        .sum()
}

/// Lloyd iterations from given centroids; returns the per-iteration inertia
/// trace alongside the fixed point.
fn lloyd(
    points: &[f64],
    n: usize,
    dim: usize,
    mut centroids: Vec<f64>,
    k: usize,
) -> (Vec<usize>, Vec<f64>, f64, Vec<f64>) {
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    for _ in 0..300 {
        let prev = assignments.clone();
        assign(points, dim, &centroids, k, &mut assignments);
        trace.push(inertia_of(points, dim, &centroids, &assignments));

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.chunks(dim).zip(&assignments) {
            counts[c] += 1;
            for (s, &x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(p) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // move the point farthest from its centroid into the empty
                // cluster; deterministic and keeps every cluster non-empty
                let (far, _) = points
                    .chunks(dim)
                    .enumerate()
                    .map(|(i, p)| {
                        (
                            i,
                            dist2(p, &centroids[assignments[i] * dim..(assignments[i] + 1) * dim]),
                        )
                    })
                    .max_by(|(i, a), (j, b)| a.partial_cmp(b).unwrap().then(j.cmp(i)))
                    .unwrap();
                let old = assignments[far];
                counts[old] -= 1;
                for (s, x) in sums[old * dim..(old + 1) * dim]
                    .iter_mut()
                    .zip(points[far * dim..(far + 1) * dim].iter())
                {
                    *s -= x;
                }
                assignments[far] = c;
                counts[c] = 1;
                sums[c * dim..(c + 1) * dim]
                    .copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
            for (cc, s) in centroids[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *cc = s / counts[c] as f64;
            }
        }
        if assignments == prev && trace.len() > 1 {
            break;
        }
    }
    let inertia = inertia_of(points, dim, &centroids, &assignments);
    (assignments, centroids, inertia, trace)
}

fn kmeans_pp_seed(points: &[f64], n: usize, dim: usize, k: usize, rng: &mut Rng) -> Vec<f64> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.below(n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks(dim)
        .map(|p| dist2(p, &centroids[..dim]))
        .collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            rng.below(n)
        } else {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        let start = centroids.len();
        centroids.extend_from_slice(&points[chosen * dim..(chosen + 1) * dim]);
        let new_c = centroids[start..].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks(dim)) {
            *d = d.min(dist2(p, &new_c));
        }
    }
    centroids
}

/// Best of `restarts` k-means++ / Lloyd runs by inertia; ties break to the
/// lowest restart index. Deterministic given the seed.
pub fn kmeans(
    points: &[f64],
    n: usize,
    dim: usize,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<ClusterResult> {
    if k < 1 || k > n {
        return Err(Error::Validation(format!(
            "kmeans requires 1 <= k <= n, got k={k}, n={n}"
        )));
    }
    let mut best: Option<(Vec<usize>, Vec<f64>, f64)> = None;
    for r in 0..restarts.max(1) {
        let mut rng = Rng::new(seed).derive(r as u64);
        let init = kmeans_pp_seed(points, n, dim, k, &mut rng);
        let (assignments, centroids, inertia, _) = lloyd(points, n, dim, init, k);
        if best.as_ref().map(|(_, _, bi)| inertia < *bi).unwrap_or(true) {
            best = Some((assignments, centroids, inertia));
        }
    }
    let (assignments, centroids, inertia) = best.unwrap();
    let silhouette = if k >= 2 {
        Some(silhouette(points, n, dim, &assignments)?)
    } else {
        None
    };
    Ok(ClusterResult {
        k,
        assignments,
        centroids,
        inertia,
        silhouette,
    })
}

/// Mean silhouette score `(b - a) / max(a, b)`; singleton clusters score 0.
pub fn silhouette(points: &[f64], n: usize, dim: usize, assignments: &[usize]) -> Result<f64> {
    let k = assignments.iter().max().map(|m| m + 1).unwrap_or(0);
    if k < 2 {
        return Err(Error::Validation(
            "silhouette needs at least 2 clusters".into(),
        ));
    }
    let mut counts = vec![0usize; k];
    for &a in assignments {
        counts[a] += 1;
    }
    if counts.iter().any(|&c| c == 0) {
        return Err(Error::Validation("silhouette saw an empty cluster".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        let own = assignments[i];
        if counts[own] == 1 {
            continue; // scores 0, contributes nothing
        }
        let pi = &points[i * dim..(i + 1) * dim];
        let mut sums = vec![0.0; k];
        for (j, pj) in points.chunks(dim).enumerate() {
            if i == j {
                continue;
            }
            sums[assignments[j]] += dist2(pi, pj).sqrt();
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Pick the cluster count in `k_range` with the highest mean silhouette;
/// ties break to the smaller k. Returns (chosen result, per-k scores).
pub fn select_k(
    points: &[f64],
    n: usize,
    dim: usize,
    k_range: Range<usize>,
    seed: u64,
    restarts: usize,
) -> Result<(ClusterResult, Vec<(usize, f64)>)> {
    let mut scores = Vec::new();
    let mut best: Option<ClusterResult> = None;
    for k in k_range {
        if k > n {
            break;
        }
        let res = kmeans(points, n, dim, k, seed, restarts)?;
        let score = res.silhouette.expect("k >= 2 always scores");
        scores.push((k, score));
        if best
            .as_ref()
            .map(|b| score > b.silhouette.unwrap())
            .unwrap_or(true)
        {
            best = Some(res);
        }
    }
    let best = best.ok_or_else(|| Error::Validation("empty k range".into()))?;
    Ok((best, scores))
}

// -- latent probes ---------------------------------------------------------------

/// Initial latent vector of a sample.
pub fn latent_z0(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x_bd = Tensor::from_vec(vec![pack.n_bd, pack.d], pack.x_bd.clone())?;
    let phi0 = Tensor::from_vec(vec![pack.n_bd, pack.n_phi], pack.phi0.clone())?;
    let g0 = crate::encoder::encode(&mut tape, &bound.encoder, cfg.k, &x_bd, &pack.id, &phi0)?;
    let z0 = mamba::aggregate_z0(&mut tape, g0)?;
    Ok(tape.data(z0).to_vec())
}

/// Decode fields after replacing the latent vector: rollout and decode run
/// from the supplied `z0` values while the point features stay those of the
/// sample.
pub fn decode_from_z0(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    z0_values: &[f64],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let x_bd = Tensor::from_vec(vec![pack.n_bd, pack.d], pack.x_bd.clone())?;
    let phi0 = Tensor::from_vec(vec![pack.n_bd, pack.n_phi], pack.phi0.clone())?;
    let g0 = crate::encoder::encode(&mut tape, &bound.encoder, cfg.k, &x_bd, &pack.id, &phi0)?;
    let z0 = tape.constant(vec![1, cfg.n_g], z0_values.to_vec())?;
    let traj: LatentTrajectory = mamba::rollout(&mut tape, &bound.mamba, z0, pack.t)?;
    let xq = Tensor::from_vec(vec![pack.n_q, pack.d], pack.x_q.clone())?;
    let xq_node = tape.leaf(&xq);
    let h_q = decoder::encode_queries(&mut tape, &bound.decoder, xq_node)?;
    let fields = decoder::decode_fields(&mut tape, &bound.decoder, &traj, g0, h_q)?;
    let mut out = Vec::new();
    for f in fields {
        out.extend_from_slice(tape.data(f));
    }
    Ok(out)
}

/// Zero every latent component outside `segment`, then roll out and decode.
/// The input sample and the model are untouched.
pub fn segment_ablation(
    params: &ModelParams<Tensor>,
    cfg: &ModelConfig,
    pack: &FieldPack,
    segment: Range<usize>,
) -> Result<Vec<f64>> {
    if segment.is_empty() {
        return Err(Error::Validation("empty ablation segment".into()));
    }
    if segment.end > cfg.n_g {
        return Err(Error::Validation(format!(
            "segment {segment:?} exceeds latent width {}",
            cfg.n_g
        )));
    }
    let z0 = latent_z0(params, cfg, pack)?;
    let masked: Vec<f64> = z0
        .iter()
        .enumerate()
        .map(|(i, &v)| if segment.contains(&i) { v } else { 0.0 })
        .collect();
    decode_from_z0(params, cfg, pack, &masked)
}
