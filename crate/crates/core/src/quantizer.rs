//! Discrete bottleneck: codebook storage, nearest-neighbor assignment,
//! straight-through gradient bridging, k-means initialization, EMA codebook
//! updates and the perplexity utilization metric.

use crate::error::{shape_err, Error, Result};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

/// Default EMA decay for codebook updates.
pub const DEFAULT_DECAY: f32 = 0.99;
/// Denominator guard for EMA count normalization.
pub const EMA_EPS: f32 = 1e-5;

/// Learned codebook plus its EMA accumulator state. After every EMA update
/// `entries[k] == ema_sums[k] / max(ema_counts[k], EMA_EPS)`.
#[derive(Clone)]
pub struct Codebook {
    /// [K, D] codeword matrix.
    pub entries: Tensor,
    /// Length-K running cluster sizes.
    pub ema_counts: Vec<f32>,
    /// [K, D] running cluster sums.
    pub ema_sums: Tensor,
    pub decay: f32,
}

impl Codebook {
    /// Start from explicit codewords, with the EMA state consistent
    /// (unit counts, sums equal to the entries).
    pub fn from_entries(entries: Tensor, decay: f32) -> Result<Self> {
        let (k, _) = entries.dims2()?;
        if k == 0 {
            return Err(Error::Config("codebook must contain at least one codeword".into()));
        }
        entries.check_finite()?;
        let sums = entries.clone();
        Ok(Codebook { entries, ema_counts: vec![1.0; k], ema_sums: sums, decay })
    }

    pub fn k(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.shape()[1]
    }
}

/// Grid of codeword indices produced by `assign`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenGrid {
    pub h: usize,
    pub w: usize,
    pub indices: Vec<u16>,
}

/// Nearest codeword for each row of an [n, D] matrix; ties break to the
/// lowest index via strict-less comparison in scan order.
pub fn assign_rows(rows: &[f32], n: usize, d: usize, cb: &Codebook) -> Result<Vec<u16>> {
    if d != cb.dim() {
        return Err(shape_err([cb.dim()], [d]));
    }
    let k = cb.k();
    let e = cb.entries.data();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let z = &rows[i * d..(i + 1) * d];
        let mut best = 0usize;
        let mut best_d = f32::INFINITY;
        for (ki, ek) in e.chunks_exact(d).enumerate().take(k) {
            let mut dist = 0.0f32;
            for (a, b) in z.iter().zip(ek) {
                let t = a - b;
                dist += t * t;
            }
            if dist < best_d {
                best_d = dist;
                best = ki;
            }
        }
        out.push(best as u16);
    }
    Ok(out)
}

/// Quantize a latent grid of shape [h, w, D].
pub fn assign(z: &Tensor, cb: &Codebook) -> Result<TokenGrid> {
    let s = z.shape();
    if s.len() != 3 {
        return Err(shape_err("[h, w, d]", s));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let indices = assign_rows(z.data(), h * w, d, cb)?;
    Ok(TokenGrid { h, w, indices })
}

/// Replace each token with its codeword: output [h, w, D].
pub fn lookup(t: &TokenGrid, cb: &Codebook) -> Result<Tensor> {
    let d = cb.dim();
    let k = cb.k();
    let e = cb.entries.data();
    let mut out = Vec::with_capacity(t.indices.len() * d);
    for &idx in &t.indices {
        let idx = idx as usize;
        if idx >= k {
            return Err(Error::IndexOutOfBounds { index: idx, bound: k });
        }
        out.extend_from_slice(&e[idx * d..(idx + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![t.h, t.w, d], out))
}

/// Quantization bridge inside a graph: forward takes `z_q`, backward
/// copies the incoming gradient to `z` unchanged.
pub fn straight_through(g: &mut Graph, z: VarId, z_q: VarId) -> Result<VarId> {
    g.straight_through(z, z_q)
}

/// One EMA codebook update from a batch of latent rows [m, D] and their
/// assignments. Unassigned codewords keep their decayed state.
pub fn ema_update(cb: &mut Codebook, z_rows: &Tensor, assignments: &[u16]) -> Result<()> {
    let (m, d) = z_rows.dims2()?;
    if d != cb.dim() {
        return Err(shape_err([cb.dim()], [d]));
    }
    if assignments.len() != m {
        return Err(shape_err([m], [assignments.len()]));
    }
    let k = cb.k();
    let gamma = cb.decay;
    let mut counts = vec![0.0f32; k];
    let mut sums = vec![0.0f32; k * d];
    let zd = z_rows.data();
    for (i, &a) in assignments.iter().enumerate() {
        let a = a as usize;
        if a >= k {
            return Err(Error::IndexOutOfBounds { index: a, bound: k });
        }
        counts[a] += 1.0;
        for j in 0..d {
            sums[a * d + j] += zd[i * d + j];
        }
    }
    let entry = cb.entries.data_mut();
    let msum = cb.ema_sums.data_mut();
    for ki in 0..k {
        cb.ema_counts[ki] = gamma * cb.ema_counts[ki] + (1.0 - gamma) * counts[ki];
        let denom = cb.ema_counts[ki].max(EMA_EPS);
        for j in 0..d {
            msum[ki * d + j] = gamma * msum[ki * d + j] + (1.0 - gamma) * sums[ki * d + j];
            entry[ki * d + j] = msum[ki * d + j] / denom;
        }
    }
    Ok(())
}

const KMEANS_MAX_ITERS: usize = 10;

/// Lloyd k-means over [m, D] vectors: random distinct seeding, then
/// iterate to convergence or `KMEANS_MAX_ITERS`. Empty clusters keep
/// their previous center.
pub fn kmeans_init(vectors: &Tensor, k: usize, rng: &mut Rng) -> Result<Codebook> {
    let (m, d) = vectors.dims2()?;
    if m < k {
        return Err(Error::Config(format!("k-means needs at least {k} vectors, got {m}")));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be positive".into()));
    }
    let vd = vectors.data();
    let mut centers = Vec::with_capacity(k * d);
    for idx in rng.sample_distinct(m, k) {
        centers.extend_from_slice(&vd[idx * d..(idx + 1) * d]);
    }
    let mut cb = Codebook::from_entries(Tensor::from_parts(vec![k, d], centers), DEFAULT_DECAY)?;
    let mut prev: Vec<u16> = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        let asg = assign_rows(vd, m, d, &cb)?;
        if asg == prev {
            break;
        }
        let mut counts = vec![0.0f32; k];
        let mut sums = vec![0.0f64; k * d];
        for (i, &a) in asg.iter().enumerate() {
            counts[a as usize] += 1.0;
            for j in 0..d {
                sums[a as usize * d + j] += vd[i * d + j] as f64;
            }
        }
        let e = cb.entries.data_mut();
        for ki in 0..k {
            if counts[ki] > 0.0 {
                for j in 0..d {
                    e[ki * d + j] = (sums[ki * d + j] / counts[ki] as f64) as f32;
                }
            }
        }
        prev = asg;
    }
    cb.entries.check_finite()?;
    cb.ema_sums = cb.entries.clone();
    cb.ema_counts = vec![1.0; k];
    Ok(cb)
}

/// exp(entropy) of the empirical codeword distribution; 1 when all tokens
/// agree, `k` at the uniform limit.
pub fn perplexity(tokens: &[u16], k: usize) -> f32 {
    debug_assert!(!tokens.is_empty(), "perplexity needs at least one token");
    let mut counts = vec![0u64; k];
    for &t in tokens {
        counts[t as usize] += 1;
    }
    let total = tokens.len() as f64;
    let mut entropy = 0.0f64;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total;
            entropy -= p * p.ln();
        }
    }
    entropy.exp() as f32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::seeded_rng;

    fn cb2() -> Codebook {
        Codebook::from_entries(
            Tensor::from_vec(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).expect("entries"),
            0.99,
        )
        .expect("codebook")
    }

    #[test]
    fn nearest_of_two() {
        let z = Tensor::from_vec(vec![1, 1, 2], vec![0.1, 0.2]).expect("z");
        let t = assign(&z, &cb2()).expect("assign");
        assert_eq!(t.indices, vec![0]);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        // (0.5, 0.5) is exactly equidistant from (0,0) and (1,1)
        let z = Tensor::from_vec(vec![1, 1, 2], vec![0.5, 0.5]).expect("z");
        let t = assign(&z, &cb2()).expect("assign");
        assert_eq!(t.indices, vec![0], "tie must resolve to the lower index");
    }

    #[test]
    fn matches_exhaustive_f64_scan() {
        let (h, w, d, k) = (4usize, 4usize, 8usize, 16usize);
        let mut rng = seeded_rng(0);
        let z = Tensor::from_vec(vec![h, w, d], (0..h * w * d).map(|_| rng.normal()).collect()).expect("z");
        let entries = Tensor::from_vec(vec![k, d], (0..k * d).map(|_| rng.normal()).collect()).expect("e");
        let cb = Codebook::from_entries(entries, 0.99).expect("cb");
        let got = assign(&z, &cb).expect("assign");
        for i in 0..h * w {
            let zi = &z.data()[i * d..(i + 1) * d];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for ki in 0..k {
                let ek = &cb.entries.data()[ki * d..(ki + 1) * d];
                let dist: f64 = zi.iter().zip(ek).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = ki;
                }
            }
            assert_eq!(got.indices[i] as usize, best, "row {i} disagrees with exhaustive scan");
        }
    }

    #[test]
    fn lookup_tiles_codewords() {
        let cb = cb2();
        let t = TokenGrid { h: 2, w: 2, indices: vec![0, 1, 1, 0] };
        let z = lookup(&t, &cb).expect("lookup");
        assert_eq!(z.data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn quantization_idempotent() {
        let mut rng = seeded_rng(3);
        let z = Tensor::from_vec(vec![3, 3, 4], (0..36).map(|_| rng.normal()).collect()).expect("z");
        let entries = Tensor::from_vec(vec![8, 4], (0..32).map(|_| rng.normal()).collect()).expect("e");
        let cb = Codebook::from_entries(entries, 0.99).expect("cb");
        let t1 = assign(&z, &cb).expect("assign");
        let q1 = lookup(&t1, &cb).expect("lookup");
        let t2 = assign(&q1, &cb).expect("assign");
        assert_eq!(t1.indices, t2.indices, "codewords are fixed points of assignment");
    }

    #[test]
    fn ema_full_replacement_at_zero_decay() {
        let mut cb = cb2();
        cb.decay = 0.0;
        let z = Tensor::from_vec(vec![1, 2], vec![7.0, -2.0]).expect("z");
        ema_update(&mut cb, &z, &[1]).expect("ema");
        let e1 = &cb.entries.data()[2..];
        assert!((e1[0] - 7.0).abs() < 1e-6 && (e1[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn ema_identity_at_unit_decay() {
        let mut cb = cb2();
        cb.decay = 1.0;
        let before = cb.entries.data().to_vec();
        let z = Tensor::from_vec(vec![2, 2], vec![5.0, 5.0, -5.0, -5.0]).expect("z");
        ema_update(&mut cb, &z, &[0, 1]).expect("ema");
        assert_eq!(cb.entries.data(), &before[..], "decay 1 must leave the codebook unchanged");
    }

    #[test]
    fn ema_hand_accumulated_case() {
        // decay 0.9, one codeword tracked: N=1, m=e=(1,0); two vectors
        // (1,1) and (3,1) assigned to it
        let entries = Tensor::from_vec(vec![1, 2], vec![1.0, 0.0]).expect("e");
        let mut cb = Codebook::from_entries(entries, 0.9).expect("cb");
        let z = Tensor::from_vec(vec![2, 2], vec![1.0, 1.0, 3.0, 1.0]).expect("z");
        ema_update(&mut cb, &z, &[0, 0]).expect("ema");
        assert!((cb.ema_counts[0] - 1.1).abs() < 1e-6);
        assert!((cb.ema_sums.data()[0] - 1.3).abs() < 1e-6);
        assert!((cb.ema_sums.data()[1] - 0.2).abs() < 1e-6);
        assert!((cb.entries.data()[0] - 1.18182).abs() < 1e-5);
        assert!((cb.entries.data()[1] - 0.18182).abs() < 1e-5);
    }

    #[test]
    fn ema_at_zero_decay_is_a_lloyd_step() {
        let mut rng = seeded_rng(5);
        let z = Tensor::from_vec(vec![20, 3], (0..60).map(|_| rng.normal()).collect()).expect("z");
        let entries = Tensor::from_vec(vec![4, 3], (0..12).map(|_| rng.normal()).collect()).expect("e");
        let mut cb = Codebook::from_entries(entries, 0.0).expect("cb");
        let asg = assign_rows(z.data(), 20, 3, &cb).expect("assign");
        ema_update(&mut cb, &z, &asg).expect("ema");
        // assigned clusters should now hold their batch means
        for ki in 0..4 {
            let members: Vec<usize> = asg.iter().enumerate().filter(|(_, &a)| a as usize == ki).map(|(i, _)| i).collect();
            if members.is_empty() {
                continue;
            }
            for j in 0..3 {
                let mean: f32 = members.iter().map(|&i| z.data()[i * 3 + j]).sum::<f32>() / members.len() as f32;
                assert!(
                    (cb.entries.data()[ki * 3 + j] - mean).abs() < 1e-4,
                    "cluster {ki} coordinate {j} should be the batch mean"
                );
            }
        }
    }

    #[test]
    fn kmeans_degenerate_equals_points() {
        let pts = Tensor::from_vec(vec![3, 2], vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).expect("pts");
        let mut rng = seeded_rng(1);
        let cb = kmeans_init(&pts, 3, &mut rng).expect("kmeans");
        let mut found = vec![false; 3];
        for ki in 0..3 {
            let c = &cb.entries.data()[ki * 2..(ki + 1) * 2];
            for (pi, f) in found.iter_mut().enumerate() {
                let p = &pts.data()[pi * 2..(pi + 1) * 2];
                if (c[0] - p[0]).abs() < 1e-6 && (c[1] - p[1]).abs() < 1e-6 {
                    *f = true;
                }
            }
        }
        assert!(found.iter().all(|&f| f), "K = M must return the points themselves");
    }

    #[test]
    fn kmeans_single_center_is_mean() {
        let pts = Tensor::from_vec(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).expect("pts");
        let mut rng = seeded_rng(2);
        let cb = kmeans_init(&pts, 1, &mut rng).expect("kmeans");
        assert!((cb.entries.data()[0] - 3.0).abs() < 1e-6, "single center must be the mean");
    }

    #[test]
    fn kmeans_two_well_separated_pairs() {
        let pts = Tensor::from_vec(vec![4, 2], vec![0.0, 0.0, 0.0, 1.0, 10.0, 10.0, 10.0, 11.0]).expect("pts");
        let mut rng = seeded_rng(3);
        let cb = kmeans_init(&pts, 2, &mut rng).expect("kmeans");
        let c0 = &cb.entries.data()[0..2];
        let c1 = &cb.entries.data()[2..4];
        let (low, high) = if c0[0] < c1[0] { (c0, c1) } else { (c1, c0) };
        assert!((low[0] - 0.0).abs() < 1e-5 && (low[1] - 0.5).abs() < 1e-5, "low cluster center {low:?}");
        assert!((high[0] - 10.0).abs() < 1e-5 && (high[1] - 10.5).abs() < 1e-5, "high cluster center {high:?}");
    }

    #[test]
    fn perplexity_limits_and_hand_case() {
        assert!((perplexity(&[0, 1, 2, 3], 4) - 4.0).abs() < 1e-5, "uniform = K");
        assert!((perplexity(&[2, 2, 2], 8) - 1.0).abs() < 1e-6, "degenerate = 1");
        // counts (3,1): entropy 0.56234, exp = 1.75477
        assert!((perplexity(&[0, 0, 0, 1], 2) - 1.75477).abs() < 1e-4);
    }

    #[test]
    fn perplexity_order_invariant_and_bounded() {
        let mut rng = seeded_rng(4);
        let tokens: Vec<u16> = (0..50).map(|_| rng.below(6) as u16).collect();
        let mut shuffled = tokens.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.below(i + 1));
        }
        let a = perplexity(&tokens, 8);
        let b = perplexity(&shuffled, 8);
        assert!((a - b).abs() < 1e-6, "permutation must not change perplexity");
        assert!(a <= 6.0 + 1e-4 && a >= 1.0 - 1e-6);
    }

    #[test]
    fn straight_through_squared_loss_gradient() {
        // L = sum(st(z, z_q)^2): dL/dz = 2 * z_q elementwise
        let mut g = Graph::new();
        let z = g.param(Tensor::from_vec(vec![3], vec![0.3, -0.1, 0.8]).expect("z"));
        let zq = g.leaf(Tensor::from_vec(vec![3], vec![0.5, 0.0, 1.0]).expect("zq"));
        let st = straight_through(&mut g, z, zq).expect("st");
        let sq = g.mul(st, st).expect("sq");
        let s = g.sum(sq);
        let mut grads = g.backward(s).expect("backward");
        assert_eq!(grads.take(z).expect("dz").data(), &[1.0, 0.0, 2.0]);
    }
}
