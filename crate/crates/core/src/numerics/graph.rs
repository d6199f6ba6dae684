//! Tape-based reverse-mode autodiff.
//!
//! A `Graph` owns a flat tape of nodes. Builder methods run the forward
//! computation eagerly and record enough context to replay the chain rule
//! in reverse insertion order. Values are plain row-major f32 tensors;
//! reductions and statistics accumulate in f64 so results do not drift
//! with operand count.

use crate::error::{shape_err, Error, Result};
use crate::numerics::kernels;
use crate::numerics::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    AddScalar,
    Relu,
    LeakyRelu(f32),
    Tanh,
    Gelu,
    Softplus,
    Abs,
    Matmul,
    MatmulNt,
    AddBiasRows,
    AddTiled,
    ScaleRows(Vec<f32>),
    Sum,
    Mean,
    GroupNorm { groups: usize },
    LayerNorm,
    Conv2d { kernel: usize, stride: usize, pad: usize },
    Upsample2,
    Attention { batch: usize, seq: usize, heads: usize },
    RowNormalize { eps: f32 },
    ChannelNormalize { eps: f32 },
    SpatialMean,
    GroupedRowMean { group: usize },
    ExtractPatches { patch: usize },
    FoldPatches { patch: usize, grid_h: usize, grid_w: usize },
    StraightThrough,
    Detach,
    CorruptRows { mask: Vec<bool> },
    MaskedCrossEntropy { targets: Vec<usize>, mask: Vec<bool> },
}

struct Node {
    op: Op,
    parents: Vec<VarId>,
    value: Tensor,
    needs_grad: bool,
    retain: bool,
    // op-specific context captured at forward time (norm stats, attention
    // probabilities); empty for most ops
    saved_a: Vec<f32>,
    saved_b: Vec<f32>,
}

/// Per-variable gradients produced by `Graph::backward`.
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn take(&mut self, id: VarId) -> Option<Tensor> {
        self.slots.get_mut(id.0).and_then(Option::take)
    }

    pub fn get(&self, id: VarId) -> Option<&Tensor> {
        self.slots.get(id.0).and_then(Option::as_ref)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: VarId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, parents: Vec<VarId>, value: Tensor, saved_a: Vec<f32>, saved_b: Vec<f32>) -> VarId {
        let needs_grad = match op {
            Op::Leaf | Op::Detach => false,
            Op::StraightThrough => self.nodes[parents[0].0].needs_grad,
            _ => parents.iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node { op, parents, value, needs_grad, retain: false, saved_a, saved_b });
        VarId(self.nodes.len() - 1)
    }

    /// Marks a node so `backward` keeps its accumulated gradient instead of
    /// freeing it once consumed. Only meaningful on nodes in the gradient
    /// path; leaf and param nodes are retained regardless.
    pub fn retain_grad(&mut self, id: VarId) {
        self.nodes[id.0].retain = true;
    }

    /// Constant input; gradients never flow into it.
    pub fn leaf(&mut self, value: Tensor) -> VarId {
        self.push(Op::Leaf, vec![], value, vec![], vec![])
    }

    /// Trainable input; `backward` retains its gradient.
    pub fn param(&mut self, value: Tensor) -> VarId {
        let id = self.push(Op::Leaf, vec![], value, vec![], vec![]);
        self.nodes[id.0].needs_grad = true;
        id
    }

    fn same_shape(&self, a: VarId, b: VarId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let v = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect(),
        );
        Ok(self.push(Op::Add, vec![a, b], v, vec![], vec![]))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let v = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect(),
        );
        Ok(self.push(Op::Sub, vec![a, b], v, vec![], vec![]))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        self.same_shape(a, b)?;
        let v = Tensor::from_parts(
            self.value(a).shape().to_vec(),
            self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect(),
        );
        Ok(self.push(Op::Mul, vec![a, b], v, vec![], vec![]))
    }

    pub fn scale(&mut self, x: VarId, c: f32) -> VarId {
        let v = self.value(x).map(|t| t * c);
        self.push(Op::Scale(c), vec![x], v, vec![], vec![])
    }

    pub fn add_scalar(&mut self, x: VarId, c: f32) -> VarId {
        let v = self.value(x).map(|t| t + c);
        self.push(Op::AddScalar, vec![x], v, vec![], vec![])
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(|t| t.max(0.0));
        self.push(Op::Relu, vec![x], v, vec![], vec![])
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f32) -> VarId {
        let v = self.value(x).map(|t| if t > 0.0 { t } else { slope * t });
        self.push(Op::LeakyRelu(slope), vec![x], v, vec![], vec![])
    }

    pub fn tanh(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(f32::tanh);
        self.push(Op::Tanh, vec![x], v, vec![], vec![])
    }

    pub fn gelu(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(gelu_fwd);
        self.push(Op::Gelu, vec![x], v, vec![], vec![])
    }

    pub fn softplus(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(softplus_fwd);
        self.push(Op::Softplus, vec![x], v, vec![], vec![])
    }

    pub fn abs(&mut self, x: VarId) -> VarId {
        let v = self.value(x).map(f32::abs);
        self.push(Op::Abs, vec![x], v, vec![], vec![])
    }

    /// y[m,n] = a[m,k] * b[k,n]
    pub fn matmul(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(shape_err([m, ka], [kb, n]));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm_nn(m, ka, n, 1.0, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        Ok(self.push(Op::Matmul, vec![a, b], Tensor::from_parts(vec![m, n], out), vec![], vec![]))
    }

    /// y[m,n] = a[m,k] * b[n,k]^T
    pub fn matmul_nt(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let (m, ka) = self.value(a).dims2()?;
        let (n, kb) = self.value(b).dims2()?;
        if ka != kb {
            return Err(shape_err([m, ka], [n, kb]));
        }
        let mut out = vec![0.0f32; m * n];
        kernels::sgemm_nt(m, ka, n, 1.0, self.value(a).data(), self.value(b).data(), 0.0, &mut out);
        Ok(self.push(Op::MatmulNt, vec![a, b], Tensor::from_parts(vec![m, n], out), vec![], vec![]))
    }

    /// y[r, :] = x[r, :] + v for a bias vector v of length `cols`.
    pub fn add_bias_rows(&mut self, x: VarId, v: VarId) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(v).shape() != [c] {
            return Err(shape_err([c], self.value(v).shape()));
        }
        let mut out = self.value(x).data().to_vec();
        let bias = self.value(v).data();
        for row in out.chunks_exact_mut(c) {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += b;
            }
        }
        Ok(self.push(Op::AddBiasRows, vec![x, v], Tensor::from_parts(vec![r, c], out), vec![], vec![]))
    }

    /// y = x + tile(t) where x is [g*r, c] and t is [r, c].
    pub fn add_tiled(&mut self, x: VarId, t: VarId) -> Result<VarId> {
        let (rows, c) = self.value(x).dims2()?;
        let (tr, tc) = self.value(t).dims2()?;
        if tc != c || tr == 0 || rows % tr != 0 {
            return Err(shape_err(format!("[k*{tr}, {tc}]"), self.value(x).shape()));
        }
        let mut out = self.value(x).data().to_vec();
        let tile = self.value(t).data();
        for (i, row) in out.chunks_exact_mut(c).enumerate() {
            let trow = &tile[(i % tr) * c..(i % tr + 1) * c];
            for (o, v) in row.iter_mut().zip(trow) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddTiled, vec![x, t], Tensor::from_parts(vec![rows, c], out), vec![], vec![]))
    }

    /// Multiply each row of x by a fixed (non-differentiated) factor.
    pub fn scale_rows(&mut self, x: VarId, factors: &[f32]) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if factors.len() != r {
            return Err(shape_err([r], [factors.len()]));
        }
        let mut out = self.value(x).data().to_vec();
        for (row, &f) in out.chunks_exact_mut(c).zip(factors) {
            for o in row {
                *o *= f;
            }
        }
        Ok(self.push(Op::ScaleRows(factors.to_vec()), vec![x], Tensor::from_parts(vec![r, c], out), vec![], vec![]))
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Op::Sum, vec![x], Tensor::scalar(s as f32), vec![], vec![])
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let n = self.value(x).numel();
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Op::Mean, vec![x], Tensor::scalar((s / n as f64) as f32), vec![], vec![])
    }

    /// Group normalization over [b, c, h, w] with per-channel affine params.
    pub fn group_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, groups: usize, eps: f32) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("group count {groups} must divide channels {c}")));
        }
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err([c], self.value(gamma).shape()));
        }
        let cpg = c / groups;
        let m = cpg * h * w;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0f32; xd.len()];
        let mut means = vec![0.0f32; b * groups];
        let mut rstds = vec![0.0f32; b * groups];
        for bi in 0..b {
            for gi in 0..groups {
                let base = (bi * c + gi * cpg) * h * w;
                let seg = &xd[base..base + m];
                let mean = seg.iter().map(|&v| v as f64).sum::<f64>() / m as f64;
                let var = seg.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / m as f64;
                let rstd = 1.0 / (var + eps as f64).sqrt();
                means[bi * groups + gi] = mean as f32;
                rstds[bi * groups + gi] = rstd as f32;
                for ci in 0..cpg {
                    let ch = gi * cpg + ci;
                    let off = (bi * c + ch) * h * w;
                    for p in 0..h * w {
                        let xn = ((xd[off + p] as f64 - mean) * rstd) as f32;
                        out[off + p] = g[ch] * xn + be[ch];
                    }
                }
            }
        }
        Ok(self.push(
            Op::GroupNorm { groups },
            vec![x, gamma, beta],
            Tensor::from_parts(vec![b, c, h, w], out),
            means,
            rstds,
        ))
    }

    /// Layer normalization over the last axis of a [rows, cols] tensor.
    pub fn layer_norm(&mut self, x: VarId, gamma: VarId, beta: VarId, eps: f32) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return Err(shape_err([c], self.value(gamma).shape()));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut out = vec![0.0f32; xd.len()];
        let mut means = vec![0.0f32; r];
        let mut rstds = vec![0.0f32; r];
        for (i, row) in xd.chunks_exact(c).enumerate() {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v as f64 - mean) * (v as f64 - mean)).sum::<f64>() / c as f64;
            let rstd = 1.0 / (var + eps as f64).sqrt();
            means[i] = mean as f32;
            rstds[i] = rstd as f32;
            for j in 0..c {
                let xn = ((row[j] as f64 - mean) * rstd) as f32;
                out[i * c + j] = g[j] * xn + be[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm,
            vec![x, gamma, beta],
            Tensor::from_parts(vec![r, c], out),
            means,
            rstds,
        ))
    }

    /// 2-d convolution; w is [cout, cin, k, k], b is [cout].
    pub fn conv2d(&mut self, x: VarId, w: VarId, b: VarId, stride: usize, pad: usize) -> Result<VarId> {
        let (batch, cin, h, wd) = self.value(x).dims4()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(shape_err(format!("[cout, {cin}, k, k]"), ws));
        }
        let (cout, kernel) = (ws[0], ws[2]);
        if self.value(b).shape() != [cout] {
            return Err(shape_err([cout], self.value(b).shape()));
        }
        if h + 2 * pad < kernel || wd + 2 * pad < kernel {
            return Err(Error::Config(format!("kernel {kernel} exceeds padded input {h}x{wd}+{pad}")));
        }
        let ho = kernels::conv_out_size(h, kernel, stride, pad);
        let wo = kernels::conv_out_size(wd, kernel, stride, pad);
        let mut out = vec![0.0f32; batch * cout * ho * wo];
        kernels::conv2d_forward(
            self.value(x).data(), self.value(w).data(), self.value(b).data(),
            batch, cin, h, wd, cout, kernel, stride, pad, &mut out,
        );
        Ok(self.push(
            Op::Conv2d { kernel, stride, pad },
            vec![x, w, b],
            Tensor::from_parts(vec![batch, cout, ho, wo], out),
            vec![],
            vec![],
        ))
    }

    /// Nearest-neighbor 2x upsampling of [b, c, h, w].
    pub fn upsample2(&mut self, x: VarId) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * c * 4 * h * w];
        for plane in 0..b * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..h {
                for j in 0..w {
                    let v = src[i * w + j];
                    dst[(2 * i) * 2 * w + 2 * j] = v;
                    dst[(2 * i) * 2 * w + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * w + 2 * j + 1] = v;
                }
            }
        }
        Ok(self.push(Op::Upsample2, vec![x], Tensor::from_parts(vec![b, c, 2 * h, 2 * w], out), vec![], vec![]))
    }

    /// Multi-head self-attention over a packed qkv projection.
    ///
    /// `qkv` is [batch*seq, 3*width] laid out as the q, k and v blocks per
    /// row; output is [batch*seq, width]. Attention probabilities are kept
    /// for the backward pass.
    pub fn attention(&mut self, qkv: VarId, batch: usize, seq: usize, heads: usize) -> Result<VarId> {
        let (rows, three_w) = self.value(qkv).dims2()?;
        if rows != batch * seq || three_w % 3 != 0 {
            return Err(shape_err(format!("[{}*{}, 3*w]", batch, seq), self.value(qkv).shape()));
        }
        let width = three_w / 3;
        if heads == 0 || width % heads != 0 {
            return Err(Error::Config(format!("head count {heads} must divide width {width}")));
        }
        let dh = width / heads;
        let alpha = 1.0 / (dh as f32).sqrt();
        let xd = self.value(qkv).data();
        let mut out = vec![0.0f32; rows * width];
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        let mut scores = vec![0.0f32; seq * seq];
        for b in 0..batch {
            let row0 = b * seq;
            for hd in 0..heads {
                let qp = unsafe { xd.as_ptr().add(row0 * three_w + hd * dh) };
                let kp = unsafe { xd.as_ptr().add(row0 * three_w + width + hd * dh) };
                let vp = unsafe { xd.as_ptr().add(row0 * three_w + 2 * width + hd * dh) };
                unsafe {
                    kernels::sgemm_strided(
                        seq, dh, seq, alpha,
                        qp, three_w as isize, 1,
                        kp, 1, three_w as isize,
                        0.0,
                        scores.as_mut_ptr(), seq as isize, 1,
                    );
                }
                let a = &mut probs[(b * heads + hd) * seq * seq..(b * heads + hd + 1) * seq * seq];
                for (arow, srow) in a.chunks_exact_mut(seq).zip(scores.chunks_exact(seq)) {
                    softmax_row(srow, arow);
                }
                unsafe {
                    kernels::sgemm_strided(
                        seq, seq, dh, 1.0,
                        a.as_ptr(), seq as isize, 1,
                        vp, three_w as isize, 1,
                        0.0,
                        out.as_mut_ptr().add(row0 * width + hd * dh), width as isize, 1,
                    );
                }
            }
        }
        Ok(self.push(
            Op::Attention { batch, seq, heads },
            vec![qkv],
            Tensor::from_parts(vec![rows, width], out),
            probs,
            vec![],
        ))
    }

    /// Scale each row of [rows, cols] to unit L2 norm (norm + eps in the
    /// denominator).
    pub fn row_normalize(&mut self, x: VarId, eps: f32) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        let mut norms = vec![0.0f32; r];
        for (i, row) in xd.chunks_exact(c).enumerate() {
            let n = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
            norms[i] = n;
            let inv = 1.0 / (n + eps);
            for j in 0..c {
                out[i * c + j] = row[j] * inv;
            }
        }
        Ok(self.push(Op::RowNormalize { eps }, vec![x], Tensor::from_parts(vec![r, c], out), norms, vec![]))
    }

    /// Scale the channel vector at each spatial position of [b, c, h, w] to
    /// unit L2 norm.
    pub fn channel_normalize(&mut self, x: VarId, eps: f32) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; xd.len()];
        let mut norms = vec![0.0f32; b * hw];
        for bi in 0..b {
            for p in 0..hw {
                let mut s = 0.0f64;
                for ci in 0..c {
                    let v = xd[(bi * c + ci) * hw + p];
                    s += (v as f64) * (v as f64);
                }
                let n = s.sqrt() as f32;
                norms[bi * hw + p] = n;
                let inv = 1.0 / (n + eps);
                for ci in 0..c {
                    out[(bi * c + ci) * hw + p] = xd[(bi * c + ci) * hw + p] * inv;
                }
            }
        }
        Ok(self.push(Op::ChannelNormalize { eps }, vec![x], Tensor::from_parts(vec![b, c, h, w], out), norms, vec![]))
    }

    /// Mean over the spatial axes: [b, c, h, w] -> [b, c].
    pub fn spatial_mean(&mut self, x: VarId) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * c];
        for (o, plane) in out.iter_mut().zip(xd.chunks_exact(hw)) {
            *o = (plane.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32;
        }
        Ok(self.push(Op::SpatialMean, vec![x], Tensor::from_parts(vec![b, c], out), vec![], vec![]))
    }

    /// Mean over consecutive row groups: [g*group, c] -> [g, c].
    pub fn grouped_row_mean(&mut self, x: VarId, group: usize) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if group == 0 || r % group != 0 {
            return Err(Error::Config(format!("group {group} must divide rows {r}")));
        }
        let g = r / group;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; g * c];
        for gi in 0..g {
            for j in 0..c {
                let mut s = 0.0f64;
                for i in 0..group {
                    s += xd[(gi * group + i) * c + j] as f64;
                }
                out[gi * c + j] = (s / group as f64) as f32;
            }
        }
        Ok(self.push(Op::GroupedRowMean { group }, vec![x], Tensor::from_parts(vec![g, c], out), vec![], vec![]))
    }

    /// Rearrange [b, c, h, w] into per-patch rows [b*n, c*p*p] where
    /// n = (h/p)*(w/p); patches enumerate in row-major order.
    pub fn extract_patches(&mut self, x: VarId, patch: usize) -> Result<VarId> {
        let (b, c, h, w) = self.value(x).dims4()?;
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Config(format!("patch {patch} must divide {h}x{w}")));
        }
        let (gh, gw) = (h / patch, w / patch);
        let n = gh * gw;
        let cols = c * patch * patch;
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * n * cols];
        for bi in 0..b {
            for pi in 0..gh {
                for pj in 0..gw {
                    let row = bi * n + pi * gw + pj;
                    for ci in 0..c {
                        for di in 0..patch {
                            for dj in 0..patch {
                                let src = ((bi * c + ci) * h + pi * patch + di) * w + pj * patch + dj;
                                out[row * cols + (ci * patch + di) * patch + dj] = xd[src];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(Op::ExtractPatches { patch }, vec![x], Tensor::from_parts(vec![b * n, cols], out), vec![], vec![]))
    }

    /// Inverse of `extract_patches`: rows [b*gh*gw, c*p*p] back to
    /// [b, c, gh*p, gw*p].
    pub fn fold_patches(&mut self, x: VarId, patch: usize, grid_h: usize, grid_w: usize) -> Result<VarId> {
        let (rows, cols) = self.value(x).dims2()?;
        let n = grid_h * grid_w;
        if n == 0 || rows % n != 0 || patch == 0 || cols % (patch * patch) != 0 {
            return Err(shape_err(format!("[b*{n}, c*{patch}*{patch}]"), self.value(x).shape()));
        }
        let b = rows / n;
        let c = cols / (patch * patch);
        let (h, w) = (grid_h * patch, grid_w * patch);
        let xd = self.value(x).data();
        let mut out = vec![0.0f32; b * c * h * w];
        for bi in 0..b {
            for pi in 0..grid_h {
                for pj in 0..grid_w {
                    let row = bi * n + pi * grid_w + pj;
                    for ci in 0..c {
                        for di in 0..patch {
                            for dj in 0..patch {
                                let dst = ((bi * c + ci) * h + pi * patch + di) * w + pj * patch + dj;
                                out[dst] = xd[row * cols + (ci * patch + di) * patch + dj];
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::FoldPatches { patch, grid_h, grid_w },
            vec![x],
            Tensor::from_parts(vec![b, c, h, w], out),
            vec![],
            vec![],
        ))
    }

    /// Quantization bridge: takes the value of `quantized` forward but
    /// routes the full gradient to `pre` (the encoder output).
    pub fn straight_through(&mut self, pre: VarId, quantized: VarId) -> Result<VarId> {
        self.same_shape(pre, quantized)?;
        let v = Tensor::from_parts(self.value(quantized).shape().to_vec(), self.value(quantized).data().to_vec());
        Ok(self.push(Op::StraightThrough, vec![pre, quantized], v, vec![], vec![]))
    }

    /// Copy a value out of the gradient flow.
    pub fn detach(&mut self, x: VarId) -> VarId {
        let v = Tensor::from_parts(self.value(x).shape().to_vec(), self.value(x).data().to_vec());
        self.push(Op::Detach, vec![x], v, vec![], vec![])
    }

    /// Replace masked rows of [rows, c] with a learnable token of shape [c].
    pub fn corrupt_rows(&mut self, x: VarId, token: VarId, mask: &[bool]) -> Result<VarId> {
        let (r, c) = self.value(x).dims2()?;
        if self.value(token).shape() != [c] {
            return Err(shape_err([c], self.value(token).shape()));
        }
        if mask.len() != r {
            return Err(shape_err([r], [mask.len()]));
        }
        let mut out = self.value(x).data().to_vec();
        let tok = self.value(token).data();
        for (row, &m) in out.chunks_exact_mut(c).zip(mask) {
            if m {
                row.copy_from_slice(tok);
            }
        }
        Ok(self.push(Op::CorruptRows { mask: mask.to_vec() }, vec![x, token], Tensor::from_parts(vec![r, c], out), vec![], vec![]))
    }

    /// Mean cross-entropy of [rows, k] logits against integer targets,
    /// restricted to masked rows. Errors when the mask selects nothing.
    pub fn masked_cross_entropy(&mut self, logits: VarId, targets: &[usize], mask: &[bool]) -> Result<VarId> {
        let (r, k) = self.value(logits).dims2()?;
        if targets.len() != r || mask.len() != r {
            return Err(shape_err([r], [targets.len().min(mask.len())]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Config("cross-entropy is undefined over an empty mask".into()));
        }
        let xd = self.value(logits).data();
        let mut total = 0.0f64;
        for i in 0..r {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= k {
                return Err(Error::IndexOutOfBounds { index: t, bound: k });
            }
            let row = &xd[i * k..(i + 1) * k];
            total += log_sum_exp(row) - row[t] as f64;
        }
        let v = Tensor::scalar((total / count as f64) as f32);
        Ok(self.push(
            Op::MaskedCrossEntropy { targets: targets.to_vec(), mask: mask.to_vec() },
            vec![logits],
            v,
            vec![],
            vec![],
        ))
    }

    /// Reverse pass from a scalar root. Gradients of intermediate nodes are
    /// freed as soon as they have been consumed; leaf/param gradients are
    /// kept and returned.
    pub fn backward(&self, root: VarId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfBounds { index: root.0, bound: self.nodes.len() });
        }
        if self.nodes[root.0].value.numel() != 1 {
            return Err(shape_err([1usize], self.nodes[root.0].value.shape()));
        }
        let mut slots: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        slots.resize_with(self.nodes.len(), || None);
        slots[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), 1.0));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                slots[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue; // retain for the caller
            }
            let gy = if node.retain {
                match slots[i].clone() {
                    Some(t) => t,
                    None => continue,
                }
            } else {
                match slots[i].take() {
                    Some(t) => t,
                    None => continue,
                }
            };
            self.backprop_node(i, &gy, &mut slots);
        }
        Ok(Gradients { slots })
    }

    fn backprop_node(&self, i: usize, gy: &Tensor, slots: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let p = |j: usize| node.parents[j].0;
        let gyd = gy.data();
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Add => {
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd));
                self.accum(slots, p(1), |d| axpy_into(d, 1.0, gyd));
            }
            Op::Sub => {
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd));
                self.accum(slots, p(1), |d| axpy_into(d, -1.0, gyd));
            }
            Op::Mul => {
                let (av, bv) = (self.nodes[p(0)].value.data(), self.nodes[p(1)].value.data());
                self.accum(slots, p(0), |d| {
                    for ((d, g), b) in d.iter_mut().zip(gyd).zip(bv) {
                        *d += g * b;
                    }
                });
                self.accum(slots, p(1), |d| {
                    for ((d, g), a) in d.iter_mut().zip(gyd).zip(av) {
                        *d += g * a;
                    }
                });
            }
            Op::Scale(c) => {
                let c = *c;
                self.accum(slots, p(0), |d| axpy_into(d, c, gyd));
            }
            Op::AddScalar => self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd)),
            Op::Relu => {
                let xv = self.nodes[p(0)].value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gyd).zip(xv) {
                        if *x > 0.0 {
                            *d += g;
                        }
                    }
                });
            }
            Op::LeakyRelu(slope) => {
                let s = *slope;
                let xv = self.nodes[p(0)].value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gyd).zip(xv) {
                        *d += g * if *x > 0.0 { 1.0 } else { s };
                    }
                });
            }
            Op::Tanh => {
                let yv = node.value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), y) in d.iter_mut().zip(gyd).zip(yv) {
                        *d += g * (1.0 - y * y);
                    }
                });
            }
            Op::Gelu => {
                let xv = self.nodes[p(0)].value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gyd).zip(xv) {
                        *d += g * gelu_bwd(*x);
                    }
                });
            }
            Op::Softplus => {
                let xv = self.nodes[p(0)].value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gyd).zip(xv) {
                        *d += g * sigmoid(*x);
                    }
                });
            }
            Op::Abs => {
                let xv = self.nodes[p(0)].value.data();
                self.accum(slots, p(0), |d| {
                    for ((d, g), x) in d.iter_mut().zip(gyd).zip(xv) {
                        *d += g * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                    }
                });
            }
            Op::Matmul => {
                let (m, k) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let n = self.nodes[p(1)].value.shape()[1];
                let (av, bv) = (self.nodes[p(0)].value.data(), self.nodes[p(1)].value.data());
                self.accum(slots, p(0), |d| kernels::sgemm_nt(m, n, k, 1.0, gyd, bv, 1.0, d));
                self.accum(slots, p(1), |d| kernels::sgemm_tn(k, m, n, 1.0, av, gyd, 1.0, d));
            }
            Op::MatmulNt => {
                let (m, k) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let n = self.nodes[p(1)].value.shape()[0];
                let (av, bv) = (self.nodes[p(0)].value.data(), self.nodes[p(1)].value.data());
                self.accum(slots, p(0), |d| kernels::sgemm_nn(m, n, k, 1.0, gyd, bv, 1.0, d));
                self.accum(slots, p(1), |d| kernels::sgemm_tn(n, m, k, 1.0, gyd, av, 1.0, d));
            }
            Op::AddBiasRows => {
                let c = self.nodes[p(1)].value.numel();
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd));
                self.accum(slots, p(1), |d| {
                    for row in gyd.chunks_exact(c) {
                        for (d, g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::AddTiled => {
                let (tr, tc) = self.nodes[p(1)].value.dims2().expect("checked at forward");
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd));
                self.accum(slots, p(1), |d| {
                    for (i, row) in gyd.chunks_exact(tc).enumerate() {
                        let drow = &mut d[(i % tr) * tc..(i % tr + 1) * tc];
                        for (d, g) in drow.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::ScaleRows(factors) => {
                let c = node.value.shape()[1];
                self.accum(slots, p(0), |d| {
                    for ((drow, grow), &f) in d.chunks_exact_mut(c).zip(gyd.chunks_exact(c)).zip(factors) {
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += g * f;
                        }
                    }
                });
            }
            Op::Sum => {
                let g = gyd[0];
                self.accum(slots, p(0), |d| {
                    for v in d {
                        *v += g;
                    }
                });
            }
            Op::Mean => {
                let g = gyd[0] / self.nodes[p(0)].value.numel() as f32;
                self.accum(slots, p(0), |d| {
                    for v in d {
                        *v += g;
                    }
                });
            }
            Op::GroupNorm { groups } => {
                let groups = *groups;
                let (b, c, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                let cpg = c / groups;
                let m = cpg * h * w;
                let hw = h * w;
                let xv = self.nodes[p(0)].value.data();
                let gv = self.nodes[p(1)].value.data();
                let (means, rstds) = (&node.saved_a, &node.saved_b);
                self.accum(slots, p(0), |d| {
                    for bi in 0..b {
                        for gi in 0..groups {
                            let mean = means[bi * groups + gi];
                            let rstd = rstds[bi * groups + gi];
                            let base = (bi * c + gi * cpg) * hw;
                            let mut sum_g = 0.0f64;
                            let mut sum_gx = 0.0f64;
                            for ci in 0..cpg {
                                let ch = gi * cpg + ci;
                                for pp in 0..hw {
                                    let idx = base + ci * hw + pp;
                                    let gg = (gyd[idx] * gv[ch]) as f64;
                                    let xn = ((xv[idx] - mean) * rstd) as f64;
                                    sum_g += gg;
                                    sum_gx += gg * xn;
                                }
                            }
                            let mg = (sum_g / m as f64) as f32;
                            let mgx = (sum_gx / m as f64) as f32;
                            for ci in 0..cpg {
                                let ch = gi * cpg + ci;
                                for pp in 0..hw {
                                    let idx = base + ci * hw + pp;
                                    let gg = gyd[idx] * gv[ch];
                                    let xn = (xv[idx] - mean) * rstd;
                                    d[idx] += rstd * (gg - mg - xn * mgx);
                                }
                            }
                        }
                    }
                });
                self.accum(slots, p(1), |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let mean = means[bi * groups + ch / cpg];
                            let rstd = rstds[bi * groups + ch / cpg];
                            let mut s = 0.0f64;
                            for pp in 0..hw {
                                let idx = (bi * c + ch) * hw + pp;
                                s += (gyd[idx] * (xv[idx] - mean) * rstd) as f64;
                            }
                            d[ch] += s as f32;
                        }
                    }
                });
                self.accum(slots, p(2), |d| {
                    for bi in 0..b {
                        for ch in 0..c {
                            let mut s = 0.0f64;
                            for pp in 0..hw {
                                s += gyd[(bi * c + ch) * hw + pp] as f64;
                            }
                            d[ch] += s as f32;
                        }
                    }
                });
            }
            Op::LayerNorm => {
                let (r, c) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let xv = self.nodes[p(0)].value.data();
                let gv = self.nodes[p(1)].value.data();
                let (means, rstds) = (&node.saved_a, &node.saved_b);
                self.accum(slots, p(0), |d| {
                    for i in 0..r {
                        let mean = means[i];
                        let rstd = rstds[i];
                        let mut sum_g = 0.0f64;
                        let mut sum_gx = 0.0f64;
                        for j in 0..c {
                            let gg = (gyd[i * c + j] * gv[j]) as f64;
                            let xn = ((xv[i * c + j] - mean) * rstd) as f64;
                            sum_g += gg;
                            sum_gx += gg * xn;
                        }
                        let mg = (sum_g / c as f64) as f32;
                        let mgx = (sum_gx / c as f64) as f32;
                        for j in 0..c {
                            let gg = gyd[i * c + j] * gv[j];
                            let xn = (xv[i * c + j] - mean) * rstd;
                            d[i * c + j] += rstd * (gg - mg - xn * mgx);
                        }
                    }
                });
                self.accum(slots, p(1), |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += gyd[i * c + j] * (xv[i * c + j] - means[i]) * rstds[i];
                        }
                    }
                });
                self.accum(slots, p(2), |d| {
                    for row in gyd.chunks_exact(c) {
                        for (d, g) in d.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                });
            }
            Op::Conv2d { kernel, stride, pad } => {
                let (kernel, stride, pad) = (*kernel, *stride, *pad);
                let (batch, cin, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                let cout = self.nodes[p(1)].value.shape()[0];
                let xv = self.nodes[p(0)].value.data();
                let wv = self.nodes[p(1)].value.data();
                let need_dx = self.nodes[p(0)].needs_grad;
                let need_dw = self.nodes[p(1)].needs_grad || self.nodes[p(2)].needs_grad;
                let mut dx = vec![0.0f32; if need_dx { xv.len() } else { 0 }];
                let mut dw = vec![0.0f32; if need_dw { wv.len() } else { 0 }];
                let mut db = vec![0.0f32; if need_dw { cout } else { 0 }];
                kernels::conv2d_backward_partial(
                    xv, wv, gyd, batch, cin, h, w, cout, kernel, stride, pad,
                    need_dx.then_some(&mut dx[..]),
                    need_dw.then(|| (&mut dw[..], &mut db[..])),
                );
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, &dx));
                self.accum(slots, p(1), |d| axpy_into(d, 1.0, &dw));
                self.accum(slots, p(2), |d| axpy_into(d, 1.0, &db));
            }
            Op::Upsample2 => {
                let (b, c, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                self.accum(slots, p(0), |d| {
                    for plane in 0..b * c {
                        let src = &gyd[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                        for i in 0..h {
                            for j in 0..w {
                                dst[i * w + j] += src[(2 * i) * 2 * w + 2 * j]
                                    + src[(2 * i) * 2 * w + 2 * j + 1]
                                    + src[(2 * i + 1) * 2 * w + 2 * j]
                                    + src[(2 * i + 1) * 2 * w + 2 * j + 1];
                            }
                        }
                    }
                });
            }
            Op::Attention { batch, seq, heads } => {
                let (batch, seq, heads) = (*batch, *seq, *heads);
                let three_w = self.nodes[p(0)].value.shape()[1];
                let width = three_w / 3;
                let dh = width / heads;
                let alpha = 1.0 / (dh as f32).sqrt();
                let xd = self.nodes[p(0)].value.data();
                let probs = &node.saved_a;
                let mut dqkv = vec![0.0f32; xd.len()];
                let mut da = vec![0.0f32; seq * seq];
                let mut ds = vec![0.0f32; seq * seq];
                for b in 0..batch {
                    let row0 = b * seq;
                    for hd in 0..heads {
                        let qp = unsafe { xd.as_ptr().add(row0 * three_w + hd * dh) };
                        let kp = unsafe { xd.as_ptr().add(row0 * three_w + width + hd * dh) };
                        let vp = unsafe { xd.as_ptr().add(row0 * three_w + 2 * width + hd * dh) };
                        let gyp = unsafe { gyd.as_ptr().add(row0 * width + hd * dh) };
                        let a = &probs[(b * heads + hd) * seq * seq..(b * heads + hd + 1) * seq * seq];
                        unsafe {
                            // dV = A^T * dY
                            kernels::sgemm_strided(
                                seq, seq, dh, 1.0,
                                a.as_ptr(), 1, seq as isize,
                                gyp, width as isize, 1,
                                0.0,
                                dqkv.as_mut_ptr().add(row0 * three_w + 2 * width + hd * dh),
                                three_w as isize, 1,
                            );
                            // dA = dY * V^T
                            kernels::sgemm_strided(
                                seq, dh, seq, 1.0,
                                gyp, width as isize, 1,
                                vp, 1, three_w as isize,
                                0.0,
                                da.as_mut_ptr(), seq as isize, 1,
                            );
                        }
                        // softmax backward: dS = A o (dA - rowdot(dA, A))
                        for r in 0..seq {
                            let ar = &a[r * seq..(r + 1) * seq];
                            let dar = &da[r * seq..(r + 1) * seq];
                            let dot: f64 = ar.iter().zip(dar).map(|(&x, &y)| x as f64 * y as f64).sum();
                            let dsr = &mut ds[r * seq..(r + 1) * seq];
                            for j in 0..seq {
                                dsr[j] = ar[j] * (dar[j] - dot as f32);
                            }
                        }
                        unsafe {
                            // dQ = alpha * dS * K
                            kernels::sgemm_strided(
                                seq, seq, dh, alpha,
                                ds.as_ptr(), seq as isize, 1,
                                kp, three_w as isize, 1,
                                0.0,
                                dqkv.as_mut_ptr().add(row0 * three_w + hd * dh),
                                three_w as isize, 1,
                            );
                            // dK = alpha * dS^T * Q
                            kernels::sgemm_strided(
                                seq, seq, dh, alpha,
                                ds.as_ptr(), 1, seq as isize,
                                qp, three_w as isize, 1,
                                0.0,
                                dqkv.as_mut_ptr().add(row0 * three_w + width + hd * dh),
                                three_w as isize, 1,
                            );
                        }
                    }
                }
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, &dqkv));
            }
            Op::RowNormalize { eps } => {
                let eps = *eps;
                let (r, c) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let xv = self.nodes[p(0)].value.data();
                let norms = &node.saved_a;
                self.accum(slots, p(0), |d| {
                    for i in 0..r {
                        let n = norms[i];
                        let inv = 1.0 / (n + eps);
                        let dot: f64 = (0..c).map(|j| gyd[i * c + j] as f64 * xv[i * c + j] as f64).sum();
                        let coef = if n > 0.0 { (dot as f32) / (n * (n + eps) * (n + eps)) } else { 0.0 };
                        for j in 0..c {
                            d[i * c + j] += gyd[i * c + j] * inv - xv[i * c + j] * coef;
                        }
                    }
                });
            }
            Op::ChannelNormalize { eps } => {
                let eps = *eps;
                let (b, c, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                let hw = h * w;
                let xv = self.nodes[p(0)].value.data();
                let norms = &node.saved_a;
                self.accum(slots, p(0), |d| {
                    for bi in 0..b {
                        for pp in 0..hw {
                            let n = norms[bi * hw + pp];
                            let inv = 1.0 / (n + eps);
                            let mut dot = 0.0f64;
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + pp;
                                dot += gyd[idx] as f64 * xv[idx] as f64;
                            }
                            let coef = if n > 0.0 { (dot as f32) / (n * (n + eps) * (n + eps)) } else { 0.0 };
                            for ci in 0..c {
                                let idx = (bi * c + ci) * hw + pp;
                                d[idx] += gyd[idx] * inv - xv[idx] * coef;
                            }
                        }
                    }
                });
            }
            Op::SpatialMean => {
                let (b, c, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                let hw = h * w;
                self.accum(slots, p(0), |d| {
                    for (plane, &g) in d.chunks_exact_mut(hw).zip(gyd.iter().take(b * c)) {
                        let g = g / hw as f32;
                        for v in plane {
                            *v += g;
                        }
                    }
                });
            }
            Op::GroupedRowMean { group } => {
                let group = *group;
                let c = node.value.shape()[1];
                self.accum(slots, p(0), |d| {
                    for (i, drow) in d.chunks_exact_mut(c).enumerate() {
                        let grow = &gyd[(i / group) * c..(i / group + 1) * c];
                        for (d, g) in drow.iter_mut().zip(grow) {
                            *d += g / group as f32;
                        }
                    }
                });
            }
            Op::ExtractPatches { patch } => {
                let patch = *patch;
                let (b, c, h, w) = self.nodes[p(0)].value.dims4().expect("checked at forward");
                let (gh, gw) = (h / patch, w / patch);
                let n = gh * gw;
                let cols = c * patch * patch;
                self.accum(slots, p(0), |d| {
                    for bi in 0..b {
                        for pi in 0..gh {
                            for pj in 0..gw {
                                let row = bi * n + pi * gw + pj;
                                for ci in 0..c {
                                    for di in 0..patch {
                                        for dj in 0..patch {
                                            let dst = ((bi * c + ci) * h + pi * patch + di) * w + pj * patch + dj;
                                            d[dst] += gyd[row * cols + (ci * patch + di) * patch + dj];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::FoldPatches { patch, grid_h, grid_w } => {
                let (patch, gh, gw) = (*patch, *grid_h, *grid_w);
                let (rows, cols) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let n = gh * gw;
                let b = rows / n;
                let c = cols / (patch * patch);
                let (h, w) = (gh * patch, gw * patch);
                self.accum(slots, p(0), |d| {
                    for bi in 0..b {
                        for pi in 0..gh {
                            for pj in 0..gw {
                                let row = bi * n + pi * gw + pj;
                                for ci in 0..c {
                                    for di in 0..patch {
                                        for dj in 0..patch {
                                            let src = ((bi * c + ci) * h + pi * patch + di) * w + pj * patch + dj;
                                            d[row * cols + (ci * patch + di) * patch + dj] += gyd[src];
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::StraightThrough => {
                self.accum(slots, p(0), |d| axpy_into(d, 1.0, gyd));
            }
            Op::CorruptRows { mask } => {
                let c = self.nodes[p(1)].value.numel();
                self.accum(slots, p(0), |d| {
                    for ((drow, grow), &m) in d.chunks_exact_mut(c).zip(gyd.chunks_exact(c)).zip(mask) {
                        if !m {
                            for (d, g) in drow.iter_mut().zip(grow) {
                                *d += g;
                            }
                        }
                    }
                });
                self.accum(slots, p(1), |d| {
                    for (grow, &m) in gyd.chunks_exact(c).zip(mask) {
                        if m {
                            for (d, g) in d.iter_mut().zip(grow) {
                                *d += g;
                            }
                        }
                    }
                });
            }
            Op::MaskedCrossEntropy { targets, mask } => {
                let (r, k) = self.nodes[p(0)].value.dims2().expect("checked at forward");
                let xv = self.nodes[p(0)].value.data();
                let count = mask.iter().filter(|&&m| m).count();
                let g = gyd[0] / count as f32;
                self.accum(slots, p(0), |d| {
                    let mut prob = vec![0.0f32; k];
                    for i in 0..r {
                        if !mask[i] {
                            continue;
                        }
                        softmax_row(&xv[i * k..(i + 1) * k], &mut prob);
                        let drow = &mut d[i * k..(i + 1) * k];
                        for j in 0..k {
                            drow[j] += g * (prob[j] - f32::from(j == targets[i]));
                        }
                    }
                });
            }
        }
    }

    /// Accumulate into a parent's gradient slot, allocating on first touch.
    /// Parents that do not need gradients are skipped.
    fn accum(&self, slots: &mut [Option<Tensor>], id: usize, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[id].needs_grad {
            return;
        }
        if slots[id].is_none() {
            slots[id] = Some(Tensor::zeros(self.nodes[id].value.shape()));
        }
        f(slots[id].as_mut().expect("just filled").data_mut());
    }
}

fn axpy_into(dst: &mut [f32], alpha: f32, src: &[f32]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus_fwd(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Numerically stable softmax of one row into `out`.
fn softmax_row(row: &[f32], out: &mut [f32]) {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &v) in out.iter_mut().zip(row) {
        let e = (v - mx).exp();
        *o = e;
        sum += e as f64;
    }
    let inv = (1.0 / sum) as f32;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

/// log(sum(exp(row))) with the max factored out, accumulated in f64.
fn log_sum_exp(row: &[f32]) -> f64 {
    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let s: f64 = row.iter().map(|&v| (v as f64 - mx).exp()).sum();
    mx + s.ln()
}
