//! Feature network and the multi-layer perceptual distance.
//!
//! An 8-layer conv net (strided every second layer) provides activation
//! taps. Per tap, each spatial position's channel vector is normalized to
//! unit length (zero vectors stay zero); the distance is the mean over
//! positions of the squared norm of the difference, summed over taps.
//! Weights come either from instance-discrimination self-supervision or
//! from random init.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Fwd, Linear, ParamSet};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

pub const FEATURE_LAYERS: usize = 8;
const NORM_EPS: f32 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsSource {
    SelfSupervised,
    RandomInit,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FeatureNetConfig {
    pub input_size: usize,
    pub base_channels: usize,
    pub tap_layers: Vec<usize>,
    pub embed_dim: usize,
    pub weights_source: WeightsSource,
}

impl Default for FeatureNetConfig {
    fn default() -> Self {
        FeatureNetConfig {
            input_size: 32,
            base_channels: 16,
            tap_layers: vec![2, 4, 6, 8],
            embed_dim: 64,
            weights_source: WeightsSource::SelfSupervised,
        }
    }
}

impl FeatureNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tap_layers.is_empty() {
            return Err(Error::Config("tap_layers must be non-empty".into()));
        }
        if !self.tap_layers.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config("tap_layers must be strictly increasing".into()));
        }
        let last = *self.tap_layers.last().expect("non-empty");
        if self.tap_layers[0] == 0 || last > FEATURE_LAYERS {
            return Err(Error::Config(format!(
                "tap_layers must lie in 1..={FEATURE_LAYERS}"
            )));
        }
        if self.input_size % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 16 (four stride-2 layers)",
                self.input_size
            )));
        }
        if self.base_channels == 0 || self.embed_dim == 0 {
            return Err(Error::Config("widths must be positive".into()));
        }
        Ok(())
    }

    /// Channel width of layer l in 1..=8: base, base, 2b, 2b, 4b, 4b, 4b, 4b.
    fn width(&self, l: usize) -> usize {
        self.base_channels * [1, 1, 2, 2, 4, 4, 4, 4][l - 1]
    }
}

pub struct FeatureNet {
    pub cfg: FeatureNetConfig,
    pub ps: ParamSet,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl FeatureNet {
    pub fn new(cfg: FeatureNetConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let mut convs = Vec::with_capacity(FEATURE_LAYERS);
        let mut cin = 3;
        for l in 1..=FEATURE_LAYERS {
            let cout = cfg.width(l);
            let stride = if l % 2 == 0 { 2 } else { 1 };
            convs.push(Conv2d::new(&mut ps, &format!("f{l}"), cin, cout, 3, stride, 1, rng));
            cin = cout;
        }
        let head = Linear::new(&mut ps, "head", cin, cfg.embed_dim, (1.0 / cin as f32).sqrt(), rng);
        Ok(FeatureNet { cfg, ps, convs, head })
    }

    /// Raw activations after every layer's relu, in graph form.
    fn layer_outputs(&self, f: &mut Fwd, x: VarId) -> Result<Vec<VarId>> {
        let (_, c, h, w) = f.g.value(x).dims4()?;
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(shape_err(
                format!("[b, 3, {0}, {0}]", self.cfg.input_size),
                f.g.value(x).shape(),
            ));
        }
        let mut acts = Vec::with_capacity(FEATURE_LAYERS);
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(f, h)?;
            h = f.g.relu(h);
            acts.push(h);
        }
        Ok(acts)
    }

    /// Normalized tap activations, in graph form (differentiable in x).
    pub fn features(&self, f: &mut Fwd, x: VarId) -> Result<Vec<VarId>> {
        let acts = self.layer_outputs(f, x)?;
        self.cfg
            .tap_layers
            .iter()
            .map(|&l| f.g.channel_normalize(acts[l - 1], NORM_EPS))
            .collect()
    }

    /// Embedding for instance discrimination: pooled last layer, projected,
    /// unit-normalized rows.
    fn embed(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let acts = self.layer_outputs(f, x)?;
        let pooled = f.g.spatial_mean(acts[FEATURE_LAYERS - 1])?;
        let e = self.head.forward(f, pooled)?;
        f.g.row_normalize(e, NORM_EPS)
    }
}

/// Frozen-weight tap extraction; returns one normalized map per tap layer.
pub fn extract_features(net: &FeatureNet, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let mut f = Fwd::inference(&mut g, &net.ps);
    let xv = f.g.leaf(x.clone());
    let taps = net.features(&mut f, xv)?;
    Ok(taps.into_iter().map(|t| g.value(t).clone()).collect())
}

/// Distance between two stacks of normalized tap activations: per tap the
/// mean over positions of the squared channel-vector difference, summed
/// over taps.
pub fn stack_distance(a: &[Tensor], b: &[Tensor]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::Config(format!(
            "stacks have {} vs {} taps",
            a.len(),
            b.len()
        )));
    }
    let mut total = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        if ta.shape() != tb.shape() {
            return Err(shape_err(ta.shape(), tb.shape()));
        }
        let (bn, _c, h, w) = ta.dims4()?;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| {
                let d = (x - y) as f64;
                d * d
            })
            .sum();
        total += sum / (bn * h * w) as f64;
    }
    Ok(total as f32)
}

/// Perceptual distance between two image batches on frozen weights.
pub fn perceptual_distance(net: &FeatureNet, x: &Tensor, xhat: &Tensor) -> Result<f32> {
    if x.shape() != xhat.shape() {
        return Err(shape_err(x.shape(), xhat.shape()));
    }
    stack_distance(&extract_features(net, x)?, &extract_features(net, xhat)?)
}

/// Stack distance over in-graph normalized taps.
pub fn stack_distance_graph(g: &mut Graph, a: &[VarId], b: &[VarId]) -> Result<VarId> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Config(format!(
            "stacks need matching non-zero tap counts, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    let mut total = None;
    for (&ta, &tb) in a.iter().zip(b) {
        let c = g.value(ta).shape()[1];
        let d = g.sub(tb, ta)?;
        let sq = g.mul(d, d)?;
        let m = g.mean(sq);
        let m = g.scale(m, c as f32);
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Same distance as a graph node, differentiable in `xhat`. `x_taps` are
/// precomputed constant taps of the clean image.
pub fn perceptual_distance_graph(
    net: &FeatureNet,
    f: &mut Fwd,
    x_taps: &[Tensor],
    xhat: VarId,
) -> Result<VarId> {
    let taps = net.features(f, xhat)?;
    let consts: Vec<VarId> = x_taps.iter().map(|t| f.g.leaf(t.clone())).collect();
    stack_distance_graph(f.g, &consts, &taps)
}

/// Shift, flip, and color-jitter augmentation of one CHW image in [-1, 1].
/// Color is scrambled hard (channel rotation, strong affine jitter, global
/// inversion) so instance discrimination cannot rest on the palette alone.
pub fn augment(img: &[f32], c: usize, h: usize, w: usize, rng: &mut Rng) -> Vec<f32> {
    let flip = rng.coin(0.5);
    let max_shift = 2i32;
    let di = rng.below(2 * max_shift as usize + 1) as i32 - max_shift;
    let dj = rng.below(2 * max_shift as usize + 1) as i32 - max_shift;
    let rot = rng.below(c.max(1));
    let invert = if rng.coin(0.5) { -1.0f32 } else { 1.0 };
    let mut out = vec![0.0f32; c * h * w];
    for ch in 0..c {
        let scale = invert * rng.range_f32(0.6, 1.4);
        let shift = rng.range_f32(-0.3, 0.3);
        let src = &img[(ch + rot) % c * h * w..][..h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let si = (i as i32 + di).clamp(0, h as i32 - 1) as usize;
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = (jj as i32 + dj).clamp(0, w as i32 - 1) as usize;
                dst[i * w + j] = (src[si * w + sj] * scale + shift).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

pub struct FeatureTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub temperature: f32,
}

impl Default for FeatureTrainOptions {
    fn default() -> Self {
        FeatureTrainOptions { steps: 600, batch: 32, lr: 1e-3, temperature: 0.2 }
    }
}

/// Instance-discrimination training: two augmented views per image, each
/// view must pick out its partner among all other views in the batch.
/// Returns the per-step loss curve.
pub fn train_feature_net(
    net: &mut FeatureNet,
    images: &Tensor,
    opts: &FeatureTrainOptions,
    rng: &mut Rng,
) -> Result<Vec<f32>> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 {
        return Err(Error::Config("feature-net training needs a non-empty dataset".into()));
    }
    if c != 3 || h != net.cfg.input_size || w != net.cfg.input_size {
        return Err(shape_err(
            format!("[n, 3, {0}, {0}]", net.cfg.input_size),
            images.shape(),
        ));
    }
    let b = opts.batch.min(n);
    let img_len = c * h * w;
    // -1e9 on the diagonal removes self-similarity from the softmax
    let mut diag = vec![0.0f32; 2 * b * 2 * b];
    for i in 0..2 * b {
        diag[i * 2 * b + i] = -1e9;
    }
    let diag = Tensor::from_parts(vec![2 * b, 2 * b], diag);
    let targets: Vec<usize> = (0..2 * b).map(|i| (i + b) % (2 * b)).collect();
    let mask = vec![true; 2 * b];

    let mut opt = Adam::new(AdamConfig::new(opts.lr, 0.9, 0.999, 1e-4));
    let mut curve = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let picks = rng.sample_distinct(n, b);
        let mut batch = vec![0.0f32; 2 * b * img_len];
        for (bi, &idx) in picks.iter().enumerate() {
            let src = &images.data()[idx * img_len..(idx + 1) * img_len];
            batch[bi * img_len..(bi + 1) * img_len].copy_from_slice(&augment(src, c, h, w, rng));
            batch[(b + bi) * img_len..(b + bi + 1) * img_len]
                .copy_from_slice(&augment(src, c, h, w, rng));
        }
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &net.ps);
        let xv = f.g.leaf(Tensor::from_parts(vec![2 * b, c, h, w], batch));
        let e = net.embed(&mut f, xv)?;
        let sim = f.g.matmul_nt(e, e)?;
        let sim = f.g.scale(sim, 1.0 / opts.temperature);
        let dv = f.g.leaf(diag.clone());
        let logits = f.g.add(sim, dv)?;
        let loss = f.g.masked_cross_entropy(logits, &targets, &mask)?;
        let bindings = f.bindings();
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NonFinite("feature-net training loss".into()));
        }
        curve.push(lv);
        let mut grads = g.backward(loss)?;
        opt.begin_step();
        for (pid, vid) in bindings {
            if let Some(gt) = grads.take(vid) {
                let decay = net.ps.decays(pid);
                opt.update(
                    pid.index(),
                    net.ps.value_mut(pid).data_mut(),
                    gt.data(),
                    opts.lr,
                    decay,
                );
            }
        }
    }
    Ok(curve)
}
