//! Tokenizer training objectives: pixel, commitment, perceptual, and the
//! optional adversarial pair.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Fwd, ParamSet};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::perceptual::{stack_distance_graph, FeatureNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelNorm {
    L1,
    L2,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub beta: f32,
    pub lambda: f32,
    pub adv_weight: f32,
    pub pixel_norm: PixelNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { beta: 0.25, lambda: 1.0, adv_weight: 0.0, pixel_norm: PixelNorm::L1 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 || self.lambda < 0.0 || self.adv_weight < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

pub fn pixel_loss_graph(g: &mut Graph, xhat: VarId, x: VarId, norm: PixelNorm) -> Result<VarId> {
    let d = g.sub(xhat, x)?;
    Ok(match norm {
        PixelNorm::L1 => {
            let a = g.abs(d);
            g.mean(a)
        }
        PixelNorm::L2 => {
            let s = g.mul(d, d)?;
            g.mean(s)
        }
    })
}

/// Mean elementwise reconstruction error.
pub fn pixel_loss(x: &Tensor, xhat: &Tensor, norm: PixelNorm) -> Result<f32> {
    if x.shape() != xhat.shape() {
        return Err(shape_err(x.shape(), xhat.shape()));
    }
    let sum: f64 = x
        .data()
        .iter()
        .zip(xhat.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            match norm {
                PixelNorm::L1 => d.abs(),
                PixelNorm::L2 => d * d,
            }
        })
        .sum();
    Ok((sum / x.numel() as f64) as f32)
}

/// β times the mean squared gap between the encoder output and its
/// quantization. `zq` enters as a constant, which is the stop-gradient.
pub fn commitment_loss_graph(g: &mut Graph, z: VarId, zq: &Tensor, beta: f32) -> Result<VarId> {
    if g.value(z).shape() != zq.shape() {
        return Err(shape_err(g.value(z).shape(), zq.shape()));
    }
    let zqv = g.leaf(zq.clone());
    let d = g.sub(z, zqv)?;
    let s = g.mul(d, d)?;
    let m = g.mean(s);
    Ok(g.scale(m, beta))
}

pub fn commitment_loss(z: &Tensor, zq: &Tensor, beta: f32) -> Result<f32> {
    if z.shape() != zq.shape() {
        return Err(shape_err(z.shape(), zq.shape()));
    }
    let sum: f64 = z
        .data()
        .iter()
        .zip(zq.data())
        .map(|(&a, &b)| {
            let d = (a - b) as f64;
            d * d
        })
        .sum();
    Ok((beta as f64 * (sum / z.numel() as f64)) as f32)
}

/// Weighted loss terms; they sum to `total`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TokenizerLossTerms {
    pub total: f32,
    pub pixel: f32,
    pub perceptual: f32,
    pub commitment: f32,
    pub adversarial: f32,
}

/// Builds the combined tokenizer objective in the graph. `x` must be a
/// constant leaf, `xhat` and `z` live in the graph, `zq` is the quantized
/// constant. `gen_logits` are frozen-discriminator logits on `xhat` when
/// the adversarial term is on.
pub fn tokenizer_loss_graph(
    g: &mut Graph,
    x: VarId,
    xhat: VarId,
    z: VarId,
    zq: &Tensor,
    net: Option<&FeatureNet>,
    gen_logits: Option<VarId>,
    cfg: &LossConfig,
) -> Result<(VarId, TokenizerLossTerms)> {
    cfg.validate()?;
    let pixel = pixel_loss_graph(g, xhat, x, cfg.pixel_norm)?;
    let commitment = commitment_loss_graph(g, z, zq, cfg.beta)?;
    let mut total = g.add(pixel, commitment)?;

    let mut perceptual_term = 0.0;
    if cfg.lambda > 0.0 {
        let net = net.ok_or_else(|| {
            Error::Config("perceptual weight is positive but no feature net was given".into())
        })?;
        let mut f = Fwd::inference(g, &net.ps);
        let clean = net.features(&mut f, x)?;
        let recon = net.features(&mut f, xhat)?;
        let d = stack_distance_graph(g, &clean, &recon)?;
        let weighted = g.scale(d, cfg.lambda);
        perceptual_term = g.value(weighted).item();
        total = g.add(total, weighted)?;
    }

    let mut adv_term = 0.0;
    if cfg.adv_weight > 0.0 {
        let logits = gen_logits.ok_or_else(|| {
            Error::Config("adversarial weight is positive but no discriminator logits were given".into())
        })?;
        let gl = generator_loss_graph(g, logits)?;
        let weighted = g.scale(gl, cfg.adv_weight);
        adv_term = g.value(weighted).item();
        total = g.add(total, weighted)?;
    }

    let terms = TokenizerLossTerms {
        total: g.value(total).item(),
        pixel: g.value(pixel).item(),
        perceptual: perceptual_term,
        commitment: g.value(commitment).item(),
        adversarial: adv_term,
    };
    Ok((total, terms))
}

/// Frozen-weight evaluation of the combined objective.
pub fn tokenizer_loss(
    x: &Tensor,
    xhat: &Tensor,
    z: &Tensor,
    zq: &Tensor,
    net: Option<&FeatureNet>,
    disc: Option<&PatchDiscriminator>,
    cfg: &LossConfig,
) -> Result<TokenizerLossTerms> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let xhv = g.leaf(xhat.clone());
    let zv = g.leaf(z.clone());
    let gen_logits = if cfg.adv_weight > 0.0 {
        let d = disc.ok_or_else(|| {
            Error::Config("adversarial weight is positive but no discriminator was given".into())
        })?;
        let mut f = Fwd::inference(&mut g, &d.ps);
        Some(d.forward(&mut f, xhv)?)
    } else {
        None
    };
    let (_, terms) = tokenizer_loss_graph(&mut g, xv, xhv, zv, zq, net, gen_logits, cfg)?;
    Ok(terms)
}

/// Patch discriminator: three stride-2 conv stages then a logit conv, so a
/// 32x32 input yields a 4x4 logits grid.
pub struct PatchDiscriminator {
    pub ps: ParamSet,
    convs: Vec<Conv2d>,
    head: Conv2d,
}

const LEAK: f32 = 0.2;

impl PatchDiscriminator {
    pub fn new(base_channels: usize, rng: &mut Rng) -> Self {
        let mut ps = ParamSet::new();
        let widths = [base_channels, 2 * base_channels, 4 * base_channels];
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&mut ps, &format!("d{i}"), cin, cout, 3, 2, 1, rng));
            cin = cout;
        }
        let head = Conv2d::new(&mut ps, "logits", cin, 1, 3, 1, 1, rng);
        PatchDiscriminator { ps, convs, head }
    }

    /// [b, 3, h, w] -> [b, 1, h/8, w/8] real/fake logits.
    pub fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let (_, c, h, w) = f.g.value(x).dims4()?;
        if c != 3 || h % 8 != 0 || w % 8 != 0 {
            return Err(shape_err("[b, 3, 8k, 8k]", f.g.value(x).shape()));
        }
        let mut h = x;
        for conv in &self.convs {
            h = conv.forward(f, h)?;
            h = f.g.leaky_relu(h, LEAK);
        }
        self.head.forward(f, h)
    }
}

/// Non-saturating logistic discriminator loss: mean softplus(-real) and
/// mean softplus(fake), averaged over the two sides.
pub fn discriminator_loss_graph(g: &mut Graph, real_logits: VarId, fake_logits: VarId) -> Result<VarId> {
    let nr = g.scale(real_logits, -1.0);
    let sr = g.softplus(nr);
    let mr = g.mean(sr);
    let sf = g.softplus(fake_logits);
    let mf = g.mean(sf);
    let s = g.add(mr, mf)?;
    Ok(g.scale(s, 0.5))
}

/// Non-saturating generator loss: mean softplus(-fake).
pub fn generator_loss_graph(g: &mut Graph, fake_logits: VarId) -> Result<VarId> {
    let nf = g.scale(fake_logits, -1.0);
    let sf = g.softplus(nf);
    Ok(g.mean(sf))
}

/// (discriminator loss, generator loss) from raw logit grids.
pub fn adversarial_losses(real_logits: &Tensor, fake_logits: &Tensor) -> (f32, f32) {
    let sp = |v: f32| -> f64 { ((v as f64).exp() + 1.0).ln() };
    let mean = |t: &Tensor, f: &dyn Fn(f32) -> f64| -> f64 {
        t.data().iter().map(|&v| f(v)).sum::<f64>() / t.numel() as f64
    };
    let d = 0.5 * (mean(real_logits, &|v| sp(-v)) + mean(fake_logits, &sp));
    let g = mean(fake_logits, &|v| sp(-v));
    (d as f32, g as f32)
}
