//! Convolutional encoder/decoder pair around the discrete bottleneck.
//!
//! Layout: a stem conv at `base_channels`, then per downsample stage
//! `residual_blocks_per_resolution` residual blocks followed by a stride-2
//! conv that doubles the channels. The bottleneck holds residual blocks
//! and, optionally, one single-head self-attention block. The decoder
//! mirrors the encoder with nearest-neighbor upsampling + conv (avoids
//! transposed-conv checkerboarding) and ends in tanh so pixels stay in
//! [-1, 1].

use crate::error::{shape_err, Error, Result};
use crate::nn::{Conv2d, Fwd, GroupNormLayer, Linear, ParamSet};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::quantizer::{self, Codebook, TokenGrid};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CodecConfig {
    pub input_size: usize,
    pub downsample_stages: usize,
    pub base_channels: usize,
    pub residual_blocks_per_resolution: usize,
    pub latent_dim: usize,
    pub attention_at_bottleneck: bool,
    pub norm_groups: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            input_size: 32,
            downsample_stages: 2,
            base_channels: 64,
            residual_blocks_per_resolution: 2,
            latent_dim: 64,
            attention_at_bottleneck: true,
            norm_groups: 8,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        let div = 1 << self.downsample_stages;
        if self.input_size == 0 || self.input_size % div != 0 {
            return Err(Error::Config(format!(
                "input size {} must be divisible by 2^{}",
                self.input_size, self.downsample_stages
            )));
        }
        if self.base_channels == 0 || self.latent_dim == 0 {
            return Err(Error::Config("channel widths must be positive".into()));
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return Err(Error::Config(format!(
                "norm groups {} must divide base channels {}",
                self.norm_groups, self.base_channels
            )));
        }
        Ok(())
    }

    /// Side length of the latent grid.
    pub fn latent_side(&self) -> usize {
        self.input_size >> self.downsample_stages
    }

    /// Channel width after `stage` downsamples.
    fn width(&self, stage: usize) -> usize {
        self.base_channels << stage
    }
}

struct ResBlock {
    n1: GroupNormLayer,
    c1: Conv2d,
    n2: GroupNormLayer,
    c2: Conv2d,
}

impl ResBlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, groups: usize, rng: &mut Rng) -> Self {
        ResBlock {
            n1: GroupNormLayer::new(ps, &format!("{name}.n1"), ch, groups),
            c1: Conv2d::new(ps, &format!("{name}.c1"), ch, ch, 3, 1, 1, rng),
            n2: GroupNormLayer::new(ps, &format!("{name}.n2"), ch, groups),
            c2: Conv2d::new(ps, &format!("{name}.c2"), ch, ch, 3, 1, 1, rng),
        }
    }

    fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let h = self.n1.forward(f, x)?;
        let h = f.g.gelu(h);
        let h = self.c1.forward(f, h)?;
        let h = self.n2.forward(f, h)?;
        let h = f.g.gelu(h);
        let h = self.c2.forward(f, h)?;
        f.g.add(x, h)
    }
}

struct AttnBlock {
    norm: GroupNormLayer,
    qkv: Linear,
    proj: Linear,
}

impl AttnBlock {
    fn new(ps: &mut ParamSet, name: &str, ch: usize, groups: usize, rng: &mut Rng) -> Self {
        AttnBlock {
            norm: GroupNormLayer::new(ps, &format!("{name}.n"), ch, groups),
            qkv: Linear::new(ps, &format!("{name}.qkv"), ch, 3 * ch, (1.0 / ch as f32).sqrt(), rng),
            // zero-initialized projection: the block starts as identity
            proj: Linear::zeros(ps, &format!("{name}.proj"), ch, ch),
        }
    }

    fn forward(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let (b, _, h, w) = f.g.value(x).dims4()?;
        let n = self.norm.forward(f, x)?;
        let rows = f.g.extract_patches(n, 1)?;
        let qkv = self.qkv.forward(f, rows)?;
        let att = f.g.attention(qkv, b, h * w, 1)?;
        let o = self.proj.forward(f, att)?;
        let folded = f.g.fold_patches(o, 1, h, w)?;
        f.g.add(x, folded)
    }
}

pub struct Codec {
    pub cfg: CodecConfig,
    enc_stem: Conv2d,
    enc_stages: Vec<(Vec<ResBlock>, Conv2d)>,
    enc_mid: Vec<ResBlock>,
    enc_attn: Option<AttnBlock>,
    enc_out_norm: GroupNormLayer,
    enc_out: Conv2d,
    dec_in: Conv2d,
    dec_attn: Option<AttnBlock>,
    dec_mid: Vec<ResBlock>,
    dec_stages: Vec<(Conv2d, Vec<ResBlock>)>,
    dec_out_norm: GroupNormLayer,
    dec_out: Conv2d,
}

impl Codec {
    pub fn new(cfg: CodecConfig, ps: &mut ParamSet, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let s = cfg.downsample_stages;
        let r = cfg.residual_blocks_per_resolution;
        let g = cfg.norm_groups;
        let bot = cfg.width(s);

        let enc_stem = Conv2d::new(ps, "enc.stem", 3, cfg.width(0), 3, 1, 1, rng);
        let mut enc_stages = Vec::new();
        for i in 0..s {
            let ch = cfg.width(i);
            let blocks = (0..r)
                .map(|j| ResBlock::new(ps, &format!("enc.s{i}.r{j}"), ch, g, rng))
                .collect();
            let down = Conv2d::new(ps, &format!("enc.s{i}.down"), ch, cfg.width(i + 1), 3, 2, 1, rng);
            enc_stages.push((blocks, down));
        }
        let enc_mid = (0..r).map(|j| ResBlock::new(ps, &format!("enc.mid.r{j}"), bot, g, rng)).collect();
        let enc_attn = cfg
            .attention_at_bottleneck
            .then(|| AttnBlock::new(ps, "enc.attn", bot, g, rng));
        let enc_out_norm = GroupNormLayer::new(ps, "enc.out.n", bot, g);
        let enc_out = Conv2d::new(ps, "enc.out.c", bot, cfg.latent_dim, 3, 1, 1, rng);

        let dec_in = Conv2d::new(ps, "dec.in", cfg.latent_dim, bot, 3, 1, 1, rng);
        let dec_attn = cfg
            .attention_at_bottleneck
            .then(|| AttnBlock::new(ps, "dec.attn", bot, g, rng));
        let dec_mid = (0..r).map(|j| ResBlock::new(ps, &format!("dec.mid.r{j}"), bot, g, rng)).collect();
        let mut dec_stages = Vec::new();
        for i in (0..s).rev() {
            let ch = cfg.width(i + 1);
            let up = Conv2d::new(ps, &format!("dec.s{i}.up"), ch, cfg.width(i), 3, 1, 1, rng);
            let blocks = (0..r)
                .map(|j| ResBlock::new(ps, &format!("dec.s{i}.r{j}"), cfg.width(i), g, rng))
                .collect();
            dec_stages.push((up, blocks));
        }
        let dec_out_norm = GroupNormLayer::new(ps, "dec.out.n", cfg.width(0), g);
        let dec_out = Conv2d::new(ps, "dec.out.c", cfg.width(0), 3, 3, 1, 1, rng);

        Ok(Codec {
            cfg,
            enc_stem,
            enc_stages,
            enc_mid,
            enc_attn,
            enc_out_norm,
            enc_out,
            dec_in,
            dec_attn,
            dec_mid,
            dec_stages,
            dec_out_norm,
            dec_out,
        })
    }

    /// [b, 3, H, W] pixels in [-1, 1] to latent maps [b, D, h, h].
    pub fn encode(&self, f: &mut Fwd, x: VarId) -> Result<VarId> {
        let (_, c, h, w) = f.g.value(x).dims4()?;
        if c != 3 || h != self.cfg.input_size || w != self.cfg.input_size {
            return Err(shape_err(
                format!("[b, 3, {0}, {0}]", self.cfg.input_size),
                f.g.value(x).shape(),
            ));
        }
        let mut h = self.enc_stem.forward(f, x)?;
        for (blocks, down) in &self.enc_stages {
            for b in blocks {
                h = b.forward(f, h)?;
            }
            h = down.forward(f, h)?;
        }
        for b in &self.enc_mid {
            h = b.forward(f, h)?;
        }
        if let Some(a) = &self.enc_attn {
            h = a.forward(f, h)?;
        }
        let h = self.enc_out_norm.forward(f, h)?;
        let h = f.g.gelu(h);
        self.enc_out.forward(f, h)
    }

    /// Latent maps [b, D, h, h] to pixels [b, 3, H, W] in [-1, 1].
    pub fn decode(&self, f: &mut Fwd, z: VarId) -> Result<VarId> {
        let (_, d, h, w) = f.g.value(z).dims4()?;
        let side = self.cfg.latent_side();
        if d != self.cfg.latent_dim || h != side || w != side {
            return Err(shape_err(
                format!("[b, {}, {side}, {side}]", self.cfg.latent_dim),
                f.g.value(z).shape(),
            ));
        }
        let mut h = self.dec_in.forward(f, z)?;
        if let Some(a) = &self.dec_attn {
            h = a.forward(f, h)?;
        }
        for b in &self.dec_mid {
            h = b.forward(f, h)?;
        }
        for (up, blocks) in &self.dec_stages {
            h = f.g.upsample2(h)?;
            h = up.forward(f, h)?;
            for b in blocks {
                h = b.forward(f, h)?;
            }
        }
        let h = self.dec_out_norm.forward(f, h)?;
        let h = f.g.gelu(h);
        let h = self.dec_out.forward(f, h)?;
        Ok(f.g.tanh(h))
    }
}

/// View one image's latent map [b, D, h, w] as a latent grid [h, w, D].
pub fn map_to_grid(maps: &Tensor, index: usize) -> Result<Tensor> {
    let (b, d, h, w) = maps.dims4()?;
    if index >= b {
        return Err(Error::IndexOutOfBounds { index, bound: b });
    }
    let src = &maps.data()[index * d * h * w..(index + 1) * d * h * w];
    let mut out = vec![0.0f32; d * h * w];
    for i in 0..h {
        for j in 0..w {
            for c in 0..d {
                out[(i * w + j) * d + c] = src[c * h * w + i * w + j];
            }
        }
    }
    Ok(Tensor::from_parts(vec![h, w, d], out))
}

/// Stack per-image latent grids [h, w, D] back into maps [b, D, h, w].
pub fn grids_to_maps(grids: &[Tensor]) -> Result<Tensor> {
    let first = grids.first().ok_or_else(|| Error::Config("no grids to stack".into()))?;
    let s = first.shape().to_vec();
    if s.len() != 3 {
        return Err(shape_err("[h, w, d]", s));
    }
    let (h, w, d) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; grids.len() * d * h * w];
    for (bi, gt) in grids.iter().enumerate() {
        if gt.shape() != [h, w, d] {
            return Err(shape_err([h, w, d], gt.shape()));
        }
        let dst = &mut out[bi * d * h * w..(bi + 1) * d * h * w];
        for i in 0..h {
            for j in 0..w {
                for c in 0..d {
                    dst[c * h * w + i * w + j] = gt.data()[(i * w + j) * d + c];
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![grids.len(), d, h, w], out))
}

/// Full quantizing round trip on frozen weights:
/// decode(lookup(assign(encode(x)))). Also returns the token grids.
pub fn reconstruct(
    codec: &Codec,
    ps: &ParamSet,
    cb: &Codebook,
    x: &Tensor,
) -> Result<(Tensor, Vec<TokenGrid>)> {
    let (b, _, _, _) = x.dims4()?;
    let mut g = Graph::new();
    let mut f = Fwd::inference(&mut g, ps);
    let xv = f.g.leaf(x.clone());
    let z = codec.encode(&mut f, xv)?;
    let zt = g.value(z).clone();
    let mut tokens = Vec::with_capacity(b);
    let mut grids = Vec::with_capacity(b);
    for bi in 0..b {
        let grid = map_to_grid(&zt, bi)?;
        let t = quantizer::assign(&grid, cb)?;
        grids.push(quantizer::lookup(&t, cb)?);
        tokens.push(t);
    }
    let zq = grids_to_maps(&grids)?;
    let mut f = Fwd::inference(&mut g, ps);
    let zqv = f.g.leaf(zq);
    let xhat = codec.decode(&mut f, zqv)?;
    Ok((g.value(xhat).clone(), tokens))
}

/// Encode images on frozen weights and return the latent maps.
pub fn encode_images(codec: &Codec, ps: &ParamSet, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut f = Fwd::inference(&mut g, ps);
    let xv = f.g.leaf(x.clone());
    let z = codec.encode(&mut f, xv)?;
    Ok(g.value(z).clone())
}

/// Tokenize images on frozen weights.
pub fn tokenize_images(codec: &Codec, ps: &ParamSet, cb: &Codebook, x: &Tensor) -> Result<Vec<TokenGrid>> {
    let maps = encode_images(codec, ps, x)?;
    let (b, _, _, _) = maps.dims4()?;
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let grid = map_to_grid(&maps, bi)?;
        out.push(quantizer::assign(&grid, cb)?);
    }
    Ok(out)
}
