//! Masked image modeling over the tokenizer's discrete vocabulary:
//! block-wise masks, mask-token corruption, a small transformer, and the
//! masked-position cross-entropy.

use crate::error::{shape_err, Error, Result};
use crate::nn::{Fwd, LayerNormLayer, Linear, ParamId, ParamSet};
use crate::numerics::graph::{Graph, VarId};
use crate::numerics::optim::{warmup_cosine, Adam, AdamConfig};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;
use crate::quantizer::TokenGrid;

pub const ASPECT_LO: f32 = 0.3;
pub const ASPECT_HI: f32 = 3.33;

#[derive(Debug, Clone)]
pub struct MaskSpec {
    pub h: usize,
    pub w: usize,
    pub masked: Vec<bool>,
    /// Generating rectangles as (top, left, height, width); `masked` is
    /// exactly their union.
    pub blocks: Vec<(usize, usize, usize, usize)>,
}

impl MaskSpec {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Grid size the blocks must justify: every block in bounds, area at
    /// least `min_block`, aspect within the sampler's band, and the union
    /// of the blocks equal to the masked set.
    pub fn verify_decomposition(&self) -> Result<()> {
        let min_block = min_block_for(self.h, self.w);
        let mut union = vec![false; self.len()];
        for &(top, left, bh, bw) in &self.blocks {
            if top + bh > self.h || left + bw > self.w || bh == 0 || bw == 0 {
                return Err(Error::Config(format!(
                    "block ({top},{left},{bh},{bw}) leaves the {}x{} grid",
                    self.h, self.w
                )));
            }
            if bh * bw < min_block {
                return Err(Error::Config(format!("block area {} below {min_block}", bh * bw)));
            }
            let aspect = bw as f32 / bh as f32;
            if self.len() >= 16 && !(ASPECT_LO..=ASPECT_HI).contains(&aspect) {
                return Err(Error::Config(format!("block aspect {aspect} outside band")));
            }
            for i in top..top + bh {
                for j in left..left + bw {
                    union[i * self.w + j] = true;
                }
            }
        }
        if union != self.masked {
            return Err(Error::Config("masked set is not the union of its blocks".into()));
        }
        Ok(())
    }
}

fn min_block_for(h: usize, w: usize) -> usize {
    if h * w >= 16 && h.min(w) >= 2 {
        4
    } else {
        1
    }
}

/// Block-wise mask: rectangles of area at least `min_block` and bounded
/// aspect accumulate until the requested ratio is met; the final count
/// lands within +-2 of round(ratio * N).
pub fn blockwise_mask(h: usize, w: usize, ratio: f32, rng: &mut Rng) -> Result<MaskSpec> {
    if h == 0 || w == 0 {
        return Err(Error::Config("mask grid must be non-empty".into()));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("mask ratio {ratio} outside [0, 1]")));
    }
    let n = h * w;
    let target = (ratio * n as f32).round() as usize;
    let mut spec = MaskSpec { h, w, masked: vec![false; n], blocks: Vec::new() };
    if target == 0 {
        return Ok(spec);
    }
    if target == n {
        spec.masked = vec![true; n];
        spec.blocks.push((0, 0, h, w));
        return Ok(spec);
    }
    let min_block = min_block_for(h, w);
    if target < min_block {
        // a single minimum block (4 cells as 2x2) or nothing, whichever
        // rounds closer; both stay within the +-2 band
        if 2 * target > min_block {
            let top = rng.below(h - 1);
            let left = rng.below(w - 1);
            for i in top..top + 2 {
                for j in left..left + 2 {
                    spec.masked[i * w + j] = true;
                }
            }
            spec.blocks.push((top, left, 2, 2));
        }
        return Ok(spec);
    }
    let mut count = 0usize;
    let mut attempts = 0usize;
    while count < target {
        attempts += 1;
        if attempts > 10_000 {
            return Err(Error::Config(format!(
                "mask sampler stalled at {count}/{target} on a {h}x{w} grid"
            )));
        }
        let remaining = target - count;
        let area_hi = remaining.max(min_block) + 1;
        let area = min_block + rng.below(area_hi - min_block + 1);
        let aspect = (rng.range_f32(ASPECT_LO.ln(), ASPECT_HI.ln())).exp();
        let bh = ((area as f32 / aspect).sqrt().round() as usize).clamp(1, h);
        let bw = ((area as f32 * aspect).sqrt().round() as usize).clamp(1, w);
        if bh * bw < min_block {
            continue;
        }
        if n >= 16 {
            let a = bw as f32 / bh as f32;
            if !(ASPECT_LO..=ASPECT_HI).contains(&a) {
                continue;
            }
        }
        let top = rng.below(h - bh + 1);
        let left = rng.below(w - bw + 1);
        let mut fresh = 0usize;
        for i in top..top + bh {
            for j in left..left + bw {
                if !spec.masked[i * w + j] {
                    fresh += 1;
                }
            }
        }
        if fresh == 0 || count + fresh > target + 1 {
            continue;
        }
        for i in top..top + bh {
            for j in left..left + bw {
                spec.masked[i * w + j] = true;
            }
        }
        spec.blocks.push((top, left, bh, bw));
        count += fresh;
    }
    Ok(spec)
}

/// Replace masked rows of [n, width] embeddings with the mask token.
pub fn corrupt(g: &mut Graph, embeddings: VarId, token: VarId, spec: &MaskSpec) -> Result<VarId> {
    let (r, _) = g.value(embeddings).dims2()?;
    if r != spec.len() {
        return Err(shape_err([spec.len()], [r]));
    }
    g.corrupt_rows(embeddings, token, &spec.masked)
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MIMConfig {
    pub input_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub vocab: usize,
    pub mask_ratio: f32,
    pub stochastic_depth_rate: f32,
}

impl Default for MIMConfig {
    fn default() -> Self {
        MIMConfig {
            input_size: 32,
            patch_size: 4,
            depth: 6,
            width: 256,
            heads: 4,
            vocab: 512,
            mask_ratio: 0.4,
            stochastic_depth_rate: 0.1,
        }
    }
}

impl MIMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "patch size {} must divide input size {}",
                self.patch_size, self.input_size
            )));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config("width must be a positive multiple of heads".into()));
        }
        if self.depth == 0 || self.vocab == 0 {
            return Err(Error::Config("depth and vocabulary must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) || !(0.0..1.0).contains(&self.stochastic_depth_rate) {
            return Err(Error::Config("rates must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn tokens_per_image(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

struct Block {
    n1: LayerNormLayer,
    qkv: Linear,
    proj: Linear,
    n2: LayerNormLayer,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(ps: &mut ParamSet, name: &str, width: usize, rng: &mut Rng) -> Self {
        let std = (1.0 / width as f32).sqrt();
        Block {
            n1: LayerNormLayer::new(ps, &format!("{name}.n1"), width),
            qkv: Linear::new(ps, &format!("{name}.qkv"), width, 3 * width, std, rng),
            proj: Linear::new(ps, &format!("{name}.proj"), width, width, std, rng),
            n2: LayerNormLayer::new(ps, &format!("{name}.n2"), width),
            fc1: Linear::new(ps, &format!("{name}.fc1"), width, 4 * width, std, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), 4 * width, width, (1.0 / (4.0 * width as f32)).sqrt(), rng),
        }
    }
}

pub struct MIMModel {
    pub cfg: MIMConfig,
    pub ps: ParamSet,
    patch_embed: Linear,
    pos: ParamId,
    mask_token: ParamId,
    blocks: Vec<Block>,
    final_norm: LayerNormLayer,
    head: Linear,
}

impl MIMModel {
    pub fn new(cfg: MIMConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut ps = ParamSet::new();
        let n = cfg.tokens_per_image();
        let pdim = 3 * cfg.patch_size * cfg.patch_size;
        let patch_embed = Linear::new(&mut ps, "embed", pdim, cfg.width, (1.0 / pdim as f32).sqrt(), rng);
        let pos = ps.add(
            "pos",
            Tensor::from_parts(vec![n, cfg.width], (0..n * cfg.width).map(|_| rng.normal_scaled(0.02)).collect()),
            false,
        );
        let mask_token = ps.add(
            "mask_token",
            Tensor::from_parts(vec![cfg.width], (0..cfg.width).map(|_| rng.normal_scaled(0.02)).collect()),
            false,
        );
        let blocks = (0..cfg.depth).map(|i| Block::new(&mut ps, &format!("b{i}"), cfg.width, rng)).collect();
        let final_norm = LayerNormLayer::new(&mut ps, "out.n", cfg.width);
        // zero-init head: uniform logits at step 0, so the loss starts at ln K
        let head = Linear::zeros(&mut ps, "head", cfg.width, cfg.vocab);
        Ok(MIMModel { cfg, ps, patch_embed, pos, mask_token, blocks, final_norm, head })
    }

    /// Transformer trunk on [b, 3, H, W] images. Masks corrupt the patch
    /// embeddings (one spec per image); `drop_rng` enables stochastic depth.
    /// Returns [b*N, width] hidden rows.
    pub fn encode(
        &self,
        f: &mut Fwd,
        images: VarId,
        masks: Option<&[MaskSpec]>,
        mut drop_rng: Option<&mut Rng>,
    ) -> Result<VarId> {
        let (b, c, hp, wp) = f.g.value(images).dims4()?;
        if c != 3 || hp != self.cfg.input_size || wp != self.cfg.input_size {
            return Err(shape_err(
                format!("[b, 3, {0}, {0}]", self.cfg.input_size),
                f.g.value(images).shape(),
            ));
        }
        let n = self.cfg.tokens_per_image();
        let patches = f.g.extract_patches(images, self.cfg.patch_size)?;
        let mut hcur = self.patch_embed.forward(f, patches)?;
        if let Some(specs) = masks {
            if specs.len() != b {
                return Err(shape_err([b], [specs.len()]));
            }
            let mut full = Vec::with_capacity(b * n);
            for s in specs {
                if s.len() != n {
                    return Err(shape_err([n], [s.len()]));
                }
                full.extend_from_slice(&s.masked);
            }
            let tok = f.param(self.mask_token);
            hcur = f.g.corrupt_rows(hcur, tok, &full)?;
        }
        let pos = f.param(self.pos);
        hcur = f.g.add_tiled(hcur, pos)?;

        let rate = self.cfg.stochastic_depth_rate;
        for blk in &self.blocks {
            let a = blk.n1.forward(f, hcur)?;
            let qkv = blk.qkv.forward(f, a)?;
            let att = f.g.attention(qkv, b, n, self.cfg.heads)?;
            let mut branch = blk.proj.forward(f, att)?;
            branch = self.residual_drop(f, branch, b, n, rate, &mut drop_rng)?;
            hcur = f.g.add(hcur, branch)?;

            let m = blk.n2.forward(f, hcur)?;
            let m = blk.fc1.forward(f, m)?;
            let m = f.g.gelu(m);
            let mut branch = blk.fc2.forward(f, m)?;
            branch = self.residual_drop(f, branch, b, n, rate, &mut drop_rng)?;
            hcur = f.g.add(hcur, branch)?;
        }
        self.final_norm.forward(f, hcur)
    }

    /// Per-sample stochastic depth: a dropped sample's branch rows go to
    /// zero, kept rows are rescaled by 1/(1-rate).
    fn residual_drop(
        &self,
        f: &mut Fwd,
        branch: VarId,
        b: usize,
        n: usize,
        rate: f32,
        drop_rng: &mut Option<&mut Rng>,
    ) -> Result<VarId> {
        let Some(rng) = drop_rng else { return Ok(branch) };
        if rate == 0.0 {
            return Ok(branch);
        }
        let keep = 1.0 / (1.0 - rate);
        let mut factors = Vec::with_capacity(b * n);
        for _ in 0..b {
            let factor = if rng.coin(rate) { 0.0 } else { keep };
            factors.extend(std::iter::repeat(factor).take(n));
        }
        f.g.scale_rows(branch, &factors)
    }

    /// Vocabulary logits [b*N, K].
    pub fn forward(
        &self,
        f: &mut Fwd,
        images: VarId,
        masks: Option<&[MaskSpec]>,
        drop_rng: Option<&mut Rng>,
    ) -> Result<VarId> {
        let hidden = self.encode(f, images, masks, drop_rng)?;
        self.head.forward(f, hidden)
    }
}

/// Masked-position cross-entropy against tokenizer targets, in the graph.
pub fn mim_loss_graph(
    g: &mut Graph,
    logits: VarId,
    targets: &[&TokenGrid],
    specs: &[MaskSpec],
) -> Result<VarId> {
    if targets.len() != specs.len() {
        return Err(shape_err([targets.len()], [specs.len()]));
    }
    let mut idx = Vec::new();
    let mut mask = Vec::new();
    for (t, s) in targets.iter().zip(specs) {
        if t.h != s.h || t.w != s.w {
            return Err(Error::Config(format!(
                "target grid {}x{} does not match mask grid {}x{}",
                t.h, t.w, s.h, s.w
            )));
        }
        idx.extend(t.indices.iter().map(|&v| v as usize));
        mask.extend_from_slice(&s.masked);
    }
    g.masked_cross_entropy(logits, &idx, &mask)
}

/// Frozen evaluation of the masked cross-entropy.
pub fn mim_loss(logits: &Tensor, targets: &TokenGrid, spec: &MaskSpec) -> Result<f32> {
    let mut g = Graph::new();
    let lv = g.leaf(logits.clone());
    let loss = mim_loss_graph(&mut g, lv, &[targets], std::slice::from_ref(spec))?;
    Ok(g.value(loss).item())
}

pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub warmup: usize,
    pub weight_decay: f32,
    pub log_every: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions { steps: 400, batch: 64, lr: 1.5e-3, warmup: 40, weight_decay: 0.05, log_every: 10 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub lr: f32,
    pub loss: f32,
}

/// Pre-training loop over precomputed token targets. Returns the per-step
/// loss curve; the caller owns checkpointing.
pub fn pretrain(
    model: &mut MIMModel,
    images: &Tensor,
    targets: &[TokenGrid],
    opts: &PretrainOptions,
    rng: &mut Rng,
) -> Result<Vec<PretrainRecord>> {
    let (nimg, _, _, _) = images.dims4()?;
    if nimg == 0 {
        return Err(Error::Config("pre-training needs a non-empty dataset".into()));
    }
    if targets.len() != nimg {
        return Err(Error::Config(format!(
            "{} token grids for {nimg} images",
            targets.len()
        )));
    }
    let side = model.cfg.grid_side();
    for t in targets {
        if t.h != side || t.w != side {
            return Err(Error::Config(format!(
                "token grid {}x{} does not match the model's {side}x{side} patch grid",
                t.h, t.w
            )));
        }
        if t.indices.iter().any(|&v| v as usize >= model.cfg.vocab) {
            return Err(Error::Config("token index outside the model vocabulary".into()));
        }
    }
    let img_len = 3 * model.cfg.input_size * model.cfg.input_size;
    let b = opts.batch.min(nimg);
    let mut opt = Adam::new(AdamConfig::new(opts.lr, 0.9, 0.999, opts.weight_decay));
    let mut out = Vec::new();
    for step in 0..opts.steps {
        let lr = warmup_cosine(step, opts.steps, opts.warmup, opts.lr, 0.0);
        let picks = rng.sample_distinct(nimg, b);
        let mut batch = vec![0.0f32; b * img_len];
        let mut specs = Vec::with_capacity(b);
        let mut tgts: Vec<&TokenGrid> = Vec::with_capacity(b);
        for (bi, &i) in picks.iter().enumerate() {
            batch[bi * img_len..(bi + 1) * img_len]
                .copy_from_slice(&images.data()[i * img_len..(i + 1) * img_len]);
            let mut spec = blockwise_mask(side, side, model.cfg.mask_ratio, rng)?;
            if spec.is_empty() {
                // a zero-ratio config still needs a defined loss
                spec.masked[0] = true;
                spec.blocks.push((0, 0, 1, 1));
            }
            specs.push(spec);
            tgts.push(&targets[i]);
        }
        let mut g = Graph::new();
        let sz = model.cfg.input_size;
        let mut f = Fwd::new(&mut g, &model.ps);
        let xv = f.g.leaf(Tensor::from_parts(vec![b, 3, sz, sz], batch));
        let mut drop_rng = rng.child(0x5d);
        let logits = model.forward(&mut f, xv, Some(&specs), Some(&mut drop_rng))?;
        let loss = mim_loss_graph(f.g, logits, &tgts, &specs)?;
        let bindings = f.bindings();
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let mut grads = g.backward(loss)?;
        opt.begin_step();
        for (pid, vid) in bindings {
            if let Some(gt) = grads.take(vid) {
                let decay = model.ps.decays(pid);
                opt.update(pid.index(), model.ps.value_mut(pid).data_mut(), gt.data(), lr, decay);
            }
        }
        if step % opts.log_every == 0 || step + 1 == opts.steps {
            out.push(PretrainRecord { step, lr, loss: lv });
        }
    }
    Ok(out)
}
