//! Codeword-semantics measurements: a linear probe on pooled codewords,
//! classification accuracy over reconstructions, per-codeword patch mosaics,
//! and linear-probe / fine-tune evaluation of a pretrained masked-token
//! model against a scratch baseline.

use std::path::Path;

use serde::Serialize;

use crate::codec::{self, Codec};
use crate::error::{Error, Result};
use crate::mim::MIMModel;
use crate::nn::{Conv2d, Fwd, Linear, ParamSet};
use crate::numerics::graph::Graph;
use crate::numerics::optim::{Adam, AdamConfig};
use crate::numerics::rng::{seeded_rng, Rng};
use crate::numerics::tensor::Tensor;
use crate::quantizer::Codebook;

#[derive(Clone, Debug, Serialize)]
pub struct ClassAccuracy {
    pub class: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f32,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeFingerprint {
    pub tokenizer: String,
    pub dataset: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub accuracy: f32,
    pub per_class: Vec<ClassAccuracy>,
    pub fingerprint: ProbeFingerprint,
}

impl ProbeReport {
    /// Overall accuracy must equal the class-count-weighted mean of the
    /// per-class accuracies.
    pub fn is_consistent(&self, tol: f32) -> bool {
        let total: usize = self.per_class.iter().map(|c| c.total).sum();
        if total == 0 {
            return false;
        }
        let weighted: f64 = self
            .per_class
            .iter()
            .map(|c| c.accuracy as f64 * c.total as f64)
            .sum::<f64>()
            / total as f64;
        (weighted as f32 - self.accuracy).abs() <= tol
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Deterministic 80/20 split of 0..n.
pub fn split_indices(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = seeded_rng(seed ^ 0x5eed_5117);
    let perm = rng.permutation(n);
    let test_len = (n / 5).max(1).min(n.saturating_sub(1));
    let test = perm[..test_len].to_vec();
    let train = perm[test_len..].to_vec();
    (train, test)
}

const PROBE_TOL: f64 = 1e-6;
const PROBE_MAX_ITERS: usize = 600;

/// Multinomial logistic regression, full batch, f64, trained to a loss
/// improvement below `PROBE_TOL` with backtracking line search.
struct Probe {
    classes: usize,
    d: usize,
    w: Vec<f64>,
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl Probe {
    fn scores(&self, feat: &[f32]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0f64; self.classes];
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.w[c * (d + 1)..(c + 1) * (d + 1)];
            let mut s = row[d];
            for j in 0..d {
                s += row[j] * (feat[j] as f64 - self.mean[j]) * self.inv_std[j];
            }
            *o = s;
        }
        out
    }

    fn predict(&self, feat: &[f32]) -> usize {
        let s = self.scores(feat);
        let mut best = 0;
        for c in 1..self.classes {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }
}

fn fit_probe(features: &Tensor, labels: &[u8], train: &[usize], classes: usize) -> Result<Probe> {
    let (_, d) = features.dims2()?;
    let fd = features.data();
    let n = train.len();

    let mut mean = vec![0.0f64; d];
    for &i in train {
        for j in 0..d {
            mean[j] += fd[i * d + j] as f64;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0f64; d];
    for &i in train {
        for j in 0..d {
            let t = fd[i * d + j] as f64 - mean[j];
            var[j] += t * t;
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v / n as f64).sqrt().max(1e-8)).collect();

    // standardized design matrix with a trailing bias column
    let cols = d + 1;
    let mut x = vec![0.0f64; n * cols];
    for (r, &i) in train.iter().enumerate() {
        for j in 0..d {
            x[r * cols + j] = (fd[i * d + j] as f64 - mean[j]) * inv_std[j];
        }
        x[r * cols + d] = 1.0;
    }
    let y: Vec<usize> = train.iter().map(|&i| labels[i] as usize).collect();

    let loss_grad = |w: &[f64], want_grad: bool| -> (f64, Vec<f64>) {
        let mut grad = vec![0.0f64; if want_grad { classes * cols } else { 0 }];
        let mut loss = 0.0f64;
        let mut logits = vec![0.0f64; classes];
        for r in 0..n {
            let xr = &x[r * cols..(r + 1) * cols];
            for c in 0..classes {
                let wr = &w[c * cols..(c + 1) * cols];
                logits[c] = wr.iter().zip(xr).map(|(a, b)| a * b).sum();
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0f64;
            for l in &mut logits {
                *l = (*l - mx).exp();
                z += *l;
            }
            loss -= (logits[y[r]] / z).ln();
            if want_grad {
                for c in 0..classes {
                    let p = logits[c] / z - if c == y[r] { 1.0 } else { 0.0 };
                    let gc = &mut grad[c * cols..(c + 1) * cols];
                    for (g, &xv) in gc.iter_mut().zip(xr) {
                        *g += p * xv;
                    }
                }
            }
        }
        loss /= n as f64;
        for g in &mut grad {
            *g /= n as f64;
        }
        (loss, grad)
    };

    let mut w = vec![0.0f64; classes * cols];
    let mut lr = 1.0f64;
    let (mut prev, mut grad) = loss_grad(&w, true);
    for _ in 0..PROBE_MAX_ITERS {
        let mut accepted = false;
        while lr > 1e-12 {
            let cand: Vec<f64> = w.iter().zip(&grad).map(|(wv, gv)| wv - lr * gv).collect();
            let (l, _) = loss_grad(&cand, false);
            if l <= prev {
                let improvement = prev - l;
                w = cand;
                prev = l;
                lr = (lr * 1.5).min(16.0);
                accepted = improvement >= PROBE_TOL;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            break;
        }
        grad = loss_grad(&w, true).1;
    }
    Ok(Probe { classes, d, w, mean, inv_std })
}

/// Train a linear classifier on feature rows and report held-out accuracy
/// with per-class breakdown. The train/test split is fixed by the seed.
pub fn linear_probe(
    features: &Tensor,
    labels: &[u8],
    seed: u64,
    fingerprint: ProbeFingerprint,
) -> Result<ProbeReport> {
    let (n, _) = features.dims2()?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {} feature rows", labels.len(), n)));
    }
    if n < 5 {
        return Err(Error::Config("probe needs at least 5 examples".into()));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    let distinct = {
        let mut seen = vec![false; classes];
        for &l in labels {
            seen[l as usize] = true;
        }
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Config("probe needs at least two classes in the dataset".into()));
    }
    let (train, test) = split_indices(n, seed);
    let probe = fit_probe(features, labels, &train, classes)?;

    let d = probe.d;
    let mut per = vec![(0usize, 0usize); classes];
    for &i in &test {
        let pred = probe.predict(&features.data()[i * d..(i + 1) * d]);
        let truth = labels[i] as usize;
        per[truth].1 += 1;
        if pred == truth {
            per[truth].0 += 1;
        }
    }
    let correct: usize = per.iter().map(|p| p.0).sum();
    let per_class = per
        .into_iter()
        .enumerate()
        .map(|(class, (c, t))| ClassAccuracy {
            class,
            correct: c,
            total: t,
            accuracy: if t == 0 { 0.0 } else { c as f32 / t as f32 },
        })
        .collect();
    Ok(ProbeReport { accuracy: correct as f32 / test.len() as f32, per_class, fingerprint })
}

/// Mean z_q vector per image: encode, quantize, average over the grid.
pub fn pooled_codewords(
    codec: &Codec,
    ps: &ParamSet,
    cb: &Codebook,
    images: &Tensor,
    batch: usize,
) -> Result<Tensor> {
    let (n, _, _, _) = images.dims4()?;
    let d = cb.dim();
    let mut out = vec![0.0f32; n * d];
    let stride = images.numel() / n.max(1);
    for start in (0..n).step_by(batch.max(1)) {
        let stop = (start + batch.max(1)).min(n);
        let chunk = Tensor::from_parts(
            vec![stop - start, 3, images.shape()[2], images.shape()[3]],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        let grids = codec::tokenize_images(codec, ps, cb, &chunk)?;
        for (bi, grid) in grids.iter().enumerate() {
            let zq = crate::quantizer::lookup(grid, cb)?;
            let hw = (grid.h * grid.w) as f64;
            let row = &mut out[(start + bi) * d..(start + bi + 1) * d];
            for p in 0..grid.h * grid.w {
                for j in 0..d {
                    row[j] += (zq.data()[p * d + j] as f64 / hw) as f32;
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![n, d], out))
}

/// Codeword probe: average-pooled quantized latents feed a linear
/// classifier; the tokenizer itself is never touched.
pub fn linear_probe_codewords(
    codec: &Codec,
    ps: &ParamSet,
    cb: &Codebook,
    images: &Tensor,
    labels: &[u8],
    seed: u64,
    tokenizer: &str,
    dataset: &str,
) -> Result<ProbeReport> {
    let features = pooled_codewords(codec, ps, cb, images, 64)?;
    linear_probe(
        &features,
        labels,
        seed,
        ProbeFingerprint { tokenizer: tokenizer.to_string(), dataset: dataset.to_string(), seed },
    )
}

/// Small conv classifier used as the frozen judge of reconstructions.
pub struct SmallClassifier {
    pub ps: ParamSet,
    pub input_size: usize,
    pub classes: usize,
    convs: Vec<Conv2d>,
    head: Linear,
}

impl SmallClassifier {
    /// Stride-2 stages halve the map until it reaches 4x4, so capacity
    /// follows the input resolution.
    pub fn new(input_size: usize, classes: usize, rng: &mut Rng) -> Self {
        let mut ps = ParamSet::new();
        let mut convs = Vec::new();
        let mut cin = 3;
        let mut cout = 16;
        let mut side = input_size;
        let mut i = 0;
        convs.push(Conv2d::new(&mut ps, "c0", cin, cout, 3, 1, 1, rng));
        cin = cout;
        while side > 4 {
            i += 1;
            cout = (cout * 2).min(64);
            convs.push(Conv2d::new(&mut ps, &format!("c{i}"), cin, cout, 3, 2, 1, rng));
            cin = cout;
            side /= 2;
        }
        let head = Linear::zeros(&mut ps, "head", cin, classes);
        SmallClassifier { ps, input_size, classes, convs, head }
    }

    pub fn logits(&self, f: &mut Fwd, x: crate::numerics::graph::VarId) -> Result<crate::numerics::graph::VarId> {
        let (_, c, h, w) = f.g.value(x).dims4()?;
        if c != 3 || h != self.input_size || w != self.input_size {
            return Err(crate::error::shape_err(
                format!("[b, 3, {0}, {0}]", self.input_size),
                f.g.value(x).shape(),
            ));
        }
        let mut hcur = x;
        for conv in &self.convs {
            hcur = conv.forward(f, hcur)?;
            hcur = f.g.relu(hcur);
        }
        let pooled = f.g.spatial_mean(hcur)?;
        self.head.forward(f, pooled)
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        let mut g = Graph::new();
        let mut f = Fwd::inference(&mut g, &self.ps);
        let xv = f.g.leaf(images.clone());
        let logits = self.logits(&mut f, xv)?;
        let lt = g.value(logits);
        let (b, k) = lt.dims2()?;
        let mut out = Vec::with_capacity(b);
        for r in 0..b {
            let row = &lt.data()[r * k..(r + 1) * k];
            let mut best = 0usize;
            for c in 1..k {
                if row[c] > row[best] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
        Ok(out)
    }
}

pub struct ClassifierTrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
}

impl Default for ClassifierTrainOptions {
    fn default() -> Self {
        ClassifierTrainOptions { steps: 300, batch: 32, lr: 2e-3 }
    }
}

pub fn train_classifier(
    images: &Tensor,
    labels: &[u8],
    classes: usize,
    opts: &ClassifierTrainOptions,
    rng: &mut Rng,
) -> Result<SmallClassifier> {
    let (n, _, h, _) = images.dims4()?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {} images", labels.len(), n)));
    }
    let mut model = SmallClassifier::new(h, classes, rng);
    let mut opt = Adam::new(AdamConfig::new(opts.lr, 0.9, 0.999, 1e-4));
    let stride = images.numel() / n;
    for step in 0..opts.steps {
        let picks = rng.sample_distinct(n, opts.batch.min(n));
        let mut data = Vec::with_capacity(picks.len() * stride);
        let mut targets = Vec::with_capacity(picks.len());
        for &i in &picks {
            data.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
            targets.push(labels[i] as usize);
        }
        let x = Tensor::from_parts(vec![picks.len(), 3, h, h], data);
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &model.ps);
        let xv = f.g.leaf(x);
        let logits = model.logits(&mut f, xv)?;
        let mask = vec![true; picks.len()];
        let loss = f.g.masked_cross_entropy(logits, &targets, &mask)?;
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
                opt.update(pid.index(), model.ps.value_mut(pid).data_mut(), gt.data(), opts.lr, decay);
            }
        }
    }
    Ok(model)
}

pub fn classifier_accuracy(model: &SmallClassifier, images: &Tensor, labels: &[u8]) -> Result<f32> {
    let preds = predict_batched(model, images)?;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f32 / labels.len() as f32)
}

fn predict_batched(model: &SmallClassifier, images: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = images.dims4()?;
    let stride = c * h * w;
    let mut out = Vec::with_capacity(n);
    for start in (0..n).step_by(64) {
        let stop = (start + 64).min(n);
        let chunk = Tensor::from_parts(
            vec![stop - start, c, h, w],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        out.extend(model.predict(&chunk)?);
    }
    Ok(out)
}

/// Accuracy of a frozen classifier on `recon(x)` for every image. The
/// reconstruction function stands in for the tokenizer round trip, so
/// degenerate baselines (identity, constant) plug in directly.
pub fn classify_reconstructions(
    model: &SmallClassifier,
    images: &Tensor,
    labels: &[u8],
    recon: &dyn Fn(&Tensor) -> Result<Tensor>,
) -> Result<f32> {
    let (n, c, h, w) = images.dims4()?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {} images", labels.len(), n)));
    }
    let stride = c * h * w;
    let mut correct = 0usize;
    for start in (0..n).step_by(32) {
        let stop = (start + 32).min(n);
        let chunk = Tensor::from_parts(
            vec![stop - start, c, h, w],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        let xhat = recon(&chunk)?;
        let preds = model.predict(&xhat)?;
        correct += preds
            .iter()
            .zip(&labels[start..stop])
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f32 / n as f32)
}

/// Tokenizer round trip as a reconstruction function.
pub fn reconstruction_fn<'a>(
    codec: &'a Codec,
    ps: &'a ParamSet,
    cb: &'a Codebook,
) -> impl Fn(&Tensor) -> Result<Tensor> + 'a {
    move |x: &Tensor| Ok(codec::reconstruct(codec, ps, cb, x)?.0)
}

#[derive(Clone, Debug, Serialize)]
pub struct MosaicPatch {
    pub image: String,
    pub mosaic_row: usize,
    pub mosaic_col: usize,
    pub token_y: usize,
    pub token_x: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct MosaicReport {
    pub codeword: usize,
    pub occurrences: usize,
    pub emitted: usize,
    pub patches: Vec<MosaicPatch>,
}

/// Crop up to `n` pixel patches whose assigned token equals `k`, re-verify
/// each, and write a PNG grid plus a JSON sidecar naming every patch.
pub fn codeword_mosaic(
    codec: &Codec,
    ps: &ParamSet,
    cb: &Codebook,
    images: &Tensor,
    ids: &[String],
    k: usize,
    n: usize,
    png_path: &Path,
    json_path: &Path,
) -> Result<MosaicReport> {
    if k >= cb.k() {
        return Err(Error::IndexOutOfBounds { index: k, bound: cb.k() });
    }
    let (count, c, h, w) = images.dims4()?;
    if ids.len() != count {
        return Err(Error::Config(format!("{} ids for {} images", ids.len(), count)));
    }
    let stride = c * h * w;
    let mut histogram = vec![0usize; cb.k()];
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    let mut grids_cache: Vec<Option<crate::quantizer::TokenGrid>> = vec![None; count];
    for start in (0..count).step_by(32) {
        let stop = (start + 32).min(count);
        let chunk = Tensor::from_parts(
            vec![stop - start, c, h, w],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        for (bi, grid) in codec::tokenize_images(codec, ps, cb, &chunk)?.into_iter().enumerate() {
            for (p, &t) in grid.indices.iter().enumerate() {
                histogram[t as usize] += 1;
                if t as usize == k {
                    hits.push((start + bi, p / grid.w, p % grid.w));
                }
            }
            grids_cache[start + bi] = Some(grid);
        }
    }
    let occurrences = histogram[k];
    if occurrences == 0 {
        let used = histogram.iter().filter(|&&c| c > 0).count();
        let (top, top_hits) = histogram
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, &c)| (i, c))
            .unwrap_or((0, 0));
        return Err(Error::EmptyCodeword {
            codeword: k,
            hint: format!(
                "{used} of {} codewords appear in this dataset; most frequent is {top} with {top_hits} hits",
                cb.k()
            ),
        });
    }

    hits.truncate(n);
    let side = codec.cfg.latent_side();
    let cell = codec.cfg.input_size / side;
    let cols = (hits.len() as f64).sqrt().ceil() as usize;
    let rows = (hits.len() + cols - 1) / cols;

    let mut patches = Vec::with_capacity(hits.len());
    let gap = 1u32;
    let mut img = image::RgbImage::from_pixel(
        (cols * cell + (cols + 1) * gap as usize) as u32,
        (rows * cell + (rows + 1) * gap as usize) as u32,
        image::Rgb([255, 255, 255]),
    );
    for (idx, &(i, ty, tx)) in hits.iter().enumerate() {
        // the defining self-check: this grid cell must still map to k
        let grid = grids_cache[i].as_ref().expect("grid cached");
        if grid.indices[ty * grid.w + tx] as usize != k {
            return Err(Error::Config(format!(
                "codeword self-check failed at image {i} cell ({ty}, {tx})"
            )));
        }
        let (mr, mc) = (idx / cols, idx % cols);
        let ox = mc * cell + (mc + 1) * gap as usize;
        let oy = mr * cell + (mr + 1) * gap as usize;
        for py in 0..cell {
            for px in 0..cell {
                let sy = ty * cell + py;
                let sx = tx * cell + px;
                let val = |ch: usize| {
                    let v = images.data()[i * stride + ch * h * w + sy * w + sx];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                img.put_pixel((ox + px) as u32, (oy + py) as u32, image::Rgb([val(0), val(1), val(2)]));
            }
        }
        patches.push(MosaicPatch {
            image: ids[i].clone(),
            mosaic_row: mr,
            mosaic_col: mc,
            token_y: ty,
            token_x: tx,
        });
    }
    img.save(png_path)
        .map_err(|e| Error::Ingestion { entry: png_path.display().to_string(), reason: e.to_string() })?;
    let report = MosaicReport { codeword: k, occurrences, emitted: hits.len(), patches };
    std::fs::write(json_path, serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    Ok(report)
}

/// Token histogram over a dataset, the oracle for mosaic occurrence counts.
pub fn token_histogram(
    codec: &Codec,
    ps: &ParamSet,
    cb: &Codebook,
    images: &Tensor,
) -> Result<Vec<usize>> {
    let (count, c, h, w) = images.dims4()?;
    let stride = c * h * w;
    let mut histogram = vec![0usize; cb.k()];
    for start in (0..count).step_by(32) {
        let stop = (start + 32).min(count);
        let chunk = Tensor::from_parts(
            vec![stop - start, c, h, w],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        for grid in codec::tokenize_images(codec, ps, cb, &chunk)? {
            for &t in &grid.indices {
                histogram[t as usize] += 1;
            }
        }
    }
    Ok(histogram)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalMode {
    LinearProbe,
    FineTune,
}

pub struct FineTuneOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub weight_decay: f32,
    /// Per-layer learning-rate multiplier: block i trains at
    /// `llrd^(depth-i)`, the patch embedding below all blocks.
    pub llrd: f32,
    pub warmup: usize,
}

impl Default for FineTuneOptions {
    fn default() -> Self {
        FineTuneOptions { steps: 200, batch: 32, lr: 1e-3, weight_decay: 0.05, llrd: 0.65, warmup: 10 }
    }
}

fn llrd_scale(name: &str, depth: usize, llrd: f32) -> f32 {
    if let Some(rest) = name.strip_prefix('b') {
        if let Some(dot) = rest.find('.') {
            if let Ok(i) = rest[..dot].parse::<usize>() {
                return llrd.powi((depth.saturating_sub(i)) as i32);
            }
        }
    }
    if name.starts_with("out.n") || name.starts_with("head") {
        1.0
    } else {
        llrd.powi(depth as i32 + 1)
    }
}

/// Mean trunk feature per image on frozen weights: [n, width].
pub fn mim_features(model: &MIMModel, images: &Tensor, batch: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    let stride = c * h * w;
    let tokens = model.cfg.tokens_per_image();
    let mut out: Vec<f32> = Vec::with_capacity(n * model.cfg.width);
    for start in (0..n).step_by(batch.max(1)) {
        let stop = (start + batch.max(1)).min(n);
        let chunk = Tensor::from_parts(
            vec![stop - start, c, h, w],
            images.data()[start * stride..stop * stride].to_vec(),
        );
        let mut g = Graph::new();
        let mut f = Fwd::inference(&mut g, &model.ps);
        let xv = f.g.leaf(chunk);
        let hidden = model.encode(&mut f, xv, None, None)?;
        let pooled = f.g.grouped_row_mean(hidden, tokens)?;
        out.extend_from_slice(g.value(pooled).data());
    }
    Ok(Tensor::from_parts(vec![n, model.cfg.width], out))
}

/// Classification accuracy of a masked-token model on a labeled dataset.
/// `LinearProbe` trains only a linear readout on frozen mean features;
/// `FineTune` trains the whole trunk plus a fresh head with layer-wise
/// learning-rate decay, then restores the model's original weights.
pub fn evaluate_pretrained(
    model: &mut MIMModel,
    images: &Tensor,
    labels: &[u8],
    mode: EvalMode,
    opts: &FineTuneOptions,
    seed: u64,
) -> Result<f32> {
    let (n, _, h, w) = images.dims4()?;
    if labels.len() != n {
        return Err(Error::Config(format!("{} labels for {} images", labels.len(), n)));
    }
    if h != model.cfg.input_size || w != model.cfg.input_size {
        return Err(Error::Config(format!(
            "dataset resolution {h}x{w} does not match model input {0}x{0}",
            model.cfg.input_size
        )));
    }
    let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
    if classes < 2 {
        return Err(Error::Config("evaluation needs at least two classes".into()));
    }
    match mode {
        EvalMode::LinearProbe => {
            let features = mim_features(model, images, 64)?;
            let report = linear_probe(
                &features,
                labels,
                seed,
                ProbeFingerprint { tokenizer: String::new(), dataset: String::new(), seed },
            )?;
            Ok(report.accuracy)
        }
        EvalMode::FineTune => fine_tune(model, images, labels, classes, opts, seed),
    }
}

fn fine_tune(
    model: &mut MIMModel,
    images: &Tensor,
    labels: &[u8],
    classes: usize,
    opts: &FineTuneOptions,
    seed: u64,
) -> Result<f32> {
    let (n, c, h, w) = images.dims4()?;
    let stride = c * h * w;
    let (train, test) = split_indices(n, seed);
    let snapshot: Vec<Tensor> = model.ps.iter().map(|(_, t)| t.clone()).collect();

    let mut head_ps = ParamSet::new();
    let head = Linear::zeros(&mut head_ps, "cls", model.cfg.width, classes);
    let depth = model.cfg.depth;
    let tokens = model.cfg.tokens_per_image();

    let mut rng = seeded_rng(seed ^ 0xf17e);
    let mut trunk_opt = Adam::new(AdamConfig::new(opts.lr, 0.9, 0.999, opts.weight_decay));
    let mut head_opt = Adam::new(AdamConfig::new(opts.lr, 0.9, 0.999, opts.weight_decay));

    for step in 0..opts.steps {
        let warm = if step < opts.warmup {
            (step + 1) as f32 / opts.warmup.max(1) as f32
        } else {
            1.0
        };
        let lr = opts.lr * warm;
        let picks = rng.sample_distinct(train.len(), opts.batch.min(train.len()));
        let mut data = Vec::with_capacity(picks.len() * stride);
        let mut targets = Vec::with_capacity(picks.len());
        for &pi in &picks {
            let i = train[pi];
            data.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
            targets.push(labels[i] as usize);
        }
        let x = Tensor::from_parts(vec![picks.len(), c, h, w], data);

        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &model.ps);
        let xv = f.g.leaf(x);
        let mut drop_rng = rng.child(0x5d ^ step as u64);
        let hidden = model.encode(&mut f, xv, None, Some(&mut drop_rng))?;
        let pooled = f.g.grouped_row_mean(hidden, tokens)?;
        let trunk_bindings = f.bindings();
        let mut hf = Fwd::new(&mut g, &head_ps);
        let logits = head.forward(&mut hf, pooled)?;
        let head_bindings = hf.bindings();
        let mask = vec![true; picks.len()];
        let loss = g.masked_cross_entropy(logits, &targets, &mask)?;
        let lv = g.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::NanLoss { step });
        }
        let mut grads = g.backward(loss)?;
        trunk_opt.begin_step();
        for (pid, vid) in trunk_bindings {
            if let Some(gt) = grads.take(vid) {
                let scale = llrd_scale(model.ps.name(pid), depth, opts.llrd);
                let decay = model.ps.decays(pid);
                trunk_opt.update(
                    pid.index(),
                    model.ps.value_mut(pid).data_mut(),
                    gt.data(),
                    lr * scale,
                    decay,
                );
            }
        }
        head_opt.begin_step();
        for (pid, vid) in head_bindings {
            if let Some(gt) = grads.take(vid) {
                let decay = head_ps.decays(pid);
                head_opt.update(pid.index(), head_ps.value_mut(pid).data_mut(), gt.data(), lr, decay);
            }
        }
    }

    // deterministic evaluation: no stochastic depth
    let mut correct = 0usize;
    for start in (0..test.len()).step_by(32) {
        let stop = (start + 32).min(test.len());
        let mut data = Vec::with_capacity((stop - start) * stride);
        for &i in &test[start..stop] {
            data.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
        }
        let x = Tensor::from_parts(vec![stop - start, c, h, w], data);
        let mut g = Graph::new();
        let mut f = Fwd::inference(&mut g, &model.ps);
        let xv = f.g.leaf(x);
        let hidden = model.encode(&mut f, xv, None, None)?;
        let pooled = f.g.grouped_row_mean(hidden, tokens)?;
        let mut hf = Fwd::inference(&mut g, &head_ps);
        let lv = head.forward(&mut hf, pooled)?;
        let logits = hf.g.value(lv).clone();
        let (b, k) = logits.dims2()?;
        for r in 0..b {
            let row = &logits.data()[r * k..(r + 1) * k];
            let mut best = 0usize;
            for ci in 1..k {
                if row[ci] > row[best] {
                    best = ci;
                }
            }
            if best == labels[test[start + r]] as usize {
                correct += 1;
            }
        }
    }

    // the caller's model is an input, not a casualty
    let restore: Vec<(String, Tensor)> = model
        .ps
        .iter()
        .map(|(name, _)| name.to_string())
        .zip(snapshot)
        .collect();
    model
        .ps
        .load_values(&|name| restore.iter().find(|(n, _)| n == name).map(|(_, t)| t.clone()))?;
    Ok(correct as f32 / test.len() as f32)
}
