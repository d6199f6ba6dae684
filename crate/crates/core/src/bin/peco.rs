//! Command line for the tokenizer stack. Training subcommands write their
//! artifacts (resolved config, NDJSON log, checkpoint) into the output
//! directory; evaluation subcommands are read-only apart from their reports.
//! Usage errors exit 2, runtime failures exit 1 with the error on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use peco::codec::{self, Codec, CodecConfig};
use peco::error::Error;
use peco::eval;
use peco::nn::{Fwd, ParamSet};
use peco::numerics::rng::seeded_rng;
use peco::numerics::tensor::Tensor;
use peco::numerics::{grad_check, GradCheckReport};
use peco::pipeline::checkpoint::fingerprint_hex;
use peco::pipeline::{file_fingerprint, load_dataset, train, Dataset, RunConfig, Stage};
use peco::Result;

#[derive(Parser)]
#[command(
    name = "peco",
    about = "Perceptual visual tokenizer, masked-token pretraining, and codeword analytics",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (TOML)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the seed from the config
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory from the config
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the quantizing autoencoder
    TrainTokenizer {
        #[command(flatten)]
        common: Common,
        /// Feature-net checkpoint for the perceptual term (required when lambda > 0)
        #[arg(long)]
        feature_net: Option<PathBuf>,
    },
    /// Train the self-supervised feature net that scores reconstructions
    TrainFeatureNet {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the masked-token transformer against a token cache
    TrainMim {
        #[command(flatten)]
        common: Common,
        /// Tokenizer checkpoint the cache must match
        #[arg(long)]
        tokenizer: PathBuf,
        /// Token cache file, or the directory `tokenize` wrote it into
        #[arg(long)]
        tokens: PathBuf,
    },
    /// Tokenize a dataset and write the fingerprinted cache
    Tokenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Linear probe on average-pooled codewords of a labeled dataset
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// Train a small frozen judge, then classify tokenizer reconstructions
    ClassifyRecon {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
    },
    /// PNG grid of the pixel patches a codeword claims, plus a JSON listing
    Mosaic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Codeword index to visualize
        #[arg(long)]
        codeword: usize,
        /// Maximum patches in the grid
        #[arg(long, default_value_t = 64)]
        patches: usize,
    },
    /// Reconstruct the first images of a dataset into a side-by-side grid
    Reconstruct {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        tokenizer: PathBuf,
        /// Number of images to reconstruct
        #[arg(long, default_value_t = 16)]
        count: usize,
    },
    /// Compare analytic gradients of the decode-plus-loss path against
    /// central differences
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn apply_overrides(cfg: &mut RunConfig, common: &Common, stage: Stage) {
    cfg.stage = stage;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.display().to_string();
    }
}

/// Training commands resolve their config from --config (or defaults), then
/// apply the flag overrides.
fn load_run_config(common: &Common, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::with_stage(stage),
    };
    apply_overrides(&mut cfg, common, stage);
    Ok(cfg)
}

/// Evaluation commands fall back to the config stored in the tokenizer
/// checkpoint when no --config is given.
fn eval_config(common: &Common, fallback: &RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::from_file(p)?,
        None => fallback.clone(),
    };
    apply_overrides(&mut cfg, common, Stage::Eval);
    Ok(cfg)
}

fn open_dataset(cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(Path::new(&cfg.dataset), cfg.dataset_format)
}

fn require_labels(data: &Dataset) -> Result<&[u8]> {
    data.labels
        .as_deref()
        .ok_or_else(|| Error::Config("this command needs a labeled dataset".into()))
}

fn write_report(out: &Path, name: &str, json: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out)?;
    let path = out.join(name);
    std::fs::write(&path, json)?;
    Ok(path)
}

fn dispatch(cmd: Cmd) -> Result<ExitCode> {
    match cmd {
        Cmd::TrainTokenizer { common, feature_net } => {
            let cfg = load_run_config(&common, Stage::Tokenizer)?;
            let data = open_dataset(&cfg)?;
            let net = match &feature_net {
                Some(p) => Some(train::load_feature_net(p)?.1),
                None => None,
            };
            let run = train::train_tokenizer(&cfg, &data, net.as_ref())?;
            if let Some(rec) = run.log.last() {
                println!(
                    "tokenizer: {} images, {} steps, total {:.4}, perplexity {:.1}",
                    data.len(),
                    rec.step + 1,
                    rec.total,
                    rec.perplexity
                );
            }
            println!("checkpoint: {}", run.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainFeatureNet { common } => {
            let cfg = load_run_config(&common, Stage::FeatureNet)?;
            let data = open_dataset(&cfg)?;
            let run = train::train_feature_net(&cfg, &data)?;
            if let Some(loss) = run.losses.last() {
                println!("feature net: {} steps, final loss {:.4}", run.losses.len(), loss);
            }
            println!("checkpoint: {}", run.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::TrainMim { common, tokenizer, tokens } => {
            let cfg = load_run_config(&common, Stage::Mim)?;
            let data = open_dataset(&cfg)?;
            let cache = peco::pipeline::TokenDataset::load(&tokens_file(&tokens))?;
            let run = train::train_mim(&cfg, &data, &cache, &tokenizer)?;
            if let Some(rec) = run.log.last() {
                println!("mim: {} steps, final loss {:.4}", rec.step + 1, rec.loss);
            }
            println!("checkpoint: {}", run.checkpoint_path.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Tokenize { common, tokenizer } => {
            let (tk_cfg, codec, ps, cb) = train::load_tokenizer(&tokenizer)?;
            let cfg = eval_config(&common, &tk_cfg)?;
            let data = open_dataset(&cfg)?;
            let cache =
                train::tokenize_dataset(&codec, &ps, &cb, &data, &tokenizer, cfg.batch_size)?;
            let out = cfg.out_dir();
            std::fs::create_dir_all(&out)?;
            let path = out.join("tokens.bin");
            cache.save(&path)?;
            println!(
                "{} grids of {}x{} tokens, vocabulary {} -> {}",
                cache.len(),
                cache.h,
                cache.w,
                cache.k,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Probe { common, tokenizer } => {
            let (tk_cfg, codec, ps, cb) = train::load_tokenizer(&tokenizer)?;
            let cfg = eval_config(&common, &tk_cfg)?;
            let data = open_dataset(&cfg)?;
            let labels = require_labels(&data)?;
            let fp = fingerprint_hex(&file_fingerprint(&tokenizer)?);
            let report = eval::linear_probe_codewords(
                &codec,
                &ps,
                &cb,
                &data.images,
                labels,
                cfg.seed,
                &fp,
                &cfg.dataset,
            )?;
            let path = write_report(&cfg.out_dir(), "probe.json", &report.to_json())?;
            println!(
                "probe accuracy {:.4} over {} classes -> {}",
                report.accuracy,
                report.per_class.len(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::ClassifyRecon { common, tokenizer } => {
            let (tk_cfg, codec, ps, cb) = train::load_tokenizer(&tokenizer)?;
            let cfg = eval_config(&common, &tk_cfg)?;
            let data = open_dataset(&cfg)?;
            let labels = require_labels(&data)?;
            let classes = data.num_classes();
            let (train_idx, test_idx) = eval::split_indices(data.len(), cfg.seed);
            let train_images = data.batch(&train_idx);
            let train_labels: Vec<u8> = train_idx.iter().map(|&i| labels[i]).collect();
            let test_images = data.batch(&test_idx);
            let test_labels: Vec<u8> = test_idx.iter().map(|&i| labels[i]).collect();
            let opts = eval::ClassifierTrainOptions { steps: 500, batch: 64, lr: 3e-3 };
            let mut rng = seeded_rng(cfg.seed ^ 0xc1a5);
            let judge =
                eval::train_classifier(&train_images, &train_labels, classes, &opts, &mut rng)?;
            let clean = eval::classifier_accuracy(&judge, &test_images, &test_labels)?;
            let recon = eval::classify_reconstructions(
                &judge,
                &test_images,
                &test_labels,
                &eval::reconstruction_fn(&codec, &ps, &cb),
            )?;
            let body = serde_json::json!({
                "clean_accuracy": clean,
                "reconstruction_accuracy": recon,
                "classes": classes,
                "train_images": train_idx.len(),
                "test_images": test_idx.len(),
                "tokenizer": fingerprint_hex(&file_fingerprint(&tokenizer)?),
                "dataset": cfg.dataset,
                "seed": cfg.seed,
            });
            let path = write_report(
                &cfg.out_dir(),
                "classify-recon.json",
                &serde_json::to_string_pretty(&body).expect("report serializes"),
            )?;
            println!(
                "clean accuracy {clean:.4}, reconstruction accuracy {recon:.4} -> {}",
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Mosaic { common, tokenizer, codeword, patches } => {
            let (tk_cfg, codec, ps, cb) = train::load_tokenizer(&tokenizer)?;
            let cfg = eval_config(&common, &tk_cfg)?;
            let data = open_dataset(&cfg)?;
            let out = cfg.out_dir();
            std::fs::create_dir_all(&out)?;
            let png = out.join(format!("mosaic-{codeword}.png"));
            let json = out.join(format!("mosaic-{codeword}.json"));
            let report = eval::codeword_mosaic(
                &codec,
                &ps,
                &cb,
                &data.images,
                &data.ids,
                codeword,
                patches,
                &png,
                &json,
            )?;
            println!(
                "codeword {}: {} occurrences, {} patches -> {}",
                report.codeword,
                report.occurrences,
                report.emitted,
                png.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Reconstruct { common, tokenizer, count } => {
            let (tk_cfg, codec, ps, cb) = train::load_tokenizer(&tokenizer)?;
            let cfg = eval_config(&common, &tk_cfg)?;
            let data = open_dataset(&cfg)?;
            let n = count.min(data.len());
            if n == 0 {
                return Err(Error::Config("nothing to reconstruct".into()));
            }
            let idx: Vec<usize> = (0..n).collect();
            let x = data.batch(&idx);
            let (xhat, _) = codec::reconstruct(&codec, &ps, &cb, &x)?;
            let l1 = x
                .data()
                .iter()
                .zip(xhat.data())
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>()
                / x.numel() as f64;
            let out = cfg.out_dir();
            std::fs::create_dir_all(&out)?;
            let png = out.join("reconstructions.png");
            pair_grid_png(&x, &xhat, &png)?;
            let body = serde_json::json!({
                "count": n,
                "mean_abs_error": l1,
                "images": &data.ids[..n],
            });
            write_report(
                &out,
                "reconstructions.json",
                &serde_json::to_string_pretty(&body).expect("report serializes"),
            )?;
            println!("{n} reconstructions, mean |err| {l1:.4} -> {}", png.display());
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Gradcheck { common } => run_gradcheck(&common),
    }
}

fn tokens_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("tokens.bin")
    } else {
        path.to_path_buf()
    }
}

/// Originals on the upper row of each band, reconstructions below them.
fn pair_grid_png(x: &Tensor, xhat: &Tensor, path: &Path) -> Result<()> {
    let (n, _c, h, w) = x.dims4()?;
    let cols = n.min(8);
    let bands = (n + cols - 1) / cols;
    let gap = 1usize;
    let rows = 2 * bands;
    let mut img = image::RgbImage::from_pixel(
        (cols * w + (cols + 1) * gap) as u32,
        (rows * h + (rows + 1) * gap) as u32,
        image::Rgb([255, 255, 255]),
    );
    let px = |t: &Tensor, i: usize, ch: usize, y: usize, xx: usize| {
        let v = t.data()[((i * 3 + ch) * h + y) * w + xx];
        ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
    };
    for i in 0..n {
        let (band, col) = (i / cols, i % cols);
        for (slot, t) in [x, xhat].iter().enumerate() {
            let row = 2 * band + slot;
            let ox = col * w + (col + 1) * gap;
            let oy = row * h + (row + 1) * gap;
            for y in 0..h {
                for xx in 0..w {
                    img.put_pixel(
                        (ox + xx) as u32,
                        (oy + y) as u32,
                        image::Rgb([px(t, i, 0, y, xx), px(t, i, 1, y, xx), px(t, i, 2, y, xx)]),
                    );
                }
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::Ingestion { entry: path.display().to_string(), reason: e.to_string() })
}

fn randn(rng: &mut peco::numerics::rng::Rng, shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
}

const ANCHOR_CURV: f32 = 4000.0;

/// Center for a quadratic anchor c*sum((v - b)^2) whose gradient at v = x is
/// a random signed vector with entries in [scale/2, 3*scale/2].
fn anchor_base(rng: &mut peco::numerics::rng::Rng, x: &Tensor, scale: f32) -> Result<Tensor> {
    Tensor::from_vec(
        x.shape().to_vec(),
        x.data()
            .iter()
            .map(|&xi| {
                let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
                xi - s * scale * (0.5 + rng.uniform()) / (2.0 * ANCHOR_CURV)
            })
            .collect(),
    )
}

fn anchor_term(
    g: &mut peco::numerics::Graph,
    v: peco::numerics::VarId,
    b: &Tensor,
) -> Result<peco::numerics::VarId> {
    let bv = g.leaf(b.clone());
    let d = g.sub(v, bv)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(g.scale(s, ANCHOR_CURV))
}

fn run_gradcheck(common: &Common) -> Result<ExitCode> {
    let seed = common.seed.unwrap_or(0);
    let mut rng = seeded_rng(seed);
    let mut results: Vec<(&str, GradCheckReport)> = Vec::new();

    {
        let x = randn(&mut rng, &[2, 3, 8, 8])?;
        let w1 = randn(&mut rng, &[6, 3, 3, 3])?;
        let b1 = randn(&mut rng, &[6])?;
        let w2 = randn(&mut rng, &[6, 6, 3, 3])?;
        let b2 = randn(&mut rng, &[6])?;
        let mut probe = randn(&mut rng, &[2, 6, 4, 4])?;
        for v in probe.data_mut() {
            *v *= 0.1;
        }
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let w1 = g.leaf(w1.clone());
                let b1 = g.leaf(b1.clone());
                let w2 = g.leaf(w2.clone());
                let b2 = g.leaf(b2.clone());
                let y = g.conv2d(v, w1, b1, 1, 1)?;
                let y = g.tanh(y);
                let y = g.conv2d(y, w2, b2, 2, 1)?;
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            1e-2,
        )?;
        results.push(("conv chain", r));
    }
    {
        let x = randn(&mut rng, &[2, 8, 5, 5])?;
        let probe = randn(&mut rng, &[2, 8, 5, 5])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let gamma = g.leaf(Tensor::full(&[8], 1.3));
                let beta = g.leaf(Tensor::full(&[8], 0.2));
                let y = g.group_norm(v, gamma, beta, 4, 1e-5)?;
                let y = g.gelu(y);
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            1e-2,
        )?;
        results.push(("group norm + gelu", r));
    }
    {
        let x = randn(&mut rng, &[4, 12])?;
        let probe = randn(&mut rng, &[4, 4])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let y = g.attention(v, 2, 2, 2)?;
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            3e-3,
        )?;
        results.push(("attention", r));
    }
    {
        let x = randn(&mut rng, &[4, 6])?;
        let w = randn(&mut rng, &[6, 5])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let gamma = g.leaf(Tensor::full(&[6], 1.0));
                let beta = g.leaf(Tensor::zeros(&[6]));
                let y = g.layer_norm(v, gamma, beta, 1e-5)?;
                let y = g.gelu(y);
                let wv = g.leaf(w.clone());
                let logits = g.matmul(y, wv)?;
                let ce =
                    g.masked_cross_entropy(logits, &[1, 0, 3, 2], &[true, false, true, true])?;
                let la = anchor_term(g, v, &b)?;
                g.add(ce, la)
            },
            &x,
            3e-3,
        )?;
        results.push(("layer norm + gelu + cross entropy", r));
    }
    {
        let x = randn(&mut rng, &[1, 2, 4, 4])?;
        let probe = randn(&mut rng, &[4, 32])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let y = g.upsample2(v)?;
                let y = g.extract_patches(y, 4)?;
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            3e-3,
        )?;
        results.push(("upsample + patches", r));
    }
    {
        // linear probes exercise both the tangential and the radial
        // component of the normalization gradients
        let x = randn(&mut rng, &[1, 6, 3, 3])?;
        let probe = randn(&mut rng, &[1, 6, 3, 3])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let y = g.channel_normalize(v, 1e-10)?;
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            1e-3,
        )?;
        results.push(("channel normalize", r));
        let x = randn(&mut rng, &[3, 5])?;
        let probe = randn(&mut rng, &[3, 5])?;
        let b = anchor_base(&mut rng, &x, 20.0)?;
        let r = grad_check(
            |g, v| {
                let y = g.row_normalize(v, 1e-10)?;
                let p = g.leaf(probe.clone());
                let m = g.mul(y, p)?;
                let ly = g.sum(m);
                let la = anchor_term(g, v, &b)?;
                g.add(ly, la)
            },
            &x,
            1e-3,
        )?;
        results.push(("row normalize", r));
    }
    {
        let ccfg = CodecConfig {
            input_size: 16,
            downsample_stages: 2,
            base_channels: 8,
            residual_blocks_per_resolution: 1,
            latent_dim: 4,
            attention_at_bottleneck: true,
            norm_groups: 4,
        };
        let mut ps = ParamSet::new();
        let codec = Codec::new(ccfg, &mut ps, &mut rng)?;
        let x = randn(&mut rng, &[1, 3, 16, 16])?;
        let z = codec::encode_images(&codec, &ps, &x)?;
        let zq = randn(&mut rng, z.shape())?;
        let probe = randn(&mut rng, &[1, 3, 16, 16])?;
        let b = anchor_base(&mut rng, &z, 20.0)?;
        let r = grad_check(
            |g, v| {
                let mut f = Fwd::inference(g, &ps);
                let xhat = codec.decode(&mut f, v)?;
                let p = f.g.leaf(probe.clone());
                let m = f.g.mul(xhat, p)?;
                let recon = f.g.sum(m);
                let zqv = f.g.leaf(zq.clone());
                let d = f.g.sub(v, zqv)?;
                let sq = f.g.mul(d, d)?;
                let commit = f.g.mean(sq);
                let commit = f.g.scale(commit, 0.25);
                let pc = f.g.add(recon, commit)?;
                let la = anchor_term(f.g, v, &b)?;
                f.g.add(pc, la)
            },
            &z,
            1e-2,
        )?;
        results.push(("decoder + commitment", r));
    }

    let mut worst = 0.0f64;
    for (name, r) in &results {
        worst = worst.max(r.max_rel_error);
        println!(
            "{name}: max relative error {:.3e} over {} coordinates",
            r.max_rel_error, r.checked
        );
    }
    println!("max relative error: {worst:.3e}");
    if worst < 1e-2 {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: gradient check failed, {worst:.3e} exceeds 1e-2");
        Ok(ExitCode::from(1))
    }
}
