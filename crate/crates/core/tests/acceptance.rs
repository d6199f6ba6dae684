//! End-to-end acceptance gate. Each numbered check prints one pass/fail
//! line (written straight to stdout so the lines survive test capture)
//! and the whole test fails if any check fails. The later checks train
//! real models on the synthetic corpus, so the full gate takes on the
//! order of an hour on one core.

use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use peco::codec::{self, Codec, CodecConfig};
use peco::eval::{self, ClassifierTrainOptions, EvalMode, FineTuneOptions};
use peco::losses::{self, LossConfig, PixelNorm};
use peco::mim::{self, blockwise_mask, MIMConfig, MIMModel};
use peco::nn::{Fwd, ParamSet};
use peco::numerics::rng::seeded_rng;
use peco::numerics::tensor::Tensor;
use peco::numerics::Graph;
use peco::perceptual::{self, FeatureNet, FeatureNetConfig, FeatureTrainOptions};
use peco::pipeline::checkpoint::fingerprint_hex;
use peco::pipeline::{file_fingerprint, train, Checkpoint, RunConfig, Stage, TokenDataset};
use peco::quantizer::{self, Codebook, TokenGrid};
use peco::synth;

fn say(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn fmt_dur(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s < 60.0 {
        format!("{s:.1}s")
    } else {
        let whole = s.round() as u64;
        format!("{}m{:02}s", whole / 60, whole % 60)
    }
}

/// Runs one criterion, prints its line, and returns its payload when it
/// passed so later criteria can reuse trained artifacts.
fn run_step<T>(
    failures: &mut Vec<String>,
    name: &str,
    ceiling: Duration,
    f: impl FnOnce() -> Result<T, String>,
) -> Option<T> {
    let t0 = Instant::now();
    let outcome = catch_unwind(AssertUnwindSafe(f));
    let elapsed = t0.elapsed();
    let verdict = match outcome {
        Ok(Ok(v)) => {
            if elapsed <= ceiling {
                say(&format!("criterion {name}: pass ({})", fmt_dur(elapsed)));
                return Some(v);
            }
            format!(
                "ran over budget: {} > {}",
                fmt_dur(elapsed),
                fmt_dur(ceiling)
            )
        }
        Ok(Err(e)) => e,
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            format!("panicked: {msg}")
        }
    };
    say(&format!(
        "criterion {name}: FAIL ({}) {verdict}",
        fmt_dur(elapsed)
    ));
    failures.push(format!("{name}: {verdict}"));
    None
}

const MIN: Duration = Duration::from_secs(60);

#[test]
fn acceptance() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let mut failures: Vec<String> = Vec::new();

    run_step(&mut failures, "1 (quantizer vs exhaustive scan)", MIN, criterion1);
    run_step(&mut failures, "2 (straight-through contract)", MIN, criterion2);
    run_step(&mut failures, "3 (EMA closed form)", MIN, criterion3);
    run_step(&mut failures, "4 (masked loss calibration)", MIN, criterion4);
    run_step(&mut failures, "5 (decoder gradient check)", 5 * MIN, criterion5);
    run_step(&mut failures, "6 (block mask statistics)", MIN, criterion6);
    run_step(&mut failures, "7 (training smoke)", 30 * MIN, || {
        criterion7(tmp.path())
    });
    let arms = run_step(&mut failures, "8 (perceptual transfer margin)", 180 * MIN, || {
        criterion8(tmp.path())
    });
    match &arms {
        Some(arms) => {
            run_step(&mut failures, "9 (adversarial term neutrality)", 180 * MIN, || {
                criterion9(tmp.path(), arms)
            });
        }
        None => {
            say("criterion 9 (adversarial term neutrality): SKIP (needs criterion 8 artifacts)");
            failures.push("9: skipped, criterion 8 failed".into());
        }
    }
    run_step(&mut failures, "10 (persistence round trips)", MIN, || {
        criterion10(tmp.path())
    });
    match &arms {
        Some(arms) => {
            run_step(&mut failures, "11 (pretraining beats scratch)", 120 * MIN, || {
                criterion11(arms)
            });
        }
        None => {
            say("criterion 11 (pretraining beats scratch): SKIP (needs criterion 8 artifacts)");
            failures.push("11: skipped, criterion 8 failed".into());
        }
    }

    assert!(failures.is_empty(), "failed criteria:\n{}", failures.join("\n"));
}

fn s(e: peco::Error) -> String {
    e.to_string()
}

// --- criterion 1 -----------------------------------------------------------

/// Lattice-valued latents and codewords keep every squared distance exact
/// in both f32 and f64, so exact ties are really ties and the f64 oracle
/// must agree with the implementation bit for bit.
fn criterion1() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0001);
    for case in 0..200 {
        let k = 1 + rng.below(64);
        let h = 1 + rng.below(16);
        let w = 1 + rng.below(16);
        let d = 1 + rng.below(32);
        let lattice = |rng: &mut peco::numerics::Rng| (rng.below(17) as f32 - 8.0) / 4.0;

        let mut entries = Vec::with_capacity(k * d);
        for _ in 0..k * d {
            entries.push(lattice(&mut rng));
        }
        // duplicated codewords force ties between distinct indices
        if k > 1 && rng.coin(0.4) {
            let src = rng.below(k);
            let dst = rng.below(k);
            let row: Vec<f32> = entries[src * d..(src + 1) * d].to_vec();
            entries[dst * d..(dst + 1) * d].copy_from_slice(&row);
        }
        let mut z = Vec::with_capacity(h * w * d);
        for _ in 0..h * w * d {
            z.push(lattice(&mut rng));
        }
        // some rows sit exactly on a codeword or midway between two
        for r in 0..h * w {
            if rng.coin(0.2) {
                let a = rng.below(k);
                let b = rng.below(k);
                for j in 0..d {
                    z[r * d + j] = 0.5 * (entries[a * d + j] + entries[b * d + j]);
                }
            }
        }

        let cb = Codebook::from_entries(
            Tensor::from_vec(vec![k, d], entries.clone()).map_err(s)?,
            0.99,
        )
        .map_err(s)?;
        let grid = quantizer::assign(
            &Tensor::from_vec(vec![h, w, d], z.clone()).map_err(s)?,
            &cb,
        )
        .map_err(s)?;

        for r in 0..h * w {
            let zr = &z[r * d..(r + 1) * d];
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for ki in 0..k {
                let ek = &entries[ki * d..(ki + 1) * d];
                let dist: f64 = zr
                    .iter()
                    .zip(ek)
                    .map(|(a, b)| {
                        let t = (*a - *b) as f64;
                        t * t
                    })
                    .sum();
                if dist < best_d {
                    best_d = dist;
                    best = ki;
                }
            }
            if grid.indices[r] as usize != best {
                return Err(format!(
                    "case {case}: row {r} assigned {} but scan says {best}",
                    grid.indices[r]
                ));
            }
        }
    }
    Ok(())
}

// --- criterion 2 -----------------------------------------------------------

fn criterion2() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0002);
    for case in 0..25 {
        let n = 2 + rng.below(30);
        let z_t = Tensor::from_vec(vec![n], (0..n).map(|_| rng.normal()).collect()).map_err(s)?;
        let zq_t = Tensor::from_vec(vec![n], (0..n).map(|_| rng.normal()).collect()).map_err(s)?;
        let w_t = Tensor::from_vec(vec![n], (0..n).map(|_| rng.normal()).collect()).map_err(s)?;

        let mut g = Graph::new();
        let z = g.param(z_t);
        let zq = g.param(zq_t.clone());
        let st = quantizer::straight_through(&mut g, z, zq).map_err(s)?;
        // a different random downstream loss per case
        let w = g.leaf(w_t);
        let loss = if case % 2 == 0 {
            let m = g.mul(st, w).map_err(s)?;
            let sq = g.mul(m, m).map_err(s)?;
            g.sum(sq)
        } else {
            let m = g.mul(st, w).map_err(s)?;
            let t = g.tanh(m);
            g.mean(t)
        };

        if g.value(st).data() != zq_t.data() {
            return Err(format!("case {case}: forward value differs from z_q"));
        }
        g.retain_grad(st);
        let mut grads = g.backward(loss).map_err(s)?;
        let at_out = grads.get(st).cloned().ok_or("no gradient at op output")?;
        let at_z = grads.take(z).ok_or("no gradient at z")?;
        let same = at_z
            .data()
            .iter()
            .zip(at_out.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("case {case}: gradient at z is not the copied output gradient"));
        }
        if grads.take(zq).is_some_and(|t| t.data().iter().any(|&v| v != 0.0)) {
            return Err(format!("case {case}: quantized-side input received gradient"));
        }
    }
    Ok(())
}

// --- criterion 3 -----------------------------------------------------------

fn criterion3() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0003);
    let (k, d) = (4usize, 3usize);
    let gamma = 0.9f32;
    let e0: Vec<f32> = (0..k * d).map(|_| rng.normal()).collect();
    let mut cb =
        Codebook::from_entries(Tensor::from_vec(vec![k, d], e0.clone()).map_err(s)?, gamma)
            .map_err(s)?;

    // scripted assignments: heavy reuse, round robin, and codeword 3
    // untouched until step 2 so its decayed state matters
    let scripts: [[u16; 6]; 5] = [
        [0, 0, 1, 2, 0, 1],
        [3, 3, 3, 3, 3, 3],
        [0, 1, 2, 0, 1, 2],
        [1, 1, 1, 1, 1, 1],
        [2, 0, 2, 0, 2, 0],
    ];

    let mut counts = vec![1.0f32; k];
    let mut sums = e0;
    for (step, script) in scripts.iter().enumerate() {
        let z: Vec<f32> = (0..script.len() * d).map(|_| rng.normal()).collect();
        quantizer::ema_update(
            &mut cb,
            &Tensor::from_vec(vec![script.len(), d], z.clone()).map_err(s)?,
            script,
        )
        .map_err(s)?;

        // hand-accumulated recurrence: counts and sums decay toward the
        // batch statistics, entries are their smoothed ratio
        let mut n = vec![0.0f32; k];
        let mut sm = vec![0.0f32; k * d];
        for (i, &a) in script.iter().enumerate() {
            n[a as usize] += 1.0;
            for j in 0..d {
                sm[a as usize * d + j] += z[i * d + j];
            }
        }
        for ki in 0..k {
            counts[ki] = gamma * counts[ki] + (1.0 - gamma) * n[ki];
            for j in 0..d {
                sums[ki * d + j] = gamma * sums[ki * d + j] + (1.0 - gamma) * sm[ki * d + j];
                let expect = sums[ki * d + j] / counts[ki].max(1e-5);
                let got = cb.entries.data()[ki * d + j];
                if (expect - got).abs() > 1e-5 {
                    return Err(format!(
                        "step {step}: entry [{ki},{j}] {got} vs recurrence {expect}"
                    ));
                }
            }
        }
    }
    Ok(())
}

// --- criterion 4 -----------------------------------------------------------

fn criterion4() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0004);
    let cfg = MIMConfig {
        input_size: 16,
        patch_size: 4,
        depth: 2,
        width: 64,
        heads: 2,
        vocab: 512,
        mask_ratio: 0.4,
        stochastic_depth_rate: 0.0,
    };
    let model = MIMModel::new(cfg, &mut rng).map_err(s)?;
    let b = 3usize;
    let side = model.cfg.grid_side();
    let x = Tensor::from_vec(
        vec![b, 3, 16, 16],
        (0..b * 3 * 256).map(|_| rng.normal_scaled(0.5)).collect(),
    )
    .map_err(s)?;
    let mut specs = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..b {
        specs.push(blockwise_mask(side, side, 0.4, &mut rng).map_err(s)?);
        targets.push(TokenGrid {
            h: side,
            w: side,
            indices: (0..side * side).map(|_| rng.below(512) as u16).collect(),
        });
    }
    let trefs: Vec<&TokenGrid> = targets.iter().collect();

    let mut g = Graph::new();
    let mut f = Fwd::new(&mut g, &model.ps);
    let xv = f.g.leaf(x);
    let logits = model.forward(&mut f, xv, Some(&specs), None).map_err(s)?;
    let loss = mim::mim_loss_graph(&mut g, logits, &trefs, &specs).map_err(s)?;

    let got = g.value(loss).item();
    let want = (512f32).ln();
    if (got - want).abs() / want > 0.02 {
        return Err(format!("initial loss {got} not within 2% of ln 512 = {want}"));
    }

    g.retain_grad(logits);
    let grads = g.backward(loss).map_err(s)?;
    let at_logits = grads.get(logits).ok_or("no gradient at logits")?;
    let rows: Vec<bool> = specs.iter().flat_map(|sp| sp.masked.clone()).collect();
    for (r, masked) in rows.iter().enumerate() {
        if *masked {
            continue;
        }
        let row = &at_logits.data()[r * 512..(r + 1) * 512];
        if row.iter().any(|&v| v != 0.0) {
            return Err(format!("unmasked row {r} received nonzero gradient"));
        }
    }
    Ok(())
}

// --- criterion 5 -----------------------------------------------------------

/// Central differences along unit directions in decoder-parameter space.
/// Per tensor the primary direction is sign(grad)/sqrt(n), whose derivative
/// is the l1 norm of that tensor's gradient; a second direction flips the
/// quarter of components with the smallest gradient magnitudes, which
/// checks how the gradient is distributed while guaranteeing at least half
/// the l1 mass survives, so the predicted derivative stays measurable (a
/// plain rademacher direction can cancel to a value f32 differences cannot
/// resolve). The perceptual term's curvature varies wildly across
/// directions, so each one is measured over a ladder of step sizes and the
/// best stencil counts: truncation error fades as eps shrinks while a wrong
/// analytic gradient stays wrong at every rung.
fn criterion5() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0005);
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
    let codec = Codec::new(ccfg, &mut ps, &mut rng).map_err(s)?;
    let x = Tensor::from_vec(
        vec![2, 3, 16, 16],
        (0..2 * 3 * 256).map(|_| rng.normal_scaled(0.5)).collect(),
    )
    .map_err(s)?;
    let maps = codec::encode_images(&codec, &ps, &x).map_err(s)?;
    let (b, d, h, w) = maps.dims4().map_err(s)?;

    // quantize against a small random codebook to get a realistic z_q
    let entries = Tensor::from_vec(
        vec![16, d],
        (0..16 * d).map(|_| rng.normal_scaled(0.5)).collect(),
    )
    .map_err(s)?;
    let cb = Codebook::from_entries(entries, 0.99).map_err(s)?;
    let mut rows = vec![0.0f32; b * h * w * d];
    for bi in 0..b {
        for j in 0..d {
            for p in 0..h * w {
                rows[(bi * h * w + p) * d + j] = maps.data()[(bi * d + j) * h * w + p];
            }
        }
    }
    let assignments =
        quantizer::assign_rows(&rows, b * h * w, d, &cb).map_err(s)?;
    let mut zq = maps.clone();
    for bi in 0..b {
        for p in 0..h * w {
            let e = &cb.entries.data()
                [assignments[bi * h * w + p] as usize * d..(assignments[bi * h * w + p] as usize + 1) * d];
            for j in 0..d {
                zq.data_mut()[(bi * d + j) * h * w + p] = e[j];
            }
        }
    }

    let fcfg = FeatureNetConfig {
        input_size: 16,
        base_channels: 4,
        tap_layers: vec![2, 4, 6, 8],
        embed_dim: 16,
        weights_source: perceptual::WeightsSource::SelfSupervised,
    };
    let fnet = FeatureNet::new(fcfg, &mut rng).map_err(s)?;

    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for lambda in [0.0f32, 1.0] {
        let loss_cfg = LossConfig {
            beta: 0.25,
            lambda,
            adv_weight: 0.0,
            pixel_norm: PixelNorm::L1,
        };
        let net = (lambda > 0.0).then_some(&fnet);

        // analytic pass: decoder input is the quantized map, exactly as in
        // training, and the graph also carries the commitment term
        let mut g = Graph::new();
        let mut f = Fwd::new(&mut g, &ps);
        let xv = f.g.leaf(x.clone());
        let zv = f.g.leaf(maps.clone());
        let zqv = f.g.leaf(zq.clone());
        let xhat = codec.decode(&mut f, zqv).map_err(s)?;
        let (loss, _) = losses::tokenizer_loss_graph(
            f.g, xv, xhat, zv, &zq, net, None, &loss_cfg,
        )
        .map_err(s)?;
        let bindings = f.bindings();
        let mut grads = g.backward(loss).map_err(s)?;

        let eval_loss = |p: &ParamSet| -> Result<f64, String> {
            let mut g2 = Graph::new();
            let mut f2 = Fwd::inference(&mut g2, p);
            let zqv2 = f2.g.leaf(zq.clone());
            let xh = codec.decode(&mut f2, zqv2).map_err(s)?;
            let xh_t = g2.value(xh).clone();
            let terms =
                losses::tokenizer_loss(&x, &xh_t, &maps, &zq, net, None, &loss_cfg).map_err(s)?;
            Ok(terms.total as f64)
        };

        let ladder = [1e-2f32, 3e-3, 1e-3, 3e-4, 1e-4];
        for (pid, vid) in &bindings {
            if !ps.name(*pid).starts_with("dec.") {
                continue;
            }
            let grad = match grads.take(*vid) {
                Some(t) => t,
                None => continue,
            };
            let n = grad.data().len();
            let scale = 1.0 / (n as f32).sqrt();
            let l1_rate: f64 =
                grad.data().iter().map(|&v| v.abs() as f64).sum::<f64>() / (n as f64).sqrt();
            let sign_dir: Vec<f32> =
                grad.data().iter().map(|&v| if v >= 0.0 { scale } else { -scale }).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                grad.data()[a].abs().total_cmp(&grad.data()[b].abs())
            });
            let mut flip_dir = sign_dir.clone();
            for &i in &order[..n / 4] {
                flip_dir[i] = -flip_dir[i];
            }
            for (which, dir) in [("sign", &sign_dir), ("flip", &flip_dir)] {
                let analytic: f64 = dir
                    .iter()
                    .zip(grad.data())
                    .map(|(&u, &gv)| u as f64 * gv as f64)
                    .sum();
                // below this the f32 forward cannot resolve the difference
                // at any step size
                if analytic.abs() < 1e-3_f64.max(0.05 * l1_rate) {
                    continue;
                }
                checked += 1;
                let mut best = f64::INFINITY;
                let mut best_numeric = f64::NAN;
                for &eps in &ladder {
                    let mut plus = ps.clone();
                    let mut minus = ps.clone();
                    for (i, &u) in dir.iter().enumerate() {
                        plus.value_mut(*pid).data_mut()[i] += eps * u;
                        minus.value_mut(*pid).data_mut()[i] -= eps * u;
                    }
                    let numeric =
                        (eval_loss(&plus)? - eval_loss(&minus)?) / (2.0 * eps as f64);
                    let rel = (analytic - numeric).abs()
                        / analytic.abs().max(numeric.abs()).max(1e-8);
                    if rel < best {
                        best = rel;
                        best_numeric = numeric;
                    }
                    if best < 1e-3 {
                        break;
                    }
                }
                if best > worst {
                    worst = best;
                }
                if best > 1e-2 {
                    return Err(format!(
                        "lambda {lambda} tensor {} {which} direction: analytic {analytic:.6e} vs numeric {best_numeric:.6e} (rel {best:.3e})",
                        ps.name(*pid)
                    ));
                }
            }
        }
    }
    if checked < 40 {
        return Err(format!("only {checked} directions were measurable"));
    }
    say(&format!(
        "  decoder path: {checked} directions, max relative error {worst:.3e}"
    ));
    Ok(())
}

// --- criterion 6 -----------------------------------------------------------

fn criterion6() -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0006);
    let mut total = 0usize;
    for draw in 0..1000 {
        let spec = blockwise_mask(8, 8, 0.4, &mut rng).map_err(s)?;
        total += spec.count();
        spec.verify_decomposition()
            .map_err(|e| format!("draw {draw}: {e}"))?;
    }
    let mean = total as f64 / 1000.0;
    if !(24.6..=26.6).contains(&mean) {
        return Err(format!("mean masked count {mean} outside [24.6, 26.6]"));
    }
    Ok(())
}

// --- criterion 7 -----------------------------------------------------------

fn criterion7(tmp: &Path) -> Result<(), String> {
    let (images, labels) = synth::generate(5000, 32, &mut seeded_rng(70)).map_err(s)?;
    let data_path = tmp.join("smoke.bin");
    peco::pipeline::save_packed(&data_path, &images, Some(&labels)).map_err(s)?;
    let data =
        peco::pipeline::load_dataset(&data_path, peco::pipeline::DatasetFormat::Auto).map_err(s)?;

    let mut cfg = RunConfig::with_stage(Stage::Tokenizer);
    cfg.dataset = data_path.display().to_string();
    cfg.out_dir = tmp.join("smoke-run").display().to_string();
    cfg.seed = 71;
    cfg.epochs = 20;
    cfg.batch_size = 64;
    cfg.input_size = 32;
    cfg.downsample_stages = 2;
    cfg.base_channels = 8;
    cfg.residual_blocks_per_resolution = 1;
    cfg.latent_dim = 8;
    cfg.norm_groups = 4;
    cfg.codebook_size = 128;
    cfg.lambda = 0.0;
    cfg.lr = 2e-3;
    cfg.warmup_steps = 30;
    cfg.log_every = 10;
    cfg.validate().map_err(s)?;

    let run = train::train_tokenizer(&cfg, &data, None).map_err(s)?;
    if run.log.iter().any(|r| !r.total.is_finite() || !r.perplexity.is_finite()) {
        return Err("non-finite value in the training log".into());
    }
    let post = run
        .log
        .iter()
        .find(|r| r.step as usize >= cfg.warmup_steps)
        .ok_or("no post-warmup record")?;
    let last = run.log.last().ok_or("empty training log")?;
    say(&format!(
        "  total {:.4} -> {:.4}, perplexity {:.1}/{}",
        post.total, last.total, last.perplexity, cfg.codebook_size
    ));
    if last.total >= 0.5 * post.total {
        return Err(format!(
            "final total {:.4} not below half the post-warmup {:.4}",
            last.total, post.total
        ));
    }
    if last.perplexity <= 0.1 * cfg.codebook_size as f32 {
        return Err(format!(
            "perplexity {:.2} below 10% of {}",
            last.perplexity, cfg.codebook_size
        ));
    }
    Ok(())
}

// --- criteria 8, 9, 11: shared training arms -------------------------------

const ARM_SEEDS: [u64; 3] = [101, 102, 103];

struct Arms {
    images: Tensor,
    labels: Vec<u8>,
    /// One perceptual run per seed, kept for reuse downstream.
    perceptual: Vec<train::TokenizerRun>,
    feature_nets: Vec<FeatureNet>,
    perc_probe: Vec<f32>,
    cfg_template: RunConfig,
}

fn arm_config(tmp: &Path, tag: &str, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::with_stage(Stage::Tokenizer);
    cfg.out_dir = tmp.join(format!("arm-{tag}-{seed}")).display().to_string();
    cfg.seed = seed;
    cfg.epochs = 4;
    cfg.batch_size = 64;
    cfg.input_size = 32;
    cfg.downsample_stages = 2;
    cfg.base_channels = 8;
    cfg.residual_blocks_per_resolution = 1;
    cfg.latent_dim = 8;
    cfg.norm_groups = 4;
    cfg.codebook_size = 128;
    cfg.lambda = 0.0;
    cfg.lr = 2e-3;
    cfg.warmup_steps = 30;
    cfg.log_every = 50;
    cfg
}

fn probe_accuracy(run: &train::TokenizerRun, images: &Tensor, labels: &[u8]) -> Result<f32, String> {
    let fp = fingerprint_hex(&file_fingerprint(&run.checkpoint_path).map_err(s)?);
    let report = eval::linear_probe_codewords(
        &run.codec,
        &run.ps,
        &run.codebook,
        images,
        labels,
        1000,
        &fp,
        "arm",
    )
    .map_err(s)?;
    Ok(report.accuracy)
}

fn criterion8(tmp: &Path) -> Result<Arms, String> {
    let (images, labels) = synth::generate(1536, 32, &mut seeded_rng(80)).map_err(s)?;
    let data_path = tmp.join("arms.bin");
    peco::pipeline::save_packed(&data_path, &images, Some(&labels)).map_err(s)?;
    let data =
        peco::pipeline::load_dataset(&data_path, peco::pipeline::DatasetFormat::Auto).map_err(s)?;

    let mut feature_nets = Vec::new();
    let mut perceptual_runs = Vec::new();
    let mut plain_probe = Vec::new();
    let mut perc_probe = Vec::new();
    let mut plain_runs = Vec::new();

    for &seed in &ARM_SEEDS {
        // the perceptual arm first trains its own feature net on the same data
        let mut fnet_rng = seeded_rng(seed ^ 0xfea7);
        let fcfg = FeatureNetConfig {
            input_size: 32,
            base_channels: 8,
            tap_layers: vec![2, 4, 6, 8],
            embed_dim: 32,
            weights_source: perceptual::WeightsSource::SelfSupervised,
        };
        let mut fnet = FeatureNet::new(fcfg, &mut fnet_rng).map_err(s)?;
        // 1500 steps, past the point where tap quality depends on the draw
        let fopts = FeatureTrainOptions { steps: 1500, batch: 64, lr: 1e-3, temperature: 0.2 };
        perceptual::train_feature_net(&mut fnet, &images, &fopts, &mut fnet_rng).map_err(s)?;

        let mut cfg = arm_config(tmp, "plain", seed);
        cfg.dataset = data_path.display().to_string();
        cfg.validate().map_err(s)?;
        let plain = train::train_tokenizer(&cfg, &data, None).map_err(s)?;

        let mut cfg = arm_config(tmp, "perc", seed);
        cfg.dataset = data_path.display().to_string();
        cfg.lambda = 1.0;
        cfg.validate().map_err(s)?;
        let perc = train::train_tokenizer(&cfg, &data, Some(&fnet)).map_err(s)?;

        plain_probe.push(probe_accuracy(&plain, &images, &labels)?);
        perc_probe.push(probe_accuracy(&perc, &images, &labels)?);
        plain_runs.push(plain);
        perceptual_runs.push(perc);
        feature_nets.push(fnet);
    }

    // one frozen judge scores every arm's reconstructions on the shared
    // held-out split
    let (train_idx, test_idx) = eval::split_indices(images.shape()[0], 1000);
    let gather = |idx: &[usize]| -> (Tensor, Vec<u8>) {
        let stride = images.numel() / images.shape()[0];
        let mut d = Vec::with_capacity(idx.len() * stride);
        let mut l = Vec::with_capacity(idx.len());
        for &i in idx {
            d.extend_from_slice(&images.data()[i * stride..(i + 1) * stride]);
            l.push(labels[i]);
        }
        (
            Tensor::from_vec(vec![idx.len(), 3, 32, 32], d).expect("gather"),
            l,
        )
    };
    let (train_x, train_y) = gather(&train_idx);
    let (test_x, test_y) = gather(&test_idx);
    let judge = eval::train_classifier(
        &train_x,
        &train_y,
        synth::NUM_CLASSES,
        &ClassifierTrainOptions { steps: 500, batch: 64, lr: 3e-3 },
        &mut seeded_rng(0x1d6e),
    )
    .map_err(s)?;
    let judge_clean = eval::classifier_accuracy(&judge, &test_x, &test_y).map_err(s)?;

    let recon_acc = |run: &train::TokenizerRun| -> Result<f32, String> {
        eval::classify_reconstructions(
            &judge,
            &test_x,
            &test_y,
            &eval::reconstruction_fn(&run.codec, &run.ps, &run.codebook),
        )
        .map_err(s)
    };
    let plain_recon: Vec<f32> = plain_runs.iter().map(&recon_acc).collect::<Result<_, _>>()?;
    let perc_recon: Vec<f32> = perceptual_runs.iter().map(&recon_acc).collect::<Result<_, _>>()?;

    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let probe_gap = mean(&perc_probe) - mean(&plain_probe);
    let recon_gap = mean(&perc_recon) - mean(&plain_recon);
    say(&format!(
        "  probe {:.3} vs {:.3} (gap {probe_gap:+.3}); judge clean {judge_clean:.3}, reconstruction {:.3} vs {:.3} (gap {recon_gap:+.3})",
        mean(&perc_probe),
        mean(&plain_probe),
        mean(&perc_recon),
        mean(&plain_recon),
    ));

    let arms = Arms {
        images,
        labels,
        perceptual: perceptual_runs,
        feature_nets,
        perc_probe,
        cfg_template: {
            let mut c = arm_config(tmp, "template", 0);
            c.dataset = data_path.display().to_string();
            c
        },
    };
    if probe_gap < 0.02 {
        return Err(format!("probe gap {probe_gap:+.4} below 2 points"));
    }
    if recon_gap <= 0.0 {
        return Err(format!("reconstruction gap {recon_gap:+.4} not positive"));
    }
    Ok(arms)
}

fn criterion9(tmp: &Path, arms: &Arms) -> Result<(), String> {
    let data = {
        let p = Path::new(&arms.cfg_template.dataset);
        peco::pipeline::load_dataset(p, peco::pipeline::DatasetFormat::Auto).map_err(s)?
    };
    let mut adv_probe = Vec::new();
    for (i, &seed) in ARM_SEEDS.iter().enumerate() {
        let mut cfg = arm_config(tmp, "adv", seed);
        cfg.dataset = arms.cfg_template.dataset.clone();
        cfg.lambda = 1.0;
        cfg.adv_weight = 0.4;
        cfg.validate().map_err(s)?;
        let run = train::train_tokenizer(&cfg, &data, Some(&arms.feature_nets[i])).map_err(s)?;
        adv_probe.push(probe_accuracy(&run, &arms.images, &arms.labels)?);
    }

    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    let m1 = mean(&arms.perc_probe);
    let sd = (arms
        .perc_probe
        .iter()
        .map(|&a| (a - m1) * (a - m1))
        .sum::<f32>()
        / (arms.perc_probe.len() - 1) as f32)
        .sqrt();
    let shift = (mean(&adv_probe) - m1).abs();
    say(&format!(
        "  probe with adversarial term {:.3} vs {:.3}, |shift| {shift:.4}, seed spread {sd:.4}",
        mean(&adv_probe),
        m1
    ));
    if shift >= sd {
        return Err(format!("probe shift {shift:.4} is not below the seed spread {sd:.4}"));
    }
    Ok(())
}

// --- criterion 10 ----------------------------------------------------------

fn criterion10(tmp: &Path) -> Result<(), String> {
    let mut rng = seeded_rng(0xacce0010);

    let mut ck = Checkpoint::new("tokenizer", serde_json::json!({"k": 8, "note": "round trip"}));
    ck.set_rng(&rng);
    ck.insert(
        "a",
        Tensor::from_vec(vec![3, 4], (0..12).map(|_| rng.normal()).collect()).map_err(s)?,
    );
    ck.insert(
        "nested.b",
        Tensor::from_vec(vec![2, 2, 2], (0..8).map(|_| rng.normal()).collect()).map_err(s)?,
    );
    let p1 = tmp.join("rt1.ckpt");
    let p2 = tmp.join("rt2.ckpt");
    ck.save(&p1).map_err(s)?;
    let loaded = Checkpoint::load(&p1).map_err(s)?;
    loaded.save(&p2).map_err(s)?;
    let b1 = std::fs::read(&p1).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&p2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("checkpoint round trip is not bit-identical".into());
    }
    for name in ["a", "nested.b"] {
        let x = ck.tensor(name).unwrap();
        let y = loaded.tensor(name).ok_or("missing tensor after load")?;
        let same = x.shape() == y.shape()
            && x.data().iter().zip(y.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            return Err(format!("tensor {name} changed across the round trip"));
        }
    }

    let fp = [7u8; 12];
    let mut ds = TokenDataset::new(4, 4, 64, fp);
    for _ in 0..5 {
        ds.push(TokenGrid {
            h: 4,
            w: 4,
            indices: (0..16).map(|_| rng.below(64) as u16).collect(),
        })
        .map_err(s)?;
    }
    let t1 = tmp.join("rt1.tokens");
    let t2 = tmp.join("rt2.tokens");
    ds.save(&t1).map_err(s)?;
    let lds = TokenDataset::load(&t1).map_err(s)?;
    lds.save(&t2).map_err(s)?;
    let b1 = std::fs::read(&t1).map_err(|e| e.to_string())?;
    let b2 = std::fs::read(&t2).map_err(|e| e.to_string())?;
    if b1 != b2 {
        return Err("token cache round trip is not bit-identical".into());
    }
    if lds.grids != ds.grids {
        return Err("token grids changed across the round trip".into());
    }

    // any single corrupted fingerprint byte must be fatal
    lds.verify_fingerprint(&fp).map_err(s)?;
    for i in 0..12 {
        let mut bad = fp;
        bad[i] ^= 0x5a;
        if lds.verify_fingerprint(&bad).is_ok() {
            return Err(format!("fingerprint differing at byte {i} was accepted"));
        }
    }
    Ok(())
}

// --- criterion 11 ----------------------------------------------------------

fn criterion11(arms: &Arms) -> Result<(), String> {
    let tok = &arms.perceptual[0];
    let data = {
        let p = Path::new(&arms.cfg_template.dataset);
        peco::pipeline::load_dataset(p, peco::pipeline::DatasetFormat::Auto).map_err(s)?
    };
    let tokens = train::tokenize_dataset(
        &tok.codec,
        &tok.ps,
        &tok.codebook,
        &data,
        &tok.checkpoint_path,
        64,
    )
    .map_err(s)?;

    let cfg = MIMConfig {
        input_size: 32,
        patch_size: 4,
        depth: 3,
        width: 96,
        heads: 4,
        vocab: tok.codebook.k(),
        mask_ratio: 0.4,
        stochastic_depth_rate: 0.05,
    };
    let mut pre_rng = seeded_rng(0x11a);
    let mut pretrained = MIMModel::new(cfg.clone(), &mut pre_rng).map_err(s)?;
    let opts = mim::PretrainOptions {
        steps: 1000,
        batch: 32,
        lr: 1.5e-3,
        warmup: 50,
        weight_decay: 0.05,
        log_every: 50,
    };
    let log = mim::pretrain(&mut pretrained, &arms.images, &tokens.grids, &opts, &mut pre_rng)
        .map_err(s)?;
    let first = log.first().map(|r| r.loss).unwrap_or(f32::NAN);
    let final_loss = log.last().map(|r| r.loss).unwrap_or(f32::NAN);

    let ft = FineTuneOptions {
        steps: 150,
        batch: 32,
        lr: 1e-3,
        weight_decay: 0.05,
        llrd: 0.65,
        warmup: 10,
    };
    let mut pre_acc = Vec::new();
    let mut scratch_acc = Vec::new();
    for seed in [2101u64, 2102, 2103] {
        let a = eval::evaluate_pretrained(
            &mut pretrained,
            &arms.images,
            &arms.labels,
            EvalMode::FineTune,
            &ft,
            seed,
        )
        .map_err(s)?;
        let mut fresh = MIMModel::new(cfg.clone(), &mut seeded_rng(seed ^ 0x5c)).map_err(s)?;
        let b = eval::evaluate_pretrained(
            &mut fresh,
            &arms.images,
            &arms.labels,
            EvalMode::FineTune,
            &ft,
            seed,
        )
        .map_err(s)?;
        pre_acc.push(a);
        scratch_acc.push(b);
    }
    let mean = |v: &[f32]| v.iter().sum::<f32>() / v.len() as f32;
    say(&format!(
        "  masked-token loss {first:.3} -> {final_loss:.3}; fine-tune {:.3} vs scratch {:.3}",
        mean(&pre_acc),
        mean(&scratch_acc)
    ));
    if !(mean(&pre_acc) > mean(&scratch_acc)) {
        return Err(format!(
            "pretrained mean {:.4} does not beat scratch mean {:.4}",
            mean(&pre_acc),
            mean(&scratch_acc)
        ));
    }
    Ok(())
}
