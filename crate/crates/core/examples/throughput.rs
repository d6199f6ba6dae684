//! Rough single-core throughput numbers for the kernels that dominate
//! training time. Run with `cargo run --release --example throughput`.

use std::time::Instant;

use peco::numerics::kernels::{conv2d_backward, conv2d_forward, sgemm_nn};
use peco::numerics::seeded_rng;

fn main() {
    let mut rng = seeded_rng(0);

    for &n in &[64usize, 128, 256, 512] {
        let a: Vec<f32> = (0..n * n).map(|_| rng.normal()).collect();
        let b: Vec<f32> = (0..n * n).map(|_| rng.normal()).collect();
        let mut c = vec![0.0f32; n * n];
        let reps = (256 / (n / 64)).max(4);
        let t0 = Instant::now();
        for _ in 0..reps {
            sgemm_nn(n, n, n, 1.0, &a, &b, 0.0, &mut c);
        }
        let dt = t0.elapsed().as_secs_f64();
        let gflops = 2.0 * (n * n * n * reps) as f64 / dt / 1e9;
        println!("gemm {n}x{n}x{n}: {gflops:.2} GFLOP/s");
    }

    // conv stack shaped like one tokenizer encoder stage
    for &(batch, cin, hw, cout) in &[(32usize, 16usize, 32usize, 32usize), (64, 32, 16, 64)] {
        let k = 3;
        let x: Vec<f32> = (0..batch * cin * hw * hw).map(|_| rng.normal()).collect();
        let w: Vec<f32> = (0..cout * cin * k * k).map(|_| rng.normal()).collect();
        let bias = vec![0.0f32; cout];
        let mut y = vec![0.0f32; batch * cout * hw * hw];
        let t0 = Instant::now();
        let reps = 8;
        for _ in 0..reps {
            conv2d_forward(&x, &w, &bias, batch, cin, hw, hw, cout, k, 1, 1, &mut y);
        }
        let fwd = t0.elapsed().as_secs_f64() / reps as f64;

        let mut dx = vec![0.0f32; x.len()];
        let mut dw = vec![0.0f32; w.len()];
        let mut db = vec![0.0f32; cout];
        let t0 = Instant::now();
        for _ in 0..reps {
            dx.fill(0.0);
            conv2d_backward(&x, &w, &y, batch, cin, hw, hw, cout, k, 1, 1, &mut dx, &mut dw, &mut db);
        }
        let bwd = t0.elapsed().as_secs_f64() / reps as f64;
        println!(
            "conv b{batch} {cin}->{cout} {hw}x{hw} k3: fwd {:.1} ms, bwd {:.1} ms",
            fwd * 1e3,
            bwd * 1e3
        );
    }
}
