//! Synthetic labeled shape dataset.
//!
//! Eight classes that differ in local edge statistics (the things pooled
//! patch codewords can see): filled disk, square outline, filled triangle,
//! plus sign, horizontal / vertical / diagonal stripes, checkerboard.
//! Foreground and background colors are random nuisance variables, so a
//! probe cannot succeed on color alone.

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

pub const NUM_CLASSES: usize = 8;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "disk",
    "square",
    "triangle",
    "plus",
    "hstripes",
    "vstripes",
    "dstripes",
    "checker",
];

fn random_color(rng: &mut Rng) -> [f32; 3] {
    [rng.range_f32(-1.0, 1.0), rng.range_f32(-1.0, 1.0), rng.range_f32(-1.0, 1.0)]
}

fn contrast(a: [f32; 3], b: [f32; 3]) -> f32 {
    a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// One CHW image in [-1, 1] of the given class.
pub fn render(class: usize, size: usize, rng: &mut Rng) -> Result<Vec<f32>> {
    if class >= NUM_CLASSES {
        return Err(Error::IndexOutOfBounds { index: class, bound: NUM_CLASSES });
    }
    if size < 16 {
        return Err(Error::Config(format!("image size {size} too small for shapes")));
    }
    let bg = random_color(rng);
    let mut fg = random_color(rng);
    while contrast(fg, bg) < 0.8 {
        fg = random_color(rng);
    }
    let s = size as f32;
    let cx = s / 2.0 + rng.range_f32(-0.12, 0.12) * s;
    let cy = s / 2.0 + rng.range_f32(-0.12, 0.12) * s;
    let r = rng.range_f32(0.28, 0.40) * s;
    let period = *[4usize, 6, 8].get(rng.below(3)).expect("period") as f32;
    let phase = rng.range_f32(0.0, period);
    let thick = rng.range_f32(0.10, 0.18) * s;

    let inside = |i: usize, j: usize| -> bool {
        let y = i as f32 + 0.5;
        let x = j as f32 + 0.5;
        let dx = x - cx;
        let dy = y - cy;
        match class {
            0 => dx * dx + dy * dy <= r * r,
            1 => {
                let d = dx.abs().max(dy.abs());
                d <= r && d >= r - thick
            }
            2 => {
                // upward triangle: below the apex, inside both slanted edges
                let h = 1.5 * r;
                let top = cy - h / 2.0;
                dy + h / 2.0 >= 0.0
                    && y >= top
                    && y <= top + h
                    && dx.abs() <= (y - top) / h * r
            }
            3 => (dx.abs() <= thick / 2.0 && dy.abs() <= r) || (dy.abs() <= thick / 2.0 && dx.abs() <= r),
            4 => ((y + phase) / period).floor() as i64 % 2 == 0,
            5 => ((x + phase) / period).floor() as i64 % 2 == 0,
            6 => ((x + y + phase) / period).floor() as i64 % 2 == 0,
            7 => {
                (((x + phase) / period).floor() as i64 + ((y + phase) / period).floor() as i64) % 2
                    == 0
            }
            _ => unreachable!(),
        }
    };

    let mut img = vec![0.0f32; 3 * size * size];
    for i in 0..size {
        for j in 0..size {
            let color = if inside(i, j) { fg } else { bg };
            for c in 0..3 {
                let noise = rng.normal_scaled(0.02);
                img[c * size * size + i * size + j] = (color[c] + noise).clamp(-1.0, 1.0);
            }
        }
    }
    Ok(img)
}

/// Balanced labeled dataset: images [n, 3, size, size] plus class labels,
/// in a seeded shuffled order so every prefix is roughly balanced.
pub fn generate(n: usize, size: usize, rng: &mut Rng) -> Result<(Tensor, Vec<u8>)> {
    let mut data = vec![0.0f32; n * 3 * size * size];
    let mut labels = vec![0u8; n];
    let order = rng.permutation(n);
    let img_len = 3 * size * size;
    for (slot, &pos) in order.iter().enumerate() {
        let class = slot % NUM_CLASSES;
        let img = render(class, size, rng)?;
        data[pos * img_len..(pos + 1) * img_len].copy_from_slice(&img);
        labels[pos] = class as u8;
    }
    Ok((Tensor::from_parts(vec![n, 3, size, size], data), labels))
}
