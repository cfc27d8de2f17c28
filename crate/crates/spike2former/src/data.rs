//! Synthetic scenes: one to three rectangles and disks on a textured
//! background, with exact per-pixel labels.
//!
//! Label 0 is background, 1 is rectangle, 2 is disk. Rectangles are drawn
//! in warm colours and disks in cool ones so the toy model can separate them
//! from colour as well as shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spike2former_core::Tensor;

pub const NUM_CLASSES: usize = 3;
pub const MIN_CLASS_PIXELS: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[3, S, S]` in `[0, 1]`.
    pub image: Tensor,
    /// Row-major `S x S` labels.
    pub labels: Vec<usize>,
    pub size: usize,
}

impl Scene {
    pub fn class_pixels(&self) -> [usize; NUM_CLASSES] {
        let mut c = [0; NUM_CLASSES];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

fn draw(rng: &mut ChaCha8Rng, size: usize) -> Scene {
    let n = size * size;
    let base: [f64; 3] = [rng.gen_range(0.35..0.6), rng.gen_range(0.35..0.6), rng.gen_range(0.35..0.6)];
    let mut img = vec![0.0; 3 * n];
    let (fy, fx) = (rng.gen_range(0.2..0.6), rng.gen_range(0.2..0.6));
    for y in 0..size {
        for x in 0..size {
            let stripe = 0.05 * (fy * y as f64 + fx * x as f64).sin();
            for (c, b) in base.iter().enumerate() {
                img[c * n + y * size + x] = b + stripe + rng.gen_range(-0.05..0.05);
            }
        }
    }
    let mut labels = vec![0usize; n];
    let shapes = rng.gen_range(1..=3);
    for _ in 0..shapes {
        let class = rng.gen_range(1..NUM_CLASSES);
        let colour: [f64; 3] = if class == 1 {
            [rng.gen_range(0.8..1.0), rng.gen_range(0.1..0.4), rng.gen_range(0.0..0.2)]
        } else {
            [rng.gen_range(0.0..0.2), rng.gen_range(0.3..0.6), rng.gen_range(0.8..1.0)]
        };
        let lo = size as f64 / 8.0;
        let hi = size as f64 / 3.0;
        let cy = rng.gen_range(0.0..size as f64);
        let cx = rng.gen_range(0.0..size as f64);
        let (ry, rx) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
        for y in 0..size {
            for x in 0..size {
                let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                let inside = if class == 1 {
                    dy.abs() <= ry && dx.abs() <= rx
                } else {
                    dy * dy + dx * dx <= ry * ry
                };
                if inside {
                    labels[y * size + x] = class;
                    for (c, v) in colour.iter().enumerate() {
                        img[c * n + y * size + x] = v + rng.gen_range(-0.03..0.03);
                    }
                }
            }
        }
    }
    for v in &mut img {
        *v = v.clamp(0.0, 1.0);
    }
    Scene {
        image: Tensor::new(&[3, size, size], img).expect("scene shape"),
        labels,
        size,
    }
}

fn valid(scene: &Scene) -> bool {
    let counts = scene.class_pixels();
    counts[1..].iter().all(|&c| c == 0 || c >= MIN_CLASS_PIXELS) && counts[1..].iter().any(|&c| c > 0)
}

/// `count` scenes from `seed`. Scenes in which a present class is smaller
/// than [`MIN_CLASS_PIXELS`] are redrawn.
pub fn generate(seed: u64, count: usize, size: usize) -> Vec<Scene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let s = draw(&mut rng, size);
        if valid(&s) {
            out.push(s);
        }
    }
    out
}
