//! Procedural landslide-like samples: value-noise terrain with brighter
//! irregular foreground blobs, plus the exact binary mask of the blob union.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::Sample;
use crate::Tensor;

/// Foreground area fraction every generated sample is kept within.
pub const AREA_FRACTION_RANGE: (f64, f64) = (0.02, 0.40);

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    cos_t: f64,
    sin_t: f64,
    wobble_amp: f64,
    wobble_freq: f64,
    wobble_phase: f64,
}

impl Blob {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        let r = ((u / self.rx).powi(2) + (v / self.ry).powi(2)).sqrt();
        let phi = v.atan2(u);
        r <= 1.0 + self.wobble_amp * (self.wobble_freq * phi + self.wobble_phase).sin()
    }
}

fn sample_blobs(rng: &mut ChaCha20Rng, size: f64) -> Vec<Blob> {
    let count = rng.random_range(1..=3);
    (0..count)
        .map(|_| {
            let base = rng.random_range(size * 0.10..size * 0.22);
            let elong = rng.random_range(0.45..1.0);
            let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Blob {
                cx: rng.random_range(size * 0.2..size * 0.8),
                cy: rng.random_range(size * 0.2..size * 0.8),
                rx: base,
                ry: base * elong,
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                wobble_amp: rng.random_range(0.08..0.30),
                wobble_freq: rng.random_range(2..=5) as f64,
                wobble_phase: rng.random_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

fn rasterize(blobs: &[Blob], size: usize) -> (Vec<u8>, f64) {
    let mut mask = vec![0u8; size * size];
    let mut area = 0usize;
    for y in 0..size {
        for x in 0..size {
            let inside = blobs
                .iter()
                .any(|b| b.contains(x as f64 + 0.5, y as f64 + 0.5));
            if inside {
                mask[y * size + x] = 1;
                area += 1;
            }
        }
    }
    (mask, area as f64 / (size * size) as f64)
}

/// Lattice value noise in [0, 1] with the given cell size, bilinearly
/// interpolated between lattice nodes.
fn value_noise(rng: &mut ChaCha20Rng, size: usize, cell: usize) -> Vec<f64> {
    let nodes = size / cell + 2;
    let lattice: Vec<f64> = (0..nodes * nodes).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; size * size];
    for y in 0..size {
        let fy = y as f64 / cell as f64;
        let y0 = fy.floor() as usize;
        let wy = fy - y0 as f64;
        for x in 0..size {
            let fx = x as f64 / cell as f64;
            let x0 = fx.floor() as usize;
            let wx = fx - x0 as f64;
            let n00 = lattice[y0 * nodes + x0];
            let n01 = lattice[y0 * nodes + x0 + 1];
            let n10 = lattice[(y0 + 1) * nodes + x0];
            let n11 = lattice[(y0 + 1) * nodes + x0 + 1];
            let top = n00 * (1.0 - wx) + n01 * wx;
            let bot = n10 * (1.0 - wx) + n11 * wx;
            out[y * size + x] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Fully deterministic per `(seed, index)`: a dedicated ChaCha stream drives
/// every random choice of the sample.
pub fn generate_sample(seed: u64, index: u64, size: usize) -> Sample {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(index);

    let mask;
    let mut attempts = 0;
    loop {
        let blobs = sample_blobs(&mut rng, size as f64);
        let (m, fraction) = rasterize(&blobs, size);
        attempts += 1;
        if (AREA_FRACTION_RANGE.0..=AREA_FRACTION_RANGE.1).contains(&fraction) {
            mask = m;
            break;
        }
        if attempts >= 64 {
            // Deterministic fallback: one centered ellipse, ~15% area.
            let fallback = Blob {
                cx: size as f64 / 2.0,
                cy: size as f64 / 2.0,
                rx: size as f64 * 0.25,
                ry: size as f64 * 0.19,
                cos_t: 1.0,
                sin_t: 0.0,
                wobble_amp: 0.0,
                wobble_freq: 2.0,
                wobble_phase: 0.0,
            };
            mask = rasterize(&[fallback], size).0;
            break;
        }
    }

    let coarse = value_noise(&mut rng, size, (size / 8).max(2));
    let fine = value_noise(&mut rng, size, (size / 16).max(2));
    let fg_tex = value_noise(&mut rng, size, (size / 8).max(2));

    // Dark greenish terrain under bright earthy slide scars.
    let mut image = vec![0.0f64; 3 * size * size];
    let plane = size * size;
    for p in 0..plane {
        let tex = 0.65 * coarse[p] + 0.35 * fine[p];
        let (r, g, b) = if mask[p] == 1 {
            let v = 0.62 + 0.28 * fg_tex[p];
            (v * 1.05, v * 0.92, v * 0.74)
        } else {
            let v = 0.14 + 0.30 * tex;
            (v * 0.85, v * 1.05, v * 0.70)
        };
        image[p] = r.clamp(0.0, 1.0);
        image[plane + p] = g.clamp(0.0, 1.0);
        image[2 * plane + p] = b.clamp(0.0, 1.0);
    }

    Sample {
        id: format!("synth-{index:04}"),
        image: Tensor::from_vec(image, &[3, size, size]).expect("shape matches"),
        mask: Tensor::from_vec(mask.iter().map(|&m| f64::from(m)).collect(), &[size, size])
            .expect("shape matches"),
    }
}
