//! Procedural test imagery.
//!
//! Dead-leaves images (occluding disks with power-law radii) share the
//! scale-invariant statistics of natural photographs, which makes them a
//! usable stand-in corpus for training smoke runs and quality-metric checks.

use rand::Rng;

use super::ImageBuffer;

/// RGB dead-leaves image with soft disk borders and mild per-disk shading.
pub fn dead_leaves<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> ImageBuffer {
    let (w, h) = (width as f64, height as f64);
    let mut pixels = vec![0.0; width * height * 3];

    let c0: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    let c1: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.2..0.8));
    for y in 0..height {
        for x in 0..width {
            let t = 0.5 * (x as f64 / w + y as f64 / h);
            for c in 0..3 {
                pixels[(y * width + x) * 3 + c] = c0[c] * (1.0 - t) + c1[c] * t;
            }
        }
    }

    let r_min = 1.5f64;
    let r_max = (0.3 * w.min(h)).max(r_min + 1.0);
    let (a, b) = (r_min.powi(-2), r_max.powi(-2));
    let count = (width * height) / 40 + 8;
    for _ in 0..count {
        let u: f64 = rng.random();
        let r = (a - u * (a - b)).powf(-0.5);
        let cx = rng.random_range(-r..w + r);
        let cy = rng.random_range(-r..h + r);
        let lum: f64 = rng.random_range(0.1..0.95);
        let color: [f64; 3] =
            std::array::from_fn(|_| (lum + rng.random_range(-0.15f64..0.15)).clamp(0.02, 0.98));
        let (gx, gy) = (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2));

        let x0 = (cx - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((cx + r + 1.0).ceil().max(0.0) as usize).min(width);
        let y0 = (cy - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((cy + r + 1.0).ceil().max(0.0) as usize).min(height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                let dist = (dx * dx + dy * dy).sqrt();
                let alpha = (r - dist + 0.5).clamp(0.0, 1.0);
                if alpha == 0.0 {
                    continue;
                }
                let shade = 1.0 + (gx * dx + gy * dy) / r;
                for c in 0..3 {
                    let p = &mut pixels[(y * width + x) * 3 + c];
                    let v = (color[c] * shade).clamp(0.0, 1.0);
                    *p = alpha * v + (1.0 - alpha) * *p;
                }
            }
        }
    }
    ImageBuffer::from_clamped(width, height, 3, pixels).expect("valid geometry")
}

/// Grayscale linear ramp spanning `[lo, hi]` along the diagonal.
pub fn smooth_gradient(width: usize, height: usize, lo: f64, hi: f64) -> ImageBuffer {
    let span = (width + height).saturating_sub(2).max(1) as f64;
    ImageBuffer::from_fn(width, height, 1, |x, y, _| {
        lo + (hi - lo) * (x + y) as f64 / span
    })
    .expect("valid geometry")
}
