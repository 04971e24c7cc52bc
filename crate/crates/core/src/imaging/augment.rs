use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ImageBuffer;
use crate::error::{contract_err, Result};

/// Training crop size.
pub const TRAIN_SIZE: usize = 256;

/// Random crop, horizontal flip and quarter-turn rotation.
///
/// Draws from the RNG in a fixed order, so a seeded RNG reproduces the output
/// bit for bit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmenter {
    pub size: usize,
    pub flip_prob: f64,
    pub rotate_prob: f64,
}

impl Default for Augmenter {
    fn default() -> Self {
        Augmenter {
            size: TRAIN_SIZE,
            flip_prob: 0.5,
            rotate_prob: 0.5,
        }
    }
}

impl Augmenter {
    pub fn with_size(size: usize) -> Self {
        Augmenter {
            size,
            ..Self::default()
        }
    }

    pub fn apply<R: Rng + ?Sized>(&self, buf: &ImageBuffer, rng: &mut R) -> Result<ImageBuffer> {
        let (w, h) = (buf.width(), buf.height());
        if w == 0 || h == 0 {
            return Err(contract_err!("cannot augment a {w}x{h} image"));
        }
        let s = self.size;
        // upscale so the short side reaches the crop size, keeping aspect
        let base = if w < s || h < s {
            let scale = s as f64 / w.min(h) as f64;
            let nw = ((w as f64 * scale).ceil() as usize).max(s);
            let nh = ((h as f64 * scale).ceil() as usize).max(s);
            buf.resize(nw, nh)?
        } else {
            buf.clone()
        };
        let x0 = rng.random_range(0..=base.width() - s);
        let y0 = rng.random_range(0..=base.height() - s);
        let mut out = base.crop(x0, y0, s, s)?;
        if rng.random_bool(self.flip_prob) {
            out = out.hflip();
        }
        if rng.random_bool(self.rotate_prob) {
            let turns = rng.random_range(1..4);
            for _ in 0..turns {
                out = out.rotate90();
            }
        }
        Ok(out)
    }
}

/// [`Augmenter::default`] applied once: a 256x256 training sample.
pub fn augment<R: Rng + ?Sized>(buf: &ImageBuffer, rng: &mut R) -> Result<ImageBuffer> {
    Augmenter::default().apply(buf, rng)
}

/// Simulated low-light capture: `clamp(x^gamma + N(0, sigma^2), 0, 1)`.
pub fn synth_darken<R: Rng + ?Sized>(
    buf: &ImageBuffer,
    gamma: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    if !(gamma > 0.0) {
        return Err(contract_err!("gamma must be positive, got {gamma}"));
    }
    if !(noise_sigma >= 0.0) {
        return Err(contract_err!("noise sigma must be non-negative, got {noise_sigma}"));
    }
    let dark = buf.map(|v| v.powf(gamma));
    if noise_sigma == 0.0 {
        return Ok(dark);
    }
    add_gaussian_noise(&dark, noise_sigma, rng)
}

pub fn add_gaussian_noise<R: Rng + ?Sized>(
    buf: &ImageBuffer,
    sigma: f64,
    rng: &mut R,
) -> Result<ImageBuffer> {
    let normal = Normal::new(0.0, sigma).map_err(|e| contract_err!("noise sigma: {e}"))?;
    let pixels = buf
        .pixels()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(buf.width(), buf.height(), buf.channels(), pixels)
}

/// Separable Gaussian blur with a `ceil(3 sigma)` radius and mirrored edges.
pub fn gaussian_blur(buf: &ImageBuffer, sigma: f64) -> ImageBuffer {
    if sigma <= 0.0 {
        return buf.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();

    let (w, h, c) = (buf.width(), buf.height(), buf.channels());
    let mirror = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        while i < 0 || i >= n {
            i = if i < 0 { -i - 1 } else { 2 * n - i - 1 };
        }
        i as usize
    };
    let mut tmp = vec![0.0; buf.pixels().len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sx = mirror(x as isize + k as isize - radius, w);
                    acc += kv * buf.get(sx, y, ch);
                }
                tmp[(y * w + x) * c + ch] = acc;
            }
        }
    }
    let mut out = vec![0.0; tmp.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let mut acc = 0.0;
                for (k, &kv) in kernel.iter().enumerate() {
                    let sy = mirror(y as isize + k as isize - radius, h);
                    acc += kv * tmp[(sy * w + x) * c + ch];
                }
                out[(y * w + x) * c + ch] = acc;
            }
        }
    }
    ImageBuffer::from_clamped(w, h, c, out).expect("same geometry")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::synthetic;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn photo(seed: u64) -> ImageBuffer {
        synthetic::dead_leaves(300, 320, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let img = photo(1);
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!((a.width(), a.height()), (256, 256));
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_seeds_usually_differ() {
        let img = photo(2);
        let reference = augment(&img, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let differing = (1..=50u64)
            .filter(|&s| augment(&img, &mut ChaCha8Rng::seed_from_u64(s)).unwrap() != reference)
            .count();
        assert!(differing as f64 / 50.0 >= 0.9, "only {differing}/50 differ");
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ImageBuffer::filled(100, 90, 3, 0.37).unwrap();
        let out = Augmenter::with_size(64)
            .apply(&img, &mut ChaCha8Rng::seed_from_u64(3))
            .unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
        assert!(out.pixels().iter().all(|&v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn forced_flip_twice_is_identity() {
        let img = synthetic::dead_leaves(32, 32, &mut ChaCha8Rng::seed_from_u64(4));
        let flip = Augmenter {
            size: 32,
            flip_prob: 1.0,
            rotate_prob: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let once = flip.apply(&img, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(flip.apply(&once, &mut rng).unwrap(), img);
    }

    #[test]
    fn small_images_are_resized_first() {
        let img = synthetic::dead_leaves(40, 50, &mut ChaCha8Rng::seed_from_u64(6));
        let out = Augmenter::with_size(64)
            .apply(&img, &mut ChaCha8Rng::seed_from_u64(7))
            .unwrap();
        assert_eq!((out.width(), out.height()), (64, 64));
    }

    #[test]
    fn darken_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let img = synthetic::dead_leaves(16, 16, &mut rng);
        assert_eq!(synth_darken(&img, 1.0, 0.0, &mut rng).unwrap(), img);
        let half = ImageBuffer::filled(1, 1, 1, 0.5).unwrap();
        let d = synth_darken(&half, 2.2, 0.0, &mut rng).unwrap();
        assert!((d.get(0, 0, 0) - 0.5f64.powf(2.2)).abs() < 1e-15);
        assert!((d.get(0, 0, 0) - 0.2176).abs() < 1e-4);
        assert!(synth_darken(&img, 0.0, 0.0, &mut rng).is_err());
        assert!(synth_darken(&img, -1.0, 0.0, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn pipeline_outputs_stay_in_unit_range(
            vals in proptest::collection::vec(0.0f64..=1.0, 20 * 18 * 3),
            seed in any::<u64>(),
            gamma in 0.2f64..4.0,
            sigma in 0.0f64..0.5,
        ) {
            let img = ImageBuffer::new(20, 18, 3, vals).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = Augmenter::with_size(24).apply(&img, &mut rng).unwrap();
            let d = synth_darken(&img, gamma, sigma, &mut rng).unwrap();
            let b = gaussian_blur(&img, 1.5);
            for v in a.pixels().iter().chain(d.pixels()).chain(b.pixels()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn darkening_lowers_mean_brightness(
            vals in proptest::collection::vec(0.0f64..=1.0, 8 * 8),
            gamma in 1.1f64..4.0,
        ) {
            let img = ImageBuffer::new(8, 8, 1, vals).unwrap();
            prop_assume!(img.pixels().iter().any(|&v| v > 0.0 && v < 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let d = synth_darken(&img, gamma, 0.0, &mut rng).unwrap();
            prop_assert!(d.mean() < img.mean());
        }
    }
}
