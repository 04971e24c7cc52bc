use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ContinuousCDF, Gamma};

use super::Plane;
use crate::error::{contract_err, Error, Result};
use crate::imaging::ImageBuffer;

pub const NOISE_PATCH: usize = 5;
pub const NOISE_MAX_ITERS: usize = 10;
pub const NOISE_TOL: f64 = 1e-4;
pub const NOISE_CONFIDENCE: f64 = 0.99;
pub const MIN_NOISE_PATCHES: usize = 100;

const DIM: usize = NOISE_PATCH * NOISE_PATCH;

/// Noise standard deviation (0..255 scale) of the image luma, estimated from
/// the smallest principal component of iteratively selected weak-texture
/// 5x5 patches.
pub fn pca_noise(buf: &ImageBuffer) -> Result<f64> {
    pca_noise_plane(&Plane::from_image(buf))
}

/// 99% quantile of the gradient energy of a pure unit-variance noise patch.
fn texture_threshold() -> Result<f64> {
    let p = NOISE_PATCH as f64;
    let trace = p * (p - 2.0);
    let n = DIM as f64;
    let g = Gamma::new(n / 2.0, n / (2.0 * trace)).map_err(|e| Error::Metric(e.to_string()))?;
    Ok(g.inverse_cdf(NOISE_CONFIDENCE))
}

pub(crate) fn pca_noise_plane(p: &Plane) -> Result<f64> {
    let k = NOISE_PATCH;
    if p.w < k || p.h < k || (p.w - k + 1) * (p.h - k + 1) < MIN_NOISE_PATCHES {
        return Err(contract_err!(
            "pca noise needs at least {MIN_NOISE_PATCHES} {k}x{k} patches, image is {}x{}",
            p.w,
            p.h
        ));
    }
    let (nx, ny) = (p.w - k + 1, p.h - k + 1);
    let mut gx2 = vec![0.0; p.w * p.h];
    let mut gy2 = vec![0.0; p.w * p.h];
    for y in 0..p.h {
        for x in 0..p.w {
            if x > 0 && x + 1 < p.w {
                gx2[y * p.w + x] = (0.5 * (p.at(x + 1, y) - p.at(x - 1, y))).powi(2);
            }
            if y > 0 && y + 1 < p.h {
                gy2[y * p.w + x] = (0.5 * (p.at(x, y + 1) - p.at(x, y - 1))).powi(2);
            }
        }
    }

    let mut patches = Vec::with_capacity(nx * ny);
    let mut texture = Vec::with_capacity(nx * ny);
    for py in 0..ny {
        for px in 0..nx {
            let mut v = [0.0; DIM];
            let mut xi = 0.0;
            for dy in 0..k {
                for dx in 0..k {
                    let i = (py + dy) * p.w + px + dx;
                    v[dy * k + dx] = p.data[i];
                    if dx > 0 && dx + 1 < k {
                        xi += gx2[i];
                    }
                    if dy > 0 && dy + 1 < k {
                        xi += gy2[i];
                    }
                }
            }
            patches.push(v);
            texture.push(xi);
        }
    }

    let tau0 = texture_threshold()?;
    let all: Vec<usize> = (0..patches.len()).collect();
    let mut var = min_eigenvalue(&patches, &all);
    for _ in 0..NOISE_MAX_ITERS {
        let tau = var * tau0;
        let selected: Vec<usize> = (0..patches.len()).filter(|&i| texture[i] < tau).collect();
        if selected.len() <= DIM {
            break;
        }
        let next = min_eigenvalue(&patches, &selected);
        let done = (next.sqrt() - var.sqrt()).abs() < NOISE_TOL;
        var = next;
        if done {
            break;
        }
    }
    Ok(var.max(0.0).sqrt())
}

fn min_eigenvalue(patches: &[[f64; DIM]], idx: &[usize]) -> f64 {
    let n = idx.len() as f64;
    let mut mean = [0.0; DIM];
    for &i in idx {
        for (m, v) in mean.iter_mut().zip(&patches[i]) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(DIM, DIM);
    let mut c = [0.0; DIM];
    for &i in idx {
        for d in 0..DIM {
            c[d] = patches[i][d] - mean[d];
        }
        for a in 0..DIM {
            for b in a..DIM {
                cov[(a, b)] += c[a] * c[b];
            }
        }
    }
    for a in 0..DIM {
        for b in a..DIM {
            let v = cov[(a, b)] / (n - 1.0).max(1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    SymmetricEigen::new(cov).eigenvalues.min().max(0.0)
}
