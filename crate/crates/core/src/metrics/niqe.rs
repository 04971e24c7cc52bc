use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use statrs::function::gamma::ln_gamma;

use super::Plane;
use crate::error::{contract_err, Error, Result};
use crate::imaging::{list_images, load_image, ImageBuffer};

pub const NIQE_FEATURES: usize = 36;
pub const NIQE_PATCH: usize = 96;
pub const SHARPNESS_THRESHOLD: f64 = 0.75;
const WINDOW_RADIUS: usize = 3;
const WINDOW_SIGMA: f64 = 7.0 / 6.0;
const MSCN_C: f64 = 1.0;
const PAIR_SHIFTS: [(isize, isize); 4] = [(1, 0), (0, 1), (1, 1), (-1, 1)];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NiqeConfig {
    /// Side of the square scale-1 patch; must be even.
    pub patch_size: usize,
    pub sharpness_threshold: f64,
}

impl Default for NiqeConfig {
    fn default() -> Self {
        NiqeConfig {
            patch_size: NIQE_PATCH,
            sharpness_threshold: SHARPNESS_THRESHOLD,
        }
    }
}

impl NiqeConfig {
    pub fn with_patch(patch_size: usize) -> Self {
        NiqeConfig {
            patch_size,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.patch_size < 8 || self.patch_size % 2 != 0 {
            return Err(contract_err!("niqe patch size must be even and >= 8, got {}", self.patch_size));
        }
        Ok(())
    }
}

/// Multivariate Gaussian fit of natural-scene features from a pristine corpus.
#[derive(Clone, Debug)]
pub struct NiqeModel {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub config: NiqeConfig,
}

/// Moment-matching fit of an asymmetric generalized Gaussian:
/// `(alpha, left_std, right_std)`. `None` for one-sided or all-zero data.
pub fn estimate_aggd(x: &[f64]) -> Option<(f64, f64, f64)> {
    let (mut ls, mut ln, mut rs, mut rn, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    if ln == 0 || rn == 0 || sq == 0.0 {
        return None;
    }
    let n = x.len() as f64;
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let g = left / right;
    let r_hat = (abs / n).powi(2) / (sq / n);
    let r_norm = r_hat * (g.powi(3) + 1.0) * (g + 1.0) / (g * g + 1.0).powi(2);
    let table = ratio_table();
    let (alpha, _) = table
        .iter()
        .map(|&(a, r)| (a, (r - r_norm).powi(2)))
        .fold((f64::NAN, f64::INFINITY), |best, c| if c.1 < best.1 { c } else { best });
    Some((alpha, left, right))
}

/// `(alpha, Gamma(2/a)^2 / (Gamma(1/a) Gamma(3/a)))` on the 0.2..10 grid.
fn ratio_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..=9800)
            .map(|i| {
                let a = 0.2 + i as f64 * 1e-3;
                (a, (2.0 * ln_gamma(2.0 / a) - ln_gamma(1.0 / a) - ln_gamma(3.0 / a)).exp())
            })
            .collect()
    })
}

fn gaussian_window() -> Vec<f64> {
    let r = WINDOW_RADIUS as isize;
    let mut w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable filtering with replicated borders.
fn filter(p: &Plane, k: &[f64]) -> Plane {
    let r = (k.len() / 2) as isize;
    let clampi = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            tmp[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * p.at(clampi(x as isize + j as isize - r, p.w), y))
                .sum();
        }
    }
    let mut out = vec![0.0; p.data.len()];
    for y in 0..p.h {
        for x in 0..p.w {
            out[y * p.w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[clampi(y as isize + j as isize - r, p.h) * p.w + x])
                .sum();
        }
    }
    Plane { w: p.w, h: p.h, data: out }
}

/// Mean-subtracted contrast-normalized coefficients and the local deviation map.
pub(crate) fn mscn(p: &Plane) -> (Plane, Plane) {
    let k = gaussian_window();
    let mu = filter(p, &k);
    let sq = Plane {
        w: p.w,
        h: p.h,
        data: p.data.iter().map(|v| v * v).collect(),
    };
    let mu2 = filter(&sq, &k);
    let sigma: Vec<f64> = mu2
        .data
        .iter()
        .zip(&mu.data)
        .map(|(m2, m)| (m2 - m * m).abs().sqrt())
        .collect();
    let coeffs = p
        .data
        .iter()
        .zip(&mu.data)
        .zip(&sigma)
        .map(|((v, m), s)| (v - m) / (s + MSCN_C))
        .collect();
    (
        Plane { w: p.w, h: p.h, data: coeffs },
        Plane { w: p.w, h: p.h, data: sigma },
    )
}

fn half(p: &Plane) -> Plane {
    let (w, h) = (p.w / 2, p.h / 2);
    let data = (0..h)
        .flat_map(|y| {
            (0..w).map(move |x| {
                0.25 * (p.at(2 * x, 2 * y) + p.at(2 * x + 1, 2 * y) + p.at(2 * x, 2 * y + 1) + p.at(2 * x + 1, 2 * y + 1))
            })
        })
        .collect();
    Plane { w, h, data }
}

fn block_features(m: &Plane, x0: usize, y0: usize, size: usize, out: &mut Vec<f64>) -> Option<()> {
    let block: Vec<f64> = (y0..y0 + size)
        .flat_map(|y| (x0..x0 + size).map(move |x| m.at(x, y)))
        .collect();
    let (alpha, l, r) = estimate_aggd(&block)?;
    out.extend([alpha, 0.5 * (l + r)]);
    for (sx, sy) in PAIR_SHIFTS {
        let mut prod = Vec::with_capacity(size * size);
        for y in 0..size {
            for x in 0..size {
                let (xx, yy) = (x as isize + sx, y as isize + sy);
                if xx < 0 || yy < 0 || xx >= size as isize || yy >= size as isize {
                    continue;
                }
                prod.push(m.at(x0 + x, y0 + y) * m.at(x0 + xx as usize, y0 + yy as usize));
            }
        }
        let (a, l, r) = estimate_aggd(&prod)?;
        let mean = (r - l) * (ln_gamma(2.0 / a) - 0.5 * ln_gamma(1.0 / a) - 0.5 * ln_gamma(3.0 / a)).exp();
        out.extend([a, mean, l * l, r * r]);
    }
    Some(())
}

/// Per-patch 36-D feature vectors with their scale-1 sharpness. Patches whose
/// statistics are degenerate (flat regions) are dropped.
pub(crate) fn patch_features(p: &Plane, patch: usize) -> Vec<(Vec<f64>, f64)> {
    let (m1, sigma) = mscn(p);
    let (m2, _) = mscn(&half(p));
    let hp = patch / 2;
    let mut rows = Vec::new();
    for by in 0..p.h / patch {
        for bx in 0..p.w / patch {
            let mut f = Vec::with_capacity(NIQE_FEATURES);
            let ok = block_features(&m1, bx * patch, by * patch, patch, &mut f)
                .and_then(|_| block_features(&m2, bx * hp, by * hp, hp, &mut f));
            if ok.is_none() || f.iter().any(|v| !v.is_finite()) {
                continue;
            }
            let sharp = (by * patch..(by + 1) * patch)
                .flat_map(|y| (bx * patch..(bx + 1) * patch).map(move |x| (x, y)))
                .map(|(x, y)| sigma.at(x, y))
                .sum::<f64>()
                / (patch * patch) as f64;
            rows.push((f, sharp));
        }
    }
    rows
}

fn gaussian_fit(rows: &[Vec<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let n = rows.len();
    let mut mean = DVector::zeros(NIQE_FEATURES);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(NIQE_FEATURES, NIQE_FEATURES);
    if n > 1 {
        for r in rows {
            let d = DVector::from_column_slice(r) - &mean;
            cov += &d * d.transpose();
        }
        cov /= (n - 1) as f64;
    }
    (mean, cov)
}

/// Fits the pristine model on the sharpest patches of every image.
pub fn fit_pristine_model(images: &[ImageBuffer], config: NiqeConfig) -> Result<NiqeModel> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::Metric("pristine corpus is empty".into()));
    }
    let mut rows = Vec::new();
    for img in images {
        let plane = Plane::from_image(img);
        if plane.w < config.patch_size || plane.h < config.patch_size {
            return Err(Error::Metric(format!(
                "pristine image {}x{} is smaller than one {} patch",
                plane.w, plane.h, config.patch_size
            )));
        }
        let feats = patch_features(&plane, config.patch_size);
        let max = feats.iter().map(|(_, s)| *s).fold(0.0, f64::max);
        if max <= 0.0 {
            continue;
        }
        rows.extend(
            feats
                .into_iter()
                .filter(|(_, s)| *s > config.sharpness_threshold * max)
                .map(|(f, _)| f),
        );
    }
    if rows.len() < 2 {
        return Err(Error::Metric(format!(
            "pristine corpus yielded {} usable patch(es); need at least 2 (flat or too small images?)",
            rows.len()
        )));
    }
    let (mean, cov) = gaussian_fit(&rows);
    Ok(NiqeModel { mean, cov, config })
}

/// Loads every supported image in `dir` and fits a pristine model.
pub fn fit_pristine_dir(dir: impl AsRef<Path>, config: NiqeConfig) -> Result<NiqeModel> {
    let images = list_images(dir)?
        .iter()
        .map(load_image)
        .collect::<Result<Vec<_>>>()?;
    fit_pristine_model(&images, config)
}

/// Symmetric pseudo-inverse via eigendecomposition.
fn pinv(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let tol = eig.eigenvalues.amax() * 1e-12 * NIQE_FEATURES as f64;
    let inv = eig.eigenvalues.map(|l| if l.abs() > tol && l != 0.0 { 1.0 / l } else { 0.0 });
    &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose()
}

impl NiqeModel {
    /// Mahalanobis-style distance between the image's feature fit and the
    /// pristine fit. Lower is more natural.
    pub fn score(&self, buf: &ImageBuffer) -> Result<f64> {
        self.score_plane(&Plane::from_image(buf))
    }

    pub(crate) fn score_plane(&self, p: &Plane) -> Result<f64> {
        let k = self.config.patch_size;
        if p.w < 2 * k || p.h < 2 * k {
            return Err(contract_err!(
                "niqe needs at least {}x{} pixels for patch size {k}, got {}x{}",
                2 * k,
                2 * k,
                p.w,
                p.h
            ));
        }
        let rows: Vec<Vec<f64>> = patch_features(p, k).into_iter().map(|(f, _)| f).collect();
        if rows.is_empty() {
            return Err(Error::Metric("image has no textured patch to score".into()));
        }
        let (mean, cov) = gaussian_fit(&rows);
        let d = &self.mean - mean;
        let inv = pinv((&self.cov + cov) * 0.5);
        let q = (d.transpose() * inv * &d)[(0, 0)];
        Ok(q.max(0.0).sqrt())
    }
}

/// Convenience wrapper for [`NiqeModel::score`].
pub fn niqe(buf: &ImageBuffer, model: &NiqeModel) -> Result<f64> {
    model.score(buf)
}
