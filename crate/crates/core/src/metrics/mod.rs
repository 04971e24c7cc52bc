//! No-reference image quality: NIQE naturalness, Vollath sharpness and
//! PCA noise level.

mod niqe;
mod noise;
mod sharpness;

use std::fmt::Write as _;
use std::path::Path;

pub use niqe::{
    estimate_aggd, fit_pristine_dir, fit_pristine_model, niqe, NiqeConfig, NiqeModel, NIQE_FEATURES,
    NIQE_PATCH, SHARPNESS_THRESHOLD,
};
pub use noise::{pca_noise, MIN_NOISE_PATCHES, NOISE_MAX_ITERS, NOISE_PATCH, NOISE_TOL};
pub use sharpness::vollath_f4;

use crate::error::{contract_err, Error, Result};
use crate::imaging::{list_images, load_image, luma, ImageBuffer};

/// Luma on the 0..255 scale.
#[derive(Clone, Debug)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn from_image(buf: &ImageBuffer) -> Plane {
        let g = luma(buf);
        Plane {
            w: g.width(),
            h: g.height(),
            data: g.pixels().iter().map(|v| v * 255.0).collect(),
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub filename: String,
    pub niqe: f64,
    pub vollath: f64,
    pub pca_noise: f64,
}

/// Metric columns with their "lower is better" flag.
pub const COLUMNS: [(&str, bool); 3] = [("NIQE", true), ("Vollath", false), ("PCA-based", true)];

/// All three metrics for one image.
pub fn measure(name: &str, buf: &ImageBuffer, model: &NiqeModel) -> Result<ImageMetrics> {
    let plane = Plane::from_image(buf);
    if plane.w < 3 {
        return Err(contract_err!("vollath needs width >= 3, got {}", plane.w));
    }
    Ok(ImageMetrics {
        filename: name.to_string(),
        niqe: model.score_plane(&plane)?,
        vollath: sharpness::vollath_plane(&plane),
        pca_noise: noise::pca_noise_plane(&plane)?,
    })
}

#[derive(Clone, Debug, Default)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
    /// `(filename, reason)` for inputs that could not be read or measured.
    pub skipped: Vec<(String, String)>,
}

impl MetricReport {
    /// Column means `(niqe, vollath, pca_noise)`; NaN for an empty report.
    pub fn means(&self) -> (f64, f64, f64) {
        let n = self.rows.len() as f64;
        let sum = |f: fn(&ImageMetrics) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        (sum(|r| r.niqe), sum(|r| r.vollath), sum(|r| r.pca_noise))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("filename,niqe,vollath,pca_noise\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{:.6},{:.6},{:.6}", r.filename, r.niqe, r.vollath, r.pca_noise);
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Plain-text table with a trailing mean row.
    pub fn to_table(&self) -> String {
        let head: Vec<String> = COLUMNS
            .iter()
            .map(|(n, lower)| format!("{n}({})", if *lower { "↓" } else { "↑" }))
            .collect();
        let (mn, mv, mp) = self.means();
        let mut lines: Vec<[String; 4]> = vec![[
            "image".into(),
            head[0].clone(),
            head[1].clone(),
            head[2].clone(),
        ]];
        for r in &self.rows {
            lines.push([
                r.filename.clone(),
                format!("{:.3}", r.niqe),
                format!("{:.2}", r.vollath),
                format!("{:.3}", r.pca_noise),
            ]);
        }
        lines.push(["mean".into(), format!("{mn:.3}"), format!("{mv:.2}"), format!("{mp:.3}")]);
        let widths: Vec<usize> = (0..4)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, l) in lines.iter().enumerate() {
            let _ = write!(out, "{:<w$}", l[0], w = widths[0]);
            for c in 1..4 {
                let pad = widths[c] - l[c].chars().count();
                let _ = write!(out, "  {}{}", " ".repeat(pad), l[c]);
            }
            out.push('\n');
            if i == 0 || i + 2 == lines.len() {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 6));
                out.push('\n');
            }
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(out, "skipped: {}", self.skipped.len());
        }
        out
    }
}

/// Worker threads for evaluation: `LEUGAN_THREADS` if set, else the number
/// of available cores.
pub fn worker_threads() -> usize {
    std::env::var("LEUGAN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over `items` on up to `threads` scoped workers; results keep input order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| {
                let f = &f;
                s.spawn(move || c.iter().map(f).collect::<Vec<U>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("metric worker panicked"))
            .collect()
    })
}

/// Measures named in-memory images.
pub fn evaluate_images(images: &[(String, ImageBuffer)], model: &NiqeModel) -> MetricReport {
    let results = parallel_map(images, worker_threads(), |(name, img)| measure(name, img, model));
    let mut report = MetricReport::default();
    for ((name, _), r) in images.iter().zip(results) {
        match r {
            Ok(m) => report.rows.push(m),
            Err(e) => report.skipped.push((name.clone(), e.to_string())),
        }
    }
    report
}

/// Measures every image in `dir` in filename order. Unreadable or
/// unmeasurable files are logged and listed in `skipped`.
pub fn evaluate_directory(dir: impl AsRef<Path>, model: &NiqeModel) -> Result<MetricReport> {
    let dir = dir.as_ref();
    let paths = list_images(dir)?;
    if paths.is_empty() {
        return Err(contract_err!("no images in {}", dir.display()));
    }
    let name = |p: &Path| p.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let results = parallel_map(&paths, worker_threads(), |p| {
        load_image(p).and_then(|img| measure(&name(p), &img, model))
    });
    let mut report = MetricReport::default();
    for (p, r) in paths.iter().zip(results) {
        match r {
            Ok(m) => report.rows.push(m),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.display());
                report.skipped.push((name(p), e.to_string()));
            }
        }
    }
    Ok(report)
}
