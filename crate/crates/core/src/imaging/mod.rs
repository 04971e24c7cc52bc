//! Image buffers, PNG/PNM I/O, colour conversion, augmentation and unpaired
//! dataset ingestion.

mod augment;
mod dataset;
pub mod synthetic;

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ExtendedColorType, ImageEncoder};

pub use augment::{
    add_gaussian_noise, augment, gaussian_blur, synth_darken, Augmenter, TRAIN_SIZE,
};
pub use dataset::{iteration_rng, list_images, Prefetcher, Sample, UnpairedDataset};

use crate::error::{contract_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Rec.601 luma weights for R, G, B.
pub const LUMA_601: [f64; 3] = [0.299, 0.587, 0.114];

/// Decoded raster with values in `[0, 1]`, interleaved row-major
/// (`(y * width + x) * channels + c`).
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(contract_err!("images have 1 or 3 channels, got {channels}"));
        }
        if width * height * channels != pixels.len() {
            return Err(shape_err!(
                "{}x{}x{} image needs {} values, got {}",
                width,
                height,
                channels,
                width * height * channels,
                pixels.len()
            ));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(contract_err!("pixel value {v} outside [0, 1]"));
        }
        Ok(ImageBuffer {
            width,
            height,
            channels,
            pixels,
        })
    }

    /// Builds an image, clamping every value into `[0, 1]`.
    pub fn from_clamped(
        width: usize,
        height: usize,
        channels: usize,
        mut pixels: Vec<f64>,
    ) -> Result<Self> {
        pixels.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Self::new(width, height, channels, pixels)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut pixels = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    pixels.push(f(x, y, c).clamp(0.0, 1.0));
                }
            }
        }
        Self::new(width, height, channels, pixels)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.pixels.len() as f64
    }

    /// One channel as a row-major plane.
    pub fn plane(&self, c: usize) -> Vec<f64> {
        self.pixels
            .iter()
            .skip(c)
            .step_by(self.channels)
            .copied()
            .collect()
    }

    /// `[1, C, H, W]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        Tensor::from_fn(&[1, c, h, w], |i| {
            let ch = i / (h * w);
            let rem = i % (h * w);
            self.pixels[rem * c + ch]
        })
    }

    /// Converts the first sample of a `[N, C, H, W]` tensor, clamping into
    /// `[0, 1]`.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        let d = t.data();
        let mut pixels = vec![0.0; c * h * w];
        for ch in 0..c {
            for i in 0..h * w {
                pixels[i * c + ch] = d[ch * h * w + i];
            }
        }
        Self::from_clamped(w, h, c, pixels)
    }

    /// Maps every value through `f`, clamping the result into `[0, 1]`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> ImageBuffer {
        ImageBuffer {
            pixels: self.pixels.iter().map(|&v| f(v).clamp(0.0, 1.0)).collect(),
            ..*self
        }
    }

    pub fn hflip(&self) -> ImageBuffer {
        let (w, c) = (self.width, self.channels);
        let mut out = self.pixels.clone();
        for y in 0..self.height {
            for x in 0..w {
                for ch in 0..c {
                    out[(y * w + x) * c + ch] = self.pixels[(y * w + (w - 1 - x)) * c + ch];
                }
            }
        }
        ImageBuffer { pixels: out, ..*self }
    }

    pub fn vflip(&self) -> ImageBuffer {
        let row = self.width * self.channels;
        let pixels = self
            .pixels
            .chunks_exact(row)
            .rev()
            .flatten()
            .copied()
            .collect();
        ImageBuffer { pixels, ..*self }
    }

    /// Rotates by 90 degrees counter-clockwise.
    pub fn rotate90(&self) -> ImageBuffer {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; self.pixels.len()];
        // new image is h wide, w tall; (x, y) -> (y, w - 1 - x)
        for y in 0..h {
            for x in 0..w {
                let (nx, ny) = (y, w - 1 - x);
                for ch in 0..c {
                    out[(ny * h + nx) * c + ch] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        ImageBuffer {
            width: h,
            height: w,
            channels: c,
            pixels: out,
        }
    }

    pub fn transpose(&self) -> ImageBuffer {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut out = vec![0.0; self.pixels.len()];
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[(x * h + y) * c + ch] = self.pixels[(y * w + x) * c + ch];
                }
            }
        }
        ImageBuffer {
            width: h,
            height: w,
            channels: c,
            pixels: out,
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuffer> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(contract_err!(
                "crop {}x{}+{}+{} outside {}x{} image",
                w,
                h,
                x0,
                y0,
                self.width,
                self.height
            ));
        }
        let c = self.channels;
        let mut pixels = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * c;
            pixels.extend_from_slice(&self.pixels[start..start + w * c]);
        }
        Ok(ImageBuffer {
            width: w,
            height: h,
            channels: c,
            pixels,
        })
    }

    /// Bilinear resampling with pixel-centre alignment.
    pub fn resize(&self, width: usize, height: usize) -> Result<ImageBuffer> {
        if width == 0 || height == 0 || self.width == 0 || self.height == 0 {
            return Err(contract_err!(
                "cannot resize {}x{} to {}x{}",
                self.width,
                self.height,
                width,
                height
            ));
        }
        let c = self.channels;
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let mut pixels = Vec::with_capacity(width * height * c);
        for y in 0..height {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let tx = fx - x0 as f64;
                for ch in 0..c {
                    let top = self.get(x0, y0, ch) * (1.0 - tx) + self.get(x1, y0, ch) * tx;
                    let bot = self.get(x0, y1, ch) * (1.0 - tx) + self.get(x1, y1, ch) * tx;
                    pixels.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
                }
            }
        }
        Ok(ImageBuffer {
            width,
            height,
            channels: c,
            pixels,
        })
    }

    /// Replicates a grayscale image into three channels.
    pub fn to_rgb(&self) -> ImageBuffer {
        if self.channels == 3 {
            return self.clone();
        }
        ImageBuffer {
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
            ..*self
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }
}

/// Rec.601 luma of an RGB image.
pub fn to_grayscale(buf: &ImageBuffer) -> Result<ImageBuffer> {
    if buf.channels != 3 {
        return Err(contract_err!(
            "to_grayscale expects an RGB image, got {} channel(s)",
            buf.channels
        ));
    }
    let pixels = buf
        .pixels
        .chunks_exact(3)
        .map(|p| (LUMA_601[0] * p[0] + LUMA_601[1] * p[1] + LUMA_601[2] * p[2]).clamp(0.0, 1.0))
        .collect();
    ImageBuffer::new(buf.width, buf.height, 1, pixels)
}

/// Luma of RGB images; grayscale images pass through.
pub fn luma(buf: &ImageBuffer) -> ImageBuffer {
    if buf.channels == 1 {
        buf.clone()
    } else {
        to_grayscale(buf).expect("rgb input")
    }
}

pub fn is_supported_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "ppm" | "pgm" | "pnm")
    )
}

/// Decodes a PNG or binary PPM/PGM file into `[0, 1]` values.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    if !is_supported_image(path) {
        return Err(image_err("unsupported extension (expected png, ppm, pgm)".into()));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let decoded = image::load_from_memory(&bytes).map_err(|e| image_err(e.to_string()))?;
    let gray = matches!(
        decoded.color(),
        ColorType::L8 | ColorType::La8 | ColorType::L16 | ColorType::La16
    );
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, raw) = if gray {
        (1, decoded.to_luma8().into_raw())
    } else {
        (3, decoded.to_rgb8().into_raw())
    };
    let pixels = raw.into_iter().map(|b| b as f64 / 255.0).collect();
    ImageBuffer::new(w, h, channels, pixels)
}

/// Encodes with round-to-nearest 8-bit quantisation. The extension picks
/// the container: `.png`, or binary `.ppm` / `.pgm`.
pub fn save_image(buf: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let image_err = |message: String| Error::Image {
        path: path.to_path_buf(),
        message,
    };
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .unwrap_or_default();
    let (w, h) = (buf.width as u32, buf.height as u32);
    let color = if buf.channels == 1 {
        ExtendedColorType::L8
    } else {
        ExtendedColorType::Rgb8
    };
    let bytes = buf.to_bytes();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    match ext.as_str() {
        "png" => {
            let img = if buf.channels == 1 {
                DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, bytes).expect("size"))
            } else {
                DynamicImage::ImageRgb8(image::RgbImage::from_raw(w, h, bytes).expect("size"))
            };
            img.save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| image_err(e.to_string()))
        }
        "ppm" | "pgm" | "pnm" => {
            let subtype = if buf.channels == 1 {
                PnmSubtype::Graymap(SampleEncoding::Binary)
            } else {
                PnmSubtype::Pixmap(SampleEncoding::Binary)
            };
            let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
            PnmEncoder::new(BufWriter::new(file))
                .with_subtype(subtype)
                .write_image(&bytes, w, h, color)
                .map_err(|e| image_err(e.to_string()))
        }
        _ => Err(image_err(format!("unsupported output extension '{ext}'"))),
    }
}
