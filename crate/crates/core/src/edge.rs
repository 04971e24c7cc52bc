//! Oriented-gradient edge maps.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{PoolMode, Tape, Var};
use crate::error::{config_err, contract_err, Result};
use crate::imaging::{ImageBuffer, LUMA_601};
use crate::Tensor;

/// Floor applied to the per-image maximum before normalizing.
pub const EDGE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EdgeKernel {
    #[default]
    Sobel,
    Scharr,
}

impl EdgeKernel {
    /// Horizontal-derivative kernel; the vertical one is its transpose.
    pub fn horizontal(self) -> [[f64; 3]; 3] {
        match self {
            EdgeKernel::Sobel => [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]],
            EdgeKernel::Scharr => [[-3.0, 0.0, 3.0], [-10.0, 0.0, 10.0], [-3.0, 0.0, 3.0]],
        }
    }

    pub fn vertical(self) -> [[f64; 3]; 3] {
        let h = self.horizontal();
        std::array::from_fn(|i| std::array::from_fn(|j| h[j][i]))
    }

    pub fn code(self) -> u32 {
        match self {
            EdgeKernel::Sobel => 0,
            EdgeKernel::Scharr => 1,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(EdgeKernel::Sobel),
            1 => Ok(EdgeKernel::Scharr),
            _ => Err(config_err!("unknown edge kernel code {code}")),
        }
    }
}

impl FromStr for EdgeKernel {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sobel" => Ok(EdgeKernel::Sobel),
            "scharr" => Ok(EdgeKernel::Scharr),
            other => Err(config_err!("unknown edge kernel `{other}` (sobel|scharr)")),
        }
    }
}

impl fmt::Display for EdgeKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKernel::Sobel => "sobel",
            EdgeKernel::Scharr => "scharr",
        })
    }
}

fn kernel_tensor(k: [[f64; 3]; 3]) -> Tensor {
    Tensor::new(&[1, 1, 3, 3], k.iter().flatten().copied().collect()).expect("3x3 kernel")
}

/// Horizontal and vertical gradients of a single-channel `[N,1,H,W]` input,
/// reflect-padded so both outputs keep the input shape.
pub fn sobel_gradients(tape: &mut Tape, gray: Var, kernel: EdgeKernel) -> Result<(Var, Var)> {
    let shape = tape.shape(gray).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(contract_err!("gradients need a [N,1,H,W] input, got {shape:?}"));
    }
    if shape[2] < 3 || shape[3] < 3 {
        return Err(contract_err!("gradients need H,W >= 3, got {shape:?}"));
    }
    let padded = tape.reflect_pad(gray, 1)?;
    let kx = tape.constant(kernel_tensor(kernel.horizontal()))?;
    let ky = tape.constant(kernel_tensor(kernel.vertical()))?;
    let gx = tape.conv2d(padded, kx, None, 1, 0)?;
    let gy = tape.conv2d(padded, ky, None, 1, 0)?;
    Ok((gx, gy))
}

/// Luma of a `[N,3,H,W]` tensor, or the input itself when it has one channel.
pub fn gray_tensor(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    match shape.as_slice() {
        [_, 1, _, _] => Ok(x),
        [_, 3, _, _] => {
            let w = tape.constant(Tensor::new(&[1, 3, 1, 1], LUMA_601.to_vec())?)?;
            tape.conv2d(x, w, None, 1, 0)
        }
        _ => Err(contract_err!("edge input must be [N,1|3,H,W], got {shape:?}")),
    }
}

/// Gradient magnitude of the grayscale input, scaled by its per-sample maximum
/// into `[0,1]`. Output shape `[N,1,H,W]`.
pub fn edge_map(tape: &mut Tape, x: Var, kernel: EdgeKernel) -> Result<Var> {
    let gray = gray_tensor(tape, x)?;
    let (gx, gy) = sobel_gradients(tape, gray, kernel)?;
    let gx2 = tape.square(gx)?;
    let gy2 = tape.square(gy)?;
    let sq = tape.add(gx2, gy2)?;
    let mag = tape.sqrt(sq)?;
    let peak = tape.pool_global(mag, PoolMode::Max)?;
    let peak = tape.clamp(peak, EDGE_EPS, f64::INFINITY)?;
    tape.div(mag, peak)
}

/// Edge map of an image as a single-channel buffer.
pub fn edge_image(buf: &ImageBuffer, kernel: EdgeKernel) -> Result<ImageBuffer> {
    let mut tape = Tape::new();
    let x = tape.constant(buf.to_tensor())?;
    let e = edge_map(&mut tape, x, kernel)?;
    ImageBuffer::from_tensor(tape.value(e))
}
