use super::Plane;
use crate::error::{contract_err, Result};
use crate::imaging::ImageBuffer;

/// Vollath F4 autocorrelation sharpness of the image luma on the 0..255
/// scale: `sum I(x,y) I(x+1,y) - sum I(x,y) I(x+2,y)`, each sum over its own
/// valid horizontal range. No `H W mu^2` term is subtracted.
pub fn vollath_f4(buf: &ImageBuffer) -> Result<f64> {
    if buf.width() < 3 {
        return Err(contract_err!("vollath needs width >= 3, got {}", buf.width()));
    }
    Ok(vollath_plane(&Plane::from_image(buf)))
}

pub(crate) fn vollath_plane(p: &Plane) -> f64 {
    let mut s1 = 0.0;
    let mut s2 = 0.0;
    for row in p.data.chunks_exact(p.w) {
        s1 += row.windows(2).map(|w| w[0] * w[1]).sum::<f64>();
        s2 += row.windows(3).map(|w| w[0] * w[2]).sum::<f64>();
    }
    s1 - s2
}
