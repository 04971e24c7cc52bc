//! Pixel and channel attention, the residual attention blend and the
//! class-activation classifier.

use rand::Rng;

use crate::autodiff::{PoolMode, Tape, Var};
use crate::error::{config_err, contract_err, Result};
use crate::nn::{flatten_pooled, Conv2d, Linear, Padding};
use crate::param::{Module, Param};
use crate::Tensor;

/// Channel reduction ratio of the squeeze-excitation MLP.
pub const SE_RATIO: usize = 8;

/// Kernel of the convolution over the pooled two-channel descriptor.
pub const PIXEL_KERNEL: usize = 7;

#[derive(Clone, Debug)]
pub struct AttentionBlock {
    /// Produces the auxiliary feature `u`.
    pub v: Conv2d,
    pub pixel_conv: Conv2d,
    pub se_reduce: Linear,
    pub se_expand: Linear,
    pub lambda: Param,
    pub cam_w: Param,
}

/// Spatial map `[N,1,H,W]` and channel weights `[N,C,1,1]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionMaps {
    pub pixel: Var,
    pub channel: Var,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if channels == 0 || channels % SE_RATIO != 0 {
            return Err(config_err!(
                "attention channels must be a positive multiple of {SE_RATIO}, got {channels}"
            ));
        }
        let hidden = channels / SE_RATIO;
        Ok(AttentionBlock {
            v: Conv2d::new(&format!("{name}.v"), channels, channels, 3, 1, Padding::Zero(1), true, rng),
            pixel_conv: Conv2d::new(
                &format!("{name}.pixel"),
                2,
                1,
                PIXEL_KERNEL,
                1,
                Padding::Zero(PIXEL_KERNEL / 2),
                true,
                rng,
            ),
            se_reduce: Linear::new(&format!("{name}.se_reduce"), channels, hidden, rng),
            se_expand: Linear::new(&format!("{name}.se_expand"), hidden, channels, rng),
            lambda: Param::new(format!("{name}.lambda"), Tensor::zeros(&[1])),
            cam_w: Param::new(format!("{name}.cam_w"), Tensor::zeros(&[channels])),
        })
    }

    pub fn channels(&self) -> usize {
        self.v.in_channels()
    }

    pub fn with_spectral_norm<R: Rng + ?Sized>(mut self, rng: &mut R) -> Self {
        self.v = self.v.with_spectral_norm(rng);
        self.pixel_conv = self.pixel_conv.with_spectral_norm(rng);
        self
    }

    fn check_channels(&self, tape: &Tape, e_r: Var) -> Result<()> {
        match *tape.shape(e_r) {
            [_, c, _, _] if c == self.channels() => Ok(()),
            ref s => Err(contract_err!(
                "attention expects [N,{},H,W], got {s:?}",
                self.channels()
            )),
        }
    }

    /// `sigmoid(conv7x7([mean_c(u); max_c(u)]))` with `u = conv(v, e_r)`.
    pub fn pixel_attention(&self, tape: &mut Tape, e_r: Var) -> Result<Var> {
        self.check_channels(tape, e_r)?;
        let u = self.v.forward(tape, e_r)?;
        let avg = tape.pool_channels(u, PoolMode::Avg)?;
        let max = tape.pool_channels(u, PoolMode::Max)?;
        let f_g = tape.concat_channels(&[avg, max])?;
        let logits = self.pixel_conv.forward(tape, f_g)?;
        tape.sigmoid(logits)
    }

    /// Squeeze-excitation weights `[N,C,1,1]`.
    pub fn channel_attention(&self, tape: &mut Tape, e_r: Var) -> Result<Var> {
        self.check_channels(tape, e_r)?;
        let n = tape.shape(e_r)[0];
        let pooled = tape.pool_global(e_r, PoolMode::Avg)?;
        let rows = flatten_pooled(tape, pooled)?;
        let h = self.se_reduce.forward(tape, rows)?;
        let h = tape.relu(h)?;
        let s = self.se_expand.forward(tape, h)?;
        let s = tape.sigmoid(s)?;
        tape.reshape(s, &[n, self.channels(), 1, 1])
    }

    pub fn maps(&self, tape: &mut Tape, e_r: Var) -> Result<AttentionMaps> {
        Ok(AttentionMaps {
            pixel: self.pixel_attention(tape, e_r)?,
            channel: self.channel_attention(tape, e_r)?,
        })
    }

    /// Pixel map broadcast against channel weights, `[N,C,H,W]`.
    pub fn combined(&self, tape: &mut Tape, maps: AttentionMaps) -> Result<Var> {
        tape.mul(maps.pixel, maps.channel)
    }

    pub fn cam(&self, tape: &mut Tape, e_r: Var) -> Result<(Var, Var)> {
        let w = tape.param(&self.cam_w)?;
        cam_logit(tape, e_r, w)
    }
}

impl Module for AttentionBlock {
    fn visit(&self, f: &mut dyn FnMut(&Param)) {
        self.v.visit(f);
        self.pixel_conv.visit(f);
        self.se_reduce.visit(f);
        self.se_expand.visit(f);
        f(&self.lambda);
        f(&self.cam_w);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.v.visit_mut(f);
        self.pixel_conv.visit_mut(f);
        self.se_reduce.visit_mut(f);
        self.se_expand.visit_mut(f);
        f(&mut self.lambda);
        f(&mut self.cam_w);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Param)) {
        self.v.visit_buffers(f);
        self.pixel_conv.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.v.visit_buffers_mut(f);
        self.pixel_conv.visit_buffers_mut(f);
    }
}

/// `lambda * att * e_r + e_r`; `att` may be a spatial or channel map or their
/// product.
pub fn residual_blend(tape: &mut Tape, e_r: Var, att: Var, lambda: Var) -> Result<Var> {
    let es = tape.shape(e_r).to_vec();
    let as_ = tape.shape(att).to_vec();
    let fits = es.len() == 4
        && as_.len() == 4
        && es.iter().zip(&as_).all(|(&e, &a)| a == e || a == 1);
    if !fits {
        return Err(contract_err!("attention map {as_:?} does not broadcast over {es:?}"));
    }
    let weighted = tape.mul(att, e_r)?;
    let scaled = tape.mul(lambda, weighted)?;
    tape.add(scaled, e_r)
}

/// `eta = sigmoid(sum_k w_k sum_xy e_r^k)` per sample (`[N,1]`) and the
/// unnormalized activation map `sum_k w_k e_r^k` (`[N,1,H,W]`).
pub fn cam_logit(tape: &mut Tape, e_r: Var, cam_w: Var) -> Result<(Var, Var)> {
    let c = match *tape.shape(e_r) {
        [_, c, _, _] => c,
        ref s => return Err(contract_err!("class activation expects [N,C,H,W], got {s:?}")),
    };
    if tape.shape(cam_w) != [c] {
        return Err(contract_err!(
            "class activation weights have shape {:?}, expected [{c}]",
            tape.shape(cam_w)
        ));
    }
    let sums = tape.pool_global(e_r, PoolMode::Sum)?;
    let rows = flatten_pooled(tape, sums)?;
    let col = tape.reshape(cam_w, &[c, 1])?;
    let logit = tape.matmul(rows, col)?;
    let eta = tape.sigmoid(logit)?;
    let kernel = tape.reshape(cam_w, &[1, c, 1, 1])?;
    let map = tape.conv2d(e_r, kernel, None, 1, 0)?;
    Ok((eta, map))
}

/// Min-max scaling of a `[1,1,H,W]` map into `[0,1]` for display.
pub fn normalize_for_display(map: &Tensor) -> Tensor {
    let lo = map.data().iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return Tensor::zeros(map.shape());
    }
    map.map(|v| (v - lo) / span)
}
